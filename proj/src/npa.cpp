#include "brnpa/npa.hpp"

#include <algorithm>
#include <cmath>

#include "brnpa/autograd.hpp"
#include "brnpa/error.hpp"
#include "brnpa/rng.hpp"

namespace brnpa {

FeatureVolume::FeatureVolume(Tensor data) : data_(std::move(data)) {
  if (!data_.defined() || data_.rank() != 3)
    throw ShapeError("feature volume must be rank 3 (C x H x W), got " +
                     (data_.defined() ? shape_to_string(data_.shape()) : std::string("undefined")));
  if (data_.dim(0) == 0 || data_.dim(1) == 0 || data_.dim(2) == 0)
    throw ShapeError("feature volume extents must be >= 1, got " + shape_to_string(data_.shape()));
}

FeatureVolume FeatureVolume::from(std::size_t channels, std::size_t height, std::size_t width,
                                  std::vector<double> values) {
  return FeatureVolume(Tensor::from({channels, height, width}, std::move(values)));
}

std::pair<std::size_t, std::size_t> FeatureVolume::coords(std::size_t flat) const {
  if (flat >= positions()) throw ValidationError("flat index out of range");
  return {flat / width(), flat % width()};
}

std::size_t FeatureVolume::flat_index(std::size_t row, std::size_t col) const {
  if (row >= height() || col >= width()) throw ValidationError("position out of range");
  return row * width() + col;
}

double FeatureVolume::value(std::size_t channel, std::size_t flat) const {
  return data_.values()[channel * positions() + flat];
}

std::vector<double> FeatureVolume::norms() const {
  auto sq = activation_scores(*this).scores;
  for (auto& v : sq) v = std::sqrt(v);
  return sq;
}

std::string to_string(Selection s) { return s == Selection::Active ? "active" : "random"; }

Selection selection_from_string(const std::string& s) {
  if (s == "active") return Selection::Active;
  if (s == "random") return Selection::Random;
  throw ValidationError("selection must be 'active' or 'random', got '" + s + "'");
}

void NpaConfig::validate(std::size_t positions) const {
  if (n == 0) throw ValidationError("N must be at least 1");
  if (n > positions)
    throw ValidationError("N exceeds spatial positions (N=" + std::to_string(n) +
                          ", H*W=" + std::to_string(positions) + ")");
  if (!(norm_epsilon > 0.0)) throw ValidationError("norm epsilon must be positive");
}

ActivationMap activation_scores(const FeatureVolume& volume) {
  const std::size_t c = volume.channels(), p = volume.positions();
  const auto v = volume.tensor().values();
  ActivationMap out{std::vector<double>(p, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < p; ++i) out.scores[i] += v[ch * p + i] * v[ch * p + i];
  return out;
}

std::span<const double> AttentionStack::map(std::size_t k) const {
  if (k >= size()) throw ValidationError("attention map index out of range");
  return std::span<const double>(weights).subspan(k * positions(), positions());
}

std::size_t Representatives::fallback_count() const {
  return static_cast<std::size_t>(
      std::count(attention.fallback.begin(), attention.fallback.end(), true));
}

namespace {

// Shared pieces of the similarity computation over a C x P view.
struct VolumeView {
  Tensor flat;     // C x P
  Tensor guarded;  // P, max(norm, eps)
};

// `norms` may carry precomputed norms; they are only used when no history is
// recorded, since the guarded norms must stay differentiable otherwise.
VolumeView make_view(const FeatureVolume& volume, double eps, const std::vector<double>* norms = nullptr) {
  const std::size_t c = volume.channels(), p = volume.positions();
  Tensor flat = reshape(volume.tensor(), {c, p});
  if (norms && !(grad_mode_enabled() && volume.tensor().requires_grad())) {
    std::vector<double> g(p);
    for (std::size_t i = 0; i < p; ++i) g[i] = std::max((*norms)[i], eps);
    return {flat, Tensor::from({p}, std::move(g))};
  }
  Tensor guarded = clamp_min(sqrt(sum(mul(flat, flat), 0)), eps);
  return {flat, guarded};
}

Tensor similarity_from_view(const VolumeView& view, std::size_t ref, double floor) {
  const std::size_t c = view.flat.dim(0), p = view.flat.dim(1);
  Tensor anchor = reshape(select(view.flat, 1, ref), {1, c});
  Tensor dots = reshape(matmul(anchor, view.flat), {p});
  Tensor cosine = div(div(dots, view.guarded), select(view.guarded, 0, ref));
  return clamp_min(cosine, floor);
}

}  // namespace

Tensor similarity_map(const FeatureVolume& volume, std::size_t ref, double similarity_floor,
                      double norm_epsilon) {
  if (ref >= volume.positions())
    throw ValidationError("reference index " + std::to_string(ref) + " out of range for " +
                          std::to_string(volume.positions()) + " positions");
  return similarity_from_view(make_view(volume, norm_epsilon), ref, similarity_floor);
}

Representatives extract_representatives(const FeatureVolume& volume, const NpaConfig& config) {
  const std::size_t p = volume.positions();
  config.validate(p);
  const double eps = config.norm_epsilon;

  std::vector<double> scores = activation_scores(volume).scores;
  std::vector<double> norms(scores);
  for (auto& v : norms) v = std::sqrt(v);
  const VolumeView view = make_view(volume, eps, &norms);

  Representatives out;
  out.attention.height = volume.height();
  out.attention.width = volume.width();
  out.attention.weights.reserve(config.n * p);
  out.score_trace.push_back(scores);

  std::vector<bool> taken(p, false);
  std::vector<Tensor> rows;
  Rng rng(config.seed);

  for (std::size_t k = 0; k < config.n; ++k) {
    std::size_t pick = p;
    bool fallback = false;
    if (config.selection == Selection::Random) {
      std::vector<std::size_t> pool;
      pool.reserve(p - k);
      for (std::size_t i = 0; i < p; ++i)
        if (!taken[i]) pool.push_back(i);
      pick = pool[rng.below(pool.size())];
      fallback = !(norms[pick] > eps);
    } else {
      // Already-chosen positions are excluded so ranks never repeat a location.
      for (std::size_t i = 0; i < p; ++i)
        if (!taken[i] && (pick == p || scores[i] > scores[pick])) pick = i;
      if (!(scores[pick] > 0.0)) {
        fallback = true;
        pick = static_cast<std::size_t>(std::find(taken.begin(), taken.end(), false) - taken.begin());
      }
    }
    taken[pick] = true;
    out.scores_at_selection.push_back(scores[pick]);

    std::vector<double> weights(p, 0.0);
    Tensor row;
    if (fallback) {
      weights[pick] = 1.0;
      row = select(view.flat, 1, pick);
    } else if (config.refine) {
      Tensor sim = similarity_from_view(view, pick, config.similarity_floor);
      Tensor w = div(sim, clamp_min(sum(sim), eps));
      row = reshape(matmul(view.flat, reshape(w, {p, 1})), {volume.channels()});
      std::copy(w.values().begin(), w.values().end(), weights.begin());
    } else {
      {
        NoGradGuard no_grad;
        Tensor sim = similarity_from_view(view, pick, config.similarity_floor);
        Tensor w = div(sim, clamp_min(sum(sim), eps));
        std::copy(w.values().begin(), w.values().end(), weights.begin());
      }
      row = select(view.flat, 1, pick);
    }

    for (std::size_t i = 0; i < p; ++i) scores[i] = (1.0 - weights[i]) * scores[i];
    out.score_trace.push_back(scores);

    if (!config.refine && !fallback) {
      std::fill(weights.begin(), weights.end(), 0.0);
      weights[pick] = 1.0;
    }
    out.attention.weights.insert(out.attention.weights.end(), weights.begin(), weights.end());
    out.attention.selected.push_back(pick);
    out.attention.fallback.push_back(fallback);
    rows.push_back(std::move(row));
  }

  out.features = stack(rows);
  return out;
}

Tensor concat_representatives(const Tensor& features) {
  if (!features.defined() || features.rank() != 2)
    throw ShapeError("representatives must be an N x C matrix");
  return reshape(features, {features.numel()});
}

// ---------------------------------------------------------------------------

namespace {

// True when any selection in `rep` was close enough to a tie, or any cosine
// close enough to the clamp floor, that a small perturbation could flip it.
std::pair<bool, bool> near_discontinuity(const FeatureVolume& volume, const Representatives& rep,
                                         const NpaConfig& config, const GradcheckOptions& opt) {
  bool tie = false, clamp = false;
  std::vector<bool> taken(volume.positions(), false);
  for (std::size_t k = 0; k < rep.attention.size(); ++k) {
    const auto& scores = rep.score_trace[k];
    const std::size_t pick = rep.attention.selected[k];
    if (config.selection == Selection::Active) {
      double runner_up = -1.0;
      for (std::size_t i = 0; i < scores.size(); ++i)
        if (!taken[i] && i != pick) runner_up = std::max(runner_up, scores[i]);
      if (runner_up >= 0.0 && scores[pick] - runner_up < opt.tie_margin * scores[pick]) tie = true;
    }
    taken[pick] = true;
    if (!rep.attention.fallback[k]) {
      NoGradGuard no_grad;
      Tensor cosine = similarity_map(volume, pick, -2.0, config.norm_epsilon);
      for (double s : cosine.values())
        if (std::abs(s - config.similarity_floor) < opt.clamp_margin) clamp = true;
    }
  }
  return {tie, clamp};
}

}  // namespace

GradcheckReport npa_gradcheck(std::size_t channels, std::size_t height, std::size_t width,
                              const NpaConfig& config, std::size_t trials,
                              const GradcheckOptions& options) {
  if (height * width > 64 || channels > 16)
    throw ValidationError("npa_gradcheck is limited to H*W <= 64 and C <= 16");
  config.validate(height * width);

  GradcheckReport report;
  report.requested = trials;
  Rng rng(options.seed);
  const std::size_t numel = channels * height * width;

  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<double> values(numel);
    for (auto& v : values) v = rng.normal();
    std::vector<double> probe_values(config.n * channels);
    for (auto& v : probe_values) v = rng.uniform(-1.0, 1.0);
    const Tensor probe = Tensor::from({config.n, channels}, probe_values);

    Tensor leaf = Tensor::parameter({channels, height, width}, values);
    const FeatureVolume volume(leaf);
    const Representatives rep = extract_representatives(volume, config);

    const auto [tie, clamp] = near_discontinuity(volume, rep, config, options);
    if (tie) {
      ++report.excluded_near_tie;
      continue;
    }
    if (clamp) {
      ++report.excluded_near_clamp;
      continue;
    }

    backward(sum(mul(rep.features, probe)));
    const std::vector<double> analytic = leaf.grad();

    auto probe_value = [&](const std::vector<double>& v) {
      NoGradGuard no_grad;
      const Representatives r = extract_representatives(
          FeatureVolume(Tensor::from({channels, height, width}, v)), config);
      return sum(mul(r.features, probe)).item();
    };
    std::vector<double> numeric(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      std::vector<double> up = values, down = values;
      up[i] += options.step;
      down[i] -= options.step;
      numeric[i] = (probe_value(up) - probe_value(down)) / (2.0 * options.step);
    }

    double diff = 0.0, scale = 1e-12;
    for (std::size_t i = 0; i < numel; ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    report.max_relative_error = std::max(report.max_relative_error, diff / scale);
    ++report.checked;
  }
  return report;
}

}  // namespace brnpa

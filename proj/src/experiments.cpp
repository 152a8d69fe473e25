#include "brnpa/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "brnpa/error.hpp"
#include "brnpa/io.hpp"
#include "brnpa/metrics.hpp"
#include "brnpa/rng.hpp"

namespace brnpa {

using nlohmann::json;

json Assertion::to_json() const {
  json j{{"name", name}, {"evaluated", evaluated}, {"detail", detail}};
  j["passed"] = evaluated ? json(passed) : json(nullptr);
  return j;
}

std::vector<std::string> failed(const std::vector<Assertion>& assertions) {
  std::vector<std::string> out;
  for (const auto& a : assertions)
    if (a.evaluated && !a.passed) out.push_back(a.name);
  return out;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed << v;
  return os.str();
}

Assertion at_least(const std::string& name, double lhs, double rhs) {
  return {name, true, lhs >= rhs, fmt(lhs) + " vs " + fmt(rhs)};
}

json assertions_json(const std::vector<Assertion>& assertions) {
  json a = json::array();
  for (const auto& x : assertions) a.push_back(x.to_json());
  return a;
}

}  // namespace

const AblationRow& AblationReport::row(Selection selection, bool refine) const {
  for (const auto& r : rows)
    if (r.selection == selection && r.refine == refine) return r;
  throw ValidationError("ablation report has no such row");
}

json AblationReport::to_json() const {
  json r = json::array();
  for (const auto& row : rows)
    r.push_back({{"label", row.label},
                 {"selection", to_string(row.selection)},
                 {"refine", row.refine},
                 {"test_accuracy", row.test_accuracy},
                 {"per_seed", row.per_seed}});
  return {{"rows", r}, {"gap", gap}, {"assertions", assertions_json(assertions)}};
}

AblationReport run_ablation_grid(const ExperimentConfig& base, const ShapesDataset& data, const RunSink& sink) {
  if (base.model.head != HeadKind::Npa) throw ValidationError("model.head: the ablation grid needs the npa head");
  AblationReport report;
  const std::pair<Selection, bool> variants[] = {
      {Selection::Random, false}, {Selection::Random, true}, {Selection::Active, false}, {Selection::Active, true}};
  for (const auto& [selection, refine] : variants) {
    ExperimentConfig cfg = base;
    cfg.model.npa.selection = selection;
    cfg.model.npa.refine = refine;
    const std::string label = std::string(selection == Selection::Active ? "Active" : "Random") + "/" +
                              (refine ? "Yes" : "No");
    const std::string run = selection == Selection::Active ? (refine ? "active-refine" : "active-norefine")
                                                           : (refine ? "random-refine" : "random-norefine");
    AblationRow row{label, selection, refine, 0.0, {}};
    const auto seeds = base.study_seeds();
    cfg.seeds.clear();
    for (auto seed : seeds) {
      cfg.seed = seed;
      const auto result = train(cfg, data);
      if (sink) sink(seeds.size() > 1 ? run + "-seed" + std::to_string(seed) : run, cfg, result);
      row.per_seed.push_back(result.test_accuracy);
      row.test_accuracy += result.test_accuracy / static_cast<double>(seeds.size());
    }
    report.rows.push_back(std::move(row));
  }
  const double best = report.row(Selection::Active, true).test_accuracy;
  for (const auto& r : report.rows)
    if (r.label != "Active/Yes") report.assertions.push_back(at_least("Active/Yes >= " + r.label, best, r.test_accuracy));
  report.gap = best - report.row(Selection::Random, false).test_accuracy;
  return report;
}

double RankHeadReport::accuracy(const std::string& label) const {
  for (const auto& [l, a] : rows)
    if (l == label) return a;
  throw ValidationError("rank-head report has no row '" + label + "'");
}

json RankHeadReport::to_json() const {
  json r = json::array();
  for (std::size_t j = 0; j < rows.size(); ++j) {
    json per = json::array();
    for (const auto& s : per_seed) per.push_back(s.at(j));
    r.push_back({{"vectors", rows[j].first}, {"test_accuracy", rows[j].second}, {"per_seed", per}});
  }
  return {{"rows", r}, {"seeds", seeds}, {"assertions", assertions_json(assertions)}};
}

RankHeadReport run_rank_head_experiment(const ExperimentConfig& config, const ShapesDataset& data,
                                        const RunSink& sink) {
  ExperimentConfig cfg = config;
  cfg.model.rank_heads = true;
  cfg.validate();
  RankHeadReport report;
  const auto& labels = rank_head_labels();
  report.seeds = config.study_seeds();
  cfg.seeds.clear();
  for (std::size_t j = 0; j < labels.size(); ++j) report.rows.emplace_back(labels[j], 0.0);
  for (auto seed : report.seeds) {
    cfg.seed = seed;
    const auto result = train(cfg, data);
    if (sink) sink(report.seeds.size() > 1 ? "rank-heads-seed" + std::to_string(seed) : "rank-heads", cfg, result);
    report.per_seed.push_back(result.head_accuracies);
    for (std::size_t j = 0; j < labels.size(); ++j)
      report.rows[j].second += result.head_accuracies.at(j) / static_cast<double>(report.seeds.size());
  }
  const auto acc = [&](std::size_t j) { return report.rows[j].second; };
  report.assertions.push_back(at_least(labels[3] + " >= " + labels[4], acc(3), acc(4)));
  report.assertions.push_back(at_least(labels[4] + " >= " + labels[5], acc(4), acc(5)));
  report.assertions.push_back(at_least(labels[0] + " >= " + labels[2], acc(0), acc(2)));
  return report;
}

SparsitySummary mean_sparsity(const ToyNet& model, const std::vector<ShapeSample>& samples, std::uint64_t seed) {
  NoGradGuard guard;
  SparsitySummary out;
  double fg = 0.0;
  const std::size_t size = model.spec().input_size;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto r = model.forward(image_tensor(samples[i], size), eval_seed(seed, i));
    if (!r.attention) throw ValidationError("sparsity needs an attention head");
    try {
      out.mean += sparsity(*r.attention, FeatureVolume(r.volume)).s;
      fg += foreground_fraction(*r.attention, samples[i].mask, size, size);
      ++out.counted;
    } catch (const ValidationError&) {
      ++out.skipped;
    }
  }
  if (out.counted) {
    out.mean /= static_cast<double>(out.counted);
    out.foreground_fraction = fg / static_cast<double>(out.counted);
  }
  return out;
}

json ModelSummary::to_json() const {
  return {{"strides", strides},
          {"map_size", std::to_string(map_height) + "x" + std::to_string(map_width)},
          {"distillation", distilled},
          {"test_accuracy", test_accuracy},
          {"sparsity", sparsity.mean},
          {"sparsity_samples", sparsity.counted},
          {"sparsity_skipped", sparsity.skipped},
          {"foreground_fraction", sparsity.foreground_fraction}};
}

json DistillReport::to_json() const {
  return {{"teacher", teacher.to_json()},   {"student", student.to_json()},
          {"alpha", alpha},                 {"accuracy_delta", accuracy_delta},
          {"degenerate", degenerate},       {"flags", flags},
          {"assertions", assertions_json(assertions)}};
}

DistillReport distill_resolution_study(const DistillConfig& config, const ShapesDataset& data,
                                       const std::string& work_dir, const RunSink& sink) {
  const auto& tm = config.teacher.model;
  const auto& sm = config.student.model;
  if (tm.head == HeadKind::AvgPool || sm.head == HeadKind::AvgPool)
    throw ValidationError("the resolution study needs attention heads on both models");
  DistillReport report;
  report.alpha = config.alpha;
  report.degenerate = tm.strides == sm.strides && config.alpha == 1.0;
  if (!report.degenerate && tm.map_extent() >= sm.map_extent())
    throw ValidationError("student.model.strides: teacher maps (" + std::to_string(tm.map_extent()) +
                          ") must be strictly coarser than the student's (" + std::to_string(sm.map_extent()) + ")");

  const auto teacher = train(config.teacher, data);
  if (sink) sink("teacher", config.teacher, teacher);
  std::filesystem::create_directories(work_dir);
  const auto ck_path = (std::filesystem::path(work_dir) / "teacher.ckpt").string();
  io::save_checkpoint(ck_path, teacher.model.to_checkpoint(config.teacher.to_json()));

  ExperimentConfig student_cfg = config.student;
  student_cfg.alpha = config.alpha;
  student_cfg.teacher_checkpoint = ck_path;
  const auto student = train(student_cfg, data, &teacher.model);
  if (sink) sink("student", student_cfg, student);

  auto summarize = [&](const ExperimentConfig& cfg, const TrainResult& r, bool distilled) {
    ModelSummary m;
    m.strides = cfg.model.strides;
    m.map_height = m.map_width = cfg.model.map_extent();
    m.distilled = distilled;
    m.test_accuracy = r.test_accuracy;
    m.sparsity = mean_sparsity(r.model, data.test, cfg.seed);
    return m;
  };
  report.teacher = summarize(config.teacher, teacher, false);
  report.student = summarize(student_cfg, student, true);
  report.accuracy_delta = report.student.test_accuracy - report.teacher.test_accuracy;
  if (report.degenerate) {
    report.flags.push_back("degenerate: plain training");
    report.assertions.push_back({"sparsity(student) > sparsity(teacher)", false, false,
                                 "not evaluated for identical strides with alpha = 1"});
  } else {
    report.assertions.push_back({"sparsity(student) > sparsity(teacher)", true,
                                 report.student.sparsity.mean > report.teacher.sparsity.mean,
                                 fmt(report.student.sparsity.mean) + " vs " + fmt(report.teacher.sparsity.mean)});
  }
  return report;
}

json TimingStats::to_json() const {
  return {{"iterations", iterations}, {"mean_ms", mean_ms}, {"p50_ms", p50_ms}, {"p95_ms", p95_ms}};
}

json BenchReport::to_json() const {
  json j{{"shape", {channels, height, width}}, {"n", n}, {"threads", 1}};
  j["npa"] = npa ? npa->to_json() : json(nullptr);
  j["learned_attention"] = learned_attention ? learned_attention->to_json() : json(nullptr);
  return j;
}

namespace {

template <typename F>
TimingStats time_it(std::size_t iterations, F&& f) {
  std::vector<double> ms;
  for (std::size_t i = 0; i < iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  TimingStats s;
  s.iterations = iterations;
  for (double x : ms) s.mean_ms += x;
  s.mean_ms /= static_cast<double>(iterations);
  std::sort(ms.begin(), ms.end());
  // Nearest-rank percentiles.
  auto pct = [&](double q) {
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(ms.size())));
    return ms[std::clamp<std::size_t>(rank, 1, ms.size()) - 1];
  };
  s.p50_ms = pct(0.50);
  s.p95_ms = pct(0.95);
  return s;
}

Tensor random_tensor(Shape shape, Rng& rng, double scale, bool nonnegative) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    x = scale * rng.normal();
    if (nonnegative) x = std::abs(x);
  }
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

BenchReport run_bench(std::size_t channels, std::size_t height, std::size_t width, std::size_t n,
                      std::size_t iterations, std::uint64_t seed, std::optional<std::size_t> baseline_iterations) {
  BenchReport report{channels, height, width, n, std::nullopt, std::nullopt};
  if (channels == 0 || height == 0 || width == 0) throw ValidationError("bench: empty shape");
  NpaConfig cfg;
  cfg.n = n;
  cfg.seed = seed;
  cfg.validate(height * width);
  const std::size_t base_iters = baseline_iterations.value_or(iterations);
  if (iterations == 0 && base_iters == 0) return report;

  NoGradGuard guard;
  Rng rng(seed);
  // Post-ReLU style features.
  const Tensor volume = random_tensor({channels, height, width}, rng, 1.0, true);
  const double conv_std = std::sqrt(2.0 / static_cast<double>(channels * 9));
  LearnedAttentionParams params{
      {random_tensor({channels, channels, 3, 3}, rng, conv_std, false), Tensor::zeros({channels}), 1, 1},
      {random_tensor({channels, channels, 3, 3}, rng, conv_std, false), Tensor::zeros({channels}), 1, 1},
      {random_tensor({n, channels, 1, 1}, rng, std::sqrt(2.0 / static_cast<double>(channels)), false),
       Tensor::zeros({n}), 1, 0}};

  if (iterations > 0)
    report.npa = time_it(iterations, [&] {
      const auto r = extract_representatives(FeatureVolume(volume), cfg);
      if (r.features.numel() != n * channels) throw AssertionFailure("bench: bad feature extent");
    });
  if (base_iters > 0)
    report.learned_attention = time_it(base_iters, [&] {
      const auto r = learned_attention_head(volume, params);
      if (r.first.numel() != n * channels) throw AssertionFailure("bench: bad feature extent");
    });
  return report;
}

}  // namespace brnpa

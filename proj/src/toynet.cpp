#include "brnpa/toynet.hpp"

#include <cmath>

#include "brnpa/autograd.hpp"
#include "brnpa/error.hpp"
#include "brnpa/rng.hpp"

namespace brnpa {

namespace {

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Each parameter draws from its own stream, so adding heads never shifts
// the initial values of the others.
Tensor init_normal(const std::string& name, Shape shape, double stddev, std::uint64_t seed) {
  Rng rng(mix_seed(seed, name_hash(name)));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::parameter(std::move(shape), std::move(v), name);
}

Tensor init_zero(const std::string& name, Shape shape) {
  const auto n = shape_numel(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, 0.0), name);
}

ConvLayer make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                    std::size_t stride, std::uint64_t seed, double gain = 2.0) {
  const double fan_in = static_cast<double>(cin * k * k);
  return {init_normal(name + ".kernel", {cout, cin, k, k}, std::sqrt(gain / fan_in), seed),
          init_zero(name + ".bias", {cout}), stride, k / 2};
}

DenseLayer make_dense(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed) {
  return {init_normal(name + ".weight", {out, in}, std::sqrt(1.0 / static_cast<double>(in)), seed),
          init_zero(name + ".bias", {out})};
}

void append(std::vector<Tensor>& out, const ConvLayer& c) {
  out.push_back(c.kernel);
  out.push_back(c.bias);
}

void append(std::vector<Tensor>& out, const DenseLayer& d) {
  out.push_back(d.weight);
  out.push_back(d.bias);
}

}  // namespace

Tensor DenseLayer::apply(const Tensor& input) const {
  const std::size_t d = weight.dim(1);
  if (input.numel() != d)
    throw ShapeError("dense: expected " + std::to_string(d) + " inputs, got " + std::to_string(input.numel()));
  return add(reshape(matmul(weight, reshape(input, {d, 1})), {weight.dim(0)}), bias);
}

std::pair<Tensor, AttentionStack> learned_attention_head(const Tensor& volume,
                                                        const LearnedAttentionParams& params) {
  if (volume.rank() != 3) throw ShapeError("learned attention expects a C x H x W volume");
  const std::size_t c = volume.dim(0), h = volume.dim(1), w = volume.dim(2), p = h * w;
  const Tensor block = relu(add(params.conv2.apply(relu(params.conv1.apply(volume))), volume));
  const Tensor maps = relu(params.attention.apply(block));
  const std::size_t n = maps.dim(0);
  const Tensor flat_maps = reshape(maps, {n, p});
  const Tensor features =
      mul(matmul(flat_maps, transpose(reshape(volume, {c, p}))), 1.0 / static_cast<double>(p));

  AttentionStack stack;
  stack.height = h;
  stack.width = w;
  stack.weights.assign(n * p, 0.0);
  const auto raw = flat_maps.values();
  for (std::size_t k = 0; k < n; ++k) {
    double total = 0.0;
    std::size_t best = 0;
    for (std::size_t i = 0; i < p; ++i) {
      total += raw[k * p + i];
      if (raw[k * p + i] > raw[k * p + best]) best = i;
    }
    for (std::size_t i = 0; i < p; ++i)
      stack.weights[k * p + i] = total > 0.0 ? raw[k * p + i] / total : 1.0 / static_cast<double>(p);
    stack.selected.push_back(best);
    stack.fallback.push_back(!(total > 0.0));
  }
  return {features, std::move(stack)};
}

const std::vector<std::string>& rank_head_labels() {
  static const std::vector<std::string> labels{
      "{f̂1,f̂2,f̂3}", "{f̂1,f̂2}", "{f̂2,f̂3}",
      "{f̂1}", "{f̂2}", "{f̂3}"};
  return labels;
}

const std::vector<std::vector<std::size_t>>& rank_head_subsets() {
  static const std::vector<std::vector<std::size_t>> subsets{{0, 1, 2}, {0, 1}, {1, 2}, {0}, {1}, {2}};
  return subsets;
}

ToyNet::ToyNet(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::size_t cin = spec_.input_channels;
  for (std::size_t i = 0; i < spec_.channels.size(); ++i) {
    stages_.push_back(make_conv("stage" + std::to_string(i), cin, spec_.channels[i], 3, spec_.strides[i], seed));
    cin = spec_.channels[i];
  }
  const std::size_t c = spec_.feature_channels();
  std::size_t features = c;
  if (spec_.head == HeadKind::LearnedAttention) {
    // Second block conv starts small so the block begins near identity.
    attention_ = LearnedAttentionParams{make_conv("block.conv1", c, c, 3, 1, seed),
                                        make_conv("block.conv2", c, c, 3, 1, seed, 0.1),
                                        make_conv("attention", c, spec_.npa.n, 1, 1, seed)};
  }
  if (spec_.head != HeadKind::AvgPool) features = spec_.npa.n * c;
  classifier_ = make_dense("classifier", features, spec_.classes, seed);
  if (spec_.rank_heads) {
    const auto& subsets = rank_head_subsets();
    for (std::size_t j = 1; j < subsets.size(); ++j)
      aux_.push_back(make_dense("aux" + std::to_string(j), subsets[j].size() * c, spec_.classes, seed));
  }
}

Tensor ToyNet::backbone(const Tensor& image) const {
  const Shape expected{spec_.input_channels, spec_.input_size, spec_.input_size};
  if (image.shape() != expected)
    throw ShapeError("image shape " + shape_to_string(image.shape()) + " does not match model input " +
                     shape_to_string(expected));
  Tensor x = image;
  for (const auto& stage : stages_) x = relu(stage.apply(x));
  return x;
}

ForwardResult ToyNet::forward(const Tensor& image, std::uint64_t npa_seed) const {
  ForwardResult out;
  out.volume = backbone(image);
  const std::size_t c = out.volume.dim(0), p = out.volume.dim(1) * out.volume.dim(2);
  switch (spec_.head) {
    case HeadKind::Npa: {
      NpaConfig cfg = spec_.npa;
      cfg.seed = npa_seed;
      auto reps = extract_representatives(FeatureVolume(out.volume), cfg);
      out.features = reps.features;
      out.attention = std::move(reps.attention);
      out.logits = classifier_.apply(concat_representatives(out.features));
      break;
    }
    case HeadKind::LearnedAttention: {
      auto [features, stack] = learned_attention_head(out.volume, *attention_);
      out.features = features;
      out.attention = std::move(stack);
      out.logits = classifier_.apply(concat_representatives(out.features));
      break;
    }
    case HeadKind::AvgPool:
      out.features = mean(reshape(out.volume, {c, p}), 1);
      out.logits = classifier_.apply(out.features);
      break;
  }
  if (!aux_.empty()) {
    const Tensor detached = stop_gradient(out.features);
    const auto& subsets = rank_head_subsets();
    for (std::size_t j = 1; j < subsets.size(); ++j) {
      std::vector<Tensor> rows;
      for (auto k : subsets[j]) rows.push_back(select(detached, 0, k));
      out.aux_logits.push_back(aux_[j - 1].apply(concat(rows)));
    }
  }
  return out;
}

std::pair<Tensor, std::vector<ForwardResult>> ToyNet::forward_batch(
    std::span<const Tensor> images, std::span<const std::uint64_t> npa_seeds) const {
  if (images.size() != npa_seeds.size()) throw ShapeError("forward_batch: one seed per image required");
  if (images.empty()) throw ShapeError("forward_batch: empty batch");
  std::vector<ForwardResult> results;
  std::vector<Tensor> logits;
  for (std::size_t b = 0; b < images.size(); ++b) {
    results.push_back(forward(images[b], npa_seeds[b]));
    logits.push_back(results.back().logits);
  }
  return {stack(logits), std::move(results)};
}

std::vector<Tensor> ToyNet::backbone_parameters() const {
  std::vector<Tensor> out;
  for (const auto& s : stages_) append(out, s);
  return out;
}

std::vector<Tensor> ToyNet::parameters() const {
  std::vector<Tensor> out = backbone_parameters();
  if (attention_) {
    append(out, attention_->conv1);
    append(out, attention_->conv2);
    append(out, attention_->attention);
  }
  append(out, classifier_);
  for (const auto& a : aux_) append(out, a);
  return out;
}

std::vector<std::pair<std::string, std::vector<Tensor>>> ToyNet::parameter_groups() const {
  std::vector<std::pair<std::string, std::vector<Tensor>>> groups;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    std::vector<Tensor> g;
    append(g, stages_[i]);
    groups.emplace_back("stage" + std::to_string(i), std::move(g));
  }
  std::vector<Tensor> head;
  if (attention_) {
    append(head, attention_->conv1);
    append(head, attention_->conv2);
    append(head, attention_->attention);
  }
  append(head, classifier_);
  for (const auto& a : aux_) append(head, a);
  groups.emplace_back("head", std::move(head));
  return groups;
}

io::Checkpoint ToyNet::to_checkpoint(const nlohmann::json& config) const {
  io::Checkpoint ck;
  ck.config = config;
  for (const auto& p : parameters())
    ck.arrays.push_back({p.name(), io::Array{p.shape(), p.value_vector()}});
  return ck;
}

void ToyNet::load_parameters(const io::Checkpoint& checkpoint) {
  for (auto& p : parameters()) {
    const io::NamedArray* found = nullptr;
    for (const auto& a : checkpoint.arrays)
      if (a.name == p.name()) found = &a;
    if (!found) throw FormatError("checkpoint has no array '" + p.name() + "'", 0);
    if (found->array.shape != p.shape())
      throw FormatError("checkpoint array '" + p.name() + "' has shape " + shape_to_string(found->array.shape) +
                            ", model expects " + shape_to_string(p.shape()),
                        0);
    auto dst = p.mutable_values();
    std::copy(found->array.values.begin(), found->array.values.end(), dst.begin());
  }
}

ToyNet load_model(const io::Checkpoint& checkpoint) {
  const auto config = ExperimentConfig::from_json(checkpoint.config);
  ToyNet net(config.model, config.seed);
  net.load_parameters(checkpoint);
  return net;
}

DistillationLoss distillation_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                                   std::span<const std::size_t> labels, double alpha) {
  if (student_logits.rank() != 2 || student_logits.shape() != teacher_logits.shape())
    throw ShapeError("distillation_loss: student " + shape_to_string(student_logits.shape()) + " vs teacher " +
                     shape_to_string(teacher_logits.shape()));
  const std::size_t batch = student_logits.dim(0);
  if (labels.size() != batch)
    throw ShapeError("distillation_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must be in [0,1]");
  const Tensor teacher = stop_gradient(teacher_logits);
  std::vector<Tensor> terms;
  DistillationLoss out;
  for (std::size_t b = 0; b < batch; ++b) {
    const Tensor s = select(student_logits, 0, b);
    const Tensor ce = cross_entropy(s, labels[b]);
    const Tensor kl = kl_divergence(select(teacher, 0, b), s);
    out.cross_entropy += ce.item();
    out.kl += kl.item();
    terms.push_back(add(mul(ce, alpha), mul(kl, 1.0 - alpha)));
  }
  const double inv = 1.0 / static_cast<double>(batch);
  out.cross_entropy *= inv;
  out.kl *= inv;
  out.total = mul(add_n(terms), inv);
  return out;
}

}  // namespace brnpa

namespace brnpa {

namespace {

void record_signs(std::string& pattern, const Tensor& pre) {
  for (double v : pre.values()) pattern.push_back(v > 0.0 ? '1' : '0');
}

// Every discrete decision the forward pass makes: ReLU signs and NPA picks.
std::string decision_pattern(const ToyNet& net, const Tensor& image, std::uint64_t npa_seed) {
  NoGradGuard guard;
  std::string pattern;
  Tensor x = image;
  for (const auto& stage : net.stages()) {
    const Tensor pre = stage.apply(x);
    record_signs(pattern, pre);
    x = relu(pre);
  }
  const auto& spec = net.spec();
  if (spec.head == HeadKind::Npa) {
    NpaConfig cfg = spec.npa;
    cfg.seed = npa_seed;
    const auto reps = extract_representatives(FeatureVolume(x), cfg);
    for (auto i : reps.attention.selected) pattern += "|" + std::to_string(i);
  } else if (spec.head == HeadKind::LearnedAttention) {
    const auto& p = *net.attention_params();
    const Tensor a = p.conv1.apply(x);
    record_signs(pattern, a);
    const Tensor b = add(p.conv2.apply(relu(a)), x);
    record_signs(pattern, b);
    record_signs(pattern, p.attention.apply(relu(b)));
  }
  return pattern;
}

Tensor network_loss(const ToyNet& net, const Tensor& image, std::size_t label, std::uint64_t npa_seed) {
  const auto out = net.forward(image, npa_seed);
  std::vector<Tensor> terms{cross_entropy(out.logits, label)};
  for (const auto& aux : out.aux_logits) terms.push_back(cross_entropy(aux, label));
  return add_n(terms);
}

}  // namespace

NetworkGradcheckReport network_gradcheck(const ModelSpec& spec, std::size_t trials, const GradcheckOptions& options) {
  if (spec.rank_heads)
    throw ValidationError("network_gradcheck: rank heads sit behind stop_gradient, so finite differences of the total loss do not apply");
  NetworkGradcheckReport report;
  report.requested = trials;
  Rng rng(options.seed);
  const double h = options.step;
  for (std::size_t t = 0; t < trials; ++t) {
    ToyNet net(spec, mix_seed(options.seed, t));
    std::vector<double> pixels(spec.input_channels * spec.input_size * spec.input_size);
    for (auto& v : pixels) v = rng.uniform();
    const Tensor image = Tensor::from({spec.input_channels, spec.input_size, spec.input_size}, pixels);
    const std::size_t label = rng.below(spec.classes);
    const std::uint64_t npa_seed = rng.next_u64();

    auto params = net.parameters();
    for (auto& p : params) p.zero_grad();
    backward(network_loss(net, image, label, npa_seed));
    std::vector<double> analytic, numeric;
    for (const auto& p : params) {
      const auto g = p.grad();
      analytic.insert(analytic.end(), g.begin(), g.end());
    }
    report.parameters = analytic.size();

    const std::string base = decision_pattern(net, image, npa_seed);
    bool kink = false;
    for (auto& p : params) {
      auto values = p.mutable_values();
      for (std::size_t i = 0; i < values.size() && !kink; ++i) {
        const double orig = values[i];
        double side[2];
        for (int s = 0; s < 2 && !kink; ++s) {
          values[i] = orig + (s == 0 ? h : -h);
          kink = decision_pattern(net, image, npa_seed) != base;
          NoGradGuard guard;
          side[s] = network_loss(net, image, label, npa_seed).item();
        }
        values[i] = orig;
        numeric.push_back((side[0] - side[1]) / (2.0 * h));
      }
      if (kink) break;
    }
    if (kink) {
      ++report.excluded_kink;
      continue;
    }
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    if (scale == 0.0) {
      ++report.excluded_zero_gradient;
      continue;
    }
    ++report.checked;
    report.max_relative_error = std::max(report.max_relative_error, diff / std::max(scale, 1e-12));
  }
  return report;
}

}  // namespace brnpa

#include "brnpa/train.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "brnpa/autograd.hpp"
#include "brnpa/error.hpp"
#include "brnpa/io.hpp"
#include "brnpa/rng.hpp"

namespace brnpa {

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},       {"train_acc", train_acc}, {"test_acc", test_acc},
          {"loss_ce", loss_ce},   {"loss_kl", loss_kl},     {"grad_norms", grad_norms}};
}

std::string TrainResult::log_jsonl() const {
  std::string out;
  for (const auto& r : log) out += r.to_json().dump() + "\n";
  return out;
}

std::uint64_t eval_seed(std::uint64_t seed, std::size_t index) {
  return mix_seed(mix_seed(seed, 0x7e57), index);
}

Tensor image_tensor(const ShapeSample& sample, std::size_t image_size) {
  return Tensor::from({1, image_size, image_size}, sample.image);
}

namespace {

std::size_t predicted(const Tensor& logits) {
  return static_cast<std::size_t>(argmax(logits).item());
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void check_finite(const Tensor& t, const std::string& what) {
  if (!all_finite(t.values())) throw DivergenceError("non-finite values in " + what);
}

}  // namespace

double evaluate(const ToyNet& model, const std::vector<ShapeSample>& samples, std::uint64_t seed,
                std::vector<double>* head_accuracies) {
  if (samples.empty()) return 0.0;
  NoGradGuard guard;
  std::size_t correct = 0;
  const std::size_t heads = 1 + model.aux_heads().size();
  std::vector<std::size_t> head_correct(heads, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto out = model.forward(image_tensor(samples[i], model.spec().input_size), eval_seed(seed, i));
    const bool hit = predicted(out.logits) == samples[i].label;
    correct += hit;
    head_correct[0] += hit;
    for (std::size_t j = 0; j < out.aux_logits.size(); ++j)
      head_correct[j + 1] += predicted(out.aux_logits[j]) == samples[i].label;
  }
  const double n = static_cast<double>(samples.size());
  if (head_accuracies && heads > 1) {
    head_accuracies->clear();
    for (auto c : head_correct) head_accuracies->push_back(static_cast<double>(c) / n);
  }
  return static_cast<double>(correct) / n;
}

TrainResult train(const ExperimentConfig& config, const ShapesDataset& data, const ToyNet* teacher,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  if (data.image_size != config.model.input_size)
    throw ValidationError("dataset image size does not match model.input_size");
  std::optional<ToyNet> loaded;
  if (!teacher && config.teacher_checkpoint) {
    loaded.emplace(load_model(io::load_checkpoint(*config.teacher_checkpoint)));
    teacher = &*loaded;
  }
  if (teacher && !config.alpha) throw ValidationError("alpha: required when training against a teacher");
  if (teacher && teacher->spec().classes != config.model.classes)
    throw ValidationError("teacher class count does not match the student");
  const double alpha = config.alpha.value_or(1.0);

  TrainResult result{ToyNet(config.model, config.seed), {}, {}, {}, 0.0, {}};
  ToyNet& model = result.model;
  auto params = model.parameters();
  const auto groups = model.parameter_groups();
  for (const auto& g : groups) result.grad_groups.push_back(g.first);
  Sgd optimizer(config.learning_rate, config.momentum);

  const std::size_t size = config.model.input_size;
  std::vector<Tensor> train_images;
  for (const auto& s : data.train) train_images.push_back(image_tensor(s, size));
  for (std::size_t i = 0; i < train_images.size(); ++i)
    check_finite(train_images[i], "input image (train sample " + std::to_string(i) + ")");

  std::vector<Tensor> teacher_logits;
  if (teacher) {
    NoGradGuard guard;
    for (std::size_t i = 0; i < train_images.size(); ++i)
      teacher_logits.push_back(teacher->forward(train_images[i], eval_seed(config.seed ^ 0x7eac, i)).logits);
  }

  std::vector<std::vector<double>> step_norms(groups.size());
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng order_rng(mix_seed(config.seed, 0x0bde));

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.grad_norms.assign(groups.size(), 0.0);
    std::size_t correct = 0, steps = 0;
    double ce_sum = 0.0, kl_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> images;
      std::vector<std::uint64_t> seeds;
      std::vector<std::size_t> labels;
      for (std::size_t b = start; b < end; ++b) {
        images.push_back(train_images[order[b]]);
        seeds.push_back(mix_seed(mix_seed(config.seed, epoch), order[b]));
        labels.push_back(data.train[order[b]].label);
      }
      auto [logits, outs] = model.forward_batch(images, seeds);
      for (std::size_t b = 0; b < outs.size(); ++b) {
        const std::string where = " (epoch " + std::to_string(epoch) + ", sample " + std::to_string(order[start + b]) + ")";
        check_finite(outs[b].volume, "backbone features" + where);
        check_finite(outs[b].features, "head features" + where);
        check_finite(outs[b].logits, "logits" + where);
      }

      Tensor loss;
      const double inv = 1.0 / static_cast<double>(outs.size());
      if (teacher) {
        std::vector<Tensor> t;
        for (std::size_t b = start; b < end; ++b) t.push_back(teacher_logits[order[b]]);
        auto d = distillation_loss(logits, stack(t), labels, alpha);
        loss = d.total;
        ce_sum += d.cross_entropy * static_cast<double>(outs.size());
        kl_sum += d.kl * static_cast<double>(outs.size());
      } else {
        std::vector<Tensor> per_sample;
        for (std::size_t b = 0; b < outs.size(); ++b) {
          const Tensor ce = cross_entropy(outs[b].logits, labels[b]);
          ce_sum += ce.item();
          if (outs[b].aux_logits.empty()) {
            per_sample.push_back(ce);
          } else {
            std::vector<Tensor> terms{ce};
            for (const auto& aux : outs[b].aux_logits) terms.push_back(cross_entropy(aux, labels[b]));
            per_sample.push_back(add_n(terms));
          }
        }
        loss = mul(add_n(per_sample), inv);
      }
      if (!std::isfinite(loss.item())) throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
      for (std::size_t b = 0; b < outs.size(); ++b) correct += predicted(outs[b].logits) == labels[b];

      backward(loss);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        double sq = 0.0;
        for (const auto& p : groups[g].second) {
          const auto grad = p.grad();
          if (!all_finite(grad)) throw DivergenceError("non-finite gradient of " + p.name());
          for (double x : grad) sq += x * x;
        }
        const double norm = std::sqrt(sq);
        rec.grad_norms[g] += norm;
        step_norms[g].push_back(norm);
      }
      optimizer.step(params);
      ++steps;
    }

    const double n = static_cast<double>(order.size());
    for (auto& x : rec.grad_norms) x /= static_cast<double>(std::max<std::size_t>(steps, 1));
    rec.train_acc = static_cast<double>(correct) / n;
    rec.loss_ce = ce_sum / n;
    rec.loss_kl = kl_sum / n;
    rec.test_acc = evaluate(model, data.test, config.seed);
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  result.test_accuracy = evaluate(model, data.test, config.seed, &result.head_accuracies);
  for (const auto& norms : step_norms) {
    double m = 0.0, v = 0.0;
    for (double x : norms) m += x;
    m /= static_cast<double>(std::max<std::size_t>(norms.size(), 1));
    for (double x : norms) v += (x - m) * (x - m);
    result.grad_norm_variance.push_back(v / static_cast<double>(std::max<std::size_t>(norms.size(), 1)));
  }
  return result;
}

}  // namespace brnpa

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "brnpa/config.hpp"
#include "brnpa/shapes.hpp"
#include "brnpa/toynet.hpp"

namespace brnpa {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_acc = 0.0;
  double test_acc = 0.0;
  double loss_ce = 0.0;
  double loss_kl = 0.0;
  /// Mean per-step gradient norm of each parameter group over the epoch.
  std::vector<double> grad_norms;

  nlohmann::json to_json() const;
};

struct TrainResult {
  ToyNet model;
  std::vector<EpochRecord> log;
  std::vector<std::string> grad_groups;
  /// Variance of the per-step gradient norm of each group over the whole run.
  std::vector<double> grad_norm_variance;
  double test_accuracy = 0.0;
  /// Rank-head runs only: test accuracy per subset head, main head first.
  std::vector<double> head_accuracies;

  std::string log_jsonl() const;
};

/// Seed that drives random selection for a test-set sample.
std::uint64_t eval_seed(std::uint64_t seed, std::size_t index);

/// Fraction of correct predictions; `head_accuracies` receives per-subset
/// accuracies when the model has rank heads.
double evaluate(const ToyNet& model, const std::vector<ShapeSample>& samples, std::uint64_t seed,
                std::vector<double>* head_accuracies = nullptr);

Tensor image_tensor(const ShapeSample& sample, std::size_t image_size);

/// Seeded minibatch SGD. With a teacher (given or loaded from
/// config.teacher_checkpoint) the loss is distillation_loss with config.alpha.
/// Throws DivergenceError naming the first non-finite tensor.
TrainResult train(const ExperimentConfig& config, const ShapesDataset& data, const ToyNet* teacher = nullptr,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace brnpa

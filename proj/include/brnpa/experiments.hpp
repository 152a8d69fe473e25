#pragma once

// Ablation grid, rank-head study, teacher/student resolution study and the
// extraction latency bench.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "brnpa/config.hpp"
#include "brnpa/train.hpp"

namespace brnpa {

struct Assertion {
  std::string name;
  bool evaluated = true;
  bool passed = true;
  std::string detail;

  nlohmann::json to_json() const;
};

/// Names of evaluated assertions that failed.
std::vector<std::string> failed(const std::vector<Assertion>& assertions);

/// Called once per finished training run with a short run name.
using RunSink = std::function<void(const std::string& run, const ExperimentConfig& config, const TrainResult& result)>;

struct AblationRow {
  std::string label;  // e.g. "Random/No"
  Selection selection = Selection::Active;
  bool refine = true;
  double test_accuracy = 0.0;  // mean over seeds
  std::vector<double> per_seed;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // Random/No, Random/Yes, Active/No, Active/Yes
  std::vector<Assertion> assertions;
  /// Active/Yes minus Random/No.
  double gap = 0.0;

  const AblationRow& row(Selection selection, bool refine) const;
  nlohmann::json to_json() const;
};

/// Trains the four selection x refinement variants of an npa-head config
/// with identical seeds and budget.
AblationReport run_ablation_grid(const ExperimentConfig& base, const ShapesDataset& data, const RunSink& sink = {});

struct RankHeadReport {
  std::vector<std::pair<std::string, double>> rows;  // label, mean test accuracy; main head first
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> per_seed;  // per seed, one accuracy per row
  std::vector<Assertion> assertions;

  double accuracy(const std::string& label) const;
  nlohmann::json to_json() const;
};

/// Trains the main head plus the five stop-gradient subset heads on the
/// summed six-term cross-entropy.
RankHeadReport run_rank_head_experiment(const ExperimentConfig& config, const ShapesDataset& data,
                                        const RunSink& sink = {});

/// Mean sparsity over the test samples (samples whose map is degenerate are skipped).
struct SparsitySummary {
  double mean = 0.0;
  std::size_t counted = 0;
  std::size_t skipped = 0;
  double foreground_fraction = 0.0;  // mean attention mass on the shape mask
};
SparsitySummary mean_sparsity(const ToyNet& model, const std::vector<ShapeSample>& samples, std::uint64_t seed);

struct ModelSummary {
  std::vector<std::size_t> strides;
  std::size_t map_height = 0, map_width = 0;
  bool distilled = false;
  double test_accuracy = 0.0;
  SparsitySummary sparsity;

  nlohmann::json to_json() const;
};

struct DistillReport {
  ModelSummary teacher;
  ModelSummary student;
  double alpha = 0.0;
  double accuracy_delta = 0.0;  // student - teacher
  bool degenerate = false;      // identical strides with alpha = 1
  std::vector<std::string> flags;
  std::vector<Assertion> assertions;

  nlohmann::json to_json() const;
};

/// Trains the teacher plainly, checkpoints it under `work_dir`, then trains
/// the student against it. The teacher's maps must be strictly coarser,
/// except in the degenerate identical-strides, alpha = 1 case.
DistillReport distill_resolution_study(const DistillConfig& config, const ShapesDataset& data,
                                       const std::string& work_dir, const RunSink& sink = {});

struct TimingStats {
  std::size_t iterations = 0;
  double mean_ms = 0.0, p50_ms = 0.0, p95_ms = 0.0;
  nlohmann::json to_json() const;
};

struct BenchReport {
  std::size_t channels = 0, height = 0, width = 0, n = 0;
  std::optional<TimingStats> npa;
  std::optional<TimingStats> learned_attention;
  nlohmann::json to_json() const;
};

/// Single-threaded wall time of extract_representatives and of the
/// learned-attention head forward on the same random volume. Zero
/// iterations gives an empty report.
BenchReport run_bench(std::size_t channels, std::size_t height, std::size_t width, std::size_t n,
                      std::size_t iterations, std::uint64_t seed,
                      std::optional<std::size_t> baseline_iterations = std::nullopt);

}  // namespace brnpa

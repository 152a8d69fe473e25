#pragma once

// Experiment configuration documents (JSON). Unknown keys are rejected and
// every error names the offending field path, e.g. "model.strides[2]".

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "brnpa/npa.hpp"
#include "brnpa/shapes.hpp"

namespace brnpa {

enum class HeadKind { Npa, LearnedAttention, AvgPool };

std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& s);

struct ModelSpec {
  std::size_t input_channels = 1;
  std::size_t input_size = 32;
  std::vector<std::size_t> channels{16, 32, 32, 32};
  std::vector<std::size_t> strides{2, 2, 2, 1};
  HeadKind head = HeadKind::Npa;
  /// n doubles as the learned-attention map count.
  NpaConfig npa;
  std::size_t classes = 3;
  /// Five auxiliary subset heads over the NPA vectors (requires npa head, n = 3).
  bool rank_heads = false;

  std::size_t feature_channels() const { return channels.back(); }
  /// Spatial extent of the final feature maps.
  std::size_t map_extent() const;
  void validate() const;
};

struct ExperimentConfig {
  ShapesSpec data;
  ModelSpec model;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  /// Present exactly when teacher_checkpoint is.
  std::optional<double> alpha;
  std::optional<std::string> teacher_checkpoint;
  /// Training seeds a study averages over (ablation grid, rank heads). Empty means {seed}.
  std::vector<std::uint64_t> seeds;

  std::vector<std::uint64_t> study_seeds() const { return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds; }
  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j, const std::string& path = "");
};

/// Teacher/student pair for the resolution study. The study trains the
/// teacher, saves it, then trains the student against it with `alpha`.
struct DistillConfig {
  ExperimentConfig teacher;
  ExperimentConfig student;
  double alpha = 0.5;

  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
};

nlohmann::json model_to_json(const ModelSpec& spec);
ModelSpec model_from_json(const nlohmann::json& j, const std::string& path);

/// Parses a JSON file; ValidationError carries the path on syntax errors.
nlohmann::json load_json_file(const std::string& path);

}  // namespace brnpa

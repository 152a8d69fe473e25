#pragma once

// Non-parametric attention: picks the N most active feature vectors of a
// volume one at a time, refines each into a similarity-weighted average of
// the whole volume, and damps the activation of everything it just covered
// so the next pick lands elsewhere.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "brnpa/tensor.hpp"

namespace brnpa {

/// C x H x W block of feature vectors. Spatial positions are flattened
/// row-major: flat index i <-> (i / W, i % W).
class FeatureVolume {
 public:
  /// `data` must be rank 3 with all extents >= 1. History is kept, so the
  /// volume can sit in the middle of a differentiable graph.
  explicit FeatureVolume(Tensor data);
  static FeatureVolume from(std::size_t channels, std::size_t height, std::size_t width,
                            std::vector<double> values);

  const Tensor& tensor() const { return data_; }
  std::size_t channels() const { return data_.dim(0); }
  std::size_t height() const { return data_.dim(1); }
  std::size_t width() const { return data_.dim(2); }
  std::size_t positions() const { return height() * width(); }

  std::pair<std::size_t, std::size_t> coords(std::size_t flat) const;
  std::size_t flat_index(std::size_t row, std::size_t col) const;
  double value(std::size_t channel, std::size_t flat) const;
  /// Euclidean norm of the vector at each position.
  std::vector<double> norms() const;

 private:
  Tensor data_;
};

enum class Selection { Active, Random };

std::string to_string(Selection s);
Selection selection_from_string(const std::string& s);

struct NpaConfig {
  std::size_t n = 3;
  Selection selection = Selection::Active;
  bool refine = true;
  /// Cosine similarities are clamped below at this value before normalizing.
  double similarity_floor = 0.0;
  /// Guards norms and the normalizing sum against zero.
  double norm_epsilon = 1e-12;
  std::uint64_t seed = 0;

  /// Throws ValidationError unless 1 <= n <= positions.
  void validate(std::size_t positions) const;
};

/// Squared norm of every feature vector.
struct ActivationMap {
  std::vector<double> scores;
};

ActivationMap activation_scores(const FeatureVolume& volume);

/// Cosine similarity of every position to `ref`, norms guarded by
/// `norm_epsilon`, clamped below at `similarity_floor`. Differentiable.
Tensor similarity_map(const FeatureVolume& volume, std::size_t ref, double similarity_floor = 0.0,
                      double norm_epsilon = 1e-12);

/// N weight maps over H*W positions, in extraction (rank) order.
struct AttentionStack {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> weights;  // N x (H*W), row-major
  std::vector<std::size_t> selected;
  /// True where extraction ran out of activation and fell back to a one-hot pick.
  std::vector<bool> fallback;

  std::size_t size() const { return selected.size(); }
  std::size_t positions() const { return height * width; }
  std::span<const double> map(std::size_t k) const;
  /// 1-based rank of map k.
  std::size_t rank(std::size_t k) const { return k + 1; }
};

struct Representatives {
  /// N x C refined vectors, row k extracted k-th. Differentiable w.r.t. the volume.
  Tensor features;
  AttentionStack attention;
  /// Score of the chosen position at the moment it was chosen.
  std::vector<double> scores_at_selection;
  /// Activation scores before the first pick and after each suppression (N+1 rows).
  std::vector<std::vector<double>> score_trace;

  std::size_t fallback_count() const;
};

/// Runs the full selection / refinement / suppression loop. The discrete
/// choices are constants of the reverse pass.
Representatives extract_representatives(const FeatureVolume& volume, const NpaConfig& config);

/// Row-major flattening f1 || f2 || ... || fN. Differentiable.
Tensor concat_representatives(const Tensor& features);

struct GradcheckReport {
  std::size_t requested = 0;
  std::size_t checked = 0;
  /// Volumes skipped because a selection was within the tie margin.
  std::size_t excluded_near_tie = 0;
  /// Volumes skipped because a cosine sat on the clamp floor within the margin.
  std::size_t excluded_near_clamp = 0;
  double max_relative_error = 0.0;
};

struct GradcheckOptions {
  double step = 1e-5;
  /// Relative gap between the best and runner-up score below which a volume is excluded.
  double tie_margin = 1e-3;
  /// Distance of any cosine from the floor below which a volume is excluded.
  double clamp_margin = 1e-4;
  std::uint64_t seed = 0;
};

/// Compares the analytic gradient of a fixed random linear probe of the
/// feature matrix against central finite differences over random volumes.
/// Relative error is the max-abs difference over the max-abs gradient.
GradcheckReport npa_gradcheck(std::size_t channels, std::size_t height, std::size_t width,
                              const NpaConfig& config, std::size_t trials,
                              const GradcheckOptions& options = {});

}  // namespace brnpa

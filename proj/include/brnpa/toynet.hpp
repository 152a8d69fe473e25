#pragma once

// Small conv classifier with a pluggable attention head.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "brnpa/config.hpp"
#include "brnpa/io.hpp"
#include "brnpa/npa.hpp"
#include "brnpa/tensor.hpp"

namespace brnpa {

struct ConvLayer {
  Tensor kernel;  // Cout x Cin x k x k
  Tensor bias;    // Cout
  std::size_t stride = 1;
  std::size_t padding = 1;

  Tensor apply(const Tensor& input) const { return conv2d(input, kernel, stride, padding, bias); }
};

struct DenseLayer {
  Tensor weight;  // K x D
  Tensor bias;    // K

  /// Rank-1 input of length D -> rank-1 output of length K.
  Tensor apply(const Tensor& input) const;
};

/// Basic block (two 3x3 convs, residual add) followed by a 1x1 conv and ReLU.
struct LearnedAttentionParams {
  ConvLayer conv1;
  ConvLayer conv2;
  ConvLayer attention;  // 1x1, N output maps
};

/// Features are N x C spatial averages of map_k * volume over the raw maps.
/// The returned stack holds the maps normalized to unit sum (uniform when a
/// map is all zero, flagged as fallback) and each map's argmax.
std::pair<Tensor, AttentionStack> learned_attention_head(const Tensor& volume,
                                                        const LearnedAttentionParams& params);

/// Labels of the rank-head subsets; index 0 is the main head.
const std::vector<std::string>& rank_head_labels();
const std::vector<std::vector<std::size_t>>& rank_head_subsets();

struct ForwardResult {
  Tensor logits;    // K
  Tensor volume;    // C x h x w, final backbone features
  Tensor features;  // N x C for attention heads, C for avg-pool
  std::optional<AttentionStack> attention;
  /// Auxiliary subset-head logits (rank heads only); their inputs sit behind stop_gradient.
  std::vector<Tensor> aux_logits;
};

class ToyNet {
 public:
  ToyNet(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }

  /// image: input_channels x input_size x input_size. npa_seed drives random selection.
  ForwardResult forward(const Tensor& image, std::uint64_t npa_seed) const;
  /// Stacked B x K logits plus per-sample results.
  std::pair<Tensor, std::vector<ForwardResult>> forward_batch(std::span<const Tensor> images,
                                                              std::span<const std::uint64_t> npa_seeds) const;

  Tensor backbone(const Tensor& image) const;

  /// Every trainable tensor, in a fixed order.
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> backbone_parameters() const;
  /// Parameters grouped for gradient-norm logging: one group per stage, then "head".
  std::vector<std::pair<std::string, std::vector<Tensor>>> parameter_groups() const;

  io::Checkpoint to_checkpoint(const nlohmann::json& config) const;
  /// Copies values by name; throws FormatError on missing names or shape mismatch.
  void load_parameters(const io::Checkpoint& checkpoint);

  const std::vector<ConvLayer>& stages() const { return stages_; }
  const std::optional<LearnedAttentionParams>& attention_params() const { return attention_; }
  const DenseLayer& classifier() const { return classifier_; }
  const std::vector<DenseLayer>& aux_heads() const { return aux_; }

 private:
  ModelSpec spec_;
  std::vector<ConvLayer> stages_;
  std::optional<LearnedAttentionParams> attention_;
  DenseLayer classifier_;
  std::vector<DenseLayer> aux_;
};

/// Rebuilds the model described by the checkpoint's config and loads its values.
ToyNet load_model(const io::Checkpoint& checkpoint);

/// Finite-difference check of d(cross-entropy)/d(every parameter) on small
/// random networks built from `spec`. A trial is excluded when a
/// perturbation flips any ReLU sign or NPA selection, or when the whole
/// gradient is zero (dead network). Specs with rank heads are rejected.
struct NetworkGradcheckReport {
  std::size_t requested = 0;
  std::size_t checked = 0;
  std::size_t excluded_kink = 0;
  std::size_t excluded_zero_gradient = 0;
  std::size_t parameters = 0;
  double max_relative_error = 0.0;
};
NetworkGradcheckReport network_gradcheck(const ModelSpec& spec, std::size_t trials,
                                         const GradcheckOptions& options = {});

/// Batch mean of alpha * CE(student, y) + (1 - alpha) * KL(teacher || student).
/// Teacher logits are passed through stop_gradient.
struct DistillationLoss {
  Tensor total;
  double cross_entropy = 0.0;  // batch mean
  double kl = 0.0;             // batch mean
};
DistillationLoss distillation_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                                   std::span<const std::size_t> labels, double alpha);

}  // namespace brnpa

#pragma once

// Training objective: cosine dynamics loss, off-diagonal covariance penalty,
// target construction, and the multi-view total.

#include <stdexcept>
#include <vector>

#include "dynamo/models.hpp"

namespace dynamo {

class ObjectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TargetMode : std::uint8_t { stop_grad, ema };

struct ObjectiveConfig {
  double lambda = 0.04;
  TargetMode target_mode = TargetMode::stop_grad;
  /// false only for the no_stopgrad ablation: targets keep their gradient path.
  bool detach_targets = true;
  /// Predict s*_{t+1} (true) or the same-step s*_t (no_forward ablation).
  bool predict_next = true;
};

struct LossBreakdown {
  double l_dyn = 0.0;
  double l_cov = 0.0;
  double total = 0.0;
  std::vector<double> view_dyn;
  std::vector<double> view_cov;
  /// Scalar with autograd history; backward() on it trains the bundle.
  torch::Tensor loss;
  /// Per-view embeddings [B, h, d] and transition latents [B, h - 1, m]
  /// (undefined when the inverse head is disabled).
  std::vector<torch::Tensor> embeddings;
  std::vector<torch::Tensor> latents;
};

/// Mean over leading dims of 1 - cos(pred, target); both [..., d].
/// Throws "degenerate embedding" on any zero-norm row.
torch::Tensor dyn_loss(const torch::Tensor& pred, const torch::Tensor& target);

/// (1/d) * sum of squared off-diagonal entries of the unbiased covariance of
/// the rows of S [N, d]. Requires N >= 2.
torch::Tensor cov_loss(const torch::Tensor& S);

/// Targets for every frame, [B, h, V, d]. `online` is the current encoder's
/// output for the same frames and is reused in stop-grad mode.
torch::Tensor make_target(ModelBundle& bundle, const torch::Tensor& frames, const torch::Tensor& online,
                          const ObjectiveConfig& config);

/// Full forward pass on uint8 frames [B, h, V, H, W, 3].
LossBreakdown total_loss(ModelBundle& bundle, const torch::Tensor& frames, const ObjectiveConfig& config);

}  // namespace dynamo

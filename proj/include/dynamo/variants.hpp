#pragma once

// Named ablations and the two action-supervised variants.

#include <array>
#include <map>
#include <string>
#include <string_view>

#include "dynamo/trainer.hpp"

namespace dynamo {

inline constexpr std::array<std::string_view, 9> kVariantNames = {
    "full",    "no_forward",    "no_inverse",     "no_bottleneck",    "no_cov",
    "no_stopgrad", "short_context", "inv_to_actions", "full_plus_actions",
};

struct VariantSpec {
  std::string name;
  /// Config keys this variant overrides, with their new values.
  std::map<std::string, std::string> overrides;
};

/// Throws ConfigError for unknown names.
VariantSpec variant_spec(const std::string& name, const TrainConfig& base);
TrainConfig apply_variant(const TrainConfig& base, const VariantSpec& spec);
TrainConfig apply_variant(const TrainConfig& base, const std::string& name);

/// Actions are regressed in units of kMaxAction so targets span [-1, 1].
torch::Tensor action_targets(const SequenceBatch& batch);

/// Linear readout z_t -> a_t (weight 1) plus lambda * covariance penalty; no
/// forward head.
TrainResult train_inverse_to_actions(const TrainConfig& config, const LabeledView& data,
                                     const TrainOptions& options = {});

/// Full objective plus aux_weight * MSE of a 2-layer head from z_t to a_t.
TrainResult train_full_plus_actions(const TrainConfig& config, const LabeledView& data,
                                    const TrainOptions& options = {}, double aux_weight = 1.0);

/// Loss functions behind the two trainers, exposed for testing.
LossBreakdown inverse_to_actions_loss(ModelBundle& bundle, torch::nn::Module& readout, const torch::Tensor& frames,
                                      const SequenceBatch& batch, double lambda);
LossBreakdown full_plus_actions_loss(ModelBundle& bundle, torch::nn::Module& head, const torch::Tensor& frames,
                                     const SequenceBatch& batch, const ObjectiveConfig& oc, double aux_weight);

std::shared_ptr<torch::nn::Module> make_action_readout(int latent_dim);
std::shared_ptr<torch::nn::Module> make_action_head(int latent_dim);

/// Dispatches on config.variant: the two action variants need labels, the
/// rest run plain pretraining.
TrainResult train_variant(const TrainConfig& config, const LabeledView& data, const TrainOptions& options = {});

}  // namespace dynamo

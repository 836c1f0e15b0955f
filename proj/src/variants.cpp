#include "dynamo/variants.hpp"

#include <algorithm>

namespace dynamo {

VariantSpec variant_spec(const std::string& name, const TrainConfig& base) {
  VariantSpec s{name, {{"variant", name}}};
  if (name == "full" || name == "full_plus_actions") {
  } else if (name == "no_forward") {
    s.overrides["predict_next"] = "false";
    s.overrides["forward_input"] = "latent_only";
  } else if (name == "no_inverse") {
    s.overrides["inverse_head"] = "false";
    s.overrides["forward_input"] = "state_only";
  } else if (name == "no_bottleneck") {
    s.overrides["m"] = std::to_string(base.d);
    s.overrides["no_bottleneck"] = "true";
  } else if (name == "no_cov") {
    s.overrides["lambda"] = "0";
  } else if (name == "no_stopgrad") {
    s.overrides["detach_targets"] = "false";
    s.overrides["target_mode"] = "stop_grad";
  } else if (name == "short_context") {
    s.overrides["h"] = "2";
  } else if (name == "inv_to_actions") {
    s.overrides["forward_head"] = "false";
  } else {
    throw ConfigError("unknown variant: " + name);
  }
  return s;
}

TrainConfig apply_variant(const TrainConfig& base, const VariantSpec& spec) {
  TrainConfig c = base;
  for (const auto& [k, v] : spec.overrides) c.set(k, v);
  return c;
}

TrainConfig apply_variant(const TrainConfig& base, const std::string& name) {
  return apply_variant(base, variant_spec(name, base));
}

torch::Tensor action_targets(const SequenceBatch& batch) {
  if (!batch.actions) throw ConfigError("batch carries no actions");
  const auto& a = *batch.actions;
  if (a.size() != static_cast<std::size_t>(batch.batch) * batch.context)
    throw ConfigError("action count does not match the batch");
  auto t = torch::empty({batch.batch, batch.context, 2});
  auto acc = t.accessor<float, 3>();
  for (int b = 0; b < batch.batch; ++b)
    for (int i = 0; i < batch.context; ++i) {
      acc[b][i][0] = a[b * batch.context + i].delta.x / kMaxAction;
      acc[b][i][1] = a[b * batch.context + i].delta.y / kMaxAction;
    }
  return t;
}

std::shared_ptr<torch::nn::Module> make_action_readout(int latent_dim) {
  return torch::nn::Sequential(torch::nn::Linear(latent_dim, 2)).ptr();
}

std::shared_ptr<torch::nn::Module> make_action_head(int latent_dim) {
  return torch::nn::Sequential(torch::nn::Linear(latent_dim, 64), torch::nn::ReLU(), torch::nn::Linear(64, 2)).ptr();
}

namespace {

torch::Tensor apply_head(torch::nn::Module& head, const torch::Tensor& z, const SequenceBatch& batch) {
  auto* seq = dynamic_cast<torch::nn::SequentialImpl*>(&head);
  if (!seq) throw ConfigError("action head must be a Sequential");
  auto pred = seq->forward(z);
  auto target = action_targets(batch).slice(1, 0, z.size(1));
  if (pred.sizes() != target.sizes()) throw ConfigError("action dimension mismatch");
  return torch::mse_loss(pred, target);
}

}  // namespace

LossBreakdown inverse_to_actions_loss(ModelBundle& bundle, torch::nn::Module& readout, const torch::Tensor& frames,
                                      const SequenceBatch& batch, double lambda) {
  const auto& mc = bundle.config();
  auto s = bundle.encode(frames);
  const auto V = s.size(2);
  LossBreakdown out;
  torch::Tensor loss;
  for (int v = 0; v < V; ++v) {
    auto sv = s.select(2, v);
    auto z = bundle.inverse_dynamics(sv);
    auto mse = apply_head(readout, z, batch);
    auto lcov = cov_loss(sv.reshape({-1, mc.embed_dim}));
    auto lv = mse + lambda * lcov;
    loss = loss.defined() ? loss + lv : lv;
    out.embeddings.push_back(sv);
    out.latents.push_back(z);
    out.view_dyn.push_back(0.0);
    out.view_cov.push_back(lcov.item<double>());
  }
  out.loss = loss / static_cast<double>(V);
  for (double c : out.view_cov) out.l_cov += c / static_cast<double>(V);
  out.total = out.loss.item<double>();
  return out;
}

LossBreakdown full_plus_actions_loss(ModelBundle& bundle, torch::nn::Module& head, const torch::Tensor& frames,
                                     const SequenceBatch& batch, const ObjectiveConfig& oc, double aux_weight) {
  LossBreakdown out = total_loss(bundle, frames, oc);
  torch::Tensor aux;
  for (const auto& z : out.latents) {
    auto mse = apply_head(head, z, batch);
    aux = aux.defined() ? aux + mse : mse;
  }
  aux = aux / static_cast<double>(out.latents.size());
  out.loss = out.loss + aux_weight * aux;
  out.total = out.loss.item<double>();
  return out;
}

TrainResult train_inverse_to_actions(const TrainConfig& config, const LabeledView& data,
                                     const TrainOptions& options) {
  if (config.forward_head) throw ConfigError("inv_to_actions runs without a forward head; apply the variant first");
  TrainTask task;
  task.labeled = true;
  task.extra = make_action_readout(config.m);
  auto readout = task.extra;
  const double lambda = config.lambda;
  task.loss = [readout, lambda](ModelBundle& b, const torch::Tensor& frames, const SequenceBatch& batch) {
    return inverse_to_actions_loss(b, *readout, frames, batch, lambda);
  };
  return run_training(config, data, task, options);
}

TrainResult train_full_plus_actions(const TrainConfig& config, const LabeledView& data, const TrainOptions& options,
                                    double aux_weight) {
  TrainTask task;
  task.labeled = true;
  task.extra = make_action_head(config.m);
  auto head = task.extra;
  const ObjectiveConfig oc = config.objective_config();
  task.loss = [head, oc, aux_weight](ModelBundle& b, const torch::Tensor& frames, const SequenceBatch& batch) {
    return full_plus_actions_loss(b, *head, frames, batch, oc, aux_weight);
  };
  return run_training(config, data, task, options);
}

TrainResult train_variant(const TrainConfig& config, const LabeledView& data, const TrainOptions& options) {
  if (config.variant == "inv_to_actions") return train_inverse_to_actions(config, data, options);
  if (config.variant == "full_plus_actions") return train_full_plus_actions(config, data, options);
  if (std::find(kVariantNames.begin(), kVariantNames.end(), config.variant) == kVariantNames.end())
    throw ConfigError("unknown variant: " + config.variant);
  return pretrain(config, data.unlabeled(), options);
}

}  // namespace dynamo

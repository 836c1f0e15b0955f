#include "dynamo/objective.hpp"

namespace dynamo {

namespace {

using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

struct DynLossFn : torch::autograd::Function<DynLossFn> {
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& pred, const torch::Tensor& target) {
    const auto d = pred.size(-1);
    auto p = pred.reshape({-1, d});
    auto t = target.reshape({-1, d});
    auto np = p.norm(2, -1);
    auto nt = t.norm(2, -1);
    if ((np == 0).any().item<bool>() || (nt == 0).any().item<bool>()) throw ObjectiveError("degenerate embedding");
    auto cos = (p * t).sum(-1) / (np * nt);
    ctx->save_for_backward({p, t, np, nt, cos});
    ctx->saved_data["shape_p"] = pred.sizes().vec();
    ctx->saved_data["shape_t"] = target.sizes().vec();
    return (1.0 - cos).mean();
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_out) {
    const auto saved = ctx->get_saved_variables();
    const auto &p = saved[0], &t = saved[1], &np = saved[2], &nt = saved[3], &cos = saved[4];
    const auto scale = -grad_out[0] / static_cast<double>(p.size(0));
    auto np_ = np.unsqueeze(-1), nt_ = nt.unsqueeze(-1), cos_ = cos.unsqueeze(-1);
    auto gp = scale * (t / (np_ * nt_) - cos_ * p / (np_ * np_));
    auto gt = scale * (p / (np_ * nt_) - cos_ * t / (nt_ * nt_));
    return {gp.reshape(ctx->saved_data["shape_p"].toIntVector()),
            gt.reshape(ctx->saved_data["shape_t"].toIntVector())};
  }
};

struct CovLossFn : torch::autograd::Function<CovLossFn> {
  static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& S) {
    const auto n = S.size(0), d = S.size(1);
    auto x = S - S.mean(0, true);
    auto c = torch::matmul(x.t(), x) / static_cast<double>(n - 1);
    auto off = c - torch::diag(torch::diag(c));
    ctx->save_for_backward({x, off});
    return off.pow(2).sum() / static_cast<double>(d);
  }

  static tensor_list backward(AutogradContext* ctx, tensor_list grad_out) {
    const auto saved = ctx->get_saved_variables();
    const auto &x = saved[0], &off = saved[1];
    const double k = 4.0 / (static_cast<double>(x.size(1)) * static_cast<double>(x.size(0) - 1));
    return {grad_out[0] * k * torch::matmul(x, off)};
  }
};

}  // namespace

torch::Tensor dyn_loss(const torch::Tensor& pred, const torch::Tensor& target) {
  if (pred.sizes() != target.sizes() || pred.dim() < 1 || pred.numel() == 0)
    throw ObjectiveError("dyn_loss: prediction and target shapes differ");
  return DynLossFn::apply(pred, target);
}

torch::Tensor cov_loss(const torch::Tensor& S) {
  if (S.dim() != 2) throw ObjectiveError("cov_loss expects an N x d matrix");
  if (S.size(0) < 2) throw ObjectiveError("cov_loss needs N >= 2 rows");
  return CovLossFn::apply(S);
}

torch::Tensor make_target(ModelBundle& bundle, const torch::Tensor& frames, const torch::Tensor& online,
                          const ObjectiveConfig& config) {
  if (!config.detach_targets) return online;
  if (config.target_mode == TargetMode::ema) {
    if (!bundle.has_ema()) throw ObjectiveError("EMA targets requested but the bundle has no EMA encoder");
    return bundle.encode(frames, true);
  }
  return online.detach();
}

LossBreakdown total_loss(ModelBundle& bundle, const torch::Tensor& frames, const ObjectiveConfig& config) {
  if (frames.dim() != 6 || frames.size(1) < 2) throw ObjectiveError("batch window must have h >= 2");
  const auto& mc = bundle.config();
  const auto V = frames.size(2);
  const auto h = frames.size(1);

  auto s = bundle.encode(frames);
  auto target = mc.forward_head ? make_target(bundle, frames, s, config) : torch::Tensor();

  LossBreakdown out;
  torch::Tensor loss;
  for (int v = 0; v < V; ++v) {
    auto sv = s.select(2, v);
    out.embeddings.push_back(sv);
    torch::Tensor z;
    if (mc.inverse_head) z = bundle.inverse_dynamics(sv);
    out.latents.push_back(z);

    torch::Tensor ldyn = torch::zeros({}, s.options());
    if (mc.forward_head) {
      auto prev = sv.slice(1, 0, h - 1);
      auto pred = bundle.forward_dynamics(prev, z);
      auto tv = target.select(2, v);
      auto aligned = config.predict_next ? tv.slice(1, 1, h) : tv.slice(1, 0, h - 1);
      ldyn = dyn_loss(pred, aligned);
    }
    auto lcov = cov_loss(sv.reshape({-1, mc.embed_dim}));
    auto lv = ldyn + config.lambda * lcov;
    loss = loss.defined() ? loss + lv : lv;

    out.view_dyn.push_back(ldyn.item<double>());
    out.view_cov.push_back(lcov.item<double>());
  }
  out.loss = loss / static_cast<double>(V);
  for (int v = 0; v < V; ++v) {
    out.l_dyn += out.view_dyn[v] / static_cast<double>(V);
    out.l_cov += out.view_cov[v] / static_cast<double>(V);
  }
  out.total = out.loss.item<double>();
  return out;
}

}  // namespace dynamo

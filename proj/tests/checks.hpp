#pragma once

// Randomized property checks shared by the unit tests and the acceptance suite.

#include <algorithm>
#include <random>

#include "dynamo/objective.hpp"
#include "oracles.hpp"

namespace checks {

inline std::vector<double> to_vec(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous().flatten();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

inline torch::Tensor from_vec(const std::vector<double>& v, at::IntArrayRef shape) {
  return torch::tensor(v, torch::kFloat64).reshape(shape);
}

inline std::vector<double> analytic_grad(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                         const torch::Tensor& x) {
  auto leaf = x.detach().clone().set_requires_grad(true);
  f(leaf).backward();
  return to_vec(leaf.grad());
}

/// Worst relative error between hand-written backward passes and central
/// differences over `instances` random draws of 8-dimensional inputs.
inline double gradient_oracle_worst(int instances, std::uint64_t seed) {
  torch::manual_seed(seed);
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    const auto pred = torch::randn({3, 8}, torch::kFloat64);
    const auto target = torch::randn({3, 8}, torch::kFloat64);
    const auto rows = torch::randn({6, 8}, torch::kFloat64);

    auto dyn_p = [&](const torch::Tensor& p) { return dynamo::dyn_loss(p, target); };
    auto dyn_t = [&](const torch::Tensor& t) { return dynamo::dyn_loss(pred, t); };
    auto cov = [&](const torch::Tensor& s) { return dynamo::cov_loss(s); };

    auto numeric = [](const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x) {
      const auto shape = x.sizes().vec();
      return oracle::numeric_gradient([&](const std::vector<double>& v) { return f(from_vec(v, shape)).item<double>(); },
                                      to_vec(x));
    };
    worst = std::max(worst, oracle::relative_error(analytic_grad(dyn_p, pred), numeric(dyn_p, pred)));
    worst = std::max(worst, oracle::relative_error(analytic_grad(dyn_t, target), numeric(dyn_t, target)));
    worst = std::max(worst, oracle::relative_error(analytic_grad(cov, rows), numeric(cov, rows)));
  }
  return worst;
}

/// Largest change of an "unaffected" output under future perturbations, over
/// `configs` random head configurations and perturbation positions.
inline double causality_worst(int configs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  torch::manual_seed(seed);
  double worst = 0;
  for (int c = 0; c < configs; ++c) {
    dynamo::ModelConfig mc;
    mc.image_size = 16;
    mc.embed_dim = 16 + 8 * static_cast<int>(rng() % 3);
    mc.latent_dim = 2 + static_cast<int>(rng() % 6);
    mc.width = 16 * (1 + static_cast<int>(rng() % 2));
    mc.heads = 1 << (rng() % 3);
    mc.layers = 1 + static_cast<int>(rng() % 2);
    mc.context_max = 8;
    dynamo::ModelBundle bundle(mc);
    bundle.eval();
    torch::NoGradGuard guard;

    const int h = 3 + static_cast<int>(rng() % 6);
    const int B = 1 + static_cast<int>(rng() % 3);
    auto s = torch::randn({B, h, mc.embed_dim});

    // Inverse head: z_t sees s_{<= t+1}; perturb s_k and check z_t for t + 1 < k.
    const int k = 2 + static_cast<int>(rng() % (h - 2));
    auto z = bundle.inverse_dynamics(s);
    auto s2 = s.clone();
    s2.select(1, k).add_(torch::randn({B, mc.embed_dim}));
    auto z2 = bundle.inverse_dynamics(s2);
    worst = std::max(worst, (z.slice(1, 0, k - 1) - z2.slice(1, 0, k - 1)).abs().max().item<double>());

    // Forward head: prediction at t sees pairs at positions <= t.
    auto sp = torch::randn({B, h - 1, mc.embed_dim});
    auto zp = torch::randn({B, h - 1, mc.latent_dim});
    const int j = 1 + static_cast<int>(rng() % (h - 2));
    auto y = bundle.forward_dynamics(sp, zp);
    auto sp2 = sp.clone(), zp2 = zp.clone();
    sp2.select(1, j).add_(torch::randn({B, mc.embed_dim}));
    zp2.select(1, j).add_(torch::randn({B, mc.latent_dim}));
    auto y2 = bundle.forward_dynamics(sp2, zp2);
    worst = std::max(worst, (y.slice(1, 0, j) - y2.slice(1, 0, j)).abs().max().item<double>());
  }
  return worst;
}

}  // namespace checks

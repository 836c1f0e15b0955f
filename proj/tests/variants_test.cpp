#include <torch/torch.h>
#undef CHECK  // c10 logging macro; doctest owns CHECK in tests
#include <doctest.h>

#include "dynamo/variants.hpp"
#include "fixtures.hpp"

using namespace dynamo;

TEST_CASE("apply_variant") {
  const auto base = TrainConfig::block_pushing();

  SUBCASE("full is the identity") { CHECK(apply_variant(base, "full") == base); }

  SUBCASE("configs differ from the base only in declared overrides") {
    const auto before = base.to_map();
    for (auto name : kVariantNames) {
      const auto spec = variant_spec(std::string(name), base);
      const auto after = apply_variant(base, spec).to_map();
      for (const auto& [k, v] : before) {
        if (spec.overrides.count(k)) CHECK(after.at(k) == spec.overrides.at(k));
        else CHECK_MESSAGE(after.at(k) == v, name << " changed " << k);
      }
    }
  }

  SUBCASE("stated overrides") {
    CHECK(apply_variant(base, "no_bottleneck").m == base.d);
    CHECK(apply_variant(base, "no_cov").lambda == 0.0);
    CHECK(apply_variant(base, "short_context").h == 2);
    const auto nf = apply_variant(base, "no_forward");
    CHECK_FALSE(nf.predict_next);
    CHECK(nf.forward_input == ForwardInput::latent_only);
    const auto ni = apply_variant(base, "no_inverse");
    CHECK_FALSE(ni.inverse_head);
    CHECK(ni.forward_input == ForwardInput::state_only);
    const auto ns = apply_variant(base, "no_stopgrad");
    CHECK_FALSE(ns.detach_targets);
    CHECK_FALSE(ns.model_config().ema);
    CHECK_FALSE(apply_variant(base, "inv_to_actions").forward_head);
    for (auto name : kVariantNames) CHECK_NOTHROW(apply_variant(base, std::string(name)).validate());
  }

  SUBCASE("unknown name") { CHECK_THROWS_AS(apply_variant(base, "no_encoder"), ConfigError); }
}

TEST_CASE("no_cov weights the covariance term by zero") {
  auto c = apply_variant(fixtures::tiny_config(), "no_cov");
  torch::manual_seed(0);
  ModelBundle bundle(c.model_config());
  const auto frames = frames_tensor(sample_sequences(UnlabeledView(fixtures::tiny_dataset()), c.h, 4, 1));
  const auto lb = total_loss(bundle, frames, c.objective_config());
  CHECK(lb.l_cov > 0.0);
  CHECK(std::abs(lb.total - lb.l_dyn) < 1e-6);
}

TEST_CASE("action-supervised variants") {
  const auto& data = fixtures::tiny_dataset();
  const LabeledView view(data);
  const auto batch = sample_sequences(view, 5, 6, 2);
  const auto frames = frames_tensor(batch);

  SUBCASE("action targets") {
    const auto a = action_targets(batch);
    CHECK(a.sizes() == std::vector<std::int64_t>{6, 5, 2});
    CHECK(a.abs().max().item<float>() <= 1.0f + 1e-6f);
    CHECK(a[0][0][0].item<float>() == doctest::Approx((*batch.actions)[0].delta.x / kMaxAction));
    CHECK_THROWS_AS(action_targets(sample_sequences(view.unlabeled(), 5, 2, 0)), ConfigError);
  }

  SUBCASE("auxiliary weight 0 reduces to the full objective") {
    const auto c = fixtures::tiny_config();
    torch::manual_seed(3);
    ModelBundle bundle(c.model_config());
    auto head = make_action_head(c.m);
    auto grads = [&](bool plain) {
      bundle.zero_grad();
      auto lb = plain ? total_loss(bundle, frames, c.objective_config())
                      : full_plus_actions_loss(bundle, *head, frames, batch, c.objective_config(), 0.0);
      lb.loss.backward();
      std::vector<torch::Tensor> g;
      for (auto& p : bundle.trainable_parameters()) g.push_back(p.grad().clone());
      return g;
    };
    const auto a = grads(true), b = grads(false);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], b[i]));
  }

  SUBCASE("joint loss = objective total + auxiliary MSE") {
    const auto c = fixtures::tiny_config();
    torch::manual_seed(4);
    ModelBundle bundle(c.model_config());
    bundle.eval();
    auto head = make_action_head(c.m);
    const auto joint = full_plus_actions_loss(bundle, *head, frames, batch, c.objective_config(), 1.0);
    const auto plain = total_loss(bundle, frames, c.objective_config());
    auto& seq = dynamic_cast<torch::nn::SequentialImpl&>(*head);
    const auto target = action_targets(batch).slice(1, 0, 4);
    double aux = 0;
    for (const auto& z : plain.latents) aux += torch::mse_loss(seq.forward(z), target).item<double>() / 2;
    CHECK(joint.total == doctest::Approx(plain.total + aux).epsilon(1e-6));
    CHECK(seq.forward(plain.latents[0]).size(-1) == 2);
  }

  SUBCASE("inverse-to-actions readout learns on a frozen random encoder") {
    auto c = apply_variant(fixtures::tiny_config(), "inv_to_actions");
    torch::manual_seed(5);
    ModelBundle bundle(c.model_config());
    auto readout = make_action_readout(c.m);
    CHECK(bundle.inverse_dynamics(torch::randn({1, 3, c.d})).size(-1) == c.m);

    // Linearly separable toy actions: a_t is a fixed linear function of the
    // (random, frozen) latent, rescaled into action units.
    torch::NoGradGuard outer;
    auto z = bundle.inverse_dynamics(bundle.encode(frames).select(2, 0));
    auto W = torch::randn({c.m, 2});
    auto toy = torch::tanh(torch::matmul(z, W));
    SequenceBatch toy_batch = batch;
    for (int b = 0; b < toy_batch.batch; ++b)
      for (int t = 0; t < 4; ++t)
        (*toy_batch.actions)[b * 5 + t].delta = {toy[b][t][0].item<float>() * kMaxAction,
                                                  toy[b][t][1].item<float>() * kMaxAction};
    auto& seq = dynamic_cast<torch::nn::SequentialImpl&>(*readout);
    torch::optim::Adam opt(seq.parameters(), 1e-2);
    auto mse = [&] {
      return torch::mse_loss(seq.forward(z), action_targets(toy_batch).slice(1, 0, 4));
    };
    const double initial = mse().item<double>();
    {
      torch::AutoGradMode on(true);
      for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        auto l = mse();
        l.backward();
        opt.step();
      }
    }
    CHECK(mse().item<double>() * 10 < initial);
  }

  SUBCASE("both variants train to completion") {
    auto base = fixtures::tiny_config();
    base.epochs = 1;
    const auto inv = train_variant(apply_variant(base, "inv_to_actions"), view);
    CHECK(inv.history.steps.size() == static_cast<std::size_t>(inv.total_steps));
    CHECK_FALSE(inv.bundle->config().forward_head);
    const auto plus = train_variant(apply_variant(base, "full_plus_actions"), view);
    CHECK(plus.history.steps.back().aux > 0.0);
  }
}

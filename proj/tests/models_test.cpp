#include <torch/torch.h>
#undef CHECK  // c10 logging macro; doctest owns CHECK in tests
#include <doctest.h>

#include <filesystem>

#include "checks.hpp"
#include "dynamo/models.hpp"

using namespace dynamo;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.embed_dim = 16;
  c.latent_dim = 4;
  c.width = 16;
  c.heads = 2;
  return c;
}

torch::Tensor random_frames(int B, int h, int V, int size) {
  return torch::randint(0, 256, {B, h, V, size, size, 3}, torch::TensorOptions().dtype(torch::kUInt8));
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.latent_dim = c.embed_dim;
  CHECK_THROWS_AS(ModelBundle{c}, ModelError);
  c.allow_no_bottleneck = true;
  CHECK_NOTHROW(ModelBundle{c});

  c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ModelError);
  c = small_config();
  c.forward_dropout = 0.3;
  CHECK_NOTHROW(c.validate());
  CHECK(ModelConfig::from_map(c.to_map()) == c);
}

TEST_CASE("encode") {
  torch::manual_seed(0);
  ModelBundle bundle(small_config());
  bundle.eval();
  auto frames = random_frames(2, 3, 2, 16);

  SUBCASE("shape") { CHECK(bundle.encode(frames).sizes() == std::vector<std::int64_t>{2, 3, 2, 16}); }

  SUBCASE("identical frames give identical embeddings") {
    frames.select(1, 2).copy_(frames.select(1, 0));
    auto s = bundle.encode(frames);
    CHECK(torch::equal(s.select(1, 0), s.select(1, 2)));
  }

  SUBCASE("one encoder for both views") {
    frames.select(2, 1).copy_(frames.select(2, 0));
    auto s = bundle.encode(frames);
    CHECK(torch::equal(s.select(2, 0), s.select(2, 1)));
    CHECK(bundle.encoders().size() == 1);
  }

  SUBCASE("wrong image size") { CHECK_THROWS_AS(bundle.encode(random_frames(1, 2, 2, 32)), ModelError); }

  SUBCASE("EMA requested but absent") { CHECK_THROWS_AS(bundle.encode(frames, true), ModelError); }
}

TEST_CASE("per-view encoders option") {
  auto c = small_config();
  c.shared_encoder = false;
  ModelBundle bundle(c);
  CHECK(bundle.encoders().size() == 2);
  auto frames = random_frames(1, 2, 2, 16);
  frames.select(2, 1).copy_(frames.select(2, 0));
  auto s = bundle.encode(frames);
  CHECK_FALSE(torch::equal(s.select(2, 0), s.select(2, 1)));
}

TEST_CASE("dynamics heads") {
  torch::manual_seed(1);
  ModelBundle bundle(small_config());
  bundle.eval();

  SUBCASE("shapes") {
    auto s = torch::randn({3, 5, 16});
    auto z = bundle.inverse_dynamics(s);
    CHECK(z.sizes() == std::vector<std::int64_t>{3, 4, 4});
    CHECK(bundle.forward_dynamics(s.slice(1, 0, 4), z).sizes() == std::vector<std::int64_t>{3, 4, 16});
    CHECK(bundle.inverse_dynamics(torch::randn({1, 2, 16})).size(1) == 1);
  }

  SUBCASE("errors") {
    try {
      bundle.inverse_dynamics(torch::randn({1, 1, 16}));
      FAIL("expected error");
    } catch (const ModelError& e) {
      CHECK(std::string(e.what()) == "need >= 2 frames");
    }
    CHECK_THROWS_AS(bundle.forward_dynamics(torch::randn({1, 3, 16}), torch::randn({1, 2, 4})), ModelError);
    CHECK_THROWS_AS(bundle.inverse_dynamics(torch::randn({1, 9, 16})), ModelError);
  }

  SUBCASE("inverse head reads s_{t+1}") {
    torch::NoGradGuard g;
    auto s = torch::randn({1, 4, 16});
    auto s2 = s.clone();
    s2.select(1, 1).add_(1.0);
    auto z = bundle.inverse_dynamics(s), z2 = bundle.inverse_dynamics(s2);
    CHECK((z.select(1, 0) - z2.select(1, 0)).abs().max().item<double>() > 1e-4);
  }

  SUBCASE("forward head output at t sees pair t") {
    torch::NoGradGuard g;
    auto s = torch::randn({1, 4, 16}), z = torch::randn({1, 4, 4});
    auto z2 = z.clone();
    z2.select(1, 2).add_(1.0);
    auto y = bundle.forward_dynamics(s, z), y2 = bundle.forward_dynamics(s, z2);
    CHECK((y.select(1, 2) - y2.select(1, 2)).abs().max().item<double>() > 1e-4);
  }
}

TEST_CASE("causality under random perturbations") { CHECK(checks::causality_worst(20, 3) <= 1e-6); }

TEST_CASE("forward input modes") {
  auto c = small_config();
  c.forward_input = ForwardInput::latent_only;
  ModelBundle latent_only(c);
  CHECK(latent_only.forward_dynamics({}, torch::randn({2, 3, 4})).sizes() == std::vector<std::int64_t>{2, 3, 16});

  c.forward_input = ForwardInput::state_only;
  c.inverse_head = false;
  ModelBundle state_only(c);
  CHECK(state_only.forward_dynamics(torch::randn({2, 3, 16}), {}).size(2) == 16);
  CHECK_THROWS_AS(state_only.inverse_dynamics(torch::randn({2, 3, 16})), ModelError);
}

TEST_CASE("EMA shadow encoder") {
  auto c = small_config();
  c.ema = true;
  torch::manual_seed(2);
  ModelBundle bundle(c);
  bundle.eval();
  auto frames = random_frames(2, 2, 2, 16);
  CHECK(torch::equal(bundle.encode(frames), bundle.encode(frames, true)));

  {
    torch::NoGradGuard g;
    for (auto& p : bundle.encoder_parameters()) p.add_(torch::randn_like(p) * 0.1);
  }
  const auto before = bundle.encode(frames, true);
  bundle.ema_update(1.0);
  CHECK(torch::equal(bundle.encode(frames, true), before));
  bundle.ema_update(0.0);
  CHECK(torch::equal(bundle.encode(frames, true), bundle.encode(frames)));

  CHECK_THROWS_AS(bundle.ema_update(1.5), ModelError);
  CHECK_THROWS_AS(bundle.ema_update(-0.1), ModelError);
  CHECK(bundle.trainable_parameters().size() + bundle.encoder_parameters().size() ==
        bundle.named_state().size());
  CHECK_THROWS_AS(ModelBundle(small_config()).ema_update(0.5), ModelError);
}

TEST_CASE("checkpoint roundtrip") {
  auto c = small_config();
  c.ema = true;
  c.forward_dropout = 0.3;
  torch::manual_seed(4);
  ModelBundle bundle(c);
  bundle.eval();
  const auto path = std::filesystem::temp_directory_path() / "dynamo_models_test.ckpt";
  save_model(bundle, path);

  auto loaded = load_model(path);
  loaded->eval();
  CHECK(loaded->config() == c);
  auto frames = random_frames(2, 3, 2, 16);
  CHECK(torch::equal(bundle.encode(frames), loaded->encode(frames)));
  CHECK(torch::equal(bundle.encode(frames, true), loaded->encode(frames, true)));
  CHECK(tensor_checksum(bundle.trainable_parameters()) == tensor_checksum(loaded->trainable_parameters()));

  SUBCASE("truncated") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 20);
    CHECK_THROWS_AS(load_model(path), ModelError);
  }
  SUBCASE("shape mismatch") {
    auto other = small_config();
    other.embed_dim = 32;
    ModelBundle wrong(other);
    CHECK_THROWS_AS(load_state_into(wrong, read_archive(path)), ModelError);
  }
}

#include <torch/torch.h>
#undef CHECK  // c10 logging macro; doctest owns CHECK in tests
#include <doctest.h>

#include <cmath>
#include <random>

#include "dynamo/policy.hpp"
#include "fixtures.hpp"

using namespace dynamo;

namespace {

PolicyMemory memory_of(std::initializer_list<std::array<float, 4>> rows) {
  PolicyMemory m;
  m.keys.resize(static_cast<Eigen::Index>(rows.size()), 2);
  m.values.resize(static_cast<Eigen::Index>(rows.size()), 2);
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    m.keys.row(i) << r[0], r[1];
    m.values.row(i++) << r[2], r[3];
  }
  return m;
}

Eigen::RowVectorXf point(float x, float y) {
  Eigen::RowVectorXf q(2);
  q << x, y;
  return q;
}

class NanPolicy : public Policy {
 public:
  bool needs_embedding() const override { return false; }
  Action act(const WorldState&, const Eigen::RowVectorXf&) override { return {{std::nanf(""), 0.0f}}; }
};

}  // namespace

TEST_CASE("kNN locally weighted regression") {
  SUBCASE("exact key with k = 1") {
    const auto m = memory_of({{0, 0, 0.1f, 0.2f}, {1, 1, -0.3f, 0.4f}, {2, 0, 0.5f, 0.5f}});
    const auto a = knn_lwr_act(m, point(1, 1), 1);
    CHECK(a.delta.x == -0.3f);
    CHECK(a.delta.y == 0.4f);
  }
  SUBCASE("shared action") {
    const auto m = memory_of({{0, 0, 0.02f, -0.01f}, {1, 1, 0.02f, -0.01f}, {3, 0, 0.02f, -0.01f}});
    const auto a = knn_lwr_act(m, point(0.3f, 0.2f), 3);
    CHECK(a.delta.x == doctest::Approx(0.02f));
    CHECK(a.delta.y == doctest::Approx(-0.01f));
  }
  SUBCASE("two equidistant neighbors") {
    const auto m = memory_of({{1, 0, 1, 0}, {-1, 0, 0, 1}, {9, 9, 5, 5}});
    const auto a = knn_lwr_act(m, point(0, 0), 2);
    CHECK(a.delta.x == doctest::Approx(0.5));
    CHECK(a.delta.y == doctest::Approx(0.5));
  }
  SUBCASE("ties go to the lower index") {
    const auto m = memory_of({{1, 0, 1, 0}, {-1, 0, 0, 1}});
    CHECK(knn_lwr_act(m, point(0, 0), 1).delta.x == 1.0f);
  }
  SUBCASE("output lies in the componentwise hull of the neighbors") {
    std::mt19937 rng(4);
    std::normal_distribution<float> n;
    PolicyMemory m;
    m.keys.resize(200, 6);
    m.values.resize(200, 2);
    for (int i = 0; i < 200; ++i) {
      for (int j = 0; j < 6; ++j) m.keys(i, j) = n(rng);
      m.values.row(i) << n(rng), n(rng);
    }
    for (int trial = 0; trial < 50; ++trial) {
      Eigen::RowVectorXf q(6);
      for (int j = 0; j < 6; ++j) q[j] = n(rng);
      const auto a = knn_lwr_act(m, q, 16);
      const Eigen::VectorXf d = (m.keys.rowwise() - q).rowwise().norm();
      std::vector<int> idx(200);
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](int x, int y) { return d[x] < d[y]; });
      float lo0 = 1e9f, hi0 = -1e9f, lo1 = 1e9f, hi1 = -1e9f;
      for (int i = 0; i < 16; ++i) {
        lo0 = std::min(lo0, m.values(idx[i], 0));
        hi0 = std::max(hi0, m.values(idx[i], 0));
        lo1 = std::min(lo1, m.values(idx[i], 1));
        hi1 = std::max(hi1, m.values(idx[i], 1));
      }
      CHECK(a.delta.x >= lo0 - 1e-6f);
      CHECK(a.delta.x <= hi0 + 1e-6f);
      CHECK(a.delta.y >= lo1 - 1e-6f);
      CHECK(a.delta.y <= hi1 + 1e-6f);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(knn_lwr_act(PolicyMemory{}, point(0, 0), 1), PolicyError);
    const auto m = memory_of({{0, 0, 0, 0}});
    CHECK_THROWS_AS(knn_lwr_act(m, point(0, 0), 2), PolicyError);
  }
}

TEST_CASE("rollouts of scripted policies") {
  RolloutConfig c;
  ExpertPolicy expert;
  const auto e = rollout(expert, nullptr, c, "expert");
  CHECK(e.episodes.size() == 100);
  CHECK(e.mean() >= 1.98);

  RandomPolicy random;
  const auto r = rollout(random, nullptr, c, "random");
  CHECK(r.mean() < 0.2);
  CHECK(to_json(r) == to_json(rollout(random, nullptr, c, "random")));

  c.episodes = 0;
  const auto empty = rollout(expert, nullptr, c);
  CHECK(empty.episodes.empty());
  CHECK(empty.mean() == 0.0);

  c.episodes = 3;
  NanPolicy nan;
  const auto bad = rollout(nan, nullptr, c);
  REQUIRE(bad.episodes.size() == 3);
  CHECK(bad.episodes[0].failed);
  CHECK(bad.episodes[0].success == 0.0);
  CHECK(to_json(bad).find("\"failures\": 3") != std::string::npos);

  KnnPolicy knn(memory_of({{0, 0, 0, 0}}), 1);
  CHECK_THROWS_AS(rollout(knn, nullptr, c), PolicyError);
}

TEST_CASE("policies on frozen embeddings") {
  const auto& data = fixtures::tiny_dataset();
  const LabeledView view(data);
  const auto tc = fixtures::tiny_config();
  torch::manual_seed(1);
  ModelBundle bundle(tc.model_config());
  const auto before = tensor_checksum(bundle.encoder_parameters());
  const auto bank = build_bank(bundle, view);

  SUBCASE("behavior cloning with action chunks") {
    BcConfig bc;
    bc.hidden = 64;
    bc.batch = 64;
    BcHistory h;
    auto policy = bc_train(bc, bank, view, &h);
    REQUIRE(h.epoch_mse.size() == 50);
    CHECK(h.epoch_mse.back() * 5 < h.epoch_mse.front());
    CHECK(policy->forward(torch::zeros({3, 5 * bank.dim()})).sizes() == std::vector<std::int64_t>{3, 5, 2});
    CHECK(tensor_checksum(bundle.encoder_parameters()) == before);

    bc.chunk = 1;
    bc.epochs = 1;
    CHECK(bc_train(bc, bank, view)->forward(torch::zeros({1, 5 * bank.dim()})).numel() == 2);

    const auto [x, y] = bc_examples(bank, view, 5, 5);
    const auto& a0 = data.trajectories[0].actions;
    CHECK(y[0][1][0].item<float>() == doctest::Approx(a0[1].delta.x / kMaxAction));
    CHECK(torch::equal(x[0].slice(0, 0, bank.dim()), x[0].slice(0, 4 * bank.dim(), 5 * bank.dim())));
    const auto last = static_cast<std::int64_t>(a0.size()) - 1;
    CHECK(y[last][1].abs().sum().item<float>() == 0.0f);

    RolloutConfig rc;
    rc.episodes = 2;
    rc.cap = 20;
    const auto r1 = rollout(*policy, &bundle, rc);
    CHECK(to_json(r1) == to_json(rollout(*policy, &bundle, rc)));

    const auto path = fixtures::scratch("bc") / "policy.ckpt";
    save_policy(*policy, before, path);
    auto loaded = load_policy(path);
    CHECK(loaded.kind == "bc");
    CHECK(loaded.encoder_checksum == before);
    CHECK(to_json(rollout(*loaded.policy, &bundle, rc)) == to_json(r1));
  }

  SUBCASE("kNN memory and checkpoint") {
    auto memory = build_memory(bank, view);
    CHECK(memory.size() == bank.size());
    CHECK(memory.values(3, 1) == data.trajectories[0].actions[3].delta.y);
    const auto query = bank.embeddings.row(7);
    const auto a = knn_lwr_act(memory, query, 1);
    CHECK(a.delta.x == data.trajectories[0].actions[7].delta.x);

    KnnPolicy knn(memory, kKnnDefaultK);
    RolloutConfig rc;
    rc.episodes = 2;
    rc.cap = 15;
    const auto r = rollout(knn, &bundle, rc, "knn");
    CHECK(r.episodes.size() == 2);
    const auto path = fixtures::scratch("knn") / "policy.ckpt";
    save_policy(knn, before, path);
    auto loaded = load_policy(path);
    CHECK(loaded.kind == "knn");
    CHECK(to_json(rollout(*loaded.policy, &bundle, rc, "knn")) == to_json(r));
    CHECK(tensor_checksum(bundle.encoder_parameters()) == before);
  }
}

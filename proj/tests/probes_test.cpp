#include <torch/torch.h>
#undef CHECK  // c10 logging macro; doctest owns CHECK in tests
#include <doctest.h>

#include <random>

#include "dynamo/probes.hpp"
#include "dynamo/trainer.hpp"
#include "fixtures.hpp"

using namespace dynamo;

namespace {

// Random positions on `trajectories` trajectories of `length` frames.
EmbeddingBank synthetic_bank(int trajectories, int length, int dim, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> n01;
  const int N = trajectories * length;
  EmbeddingBank b;
  b.positions.resize(N, 6);
  b.embeddings.resize(N, dim);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < 6; ++j) b.positions(i, j) = n01(rng);
    for (int j = 0; j < dim; ++j) b.embeddings(i, j) = n01(rng);
    b.sources.push_back({static_cast<std::uint32_t>(i / length), static_cast<std::uint32_t>(i % length)});
  }
  return b;
}

}  // namespace

TEST_CASE("state probe") {
  const auto base = synthetic_bank(20, 30, 6, 1);

  SUBCASE("features equal to the targets") {
    const auto fit = state_probe(bank_with_features(base, base.positions));
    CHECK(fit.r2_agent > 0.999);
    CHECK(fit.r2_block0 > 0.999);
    CHECK(fit.r2_block1 > 0.999);
  }

  SUBCASE("constant features explain nothing") {
    const auto fit = state_probe(bank_with_features(base, Eigen::MatrixXf::Constant(600, 4, 2.5f)));
    CHECK(fit.r2_agent <= 1e-9);
    CHECK(fit.r2_block0 <= 1e-9);
  }

  SUBCASE("invariant to per-dimension affine maps of the features") {
    Eigen::MatrixXf f = base.embeddings;
    f.leftCols(6) += 0.3f * base.positions;
    const auto a = state_probe(bank_with_features(base, f));
    Eigen::MatrixXf g = f;
    for (int j = 0; j < g.cols(); ++j) g.col(j) = g.col(j).array() * (j + 2.0f) - 7.0f;
    const auto b = state_probe(bank_with_features(base, g));
    CHECK(a.r2_block0 == doctest::Approx(b.r2_block0).epsilon(1e-4));
    CHECK(a.r2_agent == doctest::Approx(b.r2_agent).epsilon(1e-4));
  }

  SUBCASE("split is at trajectory level and needs two trajectories") {
    CHECK_THROWS_AS(state_probe(synthetic_bank(1, 50, 3, 2)), ProbeError);
    CHECK_NOTHROW(state_probe(synthetic_bank(2, 50, 3, 2)));
  }
}

TEST_CASE("nearest-neighbor retrieval") {
  auto bank = synthetic_bank(4, 10, 5, 3);

  SUBCASE("an exact duplicate in another trajectory is the first neighbor") {
    bank.embeddings.row(27) = bank.embeddings.row(4);
    CHECK(nn_retrieve(bank, 4, 3).front() == 27);
  }

  SUBCASE("frames within two steps on the same trajectory are excluded") {
    bank.embeddings.row(5) = bank.embeddings.row(4);
    bank.embeddings.row(6) = bank.embeddings.row(4);
    bank.embeddings.row(7) = bank.embeddings.row(4) * 1.0001f;
    const auto nn = nn_retrieve(bank, 4, 5);
    for (auto i : nn) {
      CHECK(i != 4);
      CHECK(i != 5);
      CHECK(i != 6);
    }
    CHECK(nn.front() == 7);
  }

  SUBCASE("ties go to the lower index") {
    bank.embeddings.row(30) = bank.embeddings.row(4);
    bank.embeddings.row(20) = bank.embeddings.row(4);
    const auto nn = nn_retrieve(bank, 4, 2);
    CHECK(nn[0] == 20);
    CHECK(nn[1] == 30);
  }

  SUBCASE("row permutation permutes the result") {
    std::vector<int> perm(bank.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    EmbeddingBank p = bank;
    for (std::size_t i = 0; i < bank.size(); ++i) {
      p.embeddings.row(perm[i]) = bank.embeddings.row(i);
      p.positions.row(perm[i]) = bank.positions.row(i);
      p.sources[perm[i]] = bank.sources[i];
    }
    for (std::size_t q : {0u, 13u, 39u}) {
      auto a = nn_retrieve(bank, q, 4);
      auto b = nn_retrieve(p, perm[q], 4);
      for (auto& i : a) i = perm[i];
      CHECK(a == b);
    }
  }

  SUBCASE("k must leave candidates") {
    CHECK_THROWS_AS(nn_retrieve(bank, 0, 0), ProbeError);
    CHECK_THROWS_AS(nn_retrieve(bank, 0, 40), ProbeError);
    CHECK_THROWS_AS(nn_retrieve(bank, 0, 38), ProbeError);
    CHECK(nn_retrieve(bank, 0, 37).size() == 37);
  }

  SUBCASE("block distances and queries") {
    const auto q = choose_queries(bank.size(), 10, 0);
    CHECK(std::set<std::size_t>(q.begin(), q.end()).size() == 10);
    CHECK(q == choose_queries(bank.size(), 10, 0));
    EmbeddingBank same = bank;
    same.positions.rightCols(4).setZero();
    for (double d : retrieval_block_distances(same, q, 5)) CHECK(d == 0.0);
  }
}

TEST_CASE("sign test") {
  CHECK(sign_test_p(0, 10) == doctest::Approx(1.0));
  CHECK(sign_test_p(10, 10) == doctest::Approx(1.0 / 1024));
  CHECK(sign_test_p(9, 10) == doctest::Approx(11.0 / 1024));
  CHECK(sign_test_p(5, 10) == doctest::Approx(638.0 / 1024));
}

TEST_CASE("collapse diagnostics") {
  SUBCASE("identical rows") {
    const auto s = collapse_diagnostics(Eigen::MatrixXf::Constant(30, 8, 1.5f));
    CHECK(s.std_min == 0.0);
    CHECK(s.effective_rank == 1.0);
  }
  SUBCASE("orthonormal rows") {
    const auto s = collapse_diagnostics(Eigen::MatrixXf::Identity(12, 12));
    CHECK(s.effective_rank == doctest::Approx(11.0).epsilon(1e-6));
  }
  SUBCASE("rank one") {
    Eigen::MatrixXf x(20, 6);
    for (int i = 0; i < 20; ++i) x.row(i) = Eigen::RowVectorXf::LinSpaced(6, 1, 6) * static_cast<float>(i);
    CHECK(collapse_diagnostics(x).effective_rank == doctest::Approx(1.0).epsilon(1e-3));
  }
  SUBCASE("per-dimension std") {
    Eigen::MatrixXf x(4, 2);
    x << 0, 1, 0, 1, 0, 3, 0, 3;
    const auto s = collapse_diagnostics(x);
    CHECK(s.std_per_dim[0] == 0.0);
    CHECK(s.std_per_dim[1] == doctest::Approx(std::sqrt(4.0 / 3.0)));
    CHECK_THROWS_AS(collapse_diagnostics(Eigen::MatrixXf::Zero(1, 3)), ProbeError);
  }
}

TEST_CASE("banks from a model") {
  const auto& data = fixtures::tiny_dataset();
  const auto c = fixtures::tiny_config();
  torch::manual_seed(0);
  ModelBundle bundle(c.model_config());
  const auto bank = build_bank(bundle, LabeledView(data));
  CHECK(bank.size() == data.total_frames());
  CHECK(bank.dim() == c.views * c.d);
  CHECK(bank.sources[bank.size() - 1].trajectory == data.trajectories.size() - 1);
  CHECK(bank.positions(1, 2) == data.trajectories[0].states[1].block_pos[0].x);

  const auto path = fixtures::scratch("bank") / "bank.bin";
  save_bank(bank, path);
  const auto back = load_bank(path);
  CHECK(back.embeddings == bank.embeddings);
  CHECK(back.positions == bank.positions);
  CHECK((back.sources == bank.sources));

  const auto report = probe_report(bank, 5, 20, 0);
  CHECK(report.n == bank.size());
  const auto json = to_json(report);
  CHECK(json.find("\"metric\": \"euclidean\"") != std::string::npos);
  CHECK(json.find("block_pos_1") != std::string::npos);
}

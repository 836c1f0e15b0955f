#include "dynamo/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

namespace dynamo {

namespace {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr std::int64_t kBankChunk = 128;

}  // namespace

EmbeddingBank build_bank(ModelBundle& bundle, const LabeledView& data) {
  bundle.eval();
  torch::NoGradGuard guard;
  const auto& ds = data.dataset();
  const int V = bundle.config().views;
  const int d = bundle.config().embed_dim;
  const int D = V * d;
  const std::size_t N = ds.total_frames();

  EmbeddingBank bank;
  bank.embeddings.resize(static_cast<Eigen::Index>(N), D);
  bank.positions.resize(static_cast<Eigen::Index>(N), 6);
  bank.sources.reserve(N);

  Eigen::Index row = 0;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const auto& tr = ds.trajectories[i];
    const auto T = static_cast<std::int64_t>(tr.length());
    auto all = torch::from_blob(const_cast<std::uint8_t*>(tr.frames.data()),
                                {1, T, tr.views, tr.height, tr.width, 3}, torch::kUInt8);
    for (std::int64_t t0 = 0; t0 < T; t0 += kBankChunk) {
      const auto len = std::min(kBankChunk, T - t0);
      auto s = bundle.encode(all.slice(1, t0, t0 + len)).reshape({len, D}).contiguous();
      bank.embeddings.block(row + t0, 0, len, D) = Eigen::Map<const RowMatrixF>(s.data_ptr<float>(), len, D);
    }
    for (std::int64_t t = 0; t < T; ++t) {
      const auto& st = tr.states[t];
      bank.positions.row(row + t) << st.agent_pos.x, st.agent_pos.y, st.block_pos[0].x, st.block_pos[0].y,
          st.block_pos[1].x, st.block_pos[1].y;
      bank.sources.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(t)});
    }
    row += T;
  }
  return bank;
}

EmbeddingBank bank_with_features(const EmbeddingBank& like, Eigen::MatrixXf features) {
  if (features.rows() != like.embeddings.rows()) throw ProbeError("feature rows do not match the bank");
  EmbeddingBank b = like;
  b.embeddings = std::move(features);
  return b;
}

void save_bank(const EmbeddingBank& bank, const std::filesystem::path& path) {
  const auto N = static_cast<std::int64_t>(bank.size());
  TensorArchive a;
  a.kind = "bank";
  a.metadata["n"] = std::to_string(N);
  a.metadata["dim"] = std::to_string(bank.dim());
  const RowMatrixF e = bank.embeddings;
  const RowMatrixF p = bank.positions;
  a.tensors.emplace_back("embeddings", torch::from_blob(const_cast<float*>(e.data()), {N, bank.dim()}).clone());
  a.tensors.emplace_back("positions", torch::from_blob(const_cast<float*>(p.data()), {N, 6}).clone());
  auto src = torch::empty({N, 2}, torch::kInt64);
  auto acc = src.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < N; ++i) {
    acc[i][0] = bank.sources[i].trajectory;
    acc[i][1] = bank.sources[i].t;
  }
  a.tensors.emplace_back("sources", src);
  write_archive(a, path);
}

EmbeddingBank load_bank(const std::filesystem::path& path) {
  const auto a = read_archive(path);
  if (a.kind != "bank") throw ModelError("not an embedding bank: " + path.string());
  const auto& e = a.at("embeddings");
  const auto& p = a.at("positions");
  const auto& s = a.at("sources");
  const auto N = e.size(0);
  if (p.size(0) != N || s.size(0) != N || p.size(1) != 6 || s.size(1) != 2) throw ModelError("malformed bank file");
  EmbeddingBank b;
  b.embeddings = Eigen::Map<const RowMatrixF>(e.data_ptr<float>(), N, e.size(1));
  b.positions = Eigen::Map<const RowMatrixF>(p.data_ptr<float>(), N, 6);
  auto acc = s.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < N; ++i)
    b.sources.push_back({static_cast<std::uint32_t>(acc[i][0]), static_cast<std::uint32_t>(acc[i][1])});
  return b;
}

// ---------------------------------------------------------------------------
// Retrieval

std::vector<std::size_t> nn_retrieve(const EmbeddingBank& bank, std::size_t query, int k) {
  const std::size_t N = bank.size();
  if (k < 1 || static_cast<std::size_t>(k) >= N) throw ProbeError("nn_retrieve needs 1 <= k < N");
  if (query >= N) throw ProbeError("query index out of range");

  const Eigen::VectorXf dist = (bank.embeddings.rowwise() - bank.embeddings.row(query)).rowwise().squaredNorm();
  const FrameRef q = bank.sources[query];
  std::vector<std::size_t> candidates;
  candidates.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    const FrameRef r = bank.sources[i];
    const long gap = static_cast<long>(r.t) - static_cast<long>(q.t);
    if (r.trajectory == q.trajectory && std::abs(gap) <= kTemporalExclusion) continue;
    candidates.push_back(i);
  }
  if (candidates.size() < static_cast<std::size_t>(k)) throw ProbeError("fewer than k candidates after exclusion");
  auto closer = [&](std::size_t a, std::size_t b) {
    return dist[static_cast<Eigen::Index>(a)] < dist[static_cast<Eigen::Index>(b)] ||
           (dist[static_cast<Eigen::Index>(a)] == dist[static_cast<Eigen::Index>(b)] && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + k, candidates.end(), closer);
  candidates.resize(static_cast<std::size_t>(k));
  return candidates;
}

std::vector<double> retrieval_block_distances(const EmbeddingBank& bank, const std::vector<std::size_t>& queries,
                                              int k) {
  std::vector<double> out;
  out.reserve(queries.size());
  for (std::size_t q : queries) {
    double acc = 0;
    const auto pq = bank.positions.row(static_cast<Eigen::Index>(q)).cast<double>();
    for (std::size_t n : nn_retrieve(bank, q, k)) {
      const auto pn = bank.positions.row(static_cast<Eigen::Index>(n)).cast<double>();
      acc += 0.5 * ((pq.segment<2>(2) - pn.segment<2>(2)).norm() + (pq.segment<2>(4) - pn.segment<2>(4)).norm());
    }
    out.push_back(acc / k);
  }
  return out;
}

std::vector<std::size_t> choose_queries(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) throw ProbeError("more queries than bank rows");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

double sign_test_p(int wins, int trials) {
  if (trials <= 0) return 1.0;
  // P(X >= wins), X ~ Binomial(trials, 1/2), summed in log space.
  double p = 0;
  for (int i = wins; i <= trials; ++i)
    p += std::exp(std::lgamma(trials + 1.0) - std::lgamma(i + 1.0) - std::lgamma(trials - i + 1.0) -
                  trials * std::log(2.0));
  return std::min(1.0, p);
}

// ---------------------------------------------------------------------------
// State probe

ProbeFit state_probe(const EmbeddingBank& bank, double ridge, std::uint64_t split_seed) {
  std::uint32_t n_traj = 0;
  for (const auto& s : bank.sources) n_traj = std::max(n_traj, s.trajectory + 1);
  std::vector<std::uint32_t> order(n_traj);
  std::iota(order.begin(), order.end(), 0u);
  std::mt19937_64 rng(split_seed);
  for (std::uint32_t i = n_traj; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  const std::uint32_t n_train = static_cast<std::uint32_t>(std::floor(0.8 * n_traj));
  if (n_train < 1 || n_train >= n_traj) throw ProbeError("degenerate split: need at least two trajectories");
  std::vector<bool> is_train(n_traj, false);
  for (std::uint32_t i = 0; i < n_train; ++i) is_train[order[i]] = true;

  std::vector<Eigen::Index> train_rows, test_rows;
  for (std::size_t i = 0; i < bank.size(); ++i)
    (is_train[bank.sources[i].trajectory] ? train_rows : test_rows).push_back(static_cast<Eigen::Index>(i));
  if (train_rows.size() < 2 || test_rows.empty()) throw ProbeError("degenerate split: empty partition");

  const Eigen::MatrixXd X = bank.embeddings.cast<double>()(train_rows, Eigen::all);
  const Eigen::MatrixXd Y = bank.positions.cast<double>()(train_rows, Eigen::all);
  const Eigen::MatrixXd Xt = bank.embeddings.cast<double>()(test_rows, Eigen::all);
  const Eigen::MatrixXd Yt = bank.positions.cast<double>()(test_rows, Eigen::all);

  const Eigen::RowVectorXd mu = X.colwise().mean();
  Eigen::RowVectorXd sd = ((X.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(X.rows())).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (sd[j] < 1e-12) sd[j] = 1.0;
  const Eigen::MatrixXd Xs = (X.rowwise() - mu).array().rowwise() / sd.array();
  const Eigen::MatrixXd Xts = (Xt.rowwise() - mu).array().rowwise() / sd.array();
  const Eigen::RowVectorXd ymu = Y.colwise().mean();

  Eigen::MatrixXd A = Xs.transpose() * Xs;
  A.diagonal().array() += ridge;
  const Eigen::MatrixXd W = A.ldlt().solve(Xs.transpose() * (Y.rowwise() - ymu));
  const Eigen::MatrixXd P = (Xts * W).rowwise() + ymu;

  Eigen::VectorXd r2(6);
  for (int j = 0; j < 6; ++j) {
    const double sse = (P.col(j) - Yt.col(j)).squaredNorm();
    const double sst = (Yt.col(j).array() - Yt.col(j).mean()).square().sum();
    r2[j] = sst > 0 ? 1.0 - sse / sst : 0.0;
  }
  return {0.5 * (r2[0] + r2[1]), 0.5 * (r2[2] + r2[3]), 0.5 * (r2[4] + r2[5])};
}

CollapseStats collapse_diagnostics(const Eigen::MatrixXf& embeddings) {
  if (embeddings.rows() < 2) throw ProbeError("collapse diagnostics need N >= 2");
  const Eigen::MatrixXd X = embeddings.cast<double>();
  const Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
  CollapseStats s;
  const Eigen::VectorXd var = C.array().square().colwise().sum() / static_cast<double>(X.rows() - 1);
  for (Eigen::Index j = 0; j < var.size(); ++j) s.std_per_dim.push_back(std::sqrt(var[j]));
  s.std_min = *std::min_element(s.std_per_dim.begin(), s.std_per_dim.end());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C.transpose() * C, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd sv = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const double total = sv.sum();
  if (total <= 0) return s;
  double entropy = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    const double p = sv[i] / total;
    if (p > 0) entropy -= p * std::log(p);
  }
  s.effective_rank = std::exp(entropy);
  return s;
}

ProbeReport probe_report(const EmbeddingBank& bank, int k, int queries, std::uint64_t seed) {
  ProbeReport r;
  const auto fit = state_probe(bank);
  r.r2_agent = fit.r2_agent;
  r.r2_block0 = fit.r2_block0;
  r.r2_block1 = fit.r2_block1;
  const auto c = collapse_diagnostics(bank.embeddings);
  r.std_per_dim = c.std_per_dim;
  r.std_min = c.std_min;
  r.effective_rank = c.effective_rank;
  const auto q = choose_queries(bank.size(), static_cast<std::size_t>(std::min<std::size_t>(queries, bank.size())), seed);
  const auto dists = retrieval_block_distances(bank, q, k);
  r.retrieval_block_distance = std::accumulate(dists.begin(), dists.end(), 0.0) / static_cast<double>(dists.size());
  r.retrieval_k = k;
  r.retrieval_queries = static_cast<int>(q.size());
  r.n = bank.size();
  r.dim = bank.dim();
  return r;
}

std::string to_json(const ProbeReport& r) {
  nlohmann::ordered_json j;
  j["n"] = r.n;
  j["dim"] = r.dim;
  j["r2"] = {{"agent_pos", r.r2_agent}, {"block_pos_0", r.r2_block0}, {"block_pos_1", r.r2_block1},
             {"blocks_mean", r.r2_blocks()}};
  j["probe"] = {{"kind", "ridge"}, {"ridge", kRidge}, {"split", "80/20 by trajectory"}};
  j["retrieval"] = {{"metric", "euclidean"},
                    {"k", r.retrieval_k},
                    {"queries", r.retrieval_queries},
                    {"temporal_exclusion", kTemporalExclusion},
                    {"mean_block_distance", r.retrieval_block_distance}};
  j["collapse"] = {{"std_min", r.std_min}, {"effective_rank", r.effective_rank}, {"std_per_dim", r.std_per_dim}};
  return j.dump(2);
}

}  // namespace dynamo

#pragma once

// Frozen-embedding analysis: embedding banks, nearest-neighbor retrieval,
// ridge probes onto ground-truth state, and collapse diagnostics.

#include <Eigen/Dense>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynamo/demodata.hpp"
#include "dynamo/models.hpp"

namespace dynamo {

class ProbeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FrameRef {
  std::uint32_t trajectory = 0;
  std::uint32_t t = 0;
  friend bool operator==(FrameRef, FrameRef) = default;
};

struct EmbeddingBank {
  /// N x D, views concatenated (D = V * d).
  Eigen::MatrixXf embeddings;
  /// N x 6: agent xy, block 0 xy, block 1 xy.
  Eigen::MatrixXf positions;
  std::vector<FrameRef> sources;

  std::size_t size() const { return sources.size(); }
  int dim() const { return static_cast<int>(embeddings.cols()); }
};

/// Evaluation-mode embeddings of every frame, trajectory-major.
EmbeddingBank build_bank(ModelBundle& bundle, const LabeledView& data);

/// Rows as a bank (positions and sources copied from `like`).
EmbeddingBank bank_with_features(const EmbeddingBank& like, Eigen::MatrixXf features);

void save_bank(const EmbeddingBank& bank, const std::filesystem::path& path);
EmbeddingBank load_bank(const std::filesystem::path& path);

inline constexpr int kTemporalExclusion = 2;

/// k nearest rows to row `query` by Euclidean distance, skipping rows of the
/// same trajectory within +-2 frames (the query included). Ties go to the
/// lower index.
std::vector<std::size_t> nn_retrieve(const EmbeddingBank& bank, std::size_t query, int k);

/// Mean over the two blocks of the ground-truth position distance between
/// a query and its neighbors, averaged over the k neighbors; one value per
/// query.
std::vector<double> retrieval_block_distances(const EmbeddingBank& bank, const std::vector<std::size_t>& queries,
                                              int k);

/// `count` distinct query rows drawn with a fixed seed.
std::vector<std::size_t> choose_queries(std::size_t n, std::size_t count, std::uint64_t seed);

/// One-sided sign test: probability of at least `wins` successes in
/// `trials` fair coin flips.
double sign_test_p(int wins, int trials);

struct ProbeReport {
  double r2_agent = 0;
  double r2_block0 = 0;
  double r2_block1 = 0;
  double r2_blocks() const { return 0.5 * (r2_block0 + r2_block1); }
  std::vector<double> std_per_dim;
  double std_min = 0;
  double effective_rank = 0;
  double retrieval_block_distance = 0;
  int retrieval_k = 0;
  int retrieval_queries = 0;
  std::size_t n = 0;
  int dim = 0;
};

inline constexpr double kRidge = 1e-3;
inline constexpr std::uint64_t kSplitSeed = 12345;

struct ProbeFit {
  double r2_agent = 0, r2_block0 = 0, r2_block1 = 0;
};

/// Ridge regression (standardized features, intercept unpenalized) from
/// embeddings to positions on an 80/20 trajectory-level split; held-out R^2.
ProbeFit state_probe(const EmbeddingBank& bank, double ridge = kRidge, std::uint64_t split_seed = kSplitSeed);

struct CollapseStats {
  std::vector<double> std_per_dim;
  double std_min = 0;
  double effective_rank = 1;
};

/// Per-dimension std and exp(entropy) of the normalized singular values of
/// the centered bank.
CollapseStats collapse_diagnostics(const Eigen::MatrixXf& embeddings);

/// Probe, diagnostics and retrieval over 200 queries with k = 20.
ProbeReport probe_report(const EmbeddingBank& bank, int k = 20, int queries = 200, std::uint64_t seed = 0);
std::string to_json(const ProbeReport& report);

}  // namespace dynamo

#pragma once

// Downstream policies on frozen embeddings and closed-loop evaluation.

#include <torch/torch.h>

#include <Eigen/Dense>

#include <deque>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dynamo/demodata.hpp"
#include "dynamo/models.hpp"
#include "dynamo/probes.hpp"
#include "dynamo/world.hpp"

namespace dynamo {

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PolicyMemory {
  /// N x D, concatenated views.
  Eigen::MatrixXf keys;
  /// N x 2, world units.
  Eigen::MatrixXf values;

  std::size_t size() const { return static_cast<std::size_t>(keys.rows()); }
};

/// Pairs every bank row with the action taken in that frame.
PolicyMemory build_memory(const EmbeddingBank& bank, const LabeledView& data);

inline constexpr int kKnnDefaultK = 16;

/// Kernel-weighted mean of the k nearest actions, w = exp(-d / (d_k + 1e-8)).
Action knn_lwr_act(const PolicyMemory& memory, const Eigen::RowVectorXf& query, int k = kKnnDefaultK);

class Policy {
 public:
  virtual ~Policy() = default;
  virtual bool needs_embedding() const { return true; }
  virtual void reset(std::uint64_t episode_seed) { (void)episode_seed; }
  /// `embedding` is empty when needs_embedding() is false.
  virtual Action act(const WorldState& state, const Eigen::RowVectorXf& embedding) = 0;
};

class KnnPolicy : public Policy {
 public:
  KnnPolicy(PolicyMemory memory, int k);
  Action act(const WorldState& state, const Eigen::RowVectorXf& embedding) override;
  const PolicyMemory& memory() const { return memory_; }
  int k() const { return k_; }

 private:
  PolicyMemory memory_;
  int k_;
};

/// Scripted expert; the plan is picked from the episode seed.
class ExpertPolicy : public Policy {
 public:
  bool needs_embedding() const override { return false; }
  void reset(std::uint64_t episode_seed) override;
  Action act(const WorldState& state, const Eigen::RowVectorXf& embedding) override;

 private:
  ExpertPlan plan_;
};

/// Uniform actions in the action box.
class RandomPolicy : public Policy {
 public:
  bool needs_embedding() const override { return false; }
  void reset(std::uint64_t episode_seed) override { rng_.seed(episode_seed); }
  Action act(const WorldState& state, const Eigen::RowVectorXf& embedding) override;

 private:
  std::mt19937_64 rng_;
};

struct BcConfig {
  int context = 5;
  int chunk = 5;
  int hidden = 256;
  int epochs = 50;
  int batch = 256;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct BcHistory {
  std::vector<double> epoch_mse;
};

class BcPolicy : public Policy {
 public:
  BcPolicy(const BcConfig& config, int dim);

  void reset(std::uint64_t episode_seed) override;
  Action act(const WorldState& state, const Eigen::RowVectorXf& embedding) override;

  /// Normalized action chunk [B, chunk, 2] from stacked inputs [B, context * D].
  torch::Tensor forward(const torch::Tensor& stacked);

  const BcConfig& config() const { return config_; }
  int dim() const { return dim_; }
  torch::nn::Sequential& net() { return net_; }
  torch::Tensor& feature_mean() { return mean_; }
  torch::Tensor& feature_std() { return std_; }

 private:
  BcConfig config_;
  int dim_;
  torch::nn::Sequential net_;
  torch::Tensor mean_, std_;
  std::deque<Eigen::RowVectorXf> history_;
  std::deque<Action> pending_;
};

/// Stacked inputs and chunk targets for every frame. Context before the
/// first frame repeats frame 0; chunk steps past the end are zero actions.
std::pair<torch::Tensor, torch::Tensor> bc_examples(const EmbeddingBank& bank, const LabeledView& data, int context,
                                                    int chunk);

std::unique_ptr<BcPolicy> bc_train(const BcConfig& config, const EmbeddingBank& bank, const LabeledView& data,
                                   BcHistory* history = nullptr);

struct EpisodeResult {
  std::uint64_t seed = 0;
  double success = 0;
  int steps = 0;
  bool failed = false;
};

struct RolloutReport {
  std::string policy;
  std::vector<EpisodeResult> episodes;
  double mean() const;
};

struct RolloutConfig {
  int episodes = 100;
  std::uint64_t seed = 1000;
  int cap = kEpisodeCap;
};

/// Reset seed of rollout episode `index`.
std::uint64_t rollout_episode_seed(std::uint64_t seed, std::size_t index);

/// Closed-loop evaluation. `encoder` may be null only for policies that do
/// not read embeddings.
RolloutReport rollout(Policy& policy, ModelBundle* encoder, const RolloutConfig& config,
                      const std::string& name = "policy");

std::string to_json(const RolloutReport& report);

/// Saves the policy with the checksum of the encoder it was trained on.
void save_policy(Policy& policy, std::uint64_t encoder_checksum, const std::filesystem::path& path);

struct LoadedPolicy {
  std::unique_ptr<Policy> policy;
  std::string kind;
  std::uint64_t encoder_checksum = 0;
};
LoadedPolicy load_policy(const std::filesystem::path& path);

}  // namespace dynamo

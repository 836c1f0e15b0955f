#pragma once

// Joint optimization of encoder and dynamics heads: schedules, AdamW,
// gradient clipping, EMA updates, JSON-lines logging and resumable
// checkpoints.
//
// Every step draws its windows and its dropout masks from generators seeded
// by (config.seed, step), so a run resumed at step k replays the same
// batches as an unbroken run.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dynamo/demodata.hpp"
#include "dynamo/models.hpp"
#include "dynamo/objective.hpp"

namespace dynamo {

/// Non-finite loss, out-of-range dynamics loss, or similar; carries a dump.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LrMode : std::uint8_t { cosine, constant };

struct TrainConfig {
  std::string variant = "full";
  int h = 5;
  int d = 64;
  int m = 8;
  double lambda = 0.04;
  TargetMode target_mode = TargetMode::stop_grad;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.1;
  int epochs = 40;
  int batch = 64;
  LrMode lr_mode = LrMode::cosine;
  double warmup_epochs = 5;
  double ema_beta = 0.99;
  bool ema_schedule = true;
  double forward_dropout = 0.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 = only at the end

  // Wiring, normally set through apply_variant.
  bool detach_targets = true;
  bool predict_next = true;
  bool inverse_head = true;
  bool forward_head = true;
  ForwardInput forward_input = ForwardInput::state_and_latent;
  bool no_bottleneck = false;

  // Network size.
  int image_size = kDefaultImageSize;
  int views = 2;
  int width = 64;
  int layers = 2;
  int heads = 4;
  int context_max = 8;

  void validate() const;
  ModelConfig model_config() const;
  ObjectiveConfig objective_config() const;

  /// Every field as key=value strings; `set` accepts the same keys and
  /// rejects unknown ones.
  std::map<std::string, std::string> to_map() const;
  void set(const std::string& key, const std::string& value);
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
  /// Applies every key=value line of a config file in order.
  void apply_file(const std::filesystem::path& path);

  /// EMA targets, beta 0.99, forward dropout 0.3, m = 16.
  static TrainConfig block_pushing();
  /// Stop-gradient targets without EMA, h = 5.
  static TrainConfig stop_grad_profile();

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// key=value lines; '#' starts a comment, blank lines are skipped.
std::vector<std::pair<std::string, std::string>> read_key_values(const std::filesystem::path& path);

/// beta(t) = 1 - (1 - base) * (cos(pi t / total) + 1) / 2
double beta_schedule(long step, long total_steps, double beta_base);
/// Linear warmup over `warmup_steps`, then cosine decay to 0 at `total_steps`
/// (warmup counts toward the horizon), or constant after warmup.
double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr, LrMode mode);

/// Decoupled weight decay Adam with explicit, checkpointable state.
class AdamW {
 public:
  AdamW(std::vector<torch::Tensor> params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  long steps_taken() const { return t_; }
  std::vector<std::pair<std::string, torch::Tensor>> state() const;
  void load_state(const TensorArchive& archive);

 private:
  std::vector<torch::Tensor> params_, m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
};

/// Scales gradients in place so their global L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm);
double global_grad_norm(const std::vector<torch::Tensor>& params);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double l_dyn = 0, l_cov = 0, total = 0;
  double aux = 0;
  double grad_norm = 0;
  double clipped_norm = 0;
  double lr = 0;
  double beta = 0;
  double embed_std_min = 0;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  double wall_seconds = 0;
};

std::string to_json_line(const StepRecord& r);

/// Loss for one step. Gets the bundle, frames as a uint8 tensor and the raw
/// batch (with labels when the run is labeled).
using StepLoss = std::function<LossBreakdown(ModelBundle&, const torch::Tensor& frames, const SequenceBatch&)>;

struct TrainTask {
  StepLoss loss;
  /// Auxiliary modules optimized jointly with the bundle; may be null.
  std::shared_ptr<torch::nn::Module> extra;
  bool labeled = false;
};

struct TrainOptions {
  /// Checkpoints and the step log go here when set.
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::filesystem::path> resume_from;
  /// Stop (and checkpoint) after this many total steps.
  std::optional<long> stop_after;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::shared_ptr<ModelBundle> bundle;
  std::shared_ptr<torch::nn::Module> extra;
  TrainHistory history;
  long steps_per_epoch = 0;
  long total_steps = 0;
};

torch::Tensor frames_tensor(const SequenceBatch& batch);

long steps_per_epoch(const TrainConfig& config, const UnlabeledView& data);

/// Self-supervised pretraining on frames only.
TrainResult pretrain(const TrainConfig& config, const UnlabeledView& data, const TrainOptions& options = {});

/// Generic loop shared by pretraining and the action-supervised variants.
TrainResult run_training(const TrainConfig& config, const LabeledView& data, const TrainTask& task,
                         const TrainOptions& options);
TrainResult run_training(const TrainConfig& config, const UnlabeledView& data, const TrainTask& task,
                         const TrainOptions& options);

/// Trainer checkpoint: bundle, auxiliary module, optimizer moments and the
/// step history (wall time excluded so equal runs give equal bytes).
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, ModelBundle& bundle,
                     torch::nn::Module* extra, const AdamW& optim, const TrainHistory& history);

struct LoadedCheckpoint {
  TrainConfig config;
  std::shared_ptr<ModelBundle> bundle;
  TensorArchive archive;
  TrainHistory history;
  long step = 0;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dynamo

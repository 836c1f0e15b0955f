#pragma once

// Encoder, latent inverse dynamics, latent forward dynamics and the EMA
// shadow encoder, bundled with their configuration.
//
// Tensor conventions: frames enter as uint8 [B, h, V, H, W, 3]; embeddings
// are float [B, h, V, d]; dynamics heads work on one view at a time,
// [B, h, d] in and [B, h - 1, m] / [B, h - 1, d] out.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynamo {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// What the forward dynamics head sees at each step.
enum class ForwardInput : std::uint8_t { state_and_latent, latent_only, state_only };

struct ModelConfig {
  int image_size = 64;
  int views = 2;
  int embed_dim = 64;        // d
  int latent_dim = 8;        // m
  int context_max = 8;       // h_max
  int width = 64;
  int layers = 2;
  int heads = 4;
  double forward_dropout = 0.0;
  bool ema = false;
  bool shared_encoder = true;
  bool inverse_head = true;
  bool forward_head = true;
  ForwardInput forward_input = ForwardInput::state_and_latent;
  /// Permits latent_dim >= embed_dim (the no-bottleneck ablation).
  bool allow_no_bottleneck = false;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Four stride-2 conv blocks (conv, GroupNorm, ReLU; 64 -> 4 pixels) and a
/// linear map to d.
class ConvEncoderImpl : public torch::nn::Module {
 public:
  ConvEncoderImpl(int image_size, int embed_dim);
  /// [N, 3, H, W] float in [0, 1] -> [N, d]
  torch::Tensor forward(const torch::Tensor& images);

 private:
  torch::nn::Sequential convs_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ConvEncoder);

/// Pre-norm transformer encoder with a causal attention mask and learned
/// positional embeddings. Position t only attends to positions <= t.
class CausalTransformerImpl : public torch::nn::Module {
 public:
  CausalTransformerImpl(int input_dim, int output_dim, int width, int layers, int heads, int context_max,
                        double dropout);
  /// [B, T, input_dim] -> [B, T, output_dim]
  torch::Tensor forward(const torch::Tensor& x);
  int context_max() const { return context_max_; }

 private:
  struct Block {
    torch::nn::LayerNorm ln_attn{nullptr};
    torch::nn::Linear qkv{nullptr};
    torch::nn::Linear proj{nullptr};
    torch::nn::LayerNorm ln_mlp{nullptr};
    torch::nn::Linear fc1{nullptr};
    torch::nn::Linear fc2{nullptr};
  };
  torch::Tensor attend(Block& b, const torch::Tensor& x);

  int width_;
  int heads_;
  int context_max_;
  double dropout_;
  torch::nn::Linear input_{nullptr};
  torch::Tensor positions_;
  std::vector<Block> blocks_;
  torch::nn::LayerNorm ln_out_{nullptr};
  torch::nn::Linear output_{nullptr};
};
TORCH_MODULE(CausalTransformer);

/// Converts uint8 [..., H, W, 3] frames to float [N, 3, H, W] in [0, 1].
torch::Tensor frames_to_images(const torch::Tensor& frames);

class ModelBundle : public torch::nn::Module {
 public:
  explicit ModelBundle(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// uint8 frames [B, h, V, H, W, 3] -> embeddings [B, h, V, d].
  torch::Tensor encode(const torch::Tensor& frames, bool use_ema = false);
  /// s [B, h, d] -> z [B, h - 1, m]; z_t is read at stream position t + 1.
  torch::Tensor inverse_dynamics(const torch::Tensor& s);
  /// Step inputs according to config().forward_input; returns predictions [B, h - 1, d].
  torch::Tensor forward_dynamics(const torch::Tensor& s, const torch::Tensor& z);

  /// theta_bar <- beta * theta_bar + (1 - beta) * theta.
  void ema_update(double beta);
  bool has_ema() const { return !ema_encoders_.empty(); }

  /// Online encoder parameters (not the EMA copy).
  std::vector<torch::Tensor> encoder_parameters() const;
  /// Everything the optimizer updates: encoder, inverse and forward heads.
  std::vector<torch::Tensor> trainable_parameters() const;
  /// All parameters and the EMA copy, keyed by stable names.
  std::vector<std::pair<std::string, torch::Tensor>> named_state() const;

  std::vector<ConvEncoder>& encoders() { return encoders_; }
  const std::vector<ConvEncoder>& encoders() const { return encoders_; }
  CausalTransformer& inverse_head() { return inverse_; }
  CausalTransformer& forward_head() { return forward_; }

 private:
  ConvEncoder& encoder_for_view(int v, bool ema);

  ModelConfig config_;
  std::vector<ConvEncoder> encoders_;
  std::vector<ConvEncoder> ema_encoders_;
  CausalTransformer inverse_{nullptr};
  CausalTransformer forward_{nullptr};
};

/// FNV-1a over the raw bytes of the given tensors, in order.
std::uint64_t tensor_checksum(const std::vector<torch::Tensor>& tensors);

// ---------------------------------------------------------------------------
// Tensor archives: the binary layout shared by model, trainer and policy
// checkpoints.
//
//   magic  "DYNARCH\0"            8 bytes
//   u32    format version (1)
//   u32    kind length, kind bytes (e.g. "model", "trainer", "mlp_policy")
//   u32    metadata entry count, then per entry: u32 key len, key,
//          u32 value len, value (UTF-8 key=value echo of the config)
//   u32    tensor count, then per tensor: u32 name len, name, u8 dtype
//          (0 = f32, 1 = f64, 2 = i64, 3 = u8), u32 ndim, i64 dims[ndim],
//          raw little-endian data
//   u64    FNV-1a checksum of every preceding byte
// ---------------------------------------------------------------------------
struct TensorArchive {
  std::string kind;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  const torch::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

void write_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive read_archive(const std::filesystem::path& path);

void save_model(ModelBundle& bundle, const std::filesystem::path& path);
std::shared_ptr<ModelBundle> load_model(const std::filesystem::path& path);
/// Copies named tensors into an existing bundle; shapes must match exactly.
void load_state_into(ModelBundle& bundle, const TensorArchive& archive);

}  // namespace dynamo

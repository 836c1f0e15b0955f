#include "dynamo/models.hpp"

#include "dynamo/demodata.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dynamo {

namespace {

constexpr std::array<int, 4> kEncoderChannels = {16, 32, 32, 64};

std::string forward_input_name(ForwardInput f) {
  switch (f) {
    case ForwardInput::state_and_latent: return "state_and_latent";
    case ForwardInput::latent_only: return "latent_only";
    case ForwardInput::state_only: return "state_only";
  }
  return "?";
}

ForwardInput parse_forward_input(const std::string& s) {
  if (s == "state_and_latent") return ForwardInput::state_and_latent;
  if (s == "latent_only") return ForwardInput::latent_only;
  if (s == "state_only") return ForwardInput::state_only;
  throw ModelError("unknown forward_input: " + s);
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ModelError("not a boolean: " + s);
}

std::string double_str(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto d = dst.parameters();
  auto s = src.parameters();
  for (std::size_t i = 0; i < d.size(); ++i) d[i].copy_(s[i]);
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (image_size < 16 || image_size % 16 != 0) throw ModelError("image_size must be a positive multiple of 16");
  if (views < 1) throw ModelError("views must be >= 1");
  if (embed_dim < 1 || latent_dim < 1) throw ModelError("embedding and latent dims must be positive");
  if (latent_dim >= embed_dim && !allow_no_bottleneck)
    throw ModelError("latent_dim must be smaller than embed_dim (m < d) unless the no_bottleneck ablation is set");
  if (context_max < 2) throw ModelError("context_max must be >= 2");
  if (width < 1 || heads < 1 || width % heads != 0) throw ModelError("width must be a positive multiple of heads");
  if (layers < 1) throw ModelError("layers must be >= 1");
  if (!(forward_dropout >= 0.0 && forward_dropout < 1.0)) throw ModelError("forward_dropout must lie in [0, 1)");
  if (!inverse_head && forward_input != ForwardInput::state_only)
    throw ModelError("forward head needs latents but the inverse head is disabled");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"image_size", std::to_string(image_size)},
      {"views", std::to_string(views)},
      {"embed_dim", std::to_string(embed_dim)},
      {"latent_dim", std::to_string(latent_dim)},
      {"context_max", std::to_string(context_max)},
      {"width", std::to_string(width)},
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"forward_dropout", double_str(forward_dropout)},
      {"ema", bool_str(ema)},
      {"shared_encoder", bool_str(shared_encoder)},
      {"inverse_head", bool_str(inverse_head)},
      {"forward_head", bool_str(forward_head)},
      {"forward_input", forward_input_name(forward_input)},
      {"allow_no_bottleneck", bool_str(allow_no_bottleneck)},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ModelError(std::string("model config missing key: ") + key);
    return it->second;
  };
  c.image_size = std::stoi(get("image_size"));
  c.views = std::stoi(get("views"));
  c.embed_dim = std::stoi(get("embed_dim"));
  c.latent_dim = std::stoi(get("latent_dim"));
  c.context_max = std::stoi(get("context_max"));
  c.width = std::stoi(get("width"));
  c.layers = std::stoi(get("layers"));
  c.heads = std::stoi(get("heads"));
  c.forward_dropout = std::stod(get("forward_dropout"));
  c.ema = parse_bool(get("ema"));
  c.shared_encoder = parse_bool(get("shared_encoder"));
  c.inverse_head = parse_bool(get("inverse_head"));
  c.forward_head = parse_bool(get("forward_head"));
  c.forward_input = parse_forward_input(get("forward_input"));
  c.allow_no_bottleneck = parse_bool(get("allow_no_bottleneck"));
  return c;
}

// ---------------------------------------------------------------------------
// Networks

ConvEncoderImpl::ConvEncoderImpl(int image_size, int embed_dim) {
  convs_ = torch::nn::Sequential();
  int in = 3;
  for (int out : kEncoderChannels) {
    convs_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1)));
    convs_->push_back(torch::nn::GroupNorm(torch::nn::GroupNormOptions(std::min(8, out), out)));
    convs_->push_back(torch::nn::ReLU());
    in = out;
  }
  const int spatial = image_size / 16;
  head_ = torch::nn::Linear(in * spatial * spatial, embed_dim);
  register_module("convs", convs_);
  register_module("head", head_);
}

torch::Tensor ConvEncoderImpl::forward(const torch::Tensor& images) {
  return head_->forward(convs_->forward(images).flatten(1));
}

CausalTransformerImpl::CausalTransformerImpl(int input_dim, int output_dim, int width, int layers, int heads,
                                             int context_max, double dropout)
    : width_(width), heads_(heads), context_max_(context_max), dropout_(dropout) {
  input_ = register_module("input", torch::nn::Linear(input_dim, width));
  positions_ = register_parameter("positions", torch::randn({context_max, width}) * 0.02);
  for (int l = 0; l < layers; ++l) {
    Block b;
    const std::string p = "block" + std::to_string(l) + "_";
    b.ln_attn = register_module(p + "ln_attn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
    b.qkv = register_module(p + "qkv", torch::nn::Linear(width, 3 * width));
    b.proj = register_module(p + "proj", torch::nn::Linear(width, width));
    b.ln_mlp = register_module(p + "ln_mlp", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
    b.fc1 = register_module(p + "fc1", torch::nn::Linear(width, 4 * width));
    b.fc2 = register_module(p + "fc2", torch::nn::Linear(4 * width, width));
    blocks_.push_back(b);
  }
  ln_out_ = register_module("ln_out", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  output_ = register_module("output", torch::nn::Linear(width, output_dim));
}

torch::Tensor CausalTransformerImpl::attend(Block& b, const torch::Tensor& x) {
  const auto B = x.size(0), T = x.size(1);
  const auto head_dim = width_ / heads_;
  auto qkv = b.qkv->forward(x).view({B, T, 3, heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv[0], k = qkv[1], v = qkv[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  auto future = torch::ones({T, T}, torch::TensorOptions().dtype(torch::kBool)).triu(1);
  scores = scores.masked_fill(future, -std::numeric_limits<float>::infinity());
  auto weights = torch::softmax(scores, -1);
  weights = torch::dropout(weights, dropout_, is_training());
  auto out = torch::matmul(weights, v).transpose(1, 2).reshape({B, T, width_});
  return b.proj->forward(out);
}

torch::Tensor CausalTransformerImpl::forward(const torch::Tensor& x) {
  const auto T = x.size(1);
  if (T > context_max_) throw ModelError("sequence longer than context_max");
  auto h = input_->forward(x) + positions_.slice(0, 0, T);
  for (Block& b : blocks_) {
    h = h + torch::dropout(attend(b, b.ln_attn->forward(h)), dropout_, is_training());
    auto m = b.fc2->forward(torch::gelu(b.fc1->forward(b.ln_mlp->forward(h))));
    h = h + torch::dropout(m, dropout_, is_training());
  }
  return output_->forward(ln_out_->forward(h));
}

torch::Tensor frames_to_images(const torch::Tensor& frames) {
  const auto H = frames.size(-3), W = frames.size(-2);
  return frames.reshape({-1, H, W, 3}).permute({0, 3, 1, 2}).to(torch::kFloat32).div(255.0).contiguous();
}

// ---------------------------------------------------------------------------
// ModelBundle

ModelBundle::ModelBundle(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int n_encoders = config_.shared_encoder ? 1 : config_.views;
  for (int i = 0; i < n_encoders; ++i) {
    const std::string name = config_.shared_encoder ? "encoder" : "encoder" + std::to_string(i);
    encoders_.push_back(register_module(name, ConvEncoder(config_.image_size, config_.embed_dim)));
  }
  if (config_.inverse_head) {
    inverse_ = register_module("inverse", CausalTransformer(config_.embed_dim, config_.latent_dim, config_.width,
                                                            config_.layers, config_.heads, config_.context_max,
                                                            0.0));
  }
  if (config_.forward_head) {
    int in = 0;
    switch (config_.forward_input) {
      case ForwardInput::state_and_latent: in = config_.embed_dim + config_.latent_dim; break;
      case ForwardInput::latent_only: in = config_.latent_dim; break;
      case ForwardInput::state_only: in = config_.embed_dim; break;
    }
    forward_ = register_module("forward", CausalTransformer(in, config_.embed_dim, config_.width, config_.layers,
                                                            config_.heads, config_.context_max,
                                                            config_.forward_dropout));
  }
  if (config_.ema) {
    for (int i = 0; i < n_encoders; ++i) {
      const std::string name = config_.shared_encoder ? "ema_encoder" : "ema_encoder" + std::to_string(i);
      auto e = register_module(name, ConvEncoder(config_.image_size, config_.embed_dim));
      copy_parameters(*e, *encoders_[i]);
      for (auto& p : e->parameters()) p.set_requires_grad(false);
      ema_encoders_.push_back(e);
    }
  }
}

ConvEncoder& ModelBundle::encoder_for_view(int v, bool ema) {
  auto& pool = ema ? ema_encoders_ : encoders_;
  return config_.shared_encoder ? pool[0] : pool[v];
}

torch::Tensor ModelBundle::encode(const torch::Tensor& frames, bool use_ema) {
  if (use_ema && !has_ema()) throw ModelError("EMA encoder requested but absent");
  if (frames.dim() != 6 || frames.size(3) != config_.image_size || frames.size(4) != config_.image_size ||
      frames.size(5) != 3)
    throw ModelError("frames must be uint8 [B, h, V, H, W, 3] at the configured image size");
  if (frames.size(2) != config_.views) throw ModelError("frame view count disagrees with the model");
  std::optional<torch::NoGradGuard> guard;
  if (use_ema) guard.emplace();

  const auto B = frames.size(0), h = frames.size(1), V = frames.size(2);
  if (config_.shared_encoder) {
    auto s = encoder_for_view(0, use_ema)->forward(frames_to_images(frames));
    return s.view({B, h, V, config_.embed_dim});
  }
  std::vector<torch::Tensor> per_view;
  for (int v = 0; v < V; ++v) {
    auto s = encoder_for_view(v, use_ema)->forward(frames_to_images(frames.select(2, v)));
    per_view.push_back(s.view({B, h, config_.embed_dim}));
  }
  return torch::stack(per_view, 2);
}

torch::Tensor ModelBundle::inverse_dynamics(const torch::Tensor& s) {
  if (!inverse_) throw ModelError("inverse head disabled in this bundle");
  if (s.dim() != 3 || s.size(2) != config_.embed_dim) throw ModelError("inverse dynamics expects [B, h, d]");
  if (s.size(1) < 2) throw ModelError("need >= 2 frames");
  const auto h = s.size(1);
  return inverse_->forward(s).slice(1, 1, h);
}

torch::Tensor ModelBundle::forward_dynamics(const torch::Tensor& s, const torch::Tensor& z) {
  if (!forward_) throw ModelError("forward head disabled in this bundle");
  const bool needs_s = config_.forward_input != ForwardInput::latent_only;
  const bool needs_z = config_.forward_input != ForwardInput::state_only;
  if (needs_s && (!s.defined() || s.dim() != 3 || s.size(2) != config_.embed_dim))
    throw ModelError("forward dynamics expects s of shape [B, h - 1, d]");
  if (needs_z && (!z.defined() || z.dim() != 3 || z.size(2) != config_.latent_dim))
    throw ModelError("forward dynamics expects z of shape [B, h - 1, m]");
  if (needs_s && needs_z && (s.size(0) != z.size(0) || s.size(1) != z.size(1)))
    throw ModelError("s and z are not time-aligned");
  switch (config_.forward_input) {
    case ForwardInput::state_and_latent: return forward_->forward(torch::cat({s, z}, -1));
    case ForwardInput::latent_only: return forward_->forward(z);
    case ForwardInput::state_only: return forward_->forward(s);
  }
  return {};
}

void ModelBundle::ema_update(double beta) {
  if (!has_ema()) throw ModelError("EMA update requested but the bundle has no EMA encoder");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ModelError("EMA beta must lie in [0, 1]");
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < encoders_.size(); ++i) {
    auto shadow = ema_encoders_[i]->parameters();
    auto online = encoders_[i]->parameters();
    for (std::size_t k = 0; k < shadow.size(); ++k) shadow[k].mul_(beta).add_(online[k], 1.0 - beta);
  }
}

std::vector<torch::Tensor> ModelBundle::encoder_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& e : encoders_)
    for (auto& p : e->parameters()) out.push_back(p);
  return out;
}

std::vector<torch::Tensor> ModelBundle::trainable_parameters() const {
  auto out = encoder_parameters();
  if (inverse_)
    for (auto& p : inverse_->parameters()) out.push_back(p);
  if (forward_)
    for (auto& p : forward_->parameters()) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, torch::Tensor>> ModelBundle::named_state() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : named_parameters(true)) out.emplace_back(item.key(), item.value());
  return out;
}

std::uint64_t tensor_checksum(const std::vector<torch::Tensor>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    auto c = t.detach().contiguous().cpu();
    const auto* p = static_cast<const std::uint8_t*>(c.data_ptr());
    const std::size_t n = c.numel() * c.element_size();
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Archives

namespace {

constexpr std::array<char, 8> kArchiveMagic = {'D', 'Y', 'N', 'A', 'R', 'C', 'H', '\0'};

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    case torch::kUInt8: return 3;
    default: throw ModelError("archive: unsupported tensor dtype");
  }
}

torch::ScalarType dtype_from_code(std::uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    case 3: return torch::kUInt8;
    default: throw ModelError("archive: unknown dtype code");
  }
}

struct Writer {
  std::vector<std::uint8_t> buf;
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw ModelError("archive truncated");
  }
  std::uint8_t u8() {
    need(1);
    return buf[pos++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

static_assert(std::endian::native == std::endian::little, "archive tensor payloads assume a little-endian host");

}  // namespace

const torch::Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ModelError("archive has no tensor named " + name);
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

void write_archive(const TensorArchive& archive, const std::filesystem::path& path) {
  Writer w;
  w.raw(kArchiveMagic.data(), kArchiveMagic.size());
  w.u32(kArchiveVersion);
  w.str(archive.kind);
  w.u32(static_cast<std::uint32_t>(archive.metadata.size()));
  for (const auto& [k, v] : archive.metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, tensor] : archive.tensors) {
    auto t = tensor.detach().contiguous().cpu();
    w.str(name);
    w.u8(dtype_code(t.scalar_type()));
    w.u32(static_cast<std::uint32_t>(t.dim()));
    for (auto s : t.sizes()) w.u64(static_cast<std::uint64_t>(s));
    w.raw(t.data_ptr(), t.numel() * t.element_size());
  }
  w.u64(fnv1a64(w.buf));

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw ModelError("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("cannot open " + path.string());
  const std::vector<std::uint8_t> buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (buf.size() < kArchiveMagic.size() + 4 + 8) throw ModelError("archive truncated: " + path.string());
  if (!std::equal(kArchiveMagic.begin(), kArchiveMagic.end(), reinterpret_cast<const char*>(buf.data())))
    throw ModelError("not a tensor archive: " + path.string());

  Reader r{buf, kArchiveMagic.size()};
  const auto version = r.u32();
  if (version != kArchiveVersion) throw ModelError("unsupported archive version " + std::to_string(version));
  TensorArchive a;
  a.kind = r.str();
  const auto n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.str();
    a.metadata[k] = r.str();
  }
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.str();
    const auto dtype = dtype_from_code(r.u8());
    const auto ndim = r.u32();
    std::vector<std::int64_t> sizes;
    for (std::uint32_t d = 0; d < ndim; ++d) sizes.push_back(static_cast<std::int64_t>(r.u64()));
    auto t = torch::empty(sizes, torch::TensorOptions().dtype(dtype));
    const std::size_t bytes = t.numel() * t.element_size();
    r.need(bytes);
    std::memcpy(t.data_ptr(), buf.data() + r.pos, bytes);
    r.pos += bytes;
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  const std::uint64_t expected = fnv1a64(std::span<const std::uint8_t>(buf.data(), r.pos));
  if (r.u64() != expected) throw ModelError("archive checksum mismatch: " + path.string());
  if (r.pos != buf.size()) throw ModelError("trailing bytes in archive: " + path.string());
  return a;
}

void load_state_into(ModelBundle& bundle, const TensorArchive& archive) {
  torch::NoGradGuard guard;
  for (auto& [name, param] : bundle.named_state()) {
    if (!archive.contains(name)) throw ModelError("checkpoint lacks tensor " + name);
    const auto& src = archive.at(name);
    if (src.sizes() != param.sizes() || src.scalar_type() != param.scalar_type())
      throw ModelError("shape mismatch for tensor " + name);
    param.copy_(src);
  }
}

void save_model(ModelBundle& bundle, const std::filesystem::path& path) {
  TensorArchive a;
  a.kind = "model";
  for (const auto& [k, v] : bundle.config().to_map()) a.metadata["model." + k] = v;
  a.tensors = bundle.named_state();
  write_archive(a, path);
}

std::map<std::string, std::string> strip_prefix(const std::map<std::string, std::string>& kv,
                                                const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : kv)
    if (k.starts_with(prefix)) out[k.substr(prefix.size())] = v;
  return out;
}

std::shared_ptr<ModelBundle> load_model(const std::filesystem::path& path) {
  const auto a = read_archive(path);
  auto bundle = std::make_shared<ModelBundle>(ModelConfig::from_map(strip_prefix(a.metadata, "model.")));
  load_state_into(*bundle, a);
  return bundle;
}

}  // namespace dynamo

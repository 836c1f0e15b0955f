#include "dynamo/trainer.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace dynamo {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t step_seed(std::uint64_t seed, long step, std::uint64_t stream) {
  return splitmix(splitmix(seed ^ (stream << 56)) + static_cast<std::uint64_t>(step));
}

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("bad value for " + key + ": " + s);
  return v;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& s) {
  Int v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("bad value for " + key + ": " + s);
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("bad value for " + key + ": " + s);
}

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <class T>
Field int_field(const char* key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.*member); },
          [key, member](TrainConfig& c, const std::string& s) { c.*member = parse_int<T>(key, s); }};
}

Field double_field(const char* key, double TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return fmt_double(c.*member); },
          [key, member](TrainConfig& c, const std::string& s) { c.*member = parse_double(key, s); }};
}

Field bool_field(const char* key, bool TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [key, member](TrainConfig& c, const std::string& s) { c.*member = parse_bool(key, s); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"variant", [](const TrainConfig& c) { return c.variant; },
       [](TrainConfig& c, const std::string& s) { c.variant = s; }},
      int_field("h", &TrainConfig::h),
      int_field("d", &TrainConfig::d),
      int_field("m", &TrainConfig::m),
      double_field("lambda", &TrainConfig::lambda),
      {"target_mode", [](const TrainConfig& c) { return std::string(c.target_mode == TargetMode::ema ? "ema" : "stop_grad"); },
       [](TrainConfig& c, const std::string& s) {
         if (s == "ema") c.target_mode = TargetMode::ema;
         else if (s == "stop_grad") c.target_mode = TargetMode::stop_grad;
         else throw ConfigError("bad value for target_mode: " + s);
       }},
      double_field("lr", &TrainConfig::lr),
      double_field("beta1", &TrainConfig::beta1),
      double_field("beta2", &TrainConfig::beta2),
      double_field("adam_eps", &TrainConfig::adam_eps),
      double_field("weight_decay", &TrainConfig::weight_decay),
      double_field("grad_clip", &TrainConfig::grad_clip),
      int_field("epochs", &TrainConfig::epochs),
      int_field("batch", &TrainConfig::batch),
      {"lr_mode", [](const TrainConfig& c) { return std::string(c.lr_mode == LrMode::cosine ? "cosine" : "constant"); },
       [](TrainConfig& c, const std::string& s) {
         if (s == "cosine") c.lr_mode = LrMode::cosine;
         else if (s == "constant") c.lr_mode = LrMode::constant;
         else throw ConfigError("bad value for lr_mode: " + s);
       }},
      double_field("warmup_epochs", &TrainConfig::warmup_epochs),
      double_field("ema_beta", &TrainConfig::ema_beta),
      bool_field("ema_schedule", &TrainConfig::ema_schedule),
      double_field("forward_dropout", &TrainConfig::forward_dropout),
      int_field("seed", &TrainConfig::seed),
      int_field("checkpoint_every", &TrainConfig::checkpoint_every),
      bool_field("detach_targets", &TrainConfig::detach_targets),
      bool_field("predict_next", &TrainConfig::predict_next),
      bool_field("inverse_head", &TrainConfig::inverse_head),
      bool_field("forward_head", &TrainConfig::forward_head),
      {"forward_input",
       [](const TrainConfig& c) {
         switch (c.forward_input) {
           case ForwardInput::latent_only: return std::string("latent_only");
           case ForwardInput::state_only: return std::string("state_only");
           default: return std::string("state_and_latent");
         }
       },
       [](TrainConfig& c, const std::string& s) {
         if (s == "state_and_latent") c.forward_input = ForwardInput::state_and_latent;
         else if (s == "latent_only") c.forward_input = ForwardInput::latent_only;
         else if (s == "state_only") c.forward_input = ForwardInput::state_only;
         else throw ConfigError("bad value for forward_input: " + s);
       }},
      bool_field("no_bottleneck", &TrainConfig::no_bottleneck),
      int_field("image_size", &TrainConfig::image_size),
      int_field("views", &TrainConfig::views),
      int_field("width", &TrainConfig::width),
      int_field("layers", &TrainConfig::layers),
      int_field("heads", &TrainConfig::heads),
      int_field("context_max", &TrainConfig::context_max),
  };
  return table;
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  if (h < 2) throw ConfigError("h must be >= 2");
  if (h > context_max) throw ConfigError("h exceeds context_max");
  if (m >= d && !no_bottleneck) throw ConfigError("m must be smaller than d unless no_bottleneck is set");
  if (!(lr >= 0)) throw ConfigError("lr must be non-negative");
  if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
  if (epochs < 1 || batch < 1) throw ConfigError("epochs and batch must be positive");
  if (!(warmup_epochs >= 0)) throw ConfigError("warmup_epochs must be non-negative");
  if (!(ema_beta >= 0 && ema_beta <= 1)) throw ConfigError("ema_beta must lie in [0, 1]");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  model_config().validate();
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig mc;
  mc.image_size = image_size;
  mc.views = views;
  mc.embed_dim = d;
  mc.latent_dim = m;
  mc.context_max = context_max;
  mc.width = width;
  mc.layers = layers;
  mc.heads = heads;
  mc.forward_dropout = forward_dropout;
  mc.ema = target_mode == TargetMode::ema && detach_targets && forward_head;
  mc.inverse_head = inverse_head;
  mc.forward_head = forward_head;
  mc.forward_input = forward_input;
  mc.allow_no_bottleneck = no_bottleneck;
  return mc;
}

ObjectiveConfig TrainConfig::objective_config() const {
  ObjectiveConfig oc;
  oc.lambda = lambda;
  oc.target_mode = target_mode;
  oc.detach_targets = detach_targets;
  oc.predict_next = predict_next;
  return oc;
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& f : fields()) out[f.key] = f.get(*this);
  return out;
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) return f.set(*this, value);
  throw ConfigError("unknown config key: " + key);
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [k, v] : kv) c.set(k, v);
  return c;
}

void TrainConfig::apply_file(const std::filesystem::path& path) {
  for (const auto& [k, v] : read_key_values(path)) set(k, v);
}

std::vector<std::pair<std::string, std::string>> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  const auto trim = [](const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path.string() + ":" + std::to_string(no) + ": expected key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

TrainConfig TrainConfig::block_pushing() {
  TrainConfig c;
  c.target_mode = TargetMode::ema;
  c.ema_beta = 0.99;
  c.forward_dropout = 0.3;
  c.m = 16;
  return c;
}

TrainConfig TrainConfig::stop_grad_profile() {
  TrainConfig c;
  c.target_mode = TargetMode::stop_grad;
  return c;
}

// ---------------------------------------------------------------------------
// Schedules, optimizer, clipping

double beta_schedule(long step, long total_steps, double beta_base) {
  const double t = static_cast<double>(step) / static_cast<double>(std::max(1L, total_steps));
  return 1.0 - (1.0 - beta_base) * (std::cos(M_PI * t) + 1.0) / 2.0;
}

double lr_schedule(long step, long total_steps, long warmup_steps, double base_lr, LrMode mode) {
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (mode == LrMode::constant) return base_lr;
  const long span = std::max(1L, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

AdamW::AdamW(std::vector<torch::Tensor> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.push_back(torch::zeros_like(p));
    v_.push_back(torch::zeros_like(p));
  }
}

void AdamW::step(double lr) {
  torch::NoGradGuard guard;
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.grad().defined()) continue;
    const auto& g = p.grad();
    if (weight_decay_ != 0.0) p.mul_(1.0 - lr * weight_decay_);
    m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (v_[i] / bc2).sqrt_().add_(eps_);
    p.addcdiv_(m_[i], denom, -lr / bc1);
  }
}

std::vector<std::pair<std::string, torch::Tensor>> AdamW::state() const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("optim.m." + std::to_string(i), m_[i]);
    out.emplace_back("optim.v." + std::to_string(i), v_[i]);
  }
  out.emplace_back("optim.t", torch::tensor({static_cast<std::int64_t>(t_)}, torch::kInt64));
  return out;
}

void AdamW::load_state(const TensorArchive& archive) {
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& m = archive.at("optim.m." + std::to_string(i));
    const auto& v = archive.at("optim.v." + std::to_string(i));
    if (m.sizes() != m_[i].sizes() || v.sizes() != v_[i].sizes()) throw ModelError("optimizer state shape mismatch");
    m_[i].copy_(m);
    v_[i].copy_(v);
  }
  t_ = archive.at("optim.t").item<std::int64_t>();
}

double global_grad_norm(const std::vector<torch::Tensor>& params) {
  double sq = 0;
  for (const auto& p : params)
    if (p.grad().defined()) sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    torch::NoGradGuard guard;
    for (const auto& p : params)
      if (p.grad().defined()) p.grad().mul_(scale);
  }
  return norm;
}

std::string to_json_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["l_dyn"] = r.l_dyn;
  j["l_cov"] = r.l_cov;
  j["total"] = r.total;
  if (r.aux != 0) j["aux"] = r.aux;
  j["grad_norm"] = r.grad_norm;
  j["lr"] = r.lr;
  j["beta"] = r.beta;
  j["embed_std_min"] = r.embed_std_min;
  return j.dump();
}

torch::Tensor frames_tensor(const SequenceBatch& b) {
  return torch::from_blob(const_cast<std::uint8_t*>(b.frames.data()),
                          {b.batch, b.context, b.views, b.image_size, b.image_size, 3}, torch::kUInt8)
      .clone();
}

long steps_per_epoch(const TrainConfig& config, const UnlabeledView& data) {
  const WindowIndex index(data, config.h);
  return static_cast<long>((index.size() + config.batch - 1) / config.batch);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr int kHistoryFields = 11;

torch::Tensor history_tensor(const TrainHistory& h) {
  auto t = torch::zeros({static_cast<long>(h.steps.size()), kHistoryFields}, torch::kFloat64);
  auto a = t.accessor<double, 2>();
  for (std::size_t i = 0; i < h.steps.size(); ++i) {
    const auto& r = h.steps[i];
    const double row[kHistoryFields] = {static_cast<double>(r.step), static_cast<double>(r.epoch), r.l_dyn, r.l_cov,
                                        r.total, r.aux, r.grad_norm, r.clipped_norm, r.lr, r.beta, r.embed_std_min};
    for (int k = 0; k < kHistoryFields; ++k) a[i][k] = row[k];
  }
  return t;
}

TrainHistory history_from(const torch::Tensor& t) {
  TrainHistory h;
  auto a = t.accessor<double, 2>();
  for (long i = 0; i < t.size(0); ++i) {
    StepRecord r;
    r.step = static_cast<long>(a[i][0]);
    r.epoch = static_cast<int>(a[i][1]);
    r.l_dyn = a[i][2];
    r.l_cov = a[i][3];
    r.total = a[i][4];
    r.aux = a[i][5];
    r.grad_norm = a[i][6];
    r.clipped_norm = a[i][7];
    r.lr = a[i][8];
    r.beta = a[i][9];
    r.embed_std_min = a[i][10];
    h.steps.push_back(r);
  }
  return h;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& config, ModelBundle& bundle,
                     torch::nn::Module* extra, const AdamW& optim, const TrainHistory& history) {
  TensorArchive a;
  a.kind = "trainer";
  for (const auto& [k, v] : bundle.config().to_map()) a.metadata["model." + k] = v;
  for (const auto& [k, v] : config.to_map()) a.metadata["train." + k] = v;
  a.tensors = bundle.named_state();
  if (extra)
    for (const auto& item : extra->named_parameters()) a.tensors.emplace_back("extra." + item.key(), item.value());
  for (auto& kv : optim.state()) a.tensors.push_back(std::move(kv));
  a.tensors.emplace_back("history", history_tensor(history));
  write_archive(a, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  LoadedCheckpoint c;
  c.archive = read_archive(path);
  if (c.archive.kind != "trainer") throw ModelError("not a trainer checkpoint: " + path.string());
  std::map<std::string, std::string> train;
  for (const auto& [k, v] : c.archive.metadata)
    if (k.starts_with("train.")) train[k.substr(6)] = v;
  c.config = TrainConfig::from_map(train);
  c.bundle = std::make_shared<ModelBundle>(c.config.model_config());
  load_state_into(*c.bundle, c.archive);
  c.history = history_from(c.archive.at("history"));
  c.step = static_cast<long>(c.history.steps.size());
  return c;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string dump_diagnostics(long step, const SequenceBatch& batch, double grad_norm, const LossBreakdown& lb) {
  std::ostringstream os;
  os << "step " << step << ": l_dyn=" << lb.l_dyn << " l_cov=" << lb.l_cov << " total=" << lb.total
     << " grad_norm=" << grad_norm << "; batch windows (trajectory:offset):";
  for (const auto& w : batch.sources) os << ' ' << w.trajectory << ':' << w.offset;
  return os.str();
}

template <class View>
TrainResult train_impl(const TrainConfig& cfg, const View& data, const UnlabeledView& frames_only,
                       const TrainTask& task, const TrainOptions& opt) {
  cfg.validate();
  if (frames_only.size() == 0) throw ConfigError("dataset is empty");
  if (frames_only.views() != cfg.views || frames_only.image_size() != cfg.image_size)
    throw ConfigError("dataset views or image size disagree with the config");
  if ((opt.stop_after || cfg.checkpoint_every > 0) && !opt.out_dir)
    throw ConfigError("checkpointing requested without an output directory");

  const WindowIndex index(frames_only, cfg.h);
  TrainResult result;
  result.steps_per_epoch = static_cast<long>((index.size() + cfg.batch - 1) / cfg.batch);
  result.total_steps = result.steps_per_epoch * cfg.epochs;
  const long warmup = std::lround(cfg.warmup_epochs * static_cast<double>(result.steps_per_epoch));

  torch::manual_seed(cfg.seed);
  result.bundle = std::make_shared<ModelBundle>(cfg.model_config());
  result.extra = task.extra;
  ModelBundle& bundle = *result.bundle;

  auto params = bundle.trainable_parameters();
  if (task.extra)
    for (auto& p : task.extra->parameters()) params.push_back(p);
  AdamW optim(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

  long start = 0;
  if (opt.resume_from) {
    auto ck = load_checkpoint(*opt.resume_from);
    if (!(ck.config == cfg)) throw ConfigError("checkpoint config differs from the requested config");
    load_state_into(bundle, ck.archive);
    if (task.extra) {
      torch::NoGradGuard guard;
      for (auto& item : task.extra->named_parameters()) item.value().copy_(ck.archive.at("extra." + item.key()));
    }
    optim.load_state(ck.archive);
    result.history = ck.history;
    start = ck.step;
  }

  std::ofstream steplog;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    steplog.open(*opt.out_dir / "train_log.jsonl", start > 0 ? std::ios::app : std::ios::trunc);
  }
  auto checkpoint = [&] {
    save_checkpoint(*opt.out_dir / "checkpoint.ckpt", cfg, bundle, task.extra.get(), optim, result.history);
  };

  bundle.train();
  if (task.extra) task.extra->train();
  const auto t0 = std::chrono::steady_clock::now();
  const long end = opt.stop_after ? std::min(*opt.stop_after, result.total_steps) : result.total_steps;

  for (long k = start; k < end; ++k) {
    std::mt19937_64 rng(step_seed(cfg.seed, k, 1));
    const auto windows = index.draw(static_cast<std::size_t>(cfg.batch), rng);
    const SequenceBatch batch = gather(data, cfg.h, windows);
    torch::manual_seed(step_seed(cfg.seed, k, 2));

    for (auto& p : params) p.mutable_grad() = torch::Tensor();
    LossBreakdown lb = task.loss(bundle, frames_tensor(batch), batch);
    if (!std::isfinite(lb.total) || !std::isfinite(lb.l_dyn) || !std::isfinite(lb.l_cov))
      throw NumericalError("non-finite loss at " + dump_diagnostics(k, batch, 0, lb));
    if (lb.l_dyn < -1e-6 || lb.l_dyn > 2.0 + 1e-6)
      throw NumericalError("dynamics loss outside [0, 2] at " + dump_diagnostics(k, batch, 0, lb));

    lb.loss.backward();
    StepRecord r;
    r.grad_norm = clip_grad_norm(params, cfg.grad_clip);
    if (!std::isfinite(r.grad_norm))
      throw NumericalError("non-finite gradient at " + dump_diagnostics(k, batch, r.grad_norm, lb));
    r.clipped_norm = global_grad_norm(params);
    r.lr = lr_schedule(k, result.total_steps, warmup, cfg.lr, cfg.lr_mode);
    optim.step(r.lr);
    if (bundle.has_ema()) {
      r.beta = cfg.ema_schedule ? beta_schedule(k, result.total_steps, cfg.ema_beta) : cfg.ema_beta;
      bundle.ema_update(r.beta);
    }

    r.step = k;
    r.epoch = static_cast<int>(k / result.steps_per_epoch);
    r.l_dyn = lb.l_dyn;
    r.l_cov = lb.l_cov;
    r.total = lb.total;
    r.aux = lb.total - (lb.l_dyn + cfg.lambda * lb.l_cov);
    {
      torch::NoGradGuard guard;
      double lo = std::numeric_limits<double>::infinity();
      for (const auto& e : lb.embeddings) lo = std::min(lo, e.reshape({-1, e.size(-1)}).std(0).min().item<double>());
      r.embed_std_min = lo;
    }
    result.history.steps.push_back(r);
    if (steplog) steplog << to_json_line(r) << '\n';
    if (opt.log && (k + 1) % result.steps_per_epoch == 0)
      *opt.log << "epoch " << r.epoch << " step " << k + 1 << "/" << result.total_steps << " l_dyn " << r.l_dyn
               << " l_cov " << r.l_cov << std::endl;
    if (cfg.checkpoint_every > 0 && (k + 1) % (result.steps_per_epoch * cfg.checkpoint_every) == 0) checkpoint();
  }
  result.history.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (opt.out_dir) {
    steplog.flush();
    checkpoint();
    if (end == result.total_steps) save_model(bundle, *opt.out_dir / "model.ckpt");
  }
  bundle.eval();
  if (task.extra) task.extra->eval();
  return result;
}

}  // namespace

TrainResult run_training(const TrainConfig& config, const LabeledView& data, const TrainTask& task,
                         const TrainOptions& options) {
  return train_impl(config, data, data.unlabeled(), task, options);
}

TrainResult run_training(const TrainConfig& config, const UnlabeledView& data, const TrainTask& task,
                         const TrainOptions& options) {
  if (task.labeled) throw ConfigError("this task needs labeled data");
  return train_impl(config, data, data, task, options);
}

TrainResult pretrain(const TrainConfig& config, const UnlabeledView& data, const TrainOptions& options) {
  TrainTask task;
  const ObjectiveConfig oc = config.objective_config();
  task.loss = [oc](ModelBundle& bundle, const torch::Tensor& frames, const SequenceBatch&) {
    return total_loss(bundle, frames, oc);
  };
  return run_training(config, data, task, options);
}

}  // namespace dynamo

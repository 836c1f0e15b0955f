#include "dynamo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include <json.hpp>

namespace dynamo {

namespace {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

torch::Tensor to_tensor(const Eigen::MatrixXf& m) {
  const RowMatrixF r = m;
  return torch::from_blob(const_cast<float*>(r.data()), {r.rows(), r.cols()}).clone();
}

Eigen::MatrixXf to_matrix(const torch::Tensor& t) {
  const auto c = t.to(torch::kFloat32).contiguous();
  return Eigen::Map<const RowMatrixF>(c.data_ptr<float>(), c.size(0), c.size(1));
}

Eigen::RowVectorXf embed(ModelBundle& encoder, const WorldState& state) {
  const auto& cfg = encoder.config();
  const auto S = cfg.image_size;
  auto frames = torch::empty({1, 1, cfg.views, S, S, 3}, torch::kUInt8);
  for (int v = 0; v < cfg.views; ++v) {
    const Frame f = render(state, kAllViews[static_cast<std::size_t>(v)], S);
    std::memcpy(frames[0][0][v].data_ptr<std::uint8_t>(), f.pixels.data(), f.pixels.size());
  }
  torch::NoGradGuard guard;
  auto e = encoder.encode(frames).reshape({-1}).contiguous();
  return Eigen::Map<const Eigen::RowVectorXf>(e.data_ptr<float>(), e.size(0));
}

}  // namespace

PolicyMemory build_memory(const EmbeddingBank& bank, const LabeledView& data) {
  PolicyMemory m;
  m.keys = bank.embeddings;
  m.values.resize(static_cast<Eigen::Index>(bank.size()), 2);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const auto [tr, t] = bank.sources[i];
    if (tr >= data.size() || t >= data.trajectory(tr).actions.size())
      throw PolicyError("bank row has no matching action in the dataset");
    const Action a = data.trajectory(tr).actions[t];
    m.values.row(static_cast<Eigen::Index>(i)) << a.delta.x, a.delta.y;
  }
  return m;
}

Action knn_lwr_act(const PolicyMemory& memory, const Eigen::RowVectorXf& query, int k) {
  const std::size_t N = memory.size();
  if (N == 0) throw PolicyError("empty policy memory");
  if (k < 1 || static_cast<std::size_t>(k) > N) throw PolicyError("need 1 <= k <= memory size");
  if (query.size() != memory.keys.cols()) throw PolicyError("query dimension does not match memory keys");

  const Eigen::VectorXf dist = (memory.keys.rowwise() - query).rowwise().norm();
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::size_t a, std::size_t b) {
    const auto da = dist[static_cast<Eigen::Index>(a)], db = dist[static_cast<Eigen::Index>(b)];
    return da < db || (da == db && a < b);
  });
  const double dk = dist[static_cast<Eigen::Index>(idx[static_cast<std::size_t>(k - 1)])];
  double wsum = 0, x = 0, y = 0;
  for (int i = 0; i < k; ++i) {
    const auto r = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(i)]);
    const double w = std::exp(-dist[r] / (dk + 1e-8));
    wsum += w;
    x += w * memory.values(r, 0);
    y += w * memory.values(r, 1);
  }
  return {{static_cast<float>(x / wsum), static_cast<float>(y / wsum)}};
}

KnnPolicy::KnnPolicy(PolicyMemory memory, int k) : memory_(std::move(memory)), k_(k) {
  if (memory_.size() == 0) throw PolicyError("empty policy memory");
  if (memory_.values.rows() != memory_.keys.rows()) throw PolicyError("keys and values are not aligned");
  if (k_ < 1 || static_cast<std::size_t>(k_) > memory_.size()) throw PolicyError("need 1 <= k <= memory size");
}

Action KnnPolicy::act(const WorldState&, const Eigen::RowVectorXf& embedding) {
  return knn_lwr_act(memory_, embedding, k_);
}

void ExpertPolicy::reset(std::uint64_t episode_seed) { plan_ = all_plans()[episode_seed % all_plans().size()]; }

Action ExpertPolicy::act(const WorldState& state, const Eigen::RowVectorXf&) { return expert_action(state, plan_); }

Action RandomPolicy::act(const WorldState&, const Eigen::RowVectorXf&) {
  std::uniform_real_distribution<float> u(-kMaxAction, kMaxAction);
  const float x = u(rng_);
  return {{x, u(rng_)}};
}

// ---------------------------------------------------------------------------
// Behavior cloning

BcPolicy::BcPolicy(const BcConfig& config, int dim) : config_(config), dim_(dim) {
  if (config.context < 1 || config.chunk < 1 || config.hidden < 1 || dim < 1)
    throw PolicyError("bc context, chunk, hidden and input dim must be positive");
  const auto in = static_cast<std::int64_t>(config.context) * dim;
  net_ = torch::nn::Sequential(torch::nn::Linear(in, config.hidden), torch::nn::ReLU(),
                               torch::nn::Linear(config.hidden, config.hidden), torch::nn::ReLU(),
                               torch::nn::Linear(config.hidden, 2 * config.chunk));
  mean_ = torch::zeros({in});
  std_ = torch::ones({in});
}

torch::Tensor BcPolicy::forward(const torch::Tensor& stacked) {
  return net_->forward((stacked - mean_) / std_).view({-1, config_.chunk, 2});
}

void BcPolicy::reset(std::uint64_t) {
  history_.clear();
  pending_.clear();
}

Action BcPolicy::act(const WorldState&, const Eigen::RowVectorXf& embedding) {
  if (embedding.size() != dim_) throw PolicyError("embedding dimension does not match the policy");
  if (history_.empty())
    for (int i = 0; i < config_.context; ++i) history_.push_back(embedding);
  else {
    history_.push_back(embedding);
    history_.pop_front();
  }
  if (pending_.empty()) {
    auto x = torch::empty({1, static_cast<std::int64_t>(config_.context) * dim_});
    for (int i = 0; i < config_.context; ++i)
      std::memcpy(x.data_ptr<float>() + static_cast<std::ptrdiff_t>(i) * dim_, history_[static_cast<std::size_t>(i)].data(),
                  sizeof(float) * static_cast<std::size_t>(dim_));
    torch::NoGradGuard guard;
    const auto chunk = forward(x)[0].contiguous();
    const float* p = chunk.data_ptr<float>();
    for (int j = 0; j < config_.chunk; ++j) pending_.push_back({{p[2 * j] * kMaxAction, p[2 * j + 1] * kMaxAction}});
  }
  const Action a = pending_.front();
  pending_.pop_front();
  return a;
}

std::pair<torch::Tensor, torch::Tensor> bc_examples(const EmbeddingBank& bank, const LabeledView& data, int context,
                                                    int chunk) {
  const auto N = static_cast<std::int64_t>(bank.size());
  const int D = bank.dim();
  auto x = torch::empty({N, static_cast<std::int64_t>(context) * D});
  auto y = torch::zeros({N, chunk, 2});
  float* px = x.data_ptr<float>();
  auto ay = y.accessor<float, 3>();
  for (std::int64_t i = 0; i < N; ++i) {
    const auto [tr, t] = bank.sources[static_cast<std::size_t>(i)];
    for (int c = 0; c < context; ++c) {
      const std::int64_t back = std::min<std::int64_t>(context - 1 - c, t);
      const auto src = bank.sources[static_cast<std::size_t>(i - back)];
      if (src.trajectory != tr || src.t != t - back) throw PolicyError("bank rows are not trajectory-major");
      Eigen::Map<Eigen::RowVectorXf>(px + (i * context + c) * D, D) = bank.embeddings.row(i - back);
    }
    const auto& actions = data.trajectory(tr).actions;
    for (int j = 0; j < chunk && t + j < actions.size(); ++j) {
      ay[i][j][0] = actions[t + j].delta.x / kMaxAction;
      ay[i][j][1] = actions[t + j].delta.y / kMaxAction;
    }
  }
  return {x, y};
}

std::unique_ptr<BcPolicy> bc_train(const BcConfig& config, const EmbeddingBank& bank, const LabeledView& data,
                                   BcHistory* history) {
  if (bank.size() == 0) throw PolicyError("empty bank");
  if (config.epochs < 0 || config.batch < 1 || !(config.lr >= 0)) throw PolicyError("invalid bc schedule");
  torch::manual_seed(config.seed);
  auto policy = std::make_unique<BcPolicy>(config, bank.dim());
  auto [x, y] = bc_examples(bank, data, config.context, config.chunk);
  policy->feature_mean() = x.mean(0);
  auto sd = x.std(0, false);
  policy->feature_std() = torch::where(sd < 1e-6, torch::ones_like(sd), sd);

  torch::optim::Adam opt(policy->net()->parameters(), torch::optim::AdamOptions(config.lr));
  const auto N = x.size(0);
  for (int e = 0; e < config.epochs; ++e) {
    const auto perm = torch::randperm(N, torch::kLong);
    double total = 0;
    for (std::int64_t b = 0; b < N; b += config.batch) {
      const auto idx = perm.slice(0, b, std::min<std::int64_t>(b + config.batch, N));
      opt.zero_grad();
      auto loss = torch::mse_loss(policy->forward(x.index_select(0, idx)), y.index_select(0, idx));
      loss.backward();
      opt.step();
      total += loss.item<double>() * static_cast<double>(idx.size(0));
    }
    if (history) history->epoch_mse.push_back(total / static_cast<double>(N));
  }
  policy->net()->eval();
  return policy;
}

// ---------------------------------------------------------------------------
// Rollouts

double RolloutReport::mean() const {
  if (episodes.empty()) return 0.0;
  double s = 0;
  for (const auto& e : episodes) s += e.success;
  return s / static_cast<double>(episodes.size());
}

std::uint64_t rollout_episode_seed(std::uint64_t seed, std::size_t index) {
  return episode_seed(seed ^ 0x726f6c6c6f757421ULL, index);
}

RolloutReport rollout(Policy& policy, ModelBundle* encoder, const RolloutConfig& config, const std::string& name) {
  if (config.episodes < 0 || config.cap < 1) throw PolicyError("invalid rollout config");
  if (policy.needs_embedding() && !encoder) throw PolicyError("policy reads embeddings but no encoder was given");
  if (encoder) encoder->eval();
  RolloutReport report;
  report.policy = name;
  const Eigen::RowVectorXf none;
  for (int i = 0; i < config.episodes; ++i) {
    EpisodeResult r;
    r.seed = rollout_episode_seed(config.seed, static_cast<std::size_t>(i));
    WorldState s = reset(r.seed);
    policy.reset(r.seed);
    while (r.steps < config.cap && success_metric(s) < 2.0) {
      const Action a = policy.act(s, policy.needs_embedding() ? embed(*encoder, s) : none);
      if (!std::isfinite(a.delta.x) || !std::isfinite(a.delta.y)) {
        r.failed = true;
        break;
      }
      s = step(s, clip_action(a));
      ++r.steps;
    }
    r.success = r.failed ? 0.0 : success_metric(s);
    report.episodes.push_back(r);
  }
  return report;
}

std::string to_json(const RolloutReport& report) {
  nlohmann::ordered_json j;
  j["policy"] = report.policy;
  j["episodes"] = report.episodes.size();
  j["mean_success"] = report.mean();
  int failures = 0;
  auto per = nlohmann::ordered_json::array();
  for (const auto& e : report.episodes) {
    failures += e.failed;
    per.push_back({{"seed", e.seed}, {"success", e.success}, {"steps", e.steps}, {"failed", e.failed}});
  }
  j["failures"] = failures;
  j["per_episode"] = per;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_policy(Policy& policy, std::uint64_t encoder_checksum, const std::filesystem::path& path) {
  TensorArchive a;
  a.kind = "policy";
  a.metadata["encoder.checksum"] = std::to_string(encoder_checksum);
  if (auto* knn = dynamic_cast<KnnPolicy*>(&policy)) {
    a.metadata["policy.kind"] = "knn";
    a.metadata["policy.k"] = std::to_string(knn->k());
    a.tensors.emplace_back("keys", to_tensor(knn->memory().keys));
    a.tensors.emplace_back("values", to_tensor(knn->memory().values));
  } else if (auto* bc = dynamic_cast<BcPolicy*>(&policy)) {
    const auto& c = bc->config();
    a.metadata["policy.kind"] = "bc";
    a.metadata["policy.context"] = std::to_string(c.context);
    a.metadata["policy.chunk"] = std::to_string(c.chunk);
    a.metadata["policy.hidden"] = std::to_string(c.hidden);
    a.metadata["policy.epochs"] = std::to_string(c.epochs);
    a.metadata["policy.batch"] = std::to_string(c.batch);
    a.metadata["policy.lr"] = nlohmann::json(c.lr).dump();
    a.metadata["policy.seed"] = std::to_string(c.seed);
    a.metadata["policy.dim"] = std::to_string(bc->dim());
    a.tensors.emplace_back("mean", bc->feature_mean());
    a.tensors.emplace_back("std", bc->feature_std());
    for (const auto& p : bc->net()->named_parameters()) a.tensors.emplace_back("net." + p.key(), p.value().detach());
  } else if (dynamic_cast<ExpertPolicy*>(&policy)) {
    a.metadata["policy.kind"] = "expert";
  } else if (dynamic_cast<RandomPolicy*>(&policy)) {
    a.metadata["policy.kind"] = "random";
  } else {
    throw PolicyError("unsupported policy type");
  }
  write_archive(a, path);
}

LoadedPolicy load_policy(const std::filesystem::path& path) {
  const auto a = read_archive(path);
  if (a.kind != "policy") throw ModelError("not a policy checkpoint: " + path.string());
  auto meta = [&](const std::string& key) {
    const auto it = a.metadata.find(key);
    if (it == a.metadata.end()) throw ModelError("policy checkpoint lacks " + key);
    return it->second;
  };
  LoadedPolicy out;
  out.kind = meta("policy.kind");
  out.encoder_checksum = std::stoull(meta("encoder.checksum"));
  if (out.kind == "knn") {
    PolicyMemory m{to_matrix(a.at("keys")), to_matrix(a.at("values"))};
    out.policy = std::make_unique<KnnPolicy>(std::move(m), std::stoi(meta("policy.k")));
  } else if (out.kind == "bc") {
    BcConfig c;
    c.context = std::stoi(meta("policy.context"));
    c.chunk = std::stoi(meta("policy.chunk"));
    c.hidden = std::stoi(meta("policy.hidden"));
    c.epochs = std::stoi(meta("policy.epochs"));
    c.batch = std::stoi(meta("policy.batch"));
    c.lr = std::stod(meta("policy.lr"));
    c.seed = std::stoull(meta("policy.seed"));
    auto bc = std::make_unique<BcPolicy>(c, std::stoi(meta("policy.dim")));
    bc->feature_mean() = a.at("mean").clone();
    bc->feature_std() = a.at("std").clone();
    torch::NoGradGuard guard;
    for (auto& p : bc->net()->named_parameters()) {
      const auto& src = a.at("net." + p.key());
      if (src.sizes() != p.value().sizes()) throw ModelError("policy tensor shape mismatch: " + p.key());
      p.value().copy_(src);
    }
    bc->net()->eval();
    out.policy = std::move(bc);
  } else if (out.kind == "expert") {
    out.policy = std::make_unique<ExpertPolicy>();
  } else if (out.kind == "random") {
    out.policy = std::make_unique<RandomPolicy>();
  } else {
    throw ModelError("unknown policy kind: " + out.kind);
  }
  return out;
}

}  // namespace dynamo

#include <torch/torch.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dynamo/demodata.hpp"
#include "dynamo/policy.hpp"
#include "dynamo/probes.hpp"
#include "dynamo/trainer.hpp"
#include "dynamo/variants.hpp"
#include "plots.hpp"

namespace fs = std::filesystem;
using namespace dynamo;
using Settings = std::map<std::string, std::string>;

namespace {

constexpr const char* kVersion = DYNAMO_VERSION;

// ---------------------------------------------------------------------------
// Config files and provenance

std::pair<std::string, std::string> split_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must be key=value: " + kv);
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError(DataErrorCode::io, "cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorCode::io, "missing input " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Effective config and code version as <tag>_config.txt and
/// <tag>_version.txt, written before any work starts.
void write_provenance(const fs::path& dir, const std::string& tag, const Settings& config,
                      const std::string& note = "") {
  fs::create_directories(dir);
  fs::remove(dir / "FAILED");
  std::string text;
  for (const auto& [k, v] : config) text += k + "=" + v + "\n";
  write_text(dir / (tag + "_config.txt"), text);
  write_text(dir / (tag + "_version.txt"), std::string("dynamo ") + kVersion + "\n" + note);
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw DataError(DataErrorCode::io, what + " not found: " + p.string());
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands

struct TrainArgs {
  fs::path data, out, config_file;
  std::string preset = "block_pushing";
  std::vector<std::string> overrides;
  std::string variant = "full";
  fs::path resume;
  bool random_init = false;
  bool quiet = false;
};

TrainConfig effective_config(const TrainArgs& a, const std::string& variant) {
  TrainConfig c;
  if (a.preset == "block_pushing") c = TrainConfig::block_pushing();
  else if (a.preset != "base") throw ConfigError("unknown preset: " + a.preset);
  if (!a.config_file.empty())
    c.apply_file(a.config_file);
  c = apply_variant(c, variant);
  for (const auto& kv : a.overrides) {
    const auto [k, v] = split_override(kv);
    c.set(k, v);
  }
  c.validate();
  return c;
}

void train_one(const TrainArgs& a, const std::string& variant, const Dataset& data, const fs::path& out) {
  const auto config = effective_config(a, variant);
  write_provenance(out, "pretrain", config.to_map(), a.random_init ? "init random\n" : "");
  if (a.random_init) {
    torch::manual_seed(config.seed);
    ModelBundle bundle(config.model_config());
    save_model(bundle, out / "model.ckpt");
    std::cout << "random-init encoder written to " << (out / "model.ckpt").string() << "\n";
    return;
  }
  TrainOptions o;
  o.out_dir = out;
  if (!a.resume.empty()) {
    require_exists(a.resume, "checkpoint");
    o.resume_from = a.resume;
  }
  if (!a.quiet) o.log = &std::cerr;
  const auto r = train_variant(config, LabeledView(data), o);
  const auto& last = r.history.steps.back();
  std::cout << variant << ": " << r.total_steps << " steps, final l_dyn " << fmt(last.l_dyn) << " l_cov "
            << fmt(last.l_cov) << "\n";
}

Dataset load_data(const fs::path& dir) {
  require_exists(dir / "manifest", "dataset manifest");
  return load_dataset(dir);
}

int cmd_gen_data(const fs::path& out, std::size_t episodes, std::uint64_t seed, int image_size, int cap) {
  write_provenance(out, "gen-data",
                   {{"episodes", std::to_string(episodes)},
                    {"seed", std::to_string(seed)},
                    {"image_size", std::to_string(image_size)},
                    {"episode_cap", std::to_string(cap)}});
  const auto data = generate_demos(episodes, seed, cap, image_size);
  save_dataset(data, out);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto c : data.manifest.checksums)
    h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(&c), sizeof c), h);
  std::cout << episodes << " episodes, " << data.total_frames() << " frames, dataset hash " << std::hex << h
            << std::dec << "\n";
  return 0;
}

struct ProbeArgs {
  fs::path data, model, out;
  int k = 20;
  int queries = 200;
  std::uint64_t seed = 0;
  bool plots = false;
  bool save_bank = false;
};

int cmd_probe(const ProbeArgs& a) {
  require_exists(a.model, "model checkpoint");
  write_provenance(a.out, "probe",
                   {{"data", a.data.string()},
                    {"model", a.model.string()},
                    {"k", std::to_string(a.k)},
                    {"queries", std::to_string(a.queries)},
                    {"seed", std::to_string(a.seed)}});
  const auto data = load_data(a.data);
  auto bundle = load_model(a.model);
  const auto bank = build_bank(*bundle, LabeledView(data));
  if (a.save_bank) save_bank(bank, a.out / "bank.bin");
  const auto report = probe_report(bank, a.k, a.queries, a.seed);
  write_text(a.out / "probe.json", to_json(report) + "\n");
  if (a.plots) {
    const auto q = choose_queries(bank.size(), 6, a.seed);
    plots::retrieval_montage(bank, data, q, 5, a.out / "retrieval.png");
    std::vector<std::vector<double>> stds;
    for (double s : report.std_per_dim) stds.push_back({s});
    const double top = std::max(1e-6, *std::max_element(report.std_per_dim.begin(), report.std_per_dim.end()));
    plots::bar_chart(stds, 0.0, top, top / 4, a.out / "std_per_dim.png");
  }
  std::cout << "R2 agent " << fmt(report.r2_agent) << " blocks " << fmt(report.r2_blocks()) << " min std "
            << fmt(report.std_min, 6) << " effective rank " << fmt(report.effective_rank, 2) << " NN block distance "
            << fmt(report.retrieval_block_distance) << "\n";
  return 0;
}

struct PolicyArgs {
  fs::path data, model, out;
  std::string kind = "knn";
  int k = kKnnDefaultK;
  BcConfig bc;
};

int cmd_train_policy(const PolicyArgs& a) {
  require_exists(a.model, "model checkpoint");
  Settings s{{"data", a.data.string()}, {"model", a.model.string()}, {"kind", a.kind}};
  if (a.kind == "knn") {
    s["k"] = std::to_string(a.k);
  } else if (a.kind == "bc") {
    s["context"] = std::to_string(a.bc.context);
    s["chunk"] = std::to_string(a.bc.chunk);
    s["hidden"] = std::to_string(a.bc.hidden);
    s["epochs"] = std::to_string(a.bc.epochs);
    s["batch"] = std::to_string(a.bc.batch);
    s["lr"] = nlohmann::json(a.bc.lr).dump();
    s["seed"] = std::to_string(a.bc.seed);
  } else {
    throw ConfigError("unknown policy kind: " + a.kind);
  }
  write_provenance(a.out, "train-policy", s);
  const auto data = load_data(a.data);
  const LabeledView view(data);
  auto bundle = load_model(a.model);
  const auto checksum = tensor_checksum(bundle->encoder_parameters());
  const auto bank = build_bank(*bundle, view);
  if (a.kind == "knn") {
    KnnPolicy policy(build_memory(bank, view), a.k);
    save_policy(policy, checksum, a.out / "policy.ckpt");
  } else {
    BcHistory h;
    auto policy = bc_train(a.bc, bank, view, &h);
    save_policy(*policy, checksum, a.out / "policy.ckpt");
    write_text(a.out / "bc_history.json", nlohmann::json({{"epoch_mse", h.epoch_mse}}).dump() + "\n");
    std::cout << "bc mse " << fmt(h.epoch_mse.front(), 5) << " -> " << fmt(h.epoch_mse.back(), 5) << "\n";
  }
  if (tensor_checksum(bundle->encoder_parameters()) != checksum)
    throw NumericalError("encoder parameters changed during policy training");
  std::cout << a.kind << " policy written to " << (a.out / "policy.ckpt").string() << "\n";
  return 0;
}

struct RolloutArgs {
  fs::path model, policy, out;
  std::string builtin;
  std::string name;
  RolloutConfig rc;
};

int cmd_rollout(const RolloutArgs& a) {
  if (a.policy.empty() == a.builtin.empty()) throw ConfigError("give exactly one of --policy or --builtin");
  std::unique_ptr<Policy> policy;
  std::string kind = a.builtin;
  std::uint64_t expected = 0;
  if (a.builtin == "expert") policy = std::make_unique<ExpertPolicy>();
  else if (a.builtin == "random") policy = std::make_unique<RandomPolicy>();
  else if (!a.builtin.empty()) throw ConfigError("unknown builtin policy: " + a.builtin);
  else {
    require_exists(a.policy, "policy checkpoint");
    auto loaded = load_policy(a.policy);
    policy = std::move(loaded.policy);
    kind = loaded.kind;
    expected = loaded.encoder_checksum;
  }
  const std::string name = a.name.empty() ? kind : a.name;
  write_provenance(a.out, "rollout_" + name,
                   {{"model", a.model.string()},
                    {"policy", a.policy.empty() ? a.builtin : a.policy.string()},
                    {"name", name},
                    {"episodes", std::to_string(a.rc.episodes)},
                    {"seed", std::to_string(a.rc.seed)},
                    {"cap", std::to_string(a.rc.cap)}});
  std::shared_ptr<ModelBundle> bundle;
  if (policy->needs_embedding()) {
    if (a.model.empty()) throw ConfigError("this policy needs --model");
    require_exists(a.model, "model checkpoint");
    bundle = load_model(a.model);
    if (tensor_checksum(bundle->encoder_parameters()) != expected)
      throw ModelError("policy was trained on a different encoder than " + a.model.string());
  }
  const auto report = rollout(*policy, bundle.get(), a.rc, name);
  write_text(a.out / ("rollout_" + name + ".json"), to_json(report) + "\n");
  std::cout << name << ": mean success " << fmt(report.mean(), 3) << " over " << report.episodes.size()
            << " episodes\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const fs::path& out, const std::string& baseline) {
  Settings s{{"baseline", baseline}};
  for (std::size_t i = 0; i < runs.size(); ++i) s["run." + std::to_string(i)] = runs[i];
  write_provenance(out, "report", s);

  nlohmann::ordered_json j;
  j["version"] = kVersion;
  auto rows = nlohmann::ordered_json::array();
  std::vector<std::string> policies;
  for (const auto& spec : runs) {
    const auto [name, dir] = split_override(spec);
    nlohmann::ordered_json row;
    row["run"] = name;
    if (fs::exists(fs::path(dir) / "probe.json")) {
      const auto p = nlohmann::json::parse(read_text(fs::path(dir) / "probe.json"));
      row["r2_agent"] = p["r2"]["agent_pos"];
      row["r2_blocks"] = p["r2"]["blocks_mean"];
      row["std_min"] = p["collapse"]["std_min"];
      row["effective_rank"] = p["collapse"]["effective_rank"];
      row["nn_block_distance"] = p["retrieval"]["mean_block_distance"];
    } else if (!fs::is_directory(dir)) {
      throw DataError(DataErrorCode::io, "run directory not found: " + dir);
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().filename().string().rfind("rollout_", 0) == 0 && e.path().extension() == ".json")
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    nlohmann::ordered_json roll = nlohmann::ordered_json::object();
    for (const auto& f : files) {
      const auto r = nlohmann::json::parse(read_text(f));
      const std::string pol = r["policy"];
      roll[pol] = {{"mean_success", r["mean_success"]}, {"episodes", r["episodes"]}};
      if (std::find(policies.begin(), policies.end(), pol) == policies.end()) policies.push_back(pol);
    }
    row["rollouts"] = roll;
    rows.push_back(row);
  }
  std::sort(policies.begin(), policies.end());
  const auto base = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r["run"] == baseline; });
  if (base != rows.end())
    for (auto& r : rows) {
      if (r.contains("r2_blocks") && base->contains("r2_blocks"))
        r["r2_blocks_minus_baseline"] = r["r2_blocks"].template get<double>() - (*base)["r2_blocks"].template get<double>();
    }
  j["baseline"] = baseline;
  j["runs"] = rows;
  write_text(out / "report.json", j.dump(2) + "\n");

  auto cell = [](const nlohmann::ordered_json& r, const char* key, int prec) {
    return r.contains(key) ? fmt(r[key].get<double>(), prec) : std::string("-");
  };
  std::ostringstream t;
  t << std::left << std::setw(20) << "run" << std::setw(10) << "R2 agent" << std::setw(10) << "R2 block" << std::setw(11)
    << "min std" << std::setw(9) << "eff rank" << std::setw(10) << "NN dist";
  for (const auto& p : policies) t << std::setw(10) << p;
  t << "\n";
  std::vector<std::vector<double>> r2_groups, roll_groups;
  for (const auto& r : rows) {
    t << std::setw(20) << r["run"].get<std::string>() << std::setw(10) << cell(r, "r2_agent", 3) << std::setw(10)
      << cell(r, "r2_blocks", 3) << std::setw(11) << cell(r, "std_min", 6) << std::setw(9)
      << cell(r, "effective_rank", 2) << std::setw(10) << cell(r, "nn_block_distance", 4);
    std::vector<double> rg;
    for (const auto& p : policies) {
      const bool has = r["rollouts"].contains(p);
      t << std::setw(10) << (has ? fmt(r["rollouts"][p]["mean_success"].get<double>(), 3) : std::string("-"));
      rg.push_back(has ? r["rollouts"][p]["mean_success"].get<double>() : 0.0);
    }
    t << "\n";
    r2_groups.push_back({r.contains("r2_agent") ? r["r2_agent"].get<double>() : 0.0,
                         r.contains("r2_blocks") ? r["r2_blocks"].get<double>() : 0.0});
    roll_groups.push_back(rg);
  }
  write_text(out / "report.txt", t.str());
  plots::bar_chart(r2_groups, 0.0, 1.0, 0.25, out / "r2.png");
  if (!policies.empty()) plots::bar_chart(roll_groups, 0.0, 2.0, 0.5, out / "rollouts.png");
  std::cout << t.str();
  return 0;
}

void flag_failure(const fs::path& dir, const std::string& message) {
  if (dir.empty() || !fs::is_directory(dir)) return;
  std::ofstream(dir / "FAILED") << message << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamo: latent-dynamics encoder pretraining on a two-block pushing world"};
  app.set_version_flag("--version", std::string("dynamo ") + kVersion);
  app.require_subcommand(1);
  fs::path failure_dir;

  fs::path gen_out;
  std::size_t gen_episodes = 200;
  std::uint64_t gen_seed = 0;
  int gen_size = kDefaultImageSize, gen_cap = kEpisodeCap;
  auto* gen = app.add_subcommand("gen-data", "Record expert demonstrations");
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--episodes", gen_episodes, "Number of episodes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Dataset seed")->capture_default_str();
  gen->add_option("--image-size", gen_size, "Square frame size in pixels")->capture_default_str();
  gen->add_option("--cap", gen_cap, "Maximum recorded states per episode")->capture_default_str();

  TrainArgs ta;
  auto add_train_opts = [&](CLI::App* c) {
    c->add_option("--data", ta.data, "Dataset directory")->required();
    c->add_option("--out", ta.out, "Run directory")->required();
    c->add_option("--config", ta.config_file, "key=value config file");
    c->add_option("--preset", ta.preset, "block_pushing or base")->capture_default_str();
    c->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
    c->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");
  };
  auto* pre = app.add_subcommand("pretrain", "Train an encoder (one variant)");
  add_train_opts(pre);
  pre->add_option("--variant", ta.variant, "Ablation variant")->capture_default_str();
  pre->add_option("--resume", ta.resume, "Checkpoint to resume from");
  pre->add_flag("--random-init", ta.random_init, "Write the untrained, seeded encoder and stop");

  std::vector<std::string> ablate_variants(kVariantNames.begin(), kVariantNames.end());
  bool ablate_probe = false;
  auto* abl = app.add_subcommand("ablate", "Train every variant with a shared seed");
  add_train_opts(abl);
  abl->add_option("--variants", ablate_variants, "Subset of variants")->delimiter(',');
  abl->add_flag("--probe", ablate_probe, "Also write probe.json into each run directory");

  ProbeArgs pa;
  auto* prb = app.add_subcommand("probe", "State probes, retrieval and collapse diagnostics");
  prb->add_option("--data", pa.data, "Dataset directory")->required();
  prb->add_option("--model", pa.model, "Model checkpoint")->required();
  prb->add_option("--out", pa.out, "Output directory")->required();
  prb->add_option("--k", pa.k, "Retrieval neighbors")->capture_default_str();
  prb->add_option("--queries", pa.queries, "Retrieval queries")->capture_default_str();
  prb->add_option("--seed", pa.seed, "Query seed")->capture_default_str();
  prb->add_flag("--plots", pa.plots, "Write retrieval montage and per-dimension std plots");
  prb->add_flag("--save-bank", pa.save_bank, "Keep the embedding bank");

  PolicyArgs pol;
  auto* tp = app.add_subcommand("train-policy", "Fit a policy on frozen embeddings");
  tp->add_option("--data", pol.data, "Dataset directory")->required();
  tp->add_option("--model", pol.model, "Frozen encoder checkpoint")->required();
  tp->add_option("--out", pol.out, "Output directory")->required();
  tp->add_option("--kind", pol.kind, "knn or bc")->capture_default_str();
  tp->add_option("--k", pol.k, "kNN neighbors")->capture_default_str();
  tp->add_option("--context", pol.bc.context, "BC observation context")->capture_default_str();
  tp->add_option("--chunk", pol.bc.chunk, "BC action chunk")->capture_default_str();
  tp->add_option("--hidden", pol.bc.hidden, "BC hidden width")->capture_default_str();
  tp->add_option("--epochs", pol.bc.epochs, "BC epochs")->capture_default_str();
  tp->add_option("--batch", pol.bc.batch, "BC batch size")->capture_default_str();
  tp->add_option("--lr", pol.bc.lr, "BC learning rate")->capture_default_str();
  tp->add_option("--seed", pol.bc.seed, "BC seed")->capture_default_str();

  RolloutArgs ra;
  auto* ro = app.add_subcommand("rollout", "Closed-loop evaluation");
  ro->add_option("--model", ra.model, "Frozen encoder checkpoint");
  ro->add_option("--policy", ra.policy, "Policy checkpoint");
  ro->add_option("--builtin", ra.builtin, "expert or random");
  ro->add_option("--name", ra.name, "Name in the report (default: policy kind)");
  ro->add_option("--out", ra.out, "Output directory")->required();
  ro->add_option("--episodes", ra.rc.episodes, "Episodes")->capture_default_str();
  ro->add_option("--seed", ra.rc.seed, "Rollout seed")->capture_default_str();
  ro->add_option("--cap", ra.rc.cap, "Step cap")->capture_default_str();

  std::vector<std::string> runs;
  fs::path report_out;
  std::string baseline = "random";
  auto* rep = app.add_subcommand("report", "Compare runs");
  rep->add_option("--run", runs, "name=directory (repeatable)")->required();
  rep->add_option("--out", report_out, "Output directory")->required();
  rep->add_option("--baseline", baseline, "Run name used as the reference")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      failure_dir = gen_out;
      return cmd_gen_data(gen_out, gen_episodes, gen_seed, gen_size, gen_cap);
    }
    if (pre->parsed()) {
      failure_dir = ta.out;
      const auto data = load_data(ta.data);
      train_one(ta, ta.variant, data, ta.out);
      return 0;
    }
    if (abl->parsed()) {
      const auto data = load_data(ta.data);
      for (const auto& v : ablate_variants) {
        failure_dir = ta.out / v;
        train_one(ta, v, data, ta.out / v);
        if (ablate_probe) {
          pa.data = ta.data;
          pa.model = ta.out / v / "model.ckpt";
          pa.out = ta.out / v;
          cmd_probe(pa);
        }
      }
      return 0;
    }
    if (prb->parsed()) {
      failure_dir = pa.out;
      return cmd_probe(pa);
    }
    if (tp->parsed()) {
      failure_dir = pol.out;
      return cmd_train_policy(pol);
    }
    if (ro->parsed()) {
      failure_dir = ra.out;
      return cmd_rollout(ra);
    }
    if (rep->parsed()) {
      failure_dir = report_out;
      return cmd_report(runs, report_out, baseline);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    flag_failure(failure_dir, e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    flag_failure(failure_dir, e.what());
    return 3;
  } catch (const ObjectiveError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    flag_failure(failure_dir, e.what());
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    flag_failure(failure_dir, e.what());
    return 2;
  }
  return 1;
}

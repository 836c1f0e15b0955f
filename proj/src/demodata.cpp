#include "dynamo/demodata.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace dynamo {

namespace {

constexpr std::array<char, 8> kTrajMagic = {'D', 'Y', 'N', 'T', 'R', 'A', 'J', '\0'};
constexpr std::size_t kHeaderBytes = 8 + 5 * 4;
constexpr std::size_t kStateFloats = 13;
constexpr std::size_t kStateBytes = kStateFloats * 4 + 4;
constexpr std::size_t kActionBytes = 2 * 4;
constexpr std::size_t kTrailerBytes = 8;

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

 private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw DataError(DataErrorCode::truncated, "trajectory file truncated");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw DataError(DataErrorCode::io, "write failed: " + path.string());
}

template <class Out>
SequenceBatch gather_impl(const UnlabeledView& data, int context, std::span<const WindowRef> windows,
                          Out&& labels) {
  SequenceBatch b;
  b.batch = static_cast<int>(windows.size());
  b.context = context;
  b.views = data.views();
  b.image_size = data.image_size();
  const std::size_t fb = static_cast<std::size_t>(b.image_size) * b.image_size * 3;
  b.frames.resize(windows.size() * context * b.views * fb);
  auto dst = b.frames.begin();
  for (const WindowRef& w : windows) {
    if (w.offset + static_cast<std::size_t>(context) > data.length(w.trajectory))
      throw DataError(DataErrorCode::context_exceeds_data, "window crosses trajectory end");
    for (int t = 0; t < context; ++t) {
      for (int v = 0; v < b.views; ++v) {
        auto f = data.frame(w.trajectory, w.offset + t, v);
        dst = std::copy(f.begin(), f.end(), dst);
      }
    }
    labels(b, w);
  }
  b.sources.assign(windows.begin(), windows.end());
  return b;
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t hash) {
  for (std::uint8_t c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

Frame Trajectory::frame_copy(std::size_t t, int view) const {
  auto f = frame(t, view);
  return {height, width, {f.begin(), f.end()}};
}

std::size_t Dataset::total_frames() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.length();
  return n;
}

std::size_t Dataset::max_length() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n = std::max(n, t.length());
  return n;
}

int UnlabeledView::views() const { return static_cast<int>(data_->manifest.views.size()); }

WindowIndex::WindowIndex(const UnlabeledView& data, int context) : context_(context) {
  if (context < 2) throw std::invalid_argument("context must be at least 2");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t len = data.length(i);
    if (len < static_cast<std::size_t>(context)) continue;
    for (std::size_t o = 0; o + context <= len; ++o)
      windows_.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(o)});
  }
  if (windows_.empty()) throw DataError(DataErrorCode::context_exceeds_data, "context exceeds data");
}

std::vector<WindowRef> WindowIndex::draw(std::size_t count, std::mt19937_64& rng) const {
  std::vector<WindowRef> out;
  out.reserve(count);
  const std::uint64_t n = windows_.size();
  for (std::size_t i = 0; i < count; ++i) {
    // Multiply-shift keeps the draw portable across standard libraries.
    const std::uint64_t r = rng() >> 32;
    out.push_back(windows_[(r * n) >> 32]);
  }
  return out;
}

SequenceBatch gather(const UnlabeledView& data, int context, std::span<const WindowRef> windows) {
  return gather_impl(data, context, windows, [](SequenceBatch&, const WindowRef&) {});
}

SequenceBatch gather(const LabeledView& data, int context, std::span<const WindowRef> windows) {
  return gather_impl(data.unlabeled(), context, windows, [&](SequenceBatch& b, const WindowRef& w) {
    if (!b.states) {
      b.states.emplace();
      b.actions.emplace();
    }
    const Trajectory& tr = data.trajectory(w.trajectory);
    for (int t = 0; t < context; ++t) {
      b.states->push_back(tr.states[w.offset + t]);
      b.actions->push_back(tr.actions[w.offset + t]);
    }
  });
}

SequenceBatch sample_sequences(const UnlabeledView& data, int context, int batch, std::uint64_t seed) {
  const WindowIndex index(data, context);
  std::mt19937_64 rng(seed);
  const auto windows = index.draw(static_cast<std::size_t>(batch), rng);
  return gather(data, context, windows);
}

SequenceBatch sample_sequences(const LabeledView& data, int context, int batch, std::uint64_t seed) {
  const WindowIndex index(data.unlabeled(), context);
  std::mt19937_64 rng(seed);
  const auto windows = index.draw(static_cast<std::size_t>(batch), rng);
  return gather(data, context, windows);
}

Trajectory record_episode(std::uint64_t seed, const ExpertPlan& plan, int episode_cap, int image_size) {
  Trajectory tr;
  tr.views = static_cast<int>(kAllViews.size());
  tr.height = tr.width = image_size;
  WorldState s = reset(seed);
  for (int t = 0; t < episode_cap; ++t) {
    const Action a = expert_action(s, plan);
    for (View v : kAllViews) {
      const Frame f = render(s, v, image_size);
      tr.frames.insert(tr.frames.end(), f.pixels.begin(), f.pixels.end());
    }
    tr.states.push_back(s);
    tr.actions.push_back(a);
    if (success_metric(s) >= 2.0) break;
    s = step(s, a);
  }
  return tr;
}

std::uint64_t episode_seed(std::uint64_t seed, std::size_t index) {
  return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(index));
}

Dataset generate_demos(std::size_t n, std::uint64_t seed, int episode_cap, int image_size) {
  Dataset d;
  d.manifest.seed = seed;
  d.manifest.image_size = image_size;
  d.manifest.episode_cap = episode_cap;
  d.manifest.n_trajectories = n;
  const auto& plans = all_plans();
  for (std::size_t i = 0; i < n; ++i) {
    d.trajectories.push_back(record_episode(episode_seed(seed, i), plans[i % plans.size()], episode_cap, image_size));
    d.manifest.lengths.push_back(d.trajectories.back().length());
  }
  for (const auto& t : d.trajectories) d.manifest.checksums.push_back(fnv1a64(encode_trajectory(t)));
  return d;
}

std::string trajectory_filename(std::size_t index) {
  std::ostringstream os;
  os << "traj_" << std::setw(5) << std::setfill('0') << index << ".bin";
  return os.str();
}

std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj) {
  std::vector<std::uint8_t> out;
  const std::size_t T = traj.length();
  out.reserve(kHeaderBytes + traj.frames.size() + T * (kStateBytes + kActionBytes) + kTrailerBytes);
  ByteWriter w(out);
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kTrajMagic.data()), kTrajMagic.size()));
  w.u32(kDatasetFormatVersion);
  w.u32(static_cast<std::uint32_t>(T));
  w.u32(static_cast<std::uint32_t>(traj.views));
  w.u32(static_cast<std::uint32_t>(traj.height));
  w.u32(static_cast<std::uint32_t>(traj.width));
  w.bytes(traj.frames);
  for (const WorldState& s : traj.states) {
    for (Vec2 p : {s.agent_pos, s.block_pos[0], s.block_pos[1], s.target_pos[0], s.target_pos[1]}) {
      w.f32(p.x);
      w.f32(p.y);
    }
    w.f32(s.block_radius);
    w.f32(s.agent_radius);
    w.f32(s.target_halfwidth);
    w.u32(s.step_count);
  }
  for (const Action& a : traj.actions) {
    w.f32(a.delta.x);
    w.f32(a.delta.y);
  }
  w.u64(fnv1a64(out));
  return out;
}

Trajectory decode_trajectory(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes + kTrailerBytes)
    throw DataError(DataErrorCode::truncated, "trajectory file truncated");
  ByteReader r(bytes);
  auto magic = r.bytes(kTrajMagic.size());
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kTrajMagic.data())))
    throw DataError(DataErrorCode::malformed, "not a trajectory file");
  const std::uint32_t version = r.u32();
  if (version != kDatasetFormatVersion)
    throw DataError(DataErrorCode::version_mismatch, "unsupported trajectory version " + std::to_string(version));
  Trajectory tr;
  const std::size_t T = r.u32();
  tr.views = static_cast<int>(r.u32());
  tr.height = static_cast<int>(r.u32());
  tr.width = static_cast<int>(r.u32());
  const std::size_t frame_total = T * tr.views * tr.frame_bytes();
  const std::size_t expected = kHeaderBytes + frame_total + T * (kStateBytes + kActionBytes) + kTrailerBytes;
  if (bytes.size() < expected) throw DataError(DataErrorCode::truncated, "trajectory file truncated");
  if (bytes.size() > expected) throw DataError(DataErrorCode::malformed, "trailing bytes in trajectory file");
  const std::uint64_t computed = fnv1a64(bytes.first(bytes.size() - kTrailerBytes));

  auto frames = r.bytes(frame_total);
  tr.frames.assign(frames.begin(), frames.end());
  tr.states.resize(T);
  for (WorldState& s : tr.states) {
    for (Vec2* p : {&s.agent_pos, &s.block_pos[0], &s.block_pos[1], &s.target_pos[0], &s.target_pos[1]}) {
      p->x = r.f32();
      p->y = r.f32();
    }
    s.block_radius = r.f32();
    s.agent_radius = r.f32();
    s.target_halfwidth = r.f32();
    s.step_count = r.u32();
  }
  tr.actions.resize(T);
  for (Action& a : tr.actions) {
    a.delta.x = r.f32();
    a.delta.y = r.f32();
  }
  if (r.u64() != computed) throw DataError(DataErrorCode::checksum, "trajectory checksum mismatch");
  return tr;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError(DataErrorCode::io, "cannot create " + dir.string() + ": " + ec.message());
  const auto manifest_path = dir / "manifest";
  std::filesystem::remove(manifest_path, ec);

  nlohmann::json lengths = nlohmann::json::array();
  nlohmann::json checksums = nlohmann::json::array();
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    const auto bytes = encode_trajectory(data.trajectories[i]);
    write_file(dir / trajectory_filename(i), bytes);
    lengths.push_back(data.trajectories[i].length());
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(bytes);
    checksums.push_back(hex.str());
  }
  nlohmann::ordered_json m;
  m["format_version"] = data.manifest.format_version;
  m["n_trajectories"] = data.trajectories.size();
  m["views"] = data.manifest.views;
  m["image_size"] = data.manifest.image_size;
  m["world"] = {{"agent_radius", kAgentRadius},
                {"block_radius", kBlockRadius},
                {"target_halfwidth", kTargetHalfwidth},
                {"max_action", kMaxAction},
                {"targets", {{kTargetPositions[0].x, kTargetPositions[0].y},
                             {kTargetPositions[1].x, kTargetPositions[1].y}}}};
  m["seed"] = data.manifest.seed;
  m["episode_cap"] = data.manifest.episode_cap;
  m["lengths"] = lengths;
  m["checksums"] = checksums;
  const std::string text = m.dump(2) + "\n";
  const auto tmp = dir / "manifest.tmp";
  write_file(tmp, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  std::filesystem::rename(tmp, manifest_path, ec);
  if (ec) throw DataError(DataErrorCode::io, "cannot finalize manifest: " + ec.message());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto raw = read_file(dir / "manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorCode::malformed, std::string("manifest parse error: ") + e.what());
  }
  Dataset d;
  try {
    d.manifest.format_version = m.at("format_version").get<std::uint32_t>();
    if (d.manifest.format_version != kDatasetFormatVersion)
      throw DataError(DataErrorCode::version_mismatch,
                      "unsupported dataset version " + std::to_string(d.manifest.format_version));
    d.manifest.n_trajectories = m.at("n_trajectories").get<std::size_t>();
    d.manifest.views = m.at("views").get<std::vector<std::string>>();
    d.manifest.image_size = m.at("image_size").get<int>();
    d.manifest.seed = m.at("seed").get<std::uint64_t>();
    d.manifest.episode_cap = m.at("episode_cap").get<int>();
    d.manifest.lengths = m.at("lengths").get<std::vector<std::size_t>>();
    for (const auto& c : m.at("checksums")) d.manifest.checksums.push_back(std::stoull(c.get<std::string>(), nullptr, 16));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorCode::malformed, std::string("manifest field error: ") + e.what());
  }
  if (d.manifest.lengths.size() != d.manifest.n_trajectories ||
      d.manifest.checksums.size() != d.manifest.n_trajectories)
    throw DataError(DataErrorCode::malformed, "manifest counts disagree");

  std::size_t files_on_disk = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.starts_with("traj_") && name.ends_with(".bin")) ++files_on_disk;
  }
  if (files_on_disk != d.manifest.n_trajectories)
    throw DataError(DataErrorCode::malformed, "manifest lists " + std::to_string(d.manifest.n_trajectories) +
                                                  " trajectories but directory holds " +
                                                  std::to_string(files_on_disk));

  for (std::size_t i = 0; i < d.manifest.n_trajectories; ++i) {
    const auto bytes = read_file(dir / trajectory_filename(i));
    Trajectory tr = decode_trajectory(bytes);
    if (fnv1a64(bytes) != d.manifest.checksums[i])
      throw DataError(DataErrorCode::checksum, "checksum mismatch against manifest for " + trajectory_filename(i));
    if (tr.length() != d.manifest.lengths[i] || tr.views != static_cast<int>(d.manifest.views.size()) ||
        tr.height != d.manifest.image_size)
      throw DataError(DataErrorCode::malformed, "trajectory shape disagrees with manifest: " + trajectory_filename(i));
    d.trajectories.push_back(std::move(tr));
  }
  return d;
}

}  // namespace dynamo

#pragma once

// Demonstration datasets: generation with the scripted expert, on-disk
// persistence, and window sampling.
//
// Pretraining code receives an UnlabeledView, which only exposes frames.
// Probes, policies and the action-supervised variants take a LabeledView.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynamo/world.hpp"

namespace dynamo {

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

enum class DataErrorCode {
  io = 1,
  version_mismatch,
  truncated,
  checksum,
  malformed,
  context_exceeds_data,
};

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  DataErrorCode code() const { return code_; }

 private:
  DataErrorCode code_;
};

struct Trajectory {
  int views = 0;
  int height = 0;
  int width = 0;
  /// Frames laid out [t][view][row][col][rgb].
  std::vector<std::uint8_t> frames;
  std::vector<WorldState> states;
  /// actions[t] was taken in states[t].
  std::vector<Action> actions;

  std::size_t length() const { return states.size(); }
  std::size_t frame_bytes() const { return static_cast<std::size_t>(height) * width * 3; }
  std::span<const std::uint8_t> frame(std::size_t t, int view) const {
    return {frames.data() + (t * views + view) * frame_bytes(), frame_bytes()};
  }
  Frame frame_copy(std::size_t t, int view) const;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct DatasetManifest {
  std::uint32_t format_version = kDatasetFormatVersion;
  std::size_t n_trajectories = 0;
  std::vector<std::string> views = {"front", "side"};
  int image_size = kDefaultImageSize;
  std::uint64_t seed = 0;
  int episode_cap = kEpisodeCap;
  std::vector<std::size_t> lengths;
  std::vector<std::uint64_t> checksums;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trajectory> trajectories;

  std::size_t total_frames() const;
  std::size_t max_length() const;
};

/// Frames only.
class UnlabeledView {
 public:
  explicit UnlabeledView(const Dataset& data) : data_(&data) {}
  std::size_t size() const { return data_->trajectories.size(); }
  std::size_t length(std::size_t i) const { return data_->trajectories[i].length(); }
  int views() const;
  int image_size() const { return data_->manifest.image_size; }
  std::span<const std::uint8_t> frame(std::size_t traj, std::size_t t, int view) const {
    return data_->trajectories[traj].frame(t, view);
  }

 private:
  const Dataset* data_;
};

/// Frames plus ground-truth states and actions.
class LabeledView {
 public:
  explicit LabeledView(const Dataset& data) : data_(&data) {}
  UnlabeledView unlabeled() const { return UnlabeledView(*data_); }
  std::size_t size() const { return data_->trajectories.size(); }
  const Trajectory& trajectory(std::size_t i) const { return data_->trajectories[i]; }
  const Dataset& dataset() const { return *data_; }

 private:
  const Dataset* data_;
};

struct WindowRef {
  std::uint32_t trajectory = 0;
  std::uint32_t offset = 0;
  friend bool operator==(WindowRef, WindowRef) = default;
};

struct SequenceBatch {
  int batch = 0;
  int context = 0;
  int views = 0;
  int image_size = 0;
  /// [b][t][view][row][col][rgb]
  std::vector<std::uint8_t> frames;
  std::optional<std::vector<WorldState>> states;   // [b][t]
  std::optional<std::vector<Action>> actions;      // [b][t]
  std::vector<WindowRef> sources;
};

/// All (trajectory, offset) pairs whose window of length `context` stays
/// inside one trajectory, in trajectory-major order.
class WindowIndex {
 public:
  WindowIndex(const UnlabeledView& data, int context);
  std::size_t size() const { return windows_.size(); }
  int context() const { return context_; }
  const WindowRef& operator[](std::size_t i) const { return windows_[i]; }
  /// `count` windows drawn uniformly with replacement.
  std::vector<WindowRef> draw(std::size_t count, std::mt19937_64& rng) const;

 private:
  int context_;
  std::vector<WindowRef> windows_;
};

SequenceBatch gather(const UnlabeledView& data, int context, std::span<const WindowRef> windows);
SequenceBatch gather(const LabeledView& data, int context, std::span<const WindowRef> windows);

SequenceBatch sample_sequences(const UnlabeledView& data, int context, int batch, std::uint64_t seed);
SequenceBatch sample_sequences(const LabeledView& data, int context, int batch, std::uint64_t seed);

/// Rolls one expert episode from reset(seed) until both blocks are in targets
/// or `episode_cap` states have been recorded.
Trajectory record_episode(std::uint64_t seed, const ExpertPlan& plan, int episode_cap, int image_size);

/// n expert episodes; plans cycle through all four combinations.
Dataset generate_demos(std::size_t n, std::uint64_t seed, int episode_cap = kEpisodeCap,
                       int image_size = kDefaultImageSize);

/// Reset seed of episode `index` in a dataset generated from `seed`.
std::uint64_t episode_seed(std::uint64_t seed, std::size_t index);

std::string trajectory_filename(std::size_t index);
std::vector<std::uint8_t> encode_trajectory(const Trajectory& traj);
Trajectory decode_trajectory(std::span<const std::uint8_t> bytes);

/// Writes `traj_NNNNN.bin` files and then the manifest (via a temp file and
/// rename, so a failed save never leaves a manifest behind).
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);

}  // namespace dynamo

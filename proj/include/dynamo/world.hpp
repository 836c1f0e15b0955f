#pragma once

// Two-block pushing world: disk agent, disk blocks, square targets in the
// unit square. Everything here is a pure function of its arguments.

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace dynamo {

struct Vec2 {
  float x = 0.0f;
  float y = 0.0f;

  friend constexpr Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend constexpr Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend constexpr Vec2 operator*(float s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend constexpr bool operator==(Vec2 a, Vec2 b) = default;
};

float dot(Vec2 a, Vec2 b);
float norm(Vec2 a);

inline constexpr float kAgentRadius = 0.04f;
inline constexpr float kBlockRadius = 0.04f;
inline constexpr float kTargetHalfwidth = 0.08f;
inline constexpr float kMaxAction = 0.05f;
inline constexpr std::array<Vec2, 2> kTargetPositions = {Vec2{0.2f, 0.8f}, Vec2{0.8f, 0.8f}};
inline constexpr int kDefaultImageSize = 64;
inline constexpr int kEpisodeCap = 300;

struct WorldState {
  Vec2 agent_pos;
  std::array<Vec2, 2> block_pos;
  std::array<Vec2, 2> target_pos = kTargetPositions;
  float block_radius = kBlockRadius;
  float agent_radius = kAgentRadius;
  float target_halfwidth = kTargetHalfwidth;
  std::uint32_t step_count = 0;

  friend bool operator==(const WorldState&, const WorldState&) = default;
};

struct Action {
  Vec2 delta;
  friend bool operator==(Action, Action) = default;
};

/// Clips each axis of the action to [-kMaxAction, kMaxAction].
Action clip_action(Action a);

enum class View : std::uint8_t { front = 0, side = 1 };
inline constexpr std::array<View, 2> kAllViews = {View::front, View::side};
std::string_view view_name(View v);
View parse_view(std::string_view name);

/// H x W x 3 8-bit RGB image, row-major.
struct Frame {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  std::span<const std::uint8_t, 3> pixel(int row, int col) const {
    return std::span<const std::uint8_t, 3>(pixels.data() + 3 * (row * width + col), 3);
  }
  friend bool operator==(const Frame&, const Frame&) = default;
};

enum class TargetAssignment : std::uint8_t { same = 0, opposite = 1 };

struct ExpertPlan {
  std::array<int, 2> block_order = {0, 1};
  TargetAssignment assignment = TargetAssignment::same;

  int target_for(int block) const {
    return assignment == TargetAssignment::same ? block : 1 - block;
  }
  friend bool operator==(const ExpertPlan&, const ExpertPlan&) = default;
};

/// The four push-order x target-assignment combinations.
const std::array<ExpertPlan, 4>& all_plans();

/// Seeded initial state: agent near the bottom edge, blocks in the middle band,
/// all bodies well separated. Targets sit in the two upper corners.
WorldState reset(std::uint64_t seed);

/// One kinematic step. The agent moves by the clipped action, then every
/// block overlapping the agent is pushed out along the contact normal
/// (block 0 first, then block 1).
WorldState step(const WorldState& state, Action action);

Frame render(const WorldState& state, View view, int image_size = kDefaultImageSize);

/// Scripted proportional controller following `plan`.
Action expert_action(const WorldState& state, const ExpertPlan& plan);

bool block_in_target(const WorldState& state, int block, int target);

/// Number of blocks sitting in a target, each target counted at most once.
double success_metric(const WorldState& state);

}  // namespace dynamo

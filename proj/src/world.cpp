#include "dynamo/world.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace dynamo {

float dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
float norm(Vec2 a) { return std::sqrt(dot(a, a)); }

namespace {

constexpr float kContactDistance = kAgentRadius + kBlockRadius;
// A block counts as delivered once its center is this close (per axis) to the
// target center; tighter than the success square so the expert finishes well inside.
constexpr float kDeliveredTolerance = 0.04f;
constexpr float kPushSpeed = 0.03f;
constexpr float kStagingGap = 0.03f;

float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }
Vec2 clamp_unit(Vec2 p) { return {clamp01(p.x), clamp01(p.y)}; }

// Portable uniform in [lo, hi): 24 high bits of a 64-bit Mersenne draw.
float uniform(std::mt19937_64& gen, float lo, float hi) {
  const float u = static_cast<float>(gen() >> 40) * 0x1p-24f;
  return lo + (hi - lo) * u;
}

Vec2 normalized(Vec2 v) {
  const float n = norm(v);
  return n > 1e-12f ? (1.0f / n) * v : Vec2{1.0f, 0.0f};
}

bool segment_hits_disk(Vec2 p, Vec2 q, Vec2 center, float radius) {
  const Vec2 d = q - p;
  const float len2 = dot(d, d);
  float t = 0.0f;
  if (len2 > 1e-12f) t = std::clamp(dot(center - p, d) / len2, 0.0f, 1.0f);
  return norm(p + t * d - center) < radius;
}

bool delivered(Vec2 block, Vec2 target) {
  return std::max(std::abs(block.x - target.x), std::abs(block.y - target.y)) < kDeliveredTolerance;
}

}  // namespace

Action clip_action(Action a) {
  return {{std::clamp(a.delta.x, -kMaxAction, kMaxAction), std::clamp(a.delta.y, -kMaxAction, kMaxAction)}};
}

std::string_view view_name(View v) { return v == View::front ? "front" : "side"; }

View parse_view(std::string_view name) {
  if (name == "front") return View::front;
  if (name == "side") return View::side;
  throw std::invalid_argument("unknown view: " + std::string(name));
}

const std::array<ExpertPlan, 4>& all_plans() {
  static const std::array<ExpertPlan, 4> plans = {
      ExpertPlan{{0, 1}, TargetAssignment::same},
      ExpertPlan{{1, 0}, TargetAssignment::same},
      ExpertPlan{{0, 1}, TargetAssignment::opposite},
      ExpertPlan{{1, 0}, TargetAssignment::opposite},
  };
  return plans;
}

WorldState reset(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  WorldState s;
  for (;;) {
    const Vec2 b0{uniform(gen, 0.15f, 0.85f), uniform(gen, 0.30f, 0.55f)};
    const Vec2 b1{uniform(gen, 0.15f, 0.85f), uniform(gen, 0.30f, 0.55f)};
    const Vec2 a{uniform(gen, 0.10f, 0.90f), uniform(gen, 0.05f, 0.15f)};
    if (norm(b0 - b1) > 0.2f && norm(a - b0) > 0.15f && norm(a - b1) > 0.15f) {
      s.agent_pos = a;
      s.block_pos = {b0, b1};
      return s;
    }
  }
}

WorldState step(const WorldState& state, Action action) {
  WorldState next = state;
  const Action a = clip_action(action);
  next.agent_pos = clamp_unit(state.agent_pos + a.delta);
  const float contact = next.agent_radius + next.block_radius;

  for (Vec2& block : next.block_pos) {
    const Vec2 d = block - next.agent_pos;
    if (norm(d) < contact) block = clamp_unit(next.agent_pos + contact * normalized(d));
  }
  // A block pinned against a wall cannot move further, so the agent yields instead.
  for (const Vec2& block : next.block_pos) {
    const Vec2 d = next.agent_pos - block;
    if (norm(d) < contact - 1e-6f) next.agent_pos = clamp_unit(block + contact * normalized(d));
  }
  ++next.step_count;
  return next;
}

Frame render(const WorldState& state, View view, int image_size) {
  constexpr std::array<std::array<std::uint8_t, 3>, 2> target_colors = {{{140, 30, 30}, {30, 140, 30}}};
  constexpr std::array<std::array<std::uint8_t, 3>, 2> block_colors = {{{255, 40, 40}, {40, 255, 40}}};
  constexpr std::array<std::uint8_t, 3> agent_color = {160, 160, 160};

  Frame f{image_size, image_size, std::vector<std::uint8_t>(3 * image_size * image_size, 0)};
  const float inv = 1.0f / static_cast<float>(image_size);
  const float br2 = state.block_radius * state.block_radius;
  const float ar2 = state.agent_radius * state.agent_radius;

  for (int row = 0; row < image_size; ++row) {
    for (int col = 0; col < image_size; ++col) {
      Vec2 p{(static_cast<float>(col) + 0.5f) * inv, 1.0f - (static_cast<float>(row) + 0.5f) * inv};
      if (view == View::side) {
        // Inverse of the side camera's skew: x' = 0.85x + 0.25(y - 0.5) + 0.075, y' = 0.9y + 0.05.
        const float wy = (p.y - 0.05f) / 0.9f;
        const float wx = (p.x - 0.075f - 0.25f * (wy - 0.5f)) / 0.85f;
        p = {wx, wy};
      }
      const std::uint8_t* color = nullptr;
      for (int k = 0; k < 2; ++k) {
        const Vec2 d = p - state.target_pos[k];
        if (std::abs(d.x) <= state.target_halfwidth && std::abs(d.y) <= state.target_halfwidth)
          color = target_colors[k].data();
      }
      for (int k = 0; k < 2; ++k) {
        const Vec2 d = p - state.block_pos[k];
        if (dot(d, d) <= br2) color = block_colors[k].data();
      }
      const Vec2 d = p - state.agent_pos;
      if (dot(d, d) <= ar2) color = agent_color.data();
      if (color != nullptr) std::copy_n(color, 3, f.pixels.begin() + 3 * (row * image_size + col));
    }
  }
  return f;
}

Action expert_action(const WorldState& state, const ExpertPlan& plan) {
  const Vec2 agent = state.agent_pos;
  const float contact = state.agent_radius + state.block_radius;
  for (const int i : plan.block_order) {
    const Vec2 block = state.block_pos[i];
    const Vec2 target = state.target_pos[plan.target_for(i)];
    if (delivered(block, target)) continue;

    const Vec2 push_dir = normalized(target - block);
    const Vec2 rel = agent - block;
    const float along = dot(rel, push_dir);
    const Vec2 lateral = rel - along * push_dir;

    Vec2 goal;
    if (along < -0.7f * contact && norm(lateral) < 0.02f) {
      goal = block - contact * push_dir + kPushSpeed * push_dir;
    } else {
      goal = block - (contact + kStagingGap) * push_dir;
      for (const Vec2& obstacle : state.block_pos) {
        if (dot(goal - agent, obstacle - agent) <= 0.0f) continue;
        if (!segment_hits_disk(agent, goal, obstacle, contact + 0.01f)) continue;
        const Vec2 v = goal - agent;
        const Vec2 perp = normalized({-v.y, v.x});
        const float side = dot(obstacle - agent, perp) >= 0.0f ? -1.0f : 1.0f;
        goal = obstacle + (side * (contact + 0.04f)) * perp;
        break;
      }
    }
    return clip_action({goal - agent});
  }
  return {};
}

bool block_in_target(const WorldState& state, int block, int target) {
  const Vec2 d = state.block_pos[block] - state.target_pos[target];
  return std::abs(d.x) <= state.target_halfwidth && std::abs(d.y) <= state.target_halfwidth;
}

double success_metric(const WorldState& state) {
  std::array<bool, 2> used = {false, false};
  int count = 0;
  for (int b = 0; b < 2; ++b) {
    for (int t = 0; t < 2; ++t) {
      if (!used[t] && block_in_target(state, b, t)) {
        used[t] = true;
        ++count;
        break;
      }
    }
  }
  return static_cast<double>(count);
}

}  // namespace dynamo

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "dynamo/demodata.hpp"

using namespace dynamo;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dynamo_demodata_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Hand-built dataset with chosen trajectory lengths (frames are tiny).
Dataset synthetic(std::vector<std::size_t> lengths, int image_size = 4) {
  Dataset d;
  d.manifest.image_size = image_size;
  d.manifest.n_trajectories = lengths.size();
  std::uint8_t counter = 0;
  for (std::size_t len : lengths) {
    Trajectory t;
    t.views = 2;
    t.height = t.width = image_size;
    for (std::size_t i = 0; i < len * 2 * image_size * image_size * 3; ++i) t.frames.push_back(counter++);
    for (std::size_t i = 0; i < len; ++i) {
      WorldState s = reset(i);
      s.step_count = static_cast<std::uint32_t>(i);
      t.states.push_back(s);
      t.actions.push_back({{0.01f * static_cast<float>(i), -0.02f}});
    }
    d.manifest.lengths.push_back(len);
    d.trajectories.push_back(std::move(t));
  }
  for (const auto& t : d.trajectories) d.manifest.checksums.push_back(fnv1a64(encode_trajectory(t)));
  return d;
}

}  // namespace

TEST_CASE("generate_demos") {
  SUBCASE("n = 0 gives an empty but valid dataset") {
    const Dataset d = generate_demos(0, 1);
    CHECK(d.trajectories.empty());
    CHECK(d.manifest.n_trajectories == 0);
    const auto dir = scratch_dir("empty");
    save_dataset(d, dir);
    const Dataset back = load_dataset(dir);
    CHECK(back.trajectories.empty());
    CHECK(back.manifest == d.manifest);
  }

  SUBCASE("alignment and expert success") {
    const Dataset d = generate_demos(8, 3);
    REQUIRE(d.trajectories.size() == 8);
    for (const auto& t : d.trajectories) {
      CHECK(t.length() >= 2);
      CHECK(t.actions.size() == t.length());
      CHECK(t.frames.size() == t.length() * 2 * 64 * 64 * 3);
      CHECK(success_metric(t.states.back()) == 2.0);
      for (std::size_t i = 0; i < t.length(); ++i) CHECK(t.states[i].step_count == i);
    }
  }

  SUBCASE("same arguments give byte-identical files") {
    const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
    save_dataset(generate_demos(8, 3), a);
    save_dataset(generate_demos(8, 3), b);
    for (const auto& name : {std::string("manifest"), trajectory_filename(0), trajectory_filename(7)})
      CHECK(slurp(a / name) == slurp(b / name));
  }
}

TEST_CASE("save/load") {
  const Dataset d = synthetic({3, 5, 2});
  const auto dir = scratch_dir("roundtrip");
  save_dataset(d, dir);

  SUBCASE("roundtrip is bit-exact") {
    const Dataset back = load_dataset(dir);
    CHECK(back.manifest == d.manifest);
    CHECK(back.trajectories == d.trajectories);
  }

  SUBCASE("corrupted payload is a checksum error") {
    auto bytes = slurp(dir / trajectory_filename(1));
    bytes[100] ^= 0xff;
    std::ofstream(dir / trajectory_filename(1), std::ios::binary | std::ios::trunc)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    try {
      load_dataset(dir);
      FAIL("expected checksum error");
    } catch (const DataError& e) {
      CHECK(e.code() == DataErrorCode::checksum);
    }
  }

  SUBCASE("truncated file") {
    auto bytes = slurp(dir / trajectory_filename(0));
    bytes.resize(bytes.size() / 2);
    try {
      decode_trajectory(bytes);
      FAIL("expected truncation error");
    } catch (const DataError& e) {
      CHECK(e.code() == DataErrorCode::truncated);
    }
  }

  SUBCASE("version mismatch") {
    auto bytes = encode_trajectory(d.trajectories[0]);
    bytes[8] = 99;
    try {
      decode_trajectory(bytes);
      FAIL("expected version error");
    } catch (const DataError& e) {
      CHECK(e.code() == DataErrorCode::version_mismatch);
    }
  }

  SUBCASE("missing trajectory file") {
    std::filesystem::remove(dir / trajectory_filename(2));
    CHECK_THROWS_AS(load_dataset(dir), DataError);
  }
}

TEST_CASE("window sampling") {
  SUBCASE("h = 2 on a T = 2 trajectory has exactly one window") {
    const Dataset d = synthetic({2});
    const WindowIndex idx(UnlabeledView(d), 2);
    CHECK(idx.size() == 1);
    CHECK(idx[0] == WindowRef{0, 0});
  }

  SUBCASE("context longer than every trajectory") {
    const Dataset d = synthetic({3, 4});
    try {
      sample_sequences(UnlabeledView(d), 5, 4, 0);
      FAIL("expected error");
    } catch (const DataError& e) {
      CHECK(e.code() == DataErrorCode::context_exceeds_data);
      CHECK(std::string(e.what()) == "context exceeds data");
    }
  }

  SUBCASE("h = 1 rejected") { CHECK_THROWS(WindowIndex(UnlabeledView(synthetic({3})), 1)); }

  SUBCASE("fixed seed gives identical sources") {
    const Dataset d = synthetic({6, 9, 4});
    const auto a = sample_sequences(UnlabeledView(d), 3, 32, 17);
    const auto b = sample_sequences(UnlabeledView(d), 3, 32, 17);
    CHECK(a.sources == b.sources);
    CHECK(a.frames == b.frames);
  }

  SUBCASE("unlabeled batches carry no labels, labeled ones do") {
    const Dataset d = synthetic({6, 9});
    const auto u = sample_sequences(UnlabeledView(d), 3, 8, 1);
    CHECK_FALSE(u.states.has_value());
    CHECK_FALSE(u.actions.has_value());
    const auto l = sample_sequences(LabeledView(d), 3, 8, 1);
    REQUIRE(l.states.has_value());
    REQUIRE(l.actions.has_value());
    CHECK(l.states->size() == 8u * 3u);
    for (int b = 0; b < 8; ++b) {
      const auto& tr = d.trajectories[l.sources[b].trajectory];
      for (int t = 0; t < 3; ++t) {
        CHECK((*l.states)[b * 3 + t] == tr.states[l.sources[b].offset + t]);
        CHECK((*l.actions)[b * 3 + t] == tr.actions[l.sources[b].offset + t]);
      }
    }
  }

  SUBCASE("windows never cross trajectory boundaries (random datasets)") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<std::size_t> lengths;
      const int n = 1 + static_cast<int>(rng() % 6);
      for (int i = 0; i < n; ++i) lengths.push_back(2 + rng() % 10);
      const Dataset d = synthetic(lengths, 2);
      const int h = 2 + static_cast<int>(rng() % 4);
      if (static_cast<std::size_t>(h) > d.max_length()) continue;
      const auto batch = sample_sequences(UnlabeledView(d), h, 64, rng());
      std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
      for (const auto& w : batch.sources) {
        CHECK(w.offset + h <= d.trajectories[w.trajectory].length());
        seen.insert({w.trajectory, w.offset});
      }
      // Frames of each window come from the stated trajectory.
      const std::size_t fb = 2 * 2 * 3;
      for (int b = 0; b < batch.batch; ++b) {
        const auto& w = batch.sources[b];
        for (int t = 0; t < h; ++t)
          for (int v = 0; v < 2; ++v) {
            auto src = d.trajectories[w.trajectory].frame(w.offset + t, v);
            CHECK(std::equal(src.begin(), src.end(),
                             batch.frames.begin() + static_cast<std::ptrdiff_t>(((b * h + t) * 2 + v) * fb)));
          }
      }
    }
  }

  SUBCASE("uniform over all valid windows") {
    const Dataset d = synthetic({3, 12});
    const WindowIndex idx(UnlabeledView(d), 3);
    CHECK(idx.size() == 1 + 10);
    std::mt19937_64 rng(0);
    const auto w = idx.draw(22000, rng);
    std::size_t first = 0;
    for (const auto& r : w) first += r.trajectory == 0;
    // Trajectory 0 holds 1 of 11 windows.
    CHECK(static_cast<double>(first) / w.size() == doctest::Approx(1.0 / 11.0).epsilon(0.1));
  }
}

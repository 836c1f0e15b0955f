#pragma once

#include <filesystem>
#include <fstream>

#include "dynamo/demodata.hpp"
#include "dynamo/trainer.hpp"

namespace fixtures {

/// Small expert dataset at 16x16 pixels, generated once per process.
inline const dynamo::Dataset& tiny_dataset() {
  static const dynamo::Dataset d = dynamo::generate_demos(6, 11, dynamo::kEpisodeCap, 16);
  return d;
}

inline dynamo::TrainConfig tiny_config() {
  dynamo::TrainConfig c;
  c.image_size = 16;
  c.d = 16;
  c.m = 4;
  c.width = 16;
  c.heads = 2;
  c.layers = 1;
  c.batch = 8;
  c.epochs = 2;
  c.warmup_epochs = 0.5;
  c.lr = 1e-3;
  return c;
}

inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dynamo_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fixtures

#pragma once

// Static PNG figures for the probe and report commands.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dynamo/probes.hpp"

namespace dynamo::plots {

using Rgb = std::array<std::uint8_t, 3>;

struct Canvas {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  Canvas(int w, int h, Rgb fill = {255, 255, 255});
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);
  /// Blits an HxWx3 image with its top-left corner at (x, y), scaled by `scale`.
  void blit(const std::uint8_t* rgb, int w, int h, int x, int y, int scale = 1);
};

void write_png(const Canvas& canvas, const std::filesystem::path& path);

/// One row per query: the query frame (red frame) followed by its neighbors.
void retrieval_montage(const EmbeddingBank& bank, const Dataset& data, const std::vector<std::size_t>& queries,
                       int neighbors, const std::filesystem::path& path);

/// Grouped vertical bars on a [lo, hi] axis with gridlines every `grid`.
/// groups[g][s] is series s of group g.
void bar_chart(const std::vector<std::vector<double>>& groups, double lo, double hi, double grid,
               const std::filesystem::path& path);

}  // namespace dynamo::plots

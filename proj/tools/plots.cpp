#include "plots.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace dynamo::plots {

namespace {

constexpr std::array<Rgb, 4> kPalette = {Rgb{31, 119, 180}, Rgb{255, 127, 14}, Rgb{44, 160, 44}, Rgb{214, 39, 40}};

}  // namespace

Canvas::Canvas(int w, int h, Rgb fill) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
  fill_rect(0, 0, w, h, fill);
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
  x0 = std::clamp(x0, 0, width);
  x1 = std::clamp(x1, 0, width);
  y0 = std::clamp(y0, 0, height);
  y1 = std::clamp(y1, 0, height);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) std::copy(c.begin(), c.end(), pixels.begin() + 3 * (y * width + x));
}

void Canvas::blit(const std::uint8_t* rgb, int w, int h, int x, int y, int scale) {
  for (int r = 0; r < h * scale; ++r)
    for (int c = 0; c < w * scale; ++c) {
      const int px = x + c, py = y + r;
      if (px < 0 || py < 0 || px >= width || py >= height) continue;
      const std::uint8_t* src = rgb + 3 * ((r / scale) * w + c / scale);
      std::copy(src, src + 3, pixels.begin() + 3 * (py * width + px));
    }
}

void write_png(const Canvas& canvas, const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw std::runtime_error("libpng failed on " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(canvas.width), static_cast<png_uint_32>(canvas.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < canvas.height; ++y)
    png_write_row(png, const_cast<png_bytep>(canvas.pixels.data() + static_cast<std::size_t>(y) * canvas.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

void retrieval_montage(const EmbeddingBank& bank, const Dataset& data, const std::vector<std::size_t>& queries,
                       int neighbors, const std::filesystem::path& path) {
  const int S = data.manifest.image_size;
  const int pad = 4, cell = S + 2 * pad;
  Canvas canvas(cell * (neighbors + 1), cell * static_cast<int>(queries.size()));
  auto draw = [&](std::size_t row, int col, std::size_t bank_row, bool highlight) {
    const auto src = bank.sources[bank_row];
    const int x = col * cell, y = static_cast<int>(row) * cell;
    if (highlight) canvas.fill_rect(x + 1, y + 1, x + cell - 1, y + cell - 1, {220, 30, 30});
    canvas.blit(data.trajectories[src.trajectory].frame(src.t, 0).data(), S, S, x + pad, y + pad);
  };
  for (std::size_t r = 0; r < queries.size(); ++r) {
    draw(r, 0, queries[r], true);
    const auto nn = nn_retrieve(bank, queries[r], neighbors);
    for (int j = 0; j < neighbors; ++j) draw(r, j + 1, nn[static_cast<std::size_t>(j)], false);
  }
  write_png(canvas, path);
}

void bar_chart(const std::vector<std::vector<double>>& groups, double lo, double hi, double grid,
               const std::filesystem::path& path) {
  const int bar = 14, gap = 18, margin = 20, plot_h = 240;
  std::size_t series = 1;
  for (const auto& g : groups) series = std::max(series, g.size());
  const int group_w = static_cast<int>(series) * bar + gap;
  Canvas canvas(2 * margin + static_cast<int>(groups.size()) * group_w, plot_h + 2 * margin);
  auto y_of = [&](double v) {
    const double t = (std::clamp(v, lo, hi) - lo) / (hi - lo);
    return margin + static_cast<int>(std::lround((1.0 - t) * plot_h));
  };
  for (double v = lo; v <= hi + 1e-12; v += grid) {
    const int y = y_of(v);
    canvas.fill_rect(margin, y, canvas.width - margin, y + 1, {210, 210, 210});
  }
  const int base = y_of(std::clamp(0.0, lo, hi));
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (std::size_t s = 0; s < groups[g].size(); ++s) {
      const int x = margin + gap / 2 + static_cast<int>(g) * group_w + static_cast<int>(s) * bar;
      const int y = y_of(groups[g][s]);
      canvas.fill_rect(x, std::min(y, base), x + bar - 2, std::max(y, base) + 1, kPalette[s % kPalette.size()]);
    }
  canvas.fill_rect(margin, base, canvas.width - margin, base + 1, {0, 0, 0});
  write_png(canvas, path);
}

}  // namespace dynamo::plots

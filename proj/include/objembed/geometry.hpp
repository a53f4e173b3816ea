#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "objembed/error.hpp"

namespace objembed {

/// Axis-aligned box in continuous feature-grid coordinates, corner form.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box clamp_box(Box b, double width, double height) {
  b.x1 = std::clamp(b.x1, 0.0, width);
  b.x2 = std::clamp(b.x2, 0.0, width);
  b.y1 = std::clamp(b.y1, 0.0, height);
  b.y2 = std::clamp(b.y2, 0.0, height);
  return b;
}

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// Dense |a| x |b| IoU table, row-major.
struct IouMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline IouMatrix pairwise_iou(std::span<const Box> a, std::span<const Box> b) {
  IouMatrix m{a.size(), b.size(), std::vector<double>(a.size() * b.size())};
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m.data[i * b.size() + j] = iou(a[i], b[j]);
  return m;
}

enum class AreaBucket { small, medium, large };

inline AreaBucket area_bucket(const Box& b) {
  const double area = b.area();
  if (area < 32.0 * 32.0) return AreaBucket::small;
  if (area < 96.0 * 96.0) return AreaBucket::medium;
  return AreaBucket::large;
}

inline const char* to_string(AreaBucket bucket) {
  switch (bucket) {
    case AreaBucket::small: return "small";
    case AreaBucket::medium: return "medium";
    case AreaBucket::large: return "large";
  }
  return "?";
}

/// Row-major W x H x C feature map. Cell (x, y) spans [x, x+1) x [y, y+1); its
/// value is located at the cell center (x + 0.5, y + 0.5).
struct FeatureGrid {
  int width = 0, height = 0, channels = 0;
  std::vector<float> data;

  FeatureGrid() = default;
  FeatureGrid(int w, int h, int c) : width(w), height(h), channels(c), data(std::size_t(w) * h * c, 0.0f) {}

  float& at(int x, int y, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }
  std::span<const float> cell(int x, int y) const {
    return {data.data() + (std::size_t(y) * width + x) * channels, std::size_t(channels)};
  }
};

/// Bilinear sample at continuous point (px, py); out-of-range neighbours clamp
/// to the border cell.
inline void bilinear_sample(const FeatureGrid& grid, double px, double py, std::span<double> out) {
  const double gx = px - 0.5, gy = py - 0.5;
  const double fx = std::floor(gx), fy = std::floor(gy);
  const double wx = gx - fx, wy = gy - fy;
  auto clampi = [](double v, int hi) { return std::clamp(static_cast<int>(v), 0, hi - 1); };
  const int x0 = clampi(fx, grid.width), x1 = clampi(fx + 1, grid.width);
  const int y0 = clampi(fy, grid.height), y1 = clampi(fy + 1, grid.height);
  for (int c = 0; c < grid.channels; ++c) {
    const double top = (1 - wx) * grid.at(x0, y0, c) + wx * grid.at(x1, y0, c);
    const double bot = (1 - wx) * grid.at(x0, y1, c) + wx * grid.at(x1, y1, c);
    out[c] = (1 - wy) * top + wy * bot;
  }
}

/// Simplified RoIAlign: one bilinear sample at the center of each of the
/// S x S bins. Output is bin-major (row of bins, then column), channels inner.
inline std::vector<double> roi_pool(const FeatureGrid& grid, const Box& box, int resolution) {
  if (resolution < 1) throw Error("roi resolution must be >= 1");
  constexpr double tol = 1e-9;
  if (!box.valid() || box.x1 < -tol || box.y1 < -tol || box.x2 > grid.width + tol || box.y2 > grid.height + tol)
    throw Error("box out of bounds");
  std::vector<double> out(std::size_t(resolution) * resolution * grid.channels);
  const double bw = box.width() / resolution, bh = box.height() / resolution;
  for (int by = 0; by < resolution; ++by) {
    for (int bx = 0; bx < resolution; ++bx) {
      const double px = box.x1 + (bx + 0.5) * bw;
      const double py = box.y1 + (by + 0.5) * bh;
      bilinear_sample(grid, px, py,
                      std::span<double>(out).subspan((std::size_t(by) * resolution + bx) * grid.channels,
                                                     grid.channels));
    }
  }
  return out;
}

/// Greedy NMS. Returns kept indices in descending score order (ties by index).
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores, double threshold) {
  if (boxes.size() != scores.size()) throw Error("nms: boxes and scores differ in length");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    bool keep = true;
    for (std::size_t k : kept) {
      if (iou(boxes[idx], boxes[k]) > threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(idx);
  }
  return kept;
}

}  // namespace objembed

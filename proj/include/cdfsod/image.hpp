#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdfsod {

// Axis-aligned box, normalized corner coordinates in [0,1], x1<x2, y1<y2.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const {
    return x1 < x2 && y1 < y2 && x1 >= 0 && y1 >= 0 && x2 <= 1 && y2 <= 1;
  }
};

// Dense RGB raster, channel-major (CHW), values in [0,1].
struct Image {
  int h = 0, w = 0;
  std::vector<double> px;

  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : h(height), w(width), px(size_t(3) * height * width, fill) {}

  double& at(int c, int y, int x) { return px[(size_t(c) * h + y) * w + x]; }
  double at(int c, int y, int x) const { return px[(size_t(c) * h + y) * w + x]; }

  void clamp01() {
    for (double& v : px) v = std::clamp(v, 0.0, 1.0);
  }
};

inline Image flip_horizontal(const Image& img) {
  Image out(img.h, img.w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(c, y, x) = img.at(c, y, img.w - 1 - x);
  return out;
}

inline Box flip_box_horizontal(const Box& b) { return Box{1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2}; }

// Intersection-over-union of two boxes, exact and symmetric.
inline double iou_boxes(const Box& a, const Box& b) {
  double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  double inter = ix * iy;
  double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Mean pixel saturation (max-min channel spread), used for domain statistics.
inline double mean_saturation(const Image& img) {
  double acc = 0;
  int n = img.h * img.w;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
      acc += std::max({r, g, b}) - std::min({r, g, b});
    }
  return acc / n;
}

// ---- PPM (binary P6, 8-bit) ----

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<uint8_t> row(size_t(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        row[size_t(x) * 3 + c] = uint8_t(std::lround(v * 255.0));
      }
    f.write(reinterpret_cast<const char*>(row.data()), row.size());
  }
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("not a binary PPM (P6): " + path);
  int w, h, maxval;
  f >> w >> h >> maxval;
  f.get();  // single whitespace after header
  if (maxval != 255) throw std::runtime_error("unsupported PPM maxval in " + path);
  Image img(h, w);
  std::vector<uint8_t> row(size_t(w) * 3);
  for (int y = 0; y < h; ++y) {
    f.read(reinterpret_cast<char*>(row.data()), row.size());
    if (!f) throw std::runtime_error("truncated PPM: " + path);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[size_t(x) * 3 + c] / 255.0;
  }
  return img;
}

// Draws a 1px box outline (normalized coords) in the given color.
inline void draw_box_outline(Image& img, const Box& b, const std::array<double, 3>& color) {
  int x1 = std::clamp(int(b.x1 * img.w), 0, img.w - 1);
  int x2 = std::clamp(int(b.x2 * img.w), 0, img.w - 1);
  int y1 = std::clamp(int(b.y1 * img.h), 0, img.h - 1);
  int y2 = std::clamp(int(b.y2 * img.h), 0, img.h - 1);
  for (int x = x1; x <= x2; ++x)
    for (int c = 0; c < 3; ++c) {
      img.at(c, y1, x) = color[c];
      img.at(c, y2, x) = color[c];
    }
  for (int y = y1; y <= y2; ++y)
    for (int c = 0; c < 3; ++c) {
      img.at(c, y, x1) = color[c];
      img.at(c, y, x2) = color[c];
    }
}

}  // namespace cdfsod

#pragma once

// Weak and strong augmentation. Weak is a horizontal flip (p=0.5); strong
// stacks photometric corruption on top: color jitter, grayscale, Gaussian
// blur and cutout. A pair shares one flip decision so boxes predicted on the
// weak view are valid targets for the strong view without remapping.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cdfsod/image.hpp"
#include "cdfsod/rng.hpp"

namespace cdfsod {

struct AugmentedPair {
  Image weak_view;
  Image strong_view;
  bool shared_flip = false;
  std::vector<Box> boxes_in_view;
};

inline void weak_augment(const Image& img, const std::vector<Box>& boxes, Rng& rng,
                         Image& out_img, std::vector<Box>& out_boxes, bool& flipped) {
  flipped = rng.coin(0.5);
  if (flipped) {
    out_img = flip_horizontal(img);
    out_boxes.clear();
    for (const Box& b : boxes) out_boxes.push_back(flip_box_horizontal(b));
  } else {
    out_img = img;
    out_boxes = boxes;
  }
}

namespace detail {

inline void color_jitter(Image& img, Rng& rng) {
  double brightness = rng.uniform(0.7, 1.35);
  double contrast = rng.uniform(0.7, 1.3);
  double saturation = rng.uniform(0.7, 1.3);
  double mean = 0;
  for (double v : img.px) mean += v;
  mean /= double(img.px.size());
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
      double gray = (r + g + b) / 3.0;
      double ch[3] = {r, g, b};
      for (int c = 0; c < 3; ++c) {
        double v = gray + (ch[c] - gray) * saturation;  // saturation about pixel gray
        v = mean + (v - mean) * contrast;               // contrast about image mean
        img.at(c, y, x) = v * brightness;
      }
    }
}

inline void grayscale(Image& img) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double g = (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = g;
    }
}

inline void gaussian_blur(Image& img, double sigma) {
  int radius = std::max(1, int(std::ceil(2.0 * sigma)));
  std::vector<double> kernel(size_t(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[size_t(i + radius)];
  }
  for (double& k : kernel) k /= sum;
  Image tmp = img;
  for (int c = 0; c < 3; ++c)  // horizontal pass
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double s = 0;
        for (int i = -radius; i <= radius; ++i)
          s += kernel[size_t(i + radius)] * img.at(c, y, std::clamp(x + i, 0, img.w - 1));
        tmp.at(c, y, x) = s;
      }
  for (int c = 0; c < 3; ++c)  // vertical pass
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double s = 0;
        for (int i = -radius; i <= radius; ++i)
          s += kernel[size_t(i + radius)] * tmp.at(c, std::clamp(y + i, 0, img.h - 1), x);
        img.at(c, y, x) = s;
      }
}

inline void cutout(Image& img, Rng& rng) {
  int n = rng.uniform_int(1, 2);
  for (int i = 0; i < n; ++i) {
    double frac = rng.uniform(0.01, 0.04);  // fraction of image area
    double aspect = rng.uniform(0.6, 1.6);
    int area = int(frac * img.h * img.w);
    int rw = std::max(1, std::min(img.w, int(std::sqrt(area * aspect))));
    int rh = std::max(1, std::min(img.h, area / std::max(1, rw)));
    int x0 = rng.uniform_int(0, img.w - rw);
    int y0 = rng.uniform_int(0, img.h - rh);
    for (int y = y0; y < y0 + rh; ++y)
      for (int x = x0; x < x0 + rw; ++x)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = 0.5;
  }
}

}  // namespace detail

// Photometric corruption only; never moves pixels geometrically. Strengths
// are tuned so small objects stay visible: the consistency task has to be
// solvable or it degrades the student instead of regularizing it.
inline Image strong_augment(const Image& img, Rng& rng) {
  Image out = img;
  if (rng.coin(0.8)) detail::color_jitter(out, rng);
  if (rng.coin(0.1)) detail::grayscale(out);
  if (rng.coin(0.5)) detail::gaussian_blur(out, rng.uniform(0.1, 0.9));
  if (rng.coin(0.3)) detail::cutout(out, rng);
  out.clamp01();
  return out;
}

inline AugmentedPair make_pair(const Image& img, const std::vector<Box>& boxes, Rng& rng) {
  AugmentedPair pair;
  weak_augment(img, boxes, rng, pair.weak_view, pair.boxes_in_view, pair.shared_flip);
  pair.strong_view = strong_augment(pair.weak_view, rng);
  return pair;
}

}  // namespace cdfsod

#pragma once

// Synthetic cross-domain detection benchmark. One base domain plus three
// target domains of decreasing similarity:
//   base               12 classes, natural style
//   target_finegrained  6 classes told apart by small features (star point
//                       count, ring count)
//   target_lowcontrast   3 classes under a blue-green tint, blur and noise
//   target_topdown       8 classes at uniform small scale in grid layouts
//
// Base and target class name sets are disjoint. Target images may contain
// small unannotated clutter marks. Generation is a pure function of
// (spec, n_images, split, seed).

#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdfsod/image.hpp"
#include "cdfsod/rng.hpp"

namespace cdfsod {

enum class ShapeKind {
  disk,
  box,
  tri_up,
  tri_down,
  diamond,
  plus,
  cross_x,
  frame,
  checker,
  stripes,
  star,     // param = point count
  rings,    // param = ring count
  urchin,
  pebble,
  scallop,
};

enum class Style { natural, fine_grained, low_contrast, top_down };

struct ClassDef {
  std::string name;
  ShapeKind shape;
  int shape_param = 0;
  std::array<double, 3> color{0.5, 0.5, 0.5};
  double size_lo = 0.15, size_hi = 0.35;    // box side, fraction of image
  double aspect_lo = 1.0, aspect_hi = 1.0;  // width/height of the box
};

struct DomainSpec {
  std::string name;
  Style style = Style::natural;
  std::vector<ClassDef> class_defs;
  std::array<double, 3> bg_a{0.5, 0.5, 0.5};  // gradient endpoints
  std::array<double, 3> bg_b{0.5, 0.5, 0.5};
  double bg_wobble = 0.08;   // random shift applied to both endpoints
  double noise_sigma = 0.015;
  double tint_strength = 0.0;  // pull toward the blue-green tint color
  double gain_range = 0.0;   // per-image brightness multiplier, U(1 +/- range)
  double cast_range = 0.0;   // per-image additive color cast, U(+/- range) per channel
  bool blur = false;
  int clutter_max = 0;  // unannotated distractor marks per image
  bool grid_layout = false;
};

struct LabeledImage {
  Image image;
  std::vector<Box> boxes;
  std::vector<int> classes;
};

struct SupportSet {
  std::vector<LabeledImage> items;
  int k = 0;
  std::string source_domain;
};

inline std::vector<DomainSpec> builtin_domains() {
  std::vector<DomainSpec> out;

  DomainSpec base;
  base.name = "base";
  base.style = Style::natural;
  base.bg_a = {0.75, 0.72, 0.62};
  base.bg_b = {0.55, 0.62, 0.70};
  auto bc = [](std::string name, ShapeKind s, std::array<double, 3> col, double lo, double hi,
               double alo = 0.85, double ahi = 1.2) {
    ClassDef d;
    d.name = std::move(name);
    d.shape = s;
    d.color = col;
    d.size_lo = lo;
    d.size_hi = hi;
    d.aspect_lo = alo;
    d.aspect_hi = ahi;
    return d;
  };
  base.class_defs = {
      bc("disk", ShapeKind::disk, {0.85, 0.25, 0.20}, 0.16, 0.38),
      bc("box", ShapeKind::box, {0.20, 0.45, 0.85}, 0.14, 0.34),
      bc("tri_up", ShapeKind::tri_up, {0.25, 0.70, 0.30}, 0.16, 0.38),
      bc("tri_down", ShapeKind::tri_down, {0.90, 0.65, 0.15}, 0.16, 0.38),
      bc("diamond", ShapeKind::diamond, {0.60, 0.25, 0.75}, 0.16, 0.38),
      bc("plus", ShapeKind::plus, {0.85, 0.40, 0.60}, 0.16, 0.36),
      bc("cross", ShapeKind::cross_x, {0.30, 0.70, 0.70}, 0.16, 0.36),
      bc("hbar", ShapeKind::box, {0.55, 0.40, 0.20}, 0.16, 0.30, 1.6, 2.0),
      bc("vbar", ShapeKind::box, {0.25, 0.30, 0.55}, 0.16, 0.30, 0.5, 0.65),
      bc("frame", ShapeKind::frame, {0.90, 0.85, 0.25}, 0.18, 0.38),
      bc("checker", ShapeKind::checker, {0.15, 0.15, 0.20}, 0.16, 0.34),
      bc("stripes", ShapeKind::stripes, {0.95, 0.50, 0.25}, 0.16, 0.34),
  };
  out.push_back(base);

  DomainSpec fg;
  fg.name = "target_finegrained";
  fg.style = Style::fine_grained;
  fg.bg_a = {0.72, 0.70, 0.58};
  fg.bg_b = {0.52, 0.60, 0.66};
  fg.clutter_max = 2;
  fg.class_defs = {
      bc("star_4", ShapeKind::star, {0.88, 0.30, 0.25}, 0.20, 0.38),
      bc("star_5", ShapeKind::star, {0.88, 0.30, 0.25}, 0.20, 0.38),
      bc("star_6", ShapeKind::star, {0.88, 0.30, 0.25}, 0.20, 0.38),
      bc("ring_1", ShapeKind::rings, {0.25, 0.45, 0.80}, 0.20, 0.38),
      bc("ring_2", ShapeKind::rings, {0.25, 0.45, 0.80}, 0.20, 0.38),
      bc("ring_3", ShapeKind::rings, {0.25, 0.45, 0.80}, 0.20, 0.38),
  };
  fg.class_defs[0].shape_param = 4;
  fg.class_defs[1].shape_param = 5;
  fg.class_defs[2].shape_param = 6;
  fg.class_defs[3].shape_param = 1;
  fg.class_defs[4].shape_param = 2;
  fg.class_defs[5].shape_param = 3;
  out.push_back(fg);

  DomainSpec lc;
  lc.name = "target_lowcontrast";
  lc.style = Style::low_contrast;
  lc.bg_a = {0.34, 0.40, 0.42};
  lc.bg_b = {0.28, 0.33, 0.36};
  lc.tint_strength = 0.55;
  lc.blur = true;
  lc.noise_sigma = 0.03;
  lc.clutter_max = 3;
  lc.class_defs = {
      bc("urchin", ShapeKind::urchin, {0.12, 0.17, 0.20}, 0.16, 0.36),
      bc("pebble", ShapeKind::pebble, {0.53, 0.52, 0.47}, 0.16, 0.36),
      bc("scallop", ShapeKind::scallop, {0.64, 0.61, 0.54}, 0.16, 0.36),
  };
  out.push_back(lc);

  DomainSpec td;
  td.name = "target_topdown";
  td.style = Style::top_down;
  td.bg_a = {0.24, 0.27, 0.22};
  td.bg_b = {0.20, 0.22, 0.19};
  td.noise_sigma = 0.02;
  td.gain_range = 0.22;  // overhead captures vary in exposure between passes
  td.cast_range = 0.06;
  td.clutter_max = 3;
  td.grid_layout = true;
  td.class_defs = {
      bc("building", ShapeKind::box, {0.62, 0.58, 0.55}, 0.13, 0.17, 0.9, 1.1),
      bc("vehicle", ShapeKind::box, {0.80, 0.75, 0.20}, 0.12, 0.15, 1.7, 2.0),
      bc("tank", ShapeKind::disk, {0.78, 0.78, 0.80}, 0.13, 0.17),
      bc("court", ShapeKind::frame, {0.30, 0.60, 0.40}, 0.14, 0.18, 1.3, 1.6),
      bc("ship", ShapeKind::diamond, {0.85, 0.85, 0.88}, 0.13, 0.17, 0.5, 0.65),
      bc("plane", ShapeKind::plus, {0.88, 0.88, 0.90}, 0.13, 0.17),
      bc("bridge", ShapeKind::box, {0.48, 0.44, 0.40}, 0.13, 0.16, 2.2, 2.6),
      bc("pool", ShapeKind::pebble, {0.25, 0.55, 0.80}, 0.12, 0.16, 1.2, 1.5),
  };
  out.push_back(td);

  return out;
}

inline const DomainSpec& find_domain(const std::vector<DomainSpec>& domains,
                                     const std::string& name) {
  for (const auto& d : domains)
    if (d.name == name) return d;
  std::string known;
  for (const auto& d : domains) known += (known.empty() ? "" : ", ") + d.name;
  throw std::invalid_argument("unknown domain '" + name + "' (known: " + known + ")");
}

namespace detail {

// Implicit shape test in box-local coordinates u,v in [-1,1].
inline bool shape_inside(ShapeKind kind, int param, double u, double v) {
  double r = std::sqrt(u * u + v * v);
  switch (kind) {
    case ShapeKind::disk:
      return r <= 1.0;
    case ShapeKind::box:
      return true;
    case ShapeKind::tri_up:
      return std::abs(u) <= (v + 1.0) * 0.5;
    case ShapeKind::tri_down:
      return std::abs(u) <= (1.0 - v) * 0.5;
    case ShapeKind::diamond:
      return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeKind::plus:
      return std::abs(u) <= 0.34 || std::abs(v) <= 0.34;
    case ShapeKind::cross_x:
      return std::abs(u - v) <= 0.52 || std::abs(u + v) <= 0.52;
    case ShapeKind::frame:
      return std::max(std::abs(u), std::abs(v)) >= 0.55;
    case ShapeKind::checker: {
      int bu = int(std::floor((u + 1.0) * 1.999));
      int bv = int(std::floor((v + 1.0) * 1.999));
      return (bu + bv) % 2 == 0;
    }
    case ShapeKind::stripes: {
      int band = int(std::floor((v + 1.0) * 2.499));
      return band % 2 == 0;
    }
    case ShapeKind::star: {
      double th = std::atan2(v, u);
      return r <= 0.55 + 0.45 * std::cos(param * th);
    }
    case ShapeKind::rings:
      return r <= 1.0 && std::cos(2.0 * 3.14159265358979323846 * param * (1.0 - r)) >= -0.2;
    case ShapeKind::urchin: {
      double th = std::atan2(v, u);
      double c = std::cos(7.0 * th);
      return r <= 0.55 + 0.45 * std::pow(std::abs(c), 6.0);
    }
    case ShapeKind::pebble:
      return u * u * u * u + v * v * v * v <= 1.0;
    case ShapeKind::scallop: {
      double th = std::atan2(v, u);
      return r <= 0.8 + 0.2 * std::cos(9.0 * th);
    }
  }
  return false;
}

inline void fill_shape(Image& img, const Box& b, ShapeKind kind, int param,
                       const std::array<double, 3>& color) {
  int x0 = std::max(0, int(std::floor(b.x1 * img.w)));
  int x1 = std::min(img.w - 1, int(std::ceil(b.x2 * img.w)));
  int y0 = std::max(0, int(std::floor(b.y1 * img.h)));
  int y1 = std::min(img.h - 1, int(std::ceil(b.y2 * img.h)));
  double cx = (b.x1 + b.x2) * 0.5, cy = (b.y1 + b.y2) * 0.5;
  double hw = (b.x2 - b.x1) * 0.5, hh = (b.y2 - b.y1) * 0.5;
  for (int y = y0; y <= y1; ++y) {
    double py = (y + 0.5) / img.h;
    double v = (py - cy) / hh;
    if (std::abs(v) > 1.0) continue;
    for (int x = x0; x <= x1; ++x) {
      double px = (x + 0.5) / img.w;
      double u = (px - cx) / hw;
      if (std::abs(u) > 1.0) continue;
      if (!shape_inside(kind, param, u, v)) continue;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c];
    }
  }
}

inline void box_blur3(Image& img) {
  Image src = img;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double s = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) continue;
            s += src.at(c, yy, xx);
            ++n;
          }
        img.at(c, y, x) = s / n;
      }
}

}  // namespace detail

inline LabeledImage render_image(const DomainSpec& spec, Rng& rng, int size = 64) {
  LabeledImage out;
  out.image = Image(size, size);
  Image& img = out.image;

  std::array<double, 3> a = spec.bg_a, b = spec.bg_b;
  double wob = rng.uniform(-spec.bg_wobble, spec.bg_wobble);
  for (int c = 0; c < 3; ++c) {
    a[c] = std::clamp(a[c] + wob + rng.uniform(-0.03, 0.03), 0.0, 1.0);
    b[c] = std::clamp(b[c] + wob + rng.uniform(-0.03, 0.03), 0.0, 1.0);
  }
  for (int y = 0; y < size; ++y) {
    double t = double(y) / (size - 1);
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = a[c] * (1 - t) + b[c] * t;
  }

  int n_obj = rng.uniform_int(1, 6);
  std::vector<int> slots;
  if (spec.grid_layout) {
    slots.resize(16);
    for (int i = 0; i < 16; ++i) slots[i] = i;
    for (int i = 15; i > 0; --i) std::swap(slots[i], slots[rng.uniform_int(0, i)]);
  }
  struct Placed {
    Box box;
    int cls;
  };
  std::vector<Placed> placed;
  for (int i = 0; i < n_obj; ++i) {
    int cls = rng.uniform_int(0, int(spec.class_defs.size()) - 1);
    const ClassDef& cd = spec.class_defs[cls];
    bool ok = false;
    Box bx;
    for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
      double s = rng.uniform(cd.size_lo, cd.size_hi);
      double aspect = rng.uniform(cd.aspect_lo, cd.aspect_hi);
      double w = std::min(s * std::sqrt(aspect), 0.60);
      double h = std::min(s / std::sqrt(aspect), 0.60);
      double cx, cy;
      if (spec.grid_layout) {
        int slot = slots[size_t(i * 40 + attempt) % 16];
        cx = (slot % 4 + 0.5) / 4.0 + rng.uniform(-0.03, 0.03);
        cy = (slot / 4 + 0.5) / 4.0 + rng.uniform(-0.03, 0.03);
        cx = std::clamp(cx, w / 2 + 0.01, 1.0 - w / 2 - 0.01);
        cy = std::clamp(cy, h / 2 + 0.01, 1.0 - h / 2 - 0.01);
      } else {
        cx = rng.uniform(w / 2 + 0.01, 1.0 - w / 2 - 0.01);
        cy = rng.uniform(h / 2 + 0.01, 1.0 - h / 2 - 0.01);
      }
      bx = Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
      ok = true;
      for (const Placed& p : placed)
        if (iou_boxes(bx, p.box) > 0.2) {
          ok = false;
          break;
        }
    }
    if (!ok && !placed.empty()) continue;
    placed.push_back(Placed{bx, cls});
  }

  for (const Placed& p : placed) {
    const ClassDef& cd = spec.class_defs[p.cls];
    std::array<double, 3> col = cd.color;
    for (double& c : col) c = std::clamp(c + rng.uniform(-0.08, 0.08), 0.0, 1.0);
    detail::fill_shape(img, p.box, cd.shape, cd.shape_param, col);
    out.boxes.push_back(p.box);
    out.classes.push_back(p.cls);
  }

  if (spec.clutter_max > 0) {
    int n_clutter = rng.uniform_int(0, spec.clutter_max);
    for (int i = 0; i < n_clutter; ++i) {
      double s = rng.uniform(0.04, 0.08);
      double cx = rng.uniform(s / 2 + 0.01, 1.0 - s / 2 - 0.01);
      double cy = rng.uniform(s / 2 + 0.01, 1.0 - s / 2 - 0.01);
      double g = rng.uniform(0.30, 0.55);
      std::array<double, 3> col{g, g, g};
      if (spec.style == Style::low_contrast) col = {g * 0.85, g * 0.95, g};
      detail::fill_shape(img, Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2},
                         rng.coin(0.5) ? ShapeKind::disk : ShapeKind::diamond, 0, col);
    }
  }

  if (spec.gain_range > 0 || spec.cast_range > 0) {
    double gain = rng.uniform(1.0 - spec.gain_range, 1.0 + spec.gain_range);
    std::array<double, 3> cast{};
    for (double& c : cast) c = rng.uniform(-spec.cast_range, spec.cast_range);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.at(c, y, x) = std::clamp(img.at(c, y, x) * gain + cast[size_t(c)], 0.0, 1.0);
  }

  if (spec.tint_strength > 0) {
    const std::array<double, 3> tint{0.38, 0.45, 0.47};
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          img.at(c, y, x) = img.at(c, y, x) * (1 - spec.tint_strength) + tint[c] * spec.tint_strength;
  }
  if (spec.blur) detail::box_blur3(img);
  if (spec.noise_sigma > 0)
    for (double& v : img.px) v += rng.normal() * spec.noise_sigma;
  img.clamp01();
  return out;
}

inline std::vector<LabeledImage> generate_dataset(const DomainSpec& spec, int n_images,
                                                  const std::string& split, uint64_t seed) {
  if (n_images < 1) throw std::invalid_argument("generate_dataset: n_images must be >= 1");
  if (split != "train" && split != "test")
    throw std::invalid_argument("generate_dataset: split must be 'train' or 'test'");
  uint64_t stream = Rng::derive(seed, spec.name + ":" + split);
  std::vector<LabeledImage> out;
  out.reserve(size_t(n_images));
  for (int i = 0; i < n_images; ++i) {
    Rng rng(Rng::derive(stream, "img:" + std::to_string(i)));
    out.push_back(render_image(spec, rng));
  }
  return out;
}

// Picks exactly K instances per class (per-instance, not per-image).
// Support-view images keep their pixels but drop annotations for instances
// that were not selected.
inline SupportSet sample_k_shot(const std::vector<LabeledImage>& dataset,
                                const DomainSpec& spec, int k, uint64_t seed) {
  if (k < 1) throw std::invalid_argument("sample_k_shot: K must be >= 1");
  int n_classes = int(spec.class_defs.size());
  std::vector<std::vector<std::pair<int, int>>> per_class(static_cast<size_t>(n_classes));  // (img, box)
  for (int i = 0; i < int(dataset.size()); ++i)
    for (int j = 0; j < int(dataset[i].classes.size()); ++j)
      per_class[size_t(dataset[i].classes[j])].push_back({i, j});

  Rng rng(Rng::derive(seed, "kshot:" + spec.name));
  std::map<int, std::vector<int>> chosen_by_image;  // img -> box indices
  for (int c = 0; c < n_classes; ++c) {
    auto& inst = per_class[size_t(c)];
    if (int(inst.size()) < k)
      throw std::invalid_argument("sample_k_shot: class '" + spec.class_defs[size_t(c)].name +
                                  "' has only " + std::to_string(inst.size()) +
                                  " instances, need " + std::to_string(k));
    for (int i = int(inst.size()) - 1; i > 0; --i)
      std::swap(inst[size_t(i)], inst[size_t(rng.uniform_int(0, i))]);
    for (int i = 0; i < k; ++i) chosen_by_image[inst[size_t(i)].first].push_back(inst[size_t(i)].second);
  }

  SupportSet out;
  out.k = k;
  out.source_domain = spec.name;
  for (auto& [img_idx, box_ids] : chosen_by_image) {
    LabeledImage item;
    item.image = dataset[size_t(img_idx)].image;
    for (int j : box_ids) {
      item.boxes.push_back(dataset[size_t(img_idx)].boxes[size_t(j)]);
      item.classes.push_back(dataset[size_t(img_idx)].classes[size_t(j)]);
    }
    out.items.push_back(std::move(item));
  }
  return out;
}

inline int count_instances(const SupportSet& s) {
  int n = 0;
  for (const auto& item : s.items) n += int(item.boxes.size());
  return n;
}

// Mean per-channel histogram over a corpus, 16 bins per channel, normalized.
inline std::vector<double> channel_histogram(const std::vector<LabeledImage>& images,
                                             int bins = 16) {
  std::vector<double> h(size_t(3 * bins), 0.0);
  double total = 0;
  for (const auto& li : images) {
    const Image& img = li.image;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
          int b = std::min(bins - 1, int(img.at(c, y, x) * bins));
          h[size_t(c * bins + b)] += 1.0;
          total += 1.0;
        }
  }
  for (double& v : h) v /= total / 3.0;  // each channel sums to 1
  return h;
}

inline double histogram_l1(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0;
  for (size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d;
}

}  // namespace cdfsod

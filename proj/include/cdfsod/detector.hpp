#pragma once

// Tiny single-stage grid detector. A 64x64 RGB image passes through three
// stride-2 3x3 conv+relu layers (3->8->16->32 channels) onto an 8x8 feature
// grid; 1x1 heads emit per cell one objectness logit, C class logits and
// 4 box deltas. Each cell predicts at most one object.
//
// Box codec (grid G, cell (r,c)):
//   center = cell center + tanh(delta) * 0.75/G
//   size   = exp(log 0.025 + sigmoid(delta) * log(0.625/0.025))
// so zero deltas decode to a centered box of extent exactly 1/G at G=8, and
// any decoded box lies inside the unit square.
//
// Parameter inventory (documented, fixed): conv1 [8,3,3,3]+[8],
// conv2 [16,8,3,3]+[16], conv3 [32,16,3,3]+[32], head_obj [1,32,1,1]+[1],
// head_cls [C,32,1,1]+[C], head_box [4,32,1,1]+[4]; total 6197 + 33*C.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdfsod/autodiff.hpp"
#include "cdfsod/image.hpp"
#include "cdfsod/rng.hpp"

namespace cdfsod {

struct ModelWeights {
  int n_classes = 0;
  std::map<std::string, Tensor> params;  // ordered by name, fixed inventory

  static std::vector<std::pair<std::string, Shape>> inventory(int n_classes) {
    return {
        {"conv1.w", {8, 3, 3, 3}},   {"conv1.b", {8}},
        {"conv2.w", {16, 8, 3, 3}},  {"conv2.b", {16}},
        {"conv3.w", {32, 16, 3, 3}}, {"conv3.b", {32}},
        {"head_obj.w", {1, 32, 1, 1}},  {"head_obj.b", {1}},
        {"head_cls.w", {n_classes, 32, 1, 1}}, {"head_cls.b", {n_classes}},
        {"head_box.w", {4, 32, 1, 1}}, {"head_box.b", {4}},
    };
  }

  static int param_count(int n_classes) { return 6197 + 33 * n_classes; }

  ModelWeights clone() const {
    ModelWeights out;
    out.n_classes = n_classes;
    for (const auto& [name, t] : params) out.params.emplace(name, Tensor(t.shape, t.values()));
    return out;
  }
};

inline bool weights_equal(const ModelWeights& a, const ModelWeights& b) {
  if (a.n_classes != b.n_classes || a.params.size() != b.params.size()) return false;
  for (const auto& [name, t] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end() || it->second.shape != t.shape ||
        it->second.values() != t.values())
      return false;
  }
  return true;
}

inline ModelWeights init_detector(int n_classes, uint64_t seed) {
  if (n_classes < 1) throw std::invalid_argument("init_detector: n_classes must be >= 1");
  ModelWeights w;
  w.n_classes = n_classes;
  Rng rng = Rng::stream(seed, "init");
  for (const auto& [name, shape] : ModelWeights::inventory(n_classes)) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> data(size_t(n), 0.0);
    if (shape.size() == 4) {  // conv kernel: uniform scaled by fan-in
      double fan_in = double(shape[1]) * shape[2] * shape[3];
      double bound = 1.0 / std::sqrt(fan_in);
      for (double& v : data) v = rng.uniform(-bound, bound);
    }
    w.params.emplace(name, Tensor(shape, std::move(data)));
  }
  return w;
}

// ---- forward ----

struct BoundModel {
  int n_classes = 0;
  std::map<std::string, Tensor> t;
};

// Registers every parameter as a gradient leaf (student path).
inline BoundModel bind(const ModelWeights& w, Graph& g) {
  BoundModel m;
  m.n_classes = w.n_classes;
  for (const auto& [name, t] : w.params) m.t.emplace(name, g.leaf(t));
  return m;
}

// Constant view: no gradients can flow (teacher path).
inline BoundModel bind_const(const ModelWeights& w) {
  BoundModel m;
  m.n_classes = w.n_classes;
  m.t = w.params;
  return m;
}

inline Tensor image_tensor(const Image& img) {
  return Tensor({3, img.h, img.w}, img.px);
}

struct RawGrid {
  int grid = 0;
  int n_classes = 0;
  Tensor obj;  // [1,G,G]
  Tensor cls;  // [C,G,G]
  Tensor box;  // [4,G,G]
};

inline RawGrid forward(const BoundModel& m, const Tensor& image) {
  if (image.rank() != 3 || image.shape[0] != 3 || image.shape[1] != image.shape[2] ||
      image.shape[1] % 8 != 0)
    throw std::invalid_argument("forward: expected square [3,H,H] image with H divisible by 8, got " +
                                shape_str(image.shape));
  Tensor h1 = relu(add(conv2d(image, m.t.at("conv1.w"), 2, 1), m.t.at("conv1.b")));
  Tensor h2 = relu(add(conv2d(h1, m.t.at("conv2.w"), 2, 1), m.t.at("conv2.b")));
  Tensor h3 = relu(add(conv2d(h2, m.t.at("conv3.w"), 2, 1), m.t.at("conv3.b")));
  RawGrid out;
  out.grid = image.shape[1] / 8;
  out.n_classes = m.n_classes;
  out.obj = add(conv2d(h3, m.t.at("head_obj.w")), m.t.at("head_obj.b"));
  out.cls = add(conv2d(h3, m.t.at("head_cls.w")), m.t.at("head_cls.b"));
  out.box = add(conv2d(h3, m.t.at("head_box.w")), m.t.at("head_box.b"));
  return out;
}

inline RawGrid forward(const ModelWeights& w, const Image& img) {
  return forward(bind_const(w), image_tensor(img));
}

// ---- box codec ----

inline constexpr double kBoxSizeMin = 0.025;
inline constexpr double kBoxSizeMax = 0.625;

inline Box decode_box(const std::array<double, 4>& deltas, int row, int col, int grid) {
  double span = 0.75 / grid;
  double cx = (col + 0.5) / grid + std::tanh(deltas[0]) * span;
  double cy = (row + 0.5) / grid + std::tanh(deltas[1]) * span;
  double lr = std::log(kBoxSizeMax / kBoxSizeMin);
  double w = kBoxSizeMin * std::exp(detail::stable_sigmoid(deltas[2]) * lr);
  double h = kBoxSizeMin * std::exp(detail::stable_sigmoid(deltas[3]) * lr);
  cx = std::clamp(cx, w / 2, 1.0 - w / 2);
  cy = std::clamp(cy, h / 2, 1.0 - h / 2);
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

inline std::array<double, 4> encode_box(const Box& b, int row, int col, int grid) {
  double span = 0.75 / grid;
  auto atanh_c = [](double x) {
    x = std::clamp(x, -0.999999, 0.999999);
    return 0.5 * std::log((1 + x) / (1 - x));
  };
  auto logit_c = [](double p) {
    p = std::clamp(p, 1e-9, 1.0 - 1e-9);
    return std::log(p / (1 - p));
  };
  double lr = std::log(kBoxSizeMax / kBoxSizeMin);
  return {atanh_c((b.cx() - (col + 0.5) / grid) / span),
          atanh_c((b.cy() - (row + 0.5) / grid) / span),
          logit_c(std::log(b.width() / kBoxSizeMin) / lr),
          logit_c(std::log(b.height() / kBoxSizeMin) / lr)};
}

// ---- detections, IoU, NMS ----

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;  // sigmoid(objectness) * max class probability
  int cell = 0;      // flat grid index, NMS tie-break
};

inline double iou(const Box& a, const Box& b) { return iou_boxes(a, b); }

inline std::vector<Detection> decode(const RawGrid& raw, double score_floor) {
  if (score_floor < 0 || score_floor >= 1)
    throw std::invalid_argument("decode: score_floor must be in [0,1)");
  int g = raw.grid, c_n = raw.n_classes, n = g * g;
  const auto& obj = raw.obj.values();
  const auto& cls = raw.cls.values();
  const auto& box = raw.box.values();
  std::vector<Detection> out;
  for (int cell = 0; cell < n; ++cell) {
    double m = -1e300;
    for (int c = 0; c < c_n; ++c) m = std::max(m, cls[size_t(c) * n + cell]);
    double sum = 0;
    int best = 0;
    double best_e = -1;
    for (int c = 0; c < c_n; ++c) {
      double e = std::exp(cls[size_t(c) * n + cell] - m);
      sum += e;
      if (e > best_e) {
        best_e = e;
        best = c;
      }
    }
    double score = detail::stable_sigmoid(obj[size_t(cell)]) * (best_e / sum);
    if (score < score_floor) continue;
    std::array<double, 4> d{box[size_t(0) * n + cell], box[size_t(1) * n + cell],
                            box[size_t(2) * n + cell], box[size_t(3) * n + cell]};
    out.push_back(Detection{decode_box(d, cell / g, cell % g, g), best, score, cell});
  }
  return out;
}

// Greedy class-wise NMS: keep the highest-score detection, drop same-class
// detections overlapping a kept one above iou_thresh. Ties broken by lower
// cell index.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  if (iou_thresh <= 0 || iou_thresh >= 1)
    throw std::invalid_argument("nms: iou_thresh must be in (0,1)");
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cell < b.cell;
  });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept)
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// ---- target assignment and losses ----

struct TargetGrid {
  int grid = 8;
  std::vector<int> cls;                         // G*G entries, -1 = background
  std::vector<std::array<double, 4>> deltas;    // valid where cls >= 0

  int positives() const {
    int p = 0;
    for (int c : cls) p += c >= 0;
    return p;
  }
};

// Center-cell rule: the cell containing a box center is positive for that
// box. When two centers land in one cell the larger area wins; exact area
// ties go to the smaller class_id.
inline TargetGrid assign_targets(const std::vector<Box>& boxes, const std::vector<int>& classes,
                                 int grid = 8) {
  if (boxes.size() != classes.size())
    throw std::invalid_argument("assign_targets: box/class count mismatch");
  TargetGrid tg;
  tg.grid = grid;
  tg.cls.assign(size_t(grid) * grid, -1);
  tg.deltas.assign(size_t(grid) * grid, {0, 0, 0, 0});
  std::vector<double> areas(size_t(grid) * grid, -1.0);
  for (size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    if (!b.valid()) throw std::invalid_argument("assign_targets: invalid box");
    int col = std::min(grid - 1, int(b.cx() * grid));
    int row = std::min(grid - 1, int(b.cy() * grid));
    int cell = row * grid + col;
    double a = b.area();
    if (tg.cls[size_t(cell)] >= 0) {
      if (a < areas[size_t(cell)] ||
          (a == areas[size_t(cell)] && classes[i] >= tg.cls[size_t(cell)]))
        continue;
    }
    tg.cls[size_t(cell)] = classes[i];
    tg.deltas[size_t(cell)] = encode_box(b, row, col, grid);
    areas[size_t(cell)] = a;
  }
  return tg;
}

struct DetLoss {
  Tensor l_cls;  // scalar
  Tensor l_loc;  // scalar
};

// Extra weight on the positive-cell mean inside the objectness CE.
inline constexpr double kPosBoost = 0.3;

// L_cls = binary CE on objectness, a per-cell mean plus a small extra mean
//         over positive cells (kPosBoost) so a handful of objects is not
//         drowned by the empty grid, plus mean over positive cells of softmax
//         CE on class logits.
// L_loc = mean over positive cells (per coordinate) of smooth-L1 on deltas;
//         exactly 0 with no positives.
inline DetLoss detection_loss(const RawGrid& raw, const TargetGrid& tg) {
  int g = raw.grid, n = g * g, c_n = raw.n_classes;
  if (tg.grid != g || int(tg.cls.size()) != n)
    throw std::invalid_argument("detection_loss: grid size mismatch");
  for (int c : tg.cls)
    if (c >= c_n) throw std::invalid_argument("detection_loss: target class out of range");

  // objectness as 2-class softmax rows [logit, 0]: class 0 = object
  Tensor obj_col = reshape(raw.obj, {n, 1});
  Tensor obj_rows = concat({obj_col, Tensor::zeros({n, 1})}, 1);
  std::vector<int> obj_targets(static_cast<size_t>(n));
  std::vector<int> positive_cells;
  for (int i = 0; i < n; ++i) {
    obj_targets[size_t(i)] = tg.cls[size_t(i)] >= 0 ? 0 : 1;
    if (tg.cls[size_t(i)] >= 0) positive_cells.push_back(i);
  }
  Tensor ce_obj = cross_entropy(obj_rows, obj_targets);
  std::vector<std::pair<int, int>> pos_runs;
  for (int i = 0; i < n;) {
    int j = i;
    while (j < n && obj_targets[size_t(j)] == obj_targets[size_t(i)]) ++j;
    if (obj_targets[size_t(i)] == 0) pos_runs.push_back({i, j});
    i = j;
  }
  auto run_mean = [&](const std::vector<std::pair<int, int>>& runs) {
    std::vector<Tensor> parts;
    for (auto [a, b] : runs) parts.push_back(slice(ce_obj, {{a, b}}));
    return mean(parts.size() == 1 ? parts[0] : concat(parts, 0));
  };
  Tensor l_obj = pos_runs.empty()
                     ? mean(ce_obj)
                     : add(mean(ce_obj), scale(run_mean(pos_runs), kPosBoost));

  DetLoss out;
  if (positive_cells.empty()) {
    out.l_cls = l_obj;
    out.l_loc = Tensor::zeros({1});
    return out;
  }

  Tensor cls2 = reshape(raw.cls, {c_n, n});
  Tensor box2 = reshape(raw.box, {4, n});
  std::vector<Tensor> cls_rows, box_rows;
  std::vector<int> cls_targets;
  std::vector<double> delta_targets;
  for (int cell : positive_cells) {
    cls_rows.push_back(reshape(slice(cls2, {{0, c_n}, {cell, cell + 1}}), {1, c_n}));
    box_rows.push_back(reshape(slice(box2, {{0, 4}, {cell, cell + 1}}), {1, 4}));
    cls_targets.push_back(tg.cls[size_t(cell)]);
    for (double d : tg.deltas[size_t(cell)]) delta_targets.push_back(d);
  }
  int p = int(positive_cells.size());
  Tensor l_class = mean(cross_entropy(concat(cls_rows, 0), cls_targets));
  out.l_cls = add(l_obj, l_class);
  out.l_loc = mean(smooth_l1(concat(box_rows, 0), Tensor({p, 4}, std::move(delta_targets))));
  return out;
}

struct LossBreakdown {
  double total = 0;
  double l_s = 0, l_d = 0;
  double l_s_cls = 0, l_s_loc = 0;
  double l_d_cls = 0, l_d_loc = 0;
  int n_pseudo = 0;
};

// ---- SGD over the full weight set ----

inline ModelWeights sgd_step(const ModelWeights& w,
                             const std::map<std::string, std::vector<double>>& grads,
                             double gamma) {
  for (const auto& [name, g] : grads)
    if (!w.params.count(name))
      throw std::invalid_argument("sgd_step: gradient for unknown parameter '" + name + "'");
  ModelWeights out;
  out.n_classes = w.n_classes;
  for (const auto& [name, t] : w.params) {
    auto it = grads.find(name);
    if (it == grads.end())
      throw std::invalid_argument("sgd_step: missing gradient for parameter '" + name + "'");
    out.params.emplace(name, Tensor(t.shape, sgd_update(t.values(), it->second, gamma)));
  }
  return out;
}

}  // namespace cdfsod

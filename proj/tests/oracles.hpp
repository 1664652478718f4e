#pragma once

// Reference implementations the test suite checks the library against:
// central finite differences for gradients, brute-force NMS, an independent
// second mAP evaluator, and a plain-double detection-loss oracle. These are
// written from the definitions, not from the library code.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cdfsod/autodiff.hpp"
#include "cdfsod/detector.hpp"
#include "cdfsod/metrics.hpp"
#include "cdfsod/rng.hpp"

namespace oracles {

// ---- finite-difference gradient harness ----

struct FdInstance {
  std::vector<cdfsod::Shape> shapes;
  std::vector<std::vector<double>> values;
  std::function<cdfsod::Tensor(cdfsod::Graph&, const std::vector<cdfsod::Tensor>&)> build;
  int probes = 0;  // 0 = every coordinate
};

struct FdCase {
  std::string name;
  std::function<FdInstance(cdfsod::Rng&)> make;
};

struct FdReport {
  int checked = 0;
  int failed = 0;
  double worst_ratio = 0;  // max |fd - analytic| / tolerance
  std::string note;
};

inline double eval_instance(const FdInstance& inst, const std::vector<std::vector<double>>& values) {
  cdfsod::Graph g;
  std::vector<cdfsod::Tensor> leaves;
  for (size_t i = 0; i < inst.shapes.size(); ++i)
    leaves.push_back(g.leaf(cdfsod::Tensor(inst.shapes[i], values[i])));
  return inst.build(g, leaves).scalar();
}

inline void check_instance(const FdInstance& inst, cdfsod::Rng& rng, FdReport& rep,
                           double eps = 1e-5, double rel_tol = 1e-4, double abs_floor = 1e-7) {
  cdfsod::Graph g;
  std::vector<cdfsod::Tensor> leaves;
  for (size_t i = 0; i < inst.shapes.size(); ++i)
    leaves.push_back(g.leaf(cdfsod::Tensor(inst.shapes[i], inst.values[i])));
  g.backward(inst.build(g, leaves));
  std::vector<std::vector<double>> analytic;
  for (const auto& t : leaves) analytic.push_back(g.grad(t));

  std::vector<std::pair<int, int>> coords;
  for (size_t i = 0; i < inst.values.size(); ++i)
    for (size_t j = 0; j < inst.values[i].size(); ++j) coords.emplace_back(int(i), int(j));
  if (inst.probes > 0 && inst.probes < int(coords.size())) {
    for (int p = 0; p < inst.probes; ++p) {
      int q = int(rng.uniform_int(p, int(coords.size()) - 1));
      std::swap(coords[size_t(p)], coords[size_t(q)]);
    }
    coords.resize(size_t(inst.probes));
  }

  std::vector<std::vector<double>> vals = inst.values;
  for (auto [i, j] : coords) {
    double keep = vals[size_t(i)][size_t(j)];
    vals[size_t(i)][size_t(j)] = keep + eps;
    double up = eval_instance(inst, vals);
    vals[size_t(i)][size_t(j)] = keep - eps;
    double dn = eval_instance(inst, vals);
    vals[size_t(i)][size_t(j)] = keep;
    double fd = (up - dn) / (2 * eps);
    double an = analytic[size_t(i)][size_t(j)];
    double err = std::abs(fd - an);
    double tol = std::max(abs_floor, rel_tol * std::max(std::abs(fd), std::abs(an)));
    ++rep.checked;
    rep.worst_ratio = std::max(rep.worst_ratio, err / tol);
    if (!(err <= tol) && ++rep.failed == 1) {
      std::ostringstream os;
      os << "input " << i << " coord " << j << ": fd " << fd << " vs analytic " << an;
      rep.note = os.str();
    }
  }
}

inline FdReport run_case(const FdCase& c, cdfsod::Rng& rng, int instances) {
  FdReport rep;
  for (int n = 0; n < instances && rep.failed == 0; ++n) check_instance(c.make(rng), rng, rep);
  return rep;
}

namespace detail {

inline std::vector<double> sample_vec(cdfsod::Rng& rng, int64_t n, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Keeps |x - kink| >= margin so central differences never straddle a
// non-differentiable point.
inline void push_from(std::vector<double>& v, double kink, double margin) {
  for (double& x : v)
    if (std::abs(x - kink) < margin) x = kink + (x >= kink ? margin : -margin);
}

inline int64_t numel_of(const cdfsod::Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

// out -> mean(out * w): scalarizes any op output through a random projection
// so every output coordinate influences the loss.
inline cdfsod::Tensor project(cdfsod::Graph&, const cdfsod::Tensor& out, const cdfsod::Tensor& w) {
  return cdfsod::mean(cdfsod::mul(out, w));
}

}  // namespace detail

// One FdCase per differentiable op plus the composed detector loss. The last
// leaf of most cases is the scalarizing projection; its gradient is checked
// along with the op inputs.
inline std::vector<FdCase> op_cases() {
  using cdfsod::Graph;
  using cdfsod::Rng;
  using cdfsod::Shape;
  using cdfsod::Tensor;
  namespace d = detail;
  std::vector<FdCase> cases;

  auto simple = [](std::string name, std::vector<Shape> shapes,
                   std::function<Tensor(Graph&, const std::vector<Tensor>&)> build,
                   double lo = -2.0, double hi = 2.0) {
    return FdCase{std::move(name), [shapes, build, lo, hi](Rng& rng) {
                    FdInstance inst;
                    inst.shapes = shapes;
                    for (const Shape& s : shapes)
                      inst.values.push_back(d::sample_vec(rng, d::numel_of(s), lo, hi));
                    inst.build = build;
                    return inst;
                  }};
  };

  cases.push_back(simple("add", {{3, 4}, {3, 4}, {3, 4}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::add(in[0], in[1]), in[2]);
                         }));
  cases.push_back(simple("add_bias", {{3, 2, 2}, {3}, {3, 2, 2}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::add(in[0], in[1]), in[2]);
                         }));
  cases.push_back(simple("mul", {{2, 5}, {2, 5}, {2, 5}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::mul(in[0], in[1]), in[2]);
                         }));
  cases.push_back(FdCase{"scale", [](Rng& rng) {
                           FdInstance inst;
                           inst.shapes = {{4, 3}, {4, 3}};
                           inst.values = {d::sample_vec(rng, 12, -2, 2),
                                          d::sample_vec(rng, 12, -2, 2)};
                           double c = rng.uniform(-3, 3);
                           inst.build = [c](Graph& g, const std::vector<Tensor>& in) {
                             return d::project(g, cdfsod::scale(in[0], c), in[1]);
                           };
                           return inst;
                         }});
  cases.push_back(FdCase{"relu", [](Rng& rng) {
                           FdInstance inst;
                           inst.shapes = {{3, 5}, {3, 5}};
                           inst.values = {d::sample_vec(rng, 15, -2, 2),
                                          d::sample_vec(rng, 15, -2, 2)};
                           d::push_from(inst.values[0], 0.0, 0.05);
                           inst.build = [](Graph& g, const std::vector<Tensor>& in) {
                             return d::project(g, cdfsod::relu(in[0]), in[1]);
                           };
                           return inst;
                         }});
  cases.push_back(simple("sigmoid", {{4, 4}, {4, 4}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::sigmoid(in[0]), in[1]);
                         },
                         -6.0, 6.0));
  cases.push_back(simple("softmax_rank1", {{6}, {6}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::softmax(in[0]), in[1]);
                         },
                         -4.0, 4.0));
  cases.push_back(simple("softmax_rank2", {{3, 5}, {3, 5}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::softmax(in[0]), in[1]);
                         },
                         -4.0, 4.0));
  cases.push_back(simple("mean", {{2, 3, 4}},
                         [](Graph&, const std::vector<Tensor>& in) {
                           return cdfsod::mean(in[0]);
                         }));
  cases.push_back(FdCase{"smooth_l1", [](Rng& rng) {
                           FdInstance inst;
                           inst.shapes = {{3, 4}, {3, 4}, {3, 4}};
                           for (int i = 0; i < 3; ++i)
                             inst.values.push_back(d::sample_vec(rng, 12, -2, 2));
                           inst.build = [](Graph& g, const std::vector<Tensor>& in) {
                             return d::project(g, cdfsod::smooth_l1(in[0], in[1]), in[2]);
                           };
                           return inst;
                         }});
  cases.push_back(FdCase{"cross_entropy_rank1", [](Rng& rng) {
                           FdInstance inst;
                           inst.shapes = {{5}};
                           inst.values = {d::sample_vec(rng, 5, -4, 4)};
                           int target = int(rng.uniform_int(0, 4));
                           inst.build = [target](Graph&, const std::vector<Tensor>& in) {
                             return cdfsod::cross_entropy(in[0], std::vector<int>{target});
                           };
                           return inst;
                         }});
  cases.push_back(FdCase{"cross_entropy_rank2", [](Rng& rng) {
                           FdInstance inst;
                           inst.shapes = {{4, 3}, {4}};
                           inst.values = {d::sample_vec(rng, 12, -4, 4),
                                          d::sample_vec(rng, 4, -2, 2)};
                           std::vector<int> targets(4);
                           for (int& t : targets) t = int(rng.uniform_int(0, 2));
                           inst.build = [targets](Graph& g, const std::vector<Tensor>& in) {
                             return d::project(g, cdfsod::cross_entropy(in[0], targets), in[1]);
                           };
                           return inst;
                         }});
  cases.push_back(simple("reshape", {{2, 6}, {3, 4}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::reshape(in[0], {3, 4}), in[1]);
                         }));
  cases.push_back(simple("slice", {{4, 6}, {2, 3}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::slice(in[0], {{1, 3}, {2, 5}}), in[1]);
                         }));
  cases.push_back(simple("concat_axis0", {{2, 3}, {3, 3}, {5, 3}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::concat({in[0], in[1]}, 0), in[2]);
                         }));
  cases.push_back(simple("concat_axis1", {{3, 2}, {3, 4}, {3, 6}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::concat({in[0], in[1]}, 1), in[2]);
                         }));
  cases.push_back(simple("matmul", {{2, 3}, {3, 4}, {2, 4}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::matmul(in[0], in[1]), in[2]);
                         },
                         -1.5, 1.5));
  cases.push_back(simple("conv2d_stride1", {{2, 5, 5}, {3, 2, 3, 3}, {3, 3, 3}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::conv2d(in[0], in[1]), in[2]);
                         },
                         -1.0, 1.0));
  cases.push_back(simple("conv2d_stride2_pad1", {{2, 6, 6}, {3, 2, 3, 3}, {3, 3, 3}},
                         [](Graph& g, const std::vector<Tensor>& in) {
                           return d::project(g, cdfsod::conv2d(in[0], in[1], 2, 1), in[2]);
                         },
                         -1.0, 1.0));
  cases.push_back(FdCase{"detector_loss", [](Rng& rng) {
                           const int c_n = 3;
                           FdInstance inst;
                           std::vector<std::string> names;
                           for (const auto& [name, shape] : cdfsod::ModelWeights::inventory(c_n)) {
                             names.push_back(name);
                             inst.shapes.push_back(shape);
                             double bound = shape.size() == 4
                                                ? 1.5 / std::sqrt(double(shape[1] * shape[2] * shape[3]))
                                                : 0.3;
                             inst.values.push_back(
                                 d::sample_vec(rng, d::numel_of(shape), -bound, bound));
                           }
                           std::vector<double> img = d::sample_vec(rng, 3 * 8 * 8, 0.0, 1.0);
                           cdfsod::TargetGrid tg;
                           tg.grid = 1;
                           int cls = rng.coin(0.3) ? -1 : int(rng.uniform_int(0, c_n - 1));
                           tg.cls = {cls};
                           tg.deltas = {{rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2),
                                         rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)}};
                           inst.probes = 24;
                           inst.build = [names, img, tg](Graph&, const std::vector<Tensor>& in) {
                             cdfsod::BoundModel m;
                             m.n_classes = c_n;
                             for (size_t i = 0; i < names.size(); ++i)
                               m.t.emplace(names[i], in[i]);
                             cdfsod::RawGrid raw =
                                 cdfsod::forward(m, Tensor({3, 8, 8}, img));
                             cdfsod::DetLoss dl = cdfsod::detection_loss(raw, tg);
                             return cdfsod::add(dl.l_cls, dl.l_loc);
                           };
                           return inst;
                         }});
  return cases;
}

// ---- brute-force NMS reference ----

inline double ref_iou(const cdfsod::Box& a, const cdfsod::Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  double inter = iw * ih;
  double uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline std::vector<cdfsod::Detection> brute_nms(std::vector<cdfsod::Detection> dets,
                                                double iou_thresh) {
  std::sort(dets.begin(), dets.end(), [](const cdfsod::Detection& a, const cdfsod::Detection& b) {
    return a.score != b.score ? a.score > b.score : a.cell < b.cell;
  });
  std::vector<cdfsod::Detection> kept;
  for (const cdfsod::Detection& d : dets) {
    bool keep = true;
    for (const cdfsod::Detection& k : kept)
      if (k.class_id == d.class_id && ref_iou(k.box, d.box) > iou_thresh) keep = false;
    if (keep) kept.push_back(d);
  }
  return kept;
}

inline bool same_detections(const std::vector<cdfsod::Detection>& a,
                            const std::vector<cdfsod::Detection>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].class_id != b[i].class_id || a[i].score != b[i].score || a[i].cell != b[i].cell ||
        a[i].box.x1 != b[i].box.x1 || a[i].box.y1 != b[i].box.y1 || a[i].box.x2 != b[i].box.x2 ||
        a[i].box.y2 != b[i].box.y2)
      return false;
  }
  return true;
}

// ---- independent mAP evaluator ----

// AP as the discrete sum (1/n_gt) * sum_q max{precision after >= q true
// positives}; equal to all-point interpolation of the PR curve.
struct RefRecord {
  double map = 0, ap50 = 0;
  std::map<int, double> per_class;
};

inline double ref_class_ap(std::vector<cdfsod::EvalDet> dets,
                           const std::vector<std::vector<cdfsod::Box>>& gts, double thresh) {
  int n_gt = 0;
  for (const auto& g : gts) n_gt += int(g.size());
  if (n_gt == 0) return 0.0;
  std::sort(dets.begin(), dets.end(), [](const cdfsod::EvalDet& a, const cdfsod::EvalDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    if (a.box.y2 != b.box.y2) return a.box.y2 < b.box.y2;
    return a.cell < b.cell;
  });
  std::vector<std::vector<char>> used(gts.size());
  for (size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), 0);
  std::vector<int> tps;
  std::vector<double> precs;
  int tp = 0;
  for (size_t k = 0; k < dets.size(); ++k) {
    const cdfsod::EvalDet& det = dets[k];
    const auto& cand = gts[size_t(det.image)];
    double best_v = -1;
    int best_j = -1;
    for (int j = 0; j < int(cand.size()); ++j) {
      if (used[size_t(det.image)][size_t(j)]) continue;
      double v = ref_iou(det.box, cand[size_t(j)]);
      if (v >= thresh && v > best_v) {
        best_v = v;
        best_j = j;
      }
    }
    if (best_j >= 0) {
      used[size_t(det.image)][size_t(best_j)] = 1;
      ++tp;
    }
    tps.push_back(tp);
    precs.push_back(double(tp) / double(k + 1));
  }
  double ap = 0;
  for (int q = 1; q <= n_gt; ++q) {
    double best = 0;
    for (size_t k = 0; k < tps.size(); ++k)
      if (tps[k] >= q) best = std::max(best, precs[k]);
    ap += best;
  }
  return ap / n_gt;
}

inline RefRecord ref_evaluate(const std::vector<std::vector<cdfsod::Detection>>& dets_per_image,
                              const std::vector<cdfsod::LabeledImage>& testset) {
  RefRecord rec;
  std::map<int, std::vector<std::vector<cdfsod::Box>>> class_gts;
  for (size_t i = 0; i < testset.size(); ++i)
    for (size_t j = 0; j < testset[i].boxes.size(); ++j) {
      auto& g = class_gts[testset[i].classes[j]];
      g.resize(testset.size());
      g[i].push_back(testset[i].boxes[j]);
    }
  for (auto& [c, g] : class_gts) g.resize(testset.size());
  if (class_gts.empty()) return rec;

  std::map<int, std::vector<cdfsod::EvalDet>> class_dets;
  for (size_t i = 0; i < dets_per_image.size(); ++i)
    for (const cdfsod::Detection& det : dets_per_image[i])
      class_dets[det.class_id].push_back(cdfsod::EvalDet{det.score, int(i), det.box, det.cell});

  for (const auto& [c, gts] : class_gts) {
    double sum = 0;
    for (double t : cdfsod::map_iou_thresholds()) {
      double ap = ref_class_ap(class_dets.count(c) ? class_dets[c] : std::vector<cdfsod::EvalDet>{},
                               gts, t);
      sum += ap;
      if (t == 0.50) rec.ap50 += ap;
    }
    rec.per_class[c] = sum / double(cdfsod::map_iou_thresholds().size());
    rec.map += rec.per_class[c];
  }
  rec.map /= double(class_gts.size());
  rec.ap50 /= double(class_gts.size());
  return rec;
}

// ---- scalar detection-loss oracle ----

struct RefLoss {
  double l_cls = 0, l_loc = 0, total = 0;
};

// Plain double math over the raw head values; layout [C,G,G] flattened as
// channel-major (value of channel c at flat cell i sits at c*n + i).
inline RefLoss ref_detection_loss(const std::vector<double>& obj, const std::vector<double>& cls,
                                  const std::vector<double>& box, int c_n,
                                  const cdfsod::TargetGrid& tg) {
  int n = tg.grid * tg.grid;
  auto ce_binary = [](double z, bool positive) {
    // -log softmax([z, 0])[target] written with max-shift
    double m = std::max(z, 0.0);
    double lse = m + std::log(std::exp(z - m) + std::exp(-m));
    return positive ? lse - z : lse;
  };
  RefLoss out;
  double pos_sum = 0, neg_sum = 0;
  int n_pos = 0;
  for (int i = 0; i < n; ++i) {
    bool positive = tg.cls[size_t(i)] >= 0;
    (positive ? pos_sum : neg_sum) += ce_binary(obj[size_t(i)], positive);
    n_pos += positive;
  }
  // per-cell mean over all cells plus a boosted mean over positive cells
  out.l_cls = (pos_sum + neg_sum) / n + (n_pos > 0 ? 0.3 * pos_sum / n_pos : 0.0);

  int p = 0;
  double cls_sum = 0, loc_sum = 0;
  for (int i = 0; i < n; ++i) {
    int target = tg.cls[size_t(i)];
    if (target < 0) continue;
    ++p;
    double m = -1e300;
    for (int c = 0; c < c_n; ++c) m = std::max(m, cls[size_t(c) * size_t(n) + size_t(i)]);
    double lse = 0;
    for (int c = 0; c < c_n; ++c) lse += std::exp(cls[size_t(c) * size_t(n) + size_t(i)] - m);
    cls_sum += m + std::log(lse) - cls[size_t(target) * size_t(n) + size_t(i)];
    for (int c = 0; c < 4; ++c) {
      double diff = box[size_t(c) * size_t(n) + size_t(i)] - tg.deltas[size_t(i)][size_t(c)];
      double a = std::abs(diff);
      loc_sum += a <= 1.0 ? 0.5 * diff * diff : a - 0.5;
    }
  }
  if (p > 0) {
    out.l_cls += cls_sum / p;
    out.l_loc = loc_sum / (4.0 * p);
  }
  out.total = out.l_cls + out.l_loc;
  return out;
}

}  // namespace oracles

#pragma once

// Minimal dense-tensor reverse-mode automatic differentiation.
//
// Tensors are value handles (shape + shared float64 buffer). Ops never mutate
// their inputs. A Graph is a define-by-run tape: it is rebuilt for every
// forward pass, confined to one thread, and supports repeated backward()
// calls with identical results. Tensors with graph == nullptr are constants;
// no gradient flows into them.
//
// Shape rules (throwing std::invalid_argument naming the op and shapes):
//   conv2d(x[Ci,H,W], w[Co,Ci,kh,kw], stride, pad) -> [Co,Ho,Wo]
//   matmul(a[m,k], b[k,n])                         -> [m,n]
//   add(a, b)         same shape elementwise, or b rank-1 broadcast over
//                     axis 0 of a (per-channel bias)
//   mul(a, b)         same shape elementwise
//   scale(a, c)       multiply by scalar constant
//   relu / sigmoid    elementwise, shape preserved
//   softmax(a)        rank 1: over the vector; rank 2: over each row
//   mean(a)           full reduction -> scalar (shape {1})
//   smooth_l1(a, b)   elementwise Huber on (a - b), same shapes
//   cross_entropy(logits, targets)
//                     rank 1 [K] + 1 target -> scalar; rank 2 [N,K] + N
//                     targets -> [N]; -log softmax(logits)[target]
//   slice(a, ranges)  hyperrectangle copy, one (lo,hi) per axis
//   concat(parts, axis)
//   reshape(a, shape) same element count, shares the buffer

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdfsod {

using Shape = std::vector<int>;

class Graph;

struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  Graph* graph = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::make_shared<std::vector<double>>(std::move(values))) {
    if (numel() != int64_t(data->size()))
      throw std::invalid_argument("tensor data length does not match shape");
  }

  static Tensor zeros(Shape s) { return full(std::move(s), 0.0); }

  static Tensor full(Shape s, double v) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return Tensor(std::move(s), std::vector<double>(size_t(n), v));
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  int rank() const { return int(shape.size()); }

  double scalar() const {
    if (numel() != 1) throw std::invalid_argument("scalar() on non-scalar tensor");
    return (*data)[0];
  }

  const std::vector<double>& values() const { return *data; }

  bool all_finite() const {
    for (double v : *data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
}

class Graph {
 public:
  // Registers a parameter tensor. Gradients are produced only for leaves.
  Tensor leaf(const Tensor& value) {
    Tensor t;
    t.shape = value.shape;
    t.data = value.data;
    t.graph = this;
    t.node = record({}, size_t(value.numel()), nullptr, /*is_leaf=*/true);
    ++n_leaves_;
    return t;
  }

  int record(std::vector<int> inputs, size_t numel, std::function<void(Graph&, int)> pull,
             bool is_leaf = false) {
    nodes_.push_back(NodeRec{std::move(inputs), numel, std::move(pull), is_leaf});
    grads_.emplace_back();
    return int(nodes_.size()) - 1;
  }

  // Reverse pass from a scalar loss. Repeatable: gradients are recomputed from
  // scratch on every call.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    for (auto& g : grads_) {
      g.clear();
    }
    if (loss.graph == nullptr) return;  // constant loss: all gradients stay zero
    if (loss.graph != this) throw std::invalid_argument("backward: loss from another graph");

    std::vector<char> needed(nodes_.size(), 0);
    std::vector<int> stack{loss.node};
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      if (needed[id]) continue;
      needed[id] = 1;
      for (int in : nodes_[id].inputs)
        if (!needed[in]) stack.push_back(in);
    }
    for (size_t i = 0; i < nodes_.size(); ++i)
      if (needed[i]) grads_[i].assign(nodes_[i].numel, 0.0);
    grads_[loss.node][0] = 1.0;
    for (int id = loss.node; id >= 0; --id)
      if (needed[id] && nodes_[id].pull) nodes_[id].pull(*this, id);
  }

  // Gradient for a tensor on this graph; zeros if the loss did not reach it.
  const std::vector<double>& grad(const Tensor& t) {
    if (t.graph != this || t.node < 0)
      throw std::invalid_argument("grad: tensor is not on this graph");
    auto& g = grads_[t.node];
    if (g.empty()) g.assign(nodes_[t.node].numel, 0.0);
    return g;
  }

  std::vector<double>& gbuf(int node) {
    auto& g = grads_[node];
    if (g.empty()) g.assign(nodes_[node].numel, 0.0);
    return g;
  }

  size_t num_nodes() const { return nodes_.size(); }
  size_t num_leaves() const { return n_leaves_; }
  bool is_leaf(int node) const { return node >= 0 && nodes_[node].is_leaf; }

 private:
  struct NodeRec {
    std::vector<int> inputs;
    size_t numel;
    std::function<void(Graph&, int)> pull;
    bool is_leaf;
  };
  std::vector<NodeRec> nodes_;
  std::vector<std::vector<double>> grads_;
  size_t n_leaves_ = 0;
};

namespace detail {

inline Graph* merge_graph(const std::string& op, std::initializer_list<const Tensor*> ts) {
  Graph* g = nullptr;
  for (const Tensor* t : ts) {
    if (t->graph == nullptr) continue;
    if (g != nullptr && g != t->graph)
      throw std::invalid_argument(op + ": inputs belong to different graphs");
    g = t->graph;
  }
  return g;
}

inline Tensor make_result(Shape shape, std::vector<double> values, Graph* g,
                          std::vector<int> inputs, std::function<void(Graph&, int)> pull) {
  Tensor out(std::move(shape), std::move(values));
  if (g != nullptr) {
    out.graph = g;
    out.node = g->record(std::move(inputs), size_t(out.numel()), std::move(pull));
  }
  return out;
}

inline std::vector<int> input_nodes(std::initializer_list<const Tensor*> ts) {
  std::vector<int> ids;
  for (const Tensor* t : ts)
    if (t->node >= 0) ids.push_back(t->node);
  return ids;
}

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_acc(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + size_t(i) * k;
    double* crow = c + size_t(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = b + size_t(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---- arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  Graph* g = detail::merge_graph("add", {&a, &b});
  if (a.shape == b.shape) {
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto an = a.node, bn = b.node;
    return detail::make_result(
        a.shape, std::move(out), g, detail::input_nodes({&a, &b}),
        [an, bn](Graph& gr, int self) {
          const auto& go = gr.gbuf(self);
          if (an >= 0) {
            auto& ga = gr.gbuf(an);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
          }
          if (bn >= 0) {
            auto& gb = gr.gbuf(bn);
            for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
          }
        });
  }
  // channel-broadcast bias: b rank 1, length == a.shape[0]
  if (b.rank() == 1 && a.rank() > 1 && a.shape[0] == b.shape[0]) {
    int channels = a.shape[0];
    size_t slab = size_t(a.numel()) / channels;
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (int c = 0; c < channels; ++c)
      for (size_t i = 0; i < slab; ++i) out[size_t(c) * slab + i] += bv[c];
    auto an = a.node, bn = b.node;
    return detail::make_result(
        a.shape, std::move(out), g, detail::input_nodes({&a, &b}),
        [an, bn, channels, slab](Graph& gr, int self) {
          const auto& go = gr.gbuf(self);
          if (an >= 0) {
            auto& ga = gr.gbuf(an);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
          }
          if (bn >= 0) {
            auto& gb = gr.gbuf(bn);
            for (int c = 0; c < channels; ++c) {
              double s = 0;
              for (size_t i = 0; i < slab; ++i) s += go[size_t(c) * slab + i];
              gb[c] += s;
            }
          }
        });
  }
  shape_error("add", a.shape, b.shape);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) shape_error("mul", a.shape, b.shape);
  Graph* g = detail::merge_graph("mul", {&a, &b});
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto an = a.node, bn = b.node;
  auto ad = a.data, bd = b.data;
  return detail::make_result(
      a.shape, std::move(out), g, detail::input_nodes({&a, &b}),
      [an, bn, ad, bd](Graph& gr, int self) {
        const auto& go = gr.gbuf(self);
        if (an >= 0) {
          auto& ga = gr.gbuf(an);
          for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*bd)[i];
        }
        if (bn >= 0) {
          auto& gb = gr.gbuf(bn);
          for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * (*ad)[i];
        }
      });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= c;
  auto an = a.node;
  return detail::make_result(a.shape, std::move(out), a.graph, detail::input_nodes({&a}),
                             [an, c](Graph& gr, int self) {
                               if (an < 0) return;
                               const auto& go = gr.gbuf(self);
                               auto& ga = gr.gbuf(an);
                               for (size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
                             });
}

// ---- elementwise nonlinearities ----

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0 ? v : 0.0;
  auto an = a.node;
  auto ad = a.data;
  return detail::make_result(a.shape, std::move(out), a.graph, detail::input_nodes({&a}),
                             [an, ad](Graph& gr, int self) {
                               if (an < 0) return;
                               const auto& go = gr.gbuf(self);
                               auto& ga = gr.gbuf(an);
                               for (size_t i = 0; i < go.size(); ++i)
                                 if ((*ad)[i] > 0) ga[i] += go[i];
                             });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = detail::stable_sigmoid(v);
  auto an = a.node;
  auto od = std::make_shared<std::vector<double>>(out);
  return detail::make_result(a.shape, std::move(out), a.graph, detail::input_nodes({&a}),
                             [an, od](Graph& gr, int self) {
                               if (an < 0) return;
                               const auto& go = gr.gbuf(self);
                               auto& ga = gr.gbuf(an);
                               for (size_t i = 0; i < go.size(); ++i) {
                                 double s = (*od)[i];
                                 ga[i] += go[i] * s * (1.0 - s);
                               }
                             });
}

inline Tensor softmax(const Tensor& a) {
  if (a.rank() != 1 && a.rank() != 2)
    throw std::invalid_argument("softmax: expects rank 1 or 2, got " + shape_str(a.shape));
  int rows = a.rank() == 2 ? a.shape[0] : 1;
  int cols = a.rank() == 2 ? a.shape[1] : a.shape[0];
  std::vector<double> out(a.values());
  for (int r = 0; r < rows; ++r) {
    double* row = out.data() + size_t(r) * cols;
    double m = *std::max_element(row, row + cols);
    double sum = 0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - m);
      sum += row[j];
    }
    for (int j = 0; j < cols; ++j) row[j] /= sum;
  }
  auto an = a.node;
  auto od = std::make_shared<std::vector<double>>(out);
  return detail::make_result(
      a.shape, std::move(out), a.graph, detail::input_nodes({&a}),
      [an, od, rows, cols](Graph& gr, int self) {
        if (an < 0) return;
        const auto& go = gr.gbuf(self);
        auto& ga = gr.gbuf(an);
        for (int r = 0; r < rows; ++r) {
          const double* s = od->data() + size_t(r) * cols;
          const double* gout = go.data() + size_t(r) * cols;
          double dot = 0;
          for (int j = 0; j < cols; ++j) dot += gout[j] * s[j];
          double* gin = ga.data() + size_t(r) * cols;
          for (int j = 0; j < cols; ++j) gin[j] += s[j] * (gout[j] - dot);
        }
      });
}

// ---- reductions and losses ----

inline Tensor mean(const Tensor& a) {
  double n = double(a.numel());
  double s = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  auto an = a.node;
  return detail::make_result(Shape{1}, {s / n}, a.graph, detail::input_nodes({&a}),
                             [an, n](Graph& gr, int self) {
                               if (an < 0) return;
                               double go = gr.gbuf(self)[0] / n;
                               auto& ga = gr.gbuf(an);
                               for (double& v : ga) v += go;
                             });
}

// Elementwise Huber loss on (a - b): 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
inline Tensor smooth_l1(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) shape_error("smooth_l1", a.shape, b.shape);
  Graph* g = detail::merge_graph("smooth_l1", {&a, &b});
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) {
    double d = av[i] - bv[i];
    out[i] = std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  auto an = a.node, bn = b.node;
  auto ad = a.data, bd = b.data;
  return detail::make_result(
      a.shape, std::move(out), g, detail::input_nodes({&a, &b}),
      [an, bn, ad, bd](Graph& gr, int self) {
        const auto& go = gr.gbuf(self);
        for (size_t i = 0; i < go.size(); ++i) {
          double d = (*ad)[i] - (*bd)[i];
          double dd = std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0);
          if (an >= 0) gr.gbuf(an)[i] += go[i] * dd;
          if (bn >= 0) gr.gbuf(bn)[i] -= go[i] * dd;
        }
      });
}

// -log softmax(logits)[target]; rank 1 -> scalar, rank 2 -> one loss per row.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 1 && logits.rank() != 2)
    throw std::invalid_argument("cross_entropy: expects rank 1 or 2, got " +
                                shape_str(logits.shape));
  int rows = logits.rank() == 2 ? logits.shape[0] : 1;
  int cols = logits.rank() == 2 ? logits.shape[1] : logits.shape[0];
  if (int(targets.size()) != rows)
    throw std::invalid_argument("cross_entropy: expected " + std::to_string(rows) +
                                " targets, got " + std::to_string(targets.size()));
  for (int t : targets)
    if (t < 0 || t >= cols)
      throw std::invalid_argument("cross_entropy: target class " + std::to_string(t) +
                                  " out of range for " + std::to_string(cols) + " classes");
  const auto& lv = logits.values();
  auto probs = std::make_shared<std::vector<double>>(lv);
  std::vector<double> out(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double* row = probs->data() + size_t(r) * cols;
    double m = *std::max_element(row, row + cols);
    double sum = 0;
    for (int j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - m);
      sum += row[j];
    }
    for (int j = 0; j < cols; ++j) row[j] /= sum;
    out[r] = -std::log(std::max(row[targets[r]], 1e-300));
  }
  auto an = logits.node;
  Shape out_shape = logits.rank() == 2 ? Shape{rows} : Shape{1};
  return detail::make_result(
      std::move(out_shape), std::move(out), logits.graph, detail::input_nodes({&logits}),
      [an, probs, targets, rows, cols](Graph& gr, int self) {
        if (an < 0) return;
        const auto& go = gr.gbuf(self);
        auto& ga = gr.gbuf(an);
        for (int r = 0; r < rows; ++r) {
          const double* p = probs->data() + size_t(r) * cols;
          double* gin = ga.data() + size_t(r) * cols;
          for (int j = 0; j < cols; ++j)
            gin[j] += go[r] * (p[j] - (j == targets[r] ? 1.0 : 0.0));
        }
      });
}

// ---- structural ops ----

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  int64_t n = 1;
  for (int d : new_shape) n *= d;
  if (n != a.numel()) shape_error("reshape", a.shape, new_shape);
  auto an = a.node;
  return detail::make_result(std::move(new_shape), a.values(), a.graph,
                             detail::input_nodes({&a}), [an](Graph& gr, int self) {
                               if (an < 0) return;
                               const auto& go = gr.gbuf(self);
                               auto& ga = gr.gbuf(an);
                               for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                             });
}

inline Tensor slice(const Tensor& a, const std::vector<std::pair<int, int>>& ranges) {
  if (int(ranges.size()) != a.rank())
    throw std::invalid_argument("slice: need one (lo,hi) range per axis of " +
                                shape_str(a.shape));
  Shape out_shape(a.rank());
  for (int i = 0; i < a.rank(); ++i) {
    auto [lo, hi] = ranges[i];
    if (lo < 0 || hi > a.shape[i] || lo >= hi)
      throw std::invalid_argument("slice: bad range [" + std::to_string(lo) + "," +
                                  std::to_string(hi) + ") on axis " + std::to_string(i) +
                                  " of " + shape_str(a.shape));
    out_shape[i] = hi - lo;
  }
  int rank = a.rank();
  std::vector<size_t> in_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.shape[i + 1];
  int64_t out_n = 1;
  for (int d : out_shape) out_n *= d;
  // map each output linear index to its input linear index
  auto index_map = std::make_shared<std::vector<size_t>>(size_t(out_n));
  std::vector<int> idx(rank, 0);
  for (int64_t o = 0; o < out_n; ++o) {
    size_t in = 0;
    for (int i = 0; i < rank; ++i) in += size_t(ranges[i].first + idx[i]) * in_strides[i];
    (*index_map)[size_t(o)] = in;
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(out_n));
  for (int64_t o = 0; o < out_n; ++o) out[size_t(o)] = av[(*index_map)[size_t(o)]];
  auto an = a.node;
  return detail::make_result(std::move(out_shape), std::move(out), a.graph,
                             detail::input_nodes({&a}),
                             [an, index_map](Graph& gr, int self) {
                               if (an < 0) return;
                               const auto& go = gr.gbuf(self);
                               auto& ga = gr.gbuf(an);
                               for (size_t o = 0; o < go.size(); ++o)
                                 ga[(*index_map)[o]] += go[o];
                             });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: bad axis");
  Shape out_shape = parts[0].shape;
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) shape_error("concat", parts[0].shape, p.shape);
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.shape[i] != out_shape[i]) shape_error("concat", parts[0].shape, p.shape);
    total += p.shape[axis];
  }
  out_shape[axis] = total;

  size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= size_t(out_shape[i]);
  for (int i = axis + 1; i < rank; ++i) inner *= size_t(out_shape[i]);

  int64_t out_n = 1;
  for (int d : out_shape) out_n *= d;
  std::vector<double> out(static_cast<size_t>(out_n));
  size_t offset = 0;  // in units of axis slots
  struct PartInfo {
    int node;
    size_t axis_dim, offset;
  };
  auto infos = std::make_shared<std::vector<PartInfo>>();
  std::vector<int> input_ids;
  Graph* g = nullptr;
  for (const Tensor& p : parts) {
    Graph* pg = detail::merge_graph("concat", {&p});
    if (pg != nullptr) {
      if (g != nullptr && g != pg)
        throw std::invalid_argument("concat: inputs belong to different graphs");
      g = pg;
    }
    size_t ad = size_t(p.shape[axis]);
    const auto& pv = p.values();
    for (size_t o = 0; o < outer; ++o)
      std::copy(pv.begin() + o * ad * inner, pv.begin() + (o + 1) * ad * inner,
                out.begin() + (o * size_t(total) + offset) * inner);
    infos->push_back(PartInfo{p.node, ad, offset});
    if (p.node >= 0) input_ids.push_back(p.node);
    offset += ad;
  }
  size_t total_sz = size_t(total);
  return detail::make_result(
      std::move(out_shape), std::move(out), g, std::move(input_ids),
      [infos, outer, inner, total_sz](Graph& gr, int self) {
        const auto& go = gr.gbuf(self);
        for (const auto& info : *infos) {
          if (info.node < 0) continue;
          auto& gp = gr.gbuf(info.node);
          for (size_t o = 0; o < outer; ++o) {
            const double* src = go.data() + (o * total_sz + info.offset) * inner;
            double* dst = gp.data() + o * info.axis_dim * inner;
            for (size_t i = 0; i < info.axis_dim * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    shape_error("matmul", a.shape, b.shape);
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Graph* g = detail::merge_graph("matmul", {&a, &b});
  std::vector<double> out(size_t(m) * n, 0.0);
  detail::gemm_acc(m, k, n, a.values().data(), b.values().data(), out.data());
  auto an = a.node, bn = b.node;
  auto ad = a.data, bd = b.data;
  return detail::make_result(
      Shape{m, n}, std::move(out), g, detail::input_nodes({&a, &b}),
      [an, bn, ad, bd, m, k, n](Graph& gr, int self) {
        const auto& go = gr.gbuf(self);
        if (an >= 0) {
          auto& ga = gr.gbuf(an);
          // dA[i,kk] = dot(go[i,:], B[kk,:])
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              const double* grow = go.data() + size_t(i) * n;
              const double* brow = bd->data() + size_t(kk) * n;
              double s = 0;
              for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
              ga[size_t(i) * k + kk] += s;
            }
        }
        if (bn >= 0) {
          auto& gb = gr.gbuf(bn);
          // dB[kk,:] += A[i,kk] * go[i,:]
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              double av = (*ad)[size_t(i) * k + kk];
              const double* grow = go.data() + size_t(i) * n;
              double* brow = gb.data() + size_t(kk) * n;
              for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
      });
}

// ---- convolution ----

namespace detail {

// Patch matrix P[(ci*kh*kw + ky*kw + kx), (oy*wo + ox)] with zero padding.
inline void im2col(const double* x, int ci, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, double* p) {
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        double* prow = p + (size_t(c) * kh * kw + size_t(ky) * kw + kx) * (size_t(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - pad;
            prow[size_t(oy) * wo + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(size_t(c) * h + iy) * w + ix] : 0.0;
          }
        }
      }
}

inline void col2im_acc(const double* p, int ci, int h, int w, int kh, int kw, int stride, int pad,
                       int ho, int wo, double* gx) {
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const double* prow = p + (size_t(c) * kh * kw + size_t(ky) * kw + kx) * (size_t(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            gx[(size_t(c) * h + iy) * w + ix] += prow[size_t(oy) * wo + ox];
          }
        }
      }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0) {
  if (x.rank() != 3 || w.rank() != 4 || x.shape[0] != w.shape[1])
    shape_error("conv2d", x.shape, w.shape);
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  int ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
  int co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1)
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape) +
                                " larger than padded input " + shape_str(x.shape));
  Graph* g = detail::merge_graph("conv2d", {&x, &w});
  int kdim = ci * kh * kw, n = ho * wo;
  auto patches = std::make_shared<std::vector<double>>(size_t(kdim) * n);
  detail::im2col(x.values().data(), ci, h, wd, kh, kw, stride, pad, ho, wo, patches->data());
  std::vector<double> out(size_t(co) * n, 0.0);
  detail::gemm_acc(co, kdim, n, w.values().data(), patches->data(), out.data());
  auto xn = x.node, wn = w.node;
  auto wd_ptr = w.data;
  return detail::make_result(
      Shape{co, ho, wo}, std::move(out), g, detail::input_nodes({&x, &w}),
      [xn, wn, wd_ptr, patches, ci, h, wd, co, kh, kw, stride, pad, ho, wo, kdim,
       n](Graph& gr, int self) {
        const auto& go = gr.gbuf(self);
        if (wn >= 0) {
          auto& gw = gr.gbuf(wn);
          // dW[m,kk] += dot(go[m,:], P[kk,:])
          for (int m = 0; m < co; ++m)
            for (int kk = 0; kk < kdim; ++kk) {
              const double* grow = go.data() + size_t(m) * n;
              const double* prow = patches->data() + size_t(kk) * n;
              double s = 0;
              for (int j = 0; j < n; ++j) s += grow[j] * prow[j];
              gw[size_t(m) * kdim + kk] += s;
            }
        }
        if (xn >= 0) {
          std::vector<double> gp(size_t(kdim) * n, 0.0);
          for (int m = 0; m < co; ++m)
            for (int kk = 0; kk < kdim; ++kk) {
              double wv = (*wd_ptr)[size_t(m) * kdim + kk];
              const double* grow = go.data() + size_t(m) * n;
              double* prow = gp.data() + size_t(kk) * n;
              for (int j = 0; j < n; ++j) prow[j] += wv * grow[j];
            }
          detail::col2im_acc(gp.data(), ci, h, wd, kh, kw, stride, pad, ho, wo,
                             gr.gbuf(xn).data());
        }
      });
}

// Plain SGD descent on raw buffers: w - gamma * g.
inline std::vector<double> sgd_update(const std::vector<double>& w, const std::vector<double>& g,
                                      double gamma) {
  if (w.size() != g.size())
    throw std::invalid_argument("sgd_update: weight/gradient size mismatch");
  if (gamma <= 0) throw std::invalid_argument("sgd_update: learning rate must be positive");
  std::vector<double> out(w.size());
  for (size_t i = 0; i < w.size(); ++i) out[i] = w[i] - gamma * g[i];
  return out;
}

}  // namespace cdfsod

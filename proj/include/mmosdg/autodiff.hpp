#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mmosdg/errors.hpp"
#include "mmosdg/matrix.hpp"
#include "mmosdg/rng.hpp"

namespace mmosdg {

class Graph;

// A matrix value, optionally attached to a differentiation graph.
// node < 0 means constant (no gradient recorded).
struct Tensor {
  Matrix value;
  Graph* graph = nullptr;
  int node = -1;

  Tensor() = default;
  explicit Tensor(Matrix v) : value(std::move(v)) {}

  bool tracked() const { return graph != nullptr && node >= 0; }
  double scalar() const {
    require(value.rows == 1 && value.cols == 1,
            "scalar(): tensor is " + value.shape_str() + ", expected 1x1");
    return value(0, 0);
  }
};

// Named trainable parameters, grouped by a "group/name" prefix convention.
// Registration order is the canonical serialization order.
class ParamStore {
 public:
  Matrix& add(const std::string& name, Matrix init) {
    require(values_.find(name) == values_.end(),
            "parameter registered twice: " + name);
    order_.push_back(name);
    return values_.emplace(name, std::move(init)).first->second;
  }

  bool contains(const std::string& name) const { return values_.count(name) > 0; }

  Matrix& at(const std::string& name) {
    auto it = values_.find(name);
    require(it != values_.end(), "unknown parameter: " + name);
    return it->second;
  }
  const Matrix& at(const std::string& name) const {
    auto it = values_.find(name);
    require(it != values_.end(), "unknown parameter: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::string> group(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& n : order_)
      if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += values_.at(name).size();
    return n;
  }

  bool bitwise_equal_to(const ParamStore& o) const {
    if (order_ != o.order_) return false;
    for (const auto& n : order_)
      if (!bitwise_equal(values_.at(n), o.values_.at(n))) return false;
    return true;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Matrix> values_;
};

using GradMap = std::unordered_map<std::string, Matrix>;

// Reverse-mode tape. One graph per forward/backward step; recording order is
// a valid evaluation order, and backward replays it once in reverse.
class Graph {
 public:
  Tensor leaf(Matrix v) {
    Tensor t(std::move(v));
    t.graph = this;
    t.node = new_node(t.value.rows, t.value.cols);
    return t;
  }

  Tensor constant(Matrix v) { return Tensor(std::move(v)); }

  // Leaf node bound to a named parameter; cached so a parameter used in
  // several places accumulates one gradient.
  Tensor param(ParamStore& ps, const std::string& name) {
    auto it = param_lookup_.find(name);
    if (it != param_lookup_.end()) {
      Tensor t(ps.at(name));
      t.graph = this;
      t.node = it->second;
      return t;
    }
    Tensor t = leaf(ps.at(name));
    param_lookup_.emplace(name, t.node);
    return t;
  }

  int new_node(std::size_t rows, std::size_t cols) {
    nodes_.push_back(NodeInfo{rows, cols, nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_backward(int node, std::function<void(Graph&)> fn) {
    nodes_[static_cast<std::size_t>(node)].back = std::move(fn);
  }

  Matrix& grad(int node) { return grads_[static_cast<std::size_t>(node)]; }

  void accumulate(int node, const Matrix& g) {
    if (node < 0) return;
    Matrix& dst = grads_[static_cast<std::size_t>(node)];
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
  }

  // Gradient of a scalar loss w.r.t. every parameter registered in `ps`.
  // Parameters not reachable from the loss get zero gradients.
  GradMap backward(const Tensor& loss, const ParamStore& ps) {
    require(loss.graph == this, "backward: loss does not belong to this graph");
    require(loss.value.rows == 1 && loss.value.cols == 1,
            "backward: loss must be a scalar, got " + loss.value.shape_str());
    grads_.clear();
    grads_.reserve(nodes_.size());
    for (const auto& n : nodes_) grads_.emplace_back(n.rows, n.cols);
    grads_[static_cast<std::size_t>(loss.node)](0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i > 0; --i) {
      auto& fn = nodes_[i - 1].back;
      if (fn) fn(*this);
    }
    GradMap out;
    for (const auto& name : ps.names()) {
      auto it = param_lookup_.find(name);
      if (it != param_lookup_.end()) {
        out.emplace(name, grads_[static_cast<std::size_t>(it->second)]);
      } else {
        const Matrix& p = ps.at(name);
        out.emplace(name, Matrix(p.rows, p.cols));
      }
    }
    return out;
  }

  // Smallest |pre-activation| seen by any relu recorded on this graph.
  // Finite-difference checks reject draws where this is ~0.
  double relu_kink_margin() const { return relu_margin_; }
  void note_relu_margin(double m) { relu_margin_ = std::min(relu_margin_, m); }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct NodeInfo {
    std::size_t rows, cols;
    std::function<void(Graph&)> back;
  };
  std::vector<NodeInfo> nodes_;
  std::vector<Matrix> grads_;
  std::unordered_map<std::string, int> param_lookup_;
  double relu_margin_ = std::numeric_limits<double>::infinity();
};

namespace detail {

inline Graph* common_graph(std::initializer_list<const Tensor*> ts) {
  Graph* g = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (g == nullptr) g = t->graph;
    require(g == t->graph, "operands belong to different graphs");
  }
  return g;
}

inline Tensor make_result(Graph* g, Matrix value,
                          const std::function<void(Graph&, int)>& record) {
  Tensor out(std::move(value));
  if (g != nullptr) {
    out.graph = g;
    out.node = g->new_node(out.value.rows, out.value.cols);
    record(*g, out.node);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Recorded operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.value.cols != b.value.rows)
    throw validation_error("matmul: inner dimensions disagree: " +
                           a.value.shape_str() + " * " + b.value.shape_str());
  Matrix out = matmul_values(a.value, b.value);
  Graph* g = detail::common_graph({&a, &b});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int na = a.node, nb = b.node;
    Matrix av = a.value, bv = b.value;
    gr.set_backward(node, [node, na, nb, av, bv](Graph& gg) {
      const Matrix& go = gg.grad(node);
      if (na >= 0) gg.accumulate(na, matmul_values(go, transpose(bv)));
      if (nb >= 0) gg.accumulate(nb, matmul_values(transpose(av), go));
    });
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.value.same_shape(b.value),
          "add: shape mismatch " + a.value.shape_str() + " vs " + b.value.shape_str());
  Matrix out = a.value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value.data[i];
  Graph* g = detail::common_graph({&a, &b});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int na = a.node, nb = b.node;
    gr.set_backward(node, [node, na, nb](Graph& gg) {
      const Matrix& go = gg.grad(node);
      gg.accumulate(na, go);
      gg.accumulate(nb, go);
    });
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.value.same_shape(b.value),
          "sub: shape mismatch " + a.value.shape_str() + " vs " + b.value.shape_str());
  Matrix out = a.value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value.data[i];
  Graph* g = detail::common_graph({&a, &b});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int na = a.node, nb = b.node;
    gr.set_backward(node, [node, na, nb](Graph& gg) {
      const Matrix& go = gg.grad(node);
      gg.accumulate(na, go);
      if (nb >= 0) {
        Matrix neg = go;
        for (double& v : neg.data) v = -v;
        gg.accumulate(nb, neg);
      }
    });
  });
}

inline Tensor mul_elem(const Tensor& a, const Tensor& b) {
  require(a.value.same_shape(b.value), "mul_elem: shape mismatch " +
                                           a.value.shape_str() + " vs " +
                                           b.value.shape_str());
  Matrix out = a.value;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value.data[i];
  Graph* g = detail::common_graph({&a, &b});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int na = a.node, nb = b.node;
    Matrix av = a.value, bv = b.value;
    gr.set_backward(node, [node, na, nb, av, bv](Graph& gg) {
      const Matrix& go = gg.grad(node);
      if (na >= 0) {
        Matrix d = go;
        for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] *= bv.data[i];
        gg.accumulate(na, d);
      }
      if (nb >= 0) {
        Matrix d = go;
        for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] *= av.data[i];
        gg.accumulate(nb, d);
      }
    });
  });
}

inline Tensor scale(const Tensor& a, double s) {
  Matrix out = a.value;
  for (double& v : out.data) v *= s;
  Graph* g = detail::common_graph({&a});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int na = a.node;
    gr.set_backward(node, [node, na, s](Graph& gg) {
      Matrix d = gg.grad(node);
      for (double& v : d.data) v *= s;
      gg.accumulate(na, d);
    });
  });
}

// x: n x c, bias: 1 x c, broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require(bias.value.rows == 1 && bias.value.cols == x.value.cols,
          "add_row_bias: bias must be 1x" + std::to_string(x.value.cols) +
              ", got " + bias.value.shape_str());
  Matrix out = x.value;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += bias.value(0, c);
  Graph* g = detail::common_graph({&x, &bias});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int nx = x.node, nb = bias.node;
    gr.set_backward(node, [node, nx, nb](Graph& gg) {
      const Matrix& go = gg.grad(node);
      gg.accumulate(nx, go);
      if (nb >= 0) {
        Matrix d(1, go.cols);
        for (std::size_t r = 0; r < go.rows; ++r)
          for (std::size_t c = 0; c < go.cols; ++c) d(0, c) += go(r, c);
        gg.accumulate(nb, d);
      }
    });
  });
}

inline Tensor relu(const Tensor& a) {
  Matrix out = a.value;
  double margin = std::numeric_limits<double>::infinity();
  for (double& v : out.data) {
    margin = std::min(margin, std::fabs(v));
    if (v < 0.0) v = 0.0;
  }
  Graph* g = detail::common_graph({&a});
  if (g != nullptr && !a.value.data.empty()) g->note_relu_margin(margin);
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int na = a.node;
    Matrix av = a.value;
    gr.set_backward(node, [node, na, av](Graph& gg) {
      Matrix d = gg.grad(node);
      for (std::size_t i = 0; i < d.data.size(); ++i)
        if (av.data[i] <= 0.0) d.data[i] = 0.0;
      gg.accumulate(na, d);
    });
  });
}

namespace detail {

inline Matrix softmax_rows_values(const Matrix& x) {
  Matrix out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < x.cols; ++c) mx = std::max(mx, x(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) {
      out(r, c) = std::exp(x(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < x.cols; ++c) out(r, c) /= z;
  }
  return out;
}

}  // namespace detail

// Row-wise softmax, stabilized by per-row max subtraction.
inline Tensor softmax_rows(const Tensor& logits) {
  Matrix p = detail::softmax_rows_values(logits.value);
  Graph* g = detail::common_graph({&logits});
  return detail::make_result(g, p, [&](Graph& gr, int node) {
    int nx = logits.node;
    gr.set_backward(node, [node, nx, p](Graph& gg) {
      // dx_rc = p_rc * (dp_rc - sum_j dp_rj * p_rj)
      const Matrix& dp = gg.grad(node);
      Matrix d(p.rows, p.cols);
      for (std::size_t r = 0; r < p.rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < p.cols; ++c) dot += dp(r, c) * p(r, c);
        for (std::size_t c = 0; c < p.cols; ++c)
          d(r, c) = p(r, c) * (dp(r, c) - dot);
      }
      gg.accumulate(nx, d);
    });
  });
}

// Mean cross-entropy over rows with integer labels, fused with a stable
// log-softmax so large logits cannot overflow.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const Matrix& x = logits.value;
  require(labels.size() == x.rows,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for " +
              std::to_string(x.rows) + " rows");
  require(x.rows > 0, "cross_entropy: empty batch");
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < x.cols,
            "cross_entropy: label " + std::to_string(y) + " outside [0, " +
                std::to_string(x.cols) + ")");
  Matrix p = detail::softmax_rows_values(x);
  double loss = 0.0;
  for (std::size_t r = 0; r < x.rows; ++r) {
    // log p = (x - max) - log(sum exp(x - max)), evaluated from p for the
    // picked class only; recompute the stable pieces for accuracy.
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < x.cols; ++c) mx = std::max(mx, x(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) z += std::exp(x(r, c) - mx);
    std::size_t y = static_cast<std::size_t>(labels[r]);
    loss -= (x(r, y) - mx) - std::log(z);
  }
  loss /= static_cast<double>(x.rows);
  Graph* g = detail::common_graph({&logits});
  return detail::make_result(g, Matrix::scalar(loss), [&](Graph& gr, int node) {
    int nx = logits.node;
    std::vector<int> ys = labels;
    gr.set_backward(node, [node, nx, p, ys](Graph& gg) {
      double go = gg.grad(node)(0, 0);
      double inv_n = 1.0 / static_cast<double>(p.rows);
      Matrix d = p;
      for (std::size_t r = 0; r < p.rows; ++r)
        d(r, static_cast<std::size_t>(ys[r])) -= 1.0;
      for (double& v : d.data) v *= go * inv_n;
      gg.accumulate(nx, d);
    });
  });
}

// Mean over rows of the squared L2 norm of each row.
inline Tensor l2_sq(const Tensor& a) {
  const Matrix& x = a.value;
  require(x.rows > 0, "l2_sq: empty input");
  double s = 0.0;
  for (double v : x.data) s += v * v;
  s /= static_cast<double>(x.rows);
  Graph* g = detail::common_graph({&a});
  return detail::make_result(g, Matrix::scalar(s), [&](Graph& gr, int node) {
    int na = a.node;
    Matrix xv = x;
    gr.set_backward(node, [node, na, xv](Graph& gg) {
      double go = gg.grad(node)(0, 0);
      double c = 2.0 * go / static_cast<double>(xv.rows);
      Matrix d = xv;
      for (double& v : d.data) v *= c;
      gg.accumulate(na, d);
    });
  });
}

// Mean over rows of the Shannon entropy of each row (rows must already be
// probability vectors). 0*log(0) is treated as 0 with zero gradient there.
inline Tensor mean_entropy(const Tensor& probs) {
  const Matrix& p = probs.value;
  require(p.rows > 0, "mean_entropy: empty input");
  double h = 0.0;
  for (double v : p.data)
    if (v > 0.0) h -= v * std::log(v);
  h /= static_cast<double>(p.rows);
  Graph* g = detail::common_graph({&probs});
  return detail::make_result(g, Matrix::scalar(h), [&](Graph& gr, int node) {
    int np = probs.node;
    Matrix pv = p;
    gr.set_backward(node, [node, np, pv](Graph& gg) {
      double go = gg.grad(node)(0, 0);
      double inv_n = go / static_cast<double>(pv.rows);
      Matrix d(pv.rows, pv.cols);
      for (std::size_t i = 0; i < pv.data.size(); ++i)
        d.data[i] = pv.data[i] > 0.0 ? -(std::log(pv.data[i]) + 1.0) * inv_n : 0.0;
      gg.accumulate(np, d);
    });
  });
}

// Horizontal concatenation; all inputs share the row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  std::size_t rows = parts[0].value.rows, cols = 0;
  for (const Tensor& t : parts) {
    require(t.value.rows == rows, "concat_cols: row mismatch " +
                                      parts[0].value.shape_str() + " vs " +
                                      t.value.shape_str());
    cols += t.value.cols;
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < t.value.cols; ++c)
        out(r, off + c) = t.value(r, c);
    off += t.value.cols;
  }
  Graph* g = nullptr;
  for (const Tensor& t : parts) {
    if (!t.tracked()) continue;
    if (g == nullptr) g = t.graph;
    require(g == t.graph, "concat_cols: operands belong to different graphs");
  }
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (const Tensor& t : parts) {
      ids.push_back(t.node);
      widths.push_back(t.value.cols);
    }
    gr.set_backward(node, [node, ids, widths, rows](Graph& gg) {
      const Matrix& go = gg.grad(node);
      std::size_t off = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (ids[k] >= 0) {
          Matrix d(rows, widths[k]);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < widths[k]; ++c) d(r, c) = go(r, off + c);
          gg.accumulate(ids[k], d);
        }
        off += widths[k];
      }
    });
  });
}

// Column gather with one index list shared by every row. Duplicate indices
// scatter-add in backward.
inline Tensor gather_cols(const Tensor& x, const std::vector<std::size_t>& idx) {
  const Matrix& v = x.value;
  for (std::size_t c : idx)
    require(c < v.cols, "gather_cols: index " + std::to_string(c) +
                            " outside 0.." + std::to_string(v.cols - 1));
  Matrix out(v.rows, idx.size());
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t j = 0; j < idx.size(); ++j) out(r, j) = v(r, idx[j]);
  Graph* g = detail::common_graph({&x});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int nx = x.node;
    std::vector<std::size_t> ix = idx;
    std::size_t rows = v.rows, cols = v.cols;
    gr.set_backward(node, [node, nx, ix, rows, cols](Graph& gg) {
      const Matrix& go = gg.grad(node);
      Matrix d(rows, cols);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ix.size(); ++j) d(r, ix[j]) += go(r, j);
      gg.accumulate(nx, d);
    });
  });
}

// Column gather with a separate index list per row (all lists equal length).
inline Tensor gather_cols_per_row(const Tensor& x,
                                  const std::vector<std::vector<std::size_t>>& idx) {
  const Matrix& v = x.value;
  require(idx.size() == v.rows, "gather_cols_per_row: " +
                                    std::to_string(idx.size()) +
                                    " index rows for " + std::to_string(v.rows) +
                                    " data rows");
  require(!idx.empty(), "gather_cols_per_row: empty input");
  std::size_t w = idx[0].size();
  for (const auto& row : idx) {
    require(row.size() == w, "gather_cols_per_row: ragged index rows");
    for (std::size_t c : row)
      require(c < v.cols, "gather_cols_per_row: index " + std::to_string(c) +
                              " outside 0.." + std::to_string(v.cols - 1));
  }
  Matrix out(v.rows, w);
  for (std::size_t r = 0; r < v.rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out(r, j) = v(r, idx[r][j]);
  Graph* g = detail::common_graph({&x});
  return detail::make_result(g, std::move(out), [&](Graph& gr, int node) {
    int nx = x.node;
    std::vector<std::vector<std::size_t>> ix = idx;
    std::size_t rows = v.rows, cols = v.cols;
    gr.set_backward(node, [node, nx, ix, rows, cols](Graph& gg) {
      const Matrix& go = gg.grad(node);
      Matrix d(rows, cols);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ix[r].size(); ++j) d(r, ix[r][j]) += go(r, j);
      gg.accumulate(nx, d);
    });
  });
}

// Sum of a list of scalar tensors (used to combine loss terms).
inline Tensor add_scalars(const std::vector<Tensor>& terms) {
  require(!terms.empty(), "add_scalars: no terms");
  Tensor acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace mmosdg

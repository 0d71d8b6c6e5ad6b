#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmosdg/autodiff.hpp"
#include "mmosdg/errors.hpp"
#include "mmosdg/matrix.hpp"
#include "mmosdg/rng.hpp"

namespace mmosdg {

// Adam with bias correction. Moment buffers are created lazily per parameter
// and keyed by name, so one state object can drive a whole ParamStore.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long step = 0;
  std::unordered_map<std::string, Matrix> m, v;
};

inline void adam_step(ParamStore& ps, AdamState& st, const GradMap& grads,
                      double lr) {
  st.step += 1;
  double b1t = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  double b2t = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (const std::string& name : ps.names()) {
    auto git = grads.find(name);
    require(git != grads.end(), "adam_step: no gradient for parameter " + name);
    Matrix& p = ps.at(name);
    const Matrix& g = git->second;
    require(p.same_shape(g), "adam_step: gradient shape " + g.shape_str() +
                                 " for parameter " + name + " of shape " +
                                 p.shape_str());
    Matrix& m = st.m.try_emplace(name, p.rows, p.cols).first->second;
    Matrix& v = st.v.try_emplace(name, p.rows, p.cols).first->second;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = st.beta1 * m.data[i] + (1.0 - st.beta1) * g.data[i];
      v.data[i] = st.beta2 * v.data[i] + (1.0 - st.beta2) * g.data[i] * g.data[i];
      double mh = m.data[i] / b1t;
      double vh = v.data[i] / b2t;
      p.data[i] -= lr * mh / (std::sqrt(vh) + st.eps);
    }
  }
}

// Fully connected stack: affine+ReLU for each hidden layer, final affine
// bare. dims lists every width including input and output; with fewer than
// two entries the block is the identity map (no parameters).
struct MlpSpec {
  std::vector<std::size_t> dims;

  bool is_identity() const { return dims.size() <= 1; }
  std::size_t layer_count() const {
    return is_identity() ? 0 : dims.size() - 1;
  }
};

inline std::size_t mlp_param_count(const MlpSpec& spec) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < spec.dims.size(); ++i)
    n += spec.dims[i] * spec.dims[i + 1] + spec.dims[i + 1];
  return n;
}

// Registers W0,b0,W1,b1,... under `prefix`. Weights are U(-s, s) with
// s = sqrt(1/fan_in); biases start at zero.
inline void mlp_init(ParamStore& ps, const std::string& prefix,
                     const MlpSpec& spec, Rng& rng) {
  for (std::size_t i = 0; i + 1 < spec.dims.size(); ++i) {
    std::size_t fan_in = spec.dims[i], fan_out = spec.dims[i + 1];
    require(fan_in > 0 && fan_out > 0,
            "mlp_init: zero-width layer in " + prefix);
    double s = std::sqrt(1.0 / static_cast<double>(fan_in));
    Matrix w(fan_in, fan_out);
    for (double& x : w.data) x = rng.uniform(-s, s);
    ps.add(prefix + "/W" + std::to_string(i), std::move(w));
    ps.add(prefix + "/b" + std::to_string(i), Matrix(1, fan_out));
  }
}

inline Tensor mlp_forward(Graph& g, ParamStore& ps, const std::string& prefix,
                          const MlpSpec& spec, const Tensor& input) {
  if (spec.is_identity()) return input;
  require(input.value.cols == spec.dims.front(),
          "mlp_forward: input width " + std::to_string(input.value.cols) +
              " does not match " + prefix + " first layer width " +
              std::to_string(spec.dims.front()));
  Tensor h = input;
  std::size_t layers = spec.layer_count();
  for (std::size_t i = 0; i < layers; ++i) {
    Tensor w = g.param(ps, prefix + "/W" + std::to_string(i));
    Tensor b = g.param(ps, prefix + "/b" + std::to_string(i));
    h = add_row_bias(matmul(h, w), b);
    if (i + 1 < layers) h = relu(h);
  }
  return h;
}

}  // namespace mmosdg

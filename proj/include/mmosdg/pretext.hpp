#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmosdg/autodiff.hpp"
#include "mmosdg/errors.hpp"
#include "mmosdg/net.hpp"
#include "mmosdg/rng.hpp"

namespace mmosdg {

struct JigsawConfig {
  std::size_t p = 4;    // parts per modality
  std::size_t q = 128;  // permutation classes
  std::uint64_t seed = 0;

  void validate() const {
    require(p >= 1, "JigsawConfig.p: must be at least 1");
    require(q >= 1, "JigsawConfig.q: must be at least 1");
  }
};

struct PermutationSet {
  // perms[p] is a bijection on chunk indices 0..M*P-1; its position p is the
  // class label the jigsaw head must recover.
  std::vector<std::vector<std::size_t>> perms;

  std::size_t size() const { return perms.size(); }
};

inline nlohmann::json permutation_set_to_json(const PermutationSet& ps) {
  return nlohmann::json(ps.perms);
}

inline PermutationSet permutation_set_from_json(const nlohmann::json& j) {
  PermutationSet ps;
  try {
    ps.perms = j.get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("malformed permutation set: ") + e.what());
  }
  return ps;
}

// Zeroes exactly floor(beta*e) positions per row, chosen uniformly without
// replacement, fresh per row per call. Gradient through surviving entries is
// untouched; masked entries contribute none.
inline Tensor mask(const Tensor& e, double beta, Rng& rng) {
  require(beta >= 0.0 && beta <= 1.0,
          "mask: beta must be in [0,1], got " + std::to_string(beta));
  std::size_t cols = e.value.cols;
  std::size_t n_mask = static_cast<std::size_t>(
      std::floor(beta * static_cast<double>(cols)));
  if (n_mask == 0) return e;
  Matrix keep(e.value.rows, cols, 1.0);
  std::vector<std::size_t> idx(cols);
  for (std::size_t r = 0; r < e.value.rows; ++r) {
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    for (std::size_t t = 0; t < n_mask; ++t) keep(r, idx[t]) = 0.0;
  }
  Graph* g = e.graph;
  Tensor keep_t = g ? g->constant(std::move(keep)) : Tensor(std::move(keep));
  return mul_elem(e, keep_t);
}

// Plain cross-modal translation: mean over the M(M-1) ordered pairs of the
// batch-mean squared error between MLP_{i->j}(E^i) and E^j.
inline Tensor translation_loss(Graph& g, MultimodalNet& net,
                               const std::vector<Tensor>& embeds) {
  require(embeds.size() >= 2, "translation requires >= 2 modalities");
  std::size_t m = embeds.size();
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      terms.push_back(l2_sq(sub(net.translate(g, i, j, embeds[i]), embeds[j])));
    }
  double norm = 1.0 / static_cast<double>(m * (m - 1));
  return scale(add_scalars(terms), norm);
}

// Masked variant: the translator input is masked fresh for every ordered
// pair; the target embedding stays unmasked.
inline Tensor masked_translation_loss(Graph& g, MultimodalNet& net,
                                      const std::vector<Tensor>& embeds,
                                      double beta, Rng& rng) {
  require(embeds.size() >= 2, "translation requires >= 2 modalities");
  std::size_t m = embeds.size();
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      Tensor masked = mask(embeds[i], beta, rng);
      terms.push_back(l2_sq(sub(net.translate(g, i, j, masked), embeds[j])));
    }
  double norm = 1.0 / static_cast<double>(m * (m - 1));
  return scale(add_scalars(terms), norm);
}

namespace detail {

// True iff n! >= q, evaluated without overflow.
inline bool factorial_at_least(std::size_t n, std::size_t q) {
  unsigned long long acc = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (acc >= q) return true;
    acc *= i;
  }
  return acc >= q;
}

inline std::string factorial_str(std::size_t n) {
  unsigned long long acc = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (acc > (1ULL << 62)) return "> 2^62";
    acc *= i;
  }
  return std::to_string(acc);
}

}  // namespace detail

// Q distinct uniform permutations of 0..M*P-1, sampled by rejection so the
// result is stable for a fixed generator state.
inline PermutationSet build_permutation_set(std::size_t m, std::size_t p,
                                            std::size_t q, Rng& rng) {
  require(m >= 1 && p >= 1, "build_permutation_set: M and P must be positive");
  require(q >= 1, "build_permutation_set: Q must be positive");
  std::size_t n = m * p;
  if (!detail::factorial_at_least(n, q))
    throw validation_error("permutation pool exhausted: Q=" + std::to_string(q) +
                           " exceeds (M*P)! = " + detail::factorial_str(n));
  PermutationSet out;
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  while (out.perms.size() < q) {
    rng.shuffle(perm);
    if (seen.insert(perm).second) out.perms.push_back(perm);
  }
  return out;
}

inline std::vector<std::size_t> permutation_inverse(
    const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t s = 0; s < perm.size(); ++s) {
    require(perm[s] < perm.size(), "permutation_inverse: not a permutation");
    inv[perm[s]] = s;
  }
  return inv;
}

// Column order realizing a chunk permutation on the concatenation
// [E^1 || ... || E^M]. Chunk c = k*P + part covers the part-th of P equal
// slices of modality k; output slot s holds chunk perm[s].
inline std::vector<std::size_t> recompose_columns(
    const std::vector<std::size_t>& embed_dims, std::size_t p,
    const std::vector<std::size_t>& perm) {
  std::size_t m = embed_dims.size();
  require(perm.size() == m * p, "recompose: permutation length " +
                                    std::to_string(perm.size()) +
                                    " (expected " + std::to_string(m * p) + ")");
  std::vector<std::size_t> offsets(m, 0);
  for (std::size_t k = 0; k < m; ++k) {
    require(embed_dims[k] % p == 0,
            "recompose: embedding dim " + std::to_string(embed_dims[k]) +
                " of modality " + std::to_string(k) +
                " not divisible by P=" + std::to_string(p));
    if (k + 1 < m) offsets[k + 1] = offsets[k] + embed_dims[k];
  }
  std::vector<std::size_t> cols;
  std::vector<bool> used(m * p, false);
  for (std::size_t s = 0; s < perm.size(); ++s) {
    std::size_t c = perm[s];
    require(c < m * p && !used[c], "recompose: invalid permutation");
    used[c] = true;
    std::size_t k = c / p, part = c % p;
    std::size_t w = embed_dims[k] / p;
    std::size_t start = offsets[k] + part * w;
    for (std::size_t t = 0; t < w; ++t) cols.push_back(start + t);
  }
  return cols;
}

inline Tensor recompose(const std::vector<Tensor>& embeds, std::size_t p,
                        const std::vector<std::size_t>& perm) {
  require(!embeds.empty(), "recompose: no embeddings");
  std::vector<std::size_t> dims;
  for (const Tensor& e : embeds) dims.push_back(e.value.cols);
  Tensor cat = concat_cols(embeds);
  return gather_cols(cat, recompose_columns(dims, p, perm));
}

// One permutation label per sample per call: recompose that sample's chunks
// with the drawn permutation and train the jigsaw head to recover the label.
inline Tensor jigsaw_loss(Graph& g, MultimodalNet& net,
                          const std::vector<Tensor>& embeds, std::size_t p,
                          const PermutationSet& perm_set, Rng& rng) {
  require(!embeds.empty(), "jigsaw_loss: no embeddings");
  require(perm_set.size() >= 1, "jigsaw_loss: empty permutation set");
  require(perm_set.size() == net.config().q,
          "jigsaw_loss: permutation set size " +
              std::to_string(perm_set.size()) + " does not match head width " +
              std::to_string(net.config().q));
  std::vector<std::size_t> dims;
  for (const Tensor& e : embeds) dims.push_back(e.value.cols);
  std::size_t n = embeds[0].value.rows;
  std::vector<int> labels(n);
  std::vector<std::vector<std::size_t>> row_cols(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t lbl = rng.index(perm_set.size());
    labels[r] = static_cast<int>(lbl);
    row_cols[r] = recompose_columns(dims, p, perm_set.perms[lbl]);
  }
  Tensor cat = concat_cols(embeds);
  Tensor shuffled = gather_cols_per_row(cat, row_cols);
  Tensor logits = net.jigsaw_logits(g, shuffled);
  return cross_entropy(logits, labels);
}

}  // namespace mmosdg

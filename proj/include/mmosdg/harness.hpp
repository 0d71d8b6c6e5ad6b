#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmosdg/autodiff.hpp"
#include "mmosdg/errors.hpp"
#include "mmosdg/matrix.hpp"
#include "mmosdg/net.hpp"
#include "mmosdg/nn.hpp"
#include "mmosdg/objective.hpp"
#include "mmosdg/openset.hpp"
#include "mmosdg/pretext.hpp"
#include "mmosdg/rng.hpp"
#include "mmosdg/synthgen.hpp"

namespace mmosdg {

// Independent seed streams for each consumer inside a run, so adding or
// removing one consumer (e.g. target-side shuffling) cannot shift the others.
enum HarnessSeedTag : std::uint64_t {
  kNetInitTag = 0x100,
  kPermSetTag = 0x101,
  kLoopTag = 0x102,
  kTargetLoopTag = 0x103,
  kSplitTag = 0x104,
  kDataTag = 0x105,
  kGradCheckTag = 0x106,
};

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct EpochStats {
  double l_cls = 0.0;
  double l_masked_trans = 0.0;
  double l_muljig = 0.0;
  double l_entmin = 0.0;
  double total = 0.0;
  std::vector<double> weights;  // mean w_0 (joint) .. w_M over the epoch
  double val_acc = 0.0;
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  std::size_t selected_epoch = 0;  // argmax val_acc, ties toward the earliest
};

struct TrainOutput {
  MultimodalNet net;  // parameters restored to the selected epoch's snapshot
  TrainHistory history;
};

namespace detail {

inline std::vector<Matrix> dataset_matrices(const Dataset& ds) {
  std::vector<Matrix> mods;
  mods.reserve(ds.meta.modality_dims.size());
  for (std::size_t k = 0; k < ds.meta.modality_dims.size(); ++k)
    mods.push_back(modality_matrix(ds, k));
  return mods;
}

inline void require_known_labels(const Dataset& ds, std::size_t n_classes,
                                 const std::string& who) {
  for (const MultimodalSample& s : ds.samples)
    require(s.label >= 0 && static_cast<std::size_t>(s.label) < n_classes,
            who + ": label " + std::to_string(s.label) +
                " outside the known range [0," + std::to_string(n_classes) +
                ")");
}

inline Dataset pool_sources(const std::vector<Dataset>& sources) {
  require(!sources.empty(), "pool_sources: no source datasets");
  Dataset out;
  out.meta = sources[0].meta;
  for (const Dataset& src : sources) {
    require(src.meta.modality_dims == out.meta.modality_dims,
            "pool_sources: modality dims differ between sources");
    out.samples.insert(out.samples.end(), src.samples.begin(),
                       src.samples.end());
  }
  return out;
}

}  // namespace detail

// Closed-set accuracy of the joint head; drives model selection.
inline double joint_accuracy(MultimodalNet& net, const Dataset& ds) {
  require(!ds.samples.empty(), "joint_accuracy: empty dataset");
  Graph g;
  std::vector<Matrix> mods = detail::dataset_matrices(ds);
  Matrix probs = net.predict_joint(g, net.encode_all(g, mods)).value;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < probs.rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < probs.cols; ++j)
      if (probs(i, j) > probs(i, best)) best = j;
    if (ds.samples[i].label == static_cast<int>(best)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.samples.size());
}

namespace detail {

// Shared mini-batch loop. `target` enables adaptation: after the warm-up
// epochs the target pool is re-filtered by confidence each epoch and one
// (cycled) target batch accompanies every source batch. Target labels are
// never read. With no target, or an empty filtered set, every step consumes
// exactly the same rng draws as the generalization path, so those runs agree
// bitwise with train_dg.
inline TrainOutput train_loop(const NetConfig& nc, const TrainConfig& tc,
                              const Dataset& train_set, const Dataset& val_set,
                              const Dataset* target, std::uint64_t seed) {
  tc.validate();
  require(!train_set.samples.empty(), "train: empty training set");
  require(!val_set.samples.empty(), "train: empty validation set");
  require(train_set.meta.modality_dims == nc.modality_dims,
          "train: dataset modality dims do not match the net config");
  require_known_labels(train_set, nc.n_classes, "train");
  require_known_labels(val_set, nc.n_classes, "train (validation)");
  if (target != nullptr)
    require(target->meta.modality_dims == nc.modality_dims,
            "train: target modality dims do not match the net config");

  const std::size_t m = nc.modality_dims.size();
  Rng perm_rng(mix_seed(seed, kPermSetTag));
  PermutationSet perms = build_permutation_set(m, tc.p, tc.q, perm_rng);
  Rng net_rng(mix_seed(seed, kNetInitTag));
  MultimodalNet net(nc, net_rng);
  Rng loop_rng(mix_seed(seed, kLoopTag));
  Rng tgt_rng(mix_seed(seed, kTargetLoopTag));
  AdamState opt;

  ParamStore best_params = net.params();
  double best_val = -std::numeric_limits<double>::infinity();
  TrainHistory history;
  history.epochs.reserve(tc.epochs);

  std::vector<std::size_t> order(train_set.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    const bool in_warmup = target != nullptr && epoch < tc.da_warmup_epochs;

    std::vector<std::size_t> kept;
    std::size_t tgt_cursor = 0;
    if (target != nullptr && !in_warmup) {
      std::vector<Matrix> tgt_all = dataset_matrices(*target);
      kept = filter_known_targets(net, tgt_all, tc.tau).kept;
      if (!kept.empty()) tgt_rng.shuffle(kept);
    }

    loop_rng.shuffle(order);
    EpochStats stats;
    stats.weights.assign(m + 1, 0.0);
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += tc.batch_size) {
      std::size_t stop = std::min(order.size(), start + tc.batch_size);
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
      std::vector<Matrix> src_mods = batch_matrices(train_set, idx);
      std::vector<int> src_labels = batch_labels(train_set, idx);

      Graph g;
      LossParts parts;
      if (target == nullptr) {
        parts = total_loss_dg(g, net, src_mods, src_labels, tc, perms, loop_rng);
      } else {
        std::vector<Matrix> tgt_mods;
        if (!in_warmup && !kept.empty()) {
          std::vector<std::size_t> tgt_idx(tc.batch_size);
          for (std::size_t i = 0; i < tc.batch_size; ++i)
            tgt_idx[i] = kept[(tgt_cursor + i) % kept.size()];
          tgt_cursor = (tgt_cursor + tc.batch_size) % kept.size();
          tgt_mods = batch_matrices(*target, tgt_idx);
        }
        parts = total_loss_da(g, net, src_mods, src_labels, tgt_mods, tc, perms,
                              loop_rng, in_warmup);
      }
      GradMap grads = g.backward(parts.total_tensor, net.params());
      adam_step(net.params(), opt, grads, tc.lr);

      stats.l_cls += parts.l_cls;
      stats.l_masked_trans += parts.l_masked_trans;
      stats.l_muljig += parts.l_muljig;
      stats.l_entmin += parts.l_entmin;
      stats.total += parts.total;
      for (std::size_t w = 0; w < stats.weights.size(); ++w)
        stats.weights[w] += parts.weights[w];
      ++batches;
    }
    const double inv = 1.0 / static_cast<double>(batches);
    stats.l_cls *= inv;
    stats.l_masked_trans *= inv;
    stats.l_muljig *= inv;
    stats.l_entmin *= inv;
    stats.total *= inv;
    for (double& w : stats.weights) w *= inv;

    stats.val_acc = joint_accuracy(net, val_set);
    if (stats.val_acc > best_val) {
      best_val = stats.val_acc;
      best_params = net.params();
      history.selected_epoch = epoch;
    }
    stats.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    history.epochs.push_back(std::move(stats));
  }

  net.params() = best_params;
  return TrainOutput{std::move(net), std::move(history)};
}

}  // namespace detail

inline TrainOutput train_dg(const NetConfig& nc, const TrainConfig& tc,
                            const Dataset& train_set, const Dataset& val_set,
                            std::uint64_t seed) {
  return detail::train_loop(nc, tc, train_set, val_set, nullptr, seed);
}

inline TrainOutput train_da(const NetConfig& nc, const TrainConfig& tc,
                            const Dataset& train_set, const Dataset& val_set,
                            const Dataset& target, std::uint64_t seed) {
  return detail::train_loop(nc, tc, train_set, val_set, &target, seed);
}

inline void write_train_log(const std::string& path, const TrainHistory& h,
                            std::size_t m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << "epoch,l_cls,l_masked_trans,l_muljig,l_entmin,total,val_acc";
  for (std::size_t w = 0; w <= m; ++w) out << ",w_" << w;
  out << '\n';
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    const EpochStats& s = h.epochs[e];
    out << e << ',' << format_double(s.l_cls) << ','
        << format_double(s.l_masked_trans) << ',' << format_double(s.l_muljig)
        << ',' << format_double(s.l_entmin) << ',' << format_double(s.total)
        << ',' << format_double(s.val_acc);
    for (double w : s.weights) out << ',' << format_double(w);
    out << '\n';
  }
  if (!out) throw io_error("failed while writing '" + path + "'");
}

// ---------------------------------------------------------------------------
// Target evaluation
// ---------------------------------------------------------------------------

// Open-set evaluation of a trained net on the target split. `fit_set` feeds
// the Mahalanobis fit (class-conditional Gaussians over concatenated source
// embeddings); the other scores ignore it.
inline EvalReport evaluate_target(MultimodalNet& net, const Dataset& fit_set,
                                  const Dataset& target, ScoreMethod method,
                                  double threshold) {
  require(!target.samples.empty(), "evaluate_target: empty target set");
  Graph g;
  std::vector<Matrix> mods = detail::dataset_matrices(target);
  std::vector<Tensor> embed_ts = net.encode_all(g, mods);
  Matrix logits = net.joint_logits(g, embed_ts).value;
  Matrix probs = net.predict_joint(g, embed_ts).value;
  Matrix embeds = concat_cols(embed_ts).value;

  MahalanobisState maha;
  if (method == ScoreMethod::kMahalanobis) {
    Graph gf;
    std::vector<Matrix> fit_mods = detail::dataset_matrices(fit_set);
    Matrix fit_embeds = concat_cols(net.encode_all(gf, fit_mods)).value;
    maha = fit_mahalanobis(fit_embeds, label_vector(fit_set));
  }
  std::vector<double> scores = score_samples(logits, method, &maha, &embeds);
  std::vector<int> pred = classify_openset(probs, scores, threshold);
  return evaluate(pred, label_vector(target), static_cast<int>(net.config().n_classes),
                  scores);
}

// ---------------------------------------------------------------------------
// Experiment specification and JSON configuration
// ---------------------------------------------------------------------------

struct ExperimentSpec {
  SyntheticConfig data;
  bool from_manifests = false;
  std::vector<std::string> source_manifests;
  std::string target_manifest;
  nlohmann::json net_overrides = nlohmann::json::object();
  TrainConfig train;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::size_t> tasks;  // target-domain rotations; empty = {S}
  double val_fraction = 0.2;
  ScoreMethod score = ScoreMethod::kMsp;
  double threshold = 0.5;
  // disparate label sets, as pool-class indices (0..n_unknown+n_known-1)
  std::vector<std::vector<std::size_t>> source_class_sets;
  std::vector<std::size_t> target_class_set;
  std::vector<std::pair<std::size_t, std::size_t>> openness;  // (known, unknown)

  std::vector<std::size_t> task_list() const {
    if (from_manifests || tasks.empty())
      return {from_manifests ? std::size_t{0} : data.s};
    return tasks;
  }

  void validate() const {
    require(!seeds.empty(), "ExperimentSpec.seeds: need at least one seed");
    std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
    require(uniq.size() == seeds.size(),
            "ExperimentSpec.seeds: seeds must be distinct");
    require(val_fraction > 0.0 && val_fraction < 1.0,
            "ExperimentSpec.val_fraction: must be in (0,1)");
    require(std::isfinite(threshold),
            "ExperimentSpec.threshold: must be finite");
    if (from_manifests) {
      require(!source_manifests.empty(),
              "ExperimentSpec: manifests given without sources");
      require(!target_manifest.empty(),
              "ExperimentSpec: manifests given without a target");
      require(tasks.empty(),
              "ExperimentSpec.tasks: domain rotation applies to synthetic "
              "data only");
    } else {
      data.validate();
      for (std::size_t t : tasks)
        require(t <= data.s, "ExperimentSpec.tasks: target domain " +
                                 std::to_string(t) + " out of range [0," +
                                 std::to_string(data.s) + "]");
    }
    train.validate();
    if (!source_class_sets.empty() || !target_class_set.empty()) {
      require(!from_manifests,
              "ExperimentSpec: disparate label sets apply to synthetic data "
              "only");
      require(!source_class_sets.empty() && !target_class_set.empty(),
              "ExperimentSpec: disparate label sets need both source and "
              "target class sets");
      const std::size_t pool = data.n_known + data.n_unknown;
      for (const auto& set : source_class_sets)
        for (std::size_t c : set)
          require(c < pool, "ExperimentSpec.source_class_sets: class " +
                                std::to_string(c) + " out of range");
      for (std::size_t c : target_class_set)
        require(c < pool, "ExperimentSpec.target_class_set: class " +
                              std::to_string(c) + " out of range");
      for (std::size_t c : target_class_set) {
        if (c < data.n_unknown) continue;  // unknown pool classes
        bool covered = false;
        for (const auto& set : source_class_sets)
          covered = covered ||
                    std::find(set.begin(), set.end(), c) != set.end();
        require(covered, "ExperimentSpec.target_class_set: known class " +
                             std::to_string(c) + " appears in no source set");
      }
    }
    const std::size_t pool = data.n_known + data.n_unknown;
    for (const auto& [k, u] : openness) {
      require(k >= 2, "ExperimentSpec.openness: need at least 2 known "
                      "classes, got " + std::to_string(k));
      require(k + u == pool,
              "ExperimentSpec.openness: ratio " + std::to_string(k) + ":" +
                  std::to_string(u) + " does not partition the " +
                  std::to_string(pool) + "-class pool");
    }
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j,
                       const std::vector<std::string>& allowed,
                       const std::string& where) {
  require(j.is_object(), where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(std::find(allowed.begin(), allowed.end(), it.key()) != allowed.end(),
            where + ": unknown key '" + it.key() + "'");
}

template <typename T>
inline void load_key(const nlohmann::json& j, const char* key, T& out,
                     const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw validation_error(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

// Keys mirror the TrainConfig fields verbatim; absent keys keep defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::check_keys(
      j,
      {"alpha1", "alpha2", "alpha3", "beta", "p", "q", "t", "tau", "lr",
       "epochs", "batch_size", "seed", "jigsaw", "masked_translation",
       "entropy_weighting", "entropy_min", "da_warmup_epochs"},
      "train config");
  TrainConfig c;
  detail::load_key(j, "alpha1", c.alpha1, "train config");
  detail::load_key(j, "alpha2", c.alpha2, "train config");
  detail::load_key(j, "alpha3", c.alpha3, "train config");
  detail::load_key(j, "beta", c.beta, "train config");
  detail::load_key(j, "p", c.p, "train config");
  detail::load_key(j, "q", c.q, "train config");
  detail::load_key(j, "t", c.t, "train config");
  detail::load_key(j, "tau", c.tau, "train config");
  detail::load_key(j, "lr", c.lr, "train config");
  detail::load_key(j, "epochs", c.epochs, "train config");
  detail::load_key(j, "batch_size", c.batch_size, "train config");
  detail::load_key(j, "seed", c.seed, "train config");
  detail::load_key(j, "jigsaw", c.jigsaw, "train config");
  detail::load_key(j, "masked_translation", c.masked_translation, "train config");
  detail::load_key(j, "entropy_weighting", c.entropy_weighting, "train config");
  detail::load_key(j, "entropy_min", c.entropy_min, "train config");
  detail::load_key(j, "da_warmup_epochs", c.da_warmup_epochs, "train config");
  c.validate();
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"alpha1", c.alpha1},
                        {"alpha2", c.alpha2},
                        {"alpha3", c.alpha3},
                        {"beta", c.beta},
                        {"p", c.p},
                        {"q", c.q},
                        {"t", c.t},
                        {"tau", c.tau},
                        {"lr", c.lr},
                        {"epochs", c.epochs},
                        {"batch_size", c.batch_size},
                        {"seed", c.seed},
                        {"jigsaw", c.jigsaw},
                        {"masked_translation", c.masked_translation},
                        {"entropy_weighting", c.entropy_weighting},
                        {"entropy_min", c.entropy_min},
                        {"da_warmup_epochs", c.da_warmup_epochs}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j,
                     {"s", "m", "latent_dim", "modality_dims", "n_known",
                      "n_unknown", "samples_per_class_per_domain",
                      "shift_magnitude", "noise_std", "seed"},
                     "data config");
  SyntheticConfig c;
  detail::load_key(j, "s", c.s, "data config");
  detail::load_key(j, "m", c.m, "data config");
  detail::load_key(j, "latent_dim", c.latent_dim, "data config");
  detail::load_key(j, "modality_dims", c.modality_dims, "data config");
  detail::load_key(j, "n_known", c.n_known, "data config");
  detail::load_key(j, "n_unknown", c.n_unknown, "data config");
  detail::load_key(j, "samples_per_class_per_domain",
                   c.samples_per_class_per_domain, "data config");
  detail::load_key(j, "shift_magnitude", c.shift_magnitude, "data config");
  detail::load_key(j, "noise_std", c.noise_std, "data config");
  detail::load_key(j, "seed", c.seed, "data config");
  if (j.contains("modality_dims") && !j.contains("m"))
    c.m = c.modality_dims.size();
  c.validate();
  return c;
}

inline nlohmann::json synthetic_config_to_json(const SyntheticConfig& c) {
  return nlohmann::json{
      {"s", c.s},
      {"m", c.m},
      {"latent_dim", c.latent_dim},
      {"modality_dims", c.modality_dims},
      {"n_known", c.n_known},
      {"n_unknown", c.n_unknown},
      {"samples_per_class_per_domain", c.samples_per_class_per_domain},
      {"shift_magnitude", c.shift_magnitude},
      {"noise_std", c.noise_std},
      {"seed", c.seed}};
}

// Builds the net config for a given known-class count, then applies any
// overrides from the spec ("net" object keys mirror NetConfig fields).
inline NetConfig resolve_net_config(const ExperimentSpec& spec,
                                    const std::vector<std::size_t>& modality_dims,
                                    std::size_t n_classes) {
  SyntheticConfig like = spec.data;
  like.m = modality_dims.size();
  like.modality_dims = modality_dims;
  like.n_known = n_classes;
  NetConfig nc = default_net_config(like);
  nc.q = spec.train.q;  // jigsaw head width follows the training config
  const nlohmann::json& j = spec.net_overrides;
  detail::check_keys(j,
                     {"embed_dims", "q", "jigsaw_hidden", "translator_hidden",
                      "identity_encoders"},
                     "net config");
  detail::load_key(j, "embed_dims", nc.embed_dims, "net config");
  detail::load_key(j, "q", nc.q, "net config");
  detail::load_key(j, "jigsaw_hidden", nc.jigsaw_hidden, "net config");
  detail::load_key(j, "translator_hidden", nc.translator_hidden, "net config");
  detail::load_key(j, "identity_encoders", nc.identity_encoders, "net config");
  nc.validate();
  return nc;
}

inline ExperimentSpec experiment_spec_from_json(const nlohmann::json& j) {
  detail::check_keys(
      j,
      {"data", "manifests", "net", "train", "seeds", "tasks", "val_fraction",
       "score_method", "threshold", "source_class_sets", "target_class_set",
       "openness"},
      "experiment spec");
  ExperimentSpec spec;
  if (j.contains("data")) spec.data = synthetic_config_from_json(j.at("data"));
  if (j.contains("manifests")) {
    const nlohmann::json& m = j.at("manifests");
    detail::check_keys(m, {"sources", "target"}, "manifests");
    spec.from_manifests = true;
    detail::load_key(m, "sources", spec.source_manifests, "manifests");
    detail::load_key(m, "target", spec.target_manifest, "manifests");
  }
  if (j.contains("net")) spec.net_overrides = j.at("net");
  if (j.contains("train")) spec.train = train_config_from_json(j.at("train"));
  detail::load_key(j, "seeds", spec.seeds, "experiment spec");
  detail::load_key(j, "tasks", spec.tasks, "experiment spec");
  detail::load_key(j, "val_fraction", spec.val_fraction, "experiment spec");
  if (j.contains("score_method")) {
    std::string name;
    detail::load_key(j, "score_method", name, "experiment spec");
    spec.score = score_method_from_string(name);
  }
  detail::load_key(j, "threshold", spec.threshold, "experiment spec");
  detail::load_key(j, "source_class_sets", spec.source_class_sets,
                   "experiment spec");
  detail::load_key(j, "target_class_set", spec.target_class_set,
                   "experiment spec");
  std::vector<std::vector<std::size_t>> ratios;
  detail::load_key(j, "openness", ratios, "experiment spec");
  for (const auto& r : ratios) {
    require(r.size() == 2,
            "experiment spec.openness: each ratio is a [known, unknown] pair");
    spec.openness.emplace_back(r[0], r[1]);
  }
  spec.validate();
  return spec;
}

inline ExperimentSpec load_experiment_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("cannot parse config '" + path + "': " + e.what());
  }
  return experiment_spec_from_json(j);
}

// ---------------------------------------------------------------------------
// Task preparation
// ---------------------------------------------------------------------------

struct PreparedTask {
  std::string name;
  Dataset train;   // pooled+masked sources minus the validation split
  Dataset val;     // held-out source split (model selection)
  Dataset target;  // evaluation-only (DG) or unlabeled-features (DA)
  std::size_t n_classes = 0;
};

namespace detail {

// pool-class index of a sample: unknowns occupy 0..n_unknown-1, known train
// label i maps to pool class n_unknown + i.
inline Dataset mask_classes(const Dataset& ds,
                            const std::vector<std::size_t>& keep_pool,
                            std::size_t n_unknown) {
  Dataset out;
  out.meta = ds.meta;
  auto keeps = [&](std::size_t pool_class) {
    return std::find(keep_pool.begin(), keep_pool.end(), pool_class) !=
           keep_pool.end();
  };
  bool keep_unknown = false;
  for (std::size_t c = 0; c < n_unknown; ++c)
    keep_unknown = keep_unknown || keeps(c);
  for (const MultimodalSample& s : ds.samples) {
    if (s.label == kUnknownLabel) {
      if (keep_unknown) out.samples.push_back(s);
    } else if (keeps(static_cast<std::size_t>(s.label) + n_unknown)) {
      out.samples.push_back(s);
    }
  }
  return out;
}

}  // namespace detail

inline PreparedTask prepare_task(const ExperimentSpec& spec,
                                 std::size_t target_domain,
                                 std::uint64_t seed) {
  spec.validate();
  PreparedTask out;
  std::vector<Dataset> sources;
  if (spec.from_manifests) {
    out.name = "manifest";
    for (const std::string& path : spec.source_manifests)
      sources.push_back(read_manifest(path));
    out.target = read_manifest(spec.target_manifest);
    for (const Dataset& src : sources)
      require(src.meta.class_names == sources[0].meta.class_names,
              "prepare_task: source manifests disagree on classes");
    out.n_classes = sources[0].meta.class_names.size();
  } else {
    out.name = "d" + std::to_string(target_domain);
    Rng data_rng(mix_seed(mix_seed(spec.data.seed, kDataTag), seed));
    BenchmarkData bench = generate_task(spec.data, target_domain, data_rng);
    sources = std::move(bench.sources);
    out.target = std::move(bench.target);
    out.n_classes = spec.data.n_known;
    if (!spec.source_class_sets.empty()) {
      require(spec.source_class_sets.size() == sources.size(),
              "prepare_task: " + std::to_string(spec.source_class_sets.size()) +
                  " source class sets for " + std::to_string(sources.size()) +
                  " sources");
      for (std::size_t i = 0; i < sources.size(); ++i)
        sources[i] = detail::mask_classes(sources[i], spec.source_class_sets[i],
                                          spec.data.n_unknown);
      out.target = detail::mask_classes(out.target, spec.target_class_set,
                                        spec.data.n_unknown);
    }
  }
  Dataset pooled = detail::pool_sources(sources);
  detail::require_known_labels(pooled, out.n_classes, "prepare_task (sources)");
  Rng split_rng(mix_seed(seed, kSplitTag));
  auto [train_set, val_set] = split(pooled, 1.0 - spec.val_fraction, split_rng);
  out.train = std::move(train_set);
  out.val = std::move(val_set);
  return out;
}

// ---------------------------------------------------------------------------
// Result rows and sweeps
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string task;
  std::uint64_t seed = 0;
  std::string method_variant;
  double os_star = 0.0;
  double unk = std::numeric_limits<double>::quiet_NaN();
  double hos = std::numeric_limits<double>::quiet_NaN();
  double threshold = 0.0;
  ScoreMethod score_method = ScoreMethod::kMsp;
};

inline std::string variant_name(const TrainConfig& tc, bool da) {
  std::string v;
  if (!tc.jigsaw && !tc.masked_translation && !tc.entropy_weighting &&
      !tc.entropy_min) {
    v = "deepall";
  } else if (tc.jigsaw && tc.masked_translation && tc.entropy_weighting &&
             tc.entropy_min) {
    v = "full";
  } else {
    auto append = [&](bool on, const char* tag) {
      if (!on) return;
      if (!v.empty()) v += '+';
      v += tag;
    };
    append(tc.jigsaw, "muljig");
    append(tc.masked_translation, "maskedtrans");
    append(tc.entropy_weighting, "entwei");
    append(tc.entropy_min, "entmin");
  }
  if (da) v += "_da";
  return v;
}

inline void write_results_csv(const std::string& path,
                              const std::vector<ResultRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << "task,seed,method_variant,os_star,unk,hos,threshold,score_method\n";
  for (const ResultRow& r : rows) {
    out << r.task << ',' << r.seed << ',' << r.method_variant << ','
        << format_double(r.os_star) << ',' << format_double(r.unk) << ','
        << format_double(r.hos) << ',' << format_double(r.threshold) << ','
        << score_method_name(r.score_method) << '\n';
  }
  if (!out) throw io_error("failed while writing '" + path + "'");
}

struct CellOutput {
  ResultRow row;
  TrainOutput train;
  PreparedTask data;
  EvalReport report;
};

// One (task, seed, variant) experiment cell: prepare data, train, evaluate
// the target. Cells are self-contained (own rng streams, net, graph), so any
// execution order yields identical results.
inline CellOutput run_cell(const ExperimentSpec& spec, std::size_t task,
                           std::uint64_t seed, const TrainConfig& tc, bool da) {
  PreparedTask data = prepare_task(spec, task, seed);
  NetConfig nc =
      resolve_net_config(spec, data.train.meta.modality_dims, data.n_classes);
  TrainOutput trained =
      da ? train_da(nc, tc, data.train, data.val, data.target, seed)
         : train_dg(nc, tc, data.train, data.val, seed);
  EvalReport rep = evaluate_target(trained.net, data.train, data.target,
                                   spec.score, spec.threshold);
  ResultRow row;
  row.task = data.name;
  row.seed = seed;
  row.method_variant = variant_name(tc, da);
  row.os_star = rep.os_star;
  if (rep.unk_present) {
    row.unk = rep.unk;
    row.hos = rep.hos;
  }
  row.threshold = spec.threshold;
  row.score_method = spec.score;
  return CellOutput{std::move(row), std::move(trained), std::move(data),
                    std::move(rep)};
}

struct AblationRow {
  std::string name;
  TrainConfig config;
};

// The 6-row toggle ladder: none, each pretext alone, both, + weighting,
// + entropy minimization (= full).
inline std::vector<AblationRow> ablation_ladder(const TrainConfig& base) {
  auto with = [&](bool jig, bool mt, bool wei, bool ent) {
    TrainConfig c = base;
    c.jigsaw = jig;
    c.masked_translation = mt;
    c.entropy_weighting = wei;
    c.entropy_min = ent;
    return c;
  };
  std::vector<AblationRow> rows;
  rows.push_back({"deepall", with(false, false, false, false)});
  rows.push_back({"muljig", with(true, false, false, false)});
  rows.push_back({"maskedtrans", with(false, true, false, false)});
  rows.push_back({"muljig+maskedtrans", with(true, true, false, false)});
  rows.push_back({"muljig+maskedtrans+entwei", with(true, true, true, false)});
  rows.push_back({"full", with(true, true, true, true)});
  return rows;
}

// Ladder x tasks x seeds, rows emitted in ladder order (then task, then seed).
inline std::vector<ResultRow> run_ablation(const ExperimentSpec& spec,
                                           bool da = false) {
  spec.validate();
  std::vector<ResultRow> rows;
  for (const AblationRow& ab : ablation_ladder(spec.train))
    for (std::size_t task : spec.task_list())
      for (std::uint64_t seed : spec.seeds) {
        CellOutput cell = run_cell(spec, task, seed, ab.config, da);
        cell.row.method_variant = ab.name + (da ? "_da" : "");
        rows.push_back(std::move(cell.row));
      }
  return rows;
}

// Re-generates the benchmark at each known:unknown ratio (the first `unknown`
// pool classes switch roles) and trains/evaluates the configured variant.
inline std::vector<ResultRow> run_openness(const ExperimentSpec& spec,
                                           bool da = false) {
  spec.validate();
  require(!spec.openness.empty(), "run_openness: no openness ratios");
  require(!spec.from_manifests,
          "run_openness: openness sweeps apply to synthetic data only");
  std::vector<ResultRow> rows;
  for (const auto& [known, unknown] : spec.openness) {
    ExperimentSpec ratio_spec = spec;
    ratio_spec.openness.clear();
    ratio_spec.data.n_known = known;
    ratio_spec.data.n_unknown = unknown;
    for (std::size_t task : ratio_spec.task_list())
      for (std::uint64_t seed : ratio_spec.seeds) {
        CellOutput cell = run_cell(ratio_spec, task, seed, ratio_spec.train, da);
        cell.row.task += "_" + std::to_string(known) + ":" +
                         std::to_string(unknown);
        rows.push_back(std::move(cell.row));
      }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  std::uint64_t seed = 1;
  std::size_t draws = 3;        // accepted draws required
  std::size_t max_attempts = 200;
  std::size_t batch = 4;
  double h = 1e-5;              // central-difference step
  double margin_floor = 1e-4;   // reject draws with relu kinks nearer than this
  double tolerance = 1e-4;
  double corruption = 0.0;      // negative-control knob: offsets one gradient
};

struct GradCheckReport {
  std::size_t accepted = 0;
  std::size_t attempts = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::map<std::string, double> per_group;  // prefix before '/' -> max rel err
  bool pass = false;
};

inline NetConfig grad_check_net_config() {
  NetConfig nc;
  nc.modality_dims = {4, 4};
  nc.embed_dims = {8, 8};
  nc.n_classes = 3;
  nc.q = 4;
  nc.jigsaw_hidden = 8;
  return nc;
}

inline TrainConfig grad_check_train_config() {
  TrainConfig tc;
  tc.p = 2;
  tc.q = 4;
  tc.batch_size = 4;
  return tc;
}

// Central-difference check of the full training objective on a micro config.
// Draws with a relu pre-activation closer to a kink than `margin_floor` are
// rejected (a +-h probe could cross the kink and invalidate the comparison).
inline GradCheckReport grad_check(const NetConfig& nc, const TrainConfig& tc,
                                  const GradCheckOptions& opts = {}) {
  tc.validate();
  std::size_t n_params = net_param_count(nc);
  require(n_params < 5000,
          "grad_check: config has " + std::to_string(n_params) +
              " parameters; finite differences need < 5000");
  const std::size_t m = nc.modality_dims.size();
  Rng perm_rng(mix_seed(opts.seed, kPermSetTag));
  PermutationSet perms = build_permutation_set(m, tc.p, tc.q, perm_rng);

  GradCheckReport rep;
  for (std::size_t attempt = 0;
       attempt < opts.max_attempts && rep.accepted < opts.draws; ++attempt) {
    ++rep.attempts;
    std::uint64_t draw_seed = mix_seed(mix_seed(opts.seed, kGradCheckTag),
                                       attempt);
    Rng net_rng(mix_seed(draw_seed, kNetInitTag));
    MultimodalNet net(nc, net_rng);
    Rng batch_rng(mix_seed(draw_seed, kLoopTag));
    std::vector<Matrix> mods;
    for (std::size_t k = 0; k < m; ++k) {
      Matrix x(opts.batch, nc.modality_dims[k]);
      for (double& v : x.data) v = batch_rng.normal();
      mods.push_back(std::move(x));
    }
    std::vector<int> labels(opts.batch);
    for (int& y : labels)
      y = static_cast<int>(batch_rng.index(nc.n_classes));
    const std::uint64_t step_seed = batch_rng.next_u64();

    // freeze the entropy weights at the base point so the probed function
    // matches the constant-weight backward semantics
    std::vector<double> frozen;
    {
      Graph g;
      Rng rng(step_seed);
      frozen = total_loss_dg(g, net, mods, labels, tc, perms, rng).weights;
    }
    auto build = [&](Graph& g) {
      Rng rng(step_seed);
      return total_loss_dg(g, net, mods, labels, tc, perms, rng, &frozen)
          .total_tensor;
    };

    Graph g0;
    Tensor loss = build(g0);
    GradMap analytic = g0.backward(loss, net.params());
    if (g0.relu_kink_margin() < opts.margin_floor) continue;
    ++rep.accepted;
    if (opts.corruption != 0.0) {
      const std::string& first = net.params().names().front();
      analytic.at(first).data[0] += opts.corruption;
    }

    for (const std::string& name : net.params().names()) {
      std::string group = name.substr(0, name.find('/'));
      Matrix& p = net.params().at(name);
      const Matrix& ga = analytic.at(name);
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        double keep = p.data[i];
        p.data[i] = keep + opts.h;
        Graph gp;
        double fp = build(gp).scalar();
        p.data[i] = keep - opts.h;
        Graph gm;
        double fm = build(gm).scalar();
        p.data[i] = keep;
        double num = (fp - fm) / (2.0 * opts.h);
        double denom = std::max({std::fabs(ga.data[i]), std::fabs(num), 1e-3});
        double err = std::fabs(ga.data[i] - num) / denom;
        double& slot = rep.per_group[group];
        slot = std::max(slot, err);
        if (err > rep.max_rel_err) {
          rep.max_rel_err = err;
          rep.worst_param = name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  rep.pass = rep.accepted == opts.draws && rep.max_rel_err <= opts.tolerance;
  return rep;
}

}  // namespace mmosdg

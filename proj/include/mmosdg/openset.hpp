#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmosdg/autodiff.hpp"
#include "mmosdg/errors.hpp"
#include "mmosdg/matrix.hpp"
#include "mmosdg/synthgen.hpp"

namespace mmosdg {

// Confidence scores for known-vs-unknown decisions. All methods are sign
// normalized so that a HIGHER score means MORE likely known, which lets one
// thresholding path serve every method.
enum class ScoreMethod { kMsp, kNegEntropy, kMaxLogit, kEnergy, kMahalanobis };

inline const char* score_method_name(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::kMsp: return "msp";
    case ScoreMethod::kNegEntropy: return "neg_entropy";
    case ScoreMethod::kMaxLogit: return "max_logit";
    case ScoreMethod::kEnergy: return "energy";
    case ScoreMethod::kMahalanobis: return "mahalanobis";
  }
  throw validation_error("score_method_name: invalid enum value");
}

inline ScoreMethod score_method_from_string(const std::string& s) {
  if (s == "msp") return ScoreMethod::kMsp;
  if (s == "neg_entropy") return ScoreMethod::kNegEntropy;
  if (s == "max_logit") return ScoreMethod::kMaxLogit;
  if (s == "energy") return ScoreMethod::kEnergy;
  if (s == "mahalanobis") return ScoreMethod::kMahalanobis;
  throw validation_error("unknown score method '" + s +
                         "' (expected msp, neg_entropy, max_logit, energy, "
                         "or mahalanobis)");
}

inline const std::vector<ScoreMethod>& all_score_methods() {
  static const std::vector<ScoreMethod> methods = {
      ScoreMethod::kMsp, ScoreMethod::kNegEntropy, ScoreMethod::kMaxLogit,
      ScoreMethod::kEnergy, ScoreMethod::kMahalanobis};
  return methods;
}

// Class-conditional Gaussian state: per-class means plus one covariance
// pooled across classes and ridge-regularized before factorization.
struct MahalanobisState {
  Matrix means;  // n_classes x dim
  Matrix cov;    // dim x dim, pooled covariance + lambda*I
  Matrix chol;   // lower-triangular Cholesky factor of cov
  double lambda = 1e-3;
  bool fitted = false;

  std::size_t n_classes() const { return means.rows; }
  std::size_t dim() const { return means.cols; }
};

inline MahalanobisState fit_mahalanobis(const Matrix& x,
                                        const std::vector<int>& labels,
                                        double lambda = 1e-3) {
  require(x.rows > 0, "fit_mahalanobis: no samples");
  require(x.rows == labels.size(),
          "fit_mahalanobis: " + std::to_string(x.rows) + " rows vs " +
              std::to_string(labels.size()) + " labels");
  require(lambda >= 0.0 && std::isfinite(lambda),
          "fit_mahalanobis: lambda must be finite and nonnegative");
  std::size_t n_classes = 0;
  for (int y : labels) {
    require(y >= 0, "fit_mahalanobis: labels must be known (nonnegative), got " +
                        std::to_string(y));
    n_classes = std::max(n_classes, static_cast<std::size_t>(y) + 1);
  }
  std::vector<std::size_t> counts(n_classes, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  for (std::size_t c = 0; c < n_classes; ++c) {
    require(counts[c] >= 2, "fit_mahalanobis: class " + std::to_string(c) +
                                " has " + std::to_string(counts[c]) +
                                " samples, need at least 2");
  }

  MahalanobisState st;
  st.lambda = lambda;
  st.means = Matrix(n_classes, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < x.cols; ++j) st.means(c, j) += x(i, j);
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t j = 0; j < x.cols; ++j) st.means(c, j) /= counts[c];

  // pooled: (1/N) * sum over samples of (x - mu_{y(x)})(x - mu_{y(x)})^T
  st.cov = Matrix(x.cols, x.cols);
  std::vector<double> dev(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < x.cols; ++j) dev[j] = x(i, j) - st.means(c, j);
    for (std::size_t a = 0; a < x.cols; ++a)
      for (std::size_t b = 0; b < x.cols; ++b) st.cov(a, b) += dev[a] * dev[b];
  }
  for (double& v : st.cov.data) v /= static_cast<double>(x.rows);
  for (std::size_t j = 0; j < x.cols; ++j) st.cov(j, j) += lambda;

  st.chol = cholesky_factor(st.cov);  // numeric_error if still singular
  st.fitted = true;
  return st;
}

// Squared Mahalanobis distance of one feature row to class c's mean.
inline double mahalanobis_sq(const MahalanobisState& st, const Matrix& x,
                             std::size_t row, std::size_t c) {
  std::vector<double> dev(st.dim());
  for (std::size_t j = 0; j < st.dim(); ++j) dev[j] = x(row, j) - st.means(c, j);
  // dist^2 = dev^T cov^{-1} dev = dev . solve(cov, dev)
  std::vector<double> solved = cholesky_solve(st.chol, dev);
  double d2 = 0.0;
  for (std::size_t j = 0; j < st.dim(); ++j) d2 += dev[j] * solved[j];
  return d2;
}

// Per-sample confidence. `logits` are the joint-head pre-softmax outputs;
// Mahalanobis ignores them and scores `embeddings` (concatenated modality
// embeddings) against the fitted class-conditional Gaussians.
inline std::vector<double> score_samples(const Matrix& logits, ScoreMethod method,
                                         const MahalanobisState* maha = nullptr,
                                         const Matrix* embeddings = nullptr) {
  const std::size_t n = logits.rows;
  require(logits.cols >= 1, "score_samples: logits must have >= 1 column");
  std::vector<double> out(n, 0.0);
  switch (method) {
    case ScoreMethod::kMsp: {
      Matrix p = detail::softmax_rows_values(logits);
      for (std::size_t i = 0; i < n; ++i) {
        double best = p(i, 0);
        for (std::size_t j = 1; j < p.cols; ++j) best = std::max(best, p(i, j));
        out[i] = best;
      }
      return out;
    }
    case ScoreMethod::kNegEntropy: {
      Matrix p = detail::softmax_rows_values(logits);
      for (std::size_t i = 0; i < n; ++i) {
        double h = 0.0;
        for (std::size_t j = 0; j < p.cols; ++j) {
          double v = p(i, j);
          if (v > 0.0) h -= v * std::log(v);
        }
        out[i] = -h;
      }
      return out;
    }
    case ScoreMethod::kMaxLogit: {
      for (std::size_t i = 0; i < n; ++i) {
        double best = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols; ++j)
          best = std::max(best, logits(i, j));
        out[i] = best;
      }
      return out;
    }
    case ScoreMethod::kEnergy: {
      // logsumexp of the logits; confident rows have a dominating logit
      for (std::size_t i = 0; i < n; ++i) {
        double m = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols; ++j) m = std::max(m, logits(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) s += std::exp(logits(i, j) - m);
        out[i] = m + std::log(s);
      }
      return out;
    }
    case ScoreMethod::kMahalanobis: {
      require(maha != nullptr && maha->fitted,
              "score_samples: mahalanobis requires a fitted state");
      require(embeddings != nullptr,
              "score_samples: mahalanobis requires embeddings");
      require(embeddings->rows == n,
              "score_samples: embeddings rows " + std::to_string(embeddings->rows) +
                  " vs logits rows " + std::to_string(n));
      require(embeddings->cols == maha->dim(),
              "score_samples: embeddings dim " + std::to_string(embeddings->cols) +
                  " vs fitted dim " + std::to_string(maha->dim()));
      for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < maha->n_classes(); ++c)
          best = std::min(best, mahalanobis_sq(*maha, *embeddings, i, c));
        out[i] = -best;
      }
      return out;
    }
  }
  throw validation_error("score_samples: invalid score method");
}

// argmax of the known-class distribution when the sample clears the
// confidence threshold, the unknown sentinel otherwise.
inline std::vector<int> classify_openset(const Matrix& probs,
                                         const std::vector<double>& scores,
                                         double threshold) {
  require(probs.rows == scores.size(),
          "classify_openset: " + std::to_string(probs.rows) + " rows vs " +
              std::to_string(scores.size()) + " scores");
  require(probs.cols >= 1, "classify_openset: need >= 1 class column");
  std::vector<int> labels(probs.rows, kUnknownLabel);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    if (!(scores[i] >= threshold)) continue;
    std::size_t best = 0;
    for (std::size_t j = 1; j < probs.cols; ++j)
      if (probs(i, j) > probs(i, best)) best = j;
    labels[i] = static_cast<int>(best);
  }
  return labels;
}

inline double hos_from(double os_star, double unk) {
  if (os_star == 0.0 && unk == 0.0) return 0.0;
  return 2.0 * os_star * unk / (os_star + unk);
}

// Metrics for one prediction set. Percentages throughout. When the ground
// truth contains no unknown samples, `unk_present` is false and unk/hos are
// meaningless (serialized as null).
struct EvalReport {
  double os_star = 0.0;
  double unk = 0.0;
  double hos = 0.0;
  bool unk_present = false;
  std::vector<double> per_class_acc;       // percent; 0 for absent classes
  std::vector<long long> per_class_count;  // ground-truth count per known class
  std::vector<std::vector<long long>> confusion;  // (C+1)x(C+1), last = unknown
  std::vector<double> hist_edges;          // 51 edges when scores were given
  std::vector<long long> hist_known;       // 50 bins, ground-truth-known samples
  std::vector<long long> hist_unknown;     // 50 bins, ground-truth-unknown samples
};

inline EvalReport evaluate(const std::vector<int>& predicted,
                           const std::vector<int>& ground_truth, int n_classes,
                           const std::vector<double>& scores = {}) {
  require(!ground_truth.empty(), "evaluate: no samples");
  require(predicted.size() == ground_truth.size(),
          "evaluate: " + std::to_string(predicted.size()) + " predictions vs " +
              std::to_string(ground_truth.size()) + " ground-truth labels");
  require(n_classes >= 1, "evaluate: n_classes must be >= 1");
  require(scores.empty() || scores.size() == ground_truth.size(),
          "evaluate: " + std::to_string(scores.size()) + " scores vs " +
              std::to_string(ground_truth.size()) + " samples");
  auto check_label = [&](int y, const char* what) {
    require(y == kUnknownLabel || (y >= 0 && y < n_classes),
            std::string("evaluate: ") + what + " label " + std::to_string(y) +
                " outside [0," + std::to_string(n_classes) + ") and not unknown");
  };

  const auto nc = static_cast<std::size_t>(n_classes);
  EvalReport rep;
  rep.per_class_acc.assign(nc, 0.0);
  rep.per_class_count.assign(nc, 0);
  rep.confusion.assign(nc + 1, std::vector<long long>(nc + 1, 0));
  std::vector<long long> correct(nc, 0);
  long long unk_total = 0, unk_correct = 0;
  auto slot = [&](int y) {
    return y == kUnknownLabel ? nc : static_cast<std::size_t>(y);
  };
  for (std::size_t i = 0; i < ground_truth.size(); ++i) {
    check_label(ground_truth[i], "ground-truth");
    check_label(predicted[i], "predicted");
    ++rep.confusion[slot(ground_truth[i])][slot(predicted[i])];
    if (ground_truth[i] == kUnknownLabel) {
      ++unk_total;
      if (predicted[i] == kUnknownLabel) ++unk_correct;
    } else {
      ++rep.per_class_count[slot(ground_truth[i])];
      if (predicted[i] == ground_truth[i]) ++correct[slot(ground_truth[i])];
    }
  }

  // OS*: unweighted mean of per-class accuracies over classes that appear
  std::size_t present = 0;
  double acc_sum = 0.0;
  for (std::size_t c = 0; c < nc; ++c) {
    if (rep.per_class_count[c] == 0) continue;
    rep.per_class_acc[c] =
        100.0 * static_cast<double>(correct[c]) / rep.per_class_count[c];
    acc_sum += rep.per_class_acc[c];
    ++present;
  }
  rep.os_star = present > 0 ? acc_sum / static_cast<double>(present) : 0.0;
  rep.unk_present = unk_total > 0;
  if (rep.unk_present) {
    rep.unk = 100.0 * static_cast<double>(unk_correct) / unk_total;
    rep.hos = hos_from(rep.os_star, rep.unk);
  }

  if (!scores.empty()) {
    const int bins = 50;
    double lo = *std::min_element(scores.begin(), scores.end());
    double hi = *std::max_element(scores.begin(), scores.end());
    if (!(hi > lo)) {  // degenerate: all scores equal
      lo -= 0.5;
      hi += 0.5;
    }
    rep.hist_edges.resize(bins + 1);
    for (int b = 0; b <= bins; ++b)
      rep.hist_edges[b] = lo + (hi - lo) * b / bins;
    rep.hist_known.assign(bins, 0);
    rep.hist_unknown.assign(bins, 0);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      int b = static_cast<int>((scores[i] - lo) / (hi - lo) * bins);
      b = std::clamp(b, 0, bins - 1);  // right edge lands in the last bin
      if (ground_truth[i] == kUnknownLabel)
        ++rep.hist_unknown[b];
      else
        ++rep.hist_known[b];
    }
  }
  return rep;
}

struct ThresholdSweep {
  std::vector<double> thresholds;
  std::vector<EvalReport> reports;
  std::size_t best_index = 0;  // highest HOS, ties toward lower threshold
};

inline ThresholdSweep threshold_sweep(const Matrix& probs,
                                      const std::vector<double>& scores,
                                      const std::vector<int>& ground_truth,
                                      int n_classes,
                                      const std::vector<double>& grid) {
  require(!grid.empty(), "threshold_sweep: empty threshold grid");
  ThresholdSweep sweep;
  sweep.thresholds = grid;
  sweep.reports.reserve(grid.size());
  double best_hos = -1.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::vector<int> pred = classify_openset(probs, scores, grid[i]);
    sweep.reports.push_back(evaluate(pred, ground_truth, n_classes, scores));
    const EvalReport& r = sweep.reports.back();
    double h = r.unk_present ? r.hos : 0.0;
    if (h > best_hos || (h == best_hos && grid[i] < grid[sweep.best_index])) {
      best_hos = h;
      sweep.best_index = i;
    }
  }
  return sweep;
}

inline nlohmann::json eval_report_to_json(const EvalReport& rep) {
  nlohmann::json j;
  j["os_star"] = rep.os_star;
  if (rep.unk_present) {
    j["unk"] = rep.unk;
    j["hos"] = rep.hos;
  } else {
    j["unk"] = nullptr;
    j["hos"] = nullptr;
  }
  j["unk_present"] = rep.unk_present;
  j["per_class_acc"] = rep.per_class_acc;
  j["per_class_count"] = rep.per_class_count;
  j["confusion"] = rep.confusion;
  if (!rep.hist_edges.empty()) {
    j["histogram"] = {{"edges", rep.hist_edges},
                      {"known", rep.hist_known},
                      {"unknown", rep.hist_unknown}};
  }
  return j;
}

inline void write_histogram_csv(const std::string& path, const EvalReport& rep) {
  require(!rep.hist_edges.empty(),
          "write_histogram_csv: report carries no histogram (no scores given)");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");
  out << "bin_left,bin_right,count_known,count_unknown\n";
  for (std::size_t b = 0; b + 1 < rep.hist_edges.size(); ++b) {
    out << format_double(rep.hist_edges[b]) << ','
        << format_double(rep.hist_edges[b + 1]) << ',' << rep.hist_known[b]
        << ',' << rep.hist_unknown[b] << '\n';
  }
  if (!out) throw io_error("failed while writing '" + path + "'");
}

}  // namespace mmosdg

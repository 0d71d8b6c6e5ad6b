#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmosdg/errors.hpp"
#include "mmosdg/matrix.hpp"
#include "mmosdg/rng.hpp"

namespace mmosdg {

constexpr int kUnknownLabel = -1;

// Latent-factor generator standing in for pre-extracted multimodal features:
// per class c a latent mean mu_c; per sample z = mu_c + eps; per domain an
// affine shift A_d = I + shift*R_d plus bias shift*b_d; per modality a fixed
// projection W_k; feature x_k = W_k A_d(z) + noise.
struct SyntheticConfig {
  std::size_t s = 2;                              // source-domain count
  std::size_t m = 3;                              // modality count
  std::size_t latent_dim = 16;
  std::vector<std::size_t> modality_dims = {64, 32, 48};
  std::size_t n_known = 7;
  std::size_t n_unknown = 1;
  std::size_t samples_per_class_per_domain = 24;
  double shift_magnitude = 0.5;
  double noise_std = 0.1;
  std::uint64_t seed = 7;

  void validate() const {
    require(s >= 1, "SyntheticConfig.s: need at least 1 source domain");
    require(m >= 2, "SyntheticConfig.m: need at least 2 modalities");
    require(latent_dim >= 1, "SyntheticConfig.latent_dim: must be positive");
    require(modality_dims.size() == m,
            "SyntheticConfig.modality_dims: got " +
                std::to_string(modality_dims.size()) + " dims for m=" +
                std::to_string(m));
    for (std::size_t d : modality_dims)
      require(d >= 1, "SyntheticConfig.modality_dims: zero dim");
    require(n_known >= 2, "SyntheticConfig.n_known: need at least 2 classes");
    require(samples_per_class_per_domain >= 1,
            "SyntheticConfig.samples_per_class_per_domain: must be positive");
    require(shift_magnitude >= 0.0,
            "SyntheticConfig.shift_magnitude: must be >= 0");
    require(noise_std >= 0.0, "SyntheticConfig.noise_std: must be >= 0");
  }
};

inline SyntheticConfig reference_config() { return SyntheticConfig{}; }

struct MultimodalSample {
  std::vector<std::vector<double>> features;  // one vector per modality
  int label = kUnknownLabel;                  // train label or kUnknownLabel
  int domain = 0;
};

inline bool bitwise_equal(const MultimodalSample& a, const MultimodalSample& b) {
  if (a.label != b.label || a.domain != b.domain ||
      a.features.size() != b.features.size())
    return false;
  for (std::size_t k = 0; k < a.features.size(); ++k) {
    if (a.features[k].size() != b.features[k].size()) return false;
    if (std::memcmp(a.features[k].data(), b.features[k].data(),
                    a.features[k].size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

struct DatasetMeta {
  std::vector<std::string> class_names;  // known classes, train-label order
  std::vector<std::string> domain_names;
  std::vector<std::size_t> modality_dims;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<MultimodalSample> samples;

  void validate() const {
    require(!samples.empty(), "Dataset: empty sample list");
    for (const auto& s : samples) {
      require(s.features.size() == meta.modality_dims.size(),
              "Dataset: sample modality count mismatch");
      for (std::size_t k = 0; k < s.features.size(); ++k)
        require(s.features[k].size() == meta.modality_dims[k],
                "Dataset: sample dim mismatch in modality " + std::to_string(k));
    }
  }
};

inline bool bitwise_equal(const Dataset& a, const Dataset& b) {
  if (a.meta.class_names != b.meta.class_names ||
      a.meta.domain_names != b.meta.domain_names ||
      a.meta.modality_dims != b.meta.modality_dims ||
      a.samples.size() != b.samples.size())
    return false;
  for (std::size_t i = 0; i < a.samples.size(); ++i)
    if (!bitwise_equal(a.samples[i], b.samples[i])) return false;
  return true;
}

struct BenchmarkData {
  std::vector<Dataset> sources;  // domain ids 0..S-1, known classes only
  Dataset target;                // domain id S, known + unknown classes
};

namespace detail {

// Tags for deriving independent child streams from the root seed.
enum SeedTag : std::uint64_t {
  kMuTag = 0x10,
  kLatentTag = 0x20,
  kProjTag = 0x30,
  kDomainTag = 0x40,
};

struct GeneratorModel {
  std::vector<std::vector<double>> mu;          // pool-class latent means
  std::vector<Matrix> proj;                     // L x d_k (transposed W_k)
};

inline GeneratorModel build_model(const SyntheticConfig& cfg,
                                  std::uint64_t root) {
  GeneratorModel mdl;
  std::size_t pool = cfg.n_unknown + cfg.n_known;
  Rng mu_rng(mix_seed(root, kMuTag));
  mdl.mu.resize(pool);
  for (std::size_t c = 0; c < pool; ++c) {
    mdl.mu[c].resize(cfg.latent_dim);
    for (double& v : mdl.mu[c]) v = mu_rng.normal();
  }
  double wstd = std::sqrt(1.0 / static_cast<double>(cfg.latent_dim));
  mdl.proj.reserve(cfg.m);
  for (std::size_t k = 0; k < cfg.m; ++k) {
    Rng wr(mix_seed(mix_seed(root, kProjTag), k));
    Matrix w(cfg.modality_dims[k], cfg.latent_dim);  // W_k drawn row-major
    for (double& v : w.data) v = wr.normal(0.0, wstd);
    mdl.proj.push_back(transpose(w));
  }
  return mdl;
}

// One domain's dataset. Pure in (cfg, root, domain, with_unknown), so domains
// can be generated in any order or in parallel with identical results. Latent
// offsets eps come from per-class streams shared by every domain (common
// random numbers), which makes the shift-free configuration produce the same
// features in every domain.
inline Dataset generate_domain(const SyntheticConfig& cfg,
                               const GeneratorModel& mdl, std::uint64_t root,
                               int domain, bool with_unknown) {
  std::size_t L = cfg.latent_dim;
  Rng drng(mix_seed(mix_seed(root, kDomainTag), static_cast<std::uint64_t>(domain)));
  Matrix a = Matrix::identity(L);
  std::vector<double> bias(L, 0.0);
  if (cfg.shift_magnitude > 0.0) {
    double rstd = std::sqrt(1.0 / static_cast<double>(L));
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        a(i, j) += cfg.shift_magnitude * drng.normal(0.0, rstd);
    for (double& v : bias) v = cfg.shift_magnitude * drng.normal();
  }
  Dataset out;
  out.meta.modality_dims = cfg.modality_dims;
  std::size_t pool = cfg.n_unknown + cfg.n_known;
  double eps_std = std::sqrt(0.1);
  std::vector<double> z(L), u(L);
  for (std::size_t c = 0; c < pool; ++c) {
    bool unknown = c < cfg.n_unknown;
    if (unknown && !with_unknown) continue;
    Rng crng(mix_seed(mix_seed(root, kLatentTag), c));
    for (std::size_t i = 0; i < cfg.samples_per_class_per_domain; ++i) {
      for (std::size_t j = 0; j < L; ++j)
        z[j] = mdl.mu[c][j] + crng.normal(0.0, eps_std);
      if (cfg.shift_magnitude > 0.0) {
        for (std::size_t r = 0; r < L; ++r) {
          double s = bias[r];
          for (std::size_t j = 0; j < L; ++j) s += a(r, j) * z[j];
          u[r] = s;
        }
      } else {
        u = z;
      }
      MultimodalSample smp;
      smp.domain = domain;
      smp.label = unknown ? kUnknownLabel
                          : static_cast<int>(c - cfg.n_unknown);
      smp.features.resize(cfg.m);
      for (std::size_t k = 0; k < cfg.m; ++k) {
        const Matrix& p = mdl.proj[k];
        std::vector<double>& x = smp.features[k];
        x.assign(cfg.modality_dims[k], 0.0);
        for (std::size_t j = 0; j < L; ++j) {
          double uj = u[j];
          for (std::size_t t = 0; t < cfg.modality_dims[k]; ++t)
            x[t] += uj * p(j, t);
        }
        if (cfg.noise_std > 0.0)
          for (double& v : x) v += drng.normal(0.0, cfg.noise_std);
      }
      out.samples.push_back(std::move(smp));
    }
  }
  return out;
}

}  // namespace detail

// Sources hold only known classes; the target adds the unknown pool classes,
// which sit first in the pool so that train label i corresponds to pool class
// n_unknown + i. The S+1 domains can be rotated: `target_domain` picks which
// one plays the target role, the rest become sources (ascending id order).
inline BenchmarkData generate_task(const SyntheticConfig& cfg,
                                   std::size_t target_domain, Rng& rng) {
  cfg.validate();
  require(target_domain <= cfg.s,
          "generate_task: target domain " + std::to_string(target_domain) +
              " out of range [0," + std::to_string(cfg.s) + "]");
  std::uint64_t root = rng.next_u64();
  detail::GeneratorModel mdl = detail::build_model(cfg, root);
  DatasetMeta meta;
  meta.modality_dims = cfg.modality_dims;
  for (std::size_t c = 0; c < cfg.n_known; ++c)
    meta.class_names.push_back("class_" + std::to_string(c));
  for (std::size_t d = 0; d <= cfg.s; ++d)
    meta.domain_names.push_back("domain_" + std::to_string(d));
  BenchmarkData out;
  for (std::size_t d = 0; d <= cfg.s; ++d) {
    if (d == target_domain) continue;
    Dataset ds = detail::generate_domain(cfg, mdl, root, static_cast<int>(d),
                                         /*with_unknown=*/false);
    ds.meta = meta;
    out.sources.push_back(std::move(ds));
  }
  out.target = detail::generate_domain(
      cfg, mdl, root, static_cast<int>(target_domain), /*with_unknown=*/true);
  out.target.meta = meta;
  return out;
}

inline BenchmarkData generate_benchmark(const SyntheticConfig& cfg, Rng& rng) {
  return generate_task(cfg, cfg.s, rng);
}

inline BenchmarkData generate_benchmark(const SyntheticConfig& cfg) {
  Rng rng(cfg.seed);
  return generate_benchmark(cfg, rng);
}

// ---------------------------------------------------------------------------
// Binary embedding / label file I/O
// ---------------------------------------------------------------------------

namespace detail {

inline void put_bytes(std::ofstream& f, const void* p, std::size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!f) throw io_error("write failed");
}

inline void put_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(f, b, 4);
}

inline void put_u64(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(f, b, 8);
}

inline void put_i32(std::ofstream& f, std::int32_t v) {
  put_u32(f, static_cast<std::uint32_t>(v));
}

inline void put_f64(std::ofstream& f, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(f, bits);
}

inline void get_bytes(std::ifstream& f, void* p, std::size_t n,
                      const std::string& path) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (f.gcount() != static_cast<std::streamsize>(n))
    throw io_error("truncated file: " + path);
}

inline std::uint32_t get_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  get_bytes(f, b, 4, path);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::ifstream& f, const std::string& path) {
  unsigned char b[8];
  get_bytes(f, b, 8, path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::int32_t get_i32(std::ifstream& f, const std::string& path) {
  return static_cast<std::int32_t>(get_u32(f, path));
}

inline double get_f64(std::ifstream& f, const std::string& path) {
  std::uint64_t bits = get_u64(f, path);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void check_magic(std::ifstream& f, const char expect[4],
                        const std::string& path) {
  char m[4];
  get_bytes(f, m, 4, path);
  if (std::memcmp(m, expect, 4) != 0)
    throw io_error("bad magic bytes in " + path + " (expected " +
                   std::string(expect, 4) + ")");
}

}  // namespace detail

// Embedding file: "MMEB", u32 version=1, u64 n, u64 dim, n*dim f64 LE rows.
inline void write_embedding_file(const std::string& path, const Matrix& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  detail::put_bytes(f, "MMEB", 4);
  detail::put_u32(f, 1);
  detail::put_u64(f, rows.rows);
  detail::put_u64(f, rows.cols);
  for (double v : rows.data) detail::put_f64(f, v);
}

inline Matrix read_embedding_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  detail::check_magic(f, "MMEB", path);
  std::uint32_t ver = detail::get_u32(f, path);
  if (ver != 1)
    throw io_error("unsupported embedding file version " +
                   std::to_string(ver) + " in " + path);
  std::uint64_t n = detail::get_u64(f, path);
  std::uint64_t dim = detail::get_u64(f, path);
  Matrix out(n, dim);
  for (double& v : out.data) v = detail::get_f64(f, path);
  return out;
}

// Label/domain file: "MMLB", u32 version=1, u64 n, n i32 LE values.
inline void write_label_file(const std::string& path,
                             const std::vector<int>& vals) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  detail::put_bytes(f, "MMLB", 4);
  detail::put_u32(f, 1);
  detail::put_u64(f, vals.size());
  for (int v : vals) detail::put_i32(f, v);
}

inline std::vector<int> read_label_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  detail::check_magic(f, "MMLB", path);
  std::uint32_t ver = detail::get_u32(f, path);
  if (ver != 1)
    throw io_error("unsupported label file version " + std::to_string(ver) +
                   " in " + path);
  std::uint64_t n = detail::get_u64(f, path);
  std::vector<int> out(n);
  for (int& v : out) v = detail::get_i32(f, path);
  return out;
}

struct ManifestModality {
  std::string name;
  std::size_t dim = 0;
  std::string file;  // relative to the manifest's directory
};

struct Manifest {
  std::vector<ManifestModality> modalities;
  std::string labels_file;
  std::string domains_file;
  std::vector<std::string> classes;
  int unknown_label = kUnknownLabel;
  std::string path;  // where manifest.json lives (set on write/read)
};

inline Manifest write_manifest(const Dataset& ds, const std::string& dir) {
  ds.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Manifest m;
  std::size_t n = ds.samples.size();
  for (std::size_t k = 0; k < ds.meta.modality_dims.size(); ++k) {
    Matrix rows(n, ds.meta.modality_dims[k]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < ds.meta.modality_dims[k]; ++c)
        rows(i, c) = ds.samples[i].features[k][c];
    ManifestModality mm;
    mm.name = "modality_" + std::to_string(k);
    mm.dim = ds.meta.modality_dims[k];
    mm.file = mm.name + ".mmeb";
    write_embedding_file((fs::path(dir) / mm.file).string(), rows);
    m.modalities.push_back(std::move(mm));
  }
  std::vector<int> labels(n), domains(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = ds.samples[i].label;
    domains[i] = ds.samples[i].domain;
  }
  m.labels_file = "labels.mmlb";
  m.domains_file = "domains.mmlb";
  write_label_file((fs::path(dir) / m.labels_file).string(), labels);
  write_label_file((fs::path(dir) / m.domains_file).string(), domains);
  m.classes = ds.meta.class_names;
  nlohmann::json j;
  j["modalities"] = nlohmann::json::array();
  for (const auto& mm : m.modalities)
    j["modalities"].push_back(
        {{"name", mm.name}, {"dim", mm.dim}, {"file", mm.file}});
  j["labels_file"] = m.labels_file;
  j["domains_file"] = m.domains_file;
  j["classes"] = m.classes;
  j["unknown_label"] = m.unknown_label;
  m.path = (fs::path(dir) / "manifest.json").string();
  std::ofstream f(m.path);
  if (!f) throw io_error("cannot open for writing: " + m.path);
  f << j.dump(2) << "\n";
  if (!f) throw io_error("write failed: " + m.path);
  return m;
}

inline Dataset read_manifest(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream f(manifest_path);
  if (!f) throw io_error("cannot open: " + manifest_path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed manifest " + manifest_path + ": " + e.what());
  }
  fs::path base = fs::path(manifest_path).parent_path();
  Dataset ds;
  try {
    for (const auto& jm : j.at("modalities")) {
      std::string file = jm.at("file").get<std::string>();
      Matrix rows = read_embedding_file((base / file).string());
      std::size_t dim = jm.at("dim").get<std::size_t>();
      if (rows.cols != dim)
        throw io_error("manifest dim " + std::to_string(dim) +
                       " disagrees with file dim " + std::to_string(rows.cols) +
                       " for " + file);
      if (!ds.samples.empty() && rows.rows != ds.samples.size())
        throw io_error("row count mismatch across modality files in " +
                       manifest_path);
      if (ds.samples.empty()) ds.samples.resize(rows.rows);
      for (std::size_t i = 0; i < rows.rows; ++i) {
        std::vector<double> v(dim);
        for (std::size_t c = 0; c < dim; ++c) v[c] = rows(i, c);
        ds.samples[i].features.push_back(std::move(v));
      }
      ds.meta.modality_dims.push_back(dim);
    }
    std::vector<int> labels =
        read_label_file((base / j.at("labels_file").get<std::string>()).string());
    std::vector<int> domains =
        read_label_file((base / j.at("domains_file").get<std::string>()).string());
    if (labels.size() != ds.samples.size() ||
        domains.size() != ds.samples.size())
      throw io_error("label/domain row count mismatch in " + manifest_path);
    int unk = j.at("unknown_label").get<int>();
    if (unk != kUnknownLabel)
      throw io_error("unsupported unknown_label " + std::to_string(unk) +
                     " in " + manifest_path);
    int max_dom = 0;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      ds.samples[i].label = labels[i];
      ds.samples[i].domain = domains[i];
      if (domains[i] < 0)
        throw io_error("negative domain id in " + manifest_path);
      max_dom = std::max(max_dom, domains[i]);
    }
    ds.meta.class_names = j.at("classes").get<std::vector<std::string>>();
    for (int d = 0; d <= max_dom; ++d)
      ds.meta.domain_names.push_back("domain_" + std::to_string(d));
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed manifest " + manifest_path + ": " + e.what());
  }
  ds.validate();
  return ds;
}

// Stratified train/validation split. Every label group is shuffled and cut at
// floor(fraction*n), clamped so both sides stay nonempty; outputs preserve the
// original sample order within each side.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction,
                                         Rng& rng) {
  require(fraction > 0.0 && fraction < 1.0,
          "split: fraction must be in (0,1), got " + std::to_string(fraction));
  ds.validate();
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    groups[ds.samples[i].label].push_back(i);
  std::vector<std::size_t> train_idx, val_idx;
  for (auto& [label, idx] : groups) {
    require(idx.size() >= 2, "split: class " + std::to_string(label) +
                                 " has fewer than 2 samples");
    rng.shuffle(idx);
    std::size_t n_train = static_cast<std::size_t>(
        std::floor(fraction * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + n_train);
    val_idx.insert(val_idx.end(), idx.begin() + n_train, idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  Dataset train, val;
  train.meta = ds.meta;
  val.meta = ds.meta;
  for (std::size_t i : train_idx) train.samples.push_back(ds.samples[i]);
  for (std::size_t i : val_idx) val.samples.push_back(ds.samples[i]);
  return {std::move(train), std::move(val)};
}

// Dense view of one modality across a sample list (batch assembly helper).
inline Matrix modality_matrix(const Dataset& ds, std::size_t k) {
  require(k < ds.meta.modality_dims.size(),
          "modality_matrix: modality " + std::to_string(k) + " out of range");
  Matrix out(ds.samples.size(), ds.meta.modality_dims[k]);
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    for (std::size_t c = 0; c < ds.meta.modality_dims[k]; ++c)
      out(i, c) = ds.samples[i].features[k][c];
  return out;
}

inline std::vector<int> label_vector(const Dataset& ds) {
  std::vector<int> out(ds.samples.size());
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    out[i] = ds.samples[i].label;
  return out;
}

// Per-modality matrices for the selected sample indices, in index order.
inline std::vector<Matrix> batch_matrices(const Dataset& ds,
                                          const std::vector<std::size_t>& idx) {
  std::vector<Matrix> out;
  for (std::size_t k = 0; k < ds.meta.modality_dims.size(); ++k) {
    Matrix m(idx.size(), ds.meta.modality_dims[k]);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      require(idx[r] < ds.samples.size(),
              "batch_matrices: index " + std::to_string(idx[r]) +
                  " out of range");
      const auto& feat = ds.samples[idx[r]].features[k];
      for (std::size_t c = 0; c < feat.size(); ++c) m(r, c) = feat[c];
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<int> batch_labels(const Dataset& ds,
                                     const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < ds.samples.size(),
            "batch_labels: index " + std::to_string(idx[r]) + " out of range");
    out[r] = ds.samples[idx[r]].label;
  }
  return out;
}

}  // namespace mmosdg

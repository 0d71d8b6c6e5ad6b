#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmosdg/autodiff.hpp"
#include "mmosdg/errors.hpp"
#include "mmosdg/matrix.hpp"
#include "mmosdg/nn.hpp"
#include "mmosdg/rng.hpp"
#include "mmosdg/synthgen.hpp"

namespace mmosdg {

// Architecture hyperparameters. Encoders project each modality to an
// embedding; a joint classifier reads the concatenation (ascending modality
// order), per-modality classifiers read single embeddings, translators map
// between every ordered pair of embeddings, and the jigsaw head classifies
// chunk permutations of the concatenation.
struct NetConfig {
  std::vector<std::size_t> modality_dims;        // d_k
  std::vector<std::size_t> embed_dims;           // e_k, default 64 each
  std::size_t n_classes = 0;
  std::size_t q = 128;                           // permutation class count
  std::size_t jigsaw_hidden = 128;
  std::size_t translator_hidden = 0;             // 0 => 2 * e_i
  bool identity_encoders = false;

  std::size_t m() const { return modality_dims.size(); }
  std::size_t embed_total() const {
    std::size_t t = 0;
    for (std::size_t e : embed_dims) t += e;
    return t;
  }

  void validate() const {
    require(modality_dims.size() >= 2,
            "NetConfig.modality_dims: need at least 2 modalities");
    require(embed_dims.size() == modality_dims.size(),
            "NetConfig.embed_dims: got " + std::to_string(embed_dims.size()) +
                " for " + std::to_string(modality_dims.size()) + " modalities");
    for (std::size_t k = 0; k < modality_dims.size(); ++k) {
      require(modality_dims[k] >= 1, "NetConfig.modality_dims: zero dim");
      require(embed_dims[k] >= 1, "NetConfig.embed_dims: zero dim");
      if (identity_encoders)
        require(embed_dims[k] == modality_dims[k],
                "NetConfig: identity encoder needs embed_dims[" +
                    std::to_string(k) + "] == modality_dims[" +
                    std::to_string(k) + "]");
    }
    require(n_classes >= 2, "NetConfig.n_classes: need at least 2 classes");
    require(q >= 1, "NetConfig.q: need at least 1 permutation class");
    require(jigsaw_hidden >= 1, "NetConfig.jigsaw_hidden: must be positive");
  }

  MlpSpec encoder_spec(std::size_t k) const {
    if (identity_encoders) return MlpSpec{{}};
    return MlpSpec{{modality_dims[k], embed_dims[k], embed_dims[k]}};
  }
  MlpSpec joint_head_spec() const { return MlpSpec{{embed_total(), n_classes}}; }
  MlpSpec modality_head_spec(std::size_t k) const {
    return MlpSpec{{embed_dims[k], n_classes}};
  }
  MlpSpec jigsaw_head_spec() const {
    return MlpSpec{{embed_total(), jigsaw_hidden, q}};
  }
  MlpSpec translator_spec(std::size_t i, std::size_t j) const {
    std::size_t h = translator_hidden ? translator_hidden : 2 * embed_dims[i];
    return MlpSpec{{embed_dims[i], h, h, embed_dims[j]}};
  }
};

inline NetConfig default_net_config(const SyntheticConfig& data) {
  NetConfig nc;
  nc.modality_dims = data.modality_dims;
  nc.embed_dims.assign(data.m, 64);
  nc.n_classes = data.n_known;
  return nc;
}

inline std::size_t net_param_count(const NetConfig& cfg) {
  std::size_t n = 0;
  for (std::size_t k = 0; k < cfg.m(); ++k) n += mlp_param_count(cfg.encoder_spec(k));
  n += mlp_param_count(cfg.joint_head_spec());
  for (std::size_t k = 0; k < cfg.m(); ++k)
    n += mlp_param_count(cfg.modality_head_spec(k));
  n += mlp_param_count(cfg.jigsaw_head_spec());
  for (std::size_t i = 0; i < cfg.m(); ++i)
    for (std::size_t j = 0; j < cfg.m(); ++j)
      if (i != j) n += mlp_param_count(cfg.translator_spec(i, j));
  return n;
}

class MultimodalNet {
 public:
  MultimodalNet(NetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (std::size_t k = 0; k < cfg_.m(); ++k)
      mlp_init(params_, enc_name(k), cfg_.encoder_spec(k), rng);
    mlp_init(params_, "head_joint", cfg_.joint_head_spec(), rng);
    for (std::size_t k = 0; k < cfg_.m(); ++k)
      mlp_init(params_, mod_head_name(k), cfg_.modality_head_spec(k), rng);
    mlp_init(params_, "head_jigsaw", cfg_.jigsaw_head_spec(), rng);
    for (std::size_t i = 0; i < cfg_.m(); ++i)
      for (std::size_t j = 0; j < cfg_.m(); ++j)
        if (i != j)
          mlp_init(params_, trans_name(i, j), cfg_.translator_spec(i, j), rng);
  }

  const NetConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t m() const { return cfg_.m(); }

  Tensor encode(Graph& g, std::size_t k, const Tensor& x) {
    require(k < cfg_.m(), "encode: modality " + std::to_string(k) +
                              " out of range (M=" + std::to_string(cfg_.m()) + ")");
    require(x.value.cols == cfg_.modality_dims[k],
            "encode: modality " + std::to_string(k) + " expects dim " +
                std::to_string(cfg_.modality_dims[k]) + ", got " +
                std::to_string(x.value.cols));
    return mlp_forward(g, params_, enc_name(k), cfg_.encoder_spec(k), x);
  }

  std::vector<Tensor> encode_all(Graph& g, const std::vector<Matrix>& batch) {
    require(batch.size() == cfg_.m(),
            "encode_all: got " + std::to_string(batch.size()) +
                " modalities, expected " + std::to_string(cfg_.m()));
    std::vector<Tensor> out;
    out.reserve(cfg_.m());
    for (std::size_t k = 0; k < cfg_.m(); ++k)
      out.push_back(encode(g, k, g.constant(batch[k])));
    return out;
  }

  Tensor joint_logits(Graph& g, const std::vector<Tensor>& embeds) {
    check_embeds(embeds);
    Tensor cat = concat_cols(embeds);
    return mlp_forward(g, params_, "head_joint", cfg_.joint_head_spec(), cat);
  }

  Tensor predict_joint(Graph& g, const std::vector<Tensor>& embeds) {
    return softmax_rows(joint_logits(g, embeds));
  }

  Tensor modality_logits(Graph& g, std::size_t k, const Tensor& ek) {
    require(k < cfg_.m(), "modality_logits: modality " + std::to_string(k) +
                              " out of range");
    require(ek.value.cols == cfg_.embed_dims[k],
            "modality_logits: embedding " + std::to_string(k) + " has dim " +
                std::to_string(ek.value.cols) + ", expected " +
                std::to_string(cfg_.embed_dims[k]));
    return mlp_forward(g, params_, mod_head_name(k),
                       cfg_.modality_head_spec(k), ek);
  }

  Tensor predict_modality(Graph& g, std::size_t k, const Tensor& ek) {
    return softmax_rows(modality_logits(g, k, ek));
  }

  Tensor translate(Graph& g, std::size_t i, std::size_t j, const Tensor& ei) {
    require(i != j, "translate: i == j (" + std::to_string(i) + ")");
    require(i < cfg_.m() && j < cfg_.m(), "translate: modality pair (" +
                                              std::to_string(i) + "," +
                                              std::to_string(j) +
                                              ") out of range");
    return mlp_forward(g, params_, trans_name(i, j), cfg_.translator_spec(i, j),
                       ei);
  }

  Tensor jigsaw_logits(Graph& g, const Tensor& cat) {
    require(cat.value.cols == cfg_.embed_total(),
            "jigsaw_logits: input dim " + std::to_string(cat.value.cols) +
                ", expected " + std::to_string(cfg_.embed_total()));
    return mlp_forward(g, params_, "head_jigsaw", cfg_.jigsaw_head_spec(), cat);
  }

  static std::string enc_name(std::size_t k) {
    return "enc_" + std::to_string(k);
  }
  static std::string mod_head_name(std::size_t k) {
    return "head_mod_" + std::to_string(k);
  }
  static std::string trans_name(std::size_t i, std::size_t j) {
    return "trans_" + std::to_string(i) + "_" + std::to_string(j);
  }

 private:
  void check_embeds(const std::vector<Tensor>& embeds) const {
    require(embeds.size() == cfg_.m(),
            "joint head: got " + std::to_string(embeds.size()) +
                " embeddings, expected " + std::to_string(cfg_.m()));
    for (std::size_t k = 0; k < embeds.size(); ++k) {
      require(embeds[k].value.cols == cfg_.embed_dims[k],
              "joint head: embedding " + std::to_string(k) + " has dim " +
                  std::to_string(embeds[k].value.cols) + ", expected " +
                  std::to_string(cfg_.embed_dims[k]));
      require(embeds[k].value.rows == embeds[0].value.rows,
              "joint head: embedding row counts differ");
    }
  }

  NetConfig cfg_;
  ParamStore params_;
};

// ---------------------------------------------------------------------------
// Checkpoint: "MMCK", u32 version, u64 descriptor length, JSON descriptor,
// then parameter values in registration order as 64-bit little-endian floats.
// ---------------------------------------------------------------------------

inline nlohmann::json net_config_to_json(const NetConfig& cfg) {
  return nlohmann::json{{"modality_dims", cfg.modality_dims},
                        {"embed_dims", cfg.embed_dims},
                        {"n_classes", cfg.n_classes},
                        {"q", cfg.q},
                        {"jigsaw_hidden", cfg.jigsaw_hidden},
                        {"translator_hidden", cfg.translator_hidden},
                        {"identity_encoders", cfg.identity_encoders}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig cfg;
  try {
    cfg.modality_dims = j.at("modality_dims").get<std::vector<std::size_t>>();
    cfg.embed_dims = j.at("embed_dims").get<std::vector<std::size_t>>();
    cfg.n_classes = j.at("n_classes").get<std::size_t>();
    cfg.q = j.at("q").get<std::size_t>();
    cfg.jigsaw_hidden = j.at("jigsaw_hidden").get<std::size_t>();
    cfg.translator_hidden = j.at("translator_hidden").get<std::size_t>();
    cfg.identity_encoders = j.at("identity_encoders").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("malformed net descriptor: ") + e.what());
  }
  return cfg;
}

inline void save_checkpoint(const MultimodalNet& net, const std::string& path,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json desc;
  desc["net"] = net_config_to_json(net.config());
  desc["param_count"] = net.params().total_size();
  desc["extra"] = extra;
  std::string body = desc.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open for writing: " + path);
  detail::put_bytes(f, "MMCK", 4);
  detail::put_u32(f, 1);
  detail::put_u64(f, body.size());
  detail::put_bytes(f, body.data(), body.size());
  for (const std::string& name : net.params().names())
    for (double v : net.params().at(name).data) detail::put_f64(f, v);
}

inline MultimodalNet load_checkpoint(const std::string& path,
                                     nlohmann::json* extra = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open: " + path);
  detail::check_magic(f, "MMCK", path);
  std::uint32_t ver = detail::get_u32(f, path);
  if (ver != 1)
    throw io_error("unsupported checkpoint version " + std::to_string(ver) +
                   " in " + path);
  std::uint64_t len = detail::get_u64(f, path);
  std::string body(len, '\0');
  detail::get_bytes(f, body.data(), len, path);
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw io_error("malformed checkpoint descriptor in " + path + ": " +
                   e.what());
  }
  NetConfig cfg = net_config_from_json(desc.at("net"));
  Rng scratch(0);  // values are overwritten below
  MultimodalNet net(cfg, scratch);
  std::uint64_t expect = desc.at("param_count").get<std::uint64_t>();
  if (expect != net.params().total_size())
    throw io_error("checkpoint parameter count " + std::to_string(expect) +
                   " does not match architecture (" +
                   std::to_string(net.params().total_size()) + ") in " + path);
  for (const std::string& name : net.params().names())
    for (double& v : net.params().at(name).data) v = detail::get_f64(f, path);
  if (extra != nullptr) *extra = desc.value("extra", nlohmann::json::object());
  return net;
}

inline bool checkpoint_files_equal(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa) throw io_error("cannot open: " + a);
  if (!fb) throw io_error("cannot open: " + b);
  std::string sa((std::istreambuf_iterator<char>(fa)),
                 std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)),
                 std::istreambuf_iterator<char>());
  return sa == sb;
}

}  // namespace mmosdg

#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tkto/autodiff.hpp"
#include "tkto/digest.hpp"

namespace tkto {

constexpr int kEosToken = 0;  // reserved end-of-sequence id

struct ModelConfig {
  int vocab_size = 32;
  int embed_dim = 32;
  int context_len = 24;
  int num_heads = 2;
  uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 2 || embed_dim < 1 || context_len < 1 || num_heads < 1)
      throw config_error("model config: sizes must be positive");
    if (embed_dim % num_heads != 0)
      throw config_error("model config: embed_dim must be divisible by num_heads");
  }
  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"embed_dim", c.embed_dim},
       {"context_len", c.context_len},
       {"num_heads", c.num_heads},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("context_len").get_to(c.context_len);
  j.at("num_heads").get_to(c.num_heads);
  j.at("seed").get_to(c.seed);
}

// One pre-norm attention block + one pre-norm MLP block + final norm and a
// zero-initialized output projection, so the initial policy is exactly uniform.
class Model {
 public:
  ModelConfig cfg;

  Model() = default;

  explicit Model(const ModelConfig& c, bool trainable = true) : cfg(c), trainable_(trainable) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto randn = [&](std::vector<int> shape) {
      Tensor t(std::move(shape));
      for (double& v : t.data) v = dist(rng);
      return t;
    };
    int V = cfg.vocab_size, D = cfg.embed_dim, C = cfg.context_len, H = hidden_dim();
    add_param("tok_emb", randn({V, D}));
    add_param("pos_emb", randn({C, D}));
    add_param("ln1_gamma", Tensor({D}, 1.0));
    add_param("ln1_beta", Tensor({D}, 0.0));
    add_param("attn_wq", randn({D, D}));
    add_param("attn_wk", randn({D, D}));
    add_param("attn_wv", randn({D, D}));
    add_param("attn_wo", randn({D, D}));
    add_param("ln2_gamma", Tensor({D}, 1.0));
    add_param("ln2_beta", Tensor({D}, 0.0));
    add_param("mlp_w1", randn({D, H}));
    add_param("mlp_b1", Tensor({H}, 0.0));
    add_param("mlp_w2", randn({H, D}));
    add_param("mlp_b2", Tensor({D}, 0.0));
    add_param("lnf_gamma", Tensor({D}, 1.0));
    add_param("lnf_beta", Tensor({D}, 0.0));
    add_param("out_proj", Tensor({D, V}, 0.0));
  }

  int hidden_dim() const { return 2 * cfg.embed_dim; }
  bool trainable() const { return trainable_; }

  const std::vector<std::pair<std::string, NodePtr>>& params() const { return params_; }
  NodePtr param(const std::string& name) const {
    for (const auto& [n, p] : params_)
      if (n == name) return p;
    throw std::runtime_error("model: unknown parameter " + name);
  }

  // Frozen deep copy; training the source leaves it untouched.
  Model snapshot() const {
    Model m;
    m.cfg = cfg;
    m.trainable_ = false;
    for (const auto& [name, p] : params_) m.params_.emplace_back(name, make_leaf(p->value, false));
    return m;
  }

  Model clone_trainable() const {
    Model m;
    m.cfg = cfg;
    m.trainable_ = true;
    for (const auto& [name, p] : params_) m.params_.emplace_back(name, make_leaf(p->value, true));
    return m;
  }

  // Row t is log pi(. | tokens_{<=t}); rows exponentiate to distributions.
  NodePtr forward_logprobs(const std::vector<int>& tokens) const {
    int T = static_cast<int>(tokens.size());
    if (T < 1 || T > cfg.context_len)
      throw std::runtime_error("forward: sequence length " + std::to_string(T) +
                               " outside [1, " + std::to_string(cfg.context_len) + "]");
    for (int t : tokens)
      if (t < 0 || t >= cfg.vocab_size)
        throw std::runtime_error("forward: token id " + std::to_string(t) + " out of range");

    int D = cfg.embed_dim, H = cfg.num_heads, dh = D / H;
    NodePtr e = add(gather_rows(param("tok_emb"), tokens), slice_rows(param("pos_emb"), 0, T));

    // attention block (pre-norm, causal)
    NodePtr h1 = layer_norm(e, param("ln1_gamma"), param("ln1_beta"));
    NodePtr q = matmul(h1, param("attn_wq"));
    NodePtr k = matmul(h1, param("attn_wk"));
    NodePtr v = matmul(h1, param("attn_wv"));
    Tensor mask({T, T});
    for (int i = 0; i < T; ++i)
      for (int j = i + 1; j < T; ++j) mask.at(i, j) = -1e9;
    NodePtr mask_node = constant(std::move(mask));
    std::vector<NodePtr> heads;
    for (int h = 0; h < H; ++h) {
      NodePtr qh = slice_cols(q, h * dh, (h + 1) * dh);
      NodePtr kh = slice_cols(k, h * dh, (h + 1) * dh);
      NodePtr vh = slice_cols(v, h * dh, (h + 1) * dh);
      NodePtr scores = add(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh))), mask_node);
      heads.push_back(matmul(softmax(scores, 1), vh));
    }
    NodePtr a = add(e, matmul(concat_cols(heads), param("attn_wo")));

    // MLP block
    NodePtr h2 = layer_norm(a, param("ln2_gamma"), param("ln2_beta"));
    NodePtr m = add_bias(matmul(relu(add_bias(matmul(h2, param("mlp_w1")), param("mlp_b1"))),
                                param("mlp_w2")),
                         param("mlp_b2"));
    NodePtr x = add(a, m);

    NodePtr logits = matmul(layer_norm(x, param("lnf_gamma"), param("lnf_beta")),
                            param("out_proj"));
    return log_softmax(logits, 1);
  }

  // log pi(y_t | x, y_<t) for each target position, as one graph node.
  NodePtr target_logprobs_node(const std::vector<int>& x, const std::vector<int>& y) const {
    if (y.empty()) throw std::runtime_error("target_logprobs: empty target");
    if (x.empty()) throw std::runtime_error("target_logprobs: empty prompt");
    std::vector<int> seq = x;
    seq.insert(seq.end(), y.begin(), y.end());
    if (static_cast<int>(seq.size()) > cfg.context_len)
      throw std::runtime_error("target_logprobs: prompt+target exceeds context_len");
    // last target token is never an input; drop it from the forward
    std::vector<int> input(seq.begin(), seq.end() - 1);
    NodePtr lp = forward_logprobs(input);
    int P = static_cast<int>(x.size());
    std::vector<int> rows(y.size()), cols(y.size());
    for (size_t t = 0; t < y.size(); ++t) {
      rows[t] = P - 1 + static_cast<int>(t);
      cols[t] = y[t];
    }
    return gather_entries(lp, rows, cols);
  }

  std::vector<double> target_logprobs(const std::vector<int>& x, const std::vector<int>& y) const {
    return target_logprobs_node(x, y)->value.data;
  }

  // Exact full-vocabulary KL(pi_theta || pi_ref) at each target context,
  // returned as plain detached values.
  std::vector<double> per_position_kl(const Model& ref, const std::vector<int>& x,
                                      const std::vector<int>& y) const {
    if (cfg.vocab_size != ref.cfg.vocab_size || cfg.context_len != ref.cfg.context_len)
      throw config_error("per_position_kl: model configs incompatible");
    std::vector<int> seq = x;
    seq.insert(seq.end(), y.begin(), y.end());
    std::vector<int> input(seq.begin(), seq.end() - 1);
    Tensor lp = forward_logprobs(input)->value;
    Tensor lr = ref.forward_logprobs(input)->value;
    int P = static_cast<int>(x.size()), V = cfg.vocab_size;
    std::vector<double> kl(y.size());
    for (size_t t = 0; t < y.size(); ++t) {
      int r = P - 1 + static_cast<int>(t);
      double s = 0.0;
      for (int v = 0; v < V; ++v) s += std::exp(lp.at(r, v)) * (lp.at(r, v) - lr.at(r, v));
      kl[t] = std::max(s, 0.0);  // clip float noise below Gibbs bound
    }
    return kl;
  }

  // Deterministic argmax decode; ties resolve to the lowest token id.
  std::vector<int> greedy_decode(const std::vector<int>& x, int max_len) const {
    std::vector<int> seq = x, out;
    for (int step = 0; step < max_len; ++step) {
      if (static_cast<int>(seq.size()) >= cfg.context_len) break;
      Tensor lp = forward_logprobs(seq)->value;
      int last = static_cast<int>(seq.size()) - 1;
      int best = 0;
      for (int v = 1; v < cfg.vocab_size; ++v)
        if (lp.at(last, v) > lp.at(last, best)) best = v;
      if (best == kEosToken) break;
      out.push_back(best);
      seq.push_back(best);
    }
    return out;
  }

  void save(const std::string& path) const {
    nlohmann::ordered_json header;
    header["format_version"] = 1;
    header["model_config"] = cfg;
    nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
    for (const auto& [name, p] : params_) manifest[name] = p->value.shape;
    header["manifest"] = manifest;
    std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, p] : params_)
      f.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
  }

  static Model load(const std::string& path, bool trainable = false) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw config_error("checkpoint: cannot open " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw config_error("checkpoint: truncated header in " + path);
    nlohmann::ordered_json header;
    try {
      header = nlohmann::ordered_json::parse(hs);
    } catch (const std::exception& e) {
      throw config_error("checkpoint: bad header in " + path + ": " + e.what());
    }
    if (header.at("format_version").get<int>() != 1)
      throw config_error("checkpoint: unsupported format_version in " + path);
    Model m;
    m.cfg = header.at("model_config").get<ModelConfig>();
    m.trainable_ = trainable;
    for (const auto& [name, shape_j] : header.at("manifest").items()) {
      Tensor t(shape_j.get<std::vector<int>>());
      f.read(reinterpret_cast<char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      if (!f) throw config_error("checkpoint: truncated tensor " + name + " in " + path);
      m.params_.emplace_back(name, make_leaf(std::move(t), trainable));
    }
    return m;
  }

 private:
  bool trainable_ = true;
  std::vector<std::pair<std::string, NodePtr>> params_;

  void add_param(const std::string& name, Tensor t) {
    params_.emplace_back(name, make_leaf(std::move(t), trainable_));
  }
};

}  // namespace tkto

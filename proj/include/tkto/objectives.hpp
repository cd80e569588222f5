#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tkto/autodiff.hpp"
#include "tkto/data.hpp"
#include "tkto/model.hpp"

namespace tkto {

struct WeightConfig {
  double mu_desirable = 1.0;
  double mu_undesirable = -1.0;
  double clamp_lo = -2.0;
  double clamp_hi = 2.0;

  void validate() const {
    if (clamp_lo > clamp_hi) throw config_error("weight config: L > U");
    if (mu_desirable < 0.0) throw config_error("weight config: mu_desirable must be >= 0");
    if (mu_undesirable > 0.0) throw config_error("weight config: mu_undesirable must be <= 0");
  }
  double mu(Label l) const { return l == Label::desirable ? mu_desirable : mu_undesirable; }
};

enum class BaselineMode { per_position_exact, microbatch_mean };

struct TKTOConfig {
  double beta = 0.10;
  double lambda_d = 1.0;
  double lambda_u = 1.0;
  BaselineMode baseline_mode = BaselineMode::per_position_exact;
  // Unnormalized per-sample token sum by default; normalization is an ablation.
  bool normalize_by_length = false;

  void validate() const {
    if (beta <= 0.0) throw config_error("tkto config: beta must be > 0");
    if (lambda_d <= 0.0 || lambda_u <= 0.0) throw config_error("tkto config: lambdas must be > 0");
  }
  double lambda(Label l) const { return l == Label::desirable ? lambda_d : lambda_u; }
};

struct TokenWeightTable {
  std::vector<std::vector<double>> weights;  // aligned with dataset sample order
  std::string pi_plus_digest;
  std::string pi_minus_digest;
};

struct TokenValueRecord {
  std::vector<double> rewards;    // r_{theta,t}
  std::vector<double> baselines;  // z_{0,t}
  std::vector<double> values;     // v_t in (0, lambda)
};

using Microbatch = std::vector<const Sample*>;

// ---- SFT ----

// Mean negative log-likelihood over all target tokens of a desirable batch.
inline NodePtr sft_loss(const Model& model, const Microbatch& batch) {
  if (batch.empty()) throw config_error("sft_loss: empty batch");
  size_t n_tokens = 0;
  NodePtr total;
  for (const Sample* s : batch) {
    if (s->label != Label::desirable)
      throw config_error("sft_loss: batch contains an undesirable sample");
    NodePtr lp = sum(model.target_logprobs_node(s->prompt, s->target));
    total = total ? add(total, lp) : lp;
    n_tokens += s->target.size();
  }
  return scale(total, -1.0 / static_cast<double>(n_tokens));
}

// ---- DPO ----

inline double sum_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

inline NodePtr dpo_loss_pairs(const Model& model, const Model& ref, const Dataset& data,
                              const std::vector<std::pair<int, int>>& pairs, double beta) {
  if (pairs.empty()) throw config_error("dpo_loss: empty pairing index");
  NodePtr total;
  for (const auto& [wi, li] : pairs) {
    const Sample& w = data.samples[wi];
    const Sample& l = data.samples[li];
    NodePtr dw = sub(sum(model.target_logprobs_node(w.prompt, w.target)),
                     constant(sum_of(ref.target_logprobs(w.prompt, w.target))));
    NodePtr dl = sub(sum(model.target_logprobs_node(l.prompt, l.target)),
                     constant(sum_of(ref.target_logprobs(l.prompt, l.target))));
    NodePtr term = negate(log(sigmoid(scale(sub(dw, dl), beta))));
    total = total ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(pairs.size()));
}

inline NodePtr dpo_loss(const Model& model, const Model& ref, const Dataset& data, double beta) {
  if (data.pairing_index.empty()) throw config_error("dpo_loss: empty pairing index");
  return dpo_loss_pairs(model, ref, data, data.pairing_index, beta);
}

// ---- token-level pieces (Eqs. 3-5) ----

// r_{theta,t} = log pi_theta(y_t|.) - log pi_ref(y_t|.), differentiable in model.
inline NodePtr token_rewards(const Model& model, const Model& ref, const Sample& s) {
  if (model.cfg.vocab_size != ref.cfg.vocab_size || model.cfg.context_len != ref.cfg.context_len)
    throw config_error("token_rewards: model configs incompatible");
  NodePtr lp = model.target_logprobs_node(s.prompt, s.target);
  Tensor ref_lp({static_cast<int>(s.target.size())}, ref.target_logprobs(s.prompt, s.target));
  return sub(lp, constant(std::move(ref_lp)));
}

// Detached z_{0,t} per sample. In microbatch_mean mode every entry is the
// mean KL over all target positions in the microbatch.
inline std::vector<std::vector<double>> token_baseline(const Model& model, const Model& ref,
                                                       const Microbatch& batch,
                                                       BaselineMode mode) {
  if (batch.empty()) throw config_error("token_baseline: empty microbatch");
  std::vector<std::vector<double>> z;
  z.reserve(batch.size());
  for (const Sample* s : batch) z.push_back(model.per_position_kl(ref, s->prompt, s->target));
  if (mode == BaselineMode::microbatch_mean) {
    double sum = 0.0;
    size_t n = 0;
    for (const auto& v : z)
      for (double x : v) {
        sum += x;
        ++n;
      }
    double m = n ? sum / static_cast<double>(n) : 0.0;
    for (auto& v : z) std::fill(v.begin(), v.end(), m);
  }
  return z;
}

// Plain-value evaluation of the token value function (analysis / oracle side).
inline TokenValueRecord token_values(const std::vector<double>& rewards,
                                     const std::vector<double>& baselines, Label label,
                                     const TKTOConfig& cfg) {
  cfg.validate();
  if (rewards.size() != baselines.size())
    throw config_error("token_values: reward/baseline length mismatch");
  TokenValueRecord rec;
  rec.rewards = rewards;
  rec.baselines = baselines;
  rec.values.resize(rewards.size());
  for (size_t t = 0; t < rewards.size(); ++t) {
    double d = rewards[t] - baselines[t];
    rec.values[t] = label == Label::desirable
                        ? cfg.lambda_d * sigmoid_val(cfg.beta * d)
                        : cfg.lambda_u * sigmoid_val(-cfg.beta * d);
  }
  return rec;
}

// Differentiable v_t vector for one sample given detached baselines.
inline NodePtr token_values_node(const NodePtr& rewards, const std::vector<double>& baselines,
                                 Label label, const TKTOConfig& cfg) {
  if (rewards->value.size() != baselines.size())
    throw config_error("token_values: reward/baseline length mismatch");
  Tensor z({static_cast<int>(baselines.size())}, baselines);
  NodePtr diff = sub(rewards, constant(std::move(z)));
  if (label == Label::desirable) return scale(sigmoid(scale(diff, cfg.beta)), cfg.lambda_d);
  return scale(sigmoid(scale(diff, -cfg.beta)), cfg.lambda_u);
}

// ---- sequence-level KTO ----

// Prospect-theoretic regret form: mean over samples of (lambda_y - v_seq),
// with the summed sequence reward and the microbatch-pooled baseline
// (mean over samples of the per-sequence summed KL).
// Variant with a caller-pinned baseline; used where the detached z0 must be
// held fixed (finite-difference oracles).
inline NodePtr kto_loss_with_baseline(const Model& model, const Model& ref,
                                      const Microbatch& batch, const TKTOConfig& cfg,
                                      double z0) {
  cfg.validate();
  if (batch.empty()) throw config_error("kto_loss: empty microbatch");
  NodePtr total;
  for (const Sample* s : batch) {
    NodePtr r_seq = sum(token_rewards(model, ref, *s));
    double lam = cfg.lambda(s->label);
    double sgn = s->label == Label::desirable ? 1.0 : -1.0;
    NodePtr v = scale(sigmoid(scale(add_const(r_seq, -z0), sgn * cfg.beta)), lam);
    NodePtr term = negate(add_const(v, -lam));  // lambda - v
    total = total ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

inline double kto_sequence_baseline(const Model& model, const Model& ref,
                                    const Microbatch& batch) {
  double z0 = 0.0;
  for (const Sample* s : batch) z0 += sum_of(model.per_position_kl(ref, s->prompt, s->target));
  return z0 / static_cast<double>(batch.size());
}

inline NodePtr kto_loss(const Model& model, const Model& ref, const Microbatch& batch,
                        const TKTOConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw config_error("kto_loss: empty microbatch");
  return kto_loss_with_baseline(model, ref, batch, cfg,
                                kto_sequence_baseline(model, ref, batch));
}

// ---- Step 1: token weight estimation ----

// w_t = exp(mu * clamp(log pi+/pi-, L, U)); constants during Step 2.
inline TokenWeightTable estimate_token_weights(const Model& pi_plus, const Model& pi_minus,
                                               const Dataset& data, const WeightConfig& cfg) {
  cfg.validate();
  TokenWeightTable table;
  table.weights.reserve(data.samples.size());
  for (const Sample& s : data.samples) {
    auto lp_plus = pi_plus.target_logprobs(s.prompt, s.target);
    auto lp_minus = pi_minus.target_logprobs(s.prompt, s.target);
    double mu = cfg.mu(s.label);
    std::vector<double> w(s.target.size());
    for (size_t t = 0; t < w.size(); ++t) {
      double ratio = lp_plus[t] - lp_minus[t];
      double clamped = std::min(std::max(ratio, cfg.clamp_lo), cfg.clamp_hi);
      w[t] = std::exp(mu * clamped);
    }
    table.weights.push_back(std::move(w));
  }
  return table;
}

// ---- Step 2: TKTO weighted token loss ----

// mean over samples of -sum_t w_t * v_t, with caller-pinned baselines.
inline NodePtr tkto_loss_with_baseline(const Model& model, const Model& ref,
                                       const Microbatch& batch,
                                       const std::vector<const std::vector<double>*>& weights,
                                       const TKTOConfig& cfg,
                                       const std::vector<std::vector<double>>& baselines) {
  cfg.validate();
  if (batch.empty()) throw config_error("tkto_loss: empty microbatch");
  if (weights.size() != batch.size())
    throw config_error("tkto_loss: weight table / microbatch size mismatch");
  if (baselines.size() != batch.size())
    throw config_error("tkto_loss: baseline / microbatch size mismatch");
  NodePtr total;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = *batch[i];
    if (weights[i]->size() != s.target.size())
      throw config_error("tkto_loss: weight length mismatch at sample index " +
                         std::to_string(i));
    NodePtr v = token_values_node(token_rewards(model, ref, s), baselines[i], s.label, cfg);
    Tensor w({static_cast<int>(weights[i]->size())}, *weights[i]);
    NodePtr term = negate(sum(mul(v, constant(std::move(w)))));
    if (cfg.normalize_by_length) term = scale(term, 1.0 / static_cast<double>(s.target.size()));
    total = total ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

inline NodePtr tkto_loss(const Model& model, const Model& ref, const Microbatch& batch,
                         const std::vector<const std::vector<double>*>& weights,
                         const TKTOConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw config_error("tkto_loss: empty microbatch");
  return tkto_loss_with_baseline(model, ref, batch, weights, cfg,
                                 token_baseline(model, ref, batch, cfg.baseline_mode));
}

// ---- weight table persistence ----

inline void write_weight_table(const TokenWeightTable& t, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw config_error("write_weight_table: cannot write " + path);
  for (size_t i = 0; i < t.weights.size(); ++i) {
    nlohmann::ordered_json j = {{"sample_index", i},
                                {"weights", t.weights[i]},
                                {"pi_plus", t.pi_plus_digest},
                                {"pi_minus", t.pi_minus_digest}};
    f << j.dump() << "\n";
  }
}

inline TokenWeightTable read_weight_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("read_weight_table: cannot open " + path);
  TokenWeightTable t;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::ordered_json::parse(line);
      if (j.at("sample_index").get<size_t>() != t.weights.size())
        throw std::runtime_error("sample_index out of order");
      t.weights.push_back(j.at("weights").get<std::vector<double>>());
      t.pi_plus_digest = j.at("pi_plus").get<std::string>();
      t.pi_minus_digest = j.at("pi_minus").get<std::string>();
    } catch (const std::exception& e) {
      throw config_error("read_weight_table: " + path + ":" + std::to_string(lineno) + ": " +
                         e.what());
    }
  }
  return t;
}

}  // namespace tkto

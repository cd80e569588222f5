#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tkto/objectives.hpp"

namespace tkto {

enum class Objective { sft, dpo, kto, tkto };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::sft: return "sft";
    case Objective::dpo: return "dpo";
    case Objective::kto: return "kto";
    case Objective::tkto: return "tkto";
  }
  return "?";
}
inline Objective objective_from_string(const std::string& s) {
  if (s == "sft") return Objective::sft;
  if (s == "dpo") return Objective::dpo;
  if (s == "kto") return Objective::kto;
  if (s == "tkto") return Objective::tkto;
  throw config_error("unknown objective \"" + s + "\"");
}

enum class OptimizerKind { adaptive_moment, plain_sgd };

struct TrainConfig {
  Objective objective = Objective::sft;
  int epochs = 1;
  double learning_rate = 3e-3;
  int microbatch_size = 16;
  uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adaptive_moment;
  std::string checkpoint_dir;
  double dpo_beta = 0.10;
  // warm-start SFT ahead of preference runs (see run_tkto_pipeline)
  double warm_start_lr = 3e-3;
  int warm_start_epochs = 1;

  void validate() const {
    if (learning_rate <= 0.0) throw config_error("train config: learning_rate must be > 0");
    if (microbatch_size < 1) throw config_error("train config: microbatch_size must be >= 1");
    if (epochs < 0) throw config_error("train config: epochs must be >= 0");
  }
};

struct RunLogRow {
  int step = 0;
  double loss = 0.0;
  double ll_desirable = 0.0;
  double ll_undesirable = 0.0;
  double wall_ms = 0.0;
};

struct RunLog {
  std::vector<RunLogRow> rows;

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw config_error("runlog: cannot write " + path);
    f << "step,loss,ll_desirable,ll_undesirable,wall_ms\n";
    f.precision(17);
    for (const auto& r : rows)
      f << r.step << "," << r.loss << "," << r.ll_desirable << "," << r.ll_undesirable << ","
        << r.wall_ms << "\n";
  }
};

// Per-tensor Adam state; optimizer state never enters checkpoints.
class Optimizer {
 public:
  Optimizer(Model& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
    if (cfg.optimizer == OptimizerKind::adaptive_moment)
      for (const auto& [name, p] : model.params()) {
        m_.emplace_back(p->value.shape);
        v_.emplace_back(p->value.shape);
      }
  }

  void zero_grad() {
    for (const auto& [name, p] : model_.params()) p->zero_grad();
  }

  void step() {
    ++t_;
    size_t i = 0;
    for (const auto& [name, p] : model_.params()) {
      if (p->grad.data.empty()) {
        ++i;
        continue;
      }
      if (cfg_.optimizer == OptimizerKind::plain_sgd) {
        for (size_t j = 0; j < p->value.size(); ++j)
          p->value[j] -= cfg_.learning_rate * p->grad[j];
      } else {
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double bc1 = 1.0 - std::pow(b1, t_), bc2 = 1.0 - std::pow(b2, t_);
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (size_t j = 0; j < p->value.size(); ++j) {
          double g = p->grad[j];
          m[j] = b1 * m[j] + (1.0 - b1) * g;
          v[j] = b2 * v[j] + (1.0 - b2) * g * g;
          p->value[j] -= cfg_.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
      }
      ++i;
    }
  }

 private:
  Model& model_;
  TrainConfig cfg_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Mean log-likelihood pooled over all target tokens of the given label.
inline double probe_loglik(const Model& model, const Dataset& probe, Label label) {
  double s = 0.0;
  size_t n = 0;
  for (const Sample& smp : probe.samples) {
    if (smp.label != label) continue;
    auto lp = model.target_logprobs(smp.prompt, smp.target);
    s += sum_of(lp);
    n += lp.size();
  }
  return n ? s / static_cast<double>(n) : std::nan("");
}

namespace detail {

inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

}  // namespace detail

// Deterministic optimization loop shared by all objectives. `weights` is
// required for tkto and must align with `data` sample order. Probe rows
// record log-likelihoods on the fixed held-out probe set; row 0 is the state
// before any update.
inline RunLog train(Model& model, const Model* ref, const Dataset& data, const TrainConfig& cfg,
                    const TKTOConfig& tkto_cfg = {}, const TokenWeightTable* weights = nullptr,
                    const Dataset* probe = nullptr) {
  cfg.validate();
  tkto_cfg.validate();
  if (data.samples.empty()) throw config_error("train: empty dataset");
  if (cfg.objective != Objective::sft && ref == nullptr)
    throw config_error("train: objective requires a reference model");
  if (cfg.objective == Objective::sft)
    for (const Sample& s : data.samples)
      if (s.label != Label::desirable)
        throw config_error("train: sft requires a desirable-only dataset");
  if (cfg.objective == Objective::dpo && data.pairing_index.empty())
    throw config_error("train: dpo requires a non-empty pairing index");
  if (cfg.objective == Objective::tkto) {
    if (weights == nullptr) throw config_error("train: tkto requires a token weight table");
    if (weights->weights.size() != data.samples.size())
      throw config_error("train: weight table size does not match dataset");
  }

  size_t n_items = cfg.objective == Objective::dpo ? data.pairing_index.size()
                                                   : data.samples.size();
  Optimizer opt(model, cfg);
  RunLog log;
  auto t0 = std::chrono::steady_clock::now();
  auto wall = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  };
  auto probe_row = [&](int step, double loss) {
    RunLogRow r;
    r.step = step;
    r.loss = loss;
    r.ll_desirable = probe ? probe_loglik(model, *probe, Label::desirable) : std::nan("");
    r.ll_undesirable = probe ? probe_loglik(model, *probe, Label::undesirable) : std::nan("");
    r.wall_ms = wall();
    log.rows.push_back(r);
  };

  auto batch_loss = [&](const std::vector<size_t>& idx) -> NodePtr {
    if (cfg.objective == Objective::dpo) {
      std::vector<std::pair<int, int>> pairs;
      for (size_t i : idx) pairs.push_back(data.pairing_index[i]);
      return dpo_loss_pairs(model, *ref, data, pairs, cfg.dpo_beta);
    }
    Microbatch batch;
    for (size_t i : idx) batch.push_back(&data.samples[i]);
    switch (cfg.objective) {
      case Objective::sft: return sft_loss(model, batch);
      case Objective::kto: return kto_loss(model, *ref, batch, tkto_cfg);
      case Objective::tkto: {
        std::vector<const std::vector<double>*> w;
        for (size_t i : idx) w.push_back(&weights->weights[i]);
        return tkto_loss(model, *ref, batch, w, tkto_cfg);
      }
      default: throw config_error("train: unhandled objective");
    }
  };

  int step = 0;
  bool logged_initial = false;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(n_items);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(detail::mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t b = 0; b < n_items; b += cfg.microbatch_size) {
      std::vector<size_t> idx(order.begin() + b,
                              order.begin() + std::min(n_items, b + cfg.microbatch_size));
      NodePtr loss = batch_loss(idx);
      double lv = loss->value.scalar();
      if (!std::isfinite(lv))
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(step + 1));
      if (!logged_initial) {
        probe_row(0, lv);
        logged_initial = true;
      }
      opt.zero_grad();
      backward(loss);
      opt.step();
      ++step;
      probe_row(step, lv);
    }
  }
  if (!logged_initial) probe_row(0, std::nan(""));  // 0-epoch run still logs its state
  return log;
}

// Step 1: pi+ from normal labels, pi- from flipped labels, identical seeds.
inline std::pair<Model, Model> train_contrastive_pair(const Model& base, const Dataset& data,
                                                      const TrainConfig& cfg,
                                                      const TKTOConfig& tkto_cfg = {},
                                                      const Dataset* probe = nullptr,
                                                      RunLog* log_plus = nullptr,
                                                      RunLog* log_minus = nullptr) {
  bool has_d = false, has_u = false;
  for (const Sample& s : data.samples)
    (s.label == Label::desirable ? has_d : has_u) = true;
  if (!has_d || !has_u)
    throw config_error("train_contrastive_pair: dataset must contain both labels");

  TrainConfig kto_cfg = cfg;
  kto_cfg.objective = Objective::kto;
  Model ref = base.snapshot();

  Model plus = base.clone_trainable();
  RunLog lp = train(plus, &ref, data, kto_cfg, tkto_cfg, nullptr, probe);
  if (log_plus) *log_plus = std::move(lp);

  Dataset flipped = flip_labels(data);
  Model minus = base.clone_trainable();
  RunLog lm = train(minus, &ref, flipped, kto_cfg, tkto_cfg, nullptr, probe);
  if (log_minus) *log_minus = std::move(lm);

  return {plus.snapshot(), minus.snapshot()};
}

struct PipelineResult {
  Model final_model;
  TokenWeightTable weights;
  RunLog runlog;  // the Step-2 TKTO run
  std::string pi_plus_path, pi_minus_path, base_ref_path, final_path, weights_path,
      runlog_path;
};

// Full two-step TKTO pipeline from a warm-started base model. Persists the
// reference, both contrastive checkpoints, the weight table, the final model,
// and the Step-2 run log under out_dir.
inline PipelineResult run_tkto_pipeline(const Model& base, const Dataset& data,
                                        const WeightConfig& wcfg, const TKTOConfig& tcfg,
                                        const TrainConfig& cfg, const std::string& out_dir,
                                        const Dataset* probe = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  auto path = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };

  PipelineResult res;
  try {
    res.base_ref_path = path("base-ref.ckpt");
    base.snapshot().save(res.base_ref_path);

    auto [plus, minus] = train_contrastive_pair(base, data, cfg, tcfg);
    res.pi_plus_path = path("pi-plus.ckpt");
    res.pi_minus_path = path("pi-minus.ckpt");
    plus.save(res.pi_plus_path);
    minus.save(res.pi_minus_path);

    res.weights = estimate_token_weights(plus, minus, data, wcfg);
    res.weights.pi_plus_digest = file_digest(res.pi_plus_path);
    res.weights.pi_minus_digest = file_digest(res.pi_minus_path);
    res.weights_path = path("weights.jsonl");
    write_weight_table(res.weights, res.weights_path);

    Model ref = base.snapshot();
    Model final_model = base.clone_trainable();
    TrainConfig step2 = cfg;
    step2.objective = Objective::tkto;
    res.runlog = train(final_model, &ref, data, step2, tcfg, &res.weights, probe);
    res.final_path = path("final.ckpt");
    final_model.save(res.final_path);
    res.runlog_path = path("runlog.csv");
    res.runlog.write_csv(res.runlog_path);
    res.final_model = final_model.snapshot();
  } catch (const config_error&) {
    throw;
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("tkto pipeline: ") + e.what());
  }
  return res;
}

// SFT warm start on the desirable portion of `data`; preference runs
// initialize from this checkpoint.
inline Model warm_start_sft(const ModelConfig& mcfg, const Dataset& data, const TrainConfig& cfg,
                            const Dataset* probe = nullptr, RunLog* log_out = nullptr) {
  Dataset des;
  for (const Sample& s : data.samples)
    if (s.label == Label::desirable) des.samples.push_back(s);
  if (des.samples.empty()) throw config_error("warm start: no desirable samples");
  Model m(mcfg, true);
  TrainConfig sft_cfg = cfg;
  sft_cfg.objective = Objective::sft;
  sft_cfg.learning_rate = cfg.warm_start_lr;
  sft_cfg.epochs = cfg.warm_start_epochs;
  RunLog log = train(m, nullptr, des, sft_cfg, {}, nullptr, probe);
  if (log_out) *log_out = std::move(log);
  return m;
}

}  // namespace tkto

#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "tkto/trainer.hpp"

namespace tkto {

struct EvalReport {
  double accuracy = 0.0;
  double error_rate = 0.0;
  double bad_ratio = 0.0;
  int n_samples = 0;

  static void write_csv_header(std::ofstream& f) {
    f << "model_id,accuracy,error_rate,bad_ratio,n\n";
  }
  void write_csv_row(std::ofstream& f, const std::string& model_id) const {
    f << model_id << "," << accuracy << "," << error_rate << "," << bad_ratio << ","
      << n_samples << "\n";
  }
};

inline int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Accuracy over the desirable samples of the eval set: greedy-decode each
// prompt and check the token at the annotated realization position. This is
// the one place sample metadata may be read.
inline double targeted_accuracy(const Model& model, const Dataset& eval_set) {
  int n = 0, correct = 0;
  for (const Sample& s : eval_set.samples) {
    if (s.label != Label::desirable) continue;
    ++n;
    auto decoded = model.greedy_decode(s.prompt, static_cast<int>(s.target.size()));
    int pos = s.meta.realization_position;
    if (pos < static_cast<int>(decoded.size()) &&
        decoded[pos] == s.target[pos])
      ++correct;
  }
  if (n == 0) throw config_error("targeted_accuracy: no desirable samples in eval set");
  return static_cast<double>(correct) / n;
}

// Mean normalized edit distance of greedy decodes against the desirable
// targets, plus the fraction of samples above the 0.3 threshold.
inline std::pair<double, double> error_rate(const Model& model, const Dataset& eval_set) {
  double sum = 0.0;
  int n = 0, bad = 0;
  for (const Sample& s : eval_set.samples) {
    if (s.label != Label::desirable) continue;
    ++n;
    // drop the trailing EOS; decode stops before emitting it
    std::vector<int> target = s.target;
    while (!target.empty() && target.back() == kEosToken) target.pop_back();
    auto decoded = model.greedy_decode(s.prompt, static_cast<int>(s.target.size()));
    double er = target.empty() ? 0.0
                               : static_cast<double>(levenshtein(decoded, target)) /
                                     static_cast<double>(target.size());
    sum += er;
    if (er > 0.3) ++bad;
  }
  if (n == 0) throw config_error("error_rate: no desirable samples in eval set");
  return {sum / n, static_cast<double>(bad) / n};
}

inline EvalReport evaluate(const Model& model, const Dataset& eval_set) {
  EvalReport r;
  r.accuracy = targeted_accuracy(model, eval_set);
  auto [er, bad] = error_rate(model, eval_set);
  r.error_rate = er;
  r.bad_ratio = bad;
  for (const Sample& s : eval_set.samples)
    if (s.label == Label::desirable) ++r.n_samples;
  return r;
}

// Fixed histogram binning: width 0.1 over [-5,5] plus overflow bins at the
// ends, so emitted artifacts are comparable across runs.
struct Histogram {
  static constexpr double lo = -5.0, hi = 5.0, width = 0.1;
  std::vector<long> counts = std::vector<long>(102, 0);  // [under, 100 bins, over]

  void add(double x) {
    if (x < lo)
      ++counts.front();
    else if (x >= hi)
      ++counts.back();
    else
      ++counts[1 + static_cast<size_t>((x - lo) / width)];
  }
  double bin_lo(size_t i) const {
    if (i == 0) return -std::numeric_limits<double>::infinity();
    return lo + (i - 1) * width;
  }
  double bin_hi(size_t i) const {
    if (i + 1 == counts.size()) return std::numeric_limits<double>::infinity();
    return lo + i * width;
  }
};

struct RewardAnalysis {
  double mean_all = 0.0;
  double mean_desirable_target = 0.0;    // realization positions, desirable samples
  double mean_undesirable_target = 0.0;  // realization positions, undesirable samples
  long n_all = 0, n_desirable_target = 0, n_undesirable_target = 0;
  Histogram hist_all, hist_desirable_target, hist_undesirable_target;
};

// Per-token log(pi+/pi-) aggregated over all tokens and over the realization
// positions of each label group.
inline RewardAnalysis analyze_rewards(const Model& pi_plus, const Model& pi_minus,
                                      const Dataset& data) {
  RewardAnalysis a;
  double s_all = 0.0, s_d = 0.0, s_u = 0.0;
  for (const Sample& s : data.samples) {
    auto lp = pi_plus.target_logprobs(s.prompt, s.target);
    auto lm = pi_minus.target_logprobs(s.prompt, s.target);
    for (size_t t = 0; t < lp.size(); ++t) {
      double r = lp[t] - lm[t];
      s_all += r;
      ++a.n_all;
      a.hist_all.add(r);
      if (static_cast<int>(t) == s.meta.realization_position) {
        if (s.label == Label::desirable) {
          s_d += r;
          ++a.n_desirable_target;
          a.hist_desirable_target.add(r);
        } else {
          s_u += r;
          ++a.n_undesirable_target;
          a.hist_undesirable_target.add(r);
        }
      }
    }
  }
  a.mean_all = a.n_all ? s_all / a.n_all : 0.0;
  a.mean_desirable_target = a.n_desirable_target ? s_d / a.n_desirable_target : 0.0;
  a.mean_undesirable_target = a.n_undesirable_target ? s_u / a.n_undesirable_target : 0.0;
  return a;
}

inline void write_reward_analysis(const RewardAnalysis& a, const std::string& means_path,
                                  const std::string& hist_path) {
  std::ofstream f(means_path);
  if (!f) throw config_error("analyze: cannot write " + means_path);
  f.precision(17);
  f << "group,mean,n\n";
  f << "all," << a.mean_all << "," << a.n_all << "\n";
  f << "desirable_target," << a.mean_desirable_target << "," << a.n_desirable_target << "\n";
  f << "undesirable_target," << a.mean_undesirable_target << "," << a.n_undesirable_target
    << "\n";
  std::ofstream h(hist_path);
  if (!h) throw config_error("analyze: cannot write " + hist_path);
  h << "group,bin_lo,bin_hi,count\n";
  auto dump = [&](const char* g, const Histogram& hist) {
    for (size_t i = 0; i < hist.counts.size(); ++i)
      h << g << "," << hist.bin_lo(i) << "," << hist.bin_hi(i) << "," << hist.counts[i] << "\n";
  };
  dump("all", a.hist_all);
  dump("desirable_target", a.hist_desirable_target);
  dump("undesirable_target", a.hist_undesirable_target);
}

struct WeightMapRow {
  int sample_index;
  int position;
  int token_id;
  double weight;
  bool is_target;  // realization position
};

inline std::vector<WeightMapRow> weight_map(const TokenWeightTable& table, const Dataset& data,
                                            const std::vector<int>& sample_indices) {
  std::vector<WeightMapRow> rows;
  for (int si : sample_indices) {
    if (si < 0 || si >= static_cast<int>(data.samples.size()) ||
        si >= static_cast<int>(table.weights.size()))
      throw config_error("weight_map: sample index out of range: " + std::to_string(si));
    const Sample& s = data.samples[si];
    const auto& w = table.weights[si];
    for (size_t t = 0; t < w.size(); ++t)
      rows.push_back({si, static_cast<int>(t), s.target[t], w[t],
                      static_cast<int>(t) == s.meta.realization_position});
  }
  return rows;
}

inline void write_weight_map(const std::vector<WeightMapRow>& rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw config_error("weight_map: cannot write " + path);
  f.precision(17);
  f << "sample_index,position,token_id,weight,is_target\n";
  for (const auto& r : rows)
    f << r.sample_index << "," << r.position << "," << r.token_id << "," << r.weight << ","
      << (r.is_target ? 1 : 0) << "\n";
}

struct SweepRow {
  double lo, hi;
  double accuracy, error_rate, bad_ratio;
};

// Clamp-range sensitivity sweep. The contrastive pair does not depend on
// (L,U), so it is trained once and the weight estimation + Step 2 rerun per
// range; results are identical to running the full pipeline per range.
inline std::vector<SweepRow> clamp_sweep(const Model& base, const Dataset& data,
                                         const std::vector<std::pair<double, double>>& ranges,
                                         const WeightConfig& wcfg_in, const TKTOConfig& tcfg,
                                         const TrainConfig& cfg, const Dataset& eval_set) {
  for (const auto& [lo, hi] : ranges)
    if (lo > hi)
      throw config_error("clamp_sweep: invalid range (" + std::to_string(lo) + "," +
                         std::to_string(hi) + ")");
  auto [plus, minus] = train_contrastive_pair(base, data, cfg, tcfg);
  Model ref = base.snapshot();
  std::vector<SweepRow> rows;
  for (const auto& [lo, hi] : ranges) {
    WeightConfig wcfg = wcfg_in;
    wcfg.clamp_lo = lo;
    wcfg.clamp_hi = hi;
    TokenWeightTable weights = estimate_token_weights(plus, minus, data, wcfg);
    Model m = base.clone_trainable();
    TrainConfig step2 = cfg;
    step2.objective = Objective::tkto;
    try {
      train(m, &ref, data, step2, tcfg, &weights, nullptr);
    } catch (const std::exception& e) {
      throw std::runtime_error("clamp_sweep: range (" + std::to_string(lo) + "," +
                               std::to_string(hi) + "): " + e.what());
    }
    EvalReport r = evaluate(m, eval_set);
    rows.push_back({lo, hi, r.accuracy, r.error_rate, r.bad_ratio});
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw config_error("sweep: cannot write " + path);
  f.precision(17);
  f << "L,U,accuracy,error_rate,bad_ratio\n";
  for (const auto& r : rows)
    f << r.lo << "," << r.hi << "," << r.accuracy << "," << r.error_rate << "," << r.bad_ratio
      << "\n";
}

}  // namespace tkto

// Acceptance gate: one self-contained binary, one pass/fail line per
// criterion. Exit code is the number of failed criteria.
//
//   1. finite-difference gradient suite over every op and loss
//   2. closed-form oracles for weights/values/losses
//   3. gradient wall around frozen models and detached baselines
//   4. label-flip symmetry of the contrastive pair
//   5. end-to-end unpaired run: warm start -> TKTO vs KTO, 5 seeds
//   6. probe log-likelihood directions (TKTO vs SFT)
//   7. reward / weight concentration at the realization token
//   8. clamp-range sweep stability
//   9. determinism and lossless persistence

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "tkto/eval.hpp"

using namespace tkto;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

double secs_since(clk::time_point t0) {
  return std::chrono::duration<double>(clk::now() - t0).count();
}

bool report(int idx, bool ok, const std::string& what, const std::string& detail) {
  std::printf("[%d/9] %s — %s (%s)\n", idx, ok ? "PASS" : "FAIL", what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  return ok;
}

ModelConfig tiny_cfg(uint64_t seed) {
  ModelConfig c;
  c.vocab_size = 6;
  c.embed_dim = 4;
  c.context_len = 6;
  c.num_heads = 2;
  c.seed = seed;
  return c;
}

void jitter(Model& m, uint64_t seed, double sd = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sd);
  for (const auto& [name, p] : m.params())
    for (double& v : p->value.data) v += dist(rng);
}

Sample make_sample(std::vector<int> prompt, std::vector<int> target, Label label) {
  Sample s;
  s.prompt = std::move(prompt);
  s.target = std::move(target);
  s.label = label;
  return s;
}

std::string params_digest(const Model& m) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, p] : m.params())
    h = fnv1a64(reinterpret_cast<const char*>(p->value.data.data()),
                p->value.data.size() * sizeof(double), h);
  return digest_hex(h);
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Keep random values away from relu/clamp kinks so central differences with
// h=1e-5 stay valid.
Tensor random_away_from(std::vector<int> shape, std::mt19937_64& rng,
                        const std::vector<double>& kinks, double margin = 1e-3) {
  Tensor t = gradcheck::random_tensor(std::move(shape), rng);
  for (double& v : t.data)
    for (double k : kinks)
      if (std::abs(v - k) < margin) v += 2 * margin;
  return t;
}

// ---------------------------------------------------------------- criterion 1

bool criterion1() {
  auto t0 = clk::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  size_t checked = 0;
  const int kInstances = 20;
  auto track = [&](const gradcheck::Result& r) {
    worst = std::max(worst, r.max_rel_err);
    checked += r.n_checked;
  };

  for (int i = 0; i < kInstances; ++i) {
    // elementwise ops over a 2x3 operand pair, plus scalar broadcast
    NodePtr a = make_leaf(gradcheck::random_tensor({2, 3}, rng), true);
    NodePtr b = make_leaf(gradcheck::random_tensor({2, 3}, rng), true);
    NodePtr s = make_leaf(gradcheck::random_tensor({1}, rng), true);
    Tensor mix = gradcheck::random_tensor({2, 3}, rng);
    auto scalarize = [&](NodePtr x) { return sum(mul(x, constant(mix))); };
    track(gradcheck::check_leaves({a, b}, [&] { return scalarize(add(a, b)); }));
    track(gradcheck::check_leaves({a, b}, [&] { return scalarize(sub(a, b)); }));
    track(gradcheck::check_leaves({a, b}, [&] { return scalarize(mul(a, b)); }));
    track(gradcheck::check_leaves({a, s}, [&] { return scalarize(add(a, s)); }));
    track(gradcheck::check_leaves({a, s}, [&] { return scalarize(mul(a, s)); }));
    track(gradcheck::check_leaves({a}, [&] { return scalarize(negate(a)); }));
    track(gradcheck::check_leaves({a}, [&] { return scalarize(exp(a)); }));
    track(gradcheck::check_leaves({a}, [&] { return scalarize(sigmoid(a)); }));
    track(gradcheck::check_leaves({a}, [&] { return scalarize(scale(a, 1.7)); }));
    track(gradcheck::check_leaves({a}, [&] { return scalarize(add_const(a, -0.4)); }));

    NodePtr pos = make_leaf(gradcheck::random_tensor({2, 3}, rng, 0.2, 3.0), true);
    track(gradcheck::check_leaves({pos}, [&] { return scalarize(log(pos)); }));

    NodePtr kinked = make_leaf(random_away_from({2, 3}, rng, {0.0, -1.0, 1.0}), true);
    track(gradcheck::check_leaves({kinked}, [&] { return scalarize(relu(kinked)); }));
    track(gradcheck::check_leaves(
        {kinked}, [&] { return scalarize(clamp(kinked, -1.0, 1.0)); }));

    // matrix ops
    NodePtr m1 = make_leaf(gradcheck::random_tensor({2, 3}, rng), true);
    NodePtr m2 = make_leaf(gradcheck::random_tensor({3, 2}, rng), true);
    Tensor mix22 = gradcheck::random_tensor({2, 2}, rng);
    track(gradcheck::check_leaves(
        {m1, m2}, [&] { return sum(mul(matmul(m1, m2), constant(mix22))); }));
    Tensor mix32 = gradcheck::random_tensor({3, 2}, rng);
    track(gradcheck::check_leaves(
        {m1}, [&] { return sum(mul(transpose(m1), constant(mix32))); }));
    track(gradcheck::check_leaves({a}, [&] { return scalarize(log_softmax(a, 1)); }));
    track(gradcheck::check_leaves({a}, [&] { return scalarize(softmax(a, 1)); }));
    track(gradcheck::check_leaves({a}, [&] { return sum(a); }));
    track(gradcheck::check_leaves({a}, [&] { return mean(a); }));

    // indexing / structural ops
    NodePtr table = make_leaf(gradcheck::random_tensor({4, 3}, rng), true);
    track(gradcheck::check_leaves({table}, [&] {
      return scalarize(gather_rows(table, {3, 1}));
    }));
    Tensor mix2 = gradcheck::random_tensor({2}, rng);
    track(gradcheck::check_leaves({table}, [&] {
      return sum(mul(gather_entries(table, {0, 2}, {1, 2}), constant(mix2)));
    }));
    track(gradcheck::check_leaves({table}, [&] {
      return sum(mul(slice_rows(table, 1, 3), constant(mix)));
    }));
    Tensor mix22b = gradcheck::random_tensor({2, 2}, rng);
    track(gradcheck::check_leaves({m1}, [&] {
      return sum(mul(slice_cols(m1, 1, 3), constant(mix22b)));
    }));
    NodePtr c1 = make_leaf(gradcheck::random_tensor({2, 1}, rng), true);
    NodePtr c2 = make_leaf(gradcheck::random_tensor({2, 2}, rng), true);
    track(gradcheck::check_leaves({c1, c2}, [&] {
      std::vector<NodePtr> parts = {c1, c2};
      return scalarize(concat_cols(parts));
    }));
    NodePtr bias = make_leaf(gradcheck::random_tensor({3}, rng), true);
    track(gradcheck::check_leaves({a, bias}, [&] { return scalarize(add_bias(a, bias)); }));
    NodePtr gamma = make_leaf(gradcheck::random_tensor({3}, rng, 0.5, 1.5), true);
    NodePtr beta = make_leaf(gradcheck::random_tensor({3}, rng), true);
    track(gradcheck::check_leaves(
        {a, gamma, beta}, [&] { return scalarize(layer_norm(a, gamma, beta)); }));
  }

  // the four losses on a tiny model; kto/tkto use pinned detached baselines,
  // which is exactly what the backward pass differentiates through
  for (int i = 0; i < kInstances; ++i) {
    Model m(tiny_cfg(200 + i));
    jitter(m, 300 + i);
    Model ref(tiny_cfg(400 + i));
    jitter(ref, 500 + i);
    Model ref_frozen = ref.snapshot();
    Sample d = make_sample({1, 2}, {3, 4}, Label::desirable);
    Sample u = make_sample({2, 1}, {5, 3}, Label::undesirable);
    Microbatch both = {&d, &u};
    Microbatch des_only = {&d};
    Dataset ds;
    ds.samples = {d, u};
    ds.pairing_index = {{0, 1}};
    TKTOConfig tcfg;
    tcfg.beta = 0.3;
    std::vector<double> w1 = {1.4, 0.7}, w2 = {2.1, 0.5};
    std::vector<const std::vector<double>*> wts = {&w1, &w2};
    std::vector<std::vector<double>> z = {{0.05, 0.12}, {0.02, 0.4}};

    track(gradcheck::check_model(m, [&] { return sft_loss(m, des_only); }));
    track(gradcheck::check_model(m, [&] { return dpo_loss(m, ref_frozen, ds, 0.25); }));
    track(gradcheck::check_model(
        m, [&] { return kto_loss_with_baseline(m, ref_frozen, both, tcfg, 0.37); }));
    track(gradcheck::check_model(m, [&] {
      return tkto_loss_with_baseline(m, ref_frozen, both, wts, tcfg, z);
    }));
  }

  double dt = secs_since(t0);
  std::ostringstream d;
  d << checked << " partials, max rel err " << worst << ", " << dt << " s";
  return report(1, worst < 1e-4 && dt < 60.0, "finite-difference gradient suite", d.str());
}

// ---------------------------------------------------------------- criterion 2

bool criterion2() {
  double worst = 0.0;
  auto track = [&](double err) { worst = std::max(worst, err); };

  Model a(tiny_cfg(21));
  jitter(a, 22);
  Model b(tiny_cfg(23));
  jitter(b, 24);
  Model plus = a.snapshot(), minus = b.snapshot();
  Dataset d;
  d.samples.push_back(make_sample({1, 2}, {3, 4, 5}, Label::desirable));
  d.samples.push_back(make_sample({2, 1}, {4, 3}, Label::undesirable));
  d.pairing_index = {{0, 1}};

  // token weights: direct arithmetic replica of the clamped-ratio formula
  WeightConfig wcfg;
  TokenWeightTable t = estimate_token_weights(plus, minus, d, wcfg);
  for (size_t i = 0; i < d.samples.size(); ++i) {
    const Sample& s = d.samples[i];
    auto lp = plus.target_logprobs(s.prompt, s.target);
    auto lm = minus.target_logprobs(s.prompt, s.target);
    double mu = s.label == Label::desirable ? 1.0 : -1.0;
    for (size_t k = 0; k < lp.size(); ++k) {
      double direct = std::exp(mu * std::min(std::max(lp[k] - lm[k], -2.0), 2.0));
      track(std::abs(t.weights[i][k] - direct));
    }
  }

  // token values: direct sigmoid replica of the value function
  TKTOConfig tcfg;
  tcfg.beta = 0.3;
  tcfg.lambda_d = 1.3;
  tcfg.lambda_u = 0.8;
  std::vector<double> rewards = {0.4, -1.2, 0.05}, base = {0.1, 0.0, 0.2};
  auto sigma = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  TokenValueRecord vd = token_values(rewards, base, Label::desirable, tcfg);
  TokenValueRecord vu = token_values(rewards, base, Label::undesirable, tcfg);
  for (size_t k = 0; k < rewards.size(); ++k) {
    track(std::abs(vd.values[k] - 1.3 * sigma(0.3 * (rewards[k] - base[k]))));
    track(std::abs(vu.values[k] - 0.8 * sigma(0.3 * (base[k] - rewards[k]))));
  }

  // kto: direct replica with the same pooled baseline
  Model pol = a.clone_trainable();
  Model ref = b.snapshot();
  Microbatch batch = {&d.samples[0], &d.samples[1]};
  double z0 = kto_sequence_baseline(pol, ref, batch);
  auto r_seq = [&](const Sample& s) {
    return sum_of(pol.target_logprobs(s.prompt, s.target)) -
           sum_of(ref.target_logprobs(s.prompt, s.target));
  };
  double kto_direct = ((1.3 - 1.3 * sigma(0.3 * (r_seq(d.samples[0]) - z0))) +
                       (0.8 - 0.8 * sigma(-0.3 * (r_seq(d.samples[1]) - z0)))) /
                      2.0;
  track(std::abs(kto_loss(pol, ref, batch, tcfg)->value.scalar() - kto_direct));

  // dpo: model == ref gives exactly ln 2; a jittered model matches the
  // closed form
  Model same = a.snapshot();
  track(std::abs(dpo_loss(pol, same, d, 0.1)->value.scalar() - std::log(2.0)));
  double dw = r_seq(d.samples[0]), dl = r_seq(d.samples[1]);
  double dpo_direct = -std::log(sigma(0.25 * (dw - dl)));
  track(std::abs(dpo_loss(pol, ref, d, 0.25)->value.scalar() - dpo_direct));

  // tkto: direct replica of the weighted token sum with the per-position baseline
  std::vector<const std::vector<double>*> wts = {&t.weights[0], &t.weights[1]};
  auto baselines = token_baseline(pol, ref, batch, BaselineMode::per_position_exact);
  double tkto_direct = 0.0;
  for (size_t i = 0; i < batch.size(); ++i) {
    const Sample& s = *batch[i];
    auto lp = pol.target_logprobs(s.prompt, s.target);
    auto lr = ref.target_logprobs(s.prompt, s.target);
    double acc = 0.0;
    for (size_t k = 0; k < lp.size(); ++k) {
      double r = lp[k] - lr[k];
      double v = s.label == Label::desirable
                     ? tcfg.lambda_d * sigma(tcfg.beta * (r - baselines[i][k]))
                     : tcfg.lambda_u * sigma(tcfg.beta * (baselines[i][k] - r));
      acc += (*wts[i])[k] * v;
    }
    tkto_direct -= acc;
  }
  tkto_direct /= static_cast<double>(batch.size());
  track(std::abs(tkto_loss(pol, ref, batch, wts, tcfg)->value.scalar() - tkto_direct));

  // quoted weight anchors from the reported reward values 0.22 and -1.54
  bool anchors = std::abs(std::exp(0.22) - 1.24608) < 5e-6 &&
                 std::abs(std::exp(1.54) - 4.66459) < 5e-6;

  std::ostringstream det;
  det << "max abs err " << worst << ", anchors e^0.22/e^1.54 "
      << (anchors ? "ok" : "off");
  return report(2, worst < 1e-12 && anchors, "closed-form oracles", det.str());
}

// ---------------------------------------------------------------- criterion 3

bool criterion3() {
  // frozen models: zero gradient through the full tkto loss
  Model m(tiny_cfg(31));
  jitter(m, 32);
  Model ref(tiny_cfg(33));
  jitter(ref, 34);
  Model plus(tiny_cfg(35));
  jitter(plus, 36);
  Model ref_f = ref.snapshot(), plus_f = plus.snapshot(), minus_f = m.snapshot();
  Dataset d;
  d.samples.push_back(make_sample({1, 2}, {3, 4}, Label::desirable));
  d.samples.push_back(make_sample({2, 1}, {5, 3}, Label::undesirable));
  TokenWeightTable t = estimate_token_weights(plus_f, minus_f, d, WeightConfig{});
  Microbatch batch = {&d.samples[0], &d.samples[1]};
  std::vector<const std::vector<double>*> wts = {&t.weights[0], &t.weights[1]};

  for (const auto& [name, p] : m.params()) p->zero_grad();
  NodePtr loss = tkto_loss(m, ref_f, batch, wts, TKTOConfig{});
  backward(loss);
  double frozen_grad = 0.0;
  for (const Model* f : {&ref_f, &plus_f, &minus_f})
    for (const auto& [name, p] : f->params())
      for (double g : p->grad.data) frozen_grad = std::max(frozen_grad, std::abs(g));
  bool policy_has_grad = false;
  for (const auto& [name, p] : m.params())
    for (double g : p->grad.data)
      if (g != 0.0) policy_has_grad = true;

  // 2-parameter toy: loss = sigmoid(a*b - detach(a^2 + b)). The analytic
  // gradient must match finite differences with the baseline pinned, and
  // differ from finite differences that let the baseline move.
  NodePtr pa = make_leaf(Tensor({1}, 0.7), true);
  NodePtr pb = make_leaf(Tensor({1}, -0.4), true);
  double z0 = 0.7 * 0.7 + (-0.4);
  auto live = [&] { return sigmoid(sub(mul(pa, pb), detach(add(mul(pa, pa), pb)))); };
  auto pinned = [&] { return sigmoid(add_const(mul(pa, pb), -z0)); };
  gradcheck::Result wall = gradcheck::check_leaves({pa, pb}, pinned);
  // live finite differences include the baseline path; measure the gap
  pa->zero_grad();
  pb->zero_grad();
  backward(live());
  double h = 1e-5;
  double a0 = pa->value[0];
  pa->value[0] = a0 + h;
  double fp = live()->value.scalar();
  pa->value[0] = a0 - h;
  double fm = live()->value.scalar();
  pa->value[0] = a0;
  double live_fd = (fp - fm) / (2.0 * h);
  double gap = std::abs(live_fd - pa->grad[0]);

  std::ostringstream det;
  det << "frozen max |g| " << frozen_grad << ", toy pinned-FD err " << wall.max_rel_err
      << ", live-FD gap " << gap;
  return report(3,
                frozen_grad == 0.0 && policy_has_grad && wall.max_rel_err < 1e-6 &&
                    gap > 1e-3,
                "gradient wall (frozen models, detached baseline)", det.str());
}

// ---------------------------------------------------------------- criterion 4

bool criterion4() {
  TaskConfig task;
  Dataset d = generate(task, 60, 60, 41);
  ModelConfig mc;
  mc.seed = 42;
  Model base(mc);
  jitter(base, 43, 0.02);
  TrainConfig cfg;
  cfg.seed = 44;

  fs::path dir = fresh_dir("tkto_accept_c4");
  auto [plus, minus] = train_contrastive_pair(base, d, cfg);
  auto [plus_f, minus_f] = train_contrastive_pair(base, flip_labels(d), cfg);
  plus.save((dir / "plus.ckpt").string());
  minus.save((dir / "minus.ckpt").string());
  plus_f.save((dir / "plus_f.ckpt").string());
  minus_f.save((dir / "minus_f.ckpt").string());
  bool ok = file_digest((dir / "minus.ckpt").string()) ==
                file_digest((dir / "plus_f.ckpt").string()) &&
            file_digest((dir / "plus.ckpt").string()) ==
                file_digest((dir / "minus_f.ckpt").string());
  std::string det = ok ? "pi-(D) == pi+(flip D) and vice versa, digest-equal"
                       : "checkpoint digests diverged";
  fs::remove_all(dir);
  return report(4, ok, "label-flip symmetry of the contrastive pair", det);
}

// -------------------------------------------------- criteria 5-8 shared state

struct Seed1Artifacts {
  Model base, plus, minus;
  TokenWeightTable weights;
  Dataset train_set, eval_set;
  RunLog tkto_log, sft_log;
  TrainConfig cfg;
  TKTOConfig tcfg;
};
std::optional<Seed1Artifacts> g_seed1;

// Desk-scale calibration: library defaults except warm_start_lr (8e-4,
// keeps the warm start at chance accuracy on the realization) and lambda_u
// (0.25, keeps the never-saturating per-token push-down from corrupting the
// copying circuit at this scale).
TrainConfig c5_train_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.warm_start_lr = 8e-4;
  cfg.warm_start_epochs = 1;
  cfg.learning_rate = 3e-3;
  cfg.epochs = 1;
  cfg.microbatch_size = 16;
  return cfg;
}

TKTOConfig c5_tkto_config() {
  TKTOConfig tcfg;
  tcfg.lambda_u = 0.25;
  return tcfg;
}

bool criterion5() {
  auto t0 = clk::now();
  TaskConfig task;
  WeightConfig wcfg;
  int passed = 0;
  std::ostringstream det;

  for (uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig cfg = c5_train_config(seed);
    TKTOConfig tcfg = c5_tkto_config();
    ModelConfig mcfg;
    mcfg.seed = seed;
    Dataset train_set = generate(task, 2000, 2000, seed);
    Dataset eval_set = generate(task, 200, 0, seed + 1000003);
    Dataset probe = generate(task, 40, 40, seed + 777);

    Model base = warm_start_sft(mcfg, train_set, cfg);
    EvalReport warm = evaluate(base, eval_set);

    auto [plus, minus] = train_contrastive_pair(base, train_set, cfg, tcfg);
    TokenWeightTable weights = estimate_token_weights(plus, minus, train_set, wcfg);
    Model ref = base.snapshot();

    Model tkto_m = base.clone_trainable();
    TrainConfig s2 = cfg;
    s2.objective = Objective::tkto;
    RunLog tkto_log =
        train(tkto_m, &ref, train_set, s2, tcfg, &weights, seed == 1 ? &probe : nullptr);
    EvalReport tk = evaluate(tkto_m, eval_set);

    Model kto_m = base.clone_trainable();
    TrainConfig kcfg = cfg;
    kcfg.objective = Objective::kto;
    train(kto_m, &ref, train_set, kcfg, tcfg, nullptr, nullptr);
    EvalReport kt = evaluate(kto_m, eval_set);

    bool ok = warm.accuracy <= 0.65 && tk.accuracy >= 0.90 &&
              tk.error_rate <= 0.6 * warm.error_rate && tk.accuracy >= kt.accuracy;
    if (ok) ++passed;
    det << "s" << seed << (ok ? "+" : "-") << "(warm " << warm.accuracy << "/"
        << warm.error_rate << " tkto " << tk.accuracy << "/" << tk.error_rate << " kto "
        << kt.accuracy << ") ";

    if (seed == 1) {
      // stash seed-1 artifacts for criteria 6-8, plus the SFT comparison run
      Dataset des;
      for (const Sample& s : train_set.samples)
        if (s.label == Label::desirable) des.samples.push_back(s);
      Model sf = base.clone_trainable();
      TrainConfig scfg = cfg;
      scfg.objective = Objective::sft;
      RunLog sft_log = train(sf, nullptr, des, scfg, tcfg, nullptr, &probe);
      g_seed1 = Seed1Artifacts{base.snapshot(), std::move(plus),   std::move(minus),
                               std::move(weights), std::move(train_set),
                               std::move(eval_set), std::move(tkto_log),
                               std::move(sft_log),  cfg,            tcfg};
    }
  }

  double dt = secs_since(t0);
  det << dt << " s";
  return report(5, passed >= 4 && dt < 600.0,
                "end-to-end unpaired TKTO vs KTO over 5 seeds", det.str());
}

// ---------------------------------------------------------------- criterion 6

bool criterion6() {
  if (!g_seed1) return report(6, false, "probe log-likelihood directions", "no seed-1 run");
  const RunLog& tk = g_seed1->tkto_log;
  const RunLog& sf = g_seed1->sft_log;
  double tk_d0 = tk.rows.front().ll_desirable, tk_d1 = tk.rows.back().ll_desirable;
  double tk_u0 = tk.rows.front().ll_undesirable, tk_u1 = tk.rows.back().ll_undesirable;
  double sf_u0 = sf.rows.front().ll_undesirable, sf_u1 = sf.rows.back().ll_undesirable;
  bool ok = tk_d1 > tk_d0 && tk_u1 < tk_u0 && sf_u1 > sf_u0;
  std::ostringstream det;
  det << "tkto des " << tk_d0 << "->" << tk_d1 << ", tkto und " << tk_u0 << "->" << tk_u1
      << ", sft und " << sf_u0 << "->" << sf_u1;
  return report(6, ok, "probe log-likelihood directions (TKTO vs SFT)", det.str());
}

// ---------------------------------------------------------------- criterion 7

bool criterion7() {
  if (!g_seed1) return report(7, false, "reward/weight concentration", "no seed-1 run");
  RewardAnalysis a = analyze_rewards(g_seed1->plus, g_seed1->minus, g_seed1->train_set);
  bool reward_order = a.mean_desirable_target > a.mean_all &&
                      a.mean_all > a.mean_undesirable_target;

  double w_real = 0.0, w_rest = 0.0;
  long n_real = 0, n_rest = 0;
  const Dataset& d = g_seed1->train_set;
  for (size_t i = 0; i < d.samples.size(); ++i) {
    const Sample& s = d.samples[i];
    for (size_t k = 0; k < s.target.size(); ++k) {
      if (static_cast<int>(k) == s.meta.realization_position) {
        w_real += g_seed1->weights.weights[i][k];
        ++n_real;
      } else {
        w_rest += g_seed1->weights.weights[i][k];
        ++n_rest;
      }
    }
  }
  w_real /= n_real;
  w_rest /= n_rest;
  bool weight_conc = w_real >= 2.0 * w_rest;

  std::ostringstream det;
  det << "reward means " << a.mean_desirable_target << " > " << a.mean_all << " > "
      << a.mean_undesirable_target << "; weight " << w_real << " vs " << w_rest << " ("
      << w_real / w_rest << "x)";
  return report(7, reward_order && weight_conc,
                "reward/weight concentration at the realization token", det.str());
}

// ---------------------------------------------------------------- criterion 8

bool criterion8() {
  if (!g_seed1) return report(8, false, "clamp sweep stability", "no seed-1 run");
  auto rows = clamp_sweep(g_seed1->base, g_seed1->train_set,
                          {{-1, 1}, {-2, 2}, {-3, 3}}, WeightConfig{}, g_seed1->tcfg,
                          g_seed1->cfg, g_seed1->eval_set);
  double lo = 1.0, hi = 0.0;
  for (const auto& r : rows) {
    lo = std::min(lo, r.accuracy);
    hi = std::max(hi, r.accuracy);
  }
  bool ok = rows.size() == 3 && (hi - lo) < 0.05;
  std::ostringstream det;
  det << rows.size() << " rows, accuracy spread " << (hi - lo);
  return report(8, ok, "clamp sweep stability over (-1,1)/(-2,2)/(-3,3)", det.str());
}

// ---------------------------------------------------------------- criterion 9

std::string strip_last_column(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream out;
  std::string line;
  while (std::getline(f, line)) {
    auto pos = line.rfind(',');
    out << (pos == std::string::npos ? line : line.substr(0, pos)) << "\n";
  }
  return out.str();
}

bool criterion9() {
  TaskConfig task;
  task.vocab_size = 16;
  task.prompt_len = 5;
  task.target_len = 5;
  task.filler_lo = 6;
  task.filler_hi = 15;
  Dataset d = generate(task, 40, 40, 91);
  ModelConfig mc;
  mc.vocab_size = 16;
  mc.embed_dim = 8;
  mc.context_len = 12;
  mc.num_heads = 2;
  mc.seed = 92;
  Model base(mc);
  TrainConfig cfg;
  cfg.seed = 93;

  fs::path d1 = fresh_dir("tkto_accept_c9a"), d2 = fresh_dir("tkto_accept_c9b");
  run_tkto_pipeline(base, d, WeightConfig{}, TKTOConfig{}, cfg, d1.string());
  run_tkto_pipeline(base, d, WeightConfig{}, TKTOConfig{}, cfg, d2.string());

  bool artifacts_equal = true;
  for (const char* name :
       {"base-ref.ckpt", "pi-plus.ckpt", "pi-minus.ckpt", "final.ckpt", "weights.jsonl"})
    artifacts_equal &= file_digest((d1 / name).string()) == file_digest((d2 / name).string());
  // run logs carry a wall-clock column; everything else must be byte-equal
  bool runlogs_equal = strip_last_column((d1 / "runlog.csv").string()) ==
                       strip_last_column((d2 / "runlog.csv").string());

  // JSONL round trip
  std::string j1 = (d1 / "rt.jsonl").string(), j2 = (d1 / "rt2.jsonl").string();
  write_jsonl(d, j1);
  write_jsonl(read_jsonl(j1), j2);
  bool jsonl_rt = file_digest(j1) == file_digest(j2);

  // checkpoint round trip
  std::string c1 = (d1 / "rt.ckpt").string(), c2 = (d1 / "rt2.ckpt").string();
  base.save(c1);
  Model::load(c1).save(c2);
  bool ckpt_rt = file_digest(c1) == file_digest(c2) &&
                 params_digest(Model::load(c1)) == params_digest(base);

  fs::remove_all(d1);
  fs::remove_all(d2);
  std::ostringstream det;
  det << "artifacts " << (artifacts_equal ? "equal" : "DIFFER") << ", runlogs(-wall) "
      << (runlogs_equal ? "equal" : "DIFFER") << ", jsonl rt " << (jsonl_rt ? "ok" : "BAD")
      << ", ckpt rt " << (ckpt_rt ? "ok" : "BAD");
  return report(9, artifacts_equal && runlogs_equal && jsonl_rt && ckpt_rt,
                "determinism and lossless persistence", det.str());
}

}  // namespace

int main() {
  int failed = 0;
  failed += !criterion1();
  failed += !criterion2();
  failed += !criterion3();
  failed += !criterion4();
  failed += !criterion5();
  failed += !criterion6();
  failed += !criterion7();
  failed += !criterion8();
  failed += !criterion9();
  std::printf("%d/9 criteria passed\n", 9 - failed);
  return failed;
}

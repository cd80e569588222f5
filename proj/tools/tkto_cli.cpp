// Command-line surface for the preference-optimization lab: dataset
// generation, training (sft/dpo/kto/tkto), evaluation, contrastive-reward
// analysis, and the clamp sensitivity sweep. All outputs are CSV/JSONL for
// downstream plotting.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tkto/eval.hpp"
#include "tkto/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct ResolvedConfig {
  tkto::TaskConfig task;
  tkto::ModelConfig model;
  tkto::TrainConfig train;
  tkto::WeightConfig weight;
  tkto::TKTOConfig tkto_cfg;
};

ordered_json to_json(const ResolvedConfig& c) {
  ordered_json j;
  ordered_json task_j, model_j;
  to_json(task_j, c.task);
  to_json(model_j, c.model);
  j["task"] = task_j;
  j["model"] = model_j;
  j["train"] = {{"epochs", c.train.epochs},
                {"learning_rate", c.train.learning_rate},
                {"microbatch_size", c.train.microbatch_size},
                {"seed", c.train.seed},
                {"optimizer",
                 c.train.optimizer == tkto::OptimizerKind::adaptive_moment ? "adaptive_moment"
                                                                           : "plain_sgd"},
                {"dpo_beta", c.train.dpo_beta},
                {"warm_start_lr", c.train.warm_start_lr},
                {"warm_start_epochs", c.train.warm_start_epochs}};
  j["weight"] = {{"mu_desirable", c.weight.mu_desirable},
                 {"mu_undesirable", c.weight.mu_undesirable},
                 {"clamp_lo", c.weight.clamp_lo},
                 {"clamp_hi", c.weight.clamp_hi}};
  j["tkto"] = {{"beta", c.tkto_cfg.beta},
               {"lambda_d", c.tkto_cfg.lambda_d},
               {"lambda_u", c.tkto_cfg.lambda_u},
               {"baseline_mode",
                c.tkto_cfg.baseline_mode == tkto::BaselineMode::per_position_exact
                    ? "per_position_exact"
                    : "microbatch_mean"},
               {"normalize_by_length", c.tkto_cfg.normalize_by_length}};
  return j;
}

// Config-file values override built-in defaults; CLI flags override both.
void merge_config_file(ResolvedConfig& c, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw tkto::config_error("config file not found: " + path);
  ordered_json j;
  try {
    j = ordered_json::parse(f);
  } catch (const std::exception& e) {
    throw tkto::config_error("config file " + path + ": " + e.what());
  }
  auto get = [](const ordered_json& o, const char* k, auto& target) {
    if (o.contains(k)) o.at(k).get_to(target);
  };
  if (j.contains("task")) {
    const auto& t = j["task"];
    get(t, "vocab_size", c.task.vocab_size);
    get(t, "num_cues", c.task.num_cues);
    get(t, "cue_tokens", c.task.cue_tokens);
    get(t, "polyseme_token", c.task.polyseme_token);
    get(t, "realization_tokens", c.task.realization_tokens);
    get(t, "prompt_len", c.task.prompt_len);
    get(t, "target_len", c.task.target_len);
    get(t, "filler_lo", c.task.filler_lo);
    get(t, "filler_hi", c.task.filler_hi);
    get(t, "seed", c.task.seed);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    get(m, "vocab_size", c.model.vocab_size);
    get(m, "embed_dim", c.model.embed_dim);
    get(m, "context_len", c.model.context_len);
    get(m, "num_heads", c.model.num_heads);
    get(m, "seed", c.model.seed);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    get(t, "epochs", c.train.epochs);
    get(t, "learning_rate", c.train.learning_rate);
    get(t, "microbatch_size", c.train.microbatch_size);
    get(t, "seed", c.train.seed);
    get(t, "dpo_beta", c.train.dpo_beta);
    get(t, "warm_start_lr", c.train.warm_start_lr);
    get(t, "warm_start_epochs", c.train.warm_start_epochs);
    if (t.contains("optimizer")) {
      std::string o = t["optimizer"];
      if (o == "adaptive_moment")
        c.train.optimizer = tkto::OptimizerKind::adaptive_moment;
      else if (o == "plain_sgd")
        c.train.optimizer = tkto::OptimizerKind::plain_sgd;
      else
        throw tkto::config_error("unknown optimizer \"" + o + "\"");
    }
  }
  if (j.contains("weight")) {
    const auto& w = j["weight"];
    get(w, "mu_desirable", c.weight.mu_desirable);
    get(w, "mu_undesirable", c.weight.mu_undesirable);
    get(w, "clamp_lo", c.weight.clamp_lo);
    get(w, "clamp_hi", c.weight.clamp_hi);
  }
  if (j.contains("tkto")) {
    const auto& t = j["tkto"];
    get(t, "beta", c.tkto_cfg.beta);
    get(t, "lambda_d", c.tkto_cfg.lambda_d);
    get(t, "lambda_u", c.tkto_cfg.lambda_u);
    get(t, "normalize_by_length", c.tkto_cfg.normalize_by_length);
    if (t.contains("baseline_mode")) {
      std::string m = t["baseline_mode"];
      if (m == "per_position_exact")
        c.tkto_cfg.baseline_mode = tkto::BaselineMode::per_position_exact;
      else if (m == "microbatch_mean")
        c.tkto_cfg.baseline_mode = tkto::BaselineMode::microbatch_mean;
      else
        throw tkto::config_error("unknown baseline_mode \"" + m + "\"");
    }
  }
}

std::string default_out_dir() {
  const char* env = std::getenv("TKTO_OUT_DIR");
  return env ? env : ".";
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path))
    throw tkto::config_error(std::string(what) + " not found: " + path);
}

void write_manifest(const std::string& path, ordered_json manifest) {
  std::ofstream f(path);
  if (!f) throw tkto::config_error("cannot write manifest " + path);
  f << manifest.dump(2) << "\n";
}

void echo_config(const ordered_json& resolved) {
  std::cout << "resolved config: " << resolved.dump() << "\n";
}

std::vector<std::pair<double, double>> parse_ranges(const std::string& spec) {
  std::vector<std::pair<double, double>> out;
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    auto comma = part.find(',');
    if (comma == std::string::npos)
      throw tkto::config_error("bad range \"" + part + "\" (expected L,U)");
    try {
      out.emplace_back(std::stod(part.substr(0, comma)), std::stod(part.substr(comma + 1)));
    } catch (const std::exception&) {
      throw tkto::config_error("bad range \"" + part + "\" (expected L,U)");
    }
  }
  if (out.empty()) throw tkto::config_error("no ranges given");
  return out;
}

tkto::Model warm_start_or_load(const ResolvedConfig& cfg, const tkto::Dataset& data,
                               const std::string& init_ckpt, const tkto::Dataset* probe) {
  if (!init_ckpt.empty()) {
    require_file(init_ckpt, "init checkpoint");
    return tkto::Model::load(init_ckpt, true);
  }
  tkto::ModelConfig mc = cfg.model;
  mc.seed = cfg.train.seed;
  return tkto::warm_start_sft(mc, data, cfg.train, probe);
}

int cmd_gen_data(const ResolvedConfig& cfg, int n_des, int n_und, uint64_t seed,
                 const std::string& out) {
  tkto::Dataset d = tkto::generate(cfg.task, n_des, n_und, seed);
  tkto::write_jsonl(d, out);
  std::map<int, int> cue_counts;
  int des = 0, und = 0;
  for (const auto& s : d.samples) {
    cue_counts[s.meta.cue_id]++;
    (s.label == tkto::Label::desirable ? des : und)++;
  }
  std::cout << "wrote " << d.samples.size() << " samples to " << out << " (desirable=" << des
            << ", undesirable=" << und << ", cues=";
  for (auto it = cue_counts.begin(); it != cue_counts.end(); ++it)
    std::cout << (it == cue_counts.begin() ? "" : "/") << it->second;
  std::cout << ")\n";

  ordered_json manifest;
  manifest["command"] = "gen-data";
  manifest["resolved_config"] = to_json(cfg);
  manifest["n_desirable"] = n_des;
  manifest["n_undesirable"] = n_und;
  manifest["seed"] = seed;
  manifest["outputs"] = {{out, tkto::file_digest(out)}};
  write_manifest(out + ".manifest.json", manifest);
  return 0;
}

int cmd_train(ResolvedConfig cfg, const std::string& objective, const std::string& data_path,
              const std::string& out_dir, bool paired, const std::string& init_ckpt,
              const std::string& probe_path) {
  require_file(data_path, "dataset");
  tkto::Dataset data = tkto::read_jsonl(data_path);
  tkto::Dataset probe_storage;
  const tkto::Dataset* probe = nullptr;
  if (!probe_path.empty()) {
    require_file(probe_path, "probe dataset");
    probe_storage = tkto::read_jsonl(probe_path);
    probe = &probe_storage;
  }
  cfg.train.objective = tkto::objective_from_string(objective);
  fs::create_directories(out_dir);
  auto out = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };

  ordered_json manifest;
  manifest["command"] = "train";
  manifest["objective"] = objective;
  manifest["resolved_config"] = to_json(cfg);
  manifest["data"] = {{"path", data_path}, {"digest", tkto::file_digest(data_path)}};
  if (!probe_path.empty())
    manifest["probe"] = {{"path", probe_path}, {"digest", tkto::file_digest(probe_path)}};
  manifest["paired"] = paired;
  if (!init_ckpt.empty()) manifest["init"] = init_ckpt;
  ordered_json outputs = ordered_json::object();

  if (paired || cfg.train.objective == tkto::Objective::dpo) {
    data = tkto::pair(data);
    if (data.pairing_index.empty())
      throw tkto::config_error("objective requires pairable data but no pairs were found in " +
                               data_path);
    if (cfg.train.objective != tkto::Objective::dpo) {
      // paired condition for kto/tkto: keep only matched samples
      tkto::Dataset matched;
      for (auto& [di, ui] : data.pairing_index) {
        matched.samples.push_back(data.samples[di]);
        matched.samples.push_back(data.samples[ui]);
      }
      data = std::move(matched);
    }
  }

  tkto::RunLog log;
  if (cfg.train.objective == tkto::Objective::sft) {
    for (const auto& s : data.samples)
      if (s.label != tkto::Label::desirable)
        throw tkto::config_error("sft requires a desirable-only dataset: " + data_path);
    tkto::ModelConfig mc = cfg.model;
    mc.seed = cfg.train.seed;
    tkto::Model m = !init_ckpt.empty() ? tkto::Model::load(init_ckpt, true) : tkto::Model(mc);
    log = tkto::train(m, nullptr, data, cfg.train, cfg.tkto_cfg, nullptr, probe);
    m.save(out("final.ckpt"));
  } else if (cfg.train.objective == tkto::Objective::tkto) {
    tkto::Model base = warm_start_or_load(cfg, data, init_ckpt, nullptr);
    auto res = tkto::run_tkto_pipeline(base, data, cfg.weight, cfg.tkto_cfg, cfg.train,
                                       out_dir, probe);
    log = res.runlog;
  } else {
    tkto::Model base = warm_start_or_load(cfg, data, init_ckpt, nullptr);
    base.save(out("base-ref.ckpt"));
    tkto::Model ref = base.snapshot();
    tkto::Model m = base.clone_trainable();
    log = tkto::train(m, &ref, data, cfg.train, cfg.tkto_cfg, nullptr, probe);
    m.save(out("final.ckpt"));
  }
  if (cfg.train.objective != tkto::Objective::tkto) log.write_csv(out("runlog.csv"));

  for (const auto& entry : fs::directory_iterator(out_dir)) {
    auto name = entry.path().filename().string();
    if (name == "manifest.json") continue;
    outputs[name] = tkto::file_digest(entry.path().string());
  }
  manifest["outputs"] = outputs;
  echo_config(manifest["resolved_config"]);
  write_manifest(out("manifest.json"), manifest);
  std::cout << "train " << objective << " done: " << log.rows.size() << " log rows, outputs in "
            << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_path,
             const std::string& out_csv) {
  require_file(model_path, "model checkpoint");
  require_file(data_path, "dataset");
  tkto::Model m = tkto::Model::load(model_path);
  tkto::Dataset data = tkto::read_jsonl(data_path);
  tkto::EvalReport r = tkto::evaluate(m, data);
  std::ofstream f(out_csv);
  if (!f) throw tkto::config_error("cannot write " + out_csv);
  f.precision(17);
  tkto::EvalReport::write_csv_header(f);
  r.write_csv_row(f, tkto::file_digest(model_path));
  std::cout << "accuracy=" << r.accuracy << " error_rate=" << r.error_rate
            << " bad_ratio=" << r.bad_ratio << " n=" << r.n_samples << "\n";
  return 0;
}

int cmd_analyze(const std::string& plus_path, const std::string& minus_path,
                const std::string& weights_path, const std::string& data_path,
                const std::string& out_dir, const std::string& samples_spec) {
  require_file(plus_path, "pi-plus checkpoint");
  require_file(minus_path, "pi-minus checkpoint");
  require_file(weights_path, "weight table");
  require_file(data_path, "dataset");
  tkto::Model plus = tkto::Model::load(plus_path);
  tkto::Model minus = tkto::Model::load(minus_path);
  tkto::Dataset data = tkto::read_jsonl(data_path);
  tkto::TokenWeightTable table = tkto::read_weight_table(weights_path);
  fs::create_directories(out_dir);
  auto out = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };

  tkto::RewardAnalysis a = tkto::analyze_rewards(plus, minus, data);
  tkto::write_reward_analysis(a, out("reward_means.csv"), out("reward_hist.csv"));

  std::vector<int> indices;
  if (samples_spec.empty()) {
    for (int i = 0; i < std::min<int>(8, static_cast<int>(data.samples.size())); ++i)
      indices.push_back(i);
  } else {
    std::stringstream ss(samples_spec);
    std::string part;
    while (std::getline(ss, part, ','))
      if (!part.empty()) indices.push_back(std::stoi(part));
  }
  tkto::write_weight_map(tkto::weight_map(table, data, indices), out("weight_map.csv"));

  ordered_json manifest;
  manifest["command"] = "analyze";
  manifest["inputs"] = {{"pi_plus", tkto::file_digest(plus_path)},
                        {"pi_minus", tkto::file_digest(minus_path)},
                        {"weights", tkto::file_digest(weights_path)},
                        {"data", tkto::file_digest(data_path)}};
  ordered_json outputs = ordered_json::object();
  for (const char* n : {"reward_means.csv", "reward_hist.csv", "weight_map.csv"})
    outputs[n] = tkto::file_digest(out(n));
  manifest["outputs"] = outputs;
  write_manifest(out("manifest.json"), manifest);
  std::cout << "reward means: all=" << a.mean_all
            << " desirable_target=" << a.mean_desirable_target
            << " undesirable_target=" << a.mean_undesirable_target << "\n";
  return 0;
}

int cmd_sweep(ResolvedConfig cfg, const std::string& ranges_spec, const std::string& data_path,
              const std::string& eval_path, const std::string& out_dir,
              const std::string& init_ckpt) {
  require_file(data_path, "dataset");
  require_file(eval_path, "eval dataset");
  auto ranges = parse_ranges(ranges_spec);
  tkto::Dataset data = tkto::read_jsonl(data_path);
  tkto::Dataset eval_set = tkto::read_jsonl(eval_path);
  tkto::Model base = warm_start_or_load(cfg, data, init_ckpt, nullptr);
  auto rows = tkto::clamp_sweep(base, data, ranges, cfg.weight, cfg.tkto_cfg, cfg.train,
                                eval_set);
  fs::create_directories(out_dir);
  std::string csv = (fs::path(out_dir) / "sweep.csv").string();
  tkto::write_sweep_csv(rows, csv);

  ordered_json manifest;
  manifest["command"] = "sweep";
  manifest["resolved_config"] = to_json(cfg);
  manifest["ranges"] = ranges_spec;
  manifest["data"] = {{"path", data_path}, {"digest", tkto::file_digest(data_path)}};
  manifest["eval_data"] = {{"path", eval_path}, {"digest", tkto::file_digest(eval_path)}};
  manifest["outputs"] = {{"sweep.csv", tkto::file_digest(csv)}};
  write_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
  for (const auto& r : rows)
    std::cout << "(" << r.lo << "," << r.hi << ") accuracy=" << r.accuracy
              << " error_rate=" << r.error_rate << " bad_ratio=" << r.bad_ratio << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-level preference optimization lab"};
  app.require_subcommand(1);

  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset as JSONL");
  int n_des = 0, n_und = 0;
  std::string gen_out = default_out_dir() + "/dataset.jsonl";
  gen->add_option("--config", config_path, "JSON config file");
  gen->add_option("--n-desirable", n_des, "desirable sample count")->required();
  gen->add_option("--n-undesirable", n_und, "undesirable sample count")->required();
  auto* gen_seed = gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--out", gen_out, "output JSONL path");

  // train
  auto* tr = app.add_subcommand("train", "train an objective and emit checkpoints + logs");
  std::string objective, data_path, probe_path, init_ckpt;
  std::string train_out = default_out_dir() + "/run";
  bool paired = false;
  int epochs = -1, microbatch = -1;
  double lr = -1.0;
  std::string optimizer;
  tr->add_option("--objective", objective, "sft|dpo|kto|tkto")->required();
  tr->add_option("--data", data_path, "training dataset JSONL")->required();
  tr->add_option("--out", train_out, "output directory");
  auto* tr_seed = tr->add_option("--seed", seed, "training seed");
  tr->add_flag("--paired", paired, "restrict to paired samples (selects the paired condition)");
  tr->add_option("--config", config_path, "JSON config file");
  tr->add_option("--init", init_ckpt, "initial checkpoint (skips the SFT warm start)");
  tr->add_option("--probe", probe_path, "held-out probe dataset for run-log likelihoods");
  tr->add_option("--epochs", epochs, "epoch count override");
  tr->add_option("--lr", lr, "learning-rate override");
  tr->add_option("--microbatch", microbatch, "microbatch-size override");
  tr->add_option("--optimizer", optimizer, "adaptive_moment|plain_sgd");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint against a dataset");
  std::string model_path, eval_out = default_out_dir() + "/eval.csv";
  ev->add_option("--model", model_path, "model checkpoint")->required();
  ev->add_option("--data", data_path, "eval dataset JSONL")->required();
  ev->add_option("--out", eval_out, "output CSV path");

  // analyze
  auto* an = app.add_subcommand("analyze", "contrastive reward analysis and weight maps");
  std::string plus_path, minus_path, weights_path, samples_spec;
  std::string an_out = default_out_dir() + "/analysis";
  an->add_option("--pi-plus", plus_path, "pi+ checkpoint")->required();
  an->add_option("--pi-minus", minus_path, "pi- checkpoint")->required();
  an->add_option("--weights", weights_path, "token weight table JSONL")->required();
  an->add_option("--data", data_path, "dataset JSONL")->required();
  an->add_option("--out", an_out, "output directory");
  an->add_option("--samples", samples_spec, "comma-separated sample indices for the weight map");

  // sweep
  auto* sw = app.add_subcommand("sweep", "clamp-range sensitivity sweep");
  std::string ranges_spec = "-1,1;-2,2;-3,3", eval_data_path;
  std::string sw_out = default_out_dir() + "/sweep";
  sw->add_option("--ranges", ranges_spec, "semicolon-separated L,U ranges");
  sw->add_option("--data", data_path, "training dataset JSONL")->required();
  sw->add_option("--eval-data", eval_data_path, "eval dataset JSONL")->required();
  sw->add_option("--out", sw_out, "output directory");
  auto* sw_seed = sw->add_option("--seed", seed, "pipeline seed");
  sw->add_option("--config", config_path, "JSON config file");
  sw->add_option("--init", init_ckpt, "base checkpoint (skips the SFT warm start)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    ResolvedConfig cfg;
    if (!config_path.empty()) merge_config_file(cfg, config_path);
    seed_set = gen_seed->count() > 0 || tr_seed->count() > 0 || sw_seed->count() > 0;
    if (seed_set) cfg.train.seed = seed;
    if (epochs >= 0) cfg.train.epochs = epochs;
    if (lr > 0) cfg.train.learning_rate = lr;
    if (microbatch > 0) cfg.train.microbatch_size = microbatch;
    if (!optimizer.empty()) {
      if (optimizer == "adaptive_moment")
        cfg.train.optimizer = tkto::OptimizerKind::adaptive_moment;
      else if (optimizer == "plain_sgd")
        cfg.train.optimizer = tkto::OptimizerKind::plain_sgd;
      else
        throw tkto::config_error("unknown optimizer \"" + optimizer + "\"");
    }
    cfg.task.validate();
    cfg.model.validate();
    cfg.train.validate();
    cfg.weight.validate();
    cfg.tkto_cfg.validate();
    if (app.got_subcommand(gen)) {
      echo_config(to_json(cfg));
      return cmd_gen_data(cfg, n_des, n_und, seed_set ? seed : cfg.task.seed, gen_out);
    }
    if (app.got_subcommand(tr))
      return cmd_train(cfg, objective, data_path, train_out, paired, init_ckpt, probe_path);
    if (app.got_subcommand(ev)) return cmd_eval(model_path, data_path, eval_out);
    if (app.got_subcommand(an))
      return cmd_analyze(plus_path, minus_path, weights_path, data_path, an_out, samples_spec);
    if (app.got_subcommand(sw)) {
      echo_config(to_json(cfg));
      return cmd_sweep(cfg, ranges_spec, data_path, eval_data_path, sw_out, init_ckpt);
    }
    return 2;
  } catch (const tkto::config_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tkto/tensor.hpp"

namespace tkto {

enum class Label { desirable, undesirable };

inline std::string to_string(Label l) {
  return l == Label::desirable ? "desirable" : "undesirable";
}
inline Label label_from_string(const std::string& s) {
  if (s == "desirable") return Label::desirable;
  if (s == "undesirable") return Label::undesirable;
  throw config_error("unknown label \"" + s + "\"");
}

// Synthetic polyseme task: the prompt opens with a cue token and ends with an
// ambiguous token; the target realizes the ambiguity. A sample is desirable
// iff its realization token matches the cue under the realization map.
struct TaskConfig {
  int vocab_size = 32;
  int num_cues = 2;
  std::vector<int> cue_tokens = {1, 2};
  int polyseme_token = 3;
  std::vector<int> realization_tokens = {4, 5};  // indexed by cue
  int prompt_len = 8;
  int target_len = 8;
  int filler_lo = 6;  // inclusive
  int filler_hi = 31;  // inclusive
  uint64_t seed = 0;

  void validate() const {
    if (num_cues < 2) throw config_error("task config: need at least 2 cues");
    if (static_cast<int>(cue_tokens.size()) != num_cues ||
        static_cast<int>(realization_tokens.size()) != num_cues)
      throw config_error("task config: cue/realization token lists must match num_cues");
    if (prompt_len < 3 || target_len < 2)
      throw config_error("task config: prompt_len >= 3 and target_len >= 2 required");
    if (filler_lo > filler_hi || filler_hi >= vocab_size)
      throw config_error("task config: vocabulary too small for filler range");
    std::vector<int> special = cue_tokens;
    special.push_back(polyseme_token);
    special.insert(special.end(), realization_tokens.begin(), realization_tokens.end());
    special.push_back(0);  // EOS
    std::sort(special.begin(), special.end());
    if (std::adjacent_find(special.begin(), special.end()) != special.end())
      throw config_error("task config: cue/polyseme/realization/EOS tokens must be disjoint");
    for (int t : special)
      if (t >= filler_lo && t <= filler_hi)
        throw config_error("task config: filler range overlaps special tokens");
    for (int t : special)
      if (t < 0 || t >= vocab_size)
        throw config_error("task config: vocabulary too small for special tokens");
    // realization map injective
    std::vector<int> r = realization_tokens;
    std::sort(r.begin(), r.end());
    if (std::adjacent_find(r.begin(), r.end()) != r.end())
      throw config_error("task config: realization map must be injective");
  }
};

inline void to_json(nlohmann::ordered_json& j, const TaskConfig& c) {
  j = {{"vocab_size", c.vocab_size},       {"num_cues", c.num_cues},
       {"cue_tokens", c.cue_tokens},       {"polyseme_token", c.polyseme_token},
       {"realization_tokens", c.realization_tokens},
       {"prompt_len", c.prompt_len},       {"target_len", c.target_len},
       {"filler_lo", c.filler_lo},         {"filler_hi", c.filler_hi},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::ordered_json& j, TaskConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("num_cues").get_to(c.num_cues);
  j.at("cue_tokens").get_to(c.cue_tokens);
  j.at("polyseme_token").get_to(c.polyseme_token);
  j.at("realization_tokens").get_to(c.realization_tokens);
  j.at("prompt_len").get_to(c.prompt_len);
  j.at("target_len").get_to(c.target_len);
  j.at("filler_lo").get_to(c.filler_lo);
  j.at("filler_hi").get_to(c.filler_hi);
  j.at("seed").get_to(c.seed);
}

// Analysis-only annotations; the training path must never read these
// (evaluation is the single permitted consumer).
struct SampleMeta {
  int cue_id = 0;                // index into the cue list
  int realization_position = 0;  // position of the realization token in target
  bool operator==(const SampleMeta&) const = default;
};

struct Sample {
  std::vector<int> prompt;
  std::vector<int> target;
  Label label = Label::desirable;
  SampleMeta meta;
  bool operator==(const Sample&) const = default;
};

struct Dataset {
  std::vector<Sample> samples;
  // (desirable_idx, undesirable_idx) pairs sharing an identical prompt
  std::vector<std::pair<int, int>> pairing_index;

  size_t size() const { return samples.size(); }
};

// Deterministic generator. Prompt: [cue, filler..., polyseme]; target:
// [realization, same fillers..., EOS], so the target is predictable from the
// prompt except for the cue-dependent realization token. Undesirable samples
// reuse the matching desirable prompt (when available) and differ only at the
// realization token.
inline Dataset generate(const TaskConfig& cfg, int n_desirable, int n_undesirable,
                        uint64_t seed) {
  cfg.validate();
  if (n_desirable < 0 || n_undesirable < 0) throw config_error("generate: negative counts");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> filler(cfg.filler_lo, cfg.filler_hi);

  int n_prompts = std::max(n_desirable, n_undesirable);
  std::vector<std::vector<int>> prompts(n_prompts);
  std::vector<int> cue_ids(n_prompts);
  for (int i = 0; i < n_prompts; ++i) {
    int cue = i % cfg.num_cues;  // balanced to within 1
    cue_ids[i] = cue;
    std::vector<int> p;
    p.push_back(cfg.cue_tokens[cue]);
    for (int j = 0; j < cfg.prompt_len - 2; ++j) p.push_back(filler(rng));
    p.push_back(cfg.polyseme_token);
    prompts[i] = std::move(p);
  }

  auto make_target = [&](const std::vector<int>& prompt, int realization) {
    std::vector<int> t;
    t.push_back(realization);
    for (int j = 0; j < cfg.target_len - 2; ++j)
      t.push_back(prompt[1 + j % (cfg.prompt_len - 2)]);
    t.push_back(0);  // EOS
    return t;
  };

  Dataset d;
  for (int i = 0; i < n_desirable; ++i) {
    Sample s;
    s.prompt = prompts[i];
    s.target = make_target(prompts[i], cfg.realization_tokens[cue_ids[i]]);
    s.label = Label::desirable;
    s.meta = {cue_ids[i], 0};
    d.samples.push_back(std::move(s));
  }
  for (int i = 0; i < n_undesirable; ++i) {
    int wrong_cue = (cue_ids[i] + 1) % cfg.num_cues;
    Sample s;
    s.prompt = prompts[i];
    s.target = make_target(prompts[i], cfg.realization_tokens[wrong_cue]);
    s.label = Label::undesirable;
    s.meta = {cue_ids[i], 0};
    d.samples.push_back(std::move(s));
  }
  return d;
}

// Greedy matcher: per distinct prompt, pairs desirable with undesirable
// samples in index order; one-sided leftovers stay out of the index.
inline Dataset pair(Dataset d) {
  std::map<std::vector<int>, std::pair<std::vector<int>, std::vector<int>>> by_prompt;
  for (size_t i = 0; i < d.samples.size(); ++i) {
    auto& [des, und] = by_prompt[d.samples[i].prompt];
    (d.samples[i].label == Label::desirable ? des : und).push_back(static_cast<int>(i));
  }
  d.pairing_index.clear();
  for (auto& [prompt, groups] : by_prompt) {
    auto& [des, und] = groups;
    size_t n = std::min(des.size(), und.size());
    for (size_t k = 0; k < n; ++k) d.pairing_index.emplace_back(des[k], und[k]);
  }
  std::sort(d.pairing_index.begin(), d.pairing_index.end());
  return d;
}

inline Dataset flip_labels(Dataset d) {
  for (Sample& s : d.samples)
    s.label = s.label == Label::desirable ? Label::undesirable : Label::desirable;
  return d;
}

inline void write_jsonl(const Dataset& d, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw config_error("write_jsonl: cannot write " + path);
  for (const Sample& s : d.samples) {
    nlohmann::ordered_json j = {
        {"prompt", s.prompt},
        {"target", s.target},
        {"label", to_string(s.label)},
        {"meta",
         {{"cue_id", s.meta.cue_id}, {"realization_position", s.meta.realization_position}}}};
    f << j.dump() << "\n";
  }
}

inline Dataset read_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw config_error("read_jsonl: cannot open " + path);
  Dataset d;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw config_error("read_jsonl: " + path + ":" + std::to_string(lineno) +
                         ": malformed JSON: " + e.what());
    }
    try {
      for (const auto& [key, val] : j.items())
        if (key != "prompt" && key != "target" && key != "label" && key != "meta")
          throw std::runtime_error("unknown field \"" + key + "\"");
      Sample s;
      j.at("prompt").get_to(s.prompt);
      j.at("target").get_to(s.target);
      s.label = label_from_string(j.at("label").get<std::string>());
      const auto& m = j.at("meta");
      for (const auto& [key, val] : m.items())
        if (key != "cue_id" && key != "realization_position")
          throw std::runtime_error("unknown meta field \"" + key + "\"");
      m.at("cue_id").get_to(s.meta.cue_id);
      m.at("realization_position").get_to(s.meta.realization_position);
      d.samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw config_error("read_jsonl: " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return d;
}

// Recomputes the label implied by (cue, realization token); generated data
// must always agree with the stored label.
inline Label implied_label(const TaskConfig& cfg, const Sample& s) {
  int realization = s.target[s.meta.realization_position];
  return realization == cfg.realization_tokens[s.meta.cue_id] ? Label::desirable
                                                              : Label::undesirable;
}

}  // namespace tkto

#pragma once

// Training loop: episodes (context examples plus one target) are packed,
// run forward/backward one sequence at a time, averaged over the batch,
// clipped, and applied with Adam under the cosine schedule.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "error.hpp"
#include "layout.hpp"
#include "mask.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "task_example.hpp"
#include "task_suite.hpp"

namespace xprompt {

// How in-context examples enter the sequence.
//   xprompt: k examples, S XP tokens, X-Prompt mask
//   causal: k examples, no XP block, plain causal mask
//   causal_xp: k examples, S XP tokens, plain causal mask
//   none: no examples, no XP block
enum class ContextMode : std::uint8_t { XPrompt, Causal, CausalXp, None };

inline std::string_view context_mode_name(ContextMode m) {
  switch (m) {
    case ContextMode::XPrompt: return "xprompt";
    case ContextMode::Causal: return "causal";
    case ContextMode::CausalXp: return "causal_xp";
    case ContextMode::None: return "none";
  }
  return "?";
}

inline ContextMode context_mode_from_name(std::string_view s) {
  for (auto m : {ContextMode::XPrompt, ContextMode::Causal, ContextMode::CausalXp, ContextMode::None})
    if (context_mode_name(m) == s) return m;
  throw ConfigError("unknown context mode: " + std::string(s));
}

inline bool uses_context(ContextMode m) { return m != ContextMode::None; }

inline int xp_count_for(ContextMode m, int num_xp) {
  return (m == ContextMode::XPrompt || m == ContextMode::CausalXp) ? num_xp : 0;
}

inline MaskOptions mask_for(ContextMode m) {
  MaskOptions o;
  o.isolate_examples = (m == ContextMode::XPrompt);
  return o;
}

inline PackOptions pack_options_for(ContextMode m) {
  PackOptions o;
  o.compression = (m == ContextMode::XPrompt);
  return o;
}

struct Episode {
  std::vector<TaskExample> context;
  TaskExample target;
};

// Packs an episode for training: the target's output image (and diff text if
// requested) become the TD segment.
inline PackedSequence pack_episode(const Episode& ep, ContextMode mode, int num_xp, const VocabSpec& vocab,
                                   bool with_diff_text) {
  const std::span<const TaskExample> ctx =
      uses_context(mode) ? std::span<const TaskExample>(ep.context) : std::span<const TaskExample>();
  return pack_example(ctx, ep.target, xp_count_for(mode, num_xp), vocab, with_diff_text, pack_options_for(mode));
}

struct TrainConfig {
  double base_lr = 3e-4;
  int warmup_steps = 100;
  int total_steps = 2000;
  int batch_size = 32;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  bool include_diff_text = false;
  bool include_reversed = true;
  double text_loss_weight = 1.0;
  bool query_loss = false;
  int context_k = 1;
  ContextMode mode = ContextMode::XPrompt;
  int checkpoint_every = 0;  // 0: only the final checkpoint

  void validate() const {
    if (!(base_lr > 0) || total_steps <= 0 || batch_size <= 0 || warmup_steps < 0 || warmup_steps > total_steps)
      throw ConfigError("train config needs base_lr > 0, total_steps > 0, batch_size > 0, 0 <= warmup <= total");
    if (grad_clip < 0 || weight_decay < 0 || text_loss_weight < 0)
      throw ConfigError("grad_clip, weight_decay and text_loss_weight must be non-negative");
    if (context_k < 0) throw ConfigError("context_k must be non-negative");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  }

  ScheduleConfig schedule() const { return {base_lr, warmup_steps, total_steps}; }
  AdamConfig adam() const { return {beta1, beta2, 1e-8, weight_decay}; }
  LossOptions loss_options() const { return {text_loss_weight, query_loss}; }
};

// Flat "key = value" text; '#' starts a comment. Unknown keys are an error
// so typos do not pass silently.
using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  return parse_key_values(in);
}

namespace detail {

class KvReader {
 public:
  explicit KvReader(const KeyValues& kv) : kv_(kv) {}

  template <typename V>
  void get(const std::string& key, V& out) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return;
    used_.insert(key);
    const std::string& s = it->second;
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (s == "true" || s == "1" || s == "yes") {
          out = true;
        } else if (s == "false" || s == "0" || s == "no") {
          out = false;
        } else {
          throw ConfigError(s);
        }
      } else if constexpr (std::is_same_v<V, std::string>) {
        out = s;
      } else if constexpr (std::is_floating_point_v<V>) {
        std::size_t n = 0;
        out = static_cast<V>(std::stod(s, &n));
        if (n != s.size()) throw ConfigError(s);
      } else if constexpr (std::is_unsigned_v<V>) {
        std::size_t n = 0;
        out = static_cast<V>(std::stoull(s, &n));
        if (n != s.size()) throw ConfigError(s);
      } else {
        std::size_t n = 0;
        out = static_cast<V>(std::stoll(s, &n));
        if (n != s.size()) throw ConfigError(s);
      }
    } catch (const std::exception&) {
      throw ConfigError("bad value for " + key + ": '" + s + "'");
    }
  }

  bool has(const std::string& key) const { return kv_.contains(key); }
  void mark(const std::string& key) { used_.insert(key); }

  void reject_unknown() const {
    for (const auto& [k, v] : kv_)
      if (!used_.contains(k)) throw ConfigError("unknown config key: " + k);
  }

 private:
  const KeyValues& kv_;
  std::set<std::string> used_;
};

}  // namespace detail

inline void read_train_config(detail::KvReader& r, TrainConfig& c) {
  r.get("base_lr", c.base_lr);
  r.get("warmup_steps", c.warmup_steps);
  r.get("total_steps", c.total_steps);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("grad_clip", c.grad_clip);
  r.get("weight_decay", c.weight_decay);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("include_diff_text", c.include_diff_text);
  r.get("include_reversed", c.include_reversed);
  r.get("text_loss_weight", c.text_loss_weight);
  r.get("query_loss", c.query_loss);
  r.get("context_k", c.context_k);
  r.get("checkpoint_every", c.checkpoint_every);
  std::string mode;
  r.get("mode", mode);
  if (!mode.empty()) c.mode = context_mode_from_name(mode);
}

inline void read_model_config(detail::KvReader& r, ModelConfig& m) {
  r.get("d_model", m.d_model);
  r.get("n_heads", m.n_heads);
  r.get("n_layers", m.n_layers);
  r.get("max_len", m.max_len);
  r.get("num_xp", m.num_xp);
  r.get("mlp_ratio", m.mlp_ratio);
  r.get("model_seed", m.seed);
  r.get("image_span", m.image_span);
}

inline std::string format_train_config(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "base_lr = " << c.base_lr << "\nwarmup_steps = " << c.warmup_steps << "\ntotal_steps = " << c.total_steps
    << "\nbatch_size = " << c.batch_size << "\nseed = " << c.seed << "\ngrad_clip = " << c.grad_clip
    << "\nweight_decay = " << c.weight_decay << "\nbeta1 = " << c.beta1 << "\nbeta2 = " << c.beta2
    << "\ninclude_diff_text = " << (c.include_diff_text ? "true" : "false")
    << "\ninclude_reversed = " << (c.include_reversed ? "true" : "false")
    << "\ntext_loss_weight = " << c.text_loss_weight << "\nquery_loss = " << (c.query_loss ? "true" : "false")
    << "\ncontext_k = " << c.context_k << "\nmode = " << context_mode_name(c.mode)
    << "\ncheckpoint_every = " << c.checkpoint_every << "\n";
  return o.str();
}

// Supplies training episodes; must be a deterministic function of the Rng.
using EpisodeSource = std::function<Episode(Rng&)>;

// Draws targets uniformly from a fixed dataset and pairs each with context
// examples of the same task kind (never the target itself).
class DatasetEpisodes {
 public:
  DatasetEpisodes(std::vector<TaskExample> examples, int k) : examples_(std::move(examples)), k_(k) {
    if (examples_.empty()) throw ConfigError("training dataset is empty");
    for (std::size_t i = 0; i < examples_.size(); ++i) by_kind_[examples_[i].task_kind].push_back(i);
    if (k_ > 0) {
      for (const auto& [kind, idx] : by_kind_)
        if (static_cast<int>(idx.size()) < k_ + 1)
          throw ConfigError("task kind " + std::string(task_name(kind)) + " has too few examples for k=" +
                            std::to_string(k_) + " context pairing");
    }
  }

  const std::vector<TaskExample>& examples() const { return examples_; }

  Episode operator()(Rng& rng) const {
    const std::size_t t = rng.below(examples_.size());
    return episode_for(t, rng);
  }

  Episode episode_for(std::size_t t, Rng& rng) const {
    Episode ep;
    ep.target = examples_[t];
    const auto& pool = by_kind_.at(ep.target.task_kind);
    std::set<std::size_t> used{t};
    while (static_cast<int>(ep.context.size()) < k_) {
      const std::size_t c = pool[rng.below(pool.size())];
      if (!used.insert(c).second) continue;
      ep.context.push_back(examples_[c]);
    }
    return ep;
  }

 private:
  std::vector<TaskExample> examples_;
  int k_;
  std::map<TaskKind, std::vector<std::size_t>> by_kind_;
};

// Applies the train config's data flags and the holdout to a raw dataset;
// drops targets whose packed length cannot fit max_len.
inline std::vector<TaskExample> prepare_training_set(const std::vector<TaskExample>& raw, const TrainConfig& tc,
                                                     const ModelConfig& mc, const std::set<TaskKind>& holdout,
                                                     const VocabSpec& vocab) {
  std::vector<TaskExample> out;
  int longest_instr = 0;
  for (const auto& ex : raw) longest_instr = std::max(longest_instr, static_cast<int>(split_words(ex.instruction).size()));
  for (const auto& ex : filter_holdout(raw, holdout)) {
    if (ex.is_reversed && !tc.include_reversed) continue;
    const int cells = ex.input_image.size();
    const int diff = tc.include_diff_text && ex.diff_text ? static_cast<int>(split_words(*ex.diff_text).size()) : 0;
    const int k = uses_context(tc.mode) ? tc.context_k : 0;
    const int len = packed_length(k, xp_count_for(tc.mode, mc.num_xp), k * longest_instr,
                                  static_cast<int>(split_words(ex.instruction).size()), cells, true, diff);
    if (len > mc.max_len) continue;
    for (const auto& w : split_words(ex.instruction)) vocab.word_id(w);
    out.push_back(ex);
  }
  if (out.empty()) throw ConfigError("no training sequence fits max_len after holdout filtering");
  return out;
}

struct LogRow {
  int step = 0;
  double lr = 0;
  double loss = 0;
  double td_accuracy = 0;
};

struct TrainResult {
  ModelParams<float> params;
  OptimState<float> optim;
  std::vector<LogRow> log;
};

struct TrainHooks {
  std::function<void(const LogRow&)> on_step;
  // Called every checkpoint_every steps and after the last step.
  std::function<void(int step, const ModelParams<float>&)> on_checkpoint;
};

// One optimizer step over a batch of episodes.
inline LogRow train_step(ModelParams<float>& params, OptimState<float>& st, const std::vector<Episode>& batch,
                         const TrainConfig& tc, const VocabSpec& vocab, int step) {
  ModelParams<float> grads = params.zeros_like();
  const MaskOptions mopts = mask_for(tc.mode);
  const LossOptions lopts = tc.loss_options();
  double total = 0;
  int count = 0, correct = 0;
  const float scale = 1.0f / static_cast<float>(batch.size());
  for (const auto& ep : batch) {
    const auto packed = pack_episode(ep, tc.mode, params.config.num_xp, vocab, tc.include_diff_text);
    const auto tr = forward(params, packed.tokens, packed.layout, mopts);
    const auto ls = loss_sum(tr, lopts);
    if (!std::isfinite(static_cast<double>(ls.total))) throw NumericError("non-finite loss at step " + std::to_string(step));
    total += static_cast<double>(ls.total) / ls.weight;
    count += ls.count;
    correct += ls.correct;
    backward_into(tr, params, grads, scale, lopts);
  }
  clip_grad_norm(grads, tc.grad_clip);
  const double lr = cosine_lr(step, tc.schedule());
  adam_step(params, grads, st, lr);
  return {step, lr, total / static_cast<double>(batch.size()),
          count ? static_cast<double>(correct) / count : 0.0};
}

// Step s (1-based) uses cosine_lr(s). Episodes for the whole run come from a
// single Rng seeded by tc.seed, so the run is a pure function of
// (model config, train config, source).
inline TrainResult train_loop(const ModelConfig& mc, const TrainConfig& tc, const EpisodeSource& source,
                              const VocabSpec& vocab, const TrainHooks& hooks = {}) {
  tc.validate();
  mc.validate();
  if (mc.vocab != vocab.size()) throw ConfigError("model vocab size does not match the vocabulary");
  TrainResult res;
  res.params = init_params<float>(mc);
  res.optim = OptimState<float>(res.params, tc.adam());
  Rng rng(mix64(tc.seed ^ 0x7472616e73ULL));
  for (int s = 1; s <= tc.total_steps; ++s) {
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(tc.batch_size));
    for (int b = 0; b < tc.batch_size; ++b) batch.push_back(source(rng));
    const LogRow row = train_step(res.params, res.optim, batch, tc, vocab, s);
    res.log.push_back(row);
    if (hooks.on_step) hooks.on_step(row);
    const bool ckpt = (tc.checkpoint_every > 0 && s % tc.checkpoint_every == 0) || s == tc.total_steps;
    if (ckpt && hooks.on_checkpoint) hooks.on_checkpoint(s, res.params);
  }
  return res;
}

inline std::string loss_csv(const std::vector<LogRow>& rows) {
  std::ostringstream o;
  o.precision(9);
  o << "step,lr,loss,td_accuracy\n";
  for (const auto& r : rows) o << r.step << ',' << r.lr << ',' << r.loss << ',' << r.td_accuracy << '\n';
  return o.str();
}

}  // namespace xprompt

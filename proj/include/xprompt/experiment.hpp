#pragma once

// Novel-task experiment: four models share one episode stream and differ only
// in the held-out kind and in how the in-context example is presented. All
// are scored on the held-out kind.

#include <chrono>
#include <cstdint>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "eval.hpp"
#include "task_suite.hpp"
#include "train.hpp"

namespace xprompt {

inline constexpr int kReportSchemaVersion = 1;

struct ExperimentConfig {
  std::vector<TaskKind> kinds = {TaskKind::Invert,       TaskKind::Shift,       TaskKind::Border,
                                 TaskKind::ThresholdMap, TaskKind::DistanceMap, TaskKind::Recolor};
  TaskKind holdout = TaskKind::Invert;
  ImageShape shape{4, 4, 16};
  InstructionStyle style = InstructionStyle::Generic;
  bool cell_embedding = true;
  ModelConfig model;  // vocab and image_span are filled in by the experiment
  TrainConfig train;
  int holdout_queries = 200;
  int heldin_queries_per_kind = 50;
  std::uint64_t seed = 0;
  // Causal condition with the XP block present but unmasked instead of absent.
  bool causal_keeps_xp = false;
  double min_gap = 0.10;
  double noninferiority = 0.02;

  void validate() const {
    if (kinds.empty()) throw ConfigError("experiment needs at least one task kind");
    if (std::find(kinds.begin(), kinds.end(), holdout) == kinds.end())
      throw ConfigError("held-out kind must be one of the experiment kinds");
    if (kinds.size() < 2) throw ConfigError("experiment needs a kind to train on besides the held-out one");
    if (holdout_queries <= 0 || heldin_queries_per_kind < 0) throw ConfigError("query counts must be positive");
    train.validate();
  }
};

inline std::string kind_list(const std::vector<TaskKind>& kinds) {
  std::string s;
  for (auto k : kinds) {
    if (!s.empty()) s += ',';
    s += task_name(k);
  }
  return s;
}

inline std::vector<TaskKind> parse_kind_list(std::string_view s) {
  std::vector<TaskKind> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = std::min(s.find(',', start), s.size());
    const auto item = s.substr(start, end - start);
    if (!item.empty()) out.push_back(task_from_name(item));
    start = end + 1;
  }
  return out;
}

// Reads an experiment from flat key-value text. Model and train keys share
// the file with the experiment keys.
inline ExperimentConfig experiment_config_from(const KeyValues& kv) {
  ExperimentConfig c;
  detail::KvReader r(kv);
  read_model_config(r, c.model);
  read_train_config(r, c.train);
  std::string kinds, holdout, style;
  r.get("kinds", kinds);
  r.get("holdout", holdout);
  r.get("style", style);
  r.get("width", c.shape.width);
  r.get("height", c.shape.height);
  r.get("palette", c.shape.palette);
  r.get("cell_embedding", c.cell_embedding);
  r.get("holdout_queries", c.holdout_queries);
  r.get("heldin_queries_per_kind", c.heldin_queries_per_kind);
  r.get("experiment_seed", c.seed);
  r.get("causal_keeps_xp", c.causal_keeps_xp);
  r.get("min_gap", c.min_gap);
  r.get("noninferiority", c.noninferiority);
  r.reject_unknown();
  if (!kinds.empty()) c.kinds = parse_kind_list(kinds);
  if (!holdout.empty()) c.holdout = task_from_name(holdout);
  if (style == "generic") {
    c.style = InstructionStyle::Generic;
  } else if (style == "explicit") {
    c.style = InstructionStyle::Explicit;
  } else if (!style.empty()) {
    throw ConfigError("style must be generic or explicit");
  }
  c.validate();
  return c;
}

// One episode: a kind, one parameter draw, and k+1 images transformed with
// it. The first example is the target, the rest are context.
inline Episode draw_episode(const std::vector<TaskKind>& kinds, const ImageShape& shape, InstructionStyle style,
                            int k, Rng& rng) {
  const TaskKind kind = kinds[rng.below(kinds.size())];
  const TaskParams p = draw_params(kind, rng, shape);
  Episode ep;
  ep.target = generate_with_params(kind, p, rng.next(), shape, style);
  for (int i = 0; i < k; ++i) ep.context.push_back(generate_with_params(kind, p, rng.next(), shape, style));
  return ep;
}

inline EpisodeSource episode_source(std::vector<TaskKind> kinds, ImageShape shape, InstructionStyle style, int k) {
  return [kinds = std::move(kinds), shape, style, k](Rng& rng) { return draw_episode(kinds, shape, style, k, rng); };
}

// Fixed evaluation episodes for one kind. Seeds come from a stream salted
// apart from training, so queries and their context never repeat a
// training draw.
inline std::vector<Episode> evaluation_episodes(TaskKind kind, int n, const ImageShape& shape, InstructionStyle style,
                                                int k, std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x65766131ULL) + static_cast<std::uint64_t>(kind));
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(n));
  const std::vector<TaskKind> one{kind};
  for (int i = 0; i < n; ++i) out.push_back(draw_episode(one, shape, style, k, rng));
  return out;
}

struct ConditionResult {
  std::string name;
  ContextMode train_mode = ContextMode::XPrompt;
  std::vector<TaskKind> trained_kinds;
  double final_loss = 0;
  EvalMetrics holdout;
  EvalMetrics heldin;
  double train_seconds = 0;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<ConditionResult> conditions;
  double wall_clock_seconds = 0;

  const ConditionResult& at(std::string_view name) const {
    for (const auto& c : conditions)
      if (c.name == name) return c;
    throw ConfigError("report has no condition " + std::string(name));
  }
};

struct ExperimentChecks {
  bool ordering = false;        // full > xprompt > none
  double gap = 0;               // xprompt - none
  bool gap_ok = false;
  double vs_causal = 0;         // xprompt - causal
  bool noninferior = false;
  bool all() const { return ordering && gap_ok && noninferior; }
};

inline ExperimentChecks check_report(const ExperimentReport& r) {
  const double full = r.at("full_training").holdout.pixel_accuracy;
  const double none = r.at("no_in_context").holdout.pixel_accuracy;
  const double causal = r.at("in_context_causal_mask").holdout.pixel_accuracy;
  const double xp = r.at("in_context_xprompt_mask").holdout.pixel_accuracy;
  ExperimentChecks c;
  c.ordering = full > xp && xp > none;
  c.gap = xp - none;
  c.gap_ok = c.gap >= r.config.min_gap;
  c.vs_causal = xp - causal;
  c.noninferior = xp >= causal - r.config.noninferiority;
  return c;
}

inline nlohmann::json train_config_json(const TrainConfig& t) {
  return {{"base_lr", t.base_lr},
          {"warmup_steps", t.warmup_steps},
          {"total_steps", t.total_steps},
          {"batch_size", t.batch_size},
          {"seed", t.seed},
          {"grad_clip", t.grad_clip},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"include_diff_text", t.include_diff_text},
          {"include_reversed", t.include_reversed},
          {"text_loss_weight", t.text_loss_weight},
          {"query_loss", t.query_loss},
          {"context_k", t.context_k},
          {"mode", std::string(context_mode_name(t.mode))},
          {"checkpoint_every", t.checkpoint_every}};
}

inline nlohmann::json experiment_config_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["kinds"] = kind_list(c.kinds);
  j["holdout"] = std::string(task_name(c.holdout));
  j["width"] = c.shape.width;
  j["height"] = c.shape.height;
  j["palette"] = c.shape.palette;
  j["style"] = c.style == InstructionStyle::Generic ? "generic" : "explicit";
  j["cell_embedding"] = c.cell_embedding;
  j["model"] = config_to_json(c.model);
  j["train"] = train_config_json(c.train);
  j["holdout_queries"] = c.holdout_queries;
  j["heldin_queries_per_kind"] = c.heldin_queries_per_kind;
  j["causal_keeps_xp"] = c.causal_keeps_xp;
  j["min_gap"] = c.min_gap;
  j["noninferiority"] = c.noninferiority;
  return j;
}

// Timing fields live under "timing" so reports of identical runs differ only
// there.
inline nlohmann::json report_to_json(const ExperimentReport& r, bool with_timing = true) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["config"] = experiment_config_json(r.config);
  j["seeds"] = {{"experiment", r.config.seed}, {"train", r.config.train.seed}, {"model", r.config.model.seed}};
  j["conditions"] = nlohmann::json::array();
  for (const auto& c : r.conditions) {
    j["conditions"].push_back({{"name", c.name},
                               {"train_mode", std::string(context_mode_name(c.train_mode))},
                               {"trained_kinds", kind_list(c.trained_kinds)},
                               {"final_loss", c.final_loss},
                               {"holdout", to_json(c.holdout)},
                               {"heldin", to_json(c.heldin)}});
  }
  const auto ch = check_report(r);
  j["checks"] = {{"ordering", ch.ordering},     {"gap", ch.gap},
                 {"gap_ok", ch.gap_ok},         {"xprompt_minus_causal", ch.vs_causal},
                 {"noninferior", ch.noninferior}, {"passed", ch.all()}};
  if (with_timing) {
    nlohmann::json t;
    t["wall_clock_seconds"] = r.wall_clock_seconds;
    for (const auto& c : r.conditions) t["train_seconds"][c.name] = c.train_seconds;
    j["timing"] = t;
  }
  return j;
}

inline std::string report_summary_csv(const ExperimentReport& r) {
  std::ostringstream o;
  o.precision(9);
  o << "condition,train_mode,pixel_accuracy,image_exact_match,td_token_accuracy,heldin_pixel_accuracy,"
       "heldin_image_exact_match,heldin_td_token_accuracy\n";
  for (const auto& c : r.conditions)
    o << c.name << ',' << context_mode_name(c.train_mode) << ',' << c.holdout.pixel_accuracy << ','
      << c.holdout.image_exact_match << ',' << c.holdout.td_token_accuracy << ',' << c.heldin.pixel_accuracy << ','
      << c.heldin.image_exact_match << ',' << c.heldin.td_token_accuracy << '\n';
  return o.str();
}

// Long format for external plotting.
inline std::string report_plot_csv(const ExperimentReport& r) {
  std::ostringstream o;
  o.precision(9);
  o << "condition,metric,value\n";
  for (const auto& c : r.conditions) {
    o << c.name << ",pixel_accuracy," << c.holdout.pixel_accuracy << '\n';
    o << c.name << ",image_exact_match," << c.holdout.image_exact_match << '\n';
    o << c.name << ",td_token_accuracy," << c.holdout.td_token_accuracy << '\n';
  }
  return o.str();
}

struct ExperimentHooks {
  std::function<void(const std::string& condition, const LogRow&)> on_step;
  std::function<void(const ConditionResult&, const ModelParams<float>&)> on_condition;
};

inline VocabSpec experiment_vocab(const ExperimentConfig& c) { return task_vocab(c.shape.palette); }

inline ModelConfig experiment_model_config(const ExperimentConfig& c) {
  ModelConfig m = c.model;
  m.vocab = experiment_vocab(c).size();
  m.image_span = c.cell_embedding ? c.shape.width * c.shape.height + 2 : 0;
  return m;
}

// Trains and scores one condition. Training draws from the same seeded
// stream in every condition; the no-context condition ignores the context.
inline ConditionResult run_condition(const ExperimentConfig& cfg, const std::string& name, ContextMode mode,
                                     bool include_holdout, const ExperimentHooks& hooks = {}) {
  const VocabSpec vocab = experiment_vocab(cfg);
  const ModelConfig mc = experiment_model_config(cfg);
  TrainConfig tc = cfg.train;
  tc.mode = mode;
  tc.context_k = 1;

  ConditionResult res;
  res.name = name;
  res.train_mode = mode;
  for (auto k : cfg.kinds)
    if (include_holdout || k != cfg.holdout) res.trained_kinds.push_back(k);

  const auto t0 = std::chrono::steady_clock::now();
  TrainHooks th;
  if (hooks.on_step) th.on_step = [&](const LogRow& row) { hooks.on_step(name, row); };
  TrainResult tr = train_loop(mc, tc, episode_source(res.trained_kinds, cfg.shape, cfg.style, 1), vocab, th);
  res.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!tr.params.all_finite()) throw NumericError("condition " + name + " produced non-finite parameters");
  double tail = 0;
  const std::size_t n = std::min<std::size_t>(tr.log.size(), 50);
  for (std::size_t i = tr.log.size() - n; i < tr.log.size(); ++i) tail += tr.log[i].loss;
  res.final_loss = n ? tail / static_cast<double>(n) : 0.0;

  EvalOptions eo;
  eo.mode = mode;
  res.holdout = evaluate_episodes(
      tr.params, evaluation_episodes(cfg.holdout, cfg.holdout_queries, cfg.shape, cfg.style, 1, cfg.seed), vocab, eo);
  if (cfg.heldin_queries_per_kind > 0) {
    std::vector<Episode> heldin;
    for (auto k : cfg.kinds) {
      if (k == cfg.holdout) continue;
      auto e = evaluation_episodes(k, cfg.heldin_queries_per_kind, cfg.shape, cfg.style, 1, cfg.seed);
      heldin.insert(heldin.end(), e.begin(), e.end());
    }
    res.heldin = evaluate_episodes(tr.params, heldin, vocab, eo);
  }
  if (hooks.on_condition) hooks.on_condition(res, tr.params);
  return res;
}

inline ExperimentReport novel_task_experiment(const ExperimentConfig& cfg, const ExperimentHooks& hooks = {}) {
  cfg.validate();
  ExperimentReport rep;
  rep.config = cfg;
  rep.config.model = experiment_model_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const ContextMode causal = cfg.causal_keeps_xp ? ContextMode::CausalXp : ContextMode::Causal;
  struct Spec {
    const char* name;
    ContextMode mode;
    bool with_holdout;
  };
  const Spec specs[] = {{"full_training", ContextMode::XPrompt, true},
                        {"no_in_context", ContextMode::None, false},
                        {"in_context_causal_mask", causal, false},
                        {"in_context_xprompt_mask", ContextMode::XPrompt, false}};
  for (const auto& s : specs) {
    try {
      rep.conditions.push_back(run_condition(cfg, s.name, s.mode, s.with_holdout, hooks));
    } catch (const NumericError& e) {
      throw NumericError(std::string("condition ") + s.name + " failed: " + e.what());
    }
  }
  rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace xprompt

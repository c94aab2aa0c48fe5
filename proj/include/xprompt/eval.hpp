#pragma once

// Evaluation: teacher-forced TD accuracy plus greedy generation metrics over
// a list of episodes, with helpers that pair queries with context from a
// disjoint pool or from a retrieval index.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "decode.hpp"
#include "error.hpp"
#include "model.hpp"
#include "raie.hpp"
#include "rng.hpp"
#include "train.hpp"

namespace xprompt {

struct EvalMetrics {
  double td_token_accuracy = 0;
  double image_exact_match = 0;
  double pixel_accuracy = 0;
  double text_exact_match = 0;
  int examples = 0;
  int text_examples = 0;

  friend bool operator==(const EvalMetrics&, const EvalMetrics&) = default;
};

inline nlohmann::json to_json(const EvalMetrics& m) {
  return {{"td_token_accuracy", m.td_token_accuracy}, {"image_exact_match", m.image_exact_match},
          {"pixel_accuracy", m.pixel_accuracy},       {"text_exact_match", m.text_exact_match},
          {"examples", m.examples},                   {"text_examples", m.text_examples}};
}

struct EvalOptions {
  ContextMode mode = ContextMode::XPrompt;
  Sampling sampling{};
  // Score diff_text targets (teacher forcing and generation) when present.
  bool with_text = false;
  // Generate through the compressed two-phase path (X-Prompt mode only).
  bool two_phase = false;
};

// Fraction of cells where two same-shaped images agree.
inline double pixel_agreement(const ToyImage& a, const ToyImage& b) {
  if (!a.same_shape(b)) throw InvalidImage("pixel agreement needs images of equal shape");
  if (a.size() == 0) return 1.0;
  int same = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) same += (a.cells[i] == b.cells[i]);
  return static_cast<double>(same) / a.size();
}

struct Prediction {
  ToyImage image;
  std::optional<std::string> text;
};

// Greedy (or sampled) output for one episode, without teacher forcing.
template <typename T>
Prediction predict(const ModelParams<T>& params, const Episode& ep, const VocabSpec& vocab, const EvalOptions& opts) {
  const std::span<const TaskExample> ctx =
      uses_context(opts.mode) ? std::span<const TaskExample>(ep.context) : std::span<const TaskExample>();
  const auto prompt = pack_sequence(ctx, Query{ep.target.input_image, ep.target.instruction}, std::nullopt,
                                    xp_count_for(opts.mode, params.config.num_xp), vocab,
                                    pack_options_for(opts.mode));
  GenerateOptions g;
  g.sampling = opts.sampling;
  g.with_text = opts.with_text && ep.target.diff_text.has_value();
  const MaskOptions mopts = mask_for(opts.mode);
  const Generation<T> gen = opts.two_phase
                                ? encode_then_generate(params, prompt.tokens, prompt.layout, vocab, mopts, g)
                                : generate(params, prompt.tokens, prompt.layout, vocab, mopts, g);
  const int W = ep.target.input_image.width;
  const int H = ep.target.input_image.height;
  const std::size_t img_len = static_cast<std::size_t>(W * H + 2);
  if (gen.tokens.size() < img_len) throw DecodeError("generation ended before the image was complete");
  Prediction p;
  p.image = decode_image(std::span<const TokenId>(gen.tokens.data(), img_len), vocab, W, H);
  if (g.with_text) {
    std::span<const TokenId> rest(gen.tokens.data() + img_len, gen.tokens.size() - img_len);
    if (!rest.empty() && rest.back() == vocab.eos()) rest = rest.first(rest.size() - 1);
    p.text = decode_text(rest, vocab);
  }
  return p;
}

// Metrics over episodes, in order. Greedy decoding makes the result a pure
// function of (params, episodes, options).
template <typename T>
EvalMetrics evaluate_episodes(const ModelParams<T>& params, const std::vector<Episode>& episodes,
                              const VocabSpec& vocab, const EvalOptions& opts = {}) {
  if (episodes.empty()) throw ConfigError("evaluation set is empty");
  EvalMetrics m;
  long td_total = 0, td_correct = 0;
  double pix = 0;
  int exact = 0, text_exact = 0;
  const MaskOptions mopts = mask_for(opts.mode);
  for (const auto& ep : episodes) {
    if (uses_context(opts.mode) && ep.context.empty())
      throw ConfigError("context mode evaluation needs in-context examples for " + ep.target.id);
    const bool text = opts.with_text && ep.target.diff_text.has_value();
    const auto packed = pack_episode(ep, opts.mode, params.config.num_xp, vocab, text);
    const auto tr = forward(params, packed.tokens, packed.layout, mopts);
    const auto ls = loss_sum(tr);
    td_total += ls.count;
    td_correct += ls.correct;

    const Prediction pred = predict(params, ep, vocab, opts);
    pix += pixel_agreement(pred.image, ep.target.output_image);
    exact += (pred.image == ep.target.output_image);
    if (text) {
      ++m.text_examples;
      text_exact += (pred.text && normalize_text(*pred.text) == normalize_text(*ep.target.diff_text));
    }
  }
  m.examples = static_cast<int>(episodes.size());
  m.td_token_accuracy = td_total ? static_cast<double>(td_correct) / static_cast<double>(td_total) : 0.0;
  m.image_exact_match = static_cast<double>(exact) / m.examples;
  m.pixel_accuracy = pix / m.examples;
  m.text_exact_match = m.text_examples ? static_cast<double>(text_exact) / m.text_examples : 0.0;
  return m;
}

// Pairs each query with k same-kind examples drawn from `pool`. Pool entries
// sharing an id with any query are never used, so no example is its own
// context.
inline std::vector<Episode> pair_with_pool(const std::vector<TaskExample>& queries,
                                           const std::vector<TaskExample>& pool, int k, std::uint64_t seed) {
  if (queries.empty()) throw ConfigError("evaluation set is empty");
  std::vector<Episode> out;
  out.reserve(queries.size());
  if (k == 0) {
    for (const auto& q : queries) out.push_back({{}, q});
    return out;
  }
  std::set<std::string> query_ids;
  for (const auto& q : queries) query_ids.insert(q.id);
  std::map<TaskKind, std::vector<const TaskExample*>> by_kind;
  for (const auto& ex : pool)
    if (!query_ids.contains(ex.id)) by_kind[ex.task_kind].push_back(&ex);
  if (by_kind.empty()) throw ConfigError("context pool is empty");
  Rng rng(mix64(seed ^ 0x6576616cULL));
  for (const auto& q : queries) {
    const auto it = by_kind.find(q.task_kind);
    if (it == by_kind.end() || static_cast<int>(it->second.size()) < k)
      throw ConfigError("context pool has too few examples of kind " + std::string(task_name(q.task_kind)));
    Episode ep;
    ep.target = q;
    std::vector<std::size_t> idx(it->second.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx.begin(), idx.end());
    for (int j = 0; j < k; ++j) ep.context.push_back(*it->second[idx[static_cast<std::size_t>(j)]]);
    out.push_back(std::move(ep));
  }
  return out;
}

// Context chosen by instruction retrieval, excluding the query's own id.
inline std::vector<Episode> pair_with_retrieval(const std::vector<TaskExample>& queries,
                                                const RetrievalIndex& index) {
  if (queries.empty()) throw ConfigError("evaluation set is empty");
  std::vector<Episode> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    const RetrievalHit hit = index.retrieve(q.instruction, q.id);
    const TaskExample* ex = index.example(hit.id);
    if (!ex) throw ConfigError("retrieved id " + hit.id + " has no stored example");
    out.push_back({{*ex}, q});
  }
  return out;
}

}  // namespace xprompt

#pragma once

// Incremental decoding with a key/value cache, grammar-constrained sampling,
// and the two-phase (compress, then generate) inference path.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "layout.hpp"
#include "mask.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace xprompt {

// Row-at-a-time forward pass. Every position is computed with the same
// vector-matrix code regardless of how the prompt was split, so two runs that
// attend to the same cached entries in the same order produce identical bits.
template <typename T>
class Decoder {
 public:
  Decoder(const ModelParams<T>& params, MaskOptions opts) : params_(&params), opts_(opts) {
    layers_.resize(params.layers.size());
  }

  // Starts a sequence whose task side begins at task_begin.
  void reset(int task_begin) {
    layout_ = SequenceLayout{};
    layout_.task_begin = task_begin;
    tokens_.clear();
    for (auto& c : layers_) c = {};
  }

  int position() const { return layout_.size(); }
  const SequenceLayout& layout() const { return layout_; }
  const TokenSeq& tokens() const { return tokens_; }

  // Number of cached key/value entries (identical across layers).
  int cached() const { return layers_.empty() ? 0 : static_cast<int>(layers_[0].pos.size()); }
  std::vector<int> cached_positions() const { return layers_.empty() ? std::vector<int>{} : layers_[0].pos; }

  // Feeds one token and returns the logits predicting the next one.
  RowVec<T> step(TokenId token, Role role) {
    const auto& P = *params_;
    const auto& cfg = P.config;
    const int p = position();
    if (p >= cfg.max_len) throw ConfigError("decoder ran past max_len");
    layout_.append(role);
    tokens_.push_back(token);
    if (role == Role::Xp) {
      xp_run_ = (p > 0 && layout_.role(p - 1) == Role::Xp) ? xp_run_ + 1 : 0;
    }

    const int C = cfg.d_model;
    const int dh = cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    RowVec<T> x = (role == Role::Xp ? RowVec<T>(P.xp_emb.row(xp_run_)) : RowVec<T>(P.tok_emb.row(token))) +
                  P.pos_emb.row(p);
    if (detail::is_image_role(role)) {
      cell_run_ = (p > 0 && layout_.role(p - 1) == role) ? cell_run_ + 1 : 0;
      if (cfg.image_span > 0) x += P.cell_emb.row(cell_run_ % cfg.image_span);
    }

    for (std::size_t l = 0; l < P.layers.size(); ++l) {
      const auto& W = P.layers[l];
      auto& cache = layers_[l];
      RowVec<T> h = norm(x, W.ln1_g, W.ln1_b);
      RowVec<T> q = h * W.wq + W.bq;
      cache.k.push_back(h * W.wk + W.bk);
      cache.v.push_back(h * W.wv + W.bv);
      cache.pos.push_back(p);

      std::vector<int> idx;
      idx.reserve(cache.pos.size());
      for (std::size_t e = 0; e < cache.pos.size(); ++e)
        if (mask_allows(layout_, opts_, p, cache.pos[e])) idx.push_back(static_cast<int>(e));

      RowVec<T> attn(C);
      std::vector<T> s(idx.size());
      for (int hd = 0; hd < cfg.n_heads; ++hd) {
        T m = std::numeric_limits<T>::lowest();
        for (std::size_t a = 0; a < idx.size(); ++a) {
          const auto& kr = cache.k[static_cast<std::size_t>(idx[a])];
          s[a] = q.segment(hd * dh, dh).dot(kr.segment(hd * dh, dh)) * scale;
          m = std::max(m, s[a]);
        }
        T z = 0;
        for (auto& e : s) {
          e = std::exp(e - m);
          z += e;
        }
        RowVec<T> acc = RowVec<T>::Zero(dh);
        for (std::size_t a = 0; a < idx.size(); ++a)
          acc += (s[a] / z) * cache.v[static_cast<std::size_t>(idx[a])].segment(hd * dh, dh);
        attn.segment(hd * dh, dh) = acc;
      }
      x += attn * W.wo + W.bo;
      RowVec<T> h2 = norm(x, W.ln2_g, W.ln2_b);
      RowVec<T> u = (h2 * W.w1 + W.b1).unaryExpr([](T a) { return detail::gelu(a); });
      x += u * W.w2 + W.b2;
    }
    RowVec<T> hf = norm(x, P.lnf_g, P.lnf_b);
    return hf * P.tok_emb.transpose();
  }

  // Drops cached entries that no position at or after task_begin may read.
  // Returns the number of entries kept.
  int evict_examples() {
    for (auto& c : layers_) {
      std::vector<RowVec<T>> k, v;
      std::vector<int> pos;
      for (std::size_t e = 0; e < c.pos.size(); ++e) {
        if (is_ie(layout_.role(c.pos[e]))) continue;
        k.push_back(std::move(c.k[e]));
        v.push_back(std::move(c.v[e]));
        pos.push_back(c.pos[e]);
      }
      c.k = std::move(k);
      c.v = std::move(v);
      c.pos = std::move(pos);
    }
    return cached();
  }

 private:
  struct LayerCache {
    std::vector<RowVec<T>> k, v;
    std::vector<int> pos;
  };

  static RowVec<T> norm(const RowVec<T>& x, const Mat<T>& g, const Mat<T>& b) {
    const T mean = x.mean();
    const T var = (x.array() - mean).square().mean();
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(1e-5));
    RowVec<T> xh = (x.array() - mean) * rstd;
    return xh.cwiseProduct(g.row(0)) + b.row(0);
  }

  const ModelParams<T>* params_;
  MaskOptions opts_;
  SequenceLayout layout_;
  TokenSeq tokens_;
  std::vector<LayerCache> layers_;
  int xp_run_ = 0;
  int cell_run_ = 0;
};

struct Sampling {
  double temperature = 0.0;  // 0 selects greedy decoding
  std::uint64_t seed = 0;
};

struct GenerateOptions {
  Sampling sampling{};
  bool constrained = true;
  // After the image, continue with a text span terminated by EOS.
  bool with_text = false;
  int max_text = 32;
};

// Grammar for a TD segment: BOI, width*height image tokens, EOI, then
// optionally text tokens until EOS.
class TdGrammar {
 public:
  TdGrammar(const VocabSpec& vocab, int cells, bool with_text) : vocab_(&vocab), cells_(cells), with_text_(with_text) {}

  bool done() const { return state_ == State::Done; }

  bool allowed(TokenId t) const {
    switch (state_) {
      case State::Boi: return t == vocab_->boi();
      case State::Cells: return vocab_->is_image(t);
      case State::Eoi: return t == vocab_->eoi();
      case State::Text: return vocab_->is_text(t) || t == vocab_->eos();
      case State::Done: return false;
    }
    return false;
  }

  // Role of the position that will hold the next token.
  Role next_role() const { return state_ == State::Text ? Role::TdText : Role::TdImage; }

  bool forced() const { return state_ == State::Boi || state_ == State::Eoi; }

  void advance(TokenId t) {
    switch (state_) {
      case State::Boi: state_ = cells_ > 0 ? State::Cells : State::Eoi; break;
      case State::Cells:
        if (++emitted_ == cells_) state_ = State::Eoi;
        break;
      case State::Eoi: state_ = with_text_ ? State::Text : State::Done; break;
      case State::Text:
        if (t == vocab_->eos()) state_ = State::Done;
        break;
      case State::Done: break;
    }
  }

 private:
  enum class State { Boi, Cells, Eoi, Text, Done };
  const VocabSpec* vocab_;
  int cells_;
  bool with_text_;
  int emitted_ = 0;
  State state_ = State::Boi;
};

// Picks the next token from logits restricted by `allowed`. Greedy breaks
// ties toward the smallest id.
template <typename T, typename Allowed>
TokenId pick_token(const RowVec<T>& logits, Allowed&& allowed, const Sampling& s, Rng& rng) {
  const int V = static_cast<int>(logits.size());
  if (s.temperature <= 0.0) {
    TokenId best = -1;
    for (int t = 0; t < V; ++t)
      if (allowed(t) && (best < 0 || logits(t) > logits(best))) best = t;
    if (best < 0) throw ConfigError("no token allowed by the decoding grammar");
    return best;
  }
  double m = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < V; ++t)
    if (allowed(t)) m = std::max(m, static_cast<double>(logits(t)) / s.temperature);
  std::vector<double> w(static_cast<std::size_t>(V), 0.0);
  double z = 0;
  for (int t = 0; t < V; ++t) {
    if (!allowed(t)) continue;
    w[static_cast<std::size_t>(t)] = std::exp(static_cast<double>(logits(t)) / s.temperature - m);
    z += w[static_cast<std::size_t>(t)];
  }
  double r = rng.uniform() * z;
  TokenId last = -1;
  for (int t = 0; t < V; ++t) {
    if (w[static_cast<std::size_t>(t)] == 0.0) continue;
    last = t;
    r -= w[static_cast<std::size_t>(t)];
    if (r < 0) return t;
  }
  if (last < 0) throw ConfigError("no token allowed by the decoding grammar");
  return last;
}

template <typename T>
struct Generation {
  TokenSeq tokens;                 // generated TD tokens (BOI ... EOI [text EOS])
  RowVec<T> first_logits;          // logits of the first sampled (non-forced) token
  int retained = -1;               // cache entries kept after compression (two-phase only)
};

namespace detail {

template <typename T>
Generation<T> continue_generation(Decoder<T>& dec, RowVec<T> logits, const VocabSpec& vocab, int cells,
                                  int max_new, const GenerateOptions& opts) {
  Generation<T> out;
  TdGrammar grammar(vocab, cells, opts.with_text);
  Rng rng(opts.sampling.seed);
  int text_budget = opts.max_text;
  bool first_cell = true;
  while (static_cast<int>(out.tokens.size()) < max_new && !grammar.done()) {
    TokenId t;
    if (opts.constrained) {
      if (grammar.forced()) {
        t = grammar.allowed(vocab.boi()) ? vocab.boi() : vocab.eoi();
      } else {
        if (first_cell) {
          out.first_logits = logits;
          first_cell = false;
        }
        auto ok = [&](int c) {
          if (!grammar.allowed(static_cast<TokenId>(c))) return false;
          return !(text_budget <= 0 && c != vocab.eos());
        };
        t = pick_token<T>(logits, ok, opts.sampling, rng);
      }
    } else {
      if (first_cell) {
        out.first_logits = logits;
        first_cell = false;
      }
      t = pick_token<T>(logits, [](int) { return true; }, opts.sampling, rng);
    }
    const Role role = grammar.next_role();
    if (role == Role::TdText) --text_budget;
    grammar.advance(t);
    out.tokens.push_back(t);
    if (grammar.done() || static_cast<int>(out.tokens.size()) >= max_new) break;
    logits = dec.step(t, role);
  }
  return out;
}

inline int default_budget(const SequenceLayout& prompt, const GenerateOptions& opts) {
  const int cells = prompt.image_width * prompt.image_height;
  return cells + 2 + (opts.with_text ? opts.max_text + 1 : 0);
}

}  // namespace detail

// Decodes the TD segment of an inference prompt (a packed sequence without
// target). The prompt is fed through the cache first, then tokens are
// appended one at a time.
template <typename T>
Generation<T> generate(const ModelParams<T>& params, const TokenSeq& prompt, const SequenceLayout& layout,
                       const VocabSpec& vocab, const MaskOptions& mask_opts = {}, const GenerateOptions& opts = {},
                       std::optional<int> max_new = std::nullopt) {
  if (layout.generation_begin != layout.size()) throw ConfigError("prompt layout must end where TD begins");
  const int budget = max_new.value_or(detail::default_budget(layout, opts));
  if (budget <= 0) throw ConfigError("max_new must be positive");
  if (layout.size() + budget > params.config.max_len)
    throw ConfigError("generation budget exceeds max_len");
  Decoder<T> dec(params, mask_opts);
  dec.reset(layout.task_begin);
  RowVec<T> logits;
  for (int p = 0; p < layout.size(); ++p) logits = dec.step(prompt[static_cast<std::size_t>(p)], layout.role(p));
  return detail::continue_generation(dec, std::move(logits), vocab, layout.image_width * layout.image_height, budget,
                                     opts);
}

// Key/value state of BOS and the XP block after reading the examples; the
// example entries themselves are dropped.
template <typename T>
struct CompressedContext {
  Decoder<T> decoder;
  int retained = 0;
};

template <typename T>
CompressedContext<T> encode_context(const ModelParams<T>& params, const TokenSeq& prompt,
                                    const SequenceLayout& layout, const MaskOptions& mask_opts) {
  if (!mask_opts.isolate_examples || mask_opts.query_sees_ie)
    throw ConfigError("two-phase inference requires the X-Prompt mask with query_sees_ie off");
  CompressedContext<T> cc{Decoder<T>(params, mask_opts), 0};
  cc.decoder.reset(layout.task_begin);
  for (int p = 0; p < layout.task_begin; ++p) cc.decoder.step(prompt[static_cast<std::size_t>(p)], layout.role(p));
  cc.retained = cc.decoder.evict_examples();
  return cc;
}

// Phase two: feeds the task side of the prompt against the compressed
// context and generates. `cc` is copied so one context serves many queries.
template <typename T>
Generation<T> generate_from_context(CompressedContext<T> cc, const TokenSeq& prompt, const SequenceLayout& layout,
                                    const VocabSpec& vocab, const GenerateOptions& opts = {},
                                    std::optional<int> max_new = std::nullopt) {
  if (layout.generation_begin != layout.size()) throw ConfigError("prompt layout must end where TD begins");
  if (cc.decoder.position() != layout.task_begin) throw ConfigError("compressed context does not match prompt");
  const int budget = max_new.value_or(detail::default_budget(layout, opts));
  RowVec<T> logits;
  for (int p = layout.task_begin; p < layout.size(); ++p)
    logits = cc.decoder.step(prompt[static_cast<std::size_t>(p)], layout.role(p));
  auto out = detail::continue_generation(cc.decoder, std::move(logits), vocab,
                                         layout.image_width * layout.image_height, budget, opts);
  out.retained = cc.retained;
  return out;
}

template <typename T>
Generation<T> encode_then_generate(const ModelParams<T>& params, const TokenSeq& prompt,
                                   const SequenceLayout& layout, const VocabSpec& vocab,
                                   const MaskOptions& mask_opts = {}, const GenerateOptions& opts = {},
                                   std::optional<int> max_new = std::nullopt) {
  const int budget = max_new.value_or(detail::default_budget(layout, opts));
  if (layout.size() + budget > params.config.max_len)
    throw ConfigError("generation budget exceeds max_len");
  auto cc = encode_context(params, prompt, layout, mask_opts);
  return generate_from_context(std::move(cc), prompt, layout, vocab, opts, budget);
}

}  // namespace xprompt

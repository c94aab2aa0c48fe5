#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "error.hpp"
#include "task_example.hpp"
#include "vocab.hpp"

namespace xprompt {

enum class Role : std::uint8_t { IeText, IeImage, Xp, QueryText, QueryImage, TdImage, TdText, Special };

constexpr bool is_ie(Role r) { return r == Role::IeText || r == Role::IeImage; }
constexpr bool is_td(Role r) { return r == Role::TdImage || r == Role::TdText; }
constexpr bool is_query(Role r) { return r == Role::QueryText || r == Role::QueryImage; }

constexpr std::string_view role_name(Role r) {
  switch (r) {
    case Role::IeText: return "IE_TEXT";
    case Role::IeImage: return "IE_IMAGE";
    case Role::Xp: return "XP";
    case Role::QueryText: return "QUERY_TEXT";
    case Role::QueryImage: return "QUERY_IMAGE";
    case Role::TdImage: return "TD_IMAGE";
    case Role::TdText: return "TD_TEXT";
    case Role::Special: return "SPECIAL";
  }
  return "?";
}

inline Role role_from_name(std::string_view s) {
  for (auto r : {Role::IeText, Role::IeImage, Role::Xp, Role::QueryText, Role::QueryImage, Role::TdImage,
                 Role::TdText, Role::Special})
    if (role_name(r) == s) return r;
  throw ConfigError("unknown role name: " + std::string(s));
}

enum class SegmentKind : std::uint8_t {
  Bos,
  IeInstruction,
  IeInput,
  IeOutput,
  XpBlock,
  Sep,
  QueryInstruction,
  QueryInput,
  TdImage,
  TdText,
  Eos
};

struct Segment {
  SegmentKind kind;
  int begin;  // inclusive
  int end;    // exclusive
  int example = -1;  // index into the context list for IE segments
  friend bool operator==(const Segment&, const Segment&) = default;
};

// Role labels for every position of a packed sequence.
//
// task_begin is the first position that belongs to the new task (SEP when
// present, otherwise the query instruction). Positions at or after it, other
// than BOS, never read in-context example tokens under the X-Prompt mask.
// generation_begin is where TD tokens start; it equals size() for inference
// prompts.
struct SequenceLayout {
  std::vector<Role> roles;
  std::vector<std::uint8_t> loss_mask;
  std::vector<Segment> segments;
  int xp_begin = 0;
  int xp_count = 0;
  int task_begin = 0;
  int generation_begin = 0;
  int image_width = 0;
  int image_height = 0;

  int size() const { return static_cast<int>(roles.size()); }
  Role role(int i) const { return roles[static_cast<std::size_t>(i)]; }

  // Extends an inference layout by one generated position.
  void append(Role r) {
    roles.push_back(r);
    loss_mask.push_back(is_td(r) ? 1 : 0);
  }

  friend bool operator==(const SequenceLayout&, const SequenceLayout&) = default;
};

struct Query {
  ToyImage input_image;
  std::string instruction;
};

struct Target {
  ToyImage output_image;
  std::optional<std::string> diff_text;
};

enum class XpPlacement : std::uint8_t { Shared, PerExample };

struct PackOptions {
  // When set, k > 0 demands S > 0: examples must be compressed into XP tokens.
  bool compression = true;
  XpPlacement xp_placement = XpPlacement::Shared;
};

struct PackedSequence {
  TokenSeq tokens;
  SequenceLayout layout;
};

namespace detail {

class Packer {
 public:
  explicit Packer(const VocabSpec& vocab) : vocab_(vocab) {}

  void add(SegmentKind kind, const TokenSeq& toks, Role role, int example = -1) {
    const int begin = static_cast<int>(out_.tokens.size());
    for (TokenId t : toks) {
      out_.tokens.push_back(t);
      out_.layout.roles.push_back(role);
      out_.layout.loss_mask.push_back(is_td(role) ? 1 : 0);
    }
    out_.layout.segments.push_back({kind, begin, static_cast<int>(out_.tokens.size()), example});
  }

  int pos() const { return static_cast<int>(out_.tokens.size()); }
  PackedSequence& out() { return out_; }

 private:
  const VocabSpec& vocab_;
  PackedSequence out_;
};

}  // namespace detail

// Lays out [BOS][IE...][XP x S][SEP][query instruction][query image][TD][EOS].
// SEP is emitted only when there is something before the query (k > 0 or
// S > 0); the TD segment and EOS only when a target is given.
inline PackedSequence pack_sequence(std::span<const TaskExample> context, const Query& query,
                                    const std::optional<Target>& target, int num_xp, const VocabSpec& vocab,
                                    const PackOptions& opts = {}) {
  if (num_xp < 0) throw ConfigError("XP token count must be non-negative");
  if (opts.compression && num_xp == 0 && !context.empty())
    throw ConfigError("compression mode needs at least one XP token when examples are present");
  const ToyImage& ref = query.input_image;
  for (const auto& ex : context) {
    if (!ex.input_image.same_shape(ref) || !ex.output_image.same_shape(ref))
      throw InvalidImage("in-context example " + ex.id + " has mismatched image dimensions");
  }
  if (target && !target->output_image.same_shape(ref)) throw InvalidImage("target image has mismatched dimensions");

  detail::Packer p(vocab);
  p.add(SegmentKind::Bos, {vocab.bos()}, Role::Special);
  const TokenSeq xp_block(static_cast<std::size_t>(num_xp), vocab.xp());
  int first_xp = -1;
  auto add_xp = [&] {
    if (num_xp == 0) return;
    if (first_xp < 0) first_xp = p.pos();
    p.add(SegmentKind::XpBlock, xp_block, Role::Xp);
  };
  for (std::size_t e = 0; e < context.size(); ++e) {
    const auto& ex = context[e];
    const int idx = static_cast<int>(e);
    p.add(SegmentKind::IeInstruction, encode_text(ex.instruction, vocab), Role::IeText, idx);
    p.add(SegmentKind::IeInput, encode_image(ex.input_image, vocab), Role::IeImage, idx);
    p.add(SegmentKind::IeOutput, encode_image(ex.output_image, vocab), Role::IeImage, idx);
    if (opts.xp_placement == XpPlacement::PerExample) add_xp();
  }
  if (opts.xp_placement == XpPlacement::Shared || context.empty()) add_xp();

  auto& layout = p.out().layout;
  layout.xp_begin = first_xp < 0 ? p.pos() : first_xp;
  layout.xp_count = 0;
  for (auto r : layout.roles) layout.xp_count += (r == Role::Xp);

  layout.task_begin = p.pos();
  if (!context.empty() || num_xp > 0) p.add(SegmentKind::Sep, {vocab.sep()}, Role::Special);
  p.add(SegmentKind::QueryInstruction, encode_text(query.instruction, vocab), Role::QueryText);
  p.add(SegmentKind::QueryInput, encode_image(query.input_image, vocab), Role::QueryImage);
  layout.generation_begin = p.pos();
  if (target) {
    p.add(SegmentKind::TdImage, encode_image(target->output_image, vocab), Role::TdImage);
    if (target->diff_text) p.add(SegmentKind::TdText, encode_text(*target->diff_text, vocab), Role::TdText);
    p.add(SegmentKind::Eos, {vocab.eos()}, Role::Special);
  }
  layout.image_width = ref.width;
  layout.image_height = ref.height;
  return std::move(p.out());
}

inline PackedSequence pack_example(std::span<const TaskExample> context, const TaskExample& ex, int num_xp,
                                   const VocabSpec& vocab, bool with_diff_text, const PackOptions& opts = {}) {
  Target t{ex.output_image, with_diff_text ? ex.diff_text : std::nullopt};
  return pack_sequence(context, Query{ex.input_image, ex.instruction}, t, num_xp, vocab, opts);
}

// Closed-form length of pack_sequence's output.
inline int packed_length(int k, int num_xp, int instr_words_total, int query_words, int cells, bool has_target,
                         int diff_words = 0, XpPlacement placement = XpPlacement::Shared) {
  const int image = cells + 2;
  const int xp_total = placement == XpPlacement::PerExample && k > 0 ? k * num_xp : num_xp;
  int n = 1 + instr_words_total + 2 * image * k + xp_total;
  if (k > 0 || num_xp > 0) n += 1;
  n += query_words + image;
  if (has_target) n += image + diff_words + 1;
  return n;
}

}  // namespace xprompt

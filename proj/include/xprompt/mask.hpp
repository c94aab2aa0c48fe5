#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "layout.hpp"

namespace xprompt {

struct MaskOptions {
  // X-Prompt isolation: task-side positions cannot read in-context example
  // tokens. Off gives the plain causal mask.
  bool isolate_examples = true;
  // Lets SEP and query positions read the examples; TD positions stay blocked.
  bool query_sees_ie = false;
  // Diagnostic ablation: XP positions lose access to the examples as well.
  bool ablate_xp_ie = false;

  friend bool operator==(const MaskOptions&, const MaskOptions&) = default;
};

// True when row i belongs to the new task for the purpose of IE blocking.
inline bool blocked_from_examples(const SequenceLayout& layout, const MaskOptions& opts, int i) {
  const Role r = layout.role(i);
  if (is_td(r)) return true;
  if (opts.query_sees_ie) return false;
  if (is_query(r)) return true;
  return r == Role::Special && i >= layout.task_begin && i > 0;
}

// Single-entry form of the mask rule, shared by build_mask and the
// incremental decoder.
inline bool mask_allows(const SequenceLayout& layout, const MaskOptions& opts, int i, int j) {
  if (j > i) return false;
  if (i == j) return true;
  const Role rj = layout.role(j);
  if (!is_ie(rj)) return true;
  if (opts.ablate_xp_ie && layout.role(i) == Role::Xp) return false;
  if (opts.isolate_examples && blocked_from_examples(layout, opts, i)) return false;
  return true;
}

class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(int n, bool value = false)
      : n_(n), allow_(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), value ? 1 : 0) {}

  int size() const { return n_; }
  bool operator()(int i, int j) const { return allow_[index(i, j)] != 0; }
  void set(int i, int j, bool v) { allow_[index(i, j)] = v ? 1 : 0; }

  static AttentionMask causal(int n) {
    AttentionMask m(n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) m.set(i, j, true);
    return m;
  }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(n_) + static_cast<std::size_t>(j);
  }

  int n_ = 0;
  std::vector<std::uint8_t> allow_;
};

inline AttentionMask build_mask(const SequenceLayout& layout, const MaskOptions& opts = {}) {
  const int n = layout.size();
  AttentionMask m(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m.set(i, j, mask_allows(layout, opts, i, j));
  return m;
}

enum class MaskRule : std::uint8_t { Causality, TdSeesExample, XpBlindToExample, EmptyRow };

constexpr std::string_view rule_name(MaskRule r) {
  switch (r) {
    case MaskRule::Causality: return "causality";
    case MaskRule::TdSeesExample: return "td_sees_example";
    case MaskRule::XpBlindToExample: return "xp_blind_to_example";
    case MaskRule::EmptyRow: return "empty_row";
  }
  return "?";
}

struct MaskViolation {
  int row;
  int col;  // -1 for row-level rules
  MaskRule rule;
  friend bool operator==(const MaskViolation&, const MaskViolation&) = default;
};

// Lists every entry that breaks causality, TD->IE blocking or XP->IE
// reachability, and every row with no allowed target.
inline std::vector<MaskViolation> validate_mask(const AttentionMask& mask, const SequenceLayout& layout) {
  if (mask.size() != layout.size())
    throw ConfigError("mask is " + std::to_string(mask.size()) + "x" + std::to_string(mask.size()) +
                      " but layout has " + std::to_string(layout.size()) + " positions");
  std::vector<MaskViolation> out;
  const int n = mask.size();
  for (int i = 0; i < n; ++i) {
    bool any = false;
    const Role ri = layout.role(i);
    for (int j = 0; j < n; ++j) {
      const bool a = mask(i, j);
      any = any || a;
      if (j > i) {
        if (a) out.push_back({i, j, MaskRule::Causality});
        continue;
      }
      const Role rj = layout.role(j);
      if (is_td(ri) && is_ie(rj) && a) out.push_back({i, j, MaskRule::TdSeesExample});
      if (ri == Role::Xp && is_ie(rj) && !a) out.push_back({i, j, MaskRule::XpBlindToExample});
    }
    if (!any) out.push_back({i, -1, MaskRule::EmptyRow});
  }
  return out;
}

inline int effective_span(const AttentionMask& mask, int i) {
  if (i < 0 || i >= mask.size()) throw ConfigError("position " + std::to_string(i) + " out of range");
  int n = 0;
  for (int j = 0; j < mask.size(); ++j) n += mask(i, j);
  return n;
}

// L rows of '#' (allowed) and '.' (blocked).
inline std::string dump_mask(const AttentionMask& mask) {
  std::string s;
  s.reserve(static_cast<std::size_t>(mask.size()) * static_cast<std::size_t>(mask.size() + 1));
  for (int i = 0; i < mask.size(); ++i) {
    for (int j = 0; j < mask.size(); ++j) s += mask(i, j) ? '#' : '.';
    s += '\n';
  }
  return s;
}

}  // namespace xprompt

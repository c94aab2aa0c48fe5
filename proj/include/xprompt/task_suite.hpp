#pragma once

// Synthetic task family: exact transformation oracles, example generation,
// augmentation (reversal, difference descriptions) and holdout filtering.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "task_example.hpp"
#include "vocab.hpp"

namespace xprompt {

// Parameters a kind's instruction carries. Unused fields stay zero.
struct TaskParams {
  int amount = 0;     // shift distance
  bool left = false;  // shift direction
  int color_a = 0;    // recolor first color, border color
  int color_b = 0;    // recolor second color
  int level = 0;      // noise density in tenths
  int seed = 0;       // noise seed
  int threshold = 0;  // threshold_map cut
  friend bool operator==(const TaskParams&, const TaskParams&) = default;
};

inline constexpr int kMaxNumberWord = 127;
inline constexpr int kMaxNoiseSeed = 99;
inline constexpr int kMaxNoiseLevel = 5;
// Cells of the distance map source that count as marked.
inline constexpr int kDistanceMarker = 0;

// Every word a task instruction or difference description can contain.
inline std::vector<std::string> task_vocabulary() {
  std::vector<std::string> words = {"invert", "colors", "shift",   "right",  "left",      "add",      "remove",
                                    "noise",  "level",  "seed",    "draw",   "border",    "segment",  "threshold",
                                    "estimate", "distance", "map", "swap",   "output",    "image",    "is",
                                    "identical", "to",  "input",   "inverts", "every",    "color",    "of",
                                    "shifts", "each",   "row",     "and",    "changes",   "cells",    "adds",
                                    "removes", "draws", "a",       "segments", "into",    "two",      "classes",
                                    "maps",   "marked", "swaps"};
  for (int i = 0; i <= kMaxNumberWord; ++i) words.push_back(std::to_string(i));
  return words;
}

inline VocabSpec task_vocab(int palette = 16) { return VocabSpec(task_vocabulary(), palette); }

namespace detail {

inline int parse_int_word(const std::string& w, std::string_view what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(w, &used);
    if (used != w.size()) throw std::invalid_argument(w);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected a number for " + std::string(what) + ", got '" + w + "'");
  }
}

}  // namespace detail

// Explicit instructions carry every parameter. Generic ones name only the
// operation, so the parameters have to be read off an in-context example.
enum class InstructionStyle : std::uint8_t { Explicit, Generic };

inline std::string generic_instruction(TaskKind kind, const TaskParams& p) {
  switch (kind) {
    case TaskKind::Invert: return "invert colors";
    case TaskKind::Shift: return p.left ? "shift left" : "shift right";
    case TaskKind::AddNoise: return "add noise";
    case TaskKind::RemoveNoise: return "remove noise";
    case TaskKind::Border: return "draw border";
    case TaskKind::ThresholdMap: return "segment threshold";
    case TaskKind::DistanceMap: return "estimate distance map";
    case TaskKind::Recolor: return "swap colors";
  }
  return "";
}

inline std::string make_instruction(TaskKind kind, const TaskParams& p,
                                    InstructionStyle style = InstructionStyle::Explicit) {
  if (style == InstructionStyle::Generic) return generic_instruction(kind, p);
  switch (kind) {
    case TaskKind::Invert: return "invert colors";
    case TaskKind::Shift: return std::string("shift ") + (p.left ? "left " : "right ") + std::to_string(p.amount);
    case TaskKind::AddNoise:
      return "add noise level " + std::to_string(p.level) + " seed " + std::to_string(p.seed);
    case TaskKind::RemoveNoise:
      return "remove noise level " + std::to_string(p.level) + " seed " + std::to_string(p.seed);
    case TaskKind::Border: return "draw border " + std::to_string(p.color_a);
    case TaskKind::ThresholdMap: return "segment threshold " + std::to_string(p.threshold);
    case TaskKind::DistanceMap: return "estimate distance map";
    case TaskKind::Recolor: return "swap colors " + std::to_string(p.color_a) + " " + std::to_string(p.color_b);
  }
  return "";
}

// Inverse of make_instruction.
inline TaskParams parse_instruction(TaskKind kind, std::string_view instruction) {
  const auto w = split_words(instruction);
  auto expect = [&](std::size_t n) {
    if (w.size() != n)
      throw ConfigError("instruction '" + std::string(instruction) + "' does not match the " +
                        std::string(task_name(kind)) + " template");
  };
  TaskParams p;
  switch (kind) {
    case TaskKind::Invert:
    case TaskKind::DistanceMap: break;
    case TaskKind::Shift:
      expect(3);
      if (w[1] != "left" && w[1] != "right") throw ConfigError("shift direction must be left or right");
      p.left = (w[1] == "left");
      p.amount = detail::parse_int_word(w[2], "shift amount");
      break;
    case TaskKind::AddNoise:
    case TaskKind::RemoveNoise:
      expect(6);
      p.level = detail::parse_int_word(w[3], "noise level");
      p.seed = detail::parse_int_word(w[5], "noise seed");
      break;
    case TaskKind::Border:
      expect(3);
      p.color_a = detail::parse_int_word(w[2], "border color");
      break;
    case TaskKind::ThresholdMap:
      expect(3);
      p.threshold = detail::parse_int_word(w[2], "threshold");
      break;
    case TaskKind::Recolor:
      expect(4);
      p.color_a = detail::parse_int_word(w[2], "recolor color");
      p.color_b = detail::parse_int_word(w[3], "recolor color");
      break;
  }
  return p;
}

// Whether noise touches cell i for the given seed and level.
inline bool noise_hits(int seed, int level, int i) {
  const std::uint64_t h = mix64((static_cast<std::uint64_t>(seed) << 20) ^ static_cast<std::uint64_t>(i));
  return static_cast<int>(h % 10) < level;
}

inline int distance_step(int palette, int width, int height) {
  const int span = std::max(width, height) - 1;
  return span <= 0 ? 1 : std::max(1, (palette - 1) / span);
}

// Exact, dimension-preserving oracle for every kind.
inline ToyImage apply_transform(TaskKind kind, const TaskParams& p, const ToyImage& img, int palette) {
  check_image(img, palette);
  auto color_ok = [&](int c) { return c >= 0 && c < palette; };
  ToyImage out = img;
  const int W = img.width;
  const int H = img.height;
  switch (kind) {
    case TaskKind::Invert:
      for (auto& c : out.cells) c = palette - 1 - c;
      break;
    case TaskKind::Shift: {
      if (p.amount < 0) throw ConfigError("shift amount must be non-negative");
      const int n = p.left ? (W - p.amount % W) % W : p.amount % W;
      for (int r = 0; r < H; ++r)
        for (int x = 0; x < W; ++x) out.at(r, (x + n) % W) = img.at(r, x);
      break;
    }
    case TaskKind::AddNoise:
    case TaskKind::RemoveNoise: {
      if (p.level < 0 || p.level > 10) throw ConfigError("noise level must be in [0, 10]");
      const int off = std::max(1, palette / 2);
      const int sign = kind == TaskKind::AddNoise ? 1 : -1;
      for (int i = 0; i < img.size(); ++i) {
        if (!noise_hits(p.seed, p.level, i)) continue;
        auto& c = out.cells[static_cast<std::size_t>(i)];
        c = ((c + sign * off) % palette + palette) % palette;
      }
      break;
    }
    case TaskKind::Border:
      if (!color_ok(p.color_a)) throw ConfigError("border color outside palette");
      for (int r = 0; r < H; ++r)
        for (int x = 0; x < W; ++x)
          if (r == 0 || x == 0 || r == H - 1 || x == W - 1) out.at(r, x) = p.color_a;
      break;
    case TaskKind::ThresholdMap:
      if (p.threshold < 0 || p.threshold > palette) throw ConfigError("threshold outside palette range");
      for (auto& c : out.cells) c = c >= p.threshold ? palette - 1 : 0;
      break;
    case TaskKind::DistanceMap: {
      const int step = distance_step(palette, W, H);
      std::vector<std::pair<int, int>> marks;
      for (int r = 0; r < H; ++r)
        for (int x = 0; x < W; ++x)
          if (img.at(r, x) == kDistanceMarker) marks.emplace_back(r, x);
      for (int r = 0; r < H; ++r) {
        for (int x = 0; x < W; ++x) {
          int d = marks.empty() ? palette : std::max(W, H);
          for (auto [mr, mx] : marks) d = std::min(d, std::max(std::abs(r - mr), std::abs(x - mx)));
          out.at(r, x) = std::min(palette - 1, d * step);
        }
      }
      break;
    }
    case TaskKind::Recolor:
      if (!color_ok(p.color_a) || !color_ok(p.color_b)) throw ConfigError("recolor colors outside palette");
      for (auto& c : out.cells) {
        if (c == p.color_a) {
          c = p.color_b;
        } else if (c == p.color_b) {
          c = p.color_a;
        }
      }
      break;
  }
  return out;
}

inline ToyImage apply_instruction(TaskKind kind, std::string_view instruction, const ToyImage& img, int palette) {
  return apply_transform(kind, parse_instruction(kind, instruction), img, palette);
}

struct ImageShape {
  int width = 8;
  int height = 8;
  int palette = 16;
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

inline std::string example_id(TaskKind kind, std::uint64_t seed) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(mix64(seed ^ (static_cast<std::uint64_t>(kind) << 56))));
  return std::string(task_name(kind)) + "-" + buf;
}

inline TaskParams draw_params(TaskKind kind, Rng& rng, const ImageShape& shape) {
  TaskParams p;
  switch (kind) {
    case TaskKind::Invert:
    case TaskKind::DistanceMap: break;
    case TaskKind::Shift:
      p.amount = rng.range(1, std::max(2, shape.width));
      break;
    case TaskKind::AddNoise:
    case TaskKind::RemoveNoise:
      p.level = rng.range(1, kMaxNoiseLevel + 1);
      p.seed = rng.range(0, kMaxNoiseSeed + 1);
      break;
    case TaskKind::Border:
      p.color_a = rng.range(0, shape.palette);
      break;
    case TaskKind::ThresholdMap:
      p.threshold = rng.range(1, shape.palette);
      break;
    case TaskKind::Recolor: {
      p.color_a = rng.range(0, shape.palette);
      p.color_b = rng.range(0, shape.palette - 1);
      if (p.color_b >= p.color_a) ++p.color_b;
      break;
    }
  }
  return p;
}

inline ToyImage random_image(Rng& rng, const ImageShape& shape) {
  ToyImage img(shape.width, shape.height);
  for (auto& c : img.cells) c = rng.range(0, shape.palette);
  return img;
}

namespace detail {

inline void check_shape(const ImageShape& shape) {
  if (shape.width <= 0 || shape.height <= 0 || shape.palette < 2) throw ConfigError("invalid image shape");
  if (shape.width * shape.height > kMaxNumberWord) throw ConfigError("images larger than 127 cells are unsupported");
  if (shape.palette > kMaxNumberWord + 1) throw ConfigError("palettes above 128 colors are unsupported");
}

}  // namespace detail

// Example with the given parameters; the input image is drawn from `seed`.
inline TaskExample generate_with_params(TaskKind kind, const TaskParams& p, std::uint64_t seed,
                                        const ImageShape& shape = {},
                                        InstructionStyle style = InstructionStyle::Explicit) {
  detail::check_shape(shape);
  Rng rng(mix64(seed) ^ mix64(static_cast<std::uint64_t>(kind) + 101));
  ToyImage img = random_image(rng, shape);
  if (kind == TaskKind::DistanceMap &&
      std::find(img.cells.begin(), img.cells.end(), kDistanceMarker) == img.cells.end())
    img.cells[rng.below(img.cells.size())] = kDistanceMarker;

  TaskExample ex;
  ex.id = example_id(kind, seed);
  ex.task_kind = kind;
  ex.instruction = make_instruction(kind, p, style);
  if (kind == TaskKind::RemoveNoise) {
    // the clean image is the target; the input is its noisy version
    ex.output_image = img;
    ex.input_image = apply_transform(TaskKind::AddNoise, p, img, shape.palette);
  } else {
    ex.input_image = img;
    ex.output_image = apply_transform(kind, p, img, shape.palette);
  }
  return ex;
}

// Random parameters, input, instruction from the kind's template, output from
// the oracle.
inline TaskExample generate_example(TaskKind kind, std::uint64_t seed, const ImageShape& shape = {},
                                    InstructionStyle style = InstructionStyle::Explicit) {
  detail::check_shape(shape);
  Rng rng(mix64(seed) ^ mix64(static_cast<std::uint64_t>(kind) + 1));
  const TaskParams p = draw_params(kind, rng, shape);
  return generate_with_params(kind, p, seed, shape, style);
}

// True when the example is a held-out kind or the reversed twin of one.
inline bool is_held_out(const TaskExample& ex, const std::set<TaskKind>& holdout) {
  if (holdout.contains(ex.task_kind)) return true;
  if (ex.is_reversed) {
    const auto rk = reverse_kind(ex.task_kind);
    if (rk && holdout.contains(*rk)) return true;
  }
  return false;
}

inline std::vector<TaskExample> filter_holdout(const std::vector<TaskExample>& in, const std::set<TaskKind>& holdout) {
  std::vector<TaskExample> out;
  for (const auto& ex : in)
    if (!is_held_out(ex, holdout)) out.push_back(ex);
  return out;
}

struct DatasetSpec {
  std::vector<TaskKind> kinds = {kAllTaskKinds.begin(), kAllTaskKinds.end()};
  int examples_per_kind = 100;
  std::uint64_t seed = 0;
  bool reversal = false;
  bool diff_text = false;
  std::set<TaskKind> holdout;
  ImageShape shape;
};

// Base examples (kind-major), then the reversed twin of every reversible
// base example; diff_text filled on every emitted example when requested;
// held-out kinds and their reversed forms removed.
inline std::vector<TaskExample> make_dataset(const DatasetSpec& spec) {
  if (spec.examples_per_kind < 0) throw ConfigError("examples_per_kind must be non-negative");
  std::vector<TaskExample> base;
  for (TaskKind k : spec.kinds) {
    for (int i = 0; i < spec.examples_per_kind; ++i) {
      const std::uint64_t s = mix64(spec.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(i));
      base.push_back(generate_example(k, s, spec.shape));
    }
  }
  std::vector<TaskExample> all = base;
  if (spec.reversal) {
    for (const auto& ex : base)
      if (is_reversible(ex.task_kind)) all.push_back(reverse_task(ex));
  }
  std::vector<TaskExample> out = filter_holdout(all, spec.holdout);
  if (spec.diff_text)
    for (auto& ex : out) ex.diff_text = diff_description(ex);
  return out;
}

}  // namespace xprompt

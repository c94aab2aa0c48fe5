#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "error.hpp"
#include "vocab.hpp"

namespace xprompt {

enum class TaskKind : std::uint8_t {
  Invert,
  Shift,
  AddNoise,
  RemoveNoise,
  Border,
  ThresholdMap,
  DistanceMap,
  Recolor,
};

inline constexpr std::array kAllTaskKinds = {TaskKind::Invert,       TaskKind::Shift,       TaskKind::AddNoise,
                                             TaskKind::RemoveNoise,  TaskKind::Border,      TaskKind::ThresholdMap,
                                             TaskKind::DistanceMap,  TaskKind::Recolor};

constexpr std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Invert: return "invert";
    case TaskKind::Shift: return "shift";
    case TaskKind::AddNoise: return "add_noise";
    case TaskKind::RemoveNoise: return "remove_noise";
    case TaskKind::Border: return "border";
    case TaskKind::ThresholdMap: return "threshold_map";
    case TaskKind::DistanceMap: return "distance_map";
    case TaskKind::Recolor: return "recolor";
  }
  return "?";
}

inline TaskKind task_from_name(std::string_view s) {
  for (auto k : kAllTaskKinds)
    if (task_name(k) == s) return k;
  throw ConfigError("unknown task kind: " + std::string(s));
}

// Kind produced by swapping input and output; nullopt when the mapping loses
// information and has no exact inverse.
constexpr std::optional<TaskKind> reverse_kind(TaskKind k) {
  switch (k) {
    case TaskKind::Invert: return TaskKind::Invert;
    case TaskKind::Shift: return TaskKind::Shift;
    case TaskKind::AddNoise: return TaskKind::RemoveNoise;
    case TaskKind::RemoveNoise: return TaskKind::AddNoise;
    case TaskKind::Recolor: return TaskKind::Recolor;
    case TaskKind::Border:
    case TaskKind::ThresholdMap:
    case TaskKind::DistanceMap: return std::nullopt;
  }
  return std::nullopt;
}

constexpr bool is_reversible(TaskKind k) { return reverse_kind(k).has_value(); }

struct TaskExample {
  std::string id;
  ToyImage input_image;
  std::string instruction;
  ToyImage output_image;
  TaskKind task_kind = TaskKind::Invert;
  bool is_reversed = false;
  std::optional<std::string> diff_text;

  friend bool operator==(const TaskExample&, const TaskExample&) = default;
};

// Instruction rewrite applied when a pair is reversed. Each rule is its own
// inverse up to the kind swap, so reversing twice restores the text.
inline std::string reverse_instruction(TaskKind kind, std::string_view instruction) {
  auto words = split_words(instruction);
  auto replace_word = [&](std::string_view from, std::string_view to) {
    for (auto& w : words) {
      if (w == from) {
        w = std::string(to);
        return;
      }
    }
    throw UnsupportedReversal("instruction '" + std::string(instruction) + "' lacks '" + std::string(from) + "'");
  };
  switch (kind) {
    case TaskKind::Invert: break;
    case TaskKind::Shift: {
      bool done = false;
      for (auto& w : words) {
        if (w == "right" || w == "left") {
          w = (w == "right") ? "left" : "right";
          done = true;
          break;
        }
      }
      if (!done) throw UnsupportedReversal("shift instruction without direction: " + std::string(instruction));
      break;
    }
    case TaskKind::AddNoise: replace_word("add", "remove"); break;
    case TaskKind::RemoveNoise: replace_word("remove", "add"); break;
    case TaskKind::Recolor:
      // a swap is its own inverse; naming the colors in the other order keeps
      // the pair distinguishable from the forward text
      if (words.size() == 4) std::swap(words[2], words[3]);
      break;
    default:
      throw UnsupportedReversal("task kind " + std::string(task_name(kind)) + " has no reverse template");
  }
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// Swaps input and output, rewrites the instruction and toggles is_reversed.
// diff_text describes the forward direction, so it is dropped.
inline TaskExample reverse_task(const TaskExample& ex) {
  const auto rk = reverse_kind(ex.task_kind);
  if (!rk) throw UnsupportedReversal("task kind " + std::string(task_name(ex.task_kind)) + " is not reversible");
  TaskExample r;
  r.id = ex.is_reversed && ex.id.ends_with(":rev") ? ex.id.substr(0, ex.id.size() - 4) : ex.id + ":rev";
  r.input_image = ex.output_image;
  r.output_image = ex.input_image;
  r.instruction = reverse_instruction(ex.task_kind, ex.instruction);
  r.task_kind = *rk;
  r.is_reversed = !ex.is_reversed;
  return r;
}

inline int changed_cells(const ToyImage& a, const ToyImage& b) {
  if (!a.same_shape(b)) throw InvalidImage("cannot diff images of different shape");
  int n = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) n += (a.cells[i] != b.cells[i]);
  return n;
}

constexpr std::string_view diff_phrase(TaskKind k) {
  switch (k) {
    case TaskKind::Invert: return "inverts every color of input image";
    case TaskKind::Shift: return "shifts each row";
    case TaskKind::AddNoise: return "adds noise";
    case TaskKind::RemoveNoise: return "removes noise";
    case TaskKind::Border: return "draws a border";
    case TaskKind::ThresholdMap: return "segments colors into two classes";
    case TaskKind::DistanceMap: return "maps distance to marked cells";
    case TaskKind::Recolor: return "swaps two colors";
  }
  return "";
}

// Deterministic text target describing how output differs from input.
inline std::string diff_description(const TaskExample& ex) {
  const int n = changed_cells(ex.input_image, ex.output_image);
  if (n == 0) return "output image is identical to input image";
  if (ex.task_kind == TaskKind::Invert) return "output image " + std::string(diff_phrase(TaskKind::Invert));
  return "output image " + std::string(diff_phrase(ex.task_kind)) + " and changes " + std::to_string(n) + " cells";
}

}  // namespace xprompt

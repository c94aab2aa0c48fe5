#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "layout.hpp"
#include "task_example.hpp"
#include "vocab.hpp"

namespace xprompt {

using json = nlohmann::json;

inline json to_json(const TaskExample& ex) {
  if (!ex.input_image.same_shape(ex.output_image)) throw InvalidImage("example " + ex.id + " has mismatched images");
  json j;
  j["id"] = ex.id;
  j["task_kind"] = std::string(task_name(ex.task_kind));
  j["instruction"] = ex.instruction;
  j["input_cells"] = ex.input_image.cells;
  j["output_cells"] = ex.output_image.cells;
  j["width"] = ex.input_image.width;
  j["height"] = ex.input_image.height;
  j["is_reversed"] = ex.is_reversed;
  j["diff_text"] = ex.diff_text ? json(*ex.diff_text) : json(nullptr);
  return j;
}

inline TaskExample example_from_json(const json& j) {
  try {
    TaskExample ex;
    ex.id = j.at("id").get<std::string>();
    ex.task_kind = task_from_name(j.at("task_kind").get<std::string>());
    ex.instruction = j.at("instruction").get<std::string>();
    const int w = j.at("width").get<int>();
    const int h = j.at("height").get<int>();
    ex.input_image = ToyImage(w, h, j.at("input_cells").get<std::vector<int>>());
    ex.output_image = ToyImage(w, h, j.at("output_cells").get<std::vector<int>>());
    if (ex.input_image.cells.size() != static_cast<std::size_t>(w * h) ||
        ex.output_image.cells.size() != static_cast<std::size_t>(w * h))
      throw InvalidImage("cell count does not match width*height in example " + ex.id);
    ex.is_reversed = j.value("is_reversed", false);
    if (j.contains("diff_text") && !j["diff_text"].is_null()) ex.diff_text = j["diff_text"].get<std::string>();
    return ex;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed example record: ") + e.what());
  }
}

inline std::string to_jsonl_line(const TaskExample& ex) { return to_json(ex).dump(); }

inline void write_jsonl(const std::string& path, const std::vector<TaskExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& ex : examples) out << to_jsonl_line(ex) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

inline std::vector<TaskExample> parse_jsonl(std::istream& in) {
  std::vector<TaskExample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError("line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(example_from_json(j));
  }
  return out;
}

inline std::vector<TaskExample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return parse_jsonl(in);
}

inline json layout_to_json(const SequenceLayout& l) {
  json roles = json::array();
  for (auto r : l.roles) roles.push_back(std::string(role_name(r)));
  return {{"roles", roles},
          {"task_begin", l.task_begin},
          {"generation_begin", l.generation_begin},
          {"xp_begin", l.xp_begin},
          {"xp_count", l.xp_count},
          {"image_width", l.image_width},
          {"image_height", l.image_height}};
}

// Only "roles" is required. task_begin defaults to the first position after
// the last example or XP position (1 when there is none).
inline SequenceLayout layout_from_json(const json& j) {
  SequenceLayout l;
  try {
    for (const auto& r : j.at("roles")) l.append(role_from_name(r.get<std::string>()));
    int last = 0;
    int xp_first = -1;
    for (int i = 0; i < l.size(); ++i) {
      if (is_ie(l.role(i)) || l.role(i) == Role::Xp) last = i;
      if (l.role(i) == Role::Xp) {
        ++l.xp_count;
        if (xp_first < 0) xp_first = i;
      }
    }
    l.task_begin = j.value("task_begin", std::min(last + 1, l.size()));
    l.xp_begin = xp_first < 0 ? l.task_begin : xp_first;
    int gen = l.size();
    for (int i = 0; i < l.size(); ++i)
      if (is_td(l.role(i))) {
        gen = i;
        break;
      }
    l.generation_begin = j.value("generation_begin", gen);
    l.image_width = j.value("image_width", 0);
    l.image_height = j.value("image_height", 0);
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed layout: ") + e.what());
  }
  if (l.task_begin < 0 || l.task_begin > l.size()) throw ConfigError("task_begin outside the layout");
  return l;
}

// One row per line, cells as hex digits for palettes up to 16, otherwise
// space-separated decimals.
inline std::string ascii_grid(const ToyImage& img) {
  static constexpr char kHex[] = "0123456789abcdef";
  const bool compact = std::all_of(img.cells.begin(), img.cells.end(), [](int c) { return c >= 0 && c < 16; });
  std::string s;
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      if (compact) {
        s += kHex[img.at(r, c)];
      } else {
        if (c) s += ' ';
        s += std::to_string(img.at(r, c));
      }
    }
    s += '\n';
  }
  return s;
}

struct Rgb {
  std::uint8_t r, g, b;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Built-in copy of palettes/default16.txt.
inline std::vector<Rgb> default_palette() {
  return {{0, 0, 0},       {255, 255, 255}, {230, 25, 75},   {60, 180, 75},  {255, 225, 25}, {0, 130, 200},
          {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230}, {210, 245, 60}, {250, 190, 212},
          {0, 128, 128},   {220, 190, 255}, {170, 110, 40},  {128, 128, 128}};
}

// Palette file: one "r g b" triple per line, '#' starts a comment.
inline std::vector<Rgb> load_palette(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open palette " + path);
  std::vector<Rgb> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    int r, g, b;
    if (!(ls >> r)) continue;
    if (!(ls >> g >> b) || r < 0 || r > 255 || g < 0 || g > 255 || b < 0 || b > 255)
      throw IoError("bad palette entry: " + line);
    out.push_back({static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)});
  }
  return out;
}

// Binary PPM (P6), `scale` pixels per cell side.
inline std::string to_ppm(const ToyImage& img, const std::vector<Rgb>& palette, int scale = 1) {
  if (scale <= 0) throw ConfigError("ppm scale must be positive");
  check_image(img, static_cast<int>(palette.size()));
  const int W = img.width * scale;
  const int H = img.height * scale;
  std::string s = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  s.reserve(s.size() + static_cast<std::size_t>(W * H * 3));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const Rgb c = palette[static_cast<std::size_t>(img.at(y / scale, x / scale))];
      s += static_cast<char>(c.r);
      s += static_cast<char>(c.g);
      s += static_cast<char>(c.b);
    }
  }
  return s;
}

}  // namespace xprompt

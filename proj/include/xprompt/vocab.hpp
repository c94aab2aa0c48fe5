#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"

namespace xprompt {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Palette-index grid standing in for the discrete codes of an image tokenizer.
struct ToyImage {
  int width = 0;
  int height = 0;
  std::vector<int> cells;  // row-major palette indices

  ToyImage() = default;
  ToyImage(int w, int h, std::vector<int> c) : width(w), height(h), cells(std::move(c)) {}
  ToyImage(int w, int h, int fill = 0)
      : width(w), height(h), cells(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  int size() const { return width * height; }
  int& at(int row, int col) { return cells[static_cast<std::size_t>(row * width + col)]; }
  int at(int row, int col) const { return cells[static_cast<std::size_t>(row * width + col)]; }

  bool same_shape(const ToyImage& o) const { return width == o.width && height == o.height; }
  friend bool operator==(const ToyImage&, const ToyImage&) = default;
};

// Unified vocabulary. Id ranges, in order:
//   [0, text_count)                    words
//   [text_count, text_count + P)       palette colors
//   [text_count + P, ...)              BOS EOS BOI EOI SEP XP
class VocabSpec {
 public:
  static constexpr int kSpecialCount = 6;

  VocabSpec() = default;

  VocabSpec(std::vector<std::string> words, int palette_size) : words_(std::move(words)), palette_(palette_size) {
    if (palette_ <= 0) throw ConfigError("palette size must be positive");
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (words_[i].empty() || words_[i].find_first_of(" \t\n") != std::string::npos)
        throw ConfigError("vocabulary word must be a single non-empty token");
      if (!word_ids_.emplace(words_[i], static_cast<TokenId>(i)).second)
        throw ConfigError("duplicate vocabulary word: " + words_[i]);
    }
  }

  int text_count() const { return static_cast<int>(words_.size()); }
  int palette_size() const { return palette_; }
  int size() const { return text_count() + palette_ + kSpecialCount; }

  TokenId bos() const { return special(0); }
  TokenId eos() const { return special(1); }
  TokenId boi() const { return special(2); }
  TokenId eoi() const { return special(3); }
  TokenId sep() const { return special(4); }
  TokenId xp() const { return special(5); }

  TokenId image_token(int color) const { return static_cast<TokenId>(text_count() + color); }
  int color_of(TokenId t) const { return static_cast<int>(t) - text_count(); }

  bool is_text(TokenId t) const { return t >= 0 && t < text_count(); }
  bool is_image(TokenId t) const { return t >= text_count() && t < text_count() + palette_; }
  bool is_special(TokenId t) const { return t >= text_count() + palette_ && t < size(); }

  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(TokenId t) const { return words_.at(static_cast<std::size_t>(t)); }

  TokenId word_id(std::string_view w) const {
    auto it = word_ids_.find(std::string(w));
    if (it == word_ids_.end()) throw UnknownToken("unknown word: '" + std::string(w) + "'");
    return it->second;
  }

  bool contains(std::string_view w) const { return word_ids_.contains(std::string(w)); }

  friend bool operator==(const VocabSpec& a, const VocabSpec& b) {
    return a.words_ == b.words_ && a.palette_ == b.palette_;
  }

 private:
  TokenId special(int k) const { return static_cast<TokenId>(text_count() + palette_ + k); }

  std::vector<std::string> words_;
  std::map<std::string, TokenId, std::less<>> word_ids_;
  int palette_ = 0;
};

inline void check_image(const ToyImage& img, int palette) {
  if (img.width <= 0 || img.height <= 0)
    throw InvalidImage("image dimensions must be positive");
  if (img.cells.size() != static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height))
    throw InvalidImage("cell count does not match width*height");
  for (int c : img.cells)
    if (c < 0 || c >= palette) throw InvalidImage("cell value " + std::to_string(c) + " outside palette");
}

// [BOI] row-major cells [EOI]
inline TokenSeq encode_image(const ToyImage& img, const VocabSpec& vocab) {
  check_image(img, vocab.palette_size());
  TokenSeq out;
  out.reserve(img.cells.size() + 2);
  out.push_back(vocab.boi());
  for (int c : img.cells) out.push_back(vocab.image_token(c));
  out.push_back(vocab.eoi());
  return out;
}

inline ToyImage decode_image(std::span<const TokenId> tokens, const VocabSpec& vocab, int width, int height) {
  if (width <= 0 || height <= 0) throw DecodeError("image dimensions must be positive");
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (tokens.size() != n + 2) throw DecodeError("expected " + std::to_string(n + 2) + " tokens, got " + std::to_string(tokens.size()));
  if (tokens.front() != vocab.boi() || tokens.back() != vocab.eoi()) throw DecodeError("image span must be bracketed by BOI/EOI");
  ToyImage img(width, height);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId t = tokens[i + 1];
    if (!vocab.is_image(t)) throw DecodeError("non-image token inside image span at offset " + std::to_string(i));
    img.cells[i] = vocab.color_of(t);
  }
  return img;
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

inline std::string normalize_text(std::string_view s) {
  std::string out;
  for (const auto& w : split_words(s)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

inline TokenSeq encode_text(std::string_view s, const VocabSpec& vocab) {
  TokenSeq out;
  for (const auto& w : split_words(s)) out.push_back(vocab.word_id(w));
  return out;
}

inline std::string decode_text(std::span<const TokenId> tokens, const VocabSpec& vocab) {
  std::string out;
  for (TokenId t : tokens) {
    if (!vocab.is_text(t)) throw DecodeError("non-text token " + std::to_string(t) + " in text span");
    if (!out.empty()) out += ' ';
    out += vocab.word(t);
  }
  return out;
}

}  // namespace xprompt

#pragma once

// Retrieval-augmented editing: embed instructions, find the most similar
// stored instruction (excluding the query's own id), and use that pair as the
// in-context example.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "layout.hpp"
#include "task_example.hpp"
#include "vocab.hpp"

namespace xprompt {

using Embedding = std::vector<float>;

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Signed feature hashing of whitespace tokens, L2-normalized.
struct HashedBagOfWords {
  int dim = 256;

  Embedding operator()(std::string_view text) const {
    const auto words = split_words(text);
    if (words.empty()) throw ConfigError("cannot embed empty instruction");
    std::vector<double> acc(static_cast<std::size_t>(dim), 0.0);
    for (const auto& w : words) {
      const std::uint64_t h = fnv1a(w);
      const auto bucket = static_cast<std::size_t>(h % static_cast<std::uint64_t>(dim));
      acc[bucket] += (h >> 63) ? -1.0 : 1.0;
    }
    double norm = 0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    Embedding out(static_cast<std::size_t>(dim), 0.0f);
    if (norm == 0) {
      // every token cancelled out; fall back to the first word's bucket
      out[static_cast<std::size_t>(fnv1a(words[0]) % static_cast<std::uint64_t>(dim))] = 1.0f;
      return out;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / norm);
    return out;
  }
};

inline double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ConfigError("embedding dimensions differ");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

struct RetrievalHit {
  std::string id;
  double similarity = 0;
  friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

// Ranks (similarity desc, id asc).
inline bool better_hit(double sa, const std::string& ia, double sb, const std::string& ib) {
  if (sa != sb) return sa > sb;
  return ia < ib;
}

class RetrievalIndex {
 public:
  using Embedder = std::function<Embedding(std::string_view)>;

  explicit RetrievalIndex(int dim = 256) : dim_(dim), embed_(HashedBagOfWords{dim}) {}
  RetrievalIndex(int dim, Embedder embed) : dim_(dim), embed_(std::move(embed)) {}

  int dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const float> embedding(std::size_t i) const {
    return {vectors_.data() + i * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
  }

  Embedding embed(std::string_view text) const { return embed_(text); }

  void add(const std::string& id, std::span<const float> v) {
    if (static_cast<int>(v.size()) != dim_) throw ConfigError("embedding has wrong dimension");
    if (!slot_.emplace(id, ids_.size()).second) throw ConfigError("duplicate id in index: " + id);
    ids_.push_back(id);
    vectors_.insert(vectors_.end(), v.begin(), v.end());
    for (int b = 0; b < dim_; ++b) {
      if (v[static_cast<std::size_t>(b)] != 0.0f) postings_[b].push_back(ids_.size() - 1);
    }
    sorted_valid_ = false;
  }

  const TaskExample* example(const std::string& id) const {
    auto it = examples_.find(id);
    return it == examples_.end() ? nullptr : &it->second;
  }

  void attach(const TaskExample& ex) { examples_[ex.id] = ex; }

  // Reference retrieval: exhaustive scan over every entry.
  RetrievalHit retrieve_linear(std::span<const float> q, std::optional<std::string_view> exclude = {}) const {
    std::optional<std::size_t> best;
    double best_s = 0;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (exclude && ids_[i] == *exclude) continue;
      const double s = cosine(q, embedding(i));
      if (!best || better_hit(s, ids_[i], best_s, ids_[*best])) {
        best = i;
        best_s = s;
      }
    }
    if (!best) throw ConfigError("no retrieval candidates after exclusion");
    return {ids_[*best], best_s};
  }

  // Inverted-list retrieval: only entries sharing a nonzero bucket with the
  // query are scored; every other entry has similarity exactly zero, so the
  // best of those is the smallest non-excluded id outside the candidate set.
  RetrievalHit retrieve(std::span<const float> q, std::optional<std::string_view> exclude = {}) const {
    if (static_cast<int>(q.size()) != dim_) throw ConfigError("query embedding has wrong dimension");
    ensure_sorted();
    std::vector<std::uint8_t> seen(ids_.size(), 0);
    std::optional<std::size_t> best;
    double best_s = 0;
    for (int b = 0; b < dim_; ++b) {
      if (q[static_cast<std::size_t>(b)] == 0.0f) continue;
      auto it = postings_.find(b);
      if (it == postings_.end()) continue;
      for (std::size_t i : it->second) {
        if (seen[i]) continue;
        seen[i] = 1;
        if (exclude && ids_[i] == *exclude) continue;
        const double s = cosine(q, embedding(i));
        if (!best || better_hit(s, ids_[i], best_s, ids_[*best])) {
          best = i;
          best_s = s;
        }
      }
    }
    for (std::size_t i : sorted_) {
      if (seen[i] || (exclude && ids_[i] == *exclude)) continue;
      if (!best || better_hit(0.0, ids_[i], best_s, ids_[*best])) {
        best = i;
        best_s = 0.0;
      }
      break;
    }
    if (!best) throw ConfigError("no retrieval candidates after exclusion");
    return {ids_[*best], best_s};
  }

  // The k best entries by (similarity desc, id asc), via a full scan.
  std::vector<RetrievalHit> retrieve_top(std::span<const float> q, std::size_t k,
                                         std::optional<std::string_view> exclude = {}) const {
    std::vector<RetrievalHit> all;
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (!exclude || ids_[i] != *exclude) all.push_back({ids_[i], cosine(q, embedding(i))});
    if (all.empty()) throw ConfigError("no retrieval candidates after exclusion");
    const std::size_t n = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                      [](const RetrievalHit& a, const RetrievalHit& b) {
                        return better_hit(a.similarity, a.id, b.similarity, b.id);
                      });
    all.resize(n);
    return all;
  }

  RetrievalHit retrieve(std::string_view instruction, std::optional<std::string_view> exclude = {}) const {
    const auto q = embed(instruction);
    return retrieve(std::span<const float>(q), exclude);
  }

  // Binary layout: u32 dim, u32 count, then per entry u32 id length, id
  // bytes, dim float32 values; all little-endian.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    put_u32(out, static_cast<std::uint32_t>(dim_));
    put_u32(out, static_cast<std::uint32_t>(ids_.size()));
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      put_u32(out, static_cast<std::uint32_t>(ids_[i].size()));
      out.write(ids_[i].data(), static_cast<std::streamsize>(ids_[i].size()));
      for (float f : embedding(i)) put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
    if (!out) throw IoError("write failed for " + path);
  }

  static RetrievalIndex load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const auto dim = static_cast<int>(get_u32(in));
    const auto n = get_u32(in);
    if (dim <= 0 || dim > (1 << 20)) throw IoError("implausible embedding dimension in " + path);
    RetrievalIndex idx(dim);
    Embedding v(static_cast<std::size_t>(dim));
    for (std::uint32_t e = 0; e < n; ++e) {
      const auto len = get_u32(in);
      if (len > (1u << 16)) throw IoError("implausible id length in " + path);
      std::string id(len, '\0');
      in.read(id.data(), len);
      for (auto& f : v) f = std::bit_cast<float>(get_u32(in));
      if (!in) throw IoError("truncated index file " + path);
      idx.add(id, v);
    }
    return idx;
  }

 private:
  static void put_u32(std::ostream& out, std::uint32_t x) {
    const char b[4] = {static_cast<char>(x & 0xff), static_cast<char>((x >> 8) & 0xff),
                       static_cast<char>((x >> 16) & 0xff), static_cast<char>((x >> 24) & 0xff)};
    out.write(b, 4);
  }

  static std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4] = {0, 0, 0, 0};
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("unexpected end of index file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  void ensure_sorted() const {
    if (sorted_valid_) return;
    sorted_.resize(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) sorted_[i] = i;
    std::sort(sorted_.begin(), sorted_.end(), [&](std::size_t a, std::size_t b) { return ids_[a] < ids_[b]; });
    sorted_valid_ = true;
  }

  int dim_;
  Embedder embed_;
  std::vector<std::string> ids_;
  std::vector<float> vectors_;
  std::unordered_map<std::string, std::size_t> slot_;
  std::map<int, std::vector<std::size_t>> postings_;
  std::map<std::string, TaskExample> examples_;
  mutable std::vector<std::size_t> sorted_;
  mutable bool sorted_valid_ = false;
};

inline RetrievalIndex build_index(std::span<const TaskExample> examples, int dim = 256) {
  RetrievalIndex idx(dim);
  for (const auto& ex : examples) {
    const auto v = idx.embed(ex.instruction);
    idx.add(ex.id, v);
    idx.attach(ex);
  }
  return idx;
}

// Packs the retrieved pair as the single in-context example and the query as
// the task to solve; the TD segment is left empty for generation.
inline PackedSequence assemble_prompt(const Query& query, const TaskExample& retrieved, int num_xp,
                                      const VocabSpec& vocab, const PackOptions& opts = {}) {
  return pack_sequence(std::span<const TaskExample>(&retrieved, 1), query, std::nullopt, num_xp, vocab, opts);
}

}  // namespace xprompt

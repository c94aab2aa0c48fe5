#pragma once

// Checkpoint container. Byte layout (all integers u32 little-endian):
//
//   "XPCK"                      4-byte magic
//   version                     currently 1
//   header_len, header bytes    UTF-8 JSON: {"format_version", "model": {...},
//                               "vocab": {"words": [...], "palette": P}, "meta": {...}}
//   tensor_count
//   per tensor:
//     name_len, name bytes
//     ndims, dims[ndims]
//     prod(dims) float32 values, little-endian, row-major
//
// Tensors appear in ModelParams::visit order. See docs/checkpoint_format.md.

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "model.hpp"
#include "vocab.hpp"

namespace xprompt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  std::vector<std::string> words;
  int palette = 0;
  nlohmann::json meta = nlohmann::json::object();

  VocabSpec vocab() const { return VocabSpec(words, palette); }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model}, {"n_heads", c.n_heads}, {"n_layers", c.n_layers}, {"vocab", c.vocab},
          {"max_len", c.max_len}, {"num_xp", c.num_xp},   {"mlp_ratio", c.mlp_ratio}, {"seed", c.seed},
          {"image_span", c.image_span}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.num_xp = j.at("num_xp").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.image_span = j.value("image_span", 0);
  c.validate();
  return c;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((x >> (8 * i)) & 0xff);
}

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return x;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }

  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"model", config_to_json(ck.params.config)},
                           {"vocab", {{"words", ck.words}, {"palette", ck.palette}}},
                           {"meta", ck.meta}};
  const std::string hs = header.dump();
  std::string out = "XPCK";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(hs.size()));
  out += hs;
  std::uint32_t count = 0;
  ck.params.visit([&](const std::string&, const Mat<float>&) { ++count; });
  detail::put_u32(out, count);
  ck.params.visit([&](const std::string& name, const Mat<float>& m) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, 2);
    detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_u32(out, std::bit_cast<std::uint32_t>(m.data()[i]));
  });
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string data) {
  detail::ByteReader r(std::move(data));
  if (r.bytes(4) != "XPCK") throw IoError("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.words = header.at("vocab").at("words").get<std::vector<std::string>>();
    ck.palette = header.at("vocab").at("palette").get<int>();
    ck.meta = header.value("meta", nlohmann::json::object());
    ck.params = init_params<float>(config_from_json(header.at("model")));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  }
  std::uint32_t expected = 0;
  ck.params.visit([&](const std::string&, const Mat<float>&) { ++expected; });
  if (r.u32() != expected) throw IoError("checkpoint tensor count does not match model config");
  ck.params.visit([&](const std::string& name, Mat<float>& m) {
    const std::string got = r.bytes(r.u32());
    if (got != name) throw IoError("checkpoint tensor order mismatch: expected " + name + ", got " + got);
    const auto nd = r.u32();
    std::vector<std::uint32_t> dims(nd);
    for (auto& d : dims) d = r.u32();
    if (nd != 2 || dims[0] != m.rows() || dims[1] != m.cols()) throw IoError("shape mismatch for tensor " + name);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<float>(r.u32());
  });
  if (!r.done()) throw IoError("trailing bytes after checkpoint tensors");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace xprompt

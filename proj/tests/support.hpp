#pragma once

// Shared fixtures for unit and acceptance tests.

#include <string>
#include <vector>

#include "xprompt.hpp"

namespace xprompt::testing {

inline ToyImage random_grid(Rng& rng, int w, int h, int palette) {
  ToyImage img(w, h);
  for (auto& c : img.cells) c = rng.range(0, palette);
  return img;
}

inline TaskExample pair_of(const ToyImage& in, const ToyImage& out, std::string instruction, std::string id) {
  TaskExample ex;
  ex.id = std::move(id);
  ex.input_image = in;
  ex.output_image = out;
  ex.instruction = std::move(instruction);
  return ex;
}

inline const std::vector<std::string>& sample_instructions() {
  static const std::vector<std::string> v = {"invert colors", "draw border 3", "swap colors 1 2",
                                             "shift left 2", "estimate distance map", "segment threshold 7"};
  return v;
}

// Packed sequence with random example count, XP count, image size and
// optional target/text. Images use the given palette.
inline PackedSequence random_packed(Rng& rng, const VocabSpec& vocab, int max_k = 3, int max_side = 4,
                                    bool allow_no_xp = true) {
  const int w = rng.range(1, max_side + 1);
  const int h = rng.range(1, max_side + 1);
  const int k = rng.range(0, max_k + 1);
  const int S = allow_no_xp ? rng.range(k > 0 ? 1 : 0, 5) : rng.range(1, 5);
  const int P = vocab.palette_size();
  const auto& instr = sample_instructions();
  std::vector<TaskExample> ctx;
  for (int e = 0; e < k; ++e)
    ctx.push_back(pair_of(random_grid(rng, w, h, P), random_grid(rng, w, h, P),
                          instr[rng.below(instr.size())], "c" + std::to_string(e)));
  std::optional<Target> target;
  if (rng.below(3) != 0) {
    target = Target{random_grid(rng, w, h, P), std::nullopt};
    if (rng.below(2)) target->diff_text = "output image adds noise";
  }
  return pack_sequence(ctx, Query{random_grid(rng, w, h, P), instr[rng.below(instr.size())]}, target, S, vocab);
}

inline ModelConfig tiny_config(int vocab, int d_model = 16, int layers = 2, int heads = 2, int num_xp = 4,
                               int max_len = 128) {
  ModelConfig c;
  c.d_model = d_model;
  c.n_heads = heads;
  c.n_layers = layers;
  c.vocab = vocab;
  c.max_len = max_len;
  c.num_xp = num_xp;
  c.mlp_ratio = 2;
  c.seed = 7;
  return c;
}

// Parameters drawn at a larger scale than the initializer so attention
// patterns and logits are far from uniform.
template <typename T>
ModelParams<T> spread_params(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  auto p = init_params<T>(cfg);
  Rng rng(seed);
  p.visit([&](const std::string& name, Mat<T>& m) {
    if (name.ends_with("_g")) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(1.0 + 0.2 * rng.normal());
    } else {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(scale * rng.normal());
    }
  });
  return p;
}

}  // namespace xprompt::testing

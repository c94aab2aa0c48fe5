// Trains a small model on two kinds for a few hundred steps, then decodes a
// fresh query with and without cache compression.
#include <iostream>

#include <xprompt/decode.hpp>
#include <xprompt/experiment.hpp>

using namespace xprompt;

int main() {
  const ImageShape shape{2, 2, 4};
  const std::vector<TaskKind> kinds{TaskKind::Invert, TaskKind::Border};
  const VocabSpec vocab = task_vocab(shape.palette);

  ModelConfig mc;
  mc.d_model = 32;
  mc.n_heads = 2;
  mc.n_layers = 2;
  mc.num_xp = 4;
  mc.max_len = 64;
  mc.vocab = vocab.size();
  mc.image_span = shape.width * shape.height + 2;

  TrainConfig tc;
  tc.total_steps = 300;
  tc.warmup_steps = 20;
  tc.batch_size = 8;
  tc.base_lr = 3e-3;

  TrainHooks hooks;
  hooks.on_step = [](const LogRow& r) {
    if (r.step % 50 == 0) std::cout << "step " << r.step << " loss " << r.loss << '\n';
  };
  const auto res =
      train_loop(mc, tc, episode_source(kinds, shape, InstructionStyle::Explicit, tc.context_k), vocab, hooks);

  const TaskExample ctx = generate_example(TaskKind::Invert, 1001, shape);
  const TaskExample q = generate_example(TaskKind::Invert, 1002, shape);
  const auto prompt = pack_sequence({&ctx, 1}, Query{q.input_image, q.instruction}, std::nullopt, mc.num_xp, vocab);
  const auto full = generate(res.params, prompt.tokens, prompt.layout, vocab);
  const auto two = encode_then_generate(res.params, prompt.tokens, prompt.layout, vocab);

  const auto show = [&](const char* label, const TokenSeq& t) {
    const ToyImage img = decode_image({t.data(), static_cast<std::size_t>(shape.width * shape.height + 2)}, vocab,
                                      shape.width, shape.height);
    std::cout << label;
    for (int c : img.cells) std::cout << ' ' << c;
    std::cout << '\n';
  };
  std::cout << q.instruction << '\n';
  show("input     ", encode_image(q.input_image, vocab));
  show("expected  ", encode_image(q.output_image, vocab));
  show("generated ", full.tokens);
  show("two-phase ", two.tokens);
  std::cout << "cache entries kept after compression: " << two.retained << '\n';
}

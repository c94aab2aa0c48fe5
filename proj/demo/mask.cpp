// Packs one in-context example plus a query and prints the attention mask
// next to a plain causal one.
#include <iostream>

#include <xprompt/layout.hpp>
#include <xprompt/mask.hpp>
#include <xprompt/task_suite.hpp>

using namespace xprompt;

int main() {
  const ImageShape shape{2, 2, 4};
  const VocabSpec vocab = task_vocab(shape.palette);
  const TaskExample ctx = generate_example(TaskKind::Invert, 1, shape);
  const TaskExample q = generate_example(TaskKind::Invert, 2, shape);
  const PackedSequence seq = pack_example({&ctx, 1}, q, 2, vocab, false);

  std::cout << "roles:";
  for (Role r : seq.layout.roles) std::cout << ' ' << role_name(r);
  std::cout << "\n\nx-prompt mask ('#' = may attend):\n";
  const AttentionMask m = build_mask(seq.layout);
  std::cout << dump_mask(m) << "violations: " << validate_mask(m, seq.layout).size() << "\n\n";

  MaskOptions causal;
  causal.isolate_examples = false;
  const AttentionMask c = build_mask(seq.layout, causal);
  std::cout << "causal mask:\n" << dump_mask(c) << "violations: " << validate_mask(c, seq.layout).size() << '\n';
}

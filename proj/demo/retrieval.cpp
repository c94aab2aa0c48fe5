// Builds a retrieval index over generated examples and pairs a few queries
// with their closest stored example.
#include <iostream>

#include <xprompt/raie.hpp>
#include <xprompt/task_suite.hpp>

using namespace xprompt;

int main() {
  DatasetSpec spec;
  spec.examples_per_kind = 20;
  spec.shape = {3, 3, 8};
  const auto data = make_dataset(spec);
  const RetrievalIndex index = build_index(data, 128);
  std::cout << "indexed " << index.size() << " examples\n";

  for (const char* text : {"invert the colors", "draw border 2", "shift left 1", "make it nicer"}) {
    const RetrievalHit hit = index.retrieve(text);
    std::cout << '"' << text << "\" -> " << hit.id << " (" << hit.similarity << ")  \""
              << index.example(hit.id)->instruction << "\"\n";
  }

  // A stored example never retrieves itself when excluded.
  const TaskExample& first = data.front();
  std::cout << first.id << " excluded -> " << index.retrieve(first.instruction, first.id).id << '\n';

  const auto prompt = assemble_prompt(Query{first.input_image, first.instruction},
                                      *index.example(index.retrieve(first.instruction, first.id).id), 16,
                                      task_vocab(spec.shape.palette));
  std::cout << "prompt length " << prompt.tokens.size() << ", generation starts at "
            << prompt.layout.generation_begin << '\n';
}

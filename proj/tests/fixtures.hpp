#pragma once

#include <string>
#include <vector>

#include "scitune/corpus.hpp"
#include "scitune/instruction.hpp"
#include "scitune/model.hpp"
#include "scitune/tokenizer.hpp"
#include "scitune/trainer.hpp"

namespace scitune::test {

// Vocabulary covering the template text and the given instruction records.
inline Vocab vocab_for(const std::vector<InstructionRecord>& recs) {
  std::vector<std::string> texts;
  texts.emplace_back(kSystemMessage);
  for (auto p : kDescribePrompts) texts.emplace_back(p);
  texts.emplace_back(kQaSuffix);
  for (const auto& r : recs) {
    const RenderedText t = render(r);
    texts.push_back(t.context);
    texts.push_back(t.target);
  }
  return Vocab::build(texts, 4000);
}

inline std::vector<InstructionRecord> figure_records(std::size_t n, std::uint64_t seed) {
  std::vector<InstructionRecord> out;
  const auto figs = synth_figure_corpus(n, seed);
  for (std::size_t i = 0; i < figs.size(); ++i) out.push_back(assemble_pretrain_record(figs[i], seed * 1000 + i));
  return out;
}

inline std::vector<InstructionRecord> qa_records(std::size_t n, std::size_t lectures, std::uint64_t seed) {
  std::vector<InstructionRecord> out;
  for (const auto& q : synth_qa_corpus(n, lectures, seed)) out.push_back(assemble_task_record(q));
  return out;
}

// A deliberately small model so training tests stay fast.
inline ModelConfig small_config(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.d_v = 16;
  c.d_m = 32;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.max_len = 256;
  return c;
}

}  // namespace scitune::test

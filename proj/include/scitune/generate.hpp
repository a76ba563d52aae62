#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scitune/corpus.hpp"
#include "scitune/instruction.hpp"
#include "scitune/model.hpp"
#include "scitune/tokenizer.hpp"

namespace scitune {

struct GenConfig {
  std::size_t max_new_tokens = 64;
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};

// Greedy argmax takes the lowest id among ties. Sampling draws from
// softmax(logits / temperature). Stops at EOS (not included in the result),
// at max_new_tokens, or when the sequence reaches the model's max_len.
std::vector<TokenId> generate_tokens(const Model& m, const std::vector<TokenId>& context, const Image* img,
                                     const GenConfig& cfg);

// BOS plus the encoded context, image marker expanded.
std::vector<TokenId> encode_context(const Vocab& v, std::string_view context, const ModelConfig& cfg);

// Renders the record's context, generates, and decodes.
std::string generate_text(const Model& m, const Vocab& v, const InstructionRecord& rec, const GenConfig& cfg);

struct ParsedPretrainOutput {
  std::optional<FigureType> figure_type;
  std::optional<std::string> caption;
  std::optional<std::string> ocr;
  std::optional<std::string> mention;

  bool operator==(const ParsedPretrainOutput&) const = default;
};

struct ParsedQaOutput {
  std::optional<int> answer_index;
  std::optional<std::string> lecture;
  std::optional<std::string> solution;

  bool operator==(const ParsedQaOutput&) const = default;
};

// Figure type = longest display name at the start (case-insensitive);
// caption = first sentence of what follows, up to the first sentinel;
// OCR and mention = the text after their sentinels.
ParsedPretrainOutput parse_pretrain_output(std::string_view text);

// Answer from the first "the answer is <letter>" (case-insensitive), absent
// when the letter is out of range; lecture/solution from their sentinels.
ParsedQaOutput parse_qa_output(std::string_view text, std::size_t n_choices);

}  // namespace scitune

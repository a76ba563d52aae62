#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scitune/corpus.hpp"

namespace scitune {

// Compiled-in template constants. Their exact bytes are part of the
// checkpoint contract (see template_hash()); TEMPLATE.md lists them.
inline constexpr std::string_view kSystemMessage =
    "A chat between a curious human and an artificial intelligence assistant. The assistant gives "
    "helpful, detailed, and polite answers to the human’s questions.";

inline constexpr std::array<std::string_view, 16> kDescribePrompts = {
    "Describe the following image in detail.",
    "Provide a detailed description of the given image.",
    "Give an elaborate explanation of the image you see.",
    "Share a comprehensive rundown of the presented image.",
    "Offer a thorough analysis of the image.",
    "Explain the various aspects of the image before you.",
    "Clarify the contents of the displayed image with great detail.",
    "Characterize the image using a well-detailed description.",
    "Break down the elements of the image in a detailed manner.",
    "Walk through the important details of the image.",
    "Portray the image with a rich, descriptive narrative.",
    "Narrate the contents of the image with precision.",
    "Analyze the image in a comprehensive and detailed manner.",
    "Illustrate the image through a descriptive explanation.",
    "Examine the image closely and share its details.",
    "Write an exhaustive depiction of the given image.",
};

inline constexpr std::string_view kQaSuffix = "Answer with the option's letter, then give the lecture and solution.";
inline constexpr std::string_view kImageMarker = "<image>";
inline constexpr std::string_view kHumanTag = "\nHuman: ";
inline constexpr std::string_view kAssistantTag = "\nAssistant: ";

inline constexpr std::string_view kOcrSentinel = "OCR:";
inline constexpr std::string_view kMentionSentinel = "MENTION:";
inline constexpr std::string_view kLectureSentinel = "LECTURE:";
inline constexpr std::string_view kSolutionSentinel = "SOLUTION:";

inline constexpr std::size_t kMaxChoices = 5;

enum class SegmentKind { FigureType, Caption, Ocr, Mention, Answer, Lecture, Solution };

struct Segment {
  SegmentKind kind;
  std::string text;

  bool operator==(const Segment&) const = default;
};

struct InstructionRecord {
  std::string id;
  std::string system;
  std::string instruction;
  std::optional<Image> image;
  std::vector<Segment> targets;

  bool operator==(const InstructionRecord&) const = default;
};

struct RenderedText {
  std::string context;
  std::string target;
};

// One of the 16 describe-prompts, uniform over seeds.
std::string_view sample_instruction(std::uint64_t seed);

InstructionRecord assemble_pretrain_record(const FigureRecord& fig, std::uint64_t seed);
InstructionRecord assemble_task_record(const QARecord& qa);

RenderedText render(const InstructionRecord& rec);

// "The answer is B."
std::string answer_sentence(int answer_index);
char choice_letter(std::size_t index);

// Checks the segment-order grammar for pretraining or task records.
bool has_valid_segment_order(const InstructionRecord& rec);

// SHA-256 over every constant above.
std::string template_hash();

}  // namespace scitune

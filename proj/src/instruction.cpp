#include "scitune/instruction.hpp"

#include "scitune/error.hpp"
#include "scitune/hash.hpp"
#include "scitune/rng.hpp"

namespace scitune {

std::string_view sample_instruction(std::uint64_t seed) {
  Rng rng(seed);
  return kDescribePrompts[rng.below(kDescribePrompts.size())];
}

char choice_letter(std::size_t index) {
  if (index >= kMaxChoices) throw Error("choice index " + std::to_string(index) + " has no letter");
  return static_cast<char>('A' + index);
}

std::string answer_sentence(int answer_index) {
  return std::string("The answer is ") + choice_letter(static_cast<std::size_t>(answer_index)) + ".";
}

InstructionRecord assemble_pretrain_record(const FigureRecord& fig, std::uint64_t seed) {
  InstructionRecord rec;
  rec.id = fig.id;
  rec.system = std::string(kSystemMessage);
  rec.instruction = std::string(sample_instruction(seed));
  rec.image = fig.image;
  rec.targets.push_back({SegmentKind::FigureType, std::string(display_name(fig.figure_type))});
  rec.targets.push_back({SegmentKind::Caption, fig.caption});
  if (fig.ocr) {
    std::string joined;
    for (std::size_t i = 0; i < fig.ocr->size(); ++i) {
      if (i) joined += ", ";
      joined += (*fig.ocr)[i];
    }
    rec.targets.push_back({SegmentKind::Ocr, joined});
  }
  if (fig.mention) rec.targets.push_back({SegmentKind::Mention, *fig.mention});
  return rec;
}

InstructionRecord assemble_task_record(const QARecord& qa) {
  if (qa.choices.size() > kMaxChoices) {
    throw Error("QA record '" + qa.id + "' has " + std::to_string(qa.choices.size()) +
                " choices; at most 5 (A-E) are supported");
  }
  if (qa.answer_index < 0 || static_cast<std::size_t>(qa.answer_index) >= qa.choices.size()) {
    throw Error("QA record '" + qa.id + "' answer_index out of range");
  }
  InstructionRecord rec;
  rec.id = qa.id;
  rec.system = std::string(kSystemMessage);
  std::string instr = qa.question;
  if (qa.context_text) instr += "\n" + *qa.context_text;
  for (std::size_t i = 0; i < qa.choices.size(); ++i) {
    instr += "\n(";
    instr += choice_letter(i);
    instr += ") " + qa.choices[i];
  }
  instr += "\n" + std::string(kQaSuffix);
  rec.instruction = std::move(instr);
  rec.image = qa.context_image;
  rec.targets.push_back({SegmentKind::Answer, answer_sentence(qa.answer_index)});
  if (qa.lecture) rec.targets.push_back({SegmentKind::Lecture, *qa.lecture});
  if (qa.solution) rec.targets.push_back({SegmentKind::Solution, *qa.solution});
  return rec;
}

namespace {

std::string_view sentinel(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::Ocr: return kOcrSentinel;
    case SegmentKind::Mention: return kMentionSentinel;
    case SegmentKind::Lecture: return kLectureSentinel;
    case SegmentKind::Solution: return kSolutionSentinel;
    default: return {};
  }
}

}  // namespace

RenderedText render(const InstructionRecord& rec) {
  RenderedText out;
  out.context = rec.system;
  out.context += kHumanTag;
  out.context += rec.instruction;
  out.context += "\n";
  if (rec.image) out.context += kImageMarker;
  out.context += kAssistantTag;
  for (std::size_t i = 0; i < rec.targets.size(); ++i) {
    if (i) out.target += ' ';
    const auto s = sentinel(rec.targets[i].kind);
    if (!s.empty()) {
      out.target += s;
      out.target += ' ';
    }
    out.target += rec.targets[i].text;
  }
  return out;
}

bool has_valid_segment_order(const InstructionRecord& rec) {
  const auto& t = rec.targets;
  if (t.empty()) return false;
  std::size_t i = 0;
  if (t[0].kind == SegmentKind::FigureType) {
    if (t.size() < 2 || t[1].kind != SegmentKind::Caption) return false;
    i = 2;
    if (i < t.size() && t[i].kind == SegmentKind::Ocr) ++i;
    if (i < t.size() && t[i].kind == SegmentKind::Mention) ++i;
    return i == t.size();
  }
  if (t[0].kind == SegmentKind::Answer) {
    i = 1;
    if (i < t.size() && t[i].kind == SegmentKind::Lecture) ++i;
    if (i < t.size() && t[i].kind == SegmentKind::Solution) ++i;
    return i == t.size();
  }
  return false;
}

std::string template_hash() {
  std::string all;
  auto add = [&all](std::string_view s) {
    all += s;
    all.push_back('\0');
  };
  add(kSystemMessage);
  for (auto p : kDescribePrompts) add(p);
  add(kQaSuffix);
  add(kImageMarker);
  add(kHumanTag);
  add(kAssistantTag);
  add(kOcrSentinel);
  add(kMentionSentinel);
  add(kLectureSentinel);
  add(kSolutionSentinel);
  return sha256_hex(all);
}

}  // namespace scitune

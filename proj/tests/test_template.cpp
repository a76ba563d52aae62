#include <algorithm>
#include <map>
#include <string>

#include "doctest.h"
#include "scitune/error.hpp"
#include "scitune/instruction.hpp"

using namespace scitune;

namespace {

FigureRecord figure(bool ocr, bool mention) {
  FigureRecord f;
  f.id = "f1";
  f.image = Image(32, 32, 1);
  f.figure_type = FigureType::GraphPlot;
  f.caption = "Packet drop rate for each method.";
  if (ocr) f.ocr = std::vector<std::string>{"time (s)", "rate"};
  if (mention) f.mention = "The plot in the figure compares methods.";
  f.category = "Computer Science";
  return f;
}

QARecord question(std::size_t n_choices, int answer, bool explain) {
  QARecord q;
  q.id = "q1";
  q.question = "Which is warmer?";
  for (std::size_t i = 0; i < n_choices; ++i) q.choices.push_back("choice " + std::to_string(i));
  q.answer_index = answer;
  if (explain) {
    q.lecture = "Heat moves from warm to cold.";
    q.solution = "The first one is warmer.";
  }
  return q;
}

std::vector<SegmentKind> kinds(const InstructionRecord& r) {
  std::vector<SegmentKind> k;
  for (const auto& s : r.targets) k.push_back(s.kind);
  return k;
}

}  // namespace

TEST_CASE("sample_instruction draws from the prompt list") {
  std::map<std::string_view, int> freq;
  for (std::uint64_t s = 0; s < 16000; ++s) {
    const auto p = sample_instruction(s);
    CHECK(std::find(kDescribePrompts.begin(), kDescribePrompts.end(), p) != kDescribePrompts.end());
    ++freq[p];
  }
  CHECK(freq.size() == 16);
  for (const auto& [p, c] : freq) {
    CHECK(c >= 800);
    CHECK(c <= 1200);
  }
  CHECK(sample_instruction(42) == sample_instruction(42));
}

TEST_CASE("assemble_pretrain_record segment order") {
  using K = SegmentKind;
  CHECK(kinds(assemble_pretrain_record(figure(true, true), 1)) ==
        std::vector<K>{K::FigureType, K::Caption, K::Ocr, K::Mention});
  CHECK(kinds(assemble_pretrain_record(figure(false, true), 1)) ==
        std::vector<K>{K::FigureType, K::Caption, K::Mention});
  CHECK(kinds(assemble_pretrain_record(figure(false, false), 1)) == std::vector<K>{K::FigureType, K::Caption});
  const auto r = assemble_pretrain_record(figure(true, false), 9);
  CHECK(r == assemble_pretrain_record(figure(true, false), 9));
  CHECK(has_valid_segment_order(r));
  CHECK(r.targets[2].text == "time (s), rate");
  CHECK(r.system == kSystemMessage);
}

TEST_CASE("assemble_task_record") {
  const auto r = assemble_task_record(question(3, 1, true));
  REQUIRE(r.targets.size() == 3);
  CHECK(r.targets[0].text == "The answer is B.");
  CHECK(render(r).target.rfind("The answer is B.", 0) == 0);
  CHECK(has_valid_segment_order(r));
  CHECK(assemble_task_record(question(2, 0, false)).targets.size() == 1);
  CHECK_THROWS_AS(assemble_task_record(question(6, 0, false)), Error);
  CHECK(r.instruction.find("(C) choice 2") != std::string::npos);
}

TEST_CASE("render") {
  const auto pre = render(assemble_pretrain_record(figure(true, true), 3));
  CHECK(pre.target.rfind("Graph Plot", 0) == 0);
  CHECK(pre.context.find(kImageMarker) != std::string::npos);
  CHECK(pre.target.find(kSystemMessage) == std::string::npos);
  CHECK(pre.target ==
        "Graph Plot Packet drop rate for each method. OCR: time (s), rate MENTION: The plot in the figure compares "
        "methods.");

  const auto qa = render(assemble_task_record(question(4, 2, true)));
  CHECK(qa.context.find(kImageMarker) == std::string::npos);
  CHECK(qa.target == "The answer is C. LECTURE: Heat moves from warm to cold. SOLUTION: The first one is warmer.");
}

TEST_CASE("segment order checker rejects bad orders") {
  InstructionRecord r;
  r.targets = {{SegmentKind::Caption, "x"}, {SegmentKind::FigureType, "Equation"}};
  CHECK_FALSE(has_valid_segment_order(r));
  r.targets = {{SegmentKind::Answer, "a"}, {SegmentKind::Solution, "s"}, {SegmentKind::Lecture, "l"}};
  CHECK_FALSE(has_valid_segment_order(r));
  r.targets = {};
  CHECK_FALSE(has_valid_segment_order(r));
}

TEST_CASE("template hash is stable") {
  CHECK(template_hash() == template_hash());
  CHECK(template_hash().size() == 64);
}

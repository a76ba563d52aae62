#include <string>

#include "doctest.h"
#include "fixtures.hpp"
#include "scitune/generate.hpp"
#include "scitune/rng.hpp"

using namespace scitune;

namespace {

std::string join_ocr(const std::vector<std::string>& items) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) s += (i ? ", " : "") + items[i];
  return s;
}

}  // namespace

TEST_CASE("parse_pretrain_output examples") {
  auto p = parse_pretrain_output("Graph Plot Packet drop rate for each method.");
  CHECK(p.figure_type == FigureType::GraphPlot);
  CHECK(p.caption == "Packet drop rate for each method.");
  CHECK_FALSE(p.ocr);
  CHECK_FALSE(p.mention);

  p = parse_pretrain_output("hello world");
  CHECK_FALSE(p.figure_type);
  CHECK(p.caption == "hello world");

  p = parse_pretrain_output("bar chart two bars . more text . ocr : a , b mention : see figure .");
  CHECK(p.figure_type == FigureType::BarChart);
  CHECK(p.caption == "two bars .");
  CHECK(p.ocr == "a , b");
  CHECK(p.mention == "see figure .");

  // A display name glued to more letters is not a prefix match.
  CHECK_FALSE(parse_pretrain_output("Equations of motion.").figure_type);
  CHECK_FALSE(parse_pretrain_output("").caption);
}

TEST_CASE("parse_qa_output examples") {
  auto q = parse_qa_output("The answer is B. LECTURE: Heat flows. SOLUTION: Pick the warm one.", 4);
  CHECK(q.answer_index == 1);
  CHECK(q.lecture == "Heat flows.");
  CHECK(q.solution == "Pick the warm one.");

  CHECK_FALSE(parse_qa_output("The answer is E", 3).answer_index);
  CHECK(parse_qa_output("the answer is (c).", 3).answer_index == 2);
  CHECK(parse_qa_output("the answer is c . lecture : x", 3).answer_index == 2);
  // Only the first statement counts.
  CHECK(parse_qa_output("The answer is A. The answer is B.", 2).answer_index == 0);
  CHECK_FALSE(parse_qa_output("no answer here", 5).answer_index);
}

TEST_CASE("parsers are total") {
  Rng rng(12);
  const std::string alphabet = "abcdeLECTURESOLUTIONocrmention: .,()\n\t\xe2\x80\x99\x01";
  for (int i = 0; i < 500; ++i) {
    std::string s;
    const std::size_t n = rng.below(60);
    for (std::size_t k = 0; k < n; ++k) s += alphabet[rng.below(alphabet.size())];
    CHECK_NOTHROW(parse_pretrain_output(s));
    CHECK_NOTHROW(parse_qa_output(s, rng.below(7)));
  }
}

TEST_CASE("render then parse recovers figure segments") {
  const auto figs = synth_figure_corpus(200, 31);
  for (std::size_t i = 0; i < figs.size(); ++i) {
    const FigureRecord& f = figs[i];
    const RenderedText t = render(assemble_pretrain_record(f, i));
    const auto p = parse_pretrain_output(t.target);
    CHECK(p.figure_type == f.figure_type);
    CHECK(p.caption == f.caption);
    CHECK(p.ocr == (f.ocr ? std::optional<std::string>(join_ocr(*f.ocr)) : std::nullopt));
    CHECK(p.mention == f.mention);
  }
}

TEST_CASE("render then parse recovers QA segments") {
  const auto qa = synth_qa_corpus(200, 20, 32);
  for (const QARecord& q : qa) {
    const auto p = parse_qa_output(render(assemble_task_record(q)).target, q.choices.size());
    CHECK(p.answer_index == q.answer_index);
    CHECK(p.lecture == q.lecture);
    CHECK(p.solution == q.solution);
  }
}

TEST_CASE("generation") {
  const auto recs = test::figure_records(1, 40);
  const Vocab vocab = test::vocab_for(recs);
  const ModelConfig cfg = test::small_config(vocab.size());
  const RenderedText t = render(recs[0]);
  const std::vector<TokenId> ctx = encode_context(vocab, t.context, cfg);
  const Image* img = &*recs[0].image;

  SUBCASE("greedy is deterministic") {
    Model m(cfg, 2);
    GenConfig gc;
    gc.max_new_tokens = 20;
    const auto a = generate_tokens(m, ctx, img, gc);
    CHECK(a == generate_tokens(m, ctx, img, gc));
    CHECK(a.size() <= 20);
  }
  SUBCASE("zero budget") {
    Model m(cfg, 2);
    GenConfig gc;
    gc.max_new_tokens = 0;
    CHECK(generate_tokens(m, ctx, img, gc).empty());
  }
  SUBCASE("sampling is seeded") {
    Model m(cfg, 2);
    GenConfig gc;
    gc.max_new_tokens = 15;
    gc.temperature = 1.5;
    gc.seed = 4;
    const auto a = generate_tokens(m, ctx, img, gc);
    CHECK(a == generate_tokens(m, ctx, img, gc));
  }
  SUBCASE("stops at max_len") {
    ModelConfig short_cfg = cfg;
    short_cfg.max_len = ctx.size() + 3;
    Model m(short_cfg, 2);
    GenConfig gc;
    gc.max_new_tokens = 50;
    CHECK(generate_tokens(m, ctx, img, gc).size() <= 3);
  }
  SUBCASE("an overfit model reproduces its record") {
    const TokenSequence seq = encode(vocab, t.context, t.target, cfg.k_visual(), cfg.max_len);
    std::vector<TrainExample> data = {{recs[0].id, seq, recs[0].image}};
    TrainConfig tc;
    tc.stage = Stage::Task;
    tc.epochs = 150;
    tc.batch_size = 1;
    tc.lr = 3e-3;
    tc.optimizer = OptimizerKind::Adam;
    const Checkpoint c = train_task(initial_checkpoint(Model(cfg, 3), vocab), data, tc, vocab);
    // Target ids are everything after the context, minus the closing EOS.
    const std::vector<TokenId> target(seq.ids.begin() + static_cast<std::ptrdiff_t>(ctx.size()), seq.ids.end() - 1);
    GenConfig gc;
    gc.max_new_tokens = target.size() + 5;
    CHECK(generate_tokens(c.model, ctx, img, gc) == target);
    CHECK(generate_text(c.model, vocab, recs[0], gc) == normalize_text(t.target));
  }
}

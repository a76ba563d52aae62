// Acceptance suite: one PASS/FAIL line per criterion.
//
//   scitune_acceptance          run all criteria
//   scitune_acceptance 3 7      run a subset
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "json.hpp"
#include "scitune/cli.hpp"
#include "scitune/eval.hpp"
#include "scitune/generate.hpp"
#include "scitune/hash.hpp"
#include "scitune/pipeline.hpp"
#include "support.hpp"

using namespace scitune;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr std::size_t kGradCoordsPerBlock = 40;
constexpr double kGradSeconds = 60;

constexpr std::size_t kFreezeSteps = 100;
constexpr double kFreezeSeconds = 120;

constexpr std::size_t kOverfitRecords = 32;
constexpr double kOverfitLoss = 0.05;
constexpr std::uint64_t kOverfitStepBudget = 2000;
constexpr std::size_t kOverfitExactNeeded = 30;
constexpr double kOverfitSeconds = 600;

constexpr std::size_t kFigureTestSet = 500;
constexpr double kChance = 0.2;
constexpr double kTrainedFloor = 0.90;
constexpr double kTableSeconds = 900;

constexpr std::size_t kQaQuestions = 200;
constexpr double kQaTrainAccuracy = 0.95;

constexpr std::size_t kMetricPairs = 1000;
constexpr double kMetricTol = 1e-9;

constexpr std::size_t kRoundTrips = 200;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string name;
  std::function<Outcome()> run;
  double budget_seconds;  // 0 = no time limit
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  if (code != 0) std::fprintf(stderr, "%s", err.str().c_str());
  return code;
}

bool run_pipeline(const fs::path& config, const fs::path& out) {
  for (const char* step : {"synth", "build-vocab", "train-align", "train-task", "generate", "eval-figures", "eval-qa",
                           "report"}) {
    if (run_cli({step, "--config", config.string(), "--out", out.string()}) != 0) return false;
  }
  return true;
}

json read_json(const fs::path& p) { return json::parse(test::slurp(p)); }

Vocab vocab_with_template(const std::vector<InstructionRecord>& recs) { return test::vocab_for(recs); }

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto recs = figure_instructions(synth_figure_corpus(1, 101), 5);
  const Vocab vocab = vocab_with_template(recs);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  Model m(cfg, 13);
  const TrainExample ex = prepare_examples(recs, vocab, cfg, cfg.max_len).front();

  double worst = 0.0;
  std::string worst_name;
  std::size_t coords = 0, blocks = 0;
  for (const NamedTensor& nt : m.named_tensors()) {
    Tensor* one[] = {nt.tensor};
    GradCheckOptions o;
    o.h = kGradStep;
    o.max_coords = kGradCoordsPerBlock;
    o.seed = blocks;
    const auto r = grad_check([&](Graph& g) { return forward_loss(g, m, ex.seq, &*ex.image); }, one, o);
    coords += r.coords_checked;
    ++blocks;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = nt.name;
    }
  }
  return {worst < kGradTol, std::to_string(blocks) + " blocks, " + std::to_string(coords) +
                                " coords, max rel error " + fmt("%.3g", worst) + " (" + worst_name + ")"};
}

Outcome freeze_invariant() {
  const auto recs = figure_instructions(synth_figure_corpus(64, 202), 6);
  const Vocab vocab = vocab_with_template(recs);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  Model m(cfg, 17);
  const auto data = prepare_examples(recs, vocab, cfg, cfg.max_len);
  const std::string enc0 = tensors_hash(m.encoder_tensors());
  const std::string dec0 = tensors_hash(m.decoder_tensors());
  const std::string ad0 = tensors_hash(m.adapter_tensors());

  TrainConfig tc;
  tc.stage = Stage::Align;
  tc.batch_size = 8;
  tc.epochs = (kFreezeSteps * tc.batch_size + data.size() - 1) / data.size();
  tc.lr = 2e-3;
  tc.seed = 3;
  Checkpoint c = train_align(initial_checkpoint(std::move(m), vocab), data, tc, vocab);
  const bool enc = tensors_hash(c.model.encoder_tensors()) == enc0;
  const bool dec = tensors_hash(c.model.decoder_tensors()) == dec0;
  const bool ad = tensors_hash(c.model.adapter_tensors()) != ad0;
  return {enc && dec && ad && c.step >= kFreezeSteps,
          std::to_string(c.step) + " align steps; encoder " + (enc ? "unchanged" : "CHANGED") + ", decoder " +
              (dec ? "unchanged" : "CHANGED") + ", adapter " + (ad ? "changed" : "UNCHANGED")};
}

Outcome overfit_oracle() {
  const auto recs = figure_instructions(synth_figure_corpus(kOverfitRecords, 303), 7);
  const Vocab vocab = vocab_with_template(recs);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  const auto data = prepare_examples(recs, vocab, cfg, cfg.max_len);

  TrainConfig align;
  align.stage = Stage::Align;
  align.epochs = 25;
  align.batch_size = 8;
  align.lr = 3e-3;
  align.optimizer = OptimizerKind::Adam;
  align.clip = 1.0;
  align.seed = 1;
  Checkpoint c = train_align(initial_checkpoint(Model(cfg, 19), vocab), data, align, vocab);
  const std::uint64_t align_steps = c.step;

  TrainConfig task = align;
  task.stage = Stage::Task;
  task.seed = 2;
  const std::uint64_t task_budget = kOverfitStepBudget - align_steps;
  task.epochs = (task_budget * task.batch_size) / data.size();
  double loss = mean_loss(c.model, data);
  std::uint64_t task_steps = 0;
  for (std::uint64_t target = 100; loss >= kOverfitLoss && task_steps < task_budget; target += 100) {
    task.max_steps = std::min(target, task_budget);
    task.resume = task_steps > 0;
    c = train_task(std::move(c), data, task, vocab);
    task_steps = c.step;
    loss = mean_loss(c.model, data);
  }

  std::vector<int> exact(data.size(), 0);
  parallel_for(data.size(), [&](std::size_t i) {
    const RenderedText t = render(recs[i]);
    const std::vector<TokenId> ctx = encode_context(vocab, t.context, cfg);
    const auto& ids = data[i].seq.ids;
    const std::vector<TokenId> target(ids.begin() + static_cast<std::ptrdiff_t>(ctx.size()), ids.end() - 1);
    GenConfig gc;
    gc.max_new_tokens = target.size() + 8;
    exact[i] = generate_tokens(c.model, ctx, &*data[i].image, gc) == target;
  });
  const auto n_exact = static_cast<std::size_t>(std::count(exact.begin(), exact.end(), 1));
  const std::uint64_t total = align_steps + task_steps;
  return {loss < kOverfitLoss && total <= kOverfitStepBudget && n_exact >= kOverfitExactNeeded,
          "mean loss " + fmt("%.4f", loss) + " after " + std::to_string(total) + " steps (" +
              std::to_string(align_steps) + " align + " + std::to_string(task_steps) + " task); " +
              std::to_string(n_exact) + "/" + std::to_string(data.size()) + " exact"};
}

Outcome table1_ordering() {
  test::TempDir dir("accept-table1");
  // 2500 figures split 80/0/20 leaves exactly 500 for test.
  test::spit(dir / "c.toml", R"(seed = 11
[data]
figures = 2500
qa = 40
qa_lectures = 10
figure_split = [0.8, 0.0, 0.2]
[align]
epochs = 1
lr = 3e-3
optimizer = "adam"
clip = 1.0
[task]
epochs = 6
lr = 3e-3
optimizer = "adam"
clip = 1.0
[generate]
max_new_tokens = 96
)");
  if (!run_pipeline(dir / "c.toml", dir / "run")) return {false, "pipeline failed"};
  const json r = read_json(RunPaths(dir / "run").figure_report);
  const json& trained = r.at("figure_type").at("All");
  const json& base = r.at("centroid_baseline").at("All");
  const double t = trained.at("accuracy").get<double>();
  const double b = base.at("accuracy").get<double>();
  const auto n = trained.at("total").get<std::size_t>();
  return {n == kFigureTestSet && t > b && b > kChance && t > kChance && t >= kTrainedFloor,
          std::to_string(n) + " test figures; trained " + fmt("%.1f%%", 100 * t) + ", centroid " +
              fmt("%.1f%%", 100 * b) + ", chance 20%"};
}

Outcome table3_schema() {
  const auto qa = synth_qa_corpus(kQaQuestions, 40, 404);
  const auto recs = qa_instructions(qa);
  const Vocab vocab = vocab_with_template(recs);
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  const auto data = prepare_examples(recs, vocab, cfg, cfg.max_len);

  TrainConfig tc;
  tc.stage = Stage::Task;
  tc.epochs = 45;
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.optimizer = OptimizerKind::Adam;
  tc.clip = 1.0;
  tc.seed = 4;
  const Checkpoint c = train_task(initial_checkpoint(Model(cfg, 23), vocab), data, tc, vocab);

  std::vector<QaPrediction> preds(qa.size());
  parallel_for(qa.size(), [&](std::size_t i) {
    GenConfig gc;
    gc.max_new_tokens = 128;
    preds[i] = {qa[i].id, parse_qa_output(generate_text(c.model, vocab, recs[i], gc), qa[i].choices.size())};
  });
  const QaReport r = qa_eval(preds, qa);

  std::map<std::string, std::size_t> total;
  for (const auto& [name, t] : r.rows) total[name] = t.total;
  bool all_strata = true;
  for (auto s : kQaStrata) all_strata = all_strata && total.count(std::string(s));
  std::size_t both = 0;
  for (const auto& q : qa) both += q.context_text && q.context_image;
  const std::size_t n = qa.size();
  const bool partition = all_strata && total["NAT"] + total["SOC"] + total["LAN"] == n &&
                         total["G1-6"] + total["G7-12"] == n && total["TXT"] + total["IMG"] - both + total["NO"] == n &&
                         total["Avg"] == n;
  const double acc = *r.rows.back().second.accuracy();
  return {partition && acc >= kQaTrainAccuracy,
          std::string("strata ") + (partition ? "complete and consistent" : "BROKEN") + "; train accuracy " +
              fmt("%.1f%%", 100 * acc) + " after " + std::to_string(c.step) + " steps"};
}

Outcome table5_direction() {
  test::TempDir dir("accept-table5");
  // A short task run on the skewed lecture distribution.
  test::spit(dir / "c.toml", R"(seed = 12
[data]
figures = 40
qa = 400
qa_lectures = 40
[align]
epochs = 1
lr = 3e-3
optimizer = "adam"
clip = 1.0
[task]
epochs = 3
lr = 3e-3
optimizer = "adam"
clip = 1.0
include_figures = false
[generate]
max_new_tokens = 24
)");
  if (!run_pipeline(dir / "c.toml", dir / "run")) return {false, "pipeline failed"};
  const json rows = read_json(RunPaths(dir / "run").qa_report).at("fewshot");
  std::vector<std::size_t> counts;
  std::vector<std::string> parts;
  for (const json& row : rows) {
    counts.push_back(row.at("total").get<std::size_t>());
    const json& a = row.at("accuracy");
    parts.push_back("<=" + std::to_string(row.at("threshold").get<int>()) + ": " +
                    (a.is_null() ? std::string("n/a") : fmt("%.1f%%", 100 * a.get<double>())) + " of " +
                    std::to_string(counts.back()));
  }
  const bool monotone = std::is_sorted(counts.begin(), counts.end());
  const json& low = rows.front().at("accuracy");
  const json& high = rows.back().at("accuracy");
  const bool ordered = !low.is_null() && !high.is_null() && low.get<double>() <= high.get<double>();
  std::string detail;
  for (const auto& p : parts) detail += (detail.empty() ? "" : ", ") + p;
  return {monotone && ordered, detail};
}

Outcome metric_oracles() {
  // Independent brute force: clipped n-gram counts by direct scan, LCS by
  // plain recursion over suffixes.
  using Words = std::vector<std::string>;
  auto count = [](const Words& text, const Words& gram) {
    std::size_t c = 0;
    for (std::size_t j = 0; j + gram.size() <= text.size(); ++j) {
      c += std::equal(gram.begin(), gram.end(), text.begin() + static_cast<std::ptrdiff_t>(j));
    }
    return c;
  };
  auto oracle_bleu = [&](const Words& h, const Words& r) {
    if (h.empty()) return 0.0;
    double score = 1.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      std::set<Words> grams;
      double total = 0, matched = 0;
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        grams.insert(Words(h.begin() + static_cast<std::ptrdiff_t>(i), h.begin() + static_cast<std::ptrdiff_t>(i + n)));
        total += 1;
      }
      for (const Words& g : grams) matched += static_cast<double>(std::min(count(h, g), count(r, g)));
      if (n == 1 && matched == 0) return 0.0;
      score *= std::pow(n == 1 ? matched / total : (matched + 1) / (total + 1), 0.25);
    }
    if (h.size() < r.size()) score *= std::exp(1.0 - double(r.size()) / double(h.size()));
    return score;
  };
  auto oracle_rouge = [](const Words& h, const Words& r) {
    if (h.empty() || r.empty()) return 0.0;
    std::vector<std::vector<std::size_t>> memo(h.size() + 1, std::vector<std::size_t>(r.size() + 1, SIZE_MAX));
    std::function<std::size_t(std::size_t, std::size_t)> lcs = [&](std::size_t i, std::size_t j) -> std::size_t {
      if (i == h.size() || j == r.size()) return 0;
      std::size_t& m = memo[i][j];
      if (m == SIZE_MAX) m = h[i] == r[j] ? 1 + lcs(i + 1, j + 1) : std::max(lcs(i + 1, j), lcs(i, j + 1));
      return m;
    };
    const double l = static_cast<double>(lcs(0, 0));
    if (l == 0) return 0.0;
    const double p = l / h.size(), q = l / r.size();
    return 2 * p * q / (p + q);
  };

  static const char* vocab[] = {"the", "a", "cat", "dog", "sat", "ran", "on", "mat", "log", ".", ","};
  Rng rng(2024);
  auto sentence = [&] {
    std::string s;
    const std::size_t n = rng.below(16);
    for (std::size_t i = 0; i < n; ++i) s += std::string(i ? " " : "") + vocab[rng.below(std::size(vocab))];
    return s;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < kMetricPairs; ++i) {
    const std::string h = sentence(), r = sentence();
    const Words hw = split_words(h), rw = split_words(r);
    worst = std::max(worst, std::abs(bleu(h, r) - oracle_bleu(hw, rw)));
    worst = std::max(worst, std::abs(rouge_l(h, r) - oracle_rouge(hw, rw)));
  }
  const std::string s = "the cat sat on the mat .";
  const bool boundaries = bleu(s, s) == 1.0 && rouge_l(s, s) == 1.0 && bleu("", s) == 0.0 && rouge_l("", s) == 0.0;
  return {worst <= kMetricTol && boundaries, std::to_string(kMetricPairs) + " pairs, max deviation " +
                                                 fmt("%.3g", worst) + "; boundary cases " +
                                                 (boundaries ? "exact" : "WRONG")};
}

Outcome determinism() {
  test::TempDir dir("accept-determinism");
  test::spit(dir / "c.toml", R"(seed = 13
[data]
figures = 60
qa = 40
qa_lectures = 8
[align]
epochs = 1
lr = 3e-3
optimizer = "adam"
[task]
epochs = 2
lr = 3e-3
optimizer = "adam"
[generate]
max_new_tokens = 32
)");
  if (!run_pipeline(dir / "c.toml", dir / "a") || !run_pipeline(dir / "c.toml", dir / "b")) {
    return {false, "pipeline failed"};
  }
  std::size_t files = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), dir / "a");
    ++files;
    if (!fs::exists(dir / "b" / rel) || test::slurp(e.path()) != test::slurp(dir / "b" / rel)) {
      differ.push_back(rel.generic_string());
    }
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "b")) files_b += e.is_regular_file();
  const bool has_core = fs::exists(dir / "a" / "task.ckpt") && fs::exists(dir / "a" / "reports" / "report.json");
  std::string detail = std::to_string(files) + " artifacts compared";
  if (!differ.empty()) detail += "; differing: " + differ.front() + (differ.size() > 1 ? " and others" : "");
  return {differ.empty() && files == files_b && has_core, detail};
}

Outcome round_trips() {
  test::TempDir dir("accept-roundtrip");
  Rng rng(909);
  static const std::string odd[] = {"\"quoted\"", "back\\slash", "tab\there", "caf\xc3\xa9", "\xe2\x88\x91 sum",
                                    "new\nline", "plain"};
  auto salt = [&](std::string s) { return s + " " + odd[rng.below(std::size(odd))]; };

  // Corpus serialize/load.
  auto figs = synth_figure_corpus(kRoundTrips, 910);
  for (auto& f : figs) {
    f.caption = salt(f.caption);
    if (f.mention) f.mention = salt(*f.mention);
  }
  auto qa = synth_qa_corpus(kRoundTrips, 20, 911);
  for (auto& q : qa) {
    q.question = salt(q.question);
    if (q.lecture) q.lecture = salt(*q.lecture);
  }
  write_figure_corpus(dir / "f" / "figures.jsonl", figs, R"({"command":"acceptance"})");
  write_qa_corpus(dir / "q" / "qa.jsonl", qa);
  std::size_t corpus_ok = 0;
  const auto figs_back = load_figure_corpus(dir / "f" / "figures.jsonl");
  const auto qa_back = load_qa_corpus(dir / "q" / "qa.jsonl");
  for (std::size_t i = 0; i < kRoundTrips; ++i) {
    corpus_ok += i < figs_back.size() && figs_back[i] == figs[i];
    corpus_ok += i < qa_back.size() && qa_back[i] == qa[i];
  }

  // Checkpoint save/load: random small models, every other one carrying
  // Adam moments from one training step.
  const auto recs = figure_instructions(synth_figure_corpus(4, 912), 3);
  const Vocab vocab = vocab_with_template(recs);
  const ModelConfig cfg = test::small_config(vocab.size());
  const auto data = prepare_examples(recs, vocab, cfg, cfg.max_len);
  std::vector<int> ckpt_ok(kRoundTrips, 0);
  parallel_for(kRoundTrips, [&](std::size_t i) {
    Checkpoint c = initial_checkpoint(Model(cfg, 1000 + i), vocab);
    if (i % 2 == 1) {
      TrainConfig tc;
      tc.stage = i % 4 == 1 ? Stage::Align : Stage::Task;
      tc.batch_size = 4;
      tc.optimizer = OptimizerKind::Adam;
      tc.lr = 1e-3;
      tc.seed = i;
      c = tc.stage == Stage::Align ? train_align(std::move(c), data, tc, vocab) : train_task(std::move(c), data, tc, vocab);
    }
    const std::string bytes = serialize_checkpoint(c);
    Checkpoint back = parse_checkpoint(bytes, &vocab);
    bool same = serialize_checkpoint(back) == bytes && back.step == c.step && back.stage == c.stage &&
                back.adam_moments.size() == c.adam_moments.size();
    const auto ta = c.model.all_tensors(), tb = back.model.all_tensors();
    for (std::size_t k = 0; k < ta.size() && same; ++k) same = ta[k]->same_values(*tb[k]);
    ckpt_ok[i] = same;
  });
  const auto n_ckpt = static_cast<std::size_t>(std::count(ckpt_ok.begin(), ckpt_ok.end(), 1));

  // Template render/parse.
  std::size_t tmpl_ok = 0;
  const auto tfigs = synth_figure_corpus(kRoundTrips, 913);
  for (std::size_t i = 0; i < tfigs.size(); ++i) {
    const FigureRecord& f = tfigs[i];
    const auto p = parse_pretrain_output(render(assemble_pretrain_record(f, rng.next())).target);
    std::optional<std::string> ocr;
    if (f.ocr) {
      ocr = std::string();
      for (std::size_t k = 0; k < f.ocr->size(); ++k) *ocr += (k ? ", " : "") + (*f.ocr)[k];
    }
    tmpl_ok += p.figure_type == f.figure_type && p.caption == f.caption && p.ocr == ocr && p.mention == f.mention;
  }
  for (const QARecord& q : synth_qa_corpus(kRoundTrips, 25, 914)) {
    const auto p = parse_qa_output(render(assemble_task_record(q)).target, q.choices.size());
    tmpl_ok += p.answer_index == q.answer_index && p.lecture == q.lecture && p.solution == q.solution;
  }
  return {corpus_ok == 2 * kRoundTrips && n_ckpt == kRoundTrips && tmpl_ok == 2 * kRoundTrips,
          "corpus " + std::to_string(corpus_ok) + "/" + std::to_string(2 * kRoundTrips) + ", checkpoint " +
              std::to_string(n_ckpt) + "/" + std::to_string(kRoundTrips) + ", template " + std::to_string(tmpl_ok) +
              "/" + std::to_string(2 * kRoundTrips)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "gradient correctness", gradient_correctness, kGradSeconds},
      {2, "align stage freezes encoder and decoder", freeze_invariant, kFreezeSeconds},
      {3, "overfit oracle on 32 figures", overfit_oracle, kOverfitSeconds},
      {4, "figure-type ordering: trained > centroid > chance", table1_ordering, kTableSeconds},
      {5, "QA strata schema and training-set accuracy", table3_schema, kTableSeconds},
      {6, "few-shot direction by lecture frequency", table5_direction, 0},
      {7, "BLEU and ROUGE-L against brute-force oracles", metric_oracles, 0},
      {8, "two identical runs are byte-identical", determinism, 0},
      {9, "corpus, checkpoint and template round trips", round_trips, 0},
  };
  std::set<int> chosen;
  for (int i = 1; i < argc; ++i) chosen.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const Criterion& c : all) {
    if (!chosen.empty() && !chosen.count(c.number)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0 && secs > c.budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", c.budget_seconds) + " s budget";
    }
    std::printf("%s criterion %d: %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.number, c.name.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}

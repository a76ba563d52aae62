#include "scitune/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "scitune/error.hpp"
#include "scitune/eval.hpp"
#include "scitune/generate.hpp"
#include "scitune/rng.hpp"
#include "scitune/tokenizer.hpp"
#include "scitune/trainer.hpp"

namespace scitune {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;
using json = nlohmann::json;

RunPaths::RunPaths(const fs::path& o) : out(o) {
  figures = out / "corpus" / "figures.jsonl";
  qa = out / "corpus" / "qa.jsonl";
  figure_split = out / "corpus" / "figures_split.json";
  qa_split = out / "corpus" / "qa_split.json";
  vocab = out / "vocab.txt";
  vocab_meta = out / "vocab.meta.json";
  align_ckpt = out / "align.ckpt";
  align_log = out / "align_loss.csv";
  task_ckpt = out / "task.ckpt";
  task_log = out / "task_loss.csv";
  figure_gen = out / "generations" / "figures.jsonl";
  qa_gen = out / "generations" / "qa.jsonl";
  figure_report = out / "reports" / "figures.json";
  figure_report_txt = out / "reports" / "figures.txt";
  figure_scores = out / "reports" / "figure_scores.jsonl";
  qa_report = out / "reports" / "qa.json";
  qa_report_txt = out / "reports" / "qa.txt";
  qa_scores = out / "reports" / "qa_scores.jsonl";
  report = out / "reports" / "report.json";
  report_txt = out / "reports" / "report.txt";
}

std::uint64_t derive_seed(const RunConfig& cfg, SeedStream s) {
  return Rng::derive(cfg.seed, static_cast<std::uint64_t>(s));
}

std::vector<InstructionRecord> figure_instructions(const std::vector<FigureRecord>& figs, std::uint64_t prompt_seed) {
  std::vector<InstructionRecord> out;
  out.reserve(figs.size());
  for (std::size_t i = 0; i < figs.size(); ++i) out.push_back(assemble_pretrain_record(figs[i], Rng::derive(prompt_seed, i)));
  return out;
}

std::vector<InstructionRecord> qa_instructions(const std::vector<QARecord>& qa) {
  std::vector<InstructionRecord> out;
  out.reserve(qa.size());
  for (const QARecord& q : qa) out.push_back(assemble_task_record(q));
  return out;
}

namespace {

template <class R>
std::vector<R> pick(const std::vector<R>& all, const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const R*> by_id;
  for (const R& r : all) by_id.emplace(r.id, &r);
  std::vector<R> out;
  out.reserve(ids.size());
  for (const std::string& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("split refers to unknown record '" + id + "'");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace

std::vector<FigureRecord> select_ids(const std::vector<FigureRecord>& all, const std::vector<std::string>& ids) {
  return pick(all, ids);
}

std::vector<QARecord> select_ids(const std::vector<QARecord>& all, const std::vector<std::string>& ids) {
  return pick(all, ids);
}

Pipeline::Pipeline(RunConfig config, std::string command_name)
    : cfg(std::move(config)), paths(cfg.out), hash(config_hash(cfg)), command(std::move(command_name)) {}

std::string Pipeline::meta_json() const {
  ordered_json j;
  j["command"] = command;
  j["config_hash"] = hash;
  j["seed"] = cfg.seed;
  return j.dump();
}

namespace {

void log(const Pipeline& p, const std::string& msg) { std::cerr << "scitune " << p.command << ": " << msg << "\n"; }

void require(const std::vector<fs::path>& inputs) {
  for (const fs::path& f : inputs) {
    if (!fs::exists(f)) throw Error("missing input " + f.string());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// JSONL lines after the "_meta" header.
std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  std::istringstream in(read_text(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("_meta")) continue;
    out.push_back(std::move(j));
  }
  return out;
}

std::string meta_line(const std::string& meta) {
  ordered_json j;
  j["_meta"] = ordered_json::parse(meta);
  return j.dump() + "\n";
}

std::string fmt_loss(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

ImageGeometry geometry(const RunConfig& c) { return c.model.image; }

void write_split(const Pipeline& p, const fs::path& path, const std::vector<std::string>& ids,
                 const std::array<double, 3>& fractions, std::uint64_t seed) {
  save_split(path, make_split(ids, fractions, seed), p.meta_json());
}

template <class R>
std::vector<std::string> ids_of(const std::vector<R>& recs) {
  std::vector<std::string> ids;
  for (const R& r : recs) ids.push_back(r.id);
  return ids;
}

struct Corpora {
  std::vector<FigureRecord> figures;
  std::vector<QARecord> qa;
  CorpusSplit figure_split;
  CorpusSplit qa_split;
};

Corpora load_corpora(const Pipeline& p) {
  Corpora c;
  c.figures = load_figure_corpus(p.paths.figures, geometry(p.cfg));
  c.qa = load_qa_corpus(p.paths.qa, geometry(p.cfg));
  c.figure_split = load_split(p.paths.figure_split);
  c.qa_split = load_split(p.paths.qa_split);
  return c;
}

std::vector<InstructionRecord> pick_instructions(const std::vector<InstructionRecord>& all,
                                                 const std::vector<std::string>& ids) {
  return pick(all, ids);
}

std::vector<fs::path> corpus_inputs(const RunPaths& p) { return {p.figures, p.qa, p.figure_split, p.qa_split}; }

// Writes the loss log and returns the trained checkpoint.
Checkpoint train_logged(const Pipeline& p, Checkpoint start, const std::vector<TrainExample>& data,
                        const TrainConfig& tc, const Vocab& vocab, const fs::path& log_path) {
  std::ostringstream csv;
  csv << "# " << p.meta_json() << "\n";
  csv << "step,stage,loss\n";
  auto on_step = [&](std::uint64_t step, Stage stage, double loss) {
    csv << step << "," << stage_name(stage) << "," << fmt_loss(loss) << "\n";
  };
  Checkpoint out = tc.stage == Stage::Align ? scitune::train_align(std::move(start), data, tc, vocab, on_step)
                                            : scitune::train_task(std::move(start), data, tc, vocab, on_step);
  write_text(log_path, csv.str());
  return out;
}

ordered_json parsed_json(const ParsedPretrainOutput& o) {
  ordered_json j;
  j["figure_type"] = o.figure_type ? ordered_json(std::string(display_name(*o.figure_type))) : ordered_json(nullptr);
  j["caption"] = o.caption ? ordered_json(*o.caption) : ordered_json(nullptr);
  j["ocr"] = o.ocr ? ordered_json(*o.ocr) : ordered_json(nullptr);
  j["mention"] = o.mention ? ordered_json(*o.mention) : ordered_json(nullptr);
  return j;
}

ordered_json parsed_json(const ParsedQaOutput& o) {
  ordered_json j;
  j["answer_index"] = o.answer_index ? ordered_json(*o.answer_index) : ordered_json(nullptr);
  j["lecture"] = o.lecture ? ordered_json(*o.lecture) : ordered_json(nullptr);
  j["solution"] = o.solution ? ordered_json(*o.solution) : ordered_json(nullptr);
  return j;
}

// id -> raw_text from a generations file.
std::vector<std::pair<std::string, std::string>> read_generations(const fs::path& path) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const json& j : read_jsonl(path)) {
    try {
      out.emplace_back(j.at("id").get<std::string>(), j.at("raw_text").get<std::string>());
    } catch (const json::exception& e) {
      throw Error("malformed generation record in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

ordered_json with_meta(const std::string& meta) {
  ordered_json j;
  j["_meta"] = ordered_json::parse(meta);
  return j;
}

}  // namespace

void Pipeline::synth(bool dry_run) {
  if (dry_run) return;
  FigureSynthOptions opts;
  opts.geometry = geometry(cfg);
  opts.ocr_fraction = cfg.data.ocr_fraction;
  opts.mention_fraction = cfg.data.mention_fraction;
  const auto figs = synth_figure_corpus(cfg.data.figures, derive_seed(cfg, SeedStream::Figures), opts);
  const auto qa = synth_qa_corpus(cfg.data.qa, cfg.data.qa_lectures, derive_seed(cfg, SeedStream::Qa), geometry(cfg));
  write_figure_corpus(paths.figures, figs, meta_json());
  write_qa_corpus(paths.qa, qa, meta_json());
  write_split(*this, paths.figure_split, ids_of(figs), cfg.data.figure_split, derive_seed(cfg, SeedStream::FigureSplit));
  write_split(*this, paths.qa_split, ids_of(qa), cfg.data.qa_split, derive_seed(cfg, SeedStream::QaSplit));
  log(*this, std::to_string(figs.size()) + " figures, " + std::to_string(qa.size()) + " questions -> " +
                 (paths.out / "corpus").string());
}

void Pipeline::ingest(bool dry_run) {
  if (!cfg.data.figure_jsonl && !cfg.data.qa_jsonl) throw Error("ingest needs data.figure_jsonl or data.qa_jsonl");
  std::vector<fs::path> inputs;
  if (cfg.data.figure_jsonl) inputs.push_back(*cfg.data.figure_jsonl);
  if (cfg.data.qa_jsonl) inputs.push_back(*cfg.data.qa_jsonl);
  require(inputs);
  if (dry_run) return;
  if (cfg.data.figure_jsonl) {
    const auto figs = load_figure_corpus(*cfg.data.figure_jsonl, geometry(cfg));
    write_figure_corpus(paths.figures, figs, meta_json());
    write_split(*this, paths.figure_split, ids_of(figs), cfg.data.figure_split,
                derive_seed(cfg, SeedStream::FigureSplit));
    log(*this, std::to_string(figs.size()) + " figures ingested");
  }
  if (cfg.data.qa_jsonl) {
    const auto qa = load_qa_corpus(*cfg.data.qa_jsonl, geometry(cfg));
    write_qa_corpus(paths.qa, qa, meta_json());
    write_split(*this, paths.qa_split, ids_of(qa), cfg.data.qa_split, derive_seed(cfg, SeedStream::QaSplit));
    log(*this, std::to_string(qa.size()) + " questions ingested");
  }
}

void Pipeline::build_vocab(bool dry_run) {
  require(corpus_inputs(paths));
  if (dry_run) return;
  const Corpora c = load_corpora(*this);
  std::vector<std::string> texts;
  // Template text is always in-vocabulary, whatever the split holds.
  texts.emplace_back(kSystemMessage);
  for (auto prompt : kDescribePrompts) texts.emplace_back(prompt);
  texts.emplace_back(kQaSuffix);
  for (auto s : {kOcrSentinel, kMentionSentinel, kLectureSentinel, kSolutionSentinel}) texts.emplace_back(s);
  for (std::size_t i = 0; i < kMaxChoices; ++i) texts.push_back(answer_sentence(static_cast<int>(i)));
  for (FigureType t : kFigureTypes) texts.emplace_back(display_name(t));

  const auto fig_inst = figure_instructions(c.figures, derive_seed(cfg, SeedStream::Prompts));
  for (const auto& rec : pick_instructions(fig_inst, c.figure_split.train)) {
    const RenderedText r = render(rec);
    texts.push_back(r.context);
    texts.push_back(r.target);
  }
  for (const auto& rec : qa_instructions(select_ids(c.qa, c.qa_split.train))) {
    const RenderedText r = render(rec);
    texts.push_back(r.context);
    texts.push_back(r.target);
  }
  const Vocab v = Vocab::build(texts, cfg.vocab_max_size);
  fs::create_directories(paths.out);
  v.save(paths.vocab);
  ordered_json meta = with_meta(meta_json());
  meta["vocab_hash"] = v.hash();
  meta["size"] = v.size();
  write_text(paths.vocab_meta, meta.dump(2) + "\n");
  log(*this, std::to_string(v.size()) + " tokens -> " + paths.vocab.string());
}

void Pipeline::train_align(bool dry_run) {
  auto inputs = corpus_inputs(paths);
  inputs.push_back(paths.vocab);
  require(inputs);
  if (dry_run) return;
  const Corpora c = load_corpora(*this);
  const Vocab vocab = Vocab::load(paths.vocab);
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  Checkpoint start = initial_checkpoint(Model(mc, derive_seed(cfg, SeedStream::Init)), vocab);
  start.meta_json = meta_json();

  const auto fig_inst = figure_instructions(c.figures, derive_seed(cfg, SeedStream::Prompts));
  const auto data = prepare_examples(pick_instructions(fig_inst, c.figure_split.train), vocab, mc, cfg.align.max_len);
  TrainConfig tc = cfg.align;
  tc.seed = derive_seed(cfg, SeedStream::Align);
  Checkpoint out = train_logged(*this, std::move(start), data, tc, vocab, paths.align_log);
  out.meta_json = meta_json();
  save_checkpoint(paths.align_ckpt, out);
  log(*this, std::to_string(out.step) + " steps, final loss " + (out.losses.empty() ? "-" : fmt_loss(out.losses.back())));
}

void Pipeline::train_task(bool dry_run) {
  auto inputs = corpus_inputs(paths);
  inputs.push_back(paths.vocab);
  inputs.push_back(paths.align_ckpt);
  require(inputs);
  if (dry_run) return;
  const Corpora c = load_corpora(*this);
  const Vocab vocab = Vocab::load(paths.vocab);
  Checkpoint start = load_checkpoint(paths.align_ckpt, &vocab);
  const ModelConfig mc = start.model.config();

  std::vector<InstructionRecord> records;
  if (cfg.task_include_figures) {
    const auto fig_inst = figure_instructions(c.figures, derive_seed(cfg, SeedStream::Prompts));
    records = pick_instructions(fig_inst, c.figure_split.train);
  }
  for (auto& rec : qa_instructions(select_ids(c.qa, c.qa_split.train))) records.push_back(std::move(rec));
  const auto data = prepare_examples(records, vocab, mc, cfg.task.max_len);
  TrainConfig tc = cfg.task;
  tc.seed = derive_seed(cfg, SeedStream::Task);
  Checkpoint out = train_logged(*this, std::move(start), data, tc, vocab, paths.task_log);
  out.meta_json = meta_json();
  save_checkpoint(paths.task_ckpt, out);
  log(*this, std::to_string(out.step) + " steps, final loss " + (out.losses.empty() ? "-" : fmt_loss(out.losses.back())));
}

void Pipeline::generate(bool dry_run) {
  auto inputs = corpus_inputs(paths);
  inputs.push_back(paths.vocab);
  inputs.push_back(paths.task_ckpt);
  require(inputs);
  if (dry_run) return;
  const Corpora c = load_corpora(*this);
  const Vocab vocab = Vocab::load(paths.vocab);
  const Checkpoint ckpt = load_checkpoint(paths.task_ckpt, &vocab);
  GenConfig gc = cfg.generate;
  gc.seed = derive_seed(cfg, SeedStream::Generate);

  const auto fig_inst = pick_instructions(figure_instructions(c.figures, derive_seed(cfg, SeedStream::Prompts)),
                                          c.figure_split.test);
  const auto test_qa = select_ids(c.qa, c.qa_split.test);
  const auto qa_inst = qa_instructions(test_qa);

  std::vector<std::string> fig_text(fig_inst.size()), qa_text(qa_inst.size());
  parallel_for(fig_inst.size(), [&](std::size_t i) { fig_text[i] = generate_text(ckpt.model, vocab, fig_inst[i], gc); });
  parallel_for(qa_inst.size(), [&](std::size_t i) { qa_text[i] = generate_text(ckpt.model, vocab, qa_inst[i], gc); });

  std::string fig_out = meta_line(meta_json());
  for (std::size_t i = 0; i < fig_inst.size(); ++i) {
    ordered_json j;
    j["id"] = fig_inst[i].id;
    j["raw_text"] = fig_text[i];
    j["parsed"] = parsed_json(parse_pretrain_output(fig_text[i]));
    fig_out += j.dump() + "\n";
  }
  std::string qa_out = meta_line(meta_json());
  for (std::size_t i = 0; i < qa_inst.size(); ++i) {
    ordered_json j;
    j["id"] = qa_inst[i].id;
    j["raw_text"] = qa_text[i];
    j["parsed"] = parsed_json(parse_qa_output(qa_text[i], test_qa[i].choices.size()));
    qa_out += j.dump() + "\n";
  }
  write_text(paths.figure_gen, fig_out);
  write_text(paths.qa_gen, qa_out);
  log(*this, std::to_string(fig_inst.size()) + " figure and " + std::to_string(qa_inst.size()) +
                 " question generations");
}

void Pipeline::eval_figures(bool dry_run) {
  auto inputs = corpus_inputs(paths);
  inputs.push_back(paths.figure_gen);
  inputs.push_back(paths.task_ckpt);
  require(inputs);
  if (dry_run) return;
  const Corpora c = load_corpora(*this);
  const auto gold = select_ids(c.figures, c.figure_split.test);
  const auto train = select_ids(c.figures, c.figure_split.train);
  std::vector<FigurePrediction> preds;
  for (const auto& [id, text] : read_generations(paths.figure_gen)) preds.push_back({id, parse_pretrain_output(text)});

  const FigureTypeReport trained = figure_type_eval(preds, gold);
  const CaptionReport captions = caption_eval(preds, gold);

  // The encoder is frozen in both stages, so any checkpoint carries the
  // same features.
  const Checkpoint ckpt = load_checkpoint(paths.task_ckpt);
  std::vector<std::pair<FigureType, std::vector<double>>> exemplars(train.size());
  std::vector<std::vector<double>> test_features(gold.size());
  parallel_for(train.size(), [&](std::size_t i) {
    exemplars[i] = {train[i].figure_type, encoder_features(ckpt.model, train[i].image)};
  });
  parallel_for(gold.size(), [&](std::size_t i) { test_features[i] = encoder_features(ckpt.model, gold[i].image); });
  const auto baseline_pred = centroid_baseline(exemplars, test_features);
  std::vector<std::optional<FigureType>> bp(baseline_pred.begin(), baseline_pred.end());
  std::vector<FigureType> gold_types;
  for (const auto& g : gold) gold_types.push_back(g.figure_type);
  const FigureTypeReport baseline = figure_type_eval(bp, gold_types);

  ordered_json report = with_meta(meta_json());
  report["figure_type"] = ordered_json::parse(to_json(trained));
  report["centroid_baseline"] = ordered_json::parse(to_json(baseline));
  report["caption"] = ordered_json::parse(to_json(captions));
  write_text(paths.figure_report, report.dump(2) + "\n");
  write_text(paths.figure_report_txt, "Figure type accuracy (%)\n" + figure_type_table(trained, baseline) +
                                          "\nCaption quality (first generated sentence)\n" + caption_table(captions));

  std::unordered_map<std::string, const ParsedPretrainOutput*> by_id;
  for (const auto& p : preds) by_id[p.id] = &p.parsed;
  std::string scores = meta_line(meta_json());
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const ParsedPretrainOutput& p = *by_id.at(gold[i].id);
    ordered_json j;
    j["id"] = gold[i].id;
    j["gold_type"] = std::string(display_name(gold[i].figure_type));
    j["pred_type"] = p.figure_type ? ordered_json(std::string(display_name(*p.figure_type))) : ordered_json(nullptr);
    j["baseline_type"] = std::string(display_name(baseline_pred[i]));
    j["caption_bleu"] = bleu(p.caption.value_or(""), gold[i].caption);
    j["caption_rouge_l"] = rouge_l(p.caption.value_or(""), gold[i].caption);
    scores += j.dump() + "\n";
  }
  write_text(paths.figure_scores, scores);
  log(*this, "trained " + fmt_loss(trained.rows.back().second.accuracy().value_or(0.0)) + ", centroid " +
                 fmt_loss(baseline.rows.back().second.accuracy().value_or(0.0)));
}

void Pipeline::eval_qa(bool dry_run) {
  auto inputs = corpus_inputs(paths);
  inputs.push_back(paths.qa_gen);
  require(inputs);
  if (dry_run) return;
  const Corpora c = load_corpora(*this);
  const auto gold = select_ids(c.qa, c.qa_split.test);
  const auto train = select_ids(c.qa, c.qa_split.train);
  std::unordered_map<std::string, std::size_t> n_choices;
  for (const auto& q : gold) n_choices[q.id] = q.choices.size();
  std::vector<QaPrediction> preds;
  for (const auto& [id, text] : read_generations(paths.qa_gen)) {
    auto it = n_choices.find(id);
    if (it == n_choices.end()) throw Error("prediction for unknown record '" + id + "'");
    preds.push_back({id, parse_qa_output(text, it->second)});
  }
  const QaReport qa = qa_eval(preds, gold);
  const CotReport cot = cot_eval(preds, gold);
  const auto fewshot = fewshot_eval(train, gold, qa.correct);

  ordered_json report = with_meta(meta_json());
  report["accuracy"] = ordered_json::parse(to_json(qa));
  report["lecture_solution"] = ordered_json::parse(to_json(cot));
  report["fewshot"] = ordered_json::parse(to_json(fewshot));
  write_text(paths.qa_report, report.dump(2) + "\n");
  write_text(paths.qa_report_txt, "Question answering accuracy (%)\n" + qa_table(qa) +
                                      "\nGenerated lectures and solutions\n" + cot_table(cot) +
                                      "\nAccuracy by training frequency of the lecture\n" + fewshot_table(fewshot));

  std::unordered_map<std::string, const ParsedQaOutput*> by_id;
  for (const auto& p : preds) by_id[p.id] = &p.parsed;
  std::string scores = meta_line(meta_json());
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const ParsedQaOutput& p = *by_id.at(gold[i].id);
    ordered_json j;
    j["id"] = gold[i].id;
    j["gold_index"] = gold[i].answer_index;
    j["pred_index"] = p.answer_index ? ordered_json(*p.answer_index) : ordered_json(nullptr);
    j["correct"] = static_cast<bool>(qa.correct[i]);
    j["lecture_bleu"] = gold[i].lecture ? ordered_json(bleu(p.lecture.value_or(""), *gold[i].lecture)) : ordered_json(nullptr);
    j["solution_bleu"] =
        gold[i].solution ? ordered_json(bleu(p.solution.value_or(""), *gold[i].solution)) : ordered_json(nullptr);
    scores += j.dump() + "\n";
  }
  write_text(paths.qa_scores, scores);
  log(*this, "accuracy " + fmt_loss(qa.rows.back().second.accuracy().value_or(0.0)));
}

void Pipeline::report(bool dry_run) {
  require({paths.figure_report, paths.qa_report, paths.figure_report_txt, paths.qa_report_txt});
  if (dry_run) return;
  ordered_json merged = with_meta(meta_json());
  merged["figures"] = ordered_json::parse(read_text(paths.figure_report));
  merged["qa"] = ordered_json::parse(read_text(paths.qa_report));
  merged["figures"].erase("_meta");
  merged["qa"].erase("_meta");
  write_text(paths.report, merged.dump(2) + "\n");
  write_text(paths.report_txt, "config " + hash + ", seed " + std::to_string(cfg.seed) + "\n\n" +
                                   read_text(paths.figure_report_txt) + "\n" + read_text(paths.qa_report_txt));
  log(*this, "wrote " + paths.report.string());
}

}  // namespace scitune

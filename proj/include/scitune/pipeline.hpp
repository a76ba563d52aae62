#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "scitune/config.hpp"
#include "scitune/corpus.hpp"
#include "scitune/instruction.hpp"

namespace scitune {

// Fixed layout of every artifact under the run's output directory.
struct RunPaths {
  explicit RunPaths(const std::filesystem::path& out);

  std::filesystem::path out;
  std::filesystem::path figures, qa, figure_split, qa_split;
  std::filesystem::path vocab, vocab_meta;
  std::filesystem::path align_ckpt, align_log, task_ckpt, task_log;
  std::filesystem::path figure_gen, qa_gen;
  std::filesystem::path figure_report, figure_report_txt, figure_scores;
  std::filesystem::path qa_report, qa_report_txt, qa_scores;
  std::filesystem::path report, report_txt;
};

// Sub-seed streams derived from the run seed.
enum class SeedStream : std::uint64_t { Figures = 1, Qa, FigureSplit, QaSplit, Init, Align, Task, Prompts, Generate };
std::uint64_t derive_seed(const RunConfig& cfg, SeedStream s);

// Prompt choice depends only on the run seed and the record's position in
// the corpus file.
std::vector<InstructionRecord> figure_instructions(const std::vector<FigureRecord>& figs, std::uint64_t prompt_seed);
std::vector<InstructionRecord> qa_instructions(const std::vector<QARecord>& qa);

// Records of `all` whose ids are listed, in list order.
std::vector<FigureRecord> select_ids(const std::vector<FigureRecord>& all, const std::vector<std::string>& ids);
std::vector<QARecord> select_ids(const std::vector<QARecord>& all, const std::vector<std::string>& ids);

// Each step checks its inputs first; with dry_run it stops there and
// writes nothing.
struct Pipeline {
  RunConfig cfg;
  RunPaths paths;
  std::string hash;
  std::string command;

  Pipeline(RunConfig config, std::string command_name);

  std::string meta_json() const;

  void synth(bool dry_run);
  void ingest(bool dry_run);
  void build_vocab(bool dry_run);
  void train_align(bool dry_run);
  void train_task(bool dry_run);
  void generate(bool dry_run);
  void eval_figures(bool dry_run);
  void eval_qa(bool dry_run);
  void report(bool dry_run);
};

}  // namespace scitune

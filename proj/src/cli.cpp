#include "scitune/cli.hpp"

#include <functional>
#include <iostream>
#include <optional>
#include <utility>

#include "CLI11.hpp"
#include "scitune/config.hpp"
#include "scitune/error.hpp"
#include "scitune/pipeline.hpp"

namespace scitune {

namespace {

using Step = void (Pipeline::*)(bool);

const std::vector<std::pair<std::string, std::pair<std::string, Step>>>& commands() {
  static const std::vector<std::pair<std::string, std::pair<std::string, Step>>> table = {
      {"synth", {"Generate the synthetic figure and QA corpora", &Pipeline::synth}},
      {"ingest", {"Import external figure/QA JSONL corpora", &Pipeline::ingest}},
      {"build-vocab", {"Build the vocabulary from the training split", &Pipeline::build_vocab}},
      {"train-align", {"Train the adapter on figure instructions", &Pipeline::train_align}},
      {"train-task", {"Fine-tune adapter and decoder on the task data", &Pipeline::train_task}},
      {"generate", {"Greedy generations for the test splits", &Pipeline::generate}},
      {"eval-figures", {"Figure type and caption scores", &Pipeline::eval_figures}},
      {"eval-qa", {"Question answering scores", &Pipeline::eval_qa}},
      {"report", {"Merge the reports", &Pipeline::report}},
  };
  return table;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale multimodal instruction tuning", "scitune"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool dry_run = false;
  app.add_option("--config", config_path, "TOML run config (defaults apply when omitted)");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--out", out_dir, "Override the output directory");
  app.add_flag("--dry-run", dry_run, "Validate the config and inputs, write nothing");

  std::vector<std::pair<CLI::App*, Step>> subs;
  for (const auto& [name, entry] : commands()) subs.emplace_back(app.add_subcommand(name, entry.first), entry.second);

  // CLI11 parses the vector back to front.
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    RunConfig cfg = config_path.empty() ? default_run_config() : load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    validate(cfg);
    for (const auto& [sub, step] : subs) {
      if (!sub->parsed()) continue;
      Pipeline p(cfg, sub->get_name());
      err << "scitune " << p.command << ": config " << p.hash << ", seed " << cfg.seed << ", out " << cfg.out.string()
          << (dry_run ? " (dry run)" : "") << "\n";
      (p.*step)(dry_run);
    }
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace scitune

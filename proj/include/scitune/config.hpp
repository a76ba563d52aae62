#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "scitune/corpus.hpp"
#include "scitune/generate.hpp"
#include "scitune/model.hpp"
#include "scitune/trainer.hpp"

namespace scitune {

// The TOML subset used by run configs: [table] headers, key = value pairs,
// basic and literal strings, integers, floats, booleans and single-line
// arrays of those. Keys are flattened to "table.key".
struct TomlValue {
  enum class Kind { Bool, Int, Float, String, Array };
  Kind kind = Kind::Int;
  bool b = false;
  std::int64_t i = 0;
  double f = 0.0;
  std::string s;
  std::vector<TomlValue> items;
  std::size_t line = 0;
};

std::map<std::string, TomlValue> parse_toml(std::string_view text);

struct DataConfig {
  // Synthetic corpus sizes (synth).
  std::size_t figures = 600;
  std::size_t qa = 200;
  std::size_t qa_lectures = 40;
  double ocr_fraction = 0.5;
  double mention_fraction = 0.5;
  // External corpora (ingest); relative paths resolve against the config file.
  std::optional<std::filesystem::path> figure_jsonl;
  std::optional<std::filesystem::path> qa_jsonl;
  std::array<double, 3> figure_split = {0.8, 0.0, 0.2};
  std::array<double, 3> qa_split = {0.8, 0.0, 0.2};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  DataConfig data;
  std::size_t vocab_max_size = 4000;
  ModelConfig model;  // vocab_size is filled from the vocabulary
  TrainConfig align;
  TrainConfig task;
  // Mix the figure instructions into the task stage as well.
  bool task_include_figures = true;
  GenConfig generate;
};

RunConfig default_run_config();
RunConfig parse_run_config(std::string_view toml_text, const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::filesystem::path& path);

// Effective configuration (after overrides) as canonical JSON, and its
// hash. The hash leaves out the output directory.
std::string run_config_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

// Throws scitune::Error on any inconsistent value.
void validate(const RunConfig& cfg);

}  // namespace scitune

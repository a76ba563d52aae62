#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "scitune/instruction.hpp"
#include "scitune/model.hpp"
#include "scitune/tokenizer.hpp"

namespace scitune {

enum class OptimizerKind { Sgd, Adam };

struct TrainConfig {
  Stage stage = Stage::Align;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 2e-3;
  std::size_t max_len = 256;
  std::uint64_t seed = 0;
  std::optional<double> clip;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  // Stop once the stage has taken this many steps in total (a resumable
  // partial run); the epoch schedule is unchanged.
  std::optional<std::uint64_t> max_steps;
  // Continue the checkpoint's run of this stage instead of starting one.
  // Neither this nor max_steps is part of the recorded config.
  bool resume = false;
};

void validate(const TrainConfig& cfg);
std::string to_json_string(const TrainConfig& cfg);

// One encoded record ready for forward_loss.
struct TrainExample {
  std::string id;
  TokenSequence seq;
  std::optional<Image> image;
};

std::vector<TrainExample> prepare_examples(const std::vector<InstructionRecord>& records, const Vocab& vocab,
                                           const ModelConfig& model_cfg, std::size_t max_len);

struct Checkpoint {
  Model model;
  std::string vocab_hash;
  std::string template_hash;
  std::string config_json;  // the TrainConfig (or "{}" before any training)
  Stage stage = Stage::Align;
  std::uint64_t step = 0;  // steps completed in `stage`
  std::vector<double> losses;  // per-step losses of `stage`
  std::uint64_t adam_steps = 0;
  std::vector<Tensor> adam_moments;
  std::string meta_json = "{}";  // run provenance (config hash, seed)
};

// Untrained checkpoint bound to `vocab` and the compiled-in template.
Checkpoint initial_checkpoint(Model model, const Vocab& vocab);

// Called once per optimizer step with the batch loss.
using LossCallback = std::function<void(std::uint64_t step, Stage stage, double loss)>;

// Stage-1 concept alignment: only the adapter moves.
Checkpoint train_align(Checkpoint start, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                       const Vocab& vocab, const LossCallback& on_step = {});
// Stage-2 instruction tuning: adapter and decoder move.
Checkpoint train_task(Checkpoint start, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                      const Vocab& vocab, const LossCallback& on_step = {});

// Mean over examples of the per-record masked mean loss.
double mean_loss(const Model& m, const std::vector<TrainExample>& data);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
std::string serialize_checkpoint(const Checkpoint& ckpt);
// With `vocab`, its hash must match the stored one. The template hash must
// always match the compiled-in template.
Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocab* vocab = nullptr);
Checkpoint parse_checkpoint(const std::string& bytes, const Vocab* vocab = nullptr);

// Worker count: SCITUNE_THREADS when set, else hardware concurrency.
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace scitune

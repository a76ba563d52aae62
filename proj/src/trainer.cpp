#include "scitune/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "scitune/error.hpp"
#include "scitune/rng.hpp"

namespace scitune {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'S', 'C', 'I', 'T', 'C', 'K', 'P', '1'};
constexpr int kFormat = 1;

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

ordered_json model_config_json(const ModelConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["d_v"] = c.d_v;
  j["d_m"] = c.d_m;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["ffn_mult"] = c.ffn_mult;
  j["max_len"] = c.max_len;
  j["patch"] = c.patch;
  j["image"] = {{"width", c.image.width}, {"height", c.image.height}, {"channels", c.image.channels}};
  j["encoder_attention"] = c.encoder_attention;
  j["ln_eps"] = c.ln_eps;
  return j;
}

ModelConfig model_config_from_json(const ordered_json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_v = j.at("d_v").get<std::size_t>();
  c.d_m = j.at("d_m").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.image.width = j.at("image").at("width").get<int>();
  c.image.height = j.at("image").at("height").get<int>();
  c.image.channels = j.at("image").at("channels").get<int>();
  c.encoder_attention = j.at("encoder_attention").get<bool>();
  c.ln_eps = j.at("ln_eps").get<double>();
  return c;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw Error("epochs must be positive");
  if (cfg.batch_size == 0) throw Error("batch_size must be positive");
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw Error("lr must be a finite value >= 0");
  if (cfg.max_len == 0) throw Error("max_len must be positive");
  if (cfg.clip && !(*cfg.clip > 0.0)) throw Error("clip must be positive");
}

std::string to_json_string(const TrainConfig& cfg) {
  ordered_json j;
  j["stage"] = std::string(stage_name(cfg.stage));
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["max_len"] = cfg.max_len;
  j["seed"] = cfg.seed;
  j["clip"] = cfg.clip ? ordered_json(*cfg.clip) : ordered_json(nullptr);
  j["optimizer"] = optimizer_name(cfg.optimizer);
  return j.dump();
}

std::vector<TrainExample> prepare_examples(const std::vector<InstructionRecord>& records, const Vocab& vocab,
                                           const ModelConfig& model_cfg, std::size_t max_len) {
  if (max_len > model_cfg.max_len) {
    throw Error("max_len " + std::to_string(max_len) + " exceeds the model's " + std::to_string(model_cfg.max_len));
  }
  std::vector<TrainExample> out;
  out.reserve(records.size());
  for (const InstructionRecord& rec : records) {
    const RenderedText text = render(rec);
    TrainExample ex{rec.id, encode(vocab, text.context, text.target, model_cfg.k_visual(), max_len), rec.image};
    if (ex.seq.visual_span.has_value() != ex.image.has_value()) {
      throw Error("record '" + rec.id + "': image marker and image attachment disagree");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

Checkpoint initial_checkpoint(Model model, const Vocab& vocab) {
  if (model.config().vocab_size != vocab.size()) {
    throw Error("model vocab_size " + std::to_string(model.config().vocab_size) + " does not match vocabulary of " +
                std::to_string(vocab.size()));
  }
  Checkpoint c;
  c.model = std::move(model);
  c.vocab_hash = vocab.hash();
  c.template_hash = template_hash();
  c.config_json = "{}";
  return c;
}

std::size_t worker_count() {
  if (const char* env = std::getenv("SCITUNE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v <= 0) throw Error("SCITUNE_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run);
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

double mean_loss(const Model& m, const std::vector<TrainExample>& data) {
  if (data.empty()) throw Error("mean_loss over an empty set");
  std::vector<double> losses(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    losses[i] = loss_value(m, data[i].seq, data[i].image ? &*data[i].image : nullptr);
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return s / static_cast<double>(data.size());
}

namespace {

void check_hashes(const Checkpoint& c, const Vocab& vocab) {
  if (c.vocab_hash != vocab.hash()) throw Error("checkpoint incompatible: vocabulary hash mismatch");
  if (c.template_hash != template_hash()) throw Error("checkpoint incompatible: template hash mismatch");
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(Rng::derive(seed, epoch));
  rng.shuffle(order);
  return order;
}

Checkpoint run_stage(Checkpoint ckpt, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                     const Vocab& vocab, const LossCallback& on_step) {
  validate(cfg);
  check_hashes(ckpt, vocab);
  if (data.empty()) throw Error("training corpus is empty");
  for (const TrainExample& ex : data) {
    if (ex.seq.ids.size() > ckpt.model.config().max_len) {
      throw Error("record '" + ex.id + "' is longer than the model's max_len");
    }
  }

  const std::string config_json = to_json_string(cfg);
  if (!cfg.resume) {
    ckpt.stage = cfg.stage;
    ckpt.step = 0;
    ckpt.losses.clear();
    ckpt.adam_steps = 0;
    ckpt.adam_moments.clear();
  } else if (ckpt.stage != cfg.stage || ckpt.config_json != config_json) {
    throw Error("cannot resume: stage or training config differs from the checkpoint's");
  }
  ckpt.config_json = config_json;

  Model& model = ckpt.model;
  model.set_stage(cfg.stage);
  std::vector<Tensor*> trainable = model.trainable_tensors();
  Adam adam;
  adam.restore(ckpt.adam_steps, std::move(ckpt.adam_moments));

  const std::size_t n = data.size();
  const std::uint64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::uint64_t total = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps) total = std::min(total, *cfg.max_steps);

  std::vector<std::size_t> order;
  std::uint64_t order_epoch = UINT64_MAX;
  for (std::uint64_t step = ckpt.step; step < total; ++step) {
    const std::uint64_t epoch = step / steps_per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(n, cfg.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t begin = static_cast<std::size_t>(step % steps_per_epoch) * cfg.batch_size;
    const std::size_t count = std::min(cfg.batch_size, n - begin);

    std::vector<double> losses(count);
    std::vector<std::vector<std::vector<double>>> grads(count, std::vector<std::vector<double>>(trainable.size()));
    try {
      parallel_for(count, [&](std::size_t i) {
        const TrainExample& ex = data[order[begin + i]];
        Graph g(true);
        Var loss = forward_loss(g, model, ex.seq, ex.image ? &*ex.image : nullptr);
        g.backward(loss);
        g.accumulate_param_grads(trainable, grads[i]);
        losses[i] = g.value(loss).item();
      });
    } catch (const NumericError& e) {
      throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what());
    }

    const double w = 1.0 / static_cast<double>(count);
    double batch_loss = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      batch_loss += losses[i];
      for (std::size_t k = 0; k < trainable.size(); ++k) {
        if (grads[i][k].empty()) continue;
        auto& dst = trainable[k]->grad();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += w * grads[i][k][j];
      }
    }
    batch_loss *= w;
    if (!std::isfinite(batch_loss)) throw NumericError("training aborted at step " + std::to_string(step) + ": non-finite loss");

    if (cfg.lr > 0.0) {
      if (cfg.optimizer == OptimizerKind::Adam) {
        adam.step(trainable, cfg.lr, cfg.clip);
      } else {
        sgd_step(trainable, cfg.lr, cfg.clip);
      }
    } else {
      for (Tensor* t : trainable) t->clear_grad();
    }

    ckpt.losses.push_back(batch_loss);
    ckpt.step = step + 1;
    if (on_step) on_step(step, cfg.stage, batch_loss);
  }

  for (Tensor* t : model.all_tensors()) t->clear_grad();
  ckpt.adam_steps = adam.steps();
  ckpt.adam_moments = std::move(adam.moments());
  return ckpt;
}

}  // namespace

Checkpoint train_align(Checkpoint start, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                       const Vocab& vocab, const LossCallback& on_step) {
  if (cfg.stage != Stage::Align) throw Error("train_align requires stage = align");
  return run_stage(std::move(start), data, cfg, vocab, on_step);
}

Checkpoint train_task(Checkpoint start, const std::vector<TrainExample>& data, const TrainConfig& cfg,
                      const Vocab& vocab, const LossCallback& on_step) {
  if (cfg.stage != Stage::Task) throw Error("train_task requires stage = task");
  return run_stage(std::move(start), data, cfg, vocab, on_step);
}

// ---------------------------------------------------------------------------
// Checkpoint files

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Model& model = const_cast<Model&>(ckpt.model);
  ordered_json header;
  header["format"] = kFormat;
  header["meta"] = ordered_json::parse(ckpt.meta_json);
  header["model"] = model_config_json(model.config());
  header["vocab_hash"] = ckpt.vocab_hash;
  header["template_hash"] = ckpt.template_hash;
  header["config"] = ordered_json::parse(ckpt.config_json);
  header["stage"] = std::string(stage_name(ckpt.stage));
  header["step"] = ckpt.step;
  header["losses"] = ckpt.losses;
  ordered_json tensors = ordered_json::array();
  for (const NamedTensor& nt : model.named_tensors()) {
    tensors.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}});
  }
  header["tensors"] = tensors;
  header["adam"] = {{"steps", ckpt.adam_steps}, {"moments", ckpt.adam_moments.size()}};
  const std::string head = header.dump();

  std::ostringstream out(std::ios::binary);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = head.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const NamedTensor& nt : model.named_tensors()) write_snapshot(out, *nt.tensor);
  for (const Tensor& t : ckpt.adam_moments) write_snapshot(out, t);
  return std::move(out).str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint parse_checkpoint(const std::string& bytes, const Vocab* vocab) {
  auto corrupt = [](std::uint64_t offset, const std::string& why) {
    return Error("corrupt checkpoint at offset " + std::to_string(offset) + ": " + why);
  };
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw corrupt(0, "bad magic bytes");
  }
  std::uint64_t offset = sizeof(kMagic);
  std::uint64_t len = 0;
  if (bytes.size() < offset + sizeof(len)) throw corrupt(offset, "truncated header length");
  std::memcpy(&len, bytes.data() + offset, sizeof(len));
  offset += sizeof(len);
  if (len > bytes.size() - offset) throw corrupt(offset - sizeof(len), "header length exceeds file size");

  Checkpoint c;
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(offset + len));
  } catch (const ordered_json::exception& e) {
    throw corrupt(offset, std::string("header is not valid JSON: ") + e.what());
  }
  const std::uint64_t header_offset = offset;
  offset += len;

  std::vector<std::pair<std::string, Shape>> declared;
  std::size_t n_moments = 0;
  try {
    if (header.at("format").get<int>() != kFormat) throw corrupt(header_offset, "unsupported format version");
    ModelConfig mc = model_config_from_json(header.at("model"));
    validate(mc);
    c.model = Model(mc, 0);
    c.meta_json = header.at("meta").dump();
    c.vocab_hash = header.at("vocab_hash").get<std::string>();
    c.template_hash = header.at("template_hash").get<std::string>();
    c.config_json = header.at("config").dump();
    const std::string stage = header.at("stage").get<std::string>();
    if (stage != "align" && stage != "task") throw corrupt(header_offset, "unknown stage '" + stage + "'");
    c.stage = stage == "align" ? Stage::Align : Stage::Task;
    c.step = header.at("step").get<std::uint64_t>();
    c.losses = header.at("losses").get<std::vector<double>>();
    for (const auto& t : header.at("tensors")) {
      declared.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
    }
    c.adam_steps = header.at("adam").at("steps").get<std::uint64_t>();
    n_moments = header.at("adam").at("moments").get<std::size_t>();
  } catch (const ordered_json::exception& e) {
    throw corrupt(header_offset, std::string("malformed header: ") + e.what());
  }

  if (c.template_hash != template_hash()) throw Error("checkpoint incompatible: template hash mismatch");
  if (vocab && c.vocab_hash != vocab->hash()) throw Error("checkpoint incompatible: vocabulary hash mismatch");

  std::vector<NamedTensor> named = c.model.named_tensors();
  if (declared.size() != named.size()) throw corrupt(header_offset, "tensor list does not match the model config");
  // Optimizer moments pair up with the stage's trainable tensors.
  c.model.set_stage(c.stage);
  const std::vector<Tensor*> trainable = c.model.trainable_tensors();
  if (n_moments != 0 && n_moments != 2 * trainable.size()) throw corrupt(header_offset, "bad optimizer moment count");

  std::istringstream in(bytes, std::ios::binary);
  in.seekg(static_cast<std::streamoff>(offset));
  auto read_snapshot = [&](std::istringstream& s, std::uint64_t& off) {
    const std::uint64_t at = off;
    try {
      return scitune::read_snapshot(s, off);
    } catch (const Error& e) {
      throw corrupt(at, e.what());
    }
  };
  for (std::size_t i = 0; i < named.size(); ++i) {
    const std::uint64_t at = offset;
    Tensor t = read_snapshot(in, offset);
    if (declared[i].first != named[i].name) throw corrupt(header_offset, "unexpected tensor '" + declared[i].first + "'");
    if (t.shape() != named[i].tensor->shape() || t.shape() != declared[i].second) {
      throw corrupt(at, "tensor '" + named[i].name + "' has shape " + shape_string(t.shape()) + ", expected " +
                            shape_string(named[i].tensor->shape()));
    }
    *named[i].tensor = std::move(t);
  }
  for (std::size_t i = 0; i < n_moments; ++i) {
    const std::uint64_t at = offset;
    Tensor t = read_snapshot(in, offset);
    if (t.shape() != trainable[i / 2]->shape()) throw corrupt(at, "optimizer moment shape mismatch");
    c.adam_moments.push_back(std::move(t));
  }
  if (offset != bytes.size()) throw corrupt(offset, "unexpected trailing bytes");
  return c;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocab* vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str(), vocab);
}

}  // namespace scitune

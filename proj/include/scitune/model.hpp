#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scitune/corpus.hpp"
#include "scitune/image.hpp"
#include "scitune/tensor.hpp"
#include "scitune/tokenizer.hpp"

namespace scitune {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_v = 48;
  std::size_t d_m = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_mult = 4;
  std::size_t max_len = 256;
  std::size_t patch = 8;
  ImageGeometry image;
  bool encoder_attention = false;
  double ln_eps = 1e-5;

  std::size_t k_visual() const { return (image.height / patch) * (image.width / patch); }
  std::size_t patch_dim() const { return patch * patch * image.channels; }

  bool operator==(const ModelConfig& o) const;
};

// Throws scitune::Error on inconsistent dimensions.
void validate(const ModelConfig& cfg);

struct EncoderParams {
  Tensor patch_proj;  // [patch_dim x d_v]
  Tensor patch_bias;  // [d_v]
  // Single-head self-attention block with residual, used when enabled.
  Tensor attn_qkv;  // [d_v x 3 d_v]
  Tensor attn_out;  // [d_v x d_v]
};

struct AdapterParams {
  Tensor w;  // [d_v x d_m]
  Tensor b;  // [d_m]
};

struct DecoderBlock {
  Tensor ln1_g, ln1_b;
  Tensor w_qkv, b_qkv;  // [d x 3d], [3d]
  Tensor w_o, b_o;      // [d x d], [d]
  Tensor ln2_g, ln2_b;
  Tensor w_ff1, b_ff1;  // [d x ffn], [ffn]
  Tensor w_ff2, b_ff2;  // [ffn x d], [d]
};

struct DecoderParams {
  Tensor tok_emb;  // [vocab x d], also the output projection
  Tensor pos_emb;  // [max_len x d]
  std::vector<DecoderBlock> blocks;
  Tensor lnf_g, lnf_b;
};

enum class Stage { Align, Task };

std::string_view stage_name(Stage s);

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

class Model {
 public:
  Model() = default;
  // Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains.
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  EncoderParams encoder;
  AdapterParams adapter;
  DecoderParams decoder;

  // Every tensor in checkpoint order.
  std::vector<NamedTensor> named_tensors();
  std::vector<Tensor*> encoder_tensors();
  std::vector<Tensor*> adapter_tensors();
  std::vector<Tensor*> decoder_tensors();
  std::vector<Tensor*> all_tensors();

  // Align: adapter only. Task: adapter and decoder. The encoder never trains.
  void set_stage(Stage s);
  std::vector<Tensor*> trainable_tensors();

 private:
  ModelConfig cfg_;
};

// SHA-256 over the raw values of the given tensors, in order.
std::string tensors_hash(std::span<Tensor* const> tensors);

// Patch features [k x d_v]; patches in row-major grid order.
Var encode_image(Graph& g, const Model& m, const Image& img);
// Visual tokens [k x d_m] = f W + b.
Var project(Graph& g, const Model& m, Var features);

// Final-norm hidden states [T x d_m]. With `img`, rows of `span` are
// replaced by the projected visual tokens.
Var decoder_hidden(Graph& g, const Model& m, std::span<const TokenId> ids, const Image* img,
                   const std::optional<VisualSpan>& span);

// Mean next-token cross entropy over positions whose successor is in the
// loss mask.
Var forward_loss(Graph& g, const Model& m, const TokenSequence& seq, const Image* img);
double loss_value(const Model& m, const TokenSequence& seq, const Image* img);

// Logits for every position [T x vocab], in no-grad mode.
Tensor forward_logits_all(const Model& m, std::span<const TokenId> ids, const Image* img);
// Logits predicting the token after `prefix`. The visual span is the run of
// IMG ids in the prefix.
std::vector<double> forward_logits(const Model& m, std::span<const TokenId> prefix, const Image* img);

// First maximal run of IMG ids, if any.
std::optional<VisualSpan> find_visual_span(std::span<const TokenId> ids);

}  // namespace scitune

#include "scitune/model.hpp"

#include <cmath>

#include "scitune/error.hpp"
#include "scitune/hash.hpp"
#include "scitune/rng.hpp"

namespace scitune {

bool ModelConfig::operator==(const ModelConfig& o) const {
  return vocab_size == o.vocab_size && d_v == o.d_v && d_m == o.d_m && n_layers == o.n_layers &&
         n_heads == o.n_heads && ffn_mult == o.ffn_mult && max_len == o.max_len && patch == o.patch &&
         image.width == o.image.width && image.height == o.image.height && image.channels == o.image.channels &&
         encoder_attention == o.encoder_attention && ln_eps == o.ln_eps;
}

void validate(const ModelConfig& cfg) {
  if (cfg.vocab_size <= static_cast<std::size_t>(kNumSpecial)) throw Error("model vocab_size must exceed the special tokens");
  if (cfg.d_v == 0 || cfg.d_m == 0 || cfg.n_layers == 0 || cfg.n_heads == 0 || cfg.ffn_mult == 0) {
    throw Error("model dimensions must be positive");
  }
  if (cfg.d_m % cfg.n_heads != 0) throw Error("d_m must be divisible by n_heads");
  if (cfg.patch == 0) throw Error("patch size must be positive");
  if (cfg.image.width <= 0 || cfg.image.height <= 0 || cfg.image.channels <= 0) throw Error("image geometry must be positive");
  if (cfg.image.width % static_cast<int>(cfg.patch) != 0 || cfg.image.height % static_cast<int>(cfg.patch) != 0) {
    throw Error("image dimensions " + std::to_string(cfg.image.width) + "x" + std::to_string(cfg.image.height) +
                " are not divisible by patch size " + std::to_string(cfg.patch));
  }
  if (cfg.max_len <= cfg.k_visual() + 2) throw Error("max_len too small for the visual tokens");
  if (!(cfg.ln_eps > 0.0)) throw Error("ln_eps must be positive");
}

std::string_view stage_name(Stage s) { return s == Stage::Align ? "align" : "task"; }

namespace {

Tensor weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return Tensor::uniform({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg);
  Rng rng(seed);
  const std::size_t d = cfg.d_m, dv = cfg.d_v, ffn = cfg.ffn_mult * cfg.d_m;

  encoder.patch_proj = weight(cfg.patch_dim(), dv, rng);
  encoder.patch_bias = Tensor({dv});
  if (cfg.encoder_attention) {
    encoder.attn_qkv = weight(dv, 3 * dv, rng);
    encoder.attn_out = weight(dv, dv, rng);
  }

  adapter.w = weight(dv, d, rng);
  adapter.b = Tensor({d});

  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(d));
  decoder.tok_emb = Tensor::uniform({cfg.vocab_size, d}, emb_bound, rng);
  decoder.pos_emb = Tensor::uniform({cfg.max_len, d}, emb_bound, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    DecoderBlock b;
    b.ln1_g = Tensor({d}, 1.0);
    b.ln1_b = Tensor({d});
    b.w_qkv = weight(d, 3 * d, rng);
    b.b_qkv = Tensor({3 * d});
    b.w_o = weight(d, d, rng);
    b.b_o = Tensor({d});
    b.ln2_g = Tensor({d}, 1.0);
    b.ln2_b = Tensor({d});
    b.w_ff1 = weight(d, ffn, rng);
    b.b_ff1 = Tensor({ffn});
    b.w_ff2 = weight(ffn, d, rng);
    b.b_ff2 = Tensor({d});
    decoder.blocks.push_back(std::move(b));
  }
  decoder.lnf_g = Tensor({d}, 1.0);
  decoder.lnf_b = Tensor({d});
}

std::vector<NamedTensor> Model::named_tensors() {
  std::vector<NamedTensor> out;
  out.push_back({"encoder.patch_proj", &encoder.patch_proj});
  out.push_back({"encoder.patch_bias", &encoder.patch_bias});
  if (cfg_.encoder_attention) {
    out.push_back({"encoder.attn_qkv", &encoder.attn_qkv});
    out.push_back({"encoder.attn_out", &encoder.attn_out});
  }
  out.push_back({"adapter.w", &adapter.w});
  out.push_back({"adapter.b", &adapter.b});
  out.push_back({"decoder.tok_emb", &decoder.tok_emb});
  out.push_back({"decoder.pos_emb", &decoder.pos_emb});
  for (std::size_t l = 0; l < decoder.blocks.size(); ++l) {
    DecoderBlock& b = decoder.blocks[l];
    const std::string p = "decoder.block" + std::to_string(l) + ".";
    out.push_back({p + "ln1_g", &b.ln1_g});
    out.push_back({p + "ln1_b", &b.ln1_b});
    out.push_back({p + "w_qkv", &b.w_qkv});
    out.push_back({p + "b_qkv", &b.b_qkv});
    out.push_back({p + "w_o", &b.w_o});
    out.push_back({p + "b_o", &b.b_o});
    out.push_back({p + "ln2_g", &b.ln2_g});
    out.push_back({p + "ln2_b", &b.ln2_b});
    out.push_back({p + "w_ff1", &b.w_ff1});
    out.push_back({p + "b_ff1", &b.b_ff1});
    out.push_back({p + "w_ff2", &b.w_ff2});
    out.push_back({p + "b_ff2", &b.b_ff2});
  }
  out.push_back({"decoder.lnf_g", &decoder.lnf_g});
  out.push_back({"decoder.lnf_b", &decoder.lnf_b});
  return out;
}

namespace {

std::vector<Tensor*> with_prefix(Model& m, std::string_view prefix) {
  std::vector<Tensor*> out;
  for (auto& nt : m.named_tensors()) {
    if (nt.name.starts_with(prefix)) out.push_back(nt.tensor);
  }
  return out;
}

}  // namespace

std::vector<Tensor*> Model::encoder_tensors() { return with_prefix(*this, "encoder."); }
std::vector<Tensor*> Model::adapter_tensors() { return with_prefix(*this, "adapter."); }
std::vector<Tensor*> Model::decoder_tensors() { return with_prefix(*this, "decoder."); }

std::vector<Tensor*> Model::all_tensors() {
  std::vector<Tensor*> out;
  for (auto& nt : named_tensors()) out.push_back(nt.tensor);
  return out;
}

void Model::set_stage(Stage s) {
  for (Tensor* t : encoder_tensors()) t->set_requires_grad(false);
  for (Tensor* t : adapter_tensors()) t->set_requires_grad(true);
  for (Tensor* t : decoder_tensors()) t->set_requires_grad(s == Stage::Task);
}

std::vector<Tensor*> Model::trainable_tensors() {
  std::vector<Tensor*> out;
  for (Tensor* t : all_tensors()) {
    if (t->requires_grad()) out.push_back(t);
  }
  return out;
}

std::string tensors_hash(std::span<Tensor* const> tensors) {
  std::vector<double> all;
  for (const Tensor* t : tensors) all.insert(all.end(), t->data().begin(), t->data().end());
  return sha256_hex(std::span<const double>(all));
}

Var encode_image(Graph& g, const Model& m, const Image& img) {
  const ModelConfig& cfg = m.config();
  const int p = static_cast<int>(cfg.patch);
  if (img.width % p != 0 || img.height % p != 0) {
    throw Error("image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                " is not divisible by patch size " + std::to_string(p));
  }
  if (img.channels != cfg.image.channels) {
    throw Error("image has " + std::to_string(img.channels) + " channels, model expects " +
                std::to_string(cfg.image.channels));
  }
  const int gx = img.width / p, gy = img.height / p;
  const std::size_t pd = static_cast<std::size_t>(p) * p * img.channels;
  if (pd != cfg.patch_dim()) throw Error("patch dimension mismatch");
  Tensor patches({static_cast<std::size_t>(gx) * gy, pd});
  std::size_t i = 0;
  for (int py = 0; py < gy; ++py) {
    for (int px = 0; px < gx; ++px) {
      for (int y = 0; y < p; ++y) {
        for (int x = 0; x < p; ++x) {
          for (int c = 0; c < img.channels; ++c) patches[i++] = img.at(px * p + x, py * p + y, c);
        }
      }
    }
  }
  Var f = g.add(g.matmul(g.constant(std::move(patches)), g.param(m.encoder.patch_proj)), g.param(m.encoder.patch_bias));
  if (cfg.encoder_attention) {
    const std::size_t dv = cfg.d_v;
    Var qkv = g.matmul(f, g.param(m.encoder.attn_qkv));
    Var q = g.slice_cols(qkv, 0, dv), k = g.slice_cols(qkv, dv, dv), v = g.slice_cols(qkv, 2 * dv, dv);
    Var att = g.softmax(g.scale(g.matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dv))));
    f = g.add(f, g.matmul(g.matmul(att, v), g.param(m.encoder.attn_out)));
  }
  return f;
}

Var project(Graph& g, const Model& m, Var features) {
  if (g.shape(features).size() != 2 || g.shape(features)[1] != m.config().d_v) {
    throw Error("project: features " + shape_string(g.shape(features)) + " do not have " +
                std::to_string(m.config().d_v) + " columns");
  }
  return g.add(g.matmul(features, g.param(m.adapter.w)), g.param(m.adapter.b));
}

namespace {

Var attention(Graph& g, const ModelConfig& cfg, const DecoderBlock& b, Var x) {
  const std::size_t d = cfg.d_m, dh = d / cfg.n_heads;
  Var qkv = g.add(g.matmul(x, g.param(b.w_qkv)), g.param(b.b_qkv));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    Var q = g.slice_cols(qkv, h * dh, dh);
    Var k = g.slice_cols(qkv, d + h * dh, dh);
    Var v = g.slice_cols(qkv, 2 * d + h * dh, dh);
    Var p = g.causal_softmax(g.scale(g.matmul(q, k, true), scale));
    heads.push_back(g.matmul(p, v));
  }
  Var cat = heads.size() == 1 ? heads[0] : g.concat_cols(heads);
  return g.add(g.matmul(cat, g.param(b.w_o)), g.param(b.b_o));
}

}  // namespace

Var decoder_hidden(Graph& g, const Model& m, std::span<const TokenId> ids, const Image* img,
                   const std::optional<VisualSpan>& span) {
  const ModelConfig& cfg = m.config();
  const std::size_t n = ids.size();
  if (n == 0) throw Error("empty token sequence");
  if (n > cfg.max_len) {
    throw Error("sequence of " + std::to_string(n) + " tokens exceeds max_len " + std::to_string(cfg.max_len));
  }
  if (span.has_value() != (img != nullptr)) {
    throw Error(img ? "image given for a sequence without a visual span" : "visual span present but no image given");
  }
  Var x = g.embedding(g.param(m.decoder.tok_emb), ids);
  if (img) {
    if (span->length != cfg.k_visual() || span->start + span->length > n) {
      throw Error("visual span [" + std::to_string(span->start) + ", +" + std::to_string(span->length) +
                  ") does not fit " + std::to_string(cfg.k_visual()) + " visual tokens in a sequence of " +
                  std::to_string(n));
    }
    Var vis = project(g, m, encode_image(g, m, *img));
    std::vector<Var> parts;
    if (span->start > 0) parts.push_back(g.slice_rows(x, 0, span->start));
    parts.push_back(vis);
    const std::size_t end = span->start + span->length;
    if (end < n) parts.push_back(g.slice_rows(x, end, n - end));
    x = g.concat_rows(parts);
  }
  x = g.add(x, g.slice_rows(g.param(m.decoder.pos_emb), 0, n));
  for (const DecoderBlock& b : m.decoder.blocks) {
    x = g.add(x, attention(g, cfg, b, g.layer_norm(x, g.param(b.ln1_g), g.param(b.ln1_b), cfg.ln_eps)));
    Var h = g.layer_norm(x, g.param(b.ln2_g), g.param(b.ln2_b), cfg.ln_eps);
    h = g.gelu(g.add(g.matmul(h, g.param(b.w_ff1)), g.param(b.b_ff1)));
    x = g.add(x, g.add(g.matmul(h, g.param(b.w_ff2)), g.param(b.b_ff2)));
  }
  return g.layer_norm(x, g.param(m.decoder.lnf_g), g.param(m.decoder.lnf_b), cfg.ln_eps);
}

Var forward_loss(Graph& g, const Model& m, const TokenSequence& seq, const Image* img) {
  const std::size_t n = seq.ids.size();
  if (seq.loss_mask.size() != n) throw Error("loss mask length does not match the token sequence");
  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  for (std::size_t t = 0; t + 1 < n; ++t) {
    if (seq.loss_mask[t + 1]) {
      rows.push_back(t);
      targets.push_back(seq.ids[t + 1]);
    }
  }
  if (rows.empty()) throw Error("token sequence has no loss positions");
  Var h = decoder_hidden(g, m, seq.ids, img, seq.visual_span);
  Var logits = g.matmul(g.gather_rows(h, rows), g.param(m.decoder.tok_emb), true);
  return g.cross_entropy(logits, targets, std::vector<bool>(rows.size(), true));
}

double loss_value(const Model& m, const TokenSequence& seq, const Image* img) {
  Graph g(false);
  return g.value(forward_loss(g, m, seq, img)).item();
}

std::optional<VisualSpan> find_visual_span(std::span<const TokenId> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != kImg) continue;
    std::size_t j = i;
    while (j < ids.size() && ids[j] == kImg) ++j;
    return VisualSpan{i, j - i};
  }
  return std::nullopt;
}

Tensor forward_logits_all(const Model& m, std::span<const TokenId> ids, const Image* img) {
  Graph g(false);
  Var h = decoder_hidden(g, m, ids, img, img ? find_visual_span(ids) : std::nullopt);
  return g.value(g.matmul(h, g.param(m.decoder.tok_emb), true));
}

std::vector<double> forward_logits(const Model& m, std::span<const TokenId> prefix, const Image* img) {
  if (prefix.empty()) throw Error("forward_logits: empty prefix");
  Graph g(false);
  Var h = decoder_hidden(g, m, prefix, img, img ? find_visual_span(prefix) : std::nullopt);
  const std::size_t last = prefix.size() - 1;
  Var logits = g.matmul(g.slice_rows(h, last, 1), g.param(m.decoder.tok_emb), true);
  const auto& v = g.value(logits).data();
  return {v.begin(), v.end()};
}

}  // namespace scitune

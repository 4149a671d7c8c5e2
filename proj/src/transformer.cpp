#include "cvslt/transformer.hpp"

#include <cmath>

namespace cvslt {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (d_model == 0 || n_heads == 0) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_model % 2 != 0) fail("d_model must be even for sinusoidal positions");
  if (d_ff == 0 || d_feature == 0 || d_z == 0) fail("d_ff, d_feature and d_z must be positive");
  if (vocab_size <= static_cast<std::size_t>(kFirstContentId)) fail("vocab_size must exceed the special ids");
  if (n_enc_layers == 0 || n_dec_layers == 0) fail("encoder and decoder need at least one layer");
  if (lambda_sd < 0.0) fail("lambda_sd must be >= 0");
  if (anneal_steps < 0) fail("anneal_steps must be >= 0");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) fail("label_smoothing must lie in [0,1)");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0,1)");
}

Linear make_linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                   std::mt19937_64& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = store.uniform(prefix + ".weight", {in, out}, bound, rng);
  if (with_bias) l.bias = store.uniform(prefix + ".bias", {out}, bound, rng);
  return l;
}

AttentionParams make_attention(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                               std::mt19937_64& rng) {
  return {make_linear(store, prefix + ".wq", d_model, d_model, rng),
          make_linear(store, prefix + ".wk", d_model, d_model, rng),
          make_linear(store, prefix + ".wv", d_model, d_model, rng),
          make_linear(store, prefix + ".wo", d_model, d_model, rng)};
}

namespace {

LayerNorm make_norm(ParameterStore& store, const std::string& prefix, std::size_t d) {
  return {store.constant(prefix + ".gamma", {d}, 1.0), store.constant(prefix + ".beta", {d}, 0.0)};
}

Tensor norm(const LayerNorm& n, const Tensor& x) { return layer_norm(x, n.gamma, n.beta); }

Tensor feed_forward(const Linear& in, const Linear& out, const Tensor& x, const ForwardContext& ctx) {
  return apply(out, ctx.maybe_dropout(relu(apply(in, x))));
}

Tensor modality_row(const TransformerParams& p, Modality m) {
  const auto i = static_cast<std::size_t>(m);
  return reshape(slice(p.modality_embedding, 0, i, i + 1), {p.modality_embedding.dim(1)});
}

void require_rows(std::span<const std::uint8_t> mask, std::size_t batch, std::size_t length,
                  const char* what) {
  if (batch == 0 || length == 0) throw ContractError(std::string("empty ") + what);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < length && !any; ++t) any = mask[b * length + t] != 0;
    if (!any) throw ContractError(std::string("empty ") + what + " in batch row " + std::to_string(b));
  }
}

Tensor embed_vision(const TransformerParams& p, const ModelConfig& cfg, const PaddedFeatures& x,
                    const ForwardContext& ctx) {
  if (x.width != cfg.d_feature) {
    throw DimensionError("feature width " + std::to_string(x.width) + " does not match d_feature " +
                         std::to_string(cfg.d_feature));
  }
  require_rows(x.mask, x.batch, x.length, "feature sequence");
  Tensor frames({x.batch, x.length, x.width}, x.values);
  Tensor h = apply(p.feature_proj, frames);
  h = add(h, sinusoidal_positions(x.length, cfg.d_model));
  h = add(h, modality_row(p, Modality::kVision));
  return ctx.maybe_dropout(h);
}

Tensor embed_tokens(const TransformerParams& p, const ModelConfig& cfg, const PaddedTokens& y) {
  Tensor e = embedding(p.token_embedding, y.ids, {y.batch, y.length});
  e = scale(e, std::sqrt(static_cast<double>(cfg.d_model)));
  return add(e, sinusoidal_positions(y.length, cfg.d_model));
}

Tensor encoder_stack(const TransformerParams& p, const ModelConfig& cfg, Tensor h, const AttentionMask& mask,
                     const ForwardContext& ctx, std::vector<Tensor>* layers) {
  for (const auto& layer : p.encoder) {
    Tensor n1 = norm(layer.norm1, h);
    h = add(h, ctx.maybe_dropout(multi_head_attention(layer.self_attn, n1, n1, mask, cfg.n_heads)));
    h = add(h, ctx.maybe_dropout(feed_forward(layer.ff_in, layer.ff_out, norm(layer.norm2, h), ctx)));
    if (layers) layers->push_back(h);
  }
  h = norm(p.encoder_norm, h);
  if (layers) layers->back() = h;
  return h;
}

}  // namespace

TransformerParams make_transformer(ParameterStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  TransformerParams p;
  p.feature_proj = make_linear(store, "embed.feature_proj", cfg.d_feature, d, rng);
  p.token_embedding = store.normal("embed.tokens", {cfg.vocab_size, d}, emb_std, rng);
  p.modality_embedding = store.normal("embed.modality", {2, d}, emb_std, rng);
  for (std::size_t i = 0; i < cfg.n_enc_layers; ++i) {
    const std::string pre = "encoder.layer" + std::to_string(i);
    EncoderLayerParams l;
    l.norm1 = make_norm(store, pre + ".norm1", d);
    l.self_attn = make_attention(store, pre + ".self_attn", d, rng);
    l.norm2 = make_norm(store, pre + ".norm2", d);
    l.ff_in = make_linear(store, pre + ".ff.in", d, cfg.d_ff, rng);
    l.ff_out = make_linear(store, pre + ".ff.out", cfg.d_ff, d, rng);
    p.encoder.push_back(std::move(l));
  }
  p.encoder_norm = make_norm(store, "encoder.norm", d);
  for (std::size_t i = 0; i < cfg.n_dec_layers; ++i) {
    const std::string pre = "decoder.layer" + std::to_string(i);
    DecoderLayerParams l;
    l.norm1 = make_norm(store, pre + ".norm1", d);
    l.self_attn = make_attention(store, pre + ".self_attn", d, rng);
    l.norm2 = make_norm(store, pre + ".norm2", d);
    l.cross_attn = make_attention(store, pre + ".cross_attn", d, rng);
    l.norm3 = make_norm(store, pre + ".norm3", d);
    l.ff_in = make_linear(store, pre + ".ff.in", d, cfg.d_ff, rng);
    l.ff_out = make_linear(store, pre + ".ff.out", cfg.d_ff, d, rng);
    p.decoder.push_back(std::move(l));
  }
  p.decoder_norm = make_norm(store, "decoder.norm", d);
  p.output = make_linear(store, "decoder.output", d, cfg.vocab_size, rng);
  return p;
}

Tensor apply(const Linear& layer, const Tensor& x) { return linear(x, layer.weight, layer.bias); }

Tensor ForwardContext::maybe_dropout(const Tensor& x) const {
  if (!train || rng == nullptr || dropout <= 0.0) return x;
  return cvslt::dropout(x, dropout, *rng);
}

Tensor sinusoidal_positions(std::size_t length, std::size_t d_model) {
  if (length == 0) throw ContractError("sinusoidal_positions needs length >= 1");
  if (d_model % 2 != 0) throw ContractError("sinusoidal_positions needs an even width");
  std::vector<double> v(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      const double angle = static_cast<double>(pos) * freq;
      v[pos * d_model + i] = std::sin(angle);
      v[pos * d_model + i + 1] = std::cos(angle);
    }
  }
  return Tensor({length, d_model}, std::move(v));
}

Tensor multi_head_attention(const AttentionParams& params, const Tensor& query, const Tensor& keys_values,
                            const AttentionMask& mask, std::size_t n_heads) {
  if (query.rank() != 3 || keys_values.rank() != 3 || query.dim(0) != keys_values.dim(0) ||
      query.dim(2) != keys_values.dim(2)) {
    throw DimensionError("attention inputs " + shape_str(query.shape()) + " / " +
                         shape_str(keys_values.shape()) + " are incompatible");
  }
  const std::size_t B = query.dim(0), Tq = query.dim(1), Tk = keys_values.dim(1), d = query.dim(2);
  if (mask.batch != B || mask.queries != Tq || mask.keys != Tk) {
    throw DimensionError("attention mask [" + std::to_string(mask.batch) + "," +
                         std::to_string(mask.queries) + "," + std::to_string(mask.keys) +
                         "] does not match scores [" + std::to_string(B) + "," + std::to_string(Tq) +
                         "," + std::to_string(Tk) + "]");
  }
  if (n_heads == 0 || d % n_heads != 0) throw ConfigError("width not divisible by head count");
  const std::size_t dh = d / n_heads;
  auto heads = [&](const Tensor& t, std::size_t T) {
    return permute(reshape(t, {B, T, n_heads, dh}), {0, 2, 1, 3});
  };
  Tensor q = heads(apply(params.query, query), Tq);
  Tensor k = heads(apply(params.key, keys_values), Tk);
  Tensor v = heads(apply(params.value, keys_values), Tk);
  Tensor scores = scale(matmul(q, k, Transpose::kRight), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = masked_softmax(scores, mask);
  Tensor ctx = matmul(attn, v);  // [B, H, Tq, dh]
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, Tq, d});
  return apply(params.output, ctx);
}

EncoderOutputs encode_prior(const TransformerParams& params, const ModelConfig& config,
                            const PaddedFeatures& x, const ForwardContext& ctx,
                            const EncodeOptions& options) {
  Tensor h = embed_vision(params, config, x, ctx);
  auto mask = AttentionMask::key_padding(x.mask, x.batch, x.length, x.length);
  EncoderOutputs out;
  out.batch = x.batch;
  out.vision_length = x.length;
  out.vision_mask = x.mask;
  out.h_p_vision = encoder_stack(params, config, h, mask, ctx, options.keep_layers ? &out.layers : nullptr);
  return out;
}

EncoderOutputs encode_posterior(const TransformerParams& params, const ModelConfig& config,
                                const PaddedFeatures& x, const PaddedTokens& y, const ForwardContext& ctx,
                                const EncodeOptions& options) {
  if (x.batch != y.batch) {
    throw DimensionError("feature batch " + std::to_string(x.batch) + " vs token batch " +
                         std::to_string(y.batch));
  }
  require_rows(y.mask, y.batch, y.length, "token sequence");
  Tensor hv = embed_vision(params, config, x, ctx);
  Tensor ht = ctx.maybe_dropout(add(embed_tokens(params, config, y), modality_row(params, Modality::kText)));
  Tensor h = concat(hv, ht, 1);
  const std::size_t B = x.batch, Tx = x.length, Ty = y.length, T = Tx + Ty;
  std::vector<std::uint8_t> keys(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(x.mask.begin() + static_cast<std::ptrdiff_t>(b * Tx), Tx, keys.begin() + static_cast<std::ptrdiff_t>(b * T));
    std::copy_n(y.mask.begin() + static_cast<std::ptrdiff_t>(b * Ty), Ty, keys.begin() + static_cast<std::ptrdiff_t>(b * T + Tx));
  }
  auto mask = AttentionMask::key_padding(keys, B, T, T);
  if (options.block_cross_modal) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t q = 0; q < T; ++q)
        for (std::size_t k = 0; k < T; ++k)
          if ((q < Tx) != (k < Tx)) mask.keep[(b * T + q) * T + k] = 0;
  }
  EncoderOutputs out;
  out.batch = B;
  out.vision_length = Tx;
  out.text_length = Ty;
  out.vision_mask = x.mask;
  out.text_mask = y.mask;
  Tensor enc = encoder_stack(params, config, h, mask, ctx, options.keep_layers ? &out.layers : nullptr);
  out.h_q_vision = slice(enc, 1, 0, Tx);
  out.h_q_text = slice(enc, 1, Tx, T);
  return out;
}

DecoderDistribution decode(const TransformerParams& params, const ModelConfig& config, const Tensor& memory,
                           std::span<const std::uint8_t> memory_mask, const PaddedTokens& y_in,
                           const ForwardContext& ctx, PathTag path) {
  if (!memory.defined() || memory.rank() != 3 || memory.dim(1) == 0) {
    throw ContractError("decoder memory must be a non-empty [B, T, d] array");
  }
  if (memory.dim(0) != y_in.batch) {
    throw DimensionError("memory batch " + std::to_string(memory.dim(0)) + " vs decoder input batch " +
                         std::to_string(y_in.batch));
  }
  require_rows(memory_mask, memory.dim(0), memory.dim(1), "decoder memory");
  require_rows(y_in.mask, y_in.batch, y_in.length, "decoder input");
  const std::size_t B = y_in.batch, T = y_in.length, Tm = memory.dim(1);
  auto self_mask = AttentionMask::causal(y_in.mask, B, T);
  auto cross_mask = AttentionMask::key_padding(memory_mask, B, T, Tm);
  Tensor h = ctx.maybe_dropout(embed_tokens(params, config, y_in));
  for (const auto& layer : params.decoder) {
    Tensor n1 = norm(layer.norm1, h);
    h = add(h, ctx.maybe_dropout(multi_head_attention(layer.self_attn, n1, n1, self_mask, config.n_heads)));
    h = add(h, ctx.maybe_dropout(
                   multi_head_attention(layer.cross_attn, norm(layer.norm2, h), memory, cross_mask, config.n_heads)));
    h = add(h, ctx.maybe_dropout(feed_forward(layer.ff_in, layer.ff_out, norm(layer.norm3, h), ctx)));
  }
  h = norm(params.decoder_norm, h);
  return {apply(params.output, h), y_in.mask, path};
}

}  // namespace cvslt

#pragma once

// Pre-norm transformer encoder-decoder shared by the prior and posterior
// paths. The prior path encodes the frames alone; the posterior path encodes
// the concatenation [frames ; target tokens] with per-modality positions and a
// learned modality embedding, then splits the result back by position.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cvslt/autodiff.hpp"
#include "cvslt/sequence.hpp"

namespace cvslt {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 256;
  std::size_t d_feature = 32;
  std::size_t vocab_size = 64;
  std::size_t d_z = 64;
  double lambda_sd = 3.0;
  long anneal_steps = 4000;
  double label_smoothing = 0.0;
  double dropout = 0.1;

  /// Throws ConfigError on the first violated invariant.
  void validate() const;
};

enum class PathTag { kPrior, kPosterior };

enum class Modality : std::size_t { kVision = 0, kText = 1 };

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out], may be undefined
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;
};

struct AttentionParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
};

struct EncoderLayerParams {
  LayerNorm norm1;
  AttentionParams self_attn;
  LayerNorm norm2;
  Linear ff_in;
  Linear ff_out;
};

struct DecoderLayerParams {
  LayerNorm norm1;
  AttentionParams self_attn;
  LayerNorm norm2;
  AttentionParams cross_attn;
  LayerNorm norm3;
  Linear ff_in;
  Linear ff_out;
};

struct TransformerParams {
  Linear feature_proj;
  Tensor token_embedding;     // [V, d_model]
  Tensor modality_embedding;  // [2, d_model]
  std::vector<EncoderLayerParams> encoder;
  LayerNorm encoder_norm;
  std::vector<DecoderLayerParams> decoder;
  LayerNorm decoder_norm;
  Linear output;
};

// Weight init: uniform(+-1/sqrt(d_in)) for linear maps, N(0, d_model^-1/2)
// for embeddings, identity for layer norms.
Linear make_linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                   std::mt19937_64& rng, bool with_bias = true);
AttentionParams make_attention(ParameterStore& store, const std::string& prefix, std::size_t d_model,
                               std::mt19937_64& rng);
TransformerParams make_transformer(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng);

Tensor apply(const Linear& layer, const Tensor& x);

/// Dropout is active only when `train` is set and an RNG is supplied.
struct ForwardContext {
  bool train = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  Tensor maybe_dropout(const Tensor& x) const;
};

/// [T, d_model] with sin on even and cos on odd dimensions, base 10000.
Tensor sinusoidal_positions(std::size_t length, std::size_t d_model);

/// query: [B, Tq, d], keys_values: [B, Tk, d]. Output projection included.
Tensor multi_head_attention(const AttentionParams& params, const Tensor& query, const Tensor& keys_values,
                            const AttentionMask& mask, std::size_t n_heads);

struct EncoderOutputs {
  std::size_t batch = 0;
  std::size_t vision_length = 0;
  std::size_t text_length = 0;
  Tensor h_p_vision;  // prior path, [B, Tx, d]
  Tensor h_q_vision;  // posterior path, [B, Tx, d]
  Tensor h_q_text;    // posterior path, [B, Ty, d]
  std::vector<std::uint8_t> vision_mask;
  std::vector<std::uint8_t> text_mask;
  // Per-layer outputs (last entry after the final norm) when requested.
  std::vector<Tensor> layers;
};

struct EncodeOptions {
  bool keep_layers = false;
  // Diagnostic: forbid attention between the two modalities of [x;y].
  bool block_cross_modal = false;
};

EncoderOutputs encode_prior(const TransformerParams& params, const ModelConfig& config,
                            const PaddedFeatures& x, const ForwardContext& ctx = {},
                            const EncodeOptions& options = {});
EncoderOutputs encode_posterior(const TransformerParams& params, const ModelConfig& config,
                                const PaddedFeatures& x, const PaddedTokens& y,
                                const ForwardContext& ctx = {}, const EncodeOptions& options = {});

struct DecoderDistribution {
  Tensor logits;  // [B, T, V]
  std::vector<std::uint8_t> mask;
  PathTag path = PathTag::kPrior;

  Tensor probs() const { return softmax(logits, -1); }
};

/// memory: [B, Tm, d] with mask [B, Tm]; y_in is the BOS-shifted target.
DecoderDistribution decode(const TransformerParams& params, const ModelConfig& config, const Tensor& memory,
                           std::span<const std::uint8_t> memory_mask, const PaddedTokens& y_in,
                           const ForwardContext& ctx = {}, PathTag path = PathTag::kPrior);

}  // namespace cvslt

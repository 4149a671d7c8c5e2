#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvslt/autodiff.hpp"
#include "cvslt/gaussian_latent.hpp"
#include "cvslt/transformer.hpp"

namespace cvslt {

/// Component switches for the ablation variants. Defaults give the full model.
struct Variant {
  bool aep = true;                // prior-path reconstruction loss
  bool self_distillation = true;  // posterior -> prior decoder KL
  bool residual_posterior = true; // ARGD residual posterior (else absolute)
  bool shared_attention = true;   // one attention parameter set for both paths

  std::string name() const;
  bool operator==(const Variant&) const = default;
};

/// Encoder, latent network and shared decoder under one parameter store.
class CvSltModel {
 public:
  CvSltModel(const ModelConfig& config, const Variant& variant, std::uint64_t seed);
  CvSltModel(const CvSltModel&) = delete;
  CvSltModel& operator=(const CvSltModel&) = delete;
  CvSltModel(CvSltModel&&) = default;
  CvSltModel& operator=(CvSltModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const Variant& variant() const { return variant_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const TransformerParams& transformer() const { return transformer_; }
  const GaussianNetParams& gaussian() const { return gaussian_; }

 private:
  ModelConfig config_;
  Variant variant_;
  ParameterStore store_;
  TransformerParams transformer_;
  GaussianNetParams gaussian_;
};

/// Everything one path produces before decoding.
struct LatentState {
  EncoderOutputs encoded;
  Tensor attended;  // shared-attention output
  GaussianParams latent;
  LatentSample sample;
  Tensor memory;  // fused decoder memory
  std::vector<std::uint8_t> memory_mask;
};

/// Prior path: Encoder(x) -> self-attention -> f -> z -> fused memory.
LatentState prior_state(const CvSltModel& model, const PaddedFeatures& x, const std::optional<Tensor>& noise,
                        const ForwardContext& ctx = {}, const EncodeOptions& options = {});

/// Posterior path: Encoder([x;y]) -> cross-attention -> g (relative to `prior`) -> z -> fused memory.
LatentState posterior_state(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y,
                            const GaussianParams& prior, const std::optional<Tensor>& noise,
                            const ForwardContext& ctx = {}, const EncodeOptions& options = {});

/// Teacher-forced decoder distribution over the targets `y` from a path's memory.
DecoderDistribution decode_targets(const CvSltModel& model, const LatentState& state, const PaddedTokens& y,
                                   PathTag path, const ForwardContext& ctx = {});

/// Sorted parameter names reachable from `output`.
std::vector<std::string> parameter_names_used(const CvSltModel& model, const Tensor& output);

}  // namespace cvslt

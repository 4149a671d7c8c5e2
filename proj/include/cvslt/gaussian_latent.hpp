#pragma once

// Attention Residual Gaussian latent network.
//
// One attention layer (no FFN, residual or norm) maps both paths into a
// shared space: self-attention over the prior-path frames, and cross-attention
// from posterior-path frames onto posterior-path text. A linear map f gives the
// prior N(mu, sigma^2); a separate linear map g gives residual offsets so that
// the posterior is N(mu + dmu, sigma^2 * dsigma^2).

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "cvslt/autodiff.hpp"
#include "cvslt/transformer.hpp"

namespace cvslt {

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

struct GaussianNetParams {
  AttentionParams prior_attention;
  // Holds the same tensors as prior_attention unless attention sharing is off.
  AttentionParams posterior_attention;
  Linear prior_net;      // f: d_model -> 2 d_z
  Linear posterior_net;  // g: d_model -> 2 d_z
  Linear fuse;           // d_z -> d_model, no bias
};

GaussianNetParams make_gaussian_net(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng,
                                    bool shared_attention = true);

struct GaussianParams {
  PathTag path = PathTag::kPrior;
  Tensor mu;       // [B, T, d_z]
  Tensor log_var;  // clamped to [kLogVarMin, kLogVarMax]
  // Residual posterior only. An absolute posterior stores its own mu/log_var
  // and leaves these undefined.
  Tensor delta_mu;
  Tensor delta_log_var;
  std::vector<std::uint8_t> mask;  // [B*T] position mask

  bool residual() const { return delta_mu.defined(); }
  Tensor mean() const;
  Tensor log_variance() const;
};

struct LatentSample {
  Tensor z;
  std::optional<Tensor> epsilon;  // nullopt: deterministic mean
};

/// Single attention layer with one parameter set; no residual or norm.
Tensor shared_attention(const AttentionParams& params, const Tensor& query, const Tensor& keys_values,
                        std::span<const std::uint8_t> kv_mask, std::size_t n_heads);

GaussianParams prior_params(const Tensor& h, const Linear& f, std::span<const std::uint8_t> mask);

/// Throws DimensionError when `h` and `prior` disagree in batch or length.
GaussianParams posterior_residual_params(const Tensor& h, const GaussianParams& prior, const Linear& g);

/// Independent absolute posterior (ablation without residual parameterization).
GaussianParams posterior_absolute_params(const Tensor& h, const Linear& g, std::span<const std::uint8_t> mask);

/// z = mean + exp(log_variance / 2) * epsilon; epsilon is never differentiated.
LatentSample reparameterize(const GaussianParams& params, const std::optional<Tensor>& epsilon);

/// 0.5 (dmu^2 / sigma^2 + dsigma^2 - log dsigma^2 - 1), summed over d_z and
/// averaged over unmasked positions. Requires a residual posterior.
Tensor residual_kl(const GaussianParams& posterior);

/// Textbook KL(N(q) || N(p)) for diagonal Gaussians, same reduction.
Tensor gaussian_kl(const GaussianParams& q, const GaussianParams& p);

/// residual_kl for residual posteriors, gaussian_kl otherwise.
Tensor latent_kl(const GaussianParams& posterior, const GaussianParams& prior);

/// memory + z W_fuse, position-wise.
Tensor fuse_latent(const Tensor& memory, const LatentSample& sample, const Linear& fuse);

/// Standard normal noise [batch, length, d_z].
Tensor standard_normal(std::size_t batch, std::size_t length, std::size_t d_z, std::mt19937_64& rng);

}  // namespace cvslt

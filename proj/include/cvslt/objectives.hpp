#pragma once

// Training objective: posterior-path ELBO (reconstruction + annealed latent
// KL), prior-path reconstruction, and decoder-level self-distillation from the
// posterior (teacher) to the prior (student).

#include <optional>

#include "cvslt/model.hpp"

namespace cvslt {

struct LossBreakdown {
  Tensor recon_posterior;
  Tensor kl_latent;
  Tensor recon_prior;
  Tensor sd_kl;
  Tensor total;
  double kl_weight = 0.0;
  // Effective term weights; ablations set them to zero.
  double aep_weight = 1.0;
  double sd_weight = 0.0;

  /// recon_posterior + kl_weight*kl_latent + aep_weight*recon_prior + sd_weight*sd_kl
  double recomposed() const;
};

struct CvaeTerms {
  Tensor recon_posterior;
  Tensor kl_latent;
};

/// Linear ramp min(1, step / anneal_steps); anneal_steps == 0 gives 1.
double anneal_weight(long step, long anneal_steps);

CvaeTerms cvae_loss(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y,
                    const std::optional<Tensor>& noise, const ForwardContext& ctx = {});

/// Reconstruction through the prior path with z drawn from the prior.
Tensor aep_loss(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y,
                const std::optional<Tensor>& noise, const ForwardContext& ctx = {});

/// Per-step KL(posterior || prior) over unmasked steps; posterior is detached.
Tensor sd_loss(const DecoderDistribution& posterior, const DecoderDistribution& prior);

LossBreakdown total_loss(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y, long step,
                         const std::optional<Tensor>& noise, const ForwardContext& ctx = {});

}  // namespace cvslt

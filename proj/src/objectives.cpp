#include "cvslt/objectives.hpp"

#include <algorithm>

namespace cvslt {

double LossBreakdown::recomposed() const {
  return recon_posterior.item() + kl_weight * kl_latent.item() + aep_weight * recon_prior.item() +
         sd_weight * sd_kl.item();
}

double anneal_weight(long step, long anneal_steps) {
  if (step < 0) throw ContractError("anneal_weight needs step >= 0");
  if (anneal_steps <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(anneal_steps));
}

CvaeTerms cvae_loss(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y,
                    const std::optional<Tensor>& noise, const ForwardContext& ctx) {
  auto prior = prior_state(model, x, noise, ctx);
  auto post = posterior_state(model, x, y, prior.latent, noise, ctx);
  auto dist = decode_targets(model, post, y, PathTag::kPosterior, ctx);
  return {cross_entropy_logits(dist.logits, y.ids, model.config().label_smoothing, y.mask),
          latent_kl(post.latent, prior.latent)};
}

Tensor aep_loss(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y,
                const std::optional<Tensor>& noise, const ForwardContext& ctx) {
  auto prior = prior_state(model, x, noise, ctx);
  auto dist = decode_targets(model, prior, y, PathTag::kPrior, ctx);
  return cross_entropy_logits(dist.logits, y.ids, model.config().label_smoothing, y.mask);
}

Tensor sd_loss(const DecoderDistribution& posterior, const DecoderDistribution& prior) {
  if (posterior.path != PathTag::kPosterior || prior.path != PathTag::kPrior) {
    throw ContractError("sd_loss expects (posterior, prior) distributions");
  }
  if (posterior.mask != prior.mask) throw DimensionError("sd_loss: step masks differ");
  return kl_categorical(posterior.logits, prior.logits, prior.mask);
}

LossBreakdown total_loss(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y, long step,
                         const std::optional<Tensor>& noise, const ForwardContext& ctx) {
  const auto& cfg = model.config();
  const auto& variant = model.variant();
  // One noise draw serves both paths.
  auto prior = prior_state(model, x, noise, ctx);
  auto post = posterior_state(model, x, y, prior.latent, noise, ctx);
  auto post_dist = decode_targets(model, post, y, PathTag::kPosterior, ctx);
  auto prior_dist = decode_targets(model, prior, y, PathTag::kPrior, ctx);

  LossBreakdown out;
  out.recon_posterior = cross_entropy_logits(post_dist.logits, y.ids, cfg.label_smoothing, y.mask);
  out.kl_latent = latent_kl(post.latent, prior.latent);
  out.recon_prior = cross_entropy_logits(prior_dist.logits, y.ids, cfg.label_smoothing, y.mask);
  out.sd_kl = sd_loss(post_dist, prior_dist);
  out.kl_weight = anneal_weight(step, cfg.anneal_steps);
  out.aep_weight = variant.aep ? 1.0 : 0.0;
  out.sd_weight = variant.self_distillation ? cfg.lambda_sd : 0.0;

  Tensor total = add(out.recon_posterior, scale(out.kl_latent, out.kl_weight));
  if (out.aep_weight != 0.0) total = add(total, out.recon_prior);
  if (out.sd_weight != 0.0) total = add(total, scale(out.sd_kl, out.sd_weight));
  out.total = total;
  return out;
}

}  // namespace cvslt

#include "cvslt/gaussian_latent.hpp"

namespace cvslt {

GaussianNetParams make_gaussian_net(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng,
                                    bool shared_attention) {
  GaussianNetParams p;
  p.prior_attention = make_attention(store, "gaussian.attn", config.d_model, rng);
  p.posterior_attention = shared_attention
                              ? p.prior_attention
                              : make_attention(store, "gaussian.posterior_attn", config.d_model, rng);
  p.prior_net = make_linear(store, "gaussian.prior_net", config.d_model, 2 * config.d_z, rng);
  p.posterior_net = make_linear(store, "gaussian.posterior_net", config.d_model, 2 * config.d_z, rng);
  p.fuse = make_linear(store, "gaussian.fuse", config.d_z, config.d_model, rng, false);
  return p;
}

Tensor GaussianParams::mean() const { return residual() ? add(mu, delta_mu) : mu; }

Tensor GaussianParams::log_variance() const { return residual() ? add(log_var, delta_log_var) : log_var; }

Tensor shared_attention(const AttentionParams& params, const Tensor& query, const Tensor& keys_values,
                        std::span<const std::uint8_t> kv_mask, std::size_t n_heads) {
  if (query.rank() != 3 || keys_values.rank() != 3) {
    throw DimensionError("shared_attention expects [B, T, d] inputs");
  }
  auto mask = AttentionMask::key_padding(kv_mask, query.dim(0), query.dim(1), keys_values.dim(1));
  return multi_head_attention(params, query, keys_values, mask, n_heads);
}

namespace {

std::pair<Tensor, Tensor> split_halves(const Tensor& both) {
  const std::size_t dz = both.dim(-1) / 2;
  return {slice(both, -1, 0, dz), clamp(slice(both, -1, dz, 2 * dz), kLogVarMin, kLogVarMax)};
}

void check_mask(const Tensor& h, std::span<const std::uint8_t> mask) {
  if (h.rank() != 3 || mask.size() != h.dim(0) * h.dim(1)) {
    throw DimensionError("latent input " + shape_str(h.shape()) + " with " + std::to_string(mask.size()) +
                         " mask entries");
  }
}

}  // namespace

GaussianParams prior_params(const Tensor& h, const Linear& f, std::span<const std::uint8_t> mask) {
  check_mask(h, mask);
  auto [mu, log_var] = split_halves(apply(f, h));
  return {PathTag::kPrior, mu, log_var, {}, {}, {mask.begin(), mask.end()}};
}

GaussianParams posterior_residual_params(const Tensor& h, const GaussianParams& prior, const Linear& g) {
  if (prior.path != PathTag::kPrior) throw ContractError("residual posterior needs a prior-tagged base");
  if (h.rank() != 3 || h.dim(0) != prior.mu.dim(0) || h.dim(1) != prior.mu.dim(1)) {
    throw DimensionError("posterior input " + shape_str(h.shape()) + " does not match prior " +
                         shape_str(prior.mu.shape()));
  }
  auto [delta_mu, delta_log_var] = split_halves(apply(g, h));
  return {PathTag::kPosterior, prior.mu, prior.log_var, delta_mu, delta_log_var, prior.mask};
}

GaussianParams posterior_absolute_params(const Tensor& h, const Linear& g, std::span<const std::uint8_t> mask) {
  check_mask(h, mask);
  auto [mu, log_var] = split_halves(apply(g, h));
  return {PathTag::kPosterior, mu, log_var, {}, {}, {mask.begin(), mask.end()}};
}

LatentSample reparameterize(const GaussianParams& params, const std::optional<Tensor>& epsilon) {
  Tensor mean = params.mean();
  if (!epsilon) return {mean, std::nullopt};
  if (epsilon->shape() != mean.shape()) {
    throw DimensionError("noise " + shape_str(epsilon->shape()) + " does not match latent " +
                         shape_str(mean.shape()));
  }
  Tensor noise = epsilon->detach();
  Tensor sigma = exp(scale(params.log_variance(), 0.5));
  return {add(mean, mul(sigma, noise)), noise};
}

Tensor residual_kl(const GaussianParams& posterior) {
  if (posterior.path != PathTag::kPosterior || !posterior.residual()) {
    throw ContractError("residual_kl needs a residual posterior");
  }
  // dmu^2 * exp(-log sigma^2) + exp(log dsigma^2) - log dsigma^2 - 1
  Tensor term = mul(square(posterior.delta_mu), exp(neg(posterior.log_var)));
  term = add(term, exp(posterior.delta_log_var));
  term = sub(term, posterior.delta_log_var);
  term = scale(add_scalar(term, -1.0), 0.5);
  return masked_mean(sum_last(term), posterior.mask);
}

Tensor gaussian_kl(const GaussianParams& q, const GaussianParams& p) {
  Tensor mq = q.mean(), lq = q.log_variance();
  Tensor mp = p.mean(), lp = p.log_variance();
  if (mq.shape() != mp.shape()) {
    throw DimensionError("gaussian_kl shapes " + shape_str(mq.shape()) + " vs " + shape_str(mp.shape()));
  }
  // log sigma_p^2 - log sigma_q^2 + (sigma_q^2 + (mu_q - mu_p)^2) / sigma_p^2 - 1
  Tensor term = sub(lp, lq);
  term = add(term, mul(add(exp(lq), square(sub(mq, mp))), exp(neg(lp))));
  term = scale(add_scalar(term, -1.0), 0.5);
  return masked_mean(sum_last(term), q.mask);
}

Tensor latent_kl(const GaussianParams& posterior, const GaussianParams& prior) {
  return posterior.residual() ? residual_kl(posterior) : gaussian_kl(posterior, prior);
}

Tensor fuse_latent(const Tensor& memory, const LatentSample& sample, const Linear& fuse) {
  if (memory.rank() != 3 || sample.z.rank() != 3 || memory.dim(0) != sample.z.dim(0) ||
      memory.dim(1) != sample.z.dim(1)) {
    throw DimensionError("fuse_latent: memory " + shape_str(memory.shape()) + " vs latent " +
                         shape_str(sample.z.shape()));
  }
  return add(memory, apply(fuse, sample.z));
}

Tensor standard_normal(std::size_t batch, std::size_t length, std::size_t d_z, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(batch * length * d_z);
  for (auto& x : v) x = dist(rng);
  return Tensor({batch, length, d_z}, std::move(v));
}

}  // namespace cvslt

#include "cvslt/model.hpp"

#include <algorithm>
#include <random>

namespace cvslt {

std::string Variant::name() const {
  if (*this == Variant{}) return "full";
  std::string n;
  auto append = [&n](const char* part) { n += n.empty() ? part : std::string("+") + part; };
  if (!aep) append("no-aep");
  if (!self_distillation) append("no-sd");
  if (!residual_posterior) append("no-argd");
  if (!shared_attention) append("no-shared-attn");
  return n;
}

CvSltModel::CvSltModel(const ModelConfig& config, const Variant& variant, std::uint64_t seed)
    : config_(config), variant_(variant) {
  config_.validate();
  std::mt19937_64 rng(seed);
  transformer_ = make_transformer(store_, config_, rng);
  gaussian_ = make_gaussian_net(store_, config_, rng, variant_.shared_attention);
}

LatentState prior_state(const CvSltModel& model, const PaddedFeatures& x, const std::optional<Tensor>& noise,
                        const ForwardContext& ctx, const EncodeOptions& options) {
  const auto& cfg = model.config();
  const auto& g = model.gaussian();
  LatentState s;
  s.encoded = encode_prior(model.transformer(), cfg, x, ctx, options);
  const Tensor& h = s.encoded.h_p_vision;
  s.attended = shared_attention(g.prior_attention, h, h, x.mask, cfg.n_heads);
  s.latent = prior_params(s.attended, g.prior_net, x.mask);
  s.sample = reparameterize(s.latent, noise);
  s.memory = fuse_latent(h, s.sample, g.fuse);
  s.memory_mask = x.mask;
  return s;
}

LatentState posterior_state(const CvSltModel& model, const PaddedFeatures& x, const PaddedTokens& y,
                            const GaussianParams& prior, const std::optional<Tensor>& noise,
                            const ForwardContext& ctx, const EncodeOptions& options) {
  const auto& cfg = model.config();
  const auto& g = model.gaussian();
  LatentState s;
  s.encoded = encode_posterior(model.transformer(), cfg, x, y, ctx, options);
  s.attended = shared_attention(g.posterior_attention, s.encoded.h_q_vision, s.encoded.h_q_text, y.mask,
                                cfg.n_heads);
  s.latent = model.variant().residual_posterior ? posterior_residual_params(s.attended, prior, g.posterior_net)
                                                : posterior_absolute_params(s.attended, g.posterior_net, x.mask);
  s.sample = reparameterize(s.latent, noise);
  s.memory = fuse_latent(s.encoded.h_q_vision, s.sample, g.fuse);
  s.memory_mask = x.mask;
  return s;
}

DecoderDistribution decode_targets(const CvSltModel& model, const LatentState& state, const PaddedTokens& y,
                                   PathTag path, const ForwardContext& ctx) {
  return decode(model.transformer(), model.config(), state.memory, state.memory_mask, shift_right(y), ctx, path);
}

std::vector<std::string> parameter_names_used(const CvSltModel& model, const Tensor& output) {
  std::vector<std::string> names;
  for (auto id : reachable_leaves(output)) {
    auto n = model.parameters().name_of(id);
    if (!n.empty()) names.push_back(std::move(n));
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace cvslt

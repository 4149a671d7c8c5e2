#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "cvslt/gradcheck.hpp"
#include "cvslt/objectives.hpp"
#include "cvslt/training.hpp"
#include "gradient_suite.hpp"
#include "helpers.hpp"

using namespace cvslt;
using namespace cvslt::testing;
using Catch::Approx;

namespace {

struct Fixture {
  std::vector<SyntheticPair> pairs;
  Batch batch;
  Tensor eps;

  explicit Fixture(std::uint64_t seed, std::size_t n = 2, std::size_t d_z = 4) : pairs(generate_corpus(tiny_corpus(seed, n))) {
    batch = batch_of(pairs);
    std::mt19937_64 rng(seed);
    eps = standard_normal(batch.size(), batch.features.length, d_z, rng);
  }
};

std::vector<double> grads(const CvSltModel& model) {
  std::vector<double> out;
  for (const auto& p : model.parameters().all()) {
    auto g = p.value.grad();
    if (g.empty()) {
      out.insert(out.end(), p.value.numel(), 0.0);
    } else {
      out.insert(out.end(), g.begin(), g.end());
    }
  }
  return out;
}

}  // namespace

TEST_CASE("anneal schedule", "[objectives]") {
  CHECK(anneal_weight(0, 4000) == 0.0);
  CHECK(anneal_weight(2000, 4000) == 0.5);
  CHECK(anneal_weight(4000, 4000) == 1.0);
  CHECK(anneal_weight(9000, 4000) == 1.0);
  CHECK(anneal_weight(0, 0) == 1.0);
  CHECK(anneal_weight(17, 0) == 1.0);
  CHECK_THROWS_AS(anneal_weight(-1, 4000), ContractError);
  double prev = 0.0;
  for (long s = 0; s <= 5000; s += 7) {
    const double w = anneal_weight(s, 4000);
    CHECK(w >= prev);
    CHECK(w <= 1.0);
    prev = w;
  }
}

TEST_CASE("loss terms are nonnegative and the breakdown recomposes", "[objectives]") {
  Fixture fx(1, 3);
  CvSltModel model(tiny_config(), {}, 1);
  for (long step : {0L, 1000L, 4000L}) {
    auto loss = total_loss(model, fx.batch.features, fx.batch.targets, step, fx.eps);
    CHECK(loss.recon_posterior.item() >= 0.0);
    CHECK(loss.kl_latent.item() >= 0.0);
    CHECK(loss.recon_prior.item() >= 0.0);
    CHECK(loss.sd_kl.item() >= 0.0);
    CHECK(loss.kl_weight == anneal_weight(step, 4000));
    CHECK(loss.aep_weight == 1.0);
    CHECK(loss.sd_weight == 3.0);
    CHECK(std::abs(loss.total.item() - loss.recomposed()) <= 1e-12);
    const double expect = loss.recon_posterior.item() + loss.kl_weight * loss.kl_latent.item() +
                          loss.recon_prior.item() + 3.0 * loss.sd_kl.item();
    CHECK(std::abs(loss.total.item() - expect) <= 1e-12);
  }

  auto cfg = tiny_config();
  cfg.lambda_sd = 0.0;
  CvSltModel no_lambda(cfg, {}, 1);
  auto l0 = total_loss(no_lambda, fx.batch.features, fx.batch.targets, 4000, fx.eps);
  CHECK(std::abs(l0.total.item() - (l0.recon_posterior.item() + l0.kl_latent.item() + l0.recon_prior.item())) <=
        1e-12);
}

TEST_CASE("component losses agree with total_loss", "[objectives]") {
  Fixture fx(2, 2);
  CvSltModel model(tiny_config(), {}, 3);
  auto loss = total_loss(model, fx.batch.features, fx.batch.targets, 100, fx.eps);
  auto cvae = cvae_loss(model, fx.batch.features, fx.batch.targets, fx.eps);
  CHECK(cvae.recon_posterior.item() == loss.recon_posterior.item());
  CHECK(cvae.kl_latent.item() == loss.kl_latent.item());
  CHECK(aep_loss(model, fx.batch.features, fx.batch.targets, fx.eps).item() == loss.recon_prior.item());
}

TEST_CASE("zeroing g removes the latent KL", "[objectives]") {
  Fixture fx(3, 2);
  CvSltModel model(tiny_config(), {}, 4);
  randomize(model, 1);
  zero_parameters(model, "gaussian.posterior_net");
  auto cvae = cvae_loss(model, fx.batch.features, fx.batch.targets, fx.eps);
  CHECK(cvae.kl_latent.item() == 0.0);
}

TEST_CASE("self-distillation values and stop-gradient", "[objectives]") {
  DecoderDistribution teacher{Tensor({1, 1, 2}, {std::log(0.5), std::log(0.5)}), {1}, PathTag::kPosterior};
  DecoderDistribution student{Tensor({1, 1, 2}, {std::log(0.9), std::log(0.1)}), {1}, PathTag::kPrior};
  CHECK(sd_loss(teacher, student).item() == Approx(0.5108256238).epsilon(1e-9));
  CHECK(sd_loss(teacher, DecoderDistribution{teacher.logits, {1}, PathTag::kPrior}).item() == Approx(0.0).margin(1e-12));
  CHECK_THROWS_AS(sd_loss(student, teacher), ContractError);
  DecoderDistribution longer{Tensor::zeros({1, 2, 2}), {1, 1}, PathTag::kPrior};
  CHECK_THROWS(sd_loss(teacher, longer));

  // Gradients reaching parameters only through the teacher are exactly zero.
  Fixture fx(4, 2);
  CvSltModel model(tiny_config(), {}, 5);
  auto prior = prior_state(model, fx.batch.features, fx.eps);
  auto post = posterior_state(model, fx.batch.features, fx.batch.targets, prior.latent, fx.eps);
  auto q = decode_targets(model, post, fx.batch.targets, PathTag::kPosterior);
  auto p = decode_targets(model, prior, fx.batch.targets, PathTag::kPrior);
  backward(sd_loss(q, p));
  for (const char* name : {"gaussian.posterior_net.weight", "gaussian.posterior_net.bias"}) {
    const auto g = model.parameters().find(name)->value.grad();
    CHECK(std::all_of(g.begin(), g.end(), [](double x) { return x == 0.0; }));
  }
  const auto gf = model.parameters().find("gaussian.prior_net.weight")->value.grad();
  CHECK(std::any_of(gf.begin(), gf.end(), [](double x) { return x != 0.0; }));
}

TEST_CASE("lambda zero makes gradients independent of the distillation term", "[objectives]") {
  Fixture fx(5, 2);
  auto cfg = tiny_config();
  cfg.lambda_sd = 0.0;
  CvSltModel with(cfg, {}, 6);
  CvSltModel without(cfg, Variant{true, false, true, true}, 6);
  backward(total_loss(with, fx.batch.features, fx.batch.targets, 10, fx.eps).total);
  backward(total_loss(without, fx.batch.features, fx.batch.targets, 10, fx.eps).total);
  CHECK(grads(with) == grads(without));
}

TEST_CASE("aep gradient reaches the prior net", "[objectives][gradcheck]") {
  Fixture fx(6, 1);
  CvSltModel model(tiny_config(), {}, 7);
  auto f = [&] { return aep_loss(model, fx.batch.features, fx.batch.targets, fx.eps); };
  backward(f());
  Tensor w = model.parameters().find("gaussian.prior_net.weight")->value;
  std::vector<double> analytic(w.grad().begin(), w.grad().end());
  CHECK(std::any_of(analytic.begin(), analytic.end(), [](double x) { return x != 0.0; }));
  auto numeric = finite_diff_grad([&] { return f().item(); }, w);
  CHECK(max_relative_error(analytic, numeric) <= 1e-4);
}

TEST_CASE("aep equals posterior reconstruction in the collapsed configuration", "[objectives]") {
  // g zeroed, shared noise, and with the fusion/encoding diagnostic the two
  // paths feed the decoder identical memory.
  Fixture fx(7, 2);
  CvSltModel model(tiny_config(), {}, 8);
  randomize(model, 2);
  zero_parameters(model, "gaussian.posterior_net");
  EncodeOptions blocked;
  blocked.block_cross_modal = true;
  auto prior = prior_state(model, fx.batch.features, fx.eps);
  auto post = posterior_state(model, fx.batch.features, fx.batch.targets, prior.latent, fx.eps, {}, blocked);
  auto p = decode_targets(model, prior, fx.batch.targets, PathTag::kPrior);
  auto q = decode_targets(model, post, fx.batch.targets, PathTag::kPosterior);
  const double recon_p = cross_entropy_logits(p.logits, fx.batch.targets.ids, 0.0, fx.batch.targets.mask).item();
  const double recon_q = cross_entropy_logits(q.logits, fx.batch.targets.ids, 0.0, fx.batch.targets.mask).item();
  CHECK(recon_p == Approx(recon_q).epsilon(1e-12));
  CHECK(recon_p == Approx(aep_loss(model, fx.batch.features, fx.batch.targets, fx.eps).item()).epsilon(1e-14));
}

TEST_CASE("short optimisation lowers the ELBO loss", "[objectives]") {
  Fixture fx(8, 1);
  CvSltModel model(tiny_config(), {}, 9);
  Adam adam(model.parameters(), 1e-2, 0.9, 0.999, 1e-8, 1.0);
  auto elbo = [&] {
    auto t = cvae_loss(model, fx.batch.features, fx.batch.targets, fx.eps);
    return add(t.recon_posterior, t.kl_latent);
  };
  const double before = elbo().item();
  for (int i = 0; i < 50; ++i) {
    model.parameters().zero_grad();
    backward(elbo());
    adam.step();
  }
  CHECK(elbo().item() < before);
}

TEST_CASE("ablation switches remove exactly their component", "[objectives]") {
  Fixture fx(9, 2);
  const auto cfg = tiny_config();
  auto names_of = [&](const Variant& v) {
    CvSltModel m(cfg, v, 1);
    std::vector<std::string> names;
    for (const auto& p : m.parameters().all()) names.push_back(p.name);
    std::sort(names.begin(), names.end());
    return names;
  };
  const auto full = names_of({});
  CHECK(names_of({false, true, true, true}) == full);
  CHECK(names_of({true, false, true, true}) == full);
  CHECK(names_of({true, true, false, true}) == full);
  auto split = names_of({true, true, true, false});
  CHECK(split.size() == full.size() + 8);
  for (const auto& n : split) {
    if (n.rfind("gaussian.posterior_attn", 0) != 0) CHECK(std::binary_search(full.begin(), full.end(), n));
  }

  CvSltModel base(cfg, {}, 1);
  auto lf = total_loss(base, fx.batch.features, fx.batch.targets, 10, fx.eps);
  CvSltModel no_aep(cfg, {false, true, true, true}, 1);
  auto la = total_loss(no_aep, fx.batch.features, fx.batch.targets, 10, fx.eps);
  CHECK(la.aep_weight == 0.0);
  CHECK(la.sd_weight == lf.sd_weight);
  CHECK(la.total.item() == Approx(lf.total.item() - lf.recon_prior.item()).epsilon(1e-12));
  CvSltModel no_sd(cfg, {true, false, true, true}, 1);
  auto ls = total_loss(no_sd, fx.batch.features, fx.batch.targets, 10, fx.eps);
  CHECK(ls.sd_weight == 0.0);
  CHECK(ls.total.item() == Approx(lf.total.item() - 3.0 * lf.sd_kl.item()).epsilon(1e-12));
  // The absolute posterior uses the textbook KL against an independent posterior.
  CvSltModel no_argd(cfg, {true, true, false, true}, 1);
  auto prior = prior_state(no_argd, fx.batch.features, fx.eps);
  auto post = posterior_state(no_argd, fx.batch.features, fx.batch.targets, prior.latent, fx.eps);
  CHECK_FALSE(post.latent.residual());
  CHECK(total_loss(no_argd, fx.batch.features, fx.batch.targets, 10, fx.eps).kl_latent.item() ==
        gaussian_kl(post.latent, prior.latent).item());
}

TEST_CASE("full objective on a two-pair batch passes finite differences", "[objectives][gradcheck]") {
  Fixture fx(10, 2);
  auto cfg = tiny_config();
  cfg.dropout = 0.1;
  CvSltModel model(cfg, {}, 11);
  randomize(model, 12, 0.4);
  const auto r = full_loss_gradcheck(model, fx.batch.features, fx.batch.targets, fx.eps, 1000, 0.1, 77);
  INFO("worst parameter: " << r.worst_name << " at " << r.worst);
  CHECK(r.surrogate_mismatch <= 1e-12);
  CHECK(r.parameters == model.parameters().all().size());
  CHECK(r.worst <= 1e-4);
}

TEST_CASE("ablated objectives pass finite differences", "[objectives][gradcheck]") {
  Fixture fx(13, 2);
  for (const Variant v : {Variant{false, true, true, true}, Variant{true, false, true, true},
                          Variant{true, true, false, true}, Variant{true, true, true, false}}) {
    CvSltModel model(tiny_config(), v, 14);
    randomize(model, 15, 0.4);
    const auto r = full_loss_gradcheck(model, fx.batch.features, fx.batch.targets, fx.eps, 500, 0.0, 1);
    INFO(v.name() << " worst parameter: " << r.worst_name << " at " << r.worst);
    CHECK(r.surrogate_mismatch <= 1e-12);
    CHECK(r.worst <= 1e-4);
  }
}

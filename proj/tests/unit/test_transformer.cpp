#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>

#include "cvslt/model.hpp"
#include "helpers.hpp"

using namespace cvslt;
using namespace cvslt::testing;
using Catch::Approx;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::vector<double> row_values(const Tensor& t, std::size_t b, std::size_t first, std::size_t count) {
  const std::size_t T = t.dim(1), d = t.dim(2);
  auto v = t.values();
  return {v.begin() + static_cast<std::ptrdiff_t>((b * T + first) * d),
          v.begin() + static_cast<std::ptrdiff_t>((b * T + first + count) * d)};
}

}  // namespace

TEST_CASE("config validation", "[transformer]") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.d_ff == 4 * c.d_model);
  CHECK(c.d_z == 64);
  CHECK(c.lambda_sd == 3.0);
  CHECK(c.anneal_steps == 4000);
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.label_smoothing = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.lambda_sd = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("sinusoidal positions", "[transformer]") {
  auto p = sinusoidal_positions(3, 6);
  for (std::size_t k = 0; k < 6; ++k) CHECK(p[k] == (k % 2 == 0 ? 0.0 : 1.0));
  CHECK(p[6] == Approx(0.8414709848).margin(1e-10));
  CHECK(p[7] == Approx(0.5403023059).margin(1e-10));
  auto q = sinusoidal_positions(3, 6);
  CHECK(copy_values(p) == copy_values(q));
}

TEST_CASE("attention over a single key returns the projected value", "[transformer]") {
  ParameterStore store;
  std::mt19937_64 rng(1);
  auto params = make_attention(store, "att", 8, rng);
  auto q = random_tensor({1, 3, 8}, rng);
  auto kv = random_tensor({1, 1, 8}, rng);
  auto mask = AttentionMask::key_padding(std::vector<std::uint8_t>{1}, 1, 3, 1);
  auto out = multi_head_attention(params, q, kv, mask, 2);
  auto expect = apply(params.output, apply(params.value, kv));
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t k = 0; k < 8; ++k) CHECK(out[t * 8 + k] == Approx(expect[k]).epsilon(1e-12));
  }
}

TEST_CASE("attention rejects fully masked rows and bad mask shapes", "[transformer]") {
  ParameterStore store;
  std::mt19937_64 rng(1);
  auto params = make_attention(store, "att", 8, rng);
  auto x = random_tensor({1, 2, 8}, rng);
  auto none = AttentionMask::key_padding(std::vector<std::uint8_t>{0, 0}, 1, 2, 2);
  CHECK_THROWS_AS(multi_head_attention(params, x, x, none, 2), ContractError);
  auto wrong = AttentionMask::key_padding(std::vector<std::uint8_t>{1, 1, 1}, 1, 2, 3);
  CHECK_THROWS_AS(multi_head_attention(params, x, x, wrong, 2), DimensionError);
}

TEST_CASE("masked keys do not influence attention output", "[transformer][property]") {
  ParameterStore store;
  std::mt19937_64 rng(2);
  auto params = make_attention(store, "att", 8, rng);
  auto q = random_tensor({1, 2, 8}, rng);
  auto kv = random_tensor({1, 3, 8}, rng);
  auto mask = AttentionMask::key_padding(std::vector<std::uint8_t>{1, 0, 1}, 1, 2, 3);
  auto base = multi_head_attention(params, q, kv, mask, 2);
  auto changed = kv.detach();
  for (std::size_t k = 0; k < 8; ++k) changed.data()[8 + k] += 100.0 * (k + 1);
  auto after = multi_head_attention(params, q, changed, mask, 2);
  CHECK(copy_values(base) == copy_values(after));
}

TEST_CASE("encoders produce the documented shapes", "[transformer]") {
  const auto pairs = generate_corpus(tiny_corpus(3, 3));
  const auto batch = batch_of(pairs);
  CvSltModel model(tiny_config(), {}, 1);
  auto prior = encode_prior(model.transformer(), model.config(), batch.features);
  CHECK(prior.h_p_vision.shape() == Shape{3, batch.features.length, 8});
  auto post = encode_posterior(model.transformer(), model.config(), batch.features, batch.targets);
  CHECK(post.h_q_vision.shape() == prior.h_p_vision.shape());
  CHECK(post.h_q_text.shape() == Shape{3, batch.targets.length, 8});
  CHECK(post.vision_mask == batch.features.mask);
  CHECK(post.text_mask == batch.targets.mask);

  auto again = encode_prior(model.transformer(), model.config(), batch.features);
  CHECK(copy_values(again.h_p_vision) == copy_values(prior.h_p_vision));
}

TEST_CASE("encoders reject empty sequences", "[transformer]") {
  CvSltModel model(tiny_config(), {}, 1);
  PaddedFeatures x;
  x.batch = 1;
  x.length = 2;
  x.width = 4;
  x.values.assign(8, 0.0);
  x.mask = {0, 0};
  CHECK_THROWS_AS(encode_prior(model.transformer(), model.config(), x), ContractError);
}

TEST_CASE("padding content never leaks into unpadded outputs", "[transformer][property]") {
  const auto pairs = generate_corpus(tiny_corpus(4, 4));
  auto batch = batch_of(pairs);
  CvSltModel model(tiny_config(), {}, 3);
  randomize(model, 8);
  const auto& cfg = model.config();
  auto prior = encode_prior(model.transformer(), cfg, batch.features);
  auto post = encode_posterior(model.transformer(), cfg, batch.features, batch.targets);
  auto dist = decode(model.transformer(), cfg, prior.h_p_vision, batch.features.mask, shift_right(batch.targets));

  auto noisy = batch;
  for (std::size_t i = 0; i < noisy.features.mask.size(); ++i) {
    if (noisy.features.mask[i]) continue;
    for (std::size_t k = 0; k < noisy.features.width; ++k) noisy.features.values[i * noisy.features.width + k] = 7.5;
  }
  for (std::size_t i = 0; i < noisy.targets.mask.size(); ++i) {
    if (!noisy.targets.mask[i]) noisy.targets.ids[i] = 5;
  }
  auto prior2 = encode_prior(model.transformer(), cfg, noisy.features);
  auto post2 = encode_posterior(model.transformer(), cfg, noisy.features, noisy.targets);
  auto dist2 = decode(model.transformer(), cfg, prior2.h_p_vision, noisy.features.mask, shift_right(noisy.targets));

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto tx = batch.features.true_length(b);
    const auto ty = batch.targets.true_length(b);
    CHECK(row_values(prior.h_p_vision, b, 0, tx) == row_values(prior2.h_p_vision, b, 0, tx));
    CHECK(row_values(post.h_q_vision, b, 0, tx) == row_values(post2.h_q_vision, b, 0, tx));
    CHECK(row_values(post.h_q_text, b, 0, ty) == row_values(post2.h_q_text, b, 0, ty));
    CHECK(row_values(dist.logits, b, 0, ty) == row_values(dist2.logits, b, 0, ty));
  }
}

TEST_CASE("blocking cross-modal attention reduces the posterior vision half to the prior encoding",
          "[transformer]") {
  const auto pairs = generate_corpus(tiny_corpus(5, 2));
  const auto batch = batch_of(pairs);
  CvSltModel model(tiny_config(), {}, 4);
  randomize(model, 9);
  EncodeOptions blocked;
  blocked.block_cross_modal = true;
  auto prior = encode_prior(model.transformer(), model.config(), batch.features);
  auto post = encode_posterior(model.transformer(), model.config(), batch.features, batch.targets, {}, blocked);
  auto a = copy_values(prior.h_p_vision);
  auto b = copy_values(post.h_q_vision);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (batch.features.mask[i / 8]) CHECK(a[i] == Approx(b[i]).margin(1e-12));
  }
  auto joint = encode_posterior(model.transformer(), model.config(), batch.features, batch.targets);
  CHECK(copy_values(joint.h_q_vision) != b);
}

TEST_CASE("decoder is causal and normalised", "[transformer][property]") {
  const auto pairs = generate_corpus(tiny_corpus(6, 1));
  const auto batch = batch_of(pairs);
  CvSltModel model(tiny_config(), {}, 5);
  randomize(model, 10);
  const auto& cfg = model.config();
  auto memory = encode_prior(model.transformer(), cfg, batch.features).h_p_vision;
  auto y_in = shift_right(batch.targets);
  auto dist = decode(model.transformer(), cfg, memory, batch.features.mask, y_in);
  const std::size_t T = y_in.length, V = cfg.vocab_size;
  auto probs = dist.probs();
  for (std::size_t t = 0; t < T; ++t) {
    double s = 0.0;
    for (std::size_t v = 0; v < V; ++v) s += probs[t * V + v];
    CHECK(std::abs(s - 1.0) <= 1e-9);
  }
  for (std::size_t changed = 1; changed < T; ++changed) {
    auto alt = y_in;
    alt.ids[changed] = alt.ids[changed] == 5 ? 6 : 5;
    auto d2 = decode(model.transformer(), cfg, memory, batch.features.mask, alt);
    CHECK(row_values(dist.logits, 0, 0, changed) == row_values(d2.logits, 0, 0, changed));
    CHECK(row_values(dist.logits, 0, changed, 1) != row_values(d2.logits, 0, changed, 1));
  }
  CHECK_THROWS_AS(decode(model.transformer(), cfg, Tensor::zeros({1, 0, 8}), {}, y_in), Error);
}

TEST_CASE("shared decoder gives identical distributions for identical memory", "[transformer]") {
  const auto pairs = generate_corpus(tiny_corpus(7, 2));
  const auto batch = batch_of(pairs);
  CvSltModel model(tiny_config(), {}, 6);
  auto memory = encode_prior(model.transformer(), model.config(), batch.features).h_p_vision;
  auto y_in = shift_right(batch.targets);
  auto p = decode(model.transformer(), model.config(), memory, batch.features.mask, y_in, {}, PathTag::kPrior);
  auto q = decode(model.transformer(), model.config(), memory, batch.features.mask, y_in, {}, PathTag::kPosterior);
  CHECK(copy_values(p.logits) == copy_values(q.logits));
}

TEST_CASE("both paths use one encoder and decoder", "[transformer][property]") {
  const auto pairs = generate_corpus(tiny_corpus(8, 2));
  const auto batch = batch_of(pairs);
  CvSltModel model(tiny_config(), {}, 7);
  auto prior = prior_state(model, batch.features, std::nullopt);
  auto post = posterior_state(model, batch.features, batch.targets, prior.latent, std::nullopt);
  auto p = decode_targets(model, prior, batch.targets, PathTag::kPrior);
  auto q = decode_targets(model, post, batch.targets, PathTag::kPosterior);
  auto strip = [](std::vector<std::string> names) {
    std::set<std::string> out;
    for (auto& n : names) {
      if (n.rfind("gaussian.", 0) != 0) out.insert(n);
    }
    return out;
  };
  CHECK(strip(parameter_names_used(model, sum(p.logits))) == strip(parameter_names_used(model, sum(q.logits))));
}

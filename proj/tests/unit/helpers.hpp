#pragma once

#include <random>
#include <vector>

#include "cvslt/data_synth.hpp"
#include "cvslt/model.hpp"

namespace cvslt::testing {

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 16;
  c.d_feature = 4;
  c.vocab_size = 10;
  c.d_z = 4;
  c.dropout = 0.0;
  return c;
}

inline CorpusOptions tiny_corpus(std::uint64_t seed, std::size_t n) {
  CorpusOptions o;
  o.seed = seed;
  o.size = n;
  o.vocab_size = 10;
  o.d_feature = 4;
  o.min_tokens = 2;
  o.max_tokens = 4;
  return o;
}

inline Batch batch_of(std::span<const SyntheticPair> pairs) { return make_batches(pairs, pairs.size(), 0, false).front(); }

// Replaces every parameter value with a draw from U(-scale, scale) so that
// zero-initialised pieces (layer-norm bias, ...) do not hide gradient bugs.
inline void randomize(CvSltModel& model, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (const auto& p : model.parameters().all()) {
    Tensor t = p.value;
    for (auto& x : t.data()) x = u(rng);
  }
}

inline void zero_parameters(CvSltModel& model, const std::string& prefix) {
  for (const auto& p : model.parameters().all()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    Tensor t = p.value;
    for (auto& x : t.data()) x = 0.0;
  }
}

inline std::vector<double> copy_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace cvslt::testing

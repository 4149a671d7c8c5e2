#pragma once

// Deterministic synthetic cross-modal corpus. Every content token owns a
// fixed prototype feature vector; a sentence's frames repeat each token's
// prototype for 2-4 frames and add Gaussian noise. Frame values are stored at
// 9 significant digits so in-memory and JSONL corpora are identical.

#include <array>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cvslt/sequence.hpp"

namespace cvslt {

/// Generator seeded from a tuple of words through std::seed_seq.
std::mt19937_64 seeded_rng(std::initializer_list<std::uint64_t> words);

class Vocabulary {
 public:
  explicit Vocabulary(std::size_t size = 64);

  std::size_t size() const { return size_; }
  std::string surface(int id) const;
  // UNK for unknown surfaces.
  int id(const std::string& surface) const;
  // Space-separated surfaces of the content tokens (specials dropped).
  std::string detokenize(std::span<const int> ids) const;

 private:
  std::size_t size_;
};

struct SyntheticPair {
  std::string id;
  TokenSequence tokens;  // content ids followed by EOS
  FeatureSequence features;
};

struct CorpusOptions {
  std::uint64_t seed = 1;
  std::size_t size = 1000;
  std::size_t vocab_size = 64;
  double noise_sigma = 0.1;
  std::size_t d_feature = 32;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 12;
  std::size_t min_duration = 2;
  std::size_t max_duration = 4;
};

/// Pure function of its options. Adjacent content tokens always differ so that
/// the frame sequence determines the token sequence up to noise.
std::vector<SyntheticPair> generate_corpus(const CorpusOptions& options);
std::vector<SyntheticPair> generate_corpus(std::uint64_t seed, std::size_t n, const Vocabulary& vocab,
                                           double noise_sigma = 0.1);

struct CorpusSplit {
  std::vector<SyntheticPair> train;
  std::vector<SyntheticPair> dev;
  std::vector<SyntheticPair> test;
};

/// Shuffle under `seed`, then slice into floor(n*r0) / floor(n*r1) / remainder.
CorpusSplit split_corpus(std::span<const SyntheticPair> pairs, std::array<double, 3> ratios, std::uint64_t seed);
inline CorpusSplit split_corpus(std::span<const SyntheticPair> pairs, std::uint64_t seed) {
  return split_corpus(pairs, {0.8, 0.1, 0.1}, seed);
}

struct Batch {
  std::vector<std::string> ids;
  PaddedFeatures features;
  PaddedTokens targets;

  std::size_t size() const { return ids.size(); }
};

/// Consecutive groups of `batch_size`; the final partial batch is kept.
std::vector<Batch> make_batches(std::span<const SyntheticPair> pairs, std::size_t batch_size, std::uint64_t seed,
                                bool shuffle);

/// Strips padding back off a batch.
std::vector<SyntheticPair> unbatch(const Batch& batch);

std::string to_jsonl(const SyntheticPair& pair);
SyntheticPair from_jsonl(const std::string& line);
void write_jsonl(const std::filesystem::path& path, std::span<const SyntheticPair> pairs);
std::vector<SyntheticPair> read_jsonl(const std::filesystem::path& path);

}  // namespace cvslt

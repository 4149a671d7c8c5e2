#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cvslt/data_synth.hpp"
#include "cvslt/model.hpp"

namespace cvslt {

struct Hypothesis {
  TokenSequence ids;  // generated tokens, BOS excluded
  double log_prob = 0.0;
  bool finished = false;
};

struct BeamOptions {
  std::size_t beam_size = 5;
  double length_penalty = 1.0;
  // Generated tokens including EOS. Default 2 + 2 * 13 for 12-token sentences.
  std::size_t max_len = 28;
};

/// log_prob / length^alpha, length counting generated tokens including EOS.
double hypothesis_score(double log_prob, std::size_t length, double length_penalty);

/// Prior path with the deterministic latent z* = mu. Candidates are ranked by
/// cumulative log-prob (ties: lexicographically smaller ids), EOS-terminated
/// ones retire into the finished set, and the finished hypothesis with the
/// best length-normalized score wins. The last allowed position only admits EOS.
TokenSequence beam_search(const CvSltModel& model, const FeatureSequence& x, const BeamOptions& options = {});

/// Argmax decoding with the lowest id winning ties.
TokenSequence greedy_decode(const CvSltModel& model, const FeatureSequence& x, std::size_t max_len = 28);

/// Decodes every pair in input order, fanning out over `threads` workers
/// (0 = hardware concurrency).
std::vector<TokenSequence> decode_corpus(const CvSltModel& model, std::span<const SyntheticPair> pairs,
                                         const BeamOptions& options = {}, std::size_t threads = 1);

struct BleuScores {
  std::array<double, 4> bleu{};  // B1..B4 on a 0-100 scale
  double brevity_penalty = 0.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
};

/// Corpus-level BLEU over whitespace tokens. A zero match count for an order
/// is replaced by `smoothing_eps` in the numerator.
BleuScores bleu(std::span<const std::string> candidates, std::span<const std::string> references,
                std::size_t max_n = 4, double smoothing_eps = 0.1);

/// Mean sentence-level ROUGE-L F1 (LCS based), 0-100.
double rouge_l(std::span<const std::string> candidates, std::span<const std::string> references);

/// Length of the longest common subsequence.
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

double l2_distance(std::span<const double> a, std::span<const double> b);

/// Masked mean over the time axis of h [B, T, d]; returns B rows of d values.
std::vector<std::vector<double>> mean_pool(const Tensor& h, std::span<const std::uint8_t> mask);

/// L2 distance between the pooled prior-path vision encoding and the pooled
/// posterior-path text encoding of the gold pair (no dropout, no sampling).
double sentence_gap(const CvSltModel& model, const FeatureSequence& x, const TokenSequence& y);
std::vector<double> sentence_gaps(const CvSltModel& model, std::span<const SyntheticPair> pairs,
                                  std::size_t batch_size = 16);

struct GapReport {
  std::vector<std::string> pair_ids;  // sorted by gap
  std::vector<double> gaps;           // sorted ascending
  std::vector<std::size_t> bin_index;
  std::vector<std::size_t> bin_sizes;
  std::vector<double> bin_mean_gap;
  std::vector<double> bin_bleu4;
};

/// Bin sizes for n items in `bins` equal parts, remainder to the earliest bins.
std::vector<std::size_t> equal_bin_sizes(std::size_t n, std::size_t bins);

/// Sorts pairs by sentence_gap, bins them and scores each bin's beam outputs.
GapReport gap_quantile_report(const CvSltModel& model, std::span<const SyntheticPair> pairs,
                              std::size_t bins = 5, const BeamOptions& options = {}, std::size_t threads = 1);

/// Columns: pair_id,l2_gap,bin_index,bin_mean_gap,bin_bleu4
void write_gap_csv(const std::filesystem::path& path, const GapReport& report);

/// Pooled per-layer encoder outputs: prior-path vision and posterior-path
/// text, one row per (pair, layer, modality).
void write_representation_dump(const std::filesystem::path& path, const CvSltModel& model,
                               std::span<const SyntheticPair> pairs);

}  // namespace cvslt

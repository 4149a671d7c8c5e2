#include "cvslt/decode_eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

namespace cvslt {

namespace {

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

PaddedFeatures single(const FeatureSequence& x) { return PaddedFeatures::from(std::span(&x, 1)); }

// Repeats the [1, T, d] memory n times along the batch axis.
Tensor tile_batch(const Tensor& memory, std::size_t n) {
  const auto v = memory.values();
  std::vector<double> out;
  out.reserve(v.size() * n);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), v.begin(), v.end());
  return Tensor({n, memory.dim(1), memory.dim(2)}, std::move(out));
}

std::vector<std::uint8_t> tile_mask(std::span<const std::uint8_t> mask, std::size_t n) {
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), mask.begin(), mask.end());
  return out;
}

// Last-position log-probabilities for every prefix in `prefixes`.
std::vector<std::vector<double>> next_log_probs(const CvSltModel& model, const LatentState& state,
                                                const std::vector<TokenSequence>& prefixes) {
  const std::size_t n = prefixes.size();
  const std::size_t L = prefixes.front().size() + 1;
  PaddedTokens y_in;
  y_in.batch = n;
  y_in.length = L;
  y_in.mask.assign(n * L, 1);
  for (const auto& p : prefixes) {
    y_in.ids.push_back(kBosId);
    y_in.ids.insert(y_in.ids.end(), p.begin(), p.end());
  }
  auto dist = decode(model.transformer(), model.config(), tile_batch(state.memory, n),
                     tile_mask(state.memory_mask, n), y_in);
  const std::size_t V = model.config().vocab_size;
  auto logits = dist.logits.values();
  std::vector<std::vector<double>> out(n, std::vector<double>(V));
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = logits.data() + (b * L + L - 1) * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(row[v] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t v = 0; v < V; ++v) out[b][v] = row[v] - lz;
  }
  return out;
}

bool better_candidate(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.ids < b.ids;
}

}  // namespace

double hypothesis_score(double log_prob, std::size_t length, double length_penalty) {
  return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), length_penalty);
}

TokenSequence beam_search(const CvSltModel& model, const FeatureSequence& x, const BeamOptions& options) {
  if (options.beam_size == 0) throw ConfigError("beam_size must be >= 1");
  if (options.max_len == 0) throw ConfigError("max_len must be >= 1");
  NoGradGuard no_grad;
  const auto state = prior_state(model, single(x), std::nullopt);
  const std::size_t V = model.config().vocab_size;

  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < options.max_len && !alive.empty(); ++step) {
    std::vector<TokenSequence> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.ids);
    const auto lp = next_log_probs(model, state, prefixes);
    const bool last = step + 1 == options.max_len;
    std::vector<Hypothesis> candidates;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      for (std::size_t v = 0; v < V; ++v) {
        const int id = static_cast<int>(v);
        if (id == kPadId || id == kBosId || (last && id != kEosId)) continue;
        Hypothesis c{alive[i].ids, alive[i].log_prob + lp[i][v], id == kEosId};
        c.ids.push_back(id);
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(options.beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better_candidate);
    alive.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      (candidates[i].finished ? finished : alive).push_back(std::move(candidates[i]));
    }
    if (finished.size() >= options.beam_size) break;
  }
  const Hypothesis* best = nullptr;
  double best_score = 0.0;
  for (const auto& h : finished) {
    const double s = hypothesis_score(h.log_prob, h.ids.size(), options.length_penalty);
    if (!best || s > best_score || (s == best_score && h.ids < best->ids)) {
      best = &h;
      best_score = s;
    }
  }
  return best ? best->ids : TokenSequence{kEosId};
}

TokenSequence greedy_decode(const CvSltModel& model, const FeatureSequence& x, std::size_t max_len) {
  NoGradGuard no_grad;
  const auto state = prior_state(model, single(x), std::nullopt);
  TokenSequence out;
  while (out.size() + 1 < max_len) {
    const auto lp = next_log_probs(model, state, {out});
    int best = -1;
    for (std::size_t v = 0; v < lp[0].size(); ++v) {
      const int id = static_cast<int>(v);
      if (id == kPadId || id == kBosId) continue;
      if (best < 0 || lp[0][v] > lp[0][static_cast<std::size_t>(best)]) best = id;
    }
    out.push_back(best);
    if (best == kEosId) return out;
  }
  out.push_back(kEosId);
  return out;
}

std::vector<TokenSequence> decode_corpus(const CvSltModel& model, std::span<const SyntheticPair> pairs,
                                         const BeamOptions& options, std::size_t threads) {
  std::vector<TokenSequence> out(pairs.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(pairs.size(), 1));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < pairs.size();) out[i] = beam_search(model, pairs[i].features, options);
  };
  if (threads <= 1) {
    worker();
    return out;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  pool.clear();
  return out;
}

BleuScores bleu(std::span<const std::string> candidates, std::span<const std::string> references, std::size_t max_n,
                double smoothing_eps) {
  if (candidates.empty()) throw ContractError("bleu on an empty corpus");
  if (candidates.size() != references.size()) {
    throw DimensionError("bleu: " + std::to_string(candidates.size()) + " candidates vs " +
                         std::to_string(references.size()) + " references");
  }
  if (max_n == 0 || max_n > 4) throw ConfigError("bleu max_n must lie in [1,4]");
  std::array<double, 4> matched{}, total{};
  BleuScores s;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = split_ws(candidates[i]);
    const auto r = split_ws(references[i]);
    s.candidate_length += c.size();
    s.reference_length += r.size();
    for (std::size_t n = 1; n <= max_n; ++n) {
      std::map<std::vector<std::string>, std::size_t> ref_counts, cand_counts;
      for (std::size_t k = 0; k + n <= r.size(); ++k) ++ref_counts[{r.begin() + static_cast<std::ptrdiff_t>(k), r.begin() + static_cast<std::ptrdiff_t>(k + n)}];
      for (std::size_t k = 0; k + n <= c.size(); ++k) ++cand_counts[{c.begin() + static_cast<std::ptrdiff_t>(k), c.begin() + static_cast<std::ptrdiff_t>(k + n)}];
      for (const auto& [gram, count] : cand_counts) {
        auto it = ref_counts.find(gram);
        matched[n - 1] += static_cast<double>(std::min(count, it == ref_counts.end() ? 0 : it->second));
        total[n - 1] += static_cast<double>(count);
      }
    }
  }
  if (s.candidate_length == 0) return s;
  const double c = static_cast<double>(s.candidate_length);
  const double r = static_cast<double>(s.reference_length);
  s.brevity_penalty = c > r ? 1.0 : std::exp(1.0 - r / c);
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const double m = matched[n - 1] > 0.0 ? matched[n - 1] : smoothing_eps;
    log_sum += std::log(m / std::max(total[n - 1], 1.0));
    s.bleu[n - 1] = 100.0 * s.brevity_penalty * std::exp(log_sum / static_cast<double>(n));
  }
  return s;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const std::string> candidates, std::span<const std::string> references) {
  if (candidates.empty()) throw ContractError("rouge_l on an empty corpus");
  if (candidates.size() != references.size()) throw DimensionError("rouge_l: candidate/reference count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = split_ws(candidates[i]);
    const auto r = split_ws(references[i]);
    if (c.empty() || r.empty()) {
      total += (c.empty() && r.empty()) ? 1.0 : 0.0;
      continue;
    }
    const double lcs = static_cast<double>(lcs_length(c, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(c.size());
    const double rec = lcs / static_cast<double>(r.size());
    total += 2.0 * p * rec / (p + rec);
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("l2_distance of vectors with different sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<std::vector<double>> mean_pool(const Tensor& h, std::span<const std::uint8_t> mask) {
  const std::size_t B = h.dim(0), T = h.dim(1), d = h.dim(2);
  if (mask.size() != B * T) throw DimensionError("mean_pool mask size mismatch");
  const auto v = h.values();
  std::vector<std::vector<double>> out(B, std::vector<double>(d, 0.0));
  for (std::size_t b = 0; b < B; ++b) {
    double count = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      if (!mask[b * T + t]) continue;
      count += 1.0;
      for (std::size_t k = 0; k < d; ++k) out[b][k] += v[(b * T + t) * d + k];
    }
    if (count == 0.0) throw ContractError("mean_pool over an empty row");
    for (auto& x : out[b]) x /= count;
  }
  return out;
}

std::vector<double> sentence_gaps(const CvSltModel& model, std::span<const SyntheticPair> pairs,
                                  std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<double> gaps;
  gaps.reserve(pairs.size());
  for (const auto& batch : make_batches(pairs, batch_size, 0, false)) {
    auto prior = encode_prior(model.transformer(), model.config(), batch.features);
    auto post = encode_posterior(model.transformer(), model.config(), batch.features, batch.targets);
    const auto vision = mean_pool(prior.h_p_vision, prior.vision_mask);
    const auto text = mean_pool(post.h_q_text, post.text_mask);
    for (std::size_t b = 0; b < batch.size(); ++b) gaps.push_back(l2_distance(vision[b], text[b]));
  }
  return gaps;
}

double sentence_gap(const CvSltModel& model, const FeatureSequence& x, const TokenSequence& y) {
  SyntheticPair p{"", y, x};
  return sentence_gaps(model, std::span(&p, 1)).front();
}

std::vector<std::size_t> equal_bin_sizes(std::size_t n, std::size_t bins) {
  if (bins == 0) throw ConfigError("bins must be >= 1");
  if (n < bins) throw ContractError("need at least " + std::to_string(bins) + " pairs, got " + std::to_string(n));
  std::vector<std::size_t> sizes(bins, n / bins);
  for (std::size_t i = 0; i < n % bins; ++i) ++sizes[i];
  return sizes;
}

GapReport gap_quantile_report(const CvSltModel& model, std::span<const SyntheticPair> pairs, std::size_t bins,
                              const BeamOptions& options, std::size_t threads) {
  const auto sizes = equal_bin_sizes(pairs.size(), bins);
  const auto gaps = sentence_gaps(model, pairs);
  const auto hyps = decode_corpus(model, pairs, options, threads);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return gaps[a] < gaps[b]; });

  Vocabulary vocab(model.config().vocab_size);
  GapReport r;
  r.bin_sizes = sizes;
  std::size_t pos = 0;
  for (std::size_t bin = 0; bin < bins; ++bin) {
    std::vector<std::string> cand, ref;
    double gap_sum = 0.0;
    for (std::size_t k = 0; k < sizes[bin]; ++k, ++pos) {
      const auto i = order[pos];
      r.pair_ids.push_back(pairs[i].id);
      r.gaps.push_back(gaps[i]);
      r.bin_index.push_back(bin);
      gap_sum += gaps[i];
      cand.push_back(vocab.detokenize(hyps[i]));
      ref.push_back(vocab.detokenize(pairs[i].tokens));
    }
    r.bin_mean_gap.push_back(gap_sum / static_cast<double>(sizes[bin]));
    r.bin_bleu4.push_back(bleu(cand, ref).bleu[3]);
  }
  return r;
}

void write_gap_csv(const std::filesystem::path& path, const GapReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "pair_id,l2_gap,bin_index,bin_mean_gap,bin_bleu4\n";
  char buf[128];
  for (std::size_t i = 0; i < report.pair_ids.size(); ++i) {
    const auto bin = report.bin_index[i];
    std::snprintf(buf, sizeof(buf), ",%.9g,%zu,%.9g,%.6f\n", report.gaps[i], bin, report.bin_mean_gap[bin],
                  report.bin_bleu4[bin]);
    out << report.pair_ids[i] << buf;
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_representation_dump(const std::filesystem::path& path, const CvSltModel& model,
                               std::span<const SyntheticPair> pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::size_t d = model.config().d_model;
  out << "pair_id,layer,modality";
  for (std::size_t k = 0; k < d; ++k) out << ",v" << k;
  out << '\n';
  NoGradGuard no_grad;
  EncodeOptions keep;
  keep.keep_layers = true;
  char buf[32];
  auto row = [&](const std::string& id, std::size_t layer, const char* modality, const std::vector<double>& v) {
    out << id << ',' << layer << ',' << modality;
    for (double x : v) {
      std::snprintf(buf, sizeof(buf), ",%.9g", x);
      out << buf;
    }
    out << '\n';
  };
  for (const auto& batch : make_batches(pairs, 16, 0, false)) {
    auto prior = encode_prior(model.transformer(), model.config(), batch.features, {}, keep);
    auto post = encode_posterior(model.transformer(), model.config(), batch.features, batch.targets, {}, keep);
    const std::size_t Tx = post.vision_length, Ty = post.text_length;
    for (std::size_t l = 0; l < prior.layers.size(); ++l) {
      const auto vision = mean_pool(prior.layers[l], prior.vision_mask);
      const auto text = mean_pool(slice(post.layers[l], 1, Tx, Tx + Ty), post.text_mask);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        row(batch.ids[b], l + 1, "vision", vision[b]);
        row(batch.ids[b], l + 1, "text", text[b]);
      }
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace cvslt

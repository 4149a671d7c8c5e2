#include "cvslt/data_synth.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>

#include "cvslt/errors.hpp"

namespace cvslt {

namespace {

double quantize(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}

std::string pair_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "pair-%06zu", index);
  return buf;
}

}  // namespace

std::mt19937_64 seeded_rng(std::initializer_list<std::uint64_t> words) {
  std::vector<std::uint32_t> parts;
  for (auto w : words) {
    parts.push_back(static_cast<std::uint32_t>(w & 0xffffffffu));
    parts.push_back(static_cast<std::uint32_t>(w >> 32));
  }
  std::seed_seq seq(parts.begin(), parts.end());
  return std::mt19937_64(seq);
}

Vocabulary::Vocabulary(std::size_t size) : size_(size) {
  if (size <= static_cast<std::size_t>(kFirstContentId)) {
    throw ConfigError("vocabulary needs more than " + std::to_string(kFirstContentId) + " entries");
  }
}

std::string Vocabulary::surface(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= size_) throw IndexError("token id " + std::to_string(id) + " out of range");
  return "w" + std::to_string(id);
}

int Vocabulary::id(const std::string& surface) const {
  if (surface.size() < 2 || surface[0] != 'w') return kUnkId;
  char* end = nullptr;
  const long v = std::strtol(surface.c_str() + 1, &end, 10);
  if (*end != '\0' || v < 0 || static_cast<std::size_t>(v) >= size_) return kUnkId;
  return static_cast<int>(v);
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < kFirstContentId) continue;
    if (!out.empty()) out += ' ';
    out += surface(id);
  }
  return out;
}

std::vector<SyntheticPair> generate_corpus(const CorpusOptions& o) {
  if (o.size == 0) throw ConfigError("corpus size must be >= 1");
  if (o.vocab_size < static_cast<std::size_t>(kFirstContentId) + 2) throw ConfigError("vocabulary too small");
  if (o.min_tokens == 0 || o.min_tokens > o.max_tokens) throw ConfigError("invalid token length range");
  if (o.min_duration == 0 || o.min_duration > o.max_duration) throw ConfigError("invalid duration range");
  if (o.noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  if (o.d_feature == 0) throw ConfigError("d_feature must be positive");

  const std::size_t n_content = o.vocab_size - kFirstContentId;
  std::vector<double> prototypes(n_content * o.d_feature);
  {
    auto rng = seeded_rng({o.seed, 0});
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : prototypes) v = normal(rng);
  }

  std::vector<SyntheticPair> pairs(o.size);
  for (std::size_t i = 0; i < o.size; ++i) {
    auto rng = seeded_rng({o.seed, 1, i});
    std::uniform_int_distribution<std::size_t> length(o.min_tokens, o.max_tokens);
    std::uniform_int_distribution<std::size_t> token(0, n_content - 1);
    std::uniform_int_distribution<std::size_t> duration(o.min_duration, o.max_duration);
    std::normal_distribution<double> noise(0.0, 1.0);

    auto& p = pairs[i];
    p.id = pair_name(i);
    const std::size_t L = length(rng);
    std::vector<std::size_t> content;
    while (content.size() < L) {
      const std::size_t t = token(rng);
      if (!content.empty() && content.back() == t) continue;
      content.push_back(t);
    }
    p.features.width = o.d_feature;
    for (std::size_t t : content) {
      p.tokens.push_back(static_cast<int>(t) + kFirstContentId);
      const std::size_t dur = duration(rng);
      for (std::size_t f = 0; f < dur; ++f) {
        for (std::size_t k = 0; k < o.d_feature; ++k) {
          const double eps = noise(rng);
          p.features.frames.push_back(quantize(prototypes[t * o.d_feature + k] + o.noise_sigma * eps));
        }
        ++p.features.length;
      }
    }
    p.tokens.push_back(kEosId);
  }
  return pairs;
}

std::vector<SyntheticPair> generate_corpus(std::uint64_t seed, std::size_t n, const Vocabulary& vocab,
                                           double noise_sigma) {
  CorpusOptions o;
  o.seed = seed;
  o.size = n;
  o.vocab_size = vocab.size();
  o.noise_sigma = noise_sigma;
  return generate_corpus(o);
}

CorpusSplit split_corpus(std::span<const SyntheticPair> pairs, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0.0; })) {
    throw ConfigError("split ratios must be nonnegative and sum to 1");
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded_rng({seed, 2});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(pairs.size());
  const auto n_train = static_cast<std::size_t>(std::floor(n * ratios[0] + 1e-9));
  const auto n_dev = static_cast<std::size_t>(std::floor(n * ratios[1] + 1e-9));
  CorpusSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_train ? split.train : (i < n_train + n_dev ? split.dev : split.test);
    dst.push_back(pairs[order[i]]);
  }
  return split;
}

std::vector<Batch> make_batches(std::span<const SyntheticPair> pairs, std::size_t batch_size, std::uint64_t seed,
                                bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    auto rng = seeded_rng({seed, 3});
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<FeatureSequence> feats;
    std::vector<TokenSequence> toks;
    Batch b;
    for (std::size_t i = start; i < end; ++i) {
      const auto& p = pairs[order[i]];
      b.ids.push_back(p.id);
      feats.push_back(p.features);
      toks.push_back(p.tokens);
    }
    b.features = PaddedFeatures::from(feats);
    b.targets = PaddedTokens::from(toks);
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<SyntheticPair> unbatch(const Batch& batch) {
  std::vector<SyntheticPair> out(batch.size());
  const auto& f = batch.features;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    out[b].id = batch.ids[b];
    out[b].tokens = batch.targets.row(b);
    out[b].features.width = f.width;
    out[b].features.length = f.true_length(b);
    const auto first = f.values.begin() + static_cast<std::ptrdiff_t>(b * f.length * f.width);
    out[b].features.frames.assign(first, first + static_cast<std::ptrdiff_t>(out[b].features.length * f.width));
  }
  return out;
}

std::string to_jsonl(const SyntheticPair& pair) {
  std::string s = "{\"id\": " + nlohmann::json(pair.id).dump() + ", \"tokens\": [";
  for (std::size_t i = 0; i < pair.tokens.size(); ++i) s += (i ? ", " : "") + std::to_string(pair.tokens[i]);
  s += "], \"features\": [";
  char buf[32];
  for (std::size_t t = 0; t < pair.features.length; ++t) {
    s += t ? ", [" : "[";
    auto frame = pair.features.frame(t);
    for (std::size_t k = 0; k < frame.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.9g", frame[k]);
      if (k) s += ", ";
      s += buf;
    }
    s += ']';
  }
  s += "]}";
  return s;
}

SyntheticPair from_jsonl(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed corpus line: ") + e.what());
  }
  SyntheticPair p;
  try {
    p.id = j.at("id").get<std::string>();
    p.tokens = j.at("tokens").get<std::vector<int>>();
    const auto& frames = j.at("features");
    p.features.length = frames.size();
    for (const auto& frame : frames) {
      const auto row = frame.get<std::vector<double>>();
      if (p.features.width == 0) p.features.width = row.size();
      if (row.size() != p.features.width) throw IoError("ragged feature rows in pair " + p.id);
      p.features.frames.insert(p.features.frames.end(), row.begin(), row.end());
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("invalid corpus record: ") + e.what());
  }
  if (p.tokens.empty() || p.tokens.back() != kEosId) throw IoError("token sequence of " + p.id + " must end with EOS");
  if (p.features.length == 0) throw IoError("pair " + p.id + " has no frames");
  return p;
}

void write_jsonl(const std::filesystem::path& path, std::span<const SyntheticPair> pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& p : pairs) out << to_jsonl(p) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<SyntheticPair> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<SyntheticPair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    pairs.push_back(from_jsonl(line));
  }
  return pairs;
}

}  // namespace cvslt

#include "cvslt/sequence.hpp"

#include <algorithm>

#include "cvslt/errors.hpp"

namespace cvslt {

PaddedFeatures PaddedFeatures::from(std::span<const FeatureSequence> sequences) {
  PaddedFeatures out;
  out.batch = sequences.size();
  for (const auto& s : sequences) {
    if (s.frames.size() != s.length * s.width) throw DimensionError("feature sequence size mismatch");
    if (out.width == 0) out.width = s.width;
    if (s.width != out.width) {
      throw DimensionError("feature width " + std::to_string(s.width) + " differs from " +
                           std::to_string(out.width));
    }
    out.length = std::max(out.length, s.length);
  }
  out.values.assign(out.batch * out.length * out.width, 0.0);
  out.mask.assign(out.batch * out.length, 0);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const auto& s = sequences[b];
    std::copy(s.frames.begin(), s.frames.end(), out.values.begin() +
              static_cast<std::ptrdiff_t>(b * out.length * out.width));
    std::fill_n(out.mask.begin() + static_cast<std::ptrdiff_t>(b * out.length), s.length, 1);
  }
  return out;
}

std::size_t PaddedFeatures::true_length(std::size_t b) const {
  return static_cast<std::size_t>(std::count(mask.begin() + static_cast<std::ptrdiff_t>(b * length),
                                             mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * length),
                                             std::uint8_t{1}));
}

PaddedTokens PaddedTokens::from(std::span<const TokenSequence> sequences) {
  PaddedTokens out;
  out.batch = sequences.size();
  for (const auto& s : sequences) out.length = std::max(out.length, s.size());
  out.ids.assign(out.batch * out.length, kPadId);
  out.mask.assign(out.batch * out.length, 0);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const auto& s = sequences[b];
    std::copy(s.begin(), s.end(), out.ids.begin() + static_cast<std::ptrdiff_t>(b * out.length));
    std::fill_n(out.mask.begin() + static_cast<std::ptrdiff_t>(b * out.length), s.size(), 1);
  }
  return out;
}

std::size_t PaddedTokens::true_length(std::size_t b) const {
  return static_cast<std::size_t>(std::count(mask.begin() + static_cast<std::ptrdiff_t>(b * length),
                                             mask.begin() + static_cast<std::ptrdiff_t>((b + 1) * length),
                                             std::uint8_t{1}));
}

TokenSequence PaddedTokens::row(std::size_t b) const {
  const auto first = ids.begin() + static_cast<std::ptrdiff_t>(b * length);
  return TokenSequence(first, first + static_cast<std::ptrdiff_t>(true_length(b)));
}

PaddedTokens shift_right(const PaddedTokens& targets) {
  PaddedTokens out = targets;
  for (std::size_t b = 0; b < targets.batch; ++b) {
    for (std::size_t t = 0; t < targets.length; ++t) {
      const auto i = b * targets.length + t;
      if (!targets.mask[i]) {
        out.ids[i] = kPadId;
      } else {
        out.ids[i] = t == 0 ? kBosId : targets.ids[i - 1];
      }
    }
  }
  return out;
}

}  // namespace cvslt

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace cvslt {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kFirstContentId = 4;

/// Token ids ending with EOS.
using TokenSequence = std::vector<int>;

/// Frame-level source features, row-major [length, width].
struct FeatureSequence {
  std::size_t length = 0;
  std::size_t width = 0;
  std::vector<double> frames;

  std::span<const double> frame(std::size_t t) const { return {frames.data() + t * width, width}; }
};

/// Zero-padded feature block [batch, length, width] with a frame mask [batch, length].
struct PaddedFeatures {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t width = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> mask;

  static PaddedFeatures from(std::span<const FeatureSequence> sequences);
  std::size_t true_length(std::size_t b) const;
};

/// PAD-filled token block [batch, length] with a token mask [batch, length].
struct PaddedTokens {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;

  static PaddedTokens from(std::span<const TokenSequence> sequences);
  std::size_t true_length(std::size_t b) const;
  TokenSequence row(std::size_t b) const;
};

/// Decoder input: BOS followed by the targets shifted right by one; same mask.
PaddedTokens shift_right(const PaddedTokens& targets);

}  // namespace cvslt

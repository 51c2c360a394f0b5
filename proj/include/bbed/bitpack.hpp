#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bbed/tensor.hpp"

namespace bbed {

inline constexpr std::size_t kWordBits = 64;

inline constexpr std::size_t words_for(std::size_t n) { return (n + kWordBits - 1) / kWordBits; }

/// Bit i of word w encodes element 64w+i: 1 is +1, 0 is -1. Pad bits are 0.
struct PackedBits {
  std::size_t n = 0;
  std::vector<std::uint64_t> words;

  bool operator==(const PackedBits&) const = default;
};

/// Every element must be exactly +1.0f or -1.0f.
PackedBits pack(std::span<const float> signs);
std::vector<float> unpack(const PackedBits& p);
PackedBits complement(const PackedBits& p);

/// Sum of a_i * b_i over the n valid positions.
std::int64_t xnor_dot(const PackedBits& a, const PackedBits& b);

/// NCHW feature map packed along channels: one run of `words_per_pixel`
/// words per (n, y, x) position.
struct PackedFeatureMap {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::size_t words_per_pixel = 0;
  std::vector<std::uint64_t> bits;
};

/// OIHW filters packed along input channels: one run per (o, ky, kx).
struct PackedFilters {
  std::size_t o = 0, c = 0, kh = 0, kw = 0;
  std::size_t words_per_tap = 0;
  std::vector<std::uint64_t> bits;
};

PackedFeatureMap pack_feature_map(const Tensor& signs);
PackedFilters pack_filters(const Tensor& signs);

/// Integer +-1 convolution. Padded taps contribute 0, matching zero padding
/// of the float reference. Output NCHW as int64 counts.
std::vector<std::int64_t> binary_conv2d_counts(const PackedFeatureMap& input, const PackedFilters& weights,
                                               int stride, int padding, std::size_t& out_h, std::size_t& out_w);

/// alpha has one entry per filter; the integer result is scaled once.
Tensor binary_conv2d(const PackedFeatureMap& input, const PackedFilters& weights, std::span<const float> alpha,
                     int stride, int padding);

struct SignActivation {
  Tensor signs;  // differentiable through the straight-through estimator
  PackedBits bits;
};

SignActivation sign_activation(const Tensor& input);

}  // namespace bbed

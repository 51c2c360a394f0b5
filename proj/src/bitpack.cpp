#include "bbed/bitpack.hpp"

#include <bit>
#include <stdexcept>
#include <string>

#include "bbed/ops.hpp"

namespace bbed {
namespace {

std::uint64_t sign_bit(float v, std::size_t index) {
  if (v == 1.0f) return 1;
  if (v == -1.0f) return 0;
  throw std::invalid_argument("pack: element " + std::to_string(index) + " is " + std::to_string(v) +
                              ", expected +1 or -1");
}

}  // namespace

PackedBits pack(std::span<const float> signs) {
  PackedBits p;
  p.n = signs.size();
  p.words.assign(words_for(p.n), 0);
  for (std::size_t i = 0; i < p.n; ++i) p.words[i / kWordBits] |= sign_bit(signs[i], i) << (i % kWordBits);
  return p;
}

std::vector<float> unpack(const PackedBits& p) {
  std::vector<float> out(p.n);
  for (std::size_t i = 0; i < p.n; ++i) out[i] = (p.words[i / kWordBits] >> (i % kWordBits)) & 1 ? 1.0f : -1.0f;
  return out;
}

PackedBits complement(const PackedBits& p) {
  PackedBits c = p;
  for (auto& w : c.words) w = ~w;
  if (const std::size_t tail = p.n % kWordBits; tail != 0) c.words.back() &= (std::uint64_t{1} << tail) - 1;
  return c;
}

std::int64_t xnor_dot(const PackedBits& a, const PackedBits& b) {
  if (a.n != b.n) {
    throw ShapeError("xnor_dot: length mismatch " + std::to_string(a.n) + " vs " + std::to_string(b.n));
  }
  std::int64_t mismatches = 0;
  for (std::size_t i = 0; i < a.words.size(); ++i) mismatches += std::popcount(a.words[i] ^ b.words[i]);
  return static_cast<std::int64_t>(a.n) - 2 * mismatches;
}

PackedFeatureMap pack_feature_map(const Tensor& signs) {
  if (signs.rank() != 4) throw ShapeError("pack_feature_map: expected NCHW, got " + shape_str(signs.shape()));
  PackedFeatureMap p{signs.dim(0), signs.dim(1), signs.dim(2), signs.dim(3), words_for(signs.dim(1)), {}};
  const std::size_t hw = p.h * p.w;
  p.bits.assign(p.n * hw * p.words_per_pixel, 0);
  auto v = signs.data();
  for (std::size_t n = 0; n < p.n; ++n) {
    for (std::size_t c = 0; c < p.c; ++c) {
      const float* plane = v.data() + (n * p.c + c) * hw;
      const std::uint64_t shift = c % kWordBits;
      const std::size_t word = c / kWordBits;
      for (std::size_t i = 0; i < hw; ++i) {
        p.bits[(n * hw + i) * p.words_per_pixel + word] |= sign_bit(plane[i], (n * p.c + c) * hw + i) << shift;
      }
    }
  }
  return p;
}

PackedFilters pack_filters(const Tensor& signs) {
  if (signs.rank() != 4) throw ShapeError("pack_filters: expected OIHW, got " + shape_str(signs.shape()));
  PackedFilters p{signs.dim(0), signs.dim(1), signs.dim(2), signs.dim(3), words_for(signs.dim(1)), {}};
  const std::size_t taps = p.kh * p.kw;
  p.bits.assign(p.o * taps * p.words_per_tap, 0);
  auto v = signs.data();
  for (std::size_t o = 0; o < p.o; ++o) {
    for (std::size_t c = 0; c < p.c; ++c) {
      for (std::size_t t = 0; t < taps; ++t) {
        const std::size_t src = (o * p.c + c) * taps + t;
        p.bits[(o * taps + t) * p.words_per_tap + c / kWordBits] |= sign_bit(v[src], src) << (c % kWordBits);
      }
    }
  }
  return p;
}

std::vector<std::int64_t> binary_conv2d_counts(const PackedFeatureMap& input, const PackedFilters& weights,
                                               int stride, int padding, std::size_t& out_h, std::size_t& out_w) {
  if (stride < 1) throw ShapeError("binary_conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ShapeError("binary_conv2d: padding must be >= 0, got " + std::to_string(padding));
  if (input.c != weights.c) {
    throw ShapeError("binary_conv2d: input has " + std::to_string(input.c) + " channels but weight expects " +
                     std::to_string(weights.c));
  }
  const long ph = static_cast<long>(input.h) + 2L * padding;
  const long pw = static_cast<long>(input.w) + 2L * padding;
  if (ph < static_cast<long>(weights.kh) || pw < static_cast<long>(weights.kw)) {
    throw ShapeError("binary_conv2d: kernel larger than padded input");
  }
  out_h = static_cast<std::size_t>((ph - static_cast<long>(weights.kh)) / stride + 1);
  out_w = static_cast<std::size_t>((pw - static_cast<long>(weights.kw)) / stride + 1);

  const std::size_t wpp = input.words_per_pixel;
  const std::int64_t c = static_cast<std::int64_t>(input.c);
  std::vector<std::int64_t> out(input.n * weights.o * out_h * out_w, 0);
  for (std::size_t n = 0; n < input.n; ++n) {
    const std::uint64_t* img = input.bits.data() + n * input.h * input.w * wpp;
    for (std::size_t o = 0; o < weights.o; ++o) {
      const std::uint64_t* filt = weights.bits.data() + o * weights.kh * weights.kw * wpp;
      std::int64_t* dst = out.data() + (n * weights.o + o) * out_h * out_w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          std::int64_t acc = 0;
          for (std::size_t ky = 0; ky < weights.kh; ++ky) {
            const long iy = static_cast<long>(oy) * stride - padding + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(input.h)) continue;
            for (std::size_t kx = 0; kx < weights.kw; ++kx) {
              const long ix = static_cast<long>(ox) * stride - padding + static_cast<long>(kx);
              if (ix < 0 || ix >= static_cast<long>(input.w)) continue;
              const std::uint64_t* a = img + (static_cast<std::size_t>(iy) * input.w + static_cast<std::size_t>(ix)) * wpp;
              const std::uint64_t* b = filt + (ky * weights.kw + kx) * wpp;
              std::int64_t mismatches = 0;
              for (std::size_t k = 0; k < wpp; ++k) mismatches += std::popcount(a[k] ^ b[k]);
              acc += c - 2 * mismatches;
            }
          }
          dst[oy * out_w + ox] = acc;
        }
      }
    }
  }
  return out;
}

Tensor binary_conv2d(const PackedFeatureMap& input, const PackedFilters& weights, std::span<const float> alpha,
                     int stride, int padding) {
  if (alpha.size() != weights.o) {
    throw ShapeError("binary_conv2d: " + std::to_string(alpha.size()) + " scales for " + std::to_string(weights.o) +
                     " filters");
  }
  std::size_t oh = 0, ow = 0;
  auto counts = binary_conv2d_counts(input, weights, stride, padding, oh, ow);
  Tensor out({input.n, weights.o, oh, ow});
  auto dst = out.data();
  const std::size_t plane = oh * ow;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    dst[i] = alpha[(i / plane) % weights.o] * static_cast<float>(counts[i]);
  }
  check_finite(out.data(), "binary_conv2d");
  return out;
}

SignActivation sign_activation(const Tensor& input) {
  SignActivation s{sign_ste(input), {}};
  s.bits = pack(s.signs.data());
  return s;
}

}  // namespace bbed

#pragma once

// Randomized checks of box statistics, PCA and CAM against independent oracles.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "bbed/robustness.hpp"
#include "test_util.hpp"

namespace bbed::fixtures {

/// k-th smallest element by counting, no sorting.
inline double order_statistic(const std::vector<double>& v, std::size_t k) {
  for (double e : v) {
    std::size_t less = 0, equal = 0;
    for (double u : v) {
      less += u < e;
      equal += u == e;
    }
    if (less <= k && k < less + equal) return e;
  }
  return v.front();
}

inline double brute_quantile(const std::vector<double>& v, double q) {
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(h);
  const double a = order_statistic(v, lo);
  if (lo + 1 >= v.size()) return a;
  return a + (h - static_cast<double>(lo)) * (order_statistic(v, lo + 1) - a);
}

/// One random list; box_stats against the counting oracle. Empty string on success.
inline std::string run_box_case(std::mt19937_64& rng) {
  const std::size_t n = rand_dim(rng, 1, 40);
  std::vector<double> v(n);
  const bool ties = std::bernoulli_distribution(0.3)(rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& x : v) x = ties ? std::round(gauss(rng) * 2.0) : gauss(rng);
  if (std::bernoulli_distribution(0.3)(rng)) v[0] = 25.0;  // likely outlier
  const auto b = box_stats(v);
  const double q1 = brute_quantile(v, 0.25), med = brute_quantile(v, 0.5), q3 = brute_quantile(v, 0.75);
  auto close = [](double a, double c) { return std::abs(a - c) <= 1e-12 * std::max(1.0, std::abs(c)); };
  if (!close(b.q1, q1) || !close(b.median, med) || !close(b.q3, q3)) return "quartiles differ";
  if (b.min != order_statistic(v, 0) || b.max != order_statistic(v, n - 1)) return "extremes differ";
  // Fences from the checked quartiles so boundary ties classify the same way.
  const double lo = b.q1 - 1.5 * (b.q3 - b.q1), hi = b.q3 + 1.5 * (b.q3 - b.q1);
  std::size_t outliers = 0;
  double wl = 1e300, wh = -1e300;
  for (double x : v) {
    if (x < lo || x > hi) {
      ++outliers;
    } else {
      wl = std::min(wl, x);
      wh = std::max(wh, x);
    }
  }
  if (outliers != b.outliers.size()) return "outlier count differs";
  if (b.whisker_low != wl || b.whisker_high != wh) return "whiskers differ";
  return "";
}

/// Random observations: orthonormal components and reconstruction of the
/// centered (optionally scaled) data within 1e-5 relative Frobenius error.
inline std::string run_pca_case(std::mt19937_64& rng) {
  const std::size_t n = rand_dim(rng, 2, 30), p = rand_dim(rng, 1, 6);
  std::vector<std::string> names;
  for (std::size_t j = 0; j < p; ++j) names.push_back("c" + std::to_string(j));
  ObservationMatrix m(names);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(p);
    for (std::size_t j = 0; j < p; ++j) row[j] = gauss(rng) * static_cast<double>(j + 1) + 3.0;
    m.add_row(row);
  }
  const bool standardize = std::bernoulli_distribution(0.5)(rng);
  const auto r = pca(m, standardize);
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = 0; b < p; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < p; ++j) dot += r.components[a][j] * r.components[b][j];
      if (std::abs(dot - (a == b ? 1.0 : 0.0)) > 1e-6) return "components not orthonormal";
    }
  }
  double err = 0.0, norm = 0.0, ratio_sum = 0.0;
  for (double x : r.explained_variance_ratio) ratio_sum += x;
  if (std::abs(ratio_sum - 1.0) > 1e-9) return "ratios do not sum to 1";
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double centered = m.rows()[i][j];
      double mean = 0.0;
      for (std::size_t k = 0; k < n; ++k) mean += m.rows()[k][j];
      centered -= mean / static_cast<double>(n);
      if (standardize) centered /= r.scale[j];
      double rec = 0.0;
      for (std::size_t k = 0; k < p; ++k) rec += r.scores[i][k] * r.components[k][j];
      err += (rec - centered) * (rec - centered);
      norm += centered * centered;
    }
  }
  if (std::sqrt(err) > 1e-5 * std::max(std::sqrt(norm), 1e-300)) return "reconstruction error too large";
  return "";
}

/// CAM with weights w1 + w2 against cam(w1) + cam(w2). Weights are multiples
/// of 2^-10 so their float sum is exact.
inline std::string run_cam_linearity_case(std::mt19937_64& rng) {
  const std::size_t k = rand_dim(rng, 1, 32), h = rand_dim(rng, 1, 8), w = rand_dim(rng, 1, 8);
  Tensor f = random_tensor({k, h, w}, rng, 0.0f, 3.0f);
  std::uniform_int_distribution<int> tick(-2048, 2048);
  std::vector<float> w1(k), w2(k), w12(k);
  for (std::size_t i = 0; i < k; ++i) {
    w1[i] = static_cast<float>(tick(rng)) / 1024.0f;
    w2[i] = static_cast<float>(tick(rng)) / 1024.0f;
    w12[i] = w1[i] + w2[i];
  }
  const auto a = cam_from_features(f.data(), k, h, w, w1);
  const auto b = cam_from_features(f.data(), k, h, w, w2);
  const auto c = cam_from_features(f.data(), k, h, w, w12);
  for (std::size_t i = 0; i < h * w; ++i) {
    if (std::abs(c.raw[i] - (a.raw[i] + b.raw[i])) > 1e-6) return "pixel " + std::to_string(i) + " not additive";
  }
  return "";
}

}  // namespace bbed::fixtures

#pragma once

// Randomized finite-difference cases for every differentiable op. Shared by
// the unit tests and the acceptance suite.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bbed/autograd.hpp"
#include "bbed/ops.hpp"
#include "test_util.hpp"

namespace bbed::fixtures {

struct GradientCase {
  std::string name;
  double error = 0.0;
};

inline Tensor weighted_sum(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

inline Shape random_nchw(std::mt19937_64& rng, std::size_t min_hw = 1) {
  return {rand_dim(rng, 1, 4), rand_dim(rng, 1, 4), rand_dim(rng, min_hw, 8), rand_dim(rng, min_hw, 8)};
}

inline const std::vector<std::string>& gradient_op_names() {
  static const std::vector<std::string> names = {
      "add",       "sub",          "mul",         "scale",       "sum",        "mean",
      "relu",      "conv2d.input", "conv2d.weight", "batchnorm.stats", "batchnorm.batch", "batchnorm.gamma",
      "max_pool2d", "global_average_pool", "linear.input", "linear.weight", "linear.bias",
      "softmax_cross_entropy", "soft_cross_entropy", "reshape"};
  return names;
}

/// Runs one random case of op `which` and returns its grad_check error.
inline GradientCase run_gradient_case(std::size_t which, std::mt19937_64& rng, float h = 1e-2f) {
  const auto& names = gradient_op_names();
  GradientCase out{names.at(which), 0.0};
  std::function<Tensor(const Tensor&)> f;
  Tensor x;

  switch (which) {
    case 0: case 1: case 2: {
      auto shape = random_nchw(rng);
      x = random_tensor(shape, rng);
      auto other = random_tensor(shape, rng);
      auto w = random_tensor(shape, rng);
      f = [which, other, w](const Tensor& v) {
        Tensor r = which == 0 ? add(v, other) : which == 1 ? sub(other, v) : mul(v, add(v, other));
        return weighted_sum(r, w);
      };
      break;
    }
    case 3: {
      auto shape = random_nchw(rng);
      x = random_tensor(shape, rng);
      auto w = random_tensor(shape, rng);
      const float s = std::uniform_real_distribution<float>(-2.0f, 2.0f)(rng);
      f = [w, s](const Tensor& v) { return weighted_sum(scale(v, s), w); };
      break;
    }
    case 4: case 5: {
      x = random_tensor(random_nchw(rng), rng);
      f = [which](const Tensor& v) {
        Tensor r = which == 4 ? sum(mul(v, v)) : mean(mul(v, v));
        return r;
      };
      break;
    }
    case 6: {
      auto shape = random_nchw(rng);
      x = spaced_tensor(shape, rng, 0.05f);
      auto w = random_tensor(shape, rng);
      f = [w](const Tensor& v) { return weighted_sum(relu(v), w); };
      break;
    }
    case 7: case 8: {
      auto in_shape = random_nchw(rng, 3);
      const std::size_t k = rand_dim(rng, 1, 3);
      const int stride = static_cast<int>(rand_dim(rng, 1, 2));
      const int pad = static_cast<int>(rand_dim(rng, 0, 1));
      Shape w_shape{rand_dim(rng, 1, 4), in_shape[1], k, k};
      auto input = random_tensor(in_shape, rng);
      auto weight = random_tensor(w_shape, rng);
      auto probe = conv2d(input, weight, stride, pad);
      auto w = random_tensor(probe.shape(), rng);
      if (which == 7) {
        x = input;
        f = [=](const Tensor& v) { return weighted_sum(conv2d(v, weight, stride, pad), w); };
      } else {
        x = weight;
        f = [=](const Tensor& v) { return weighted_sum(conv2d(input, v, stride, pad), w); };
      }
      break;
    }
    case 9: case 10: case 11: {
      auto shape = random_nchw(rng, 2);
      const std::size_t c = shape[1];
      auto input = random_tensor(shape, rng);
      auto gamma = random_tensor({c}, rng, 0.5f, 1.5f);
      auto beta = random_tensor({c}, rng);
      auto rmean = random_tensor({c}, rng, -0.2f, 0.2f);
      auto rvar = random_tensor({c}, rng, 0.5f, 1.5f);
      auto w = random_tensor(shape, rng);
      const auto mode = which == 9 ? BatchNormMode::statistics : BatchNormMode::minibatch;
      if (which == 11) {
        x = gamma;
        f = [=](const Tensor& v) {
          Tensor rm = rmean.clone(), rv = rvar.clone();
          return weighted_sum(batchnorm(input, v, beta, rm, rv, BatchNormMode::minibatch), w);
        };
      } else {
        x = input;
        f = [=](const Tensor& v) {
          Tensor rm = rmean.clone(), rv = rvar.clone();
          return weighted_sum(batchnorm(v, gamma, beta, rm, rv, mode), w);
        };
      }
      break;
    }
    case 12: {
      auto shape = random_nchw(rng, 2);
      x = spaced_tensor(shape, rng, 0.05f);
      const int k = static_cast<int>(rand_dim(rng, 1, 2));
      const int s = static_cast<int>(rand_dim(rng, 1, 2));
      auto w = random_tensor(max_pool2d(x, k, s).shape(), rng);
      f = [=](const Tensor& v) { return weighted_sum(max_pool2d(v, k, s), w); };
      break;
    }
    case 13: {
      auto shape = random_nchw(rng);
      x = random_tensor(shape, rng);
      auto w = random_tensor({shape[0], shape[1]}, rng);
      f = [w](const Tensor& v) { return weighted_sum(global_average_pool(v), w); };
      break;
    }
    case 14: case 15: case 16: {
      const std::size_t n = rand_dim(rng, 1, 4), k = rand_dim(rng, 1, 16), o = rand_dim(rng, 1, 8);
      auto input = random_tensor({n, k}, rng);
      auto weight = random_tensor({o, k}, rng);
      auto bias = random_tensor({o}, rng);
      auto w = random_tensor({n, o}, rng);
      if (which == 14) {
        x = input;
        f = [=](const Tensor& v) { return weighted_sum(linear(v, weight, bias), w); };
      } else if (which == 15) {
        x = weight;
        f = [=](const Tensor& v) { return weighted_sum(linear(input, v, bias), w); };
      } else {
        x = bias;
        f = [=](const Tensor& v) { return weighted_sum(linear(input, weight, v), w); };
      }
      break;
    }
    case 17: {
      const std::size_t n = rand_dim(rng, 1, 4), c = rand_dim(rng, 2, 10);
      x = random_tensor({n, c}, rng, -3.0f, 3.0f);
      std::vector<int> labels(n);
      for (auto& l : labels) l = static_cast<int>(rand_dim(rng, 0, c - 1));
      f = [labels](const Tensor& v) { return softmax_cross_entropy(v, labels); };
      break;
    }
    case 18: {
      const std::size_t n = rand_dim(rng, 1, 4), c = rand_dim(rng, 2, 10);
      x = random_tensor({n, c}, rng, -3.0f, 3.0f);
      auto t = softmax_rows(random_tensor({n, c}, rng, -2.0f, 2.0f).data(), c);
      f = [t](const Tensor& v) { return soft_cross_entropy(v, t); };
      break;
    }
    case 19: {
      auto shape = random_nchw(rng);
      x = random_tensor(shape, rng);
      const std::size_t n = shape_numel(shape);
      auto w = random_tensor({n}, rng);
      f = [w, n](const Tensor& v) { return weighted_sum(mul(v.reshape({n}), v.reshape({n})), w); };
      break;
    }
    default:
      throw std::out_of_range("no gradient case " + std::to_string(which));
  }
  out.error = grad_check(f, x, h);
  return out;
}

}  // namespace bbed::fixtures

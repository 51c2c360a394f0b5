#include "bbed/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace bbed {
namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

bool any_grad(std::initializer_list<const Tensor*> ts) {
  return std::any_of(ts.begin(), ts.end(), [](const Tensor* t) { return t->requires_grad(); });
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow;
  int stride, padding;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0, got " + std::to_string(padding));
  ConvGeometry g{};
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.o = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (weight.dim(1) != g.c) {
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  const auto ph = static_cast<long>(g.h) + 2L * padding;
  const auto pw = static_cast<long>(g.w) + 2L * padding;
  if (ph < static_cast<long>(g.kh) || pw < static_cast<long>(g.kw)) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  g.oh = static_cast<std::size_t>((ph - static_cast<long>(g.kh)) / stride + 1);
  g.ow = static_cast<std::size_t>((pw - static_cast<long>(g.kw)) / stride + 1);
  return g;
}

// cols: (C*KH*KW) x (OH*OW) for one image.
void im2col(const float* img, const ConvGeometry& g, float* cols) {
  const long pad = g.padding;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        float* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - pad + static_cast<long>(ky);
          float* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0f);
            continue;
          }
          const float* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - pad + static_cast<long>(kx);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const float* cols, const ConvGeometry& g, float* img) {
  const long pad = g.padding;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const float* row = cols + ((c * g.kh + ky) * g.kw + kx) * g.positions();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          float* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const float* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - pad + static_cast<long>(kx);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

std::vector<float> log_softmax_row(const float* z, std::size_t c) {
  const float mx = *std::max_element(z, z + c);
  double s = 0.0;
  for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(z[j] - mx));
  const float lse = mx + static_cast<float>(std::log(s));
  std::vector<float> out(c);
  for (std::size_t j = 0; j < c; ++j) out[j] = z[j] - lse;
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return make_result(a.shape(), std::move(out), "add", {&a, &b}, [ga, gb](std::span<const float> g) {
    std::vector<float> v(g.begin(), g.end());
    return std::vector<std::vector<float>>{ga ? v : std::vector<float>{}, gb ? v : std::vector<float>{}};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return make_result(a.shape(), std::move(out), "sub", {&a, &b}, [ga, gb](std::span<const float> g) {
    std::vector<float> pos, neg;
    if (ga) pos.assign(g.begin(), g.end());
    if (gb) {
      neg.resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
    }
    return std::vector<std::vector<float>>{std::move(pos), std::move(neg)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  if (!any_grad({&a, &b})) return make_result(a.shape(), std::move(out), "mul", {}, {});
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  auto sa = a.impl()->storage, sb = b.impl()->storage;
  return make_result(a.shape(), std::move(out), "mul", {&a, &b}, [ga, gb, sa, sb](std::span<const float> g) {
    std::vector<float> da, db;
    if (ga) {
      da.resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * (*sb)[i];
    }
    if (gb) {
      db.resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * (*sa)[i];
    }
    return std::vector<std::vector<float>>{std::move(da), std::move(db)};
  });
}

Tensor scale(const Tensor& a, float s) {
  auto x = a.data();
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_result(a.shape(), std::move(out), "scale", {&a}, [s](std::span<const float> g) {
    std::vector<float> d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * s;
    return std::vector<std::vector<float>>{std::move(d)};
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  const auto n = a.numel();
  return make_result(Shape{1}, {static_cast<float>(s)}, "sum", {&a}, [n](std::span<const float> g) {
    return std::vector<std::vector<float>>{std::vector<float>(n, g[0])};
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (float v : a.data()) s += v;
  const auto n = a.numel();
  const float inv = 1.0f / static_cast<float>(n);
  return make_result(Shape{1}, {static_cast<float>(s / static_cast<double>(n))}, "mean", {&a},
                     [n, inv](std::span<const float> g) {
                       return std::vector<std::vector<float>>{std::vector<float>(n, g[0] * inv)};
                     });
}

Tensor relu(const Tensor& x) {
  auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
  if (!x.requires_grad()) return make_result(x.shape(), std::move(out), "relu", {}, {});
  auto src = x.impl()->storage;
  return make_result(x.shape(), std::move(out), "relu", {&x}, [src](std::span<const float> g) {
    std::vector<float> d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = (*src)[i] > 0.0f ? g[i] : 0.0f;
    return std::vector<std::vector<float>>{std::move(d)};
  });
}

Tensor sign_ste(const Tensor& x) {
  auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] >= 0.0f ? 1.0f : -1.0f;
  if (!x.requires_grad()) return make_result(x.shape(), std::move(out), "sign_ste", {}, {});
  auto src = x.impl()->storage;
  return make_result(x.shape(), std::move(out), "sign_ste", {&x}, [src](std::span<const float> g) {
    std::vector<float> d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = std::abs((*src)[i]) <= 1.0f ? g[i] : 0.0f;
    return std::vector<std::vector<float>>{std::move(d)};
  });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding) {
  const auto g = conv_geometry(input, weight, stride, padding);
  std::vector<float> out(g.n * g.o * g.positions());
  std::vector<float> cols(g.patch() * g.positions());
  ConstMatMap w(weight.data().data(), static_cast<Eigen::Index>(g.o), static_cast<Eigen::Index>(g.patch()));
  ConstMatMap colm(cols.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.positions()));
  const float* in = input.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(in + n * g.c * g.h * g.w, g, cols.data());
    MatMap o(out.data() + n * g.o * g.positions(), static_cast<Eigen::Index>(g.o),
             static_cast<Eigen::Index>(g.positions()));
    o.noalias() = w * colm;
  }
  Shape shape{g.n, g.o, g.oh, g.ow};
  if (!any_grad({&input, &weight})) return make_result(shape, std::move(out), "conv2d", {}, {});
  const bool gi = input.requires_grad(), gw = weight.requires_grad();
  auto in_store = input.impl()->storage;
  auto w_store = weight.impl()->storage;
  return make_result(shape, std::move(out), "conv2d", {&input, &weight},
                     [g, gi, gw, in_store, w_store](std::span<const float> gout) {
                       std::vector<float> din, dw;
                       if (gi) din.assign(g.n * g.c * g.h * g.w, 0.0f);
                       if (gw) dw.assign(g.o * g.patch(), 0.0f);
                       std::vector<float> cols(g.patch() * g.positions());
                       const auto P = static_cast<Eigen::Index>(g.patch());
                       const auto Q = static_cast<Eigen::Index>(g.positions());
                       const auto O = static_cast<Eigen::Index>(g.o);
                       ConstMatMap w(w_store->data(), O, P);
                       for (std::size_t n = 0; n < g.n; ++n) {
                         ConstMatMap go(gout.data() + n * g.o * g.positions(), O, Q);
                         if (gw) {
                           im2col(in_store->data() + n * g.c * g.h * g.w, g, cols.data());
                           ConstMatMap colm(cols.data(), P, Q);
                           MatMap dwm(dw.data(), O, P);
                           dwm.noalias() += go * colm.transpose();
                         }
                         if (gi) {
                           MatMap dcols(cols.data(), P, Q);
                           dcols.noalias() = w.transpose() * go;
                           col2im(cols.data(), g, din.data() + n * g.c * g.h * g.w);
                         }
                       }
                       return std::vector<std::vector<float>>{std::move(din), std::move(dw)};
                     });
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, BatchNormMode mode, float epsilon, float momentum, bool update_running) {
  if (input.rank() != 2 && input.rank() != 4) {
    throw ShapeError("batchnorm: input must be NC or NCHW, got " + shape_str(input.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1);
  const std::size_t spatial = input.rank() == 4 ? input.dim(2) * input.dim(3) : 1;
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->numel() != c) {
      throw ShapeError("batchnorm: per-channel parameter has " + std::to_string(p->numel()) +
                       " values, input has " + std::to_string(c) + " channels");
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (running_var.data()[ch] < 0.0f) {
      throw std::invalid_argument("batchnorm: negative running variance in channel " + std::to_string(ch));
    }
  }
  if (epsilon < 0.0f) throw std::invalid_argument("batchnorm: epsilon must be >= 0");

  const std::size_t count = n * spatial;
  auto x = input.data();
  std::vector<float> mu(c), inv_std(c);
  if (mode == BatchNormMode::statistics) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = running_mean.data()[ch];
      inv_std[ch] = 1.0f / std::sqrt(running_var.data()[ch] + epsilon);
    }
  } else {
    if (count == 0) throw ShapeError("batchnorm: empty batch in minibatch mode");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const float* p = x.data() + (b * c + ch) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) s += p[k];
      }
      const double m = s / static_cast<double>(count);
      for (std::size_t b = 0; b < n; ++b) {
        const float* p = x.data() + (b * c + ch) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) s2 += (p[k] - m) * (p[k] - m);
      }
      const double var = s2 / static_cast<double>(count);
      mu[ch] = static_cast<float>(m);
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + epsilon));
      if (update_running) {
        running_mean.data()[ch] = (1.0f - momentum) * running_mean.data()[ch] + momentum * static_cast<float>(m);
        running_var.data()[ch] = (1.0f - momentum) * running_var.data()[ch] + momentum * static_cast<float>(var);
      }
    }
  }
  if (mode == BatchNormMode::minibatch) {
    for (float s : inv_std) {
      if (!std::isfinite(s)) throw NumericError("batchnorm: zero variance with epsilon 0");
    }
  }

  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<float> xhat(x.size()), out(x.size());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * spatial;
      for (std::size_t k = 0; k < spatial; ++k) {
        const float h = (x[off + k] - mu[ch]) * inv_std[ch];
        xhat[off + k] = h;
        out[off + k] = gm[ch] * h + bt[ch];
      }
    }
  }
  if (!any_grad({&input, &gamma, &beta})) return make_result(input.shape(), std::move(out), "batchnorm", {}, {});
  const bool gi = input.requires_grad(), gg = gamma.requires_grad(), gb = beta.requires_grad();
  auto gstore = gamma.impl()->storage;
  return make_result(
      input.shape(), std::move(out), "batchnorm", {&input, &gamma, &beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const float> g) {
        std::vector<float> dgamma(c, 0.0f), dbeta(c, 0.0f), din;
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) {
              sum_g[ch] += g[off + k];
              sum_gx[ch] += static_cast<double>(g[off + k]) * xhat[off + k];
            }
          }
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
          dgamma[ch] = static_cast<float>(sum_gx[ch]);
          dbeta[ch] = static_cast<float>(sum_g[ch]);
        }
        if (gi) {
          din.resize(g.size());
          const auto& gmv = *gstore;
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t off = (b * c + ch) * spatial;
              const float k1 = gmv[ch] * inv_std[ch];
              if (mode == BatchNormMode::statistics) {
                for (std::size_t k = 0; k < spatial; ++k) din[off + k] = k1 * g[off + k];
              } else {
                const auto cnt = static_cast<double>(count);
                const double mg = sum_g[ch] / cnt, mgx = sum_gx[ch] / cnt;
                for (std::size_t k = 0; k < spatial; ++k) {
                  din[off + k] = static_cast<float>(k1 * (g[off + k] - mg - xhat[off + k] * mgx));
                }
              }
            }
          }
        }
        return std::vector<std::vector<float>>{std::move(din), gg ? std::move(dgamma) : std::vector<float>{},
                                               gb ? std::move(dbeta) : std::vector<float>{}};
      });
}

Tensor scale_channels(const Tensor& x, std::span<const float> scales) {
  if (x.rank() < 2 || x.dim(1) != scales.size()) {
    throw ShapeError("scale_channels: " + std::to_string(scales.size()) + " scales for input " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  const std::size_t plane = x.numel() / (x.dim(0) * c);
  std::vector<float> s(scales.begin(), scales.end());
  auto in = x.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * s[(i / plane) % c];
  return make_result(x.shape(), std::move(out), "scale_channels", {&x}, [s, plane, c](std::span<const float> g) {
    std::vector<float> d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * s[(i / plane) % c];
    return std::vector<std::vector<float>>{std::move(d)};
  });
}

Tensor max_pool2d(const Tensor& input, int kernel, int stride) {
  require_rank(input, 4, "max_pool2d", "input");
  if (kernel < 1 || stride < 1) throw ShapeError("max_pool2d: kernel and stride must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const auto k = static_cast<std::size_t>(kernel), s = static_cast<std::size_t>(stride);
  if (h < k || w < k) throw ShapeError("max_pool2d: kernel larger than input " + shape_str(input.shape()));
  const std::size_t oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  auto x = input.data();
  std::vector<float> out(n * c * oh * ow);
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t p = 0; p < n * c; ++p) {
    const float* src = x.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * s) * w + ox * s;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t idx = (oy * s + ky) * w + ox * s + kx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = src[best];
        argmax[o] = static_cast<std::uint32_t>(p * h * w + best);
      }
    }
  }
  if (!input.requires_grad()) return make_result({n, c, oh, ow}, std::move(out), "max_pool2d", {}, {});
  const std::size_t in_size = x.size();
  return make_result({n, c, oh, ow}, std::move(out), "max_pool2d", {&input},
                     [argmax = std::move(argmax), in_size](std::span<const float> g) {
                       std::vector<float> d(in_size, 0.0f);
                       for (std::size_t i = 0; i < g.size(); ++i) d[argmax[i]] += g[i];
                       return std::vector<std::vector<float>>{std::move(d)};
                     });
}

Tensor global_average_pool(const Tensor& input) {
  require_rank(input, 4, "global_average_pool", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (hw == 0) throw ShapeError("global_average_pool: empty spatial extent");
  auto x = input.data();
  std::vector<float> out(n * c);
  for (std::size_t p = 0; p < n * c; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < hw; ++k) s += x[p * hw + k];
    out[p] = static_cast<float>(s / static_cast<double>(hw));
  }
  return make_result({n, c}, std::move(out), "global_average_pool", {&input}, [hw](std::span<const float> g) {
    std::vector<float> d(g.size() * hw);
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::size_t p = 0; p < g.size(); ++p) std::fill_n(d.begin() + static_cast<long>(p * hw), hw, g[p] * inv);
    return std::vector<std::vector<float>>{std::move(d)};
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.dim(0), k = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != k) {
    throw ShapeError("linear: input has " + std::to_string(k) + " features, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.numel() != o) throw ShapeError("linear: bias length mismatch");
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), O = static_cast<Eigen::Index>(o);
  std::vector<float> out(n * o);
  MatMap y(out.data(), N, O);
  y.noalias() = ConstMatMap(x.data().data(), N, K) * ConstMatMap(weight.data().data(), O, K).transpose();
  if (bias.defined()) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < o; ++j) out[r * o + j] += bias.data()[j];
    }
  }
  const bool gx = x.requires_grad(), gw = weight.requires_grad(), gb = bias.defined() && bias.requires_grad();
  if (!gx && !gw && !gb) return make_result({n, o}, std::move(out), "linear", {}, {});
  auto xs = x.impl()->storage, ws = weight.impl()->storage;
  Tensor b = bias.defined() ? bias : Tensor(Shape{0});
  return make_result({n, o}, std::move(out), "linear", {&x, &weight, &b},
                     [=](std::span<const float> g) {
                       std::vector<float> dx, dw, db;
                       ConstMatMap go(g.data(), N, O);
                       if (gx) {
                         dx.resize(n * k);
                         MatMap(dx.data(), N, K).noalias() = go * ConstMatMap(ws->data(), O, K);
                       }
                       if (gw) {
                         dw.resize(o * k);
                         MatMap(dw.data(), O, K).noalias() = go.transpose() * ConstMatMap(xs->data(), N, K);
                       }
                       if (gb) {
                         db.assign(o, 0.0f);
                         for (std::size_t r = 0; r < n; ++r) {
                           for (std::size_t j = 0; j < o; ++j) db[j] += g[r * o + j];
                         }
                       }
                       return std::vector<std::vector<float>>{std::move(dx), std::move(dw), std::move(db)};
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match batch size");
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto z = logits.data();
  double loss = 0.0;
  std::vector<float> probs(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    auto ls = log_softmax_row(z.data() + r * c, c);
    loss -= ls[static_cast<std::size_t>(labels[r])];
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(ls[j]);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result({1}, {static_cast<float>(loss / static_cast<double>(n))}, "softmax_cross_entropy", {&logits},
                     [probs = std::move(probs), lab = std::move(lab), n, c](std::span<const float> g) {
                       std::vector<float> d(probs);
                       const float s = g[0] / static_cast<float>(n);
                       for (std::size_t r = 0; r < n; ++r) {
                         d[r * c + static_cast<std::size_t>(lab[r])] -= 1.0f;
                         for (std::size_t j = 0; j < c; ++j) d[r * c + j] *= s;
                       }
                       return std::vector<std::vector<float>>{std::move(d)};
                     });
}

Tensor soft_cross_entropy(const Tensor& logits, std::span<const float> target_probs) {
  require_rank(logits, 2, "soft_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (target_probs.size() != n * c) throw ShapeError("soft_cross_entropy: target size mismatch");
  if (n == 0) throw ShapeError("soft_cross_entropy: empty batch");
  auto z = logits.data();
  double loss = 0.0;
  std::vector<float> probs(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    auto ls = log_softmax_row(z.data() + r * c, c);
    for (std::size_t j = 0; j < c; ++j) {
      loss -= static_cast<double>(target_probs[r * c + j]) * ls[j];
      probs[r * c + j] = std::exp(ls[j]);
    }
  }
  std::vector<float> targets(target_probs.begin(), target_probs.end());
  return make_result({1}, {static_cast<float>(loss / static_cast<double>(n))}, "soft_cross_entropy", {&logits},
                     [probs = std::move(probs), targets = std::move(targets), n, c](std::span<const float> g) {
                       std::vector<float> d(n * c);
                       const float s = g[0] / static_cast<float>(n);
                       for (std::size_t r = 0; r < n; ++r) {
                         float mass = 0.0f;
                         for (std::size_t j = 0; j < c; ++j) mass += targets[r * c + j];
                         for (std::size_t j = 0; j < c; ++j) {
                           d[r * c + j] = s * (mass * probs[r * c + j] - targets[r * c + j]);
                         }
                       }
                       return std::vector<std::vector<float>>{std::move(d)};
                     });
}

std::vector<float> softmax_rows(std::span<const float> logits, std::size_t classes, float temperature) {
  if (classes == 0 || logits.size() % classes != 0) throw ShapeError("softmax_rows: bad class count");
  if (!(temperature > 0.0f)) throw std::invalid_argument("softmax_rows: temperature must be positive");
  std::vector<float> out(logits.size());
  std::vector<float> row(classes);
  for (std::size_t r = 0; r < logits.size() / classes; ++r) {
    for (std::size_t j = 0; j < classes; ++j) row[j] = logits[r * classes + j] / temperature;
    auto ls = log_softmax_row(row.data(), classes);
    for (std::size_t j = 0; j < classes; ++j) out[r * classes + j] = std::exp(ls[j]);
  }
  return out;
}

Sgd::Sgd(std::vector<Tensor> params, float lr, float momentum, float weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0f);
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.data();
    auto g = p.grad();
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const float gk = g[k] + weight_decay_ * w[k];
      v[k] = momentum_ * v[k] + gk;
      w[k] -= lr_ * v[k];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void sgd_step(std::span<Tensor> params, std::span<std::vector<float>> velocity, float lr, float momentum) {
  if (params.size() != velocity.size()) throw std::invalid_argument("sgd_step: velocity count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    auto w = p.data();
    auto g = p.grad();
    auto& v = velocity[i];
    if (v.size() != w.size()) v.assign(w.size(), 0.0f);
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = momentum * v[k] + g[k];
      w[k] -= lr * v[k];
    }
  }
}

}  // namespace bbed

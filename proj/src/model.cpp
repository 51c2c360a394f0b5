#include "bbed/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "bbed/autograd.hpp"

namespace bbed {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

Tensor copy_or_empty(const Tensor& t) { return t.defined() ? t.clone() : Tensor(); }

float sign_of(float v) { return v >= 0.0f ? 1.0f : -1.0f; }

std::vector<float> reconstruct(const BinaryDecomposition& d, std::size_t filters, std::size_t numel) {
  std::vector<float> out(numel, 0.0f);
  const std::size_t per_filter = numel / filters;
  for (std::size_t m = 0; m < d.bases.size(); ++m) {
    for (std::size_t i = 0; i < numel; ++i) out[i] += d.alpha[m * filters + i / per_filter] * d.bases[m][i];
  }
  return out;
}

BinaryDecomposition decompose(const ConvLayer& conv) {
  const std::size_t filters = conv.weight.dim(0);
  if (conv.scheme == BinaryScheme::xnor) return decompose_xnor(conv.weight.data(), filters);
  return decompose_abc(conv.weight.data(), filters, conv.num_bases, conv.shifts);
}

/// Effective binarized weights from the current latent weights; gradient
/// passes straight through where |w| <= 1.
Tensor binarize_ste(const ConvLayer& conv, const Tensor& latent) {
  auto eff = reconstruct(decompose(conv), latent.dim(0), latent.numel());
  auto src = latent.impl()->storage;
  return make_result(latent.shape(), std::move(eff), "binarize_ste", {&latent}, [src](std::span<const float> g) {
    std::vector<float> d(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = std::abs((*src)[i]) <= 1.0f ? g[i] : 0.0f;
    return std::vector<std::vector<float>>{std::move(d)};
  });
}

Tensor basis_tensor(const ConvLayer& conv, std::size_t m) { return Tensor(conv.weight.shape(), unpack(conv.bases[m])); }

std::span<const float> basis_alpha(const ConvLayer& conv, std::size_t m) {
  const std::size_t o = conv.weight.dim(0);
  return {conv.alpha.data() + m * o, o};
}

Tensor conv_forward(const ConvLayer& conv, const Tensor& h, const ForwardOptions& opt) {
  auto param = [&](const Tensor& t) { return opt.param_grads ? t : t.detach(); };
  Tensor in = conv.binarize_input ? sign_ste(h) : h;
  if (conv.scheme == BinaryScheme::none) return conv2d(in, param(conv.weight), conv.stride, conv.padding);
  if (!conv.frozen()) return conv2d(in, binarize_ste(conv, param(conv.weight)), conv.stride, conv.padding);
  const bool need_grad = opt.param_grads || in.requires_grad();
  if (need_grad && opt.route == GradientRoute::latent) {
    return conv2d(in, param(conv.weight), conv.stride, conv.padding);
  }
  if (!conv.binarize_input) return conv2d(in, conv.effective_weight(), conv.stride, conv.padding);
  if (opt.packed && !need_grad) {
    const auto packed_in = pack_feature_map(in);
    Tensor out;
    for (std::size_t m = 0; m < conv.bases.size(); ++m) {
      auto part = binary_conv2d(packed_in, pack_filters(basis_tensor(conv, m)), basis_alpha(conv, m), conv.stride,
                                conv.padding);
      out = m == 0 ? part : add(out, part);
    }
    return out;
  }
  Tensor out;
  for (std::size_t m = 0; m < conv.bases.size(); ++m) {
    auto part = scale_channels(conv2d(in, basis_tensor(conv, m), conv.stride, conv.padding), basis_alpha(conv, m));
    out = m == 0 ? part : add(out, part);
  }
  return out;
}

ForwardOutput run_forward(const Model& model, Model* mutable_model, const Tensor& x, const ForwardOptions& opt) {
  if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != model.input_shape) {
    throw ShapeError("forward: " + std::string(arch_name(model.arch)) + " expects N x " +
                     shape_str(model.input_shape) + ", got " + shape_str(x.shape()));
  }
  auto param = [&](const Tensor& t) { return opt.param_grads ? t : t.detach(); };
  Tensor h = x;
  std::vector<Tensor> skips;
  ForwardOutput out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    std::visit(overloaded{
                   [&](const ConvLayer& l) { h = conv_forward(l, h, opt); },
                   [&](const BatchNormLayer& l) {
                     if (mutable_model != nullptr) {
                       auto& ml = std::get<BatchNormLayer>(mutable_model->layers[i]);
                       h = batchnorm(h, param(l.gamma), param(l.beta), ml.running_mean, ml.running_var, opt.bn_mode,
                                     l.epsilon, l.momentum, true);
                     } else {
                       Tensor rm = l.running_mean, rv = l.running_var;
                       h = batchnorm(h, param(l.gamma), param(l.beta), rm, rv, opt.bn_mode, l.epsilon, l.momentum,
                                     false);
                     }
                   },
                   [&](const ActLayer& l) {
                     if (l.kind == ActKind::relu) h = relu(h);
                   },
                   [&](const MaxPoolLayer& l) { h = max_pool2d(h, l.kernel, l.stride); },
                   [&](const SkipSaveLayer&) { skips.push_back(h); },
                   [&](const SkipAddLayer&) {
                     if (skips.empty()) throw std::logic_error("forward: skip-add without matching save");
                     h = add(h, skips.back());
                     skips.pop_back();
                   },
                   [&](const GapLayer&) {
                     out.features = h;
                     h = global_average_pool(h);
                   },
                   [&](const LinearLayer& l) {
                     h = linear(h, param(l.weight), l.bias.defined() ? param(l.bias) : Tensor());
                   },
               },
               model.layers[i]);
  }
  out.logits = h;
  return out;
}

void apply_masks(Model& model) {
  for (auto& layer : model.layers) {
    if (auto* c = std::get_if<ConvLayer>(&layer); c != nullptr && c->mask.defined()) {
      auto w = c->weight.data();
      auto m = c->mask.data();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] *= m[i];
    }
  }
}

void augment_batch(Tensor& batch, std::mt19937_64& rng) {
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  constexpr int pad = 4;
  std::uniform_int_distribution<int> shift(-pad, pad);
  std::bernoulli_distribution flip(0.5);
  std::vector<float> src(c * h * w);
  auto data = batch.data();
  for (std::size_t b = 0; b < n; ++b) {
    float* img = data.data() + b * c * h * w;
    std::copy(img, img + c * h * w, src.begin());
    const int dy = shift(rng), dx = shift(rng);
    const bool f = flip(rng);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = static_cast<long>(y) + dy;
          long sx = static_cast<long>(x) + dx;
          if (f) sx = static_cast<long>(w) - 1 - sx;
          const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
          img[(ch * h + y) * w + x] = inside ? src[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : 0.0f;
        }
      }
    }
  }
}

struct LayerShape {
  std::size_t c, h, w;
};

}  // namespace

std::string_view arch_name(Arch a) {
  switch (a) {
    case Arch::none: return "none";
    case Arch::tiny_cnn: return "tiny_cnn";
    case Arch::small_cnn: return "small_cnn";
    case Arch::small_cnn_narrow: return "small_cnn_narrow";
    case Arch::resnet_mini: return "resnet_mini";
  }
  return "unknown";
}

Arch parse_arch(std::string_view name) {
  for (Arch a : {Arch::tiny_cnn, Arch::small_cnn, Arch::small_cnn_narrow, Arch::resnet_mini}) {
    if (arch_name(a) == name) return a;
  }
  throw std::invalid_argument("unknown architecture '" + std::string(name) + "'");
}

std::string_view arch_family(Arch a) {
  switch (a) {
    case Arch::tiny_cnn: return "gray28";
    case Arch::small_cnn:
    case Arch::small_cnn_narrow:
    case Arch::resnet_mini: return "rgb32";
    default: return "none";
  }
}

std::string_view regularity_name(Regularity r) {
  switch (r) {
    case Regularity::weight: return "weight";
    case Regularity::kernel: return "kernel";
    case Regularity::filter: return "filter";
  }
  return "unknown";
}

Regularity parse_regularity(std::string_view name) {
  for (Regularity r : {Regularity::weight, Regularity::kernel, Regularity::filter}) {
    if (regularity_name(r) == name) return r;
  }
  throw std::invalid_argument("unknown pruning regularity '" + std::string(name) + "'");
}

std::string_view compression_name(CompressionKind k) {
  switch (k) {
    case CompressionKind::none: return "vanilla";
    case CompressionKind::distilled: return "distilled";
    case CompressionKind::pruned: return "pruned";
    case CompressionKind::binarized: return "binarized";
  }
  return "unknown";
}

Tensor ConvLayer::effective_weight() const {
  if (!frozen()) throw std::logic_error("effective_weight: layer is not frozen");
  BinaryDecomposition d;
  for (const auto& b : bases) d.bases.push_back(unpack(b));
  d.alpha = alpha;
  return Tensor(weight.shape(), reconstruct(d, weight.dim(0), weight.numel()));
}

Model Model::clone() const {
  Model m = *this;
  for (auto& layer : m.layers) {
    std::visit(overloaded{
                   [](ConvLayer& l) {
                     l.weight = copy_or_empty(l.weight);
                     l.mask = copy_or_empty(l.mask);
                   },
                   [](BatchNormLayer& l) {
                     l.gamma = copy_or_empty(l.gamma);
                     l.beta = copy_or_empty(l.beta);
                     l.running_mean = copy_or_empty(l.running_mean);
                     l.running_var = copy_or_empty(l.running_var);
                   },
                   [](LinearLayer& l) {
                     l.weight = copy_or_empty(l.weight);
                     l.bias = copy_or_empty(l.bias);
                   },
                   [](auto&) {},
               },
               layer);
  }
  return m;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers) {
    std::visit(overloaded{
                   [&](const ConvLayer& l) { out.push_back(l.weight); },
                   [&](const BatchNormLayer& l) {
                     out.push_back(l.gamma);
                     out.push_back(l.beta);
                   },
                   [&](const LinearLayer& l) {
                     out.push_back(l.weight);
                     if (l.bias.defined()) out.push_back(l.bias);
                   },
                   [](const auto&) {},
               },
               layer);
  }
  return out;
}

const LinearLayer& Model::final_linear() const {
  if (layers.size() < 2 || !std::holds_alternative<LinearLayer>(layers.back()) ||
      !std::holds_alternative<GapLayer>(layers[layers.size() - 2])) {
    throw std::invalid_argument("model does not end with global-average-pool then linear");
  }
  return std::get<LinearLayer>(layers.back());
}

std::vector<std::size_t> Model::conv_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (std::holds_alternative<ConvLayer>(layers[i])) out.push_back(i);
  }
  return out;
}

Model make_model(Arch arch, std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("make_model: need at least 2 classes");
  Model m;
  m.arch = arch;
  m.num_classes = num_classes;
  std::mt19937_64 rng(seed);
  auto he = [&](Shape shape, std::size_t fan_in) {
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
  };
  std::size_t channels = 0;
  auto conv = [&](std::size_t out, int stride = 1) {
    ConvLayer l;
    l.weight = he({out, channels, 3, 3}, channels * 9);
    l.stride = stride;
    l.padding = 1;
    m.layers.push_back(std::move(l));
    channels = out;
  };
  auto bn = [&] {
    m.layers.push_back(BatchNormLayer{Tensor::ones({channels}), Tensor::zeros({channels}), Tensor::zeros({channels}),
                                      Tensor::ones({channels})});
  };
  auto act = [&] { m.layers.push_back(ActLayer{ActKind::relu}); };
  auto pool = [&] { m.layers.push_back(MaxPoolLayer{2, 2}); };
  auto block = [&] {
    m.layers.push_back(SkipSaveLayer{});
    conv(channels);
    bn();
    act();
    conv(channels);
    bn();
    m.layers.push_back(SkipAddLayer{});
    act();
  };
  auto stage = [&](std::size_t out, int stride = 1) {
    conv(out, stride);
    bn();
    act();
  };

  switch (arch) {
    case Arch::tiny_cnn:
      m.input_shape = {1, 28, 28};
      channels = 1;
      stage(8);
      pool();
      stage(16);
      pool();
      stage(32);
      break;
    case Arch::small_cnn:
    case Arch::small_cnn_narrow: {
      const std::size_t w = arch == Arch::small_cnn ? 32 : 16;
      m.input_shape = {3, 32, 32};
      channels = 3;
      stage(w);
      pool();
      stage(2 * w);
      pool();
      stage(4 * w);
      stage(4 * w);
      break;
    }
    case Arch::resnet_mini:
      m.input_shape = {3, 32, 32};
      channels = 3;
      stage(16);
      block();
      stage(32, 2);
      block();
      stage(64, 2);
      block();
      break;
    default:
      throw std::invalid_argument("make_model: no architecture " + std::string(arch_name(arch)));
  }
  m.layers.push_back(GapLayer{});
  m.layers.push_back(LinearLayer{he({num_classes, channels}, channels), Tensor::zeros({num_classes})});
  return m;
}

ForwardOutput forward(const Model& model, const Tensor& x, const ForwardOptions& options) {
  return run_forward(model, nullptr, x, options);
}

Tensor forward_train(Model& model, const Tensor& x) {
  ForwardOptions opt;
  opt.bn_mode = BatchNormMode::minibatch;
  opt.param_grads = true;
  opt.packed = false;
  return run_forward(model, &model, x, opt).logits;
}

std::vector<int> predict(const Model& model, const Tensor& batch) {
  auto logits = forward(model, batch).logits;
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto z = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<int>(std::max_element(z.begin() + i * c, z.begin() + (i + 1) * c) - (z.begin() + i * c));
  }
  return out;
}

double accuracy(const Model& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.resize(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto pred = predict(model, data.batch(idx));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainReport train(Model& model, const Dataset& data, const TrainConfig& config, const LossFn& loss) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (config.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  if (data.sample_shape != model.input_shape) {
    throw ShapeError("train: data shape " + shape_str(data.sample_shape) + " does not match model input " +
                     shape_str(model.input_shape));
  }
  bool binarized = false;
  for (auto& layer : model.layers) {
    if (auto* c = std::get_if<ConvLayer>(&layer); c != nullptr && c->scheme != BinaryScheme::none) {
      c->bases.clear();
      c->alpha.clear();
      binarized = true;
    }
  }
  auto params = model.parameters();
  for (auto& p : params) p.set_requires_grad(true);
  Sgd opt(params, config.lr, config.momentum, config.weight_decay);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  TrainReport report;
  const double pi = std::acos(-1.0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.set_lr(static_cast<float>(config.lr * 0.5 *
                                  (1.0 + std::cos(pi * static_cast<double>(epoch) / static_cast<double>(config.epochs)))));
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::span<const std::size_t> idx(order.data() + start, std::min(config.batch_size, order.size() - start));
      Tensor x = data.batch(idx);
      if (config.augment) augment_batch(x, rng);
      std::vector<int> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.labels[idx[i]];
      Tensor logits = forward_train(model, x);
      Tensor l = loss ? loss(logits, labels, x) : softmax_cross_entropy(logits, labels);
      opt.zero_grad();
      backward(l);
      opt.step();
      apply_masks(model);
      report.batch_losses.push_back(l.item());
      epoch_loss += l.item();
      ++batches;
    }
    report.epoch_losses.push_back(static_cast<float>(epoch_loss / static_cast<double>(batches)));
  }
  for (auto& p : params) {
    p.zero_grad();
    p.set_requires_grad(false);
  }
  if (binarized) freeze_binarization(model);
  return report;
}

Tensor distillation_loss(const Tensor& student_logits, std::span<const int> labels, std::span<const float> teacher_logits,
                         const DistillConfig& config) {
  if (!(config.temperature > 0.0f)) throw std::invalid_argument("distillation temperature must be positive");
  if (config.mix < 0.0f || config.mix > 1.0f) throw std::invalid_argument("distillation mix must lie in [0, 1]");
  Tensor ce = softmax_cross_entropy(student_logits, labels);
  if (config.mix == 1.0f) return ce;
  const float t = config.temperature;
  const std::size_t n = student_logits.dim(0), c = student_logits.dim(1);
  auto soft = softmax_rows(teacher_logits, c, t);
  double entropy = 0.0;
  for (float p : soft) {
    if (p > 0.0f) entropy -= static_cast<double>(p) * std::log(static_cast<double>(p));
  }
  entropy /= static_cast<double>(n);
  Tensor kl = sub(soft_cross_entropy(scale(student_logits, 1.0f / t), soft), Tensor::scalar(static_cast<float>(entropy)));
  Tensor kd = scale(kl, (1.0f - config.mix) * t * t);
  if (config.mix == 0.0f) return kd;
  return add(scale(ce, config.mix), kd);
}

Model distill(const Model& teacher, Arch student_arch, const DistillConfig& config, const Dataset& data,
              const TrainConfig& train_config, TrainReport* report) {
  if (!(config.temperature > 0.0f)) throw std::invalid_argument("distillation temperature must be positive");
  if (arch_family(teacher.arch) != arch_family(student_arch)) {
    throw std::invalid_argument("distill: teacher " + std::string(arch_name(teacher.arch)) + " and student " +
                                std::string(arch_name(student_arch)) + " differ in input/output shape");
  }
  Model student = make_model(student_arch, teacher.num_classes, train_config.seed);
  LossFn loss;
  if (config.mix != 1.0f) {
    loss = [&](const Tensor& logits, std::span<const int> labels, const Tensor& inputs) {
      auto t = forward(teacher, inputs).logits;
      return distillation_loss(logits, labels, t.data(), config);
    };
  }
  auto r = train(student, data, train_config, loss);
  if (report != nullptr) *report = std::move(r);
  student.compression = CompressionInfo{};
  student.compression.kind = CompressionKind::distilled;
  student.compression.temperature = config.temperature;
  student.compression.mix = config.mix;
  student.compression.teacher = teacher.arch;
  return student;
}

Model prune(const Model& model, Regularity regularity, float sparsity, std::span<const std::size_t> layers) {
  if (!(sparsity >= 0.0f) || sparsity >= 1.0f) {
    throw std::invalid_argument("prune: sparsity must lie in [0, 1), got " + std::to_string(sparsity));
  }
  Model out = model.clone();
  std::vector<std::size_t> targets(layers.begin(), layers.end());
  if (targets.empty()) targets = out.conv_indices();
  for (std::size_t idx : targets) {
    if (idx >= out.layers.size() || !std::holds_alternative<ConvLayer>(out.layers[idx])) {
      throw std::invalid_argument("prune: layer " + std::to_string(idx) + " is not a convolution");
    }
    auto& conv = std::get<ConvLayer>(out.layers[idx]);
    const std::size_t i = conv.weight.dim(1);
    const std::size_t k2 = conv.weight.dim(2) * conv.weight.dim(3);
    const std::size_t unit = regularity == Regularity::weight ? 1 : regularity == Regularity::kernel ? k2 : i * k2;
    const std::size_t units = conv.weight.numel() / unit;
    auto w = conv.weight.data();
    std::vector<double> score(units, 0.0);
    for (std::size_t u = 0; u < units; ++u) {
      for (std::size_t j = 0; j < unit; ++j) score[u] += std::abs(static_cast<double>(w[u * unit + j]));
    }
    const auto k = std::min(static_cast<std::size_t>(std::llround(static_cast<double>(sparsity) * units)), units - 1);
    std::vector<std::size_t> rank(units);
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
    if (!conv.mask.defined()) conv.mask = Tensor::ones(conv.weight.shape());
    auto mask = conv.mask.data();
    for (std::size_t r = 0; r < k; ++r) {
      std::fill(mask.begin() + static_cast<std::ptrdiff_t>(rank[r] * unit),
                mask.begin() + static_cast<std::ptrdiff_t>((rank[r] + 1) * unit), 0.0f);
    }
  }
  apply_masks(out);
  out.compression = CompressionInfo{};
  out.compression.kind = CompressionKind::pruned;
  out.compression.regularity = regularity;
  out.compression.sparsity = sparsity;
  return out;
}

BinaryDecomposition decompose_xnor(std::span<const float> w, std::size_t filters) {
  if (filters == 0 || w.size() % filters != 0) throw ShapeError("decompose_xnor: weights not divisible into filters");
  const std::size_t per = w.size() / filters;
  BinaryDecomposition d;
  d.bases.emplace_back(w.size());
  d.alpha.resize(filters);
  for (std::size_t f = 0; f < filters; ++f) {
    double s = 0.0;
    for (std::size_t j = 0; j < per; ++j) {
      s += std::abs(static_cast<double>(w[f * per + j]));
      d.bases[0][f * per + j] = sign_of(w[f * per + j]);
    }
    d.alpha[f] = static_cast<float>(s / static_cast<double>(per));
  }
  return d;
}

std::vector<double> least_squares(const std::vector<std::vector<float>>& columns, std::span<const float> y) {
  const auto m = static_cast<Eigen::Index>(columns.size());
  Eigen::MatrixXd gram(m, m);
  Eigen::VectorXd rhs(m);
  for (Eigen::Index a = 0; a < m; ++a) {
    double r = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) r += static_cast<double>(columns[a][i]) * y[i];
    rhs(a) = r;
    for (Eigen::Index b = a; b < m; ++b) {
      double g = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) g += static_cast<double>(columns[a][i]) * columns[b][i];
      gram(a, b) = gram(b, a) = g;
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(gram);
  Eigen::VectorXd sol;
  if (qr.rank() == m) {
    sol = qr.solve(rhs);
  } else {
    const double ridge = 1e-6 * (gram.trace() / static_cast<double>(m) + 1.0);
    sol = (gram + ridge * Eigen::MatrixXd::Identity(m, m)).ldlt().solve(rhs);
  }
  return {sol.data(), sol.data() + m};
}

BinaryDecomposition decompose_abc(std::span<const float> w, std::size_t filters, std::size_t num_bases,
                                  ShiftRule rule) {
  if (num_bases < 1) throw std::invalid_argument("decompose_abc: need at least one basis");
  if (filters == 0 || w.size() % filters != 0) throw ShapeError("decompose_abc: weights not divisible into filters");
  double mean = 0.0;
  for (float v : w) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (float v : w) var += (v - mean) * (v - mean);
  const double stddev = std::sqrt(var / static_cast<double>(w.size()));
  auto basis = [&](double u) {
    std::vector<float> b(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) b[i] = sign_of(static_cast<float>(w[i] - mean + u * stddev));
    return b;
  };
  auto residual = [&](const std::vector<std::vector<float>>& cols, const std::vector<double>& a) {
    double r = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double fit = 0.0;
      for (std::size_t m = 0; m < cols.size(); ++m) fit += a[m] * cols[m][i];
      r += (w[i] - fit) * (w[i] - fit);
    }
    return r;
  };

  BinaryDecomposition d;
  if (rule == ShiftRule::even) {
    for (std::size_t m = 0; m < num_bases; ++m) {
      const double u = num_bases == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(m) / static_cast<double>(num_bases - 1);
      d.bases.push_back(basis(u));
    }
  } else {
    constexpr int kGrid = 33;
    std::vector<bool> used(kGrid, false);
    used[kGrid / 2] = true;
    d.bases.push_back(basis(0.0));
    while (d.bases.size() < num_bases) {
      int best = -1;
      double best_r = 0.0;
      std::vector<float> best_b;
      for (int g = 0; g < kGrid; ++g) {
        if (used[g]) continue;
        auto cand = d.bases;
        cand.push_back(basis(-1.0 + 2.0 * g / (kGrid - 1)));
        const double r = residual(cand, least_squares(cand, w));
        if (best < 0 || r < best_r) {
          best = g;
          best_r = r;
          best_b = std::move(cand.back());
        }
      }
      if (best < 0) throw std::invalid_argument("decompose_abc: more bases than grid shifts");
      used[best] = true;
      d.bases.push_back(std::move(best_b));
    }
  }
  auto a = least_squares(d.bases, w);
  d.alpha.resize(num_bases * filters);
  for (std::size_t m = 0; m < num_bases; ++m) {
    std::fill_n(d.alpha.begin() + static_cast<std::ptrdiff_t>(m * filters), filters, static_cast<float>(a[m]));
  }
  return d;
}

void freeze_binarization(Model& model) {
  for (auto& layer : model.layers) {
    auto* c = std::get_if<ConvLayer>(&layer);
    if (c == nullptr || c->scheme == BinaryScheme::none) continue;
    auto d = decompose(*c);
    c->bases.clear();
    for (const auto& b : d.bases) c->bases.push_back(pack(b));
    c->alpha = std::move(d.alpha);
  }
}

namespace {

Model binarize(const Model& model, BinaryScheme scheme, std::size_t num_bases, const BinarizeOptions& options) {
  Model out = model.clone();
  auto convs = out.conv_indices();
  for (std::size_t k = options.keep_first_full_precision ? 1 : 0; k < convs.size(); ++k) {
    const std::size_t idx = convs[k];
    auto& conv = std::get<ConvLayer>(out.layers[idx]);
    conv.scheme = scheme;
    conv.num_bases = num_bases;
    conv.shifts = options.shifts;
    conv.binarize_input = options.binarize_activations;
    if (!conv.binarize_input) continue;
    // sign(relu(x)) is constant, so the rectifier feeding a binary input goes.
    for (std::size_t j = idx; j-- > 0;) {
      auto& prev = out.layers[j];
      if (std::holds_alternative<MaxPoolLayer>(prev) || std::holds_alternative<SkipSaveLayer>(prev)) continue;
      if (auto* a = std::get_if<ActLayer>(&prev)) a->kind = ActKind::identity;
      break;
    }
  }
  freeze_binarization(out);
  out.compression = CompressionInfo{};
  out.compression.kind = CompressionKind::binarized;
  out.compression.scheme = scheme;
  out.compression.num_bases = num_bases;
  return out;
}

}  // namespace

Model binarize_xnor(const Model& model, const BinarizeOptions& options) {
  return binarize(model, BinaryScheme::xnor, 1, options);
}

Model binarize_abc(const Model& model, std::size_t num_bases, const BinarizeOptions& options) {
  if (num_bases < 1) throw std::invalid_argument("binarize_abc: need at least one basis");
  return binarize(model, BinaryScheme::abc, num_bases, options);
}

double parameter_bits(const Model& model) {
  double bits = 0.0;
  for (const auto& layer : model.layers) {
    std::visit(overloaded{
                   [&](const ConvLayer& l) {
                     const double p = static_cast<double>(l.weight.numel());
                     if (l.scheme != BinaryScheme::none) {
                       const double scales = l.scheme == BinaryScheme::xnor ? static_cast<double>(l.weight.dim(0))
                                                                            : static_cast<double>(l.num_bases);
                       bits += p * static_cast<double>(l.num_bases) + 32.0 * scales;
                     } else if (l.mask.defined()) {
                       double nnz = 0.0;
                       for (float m : l.mask.data()) nnz += m != 0.0f;
                       bits += 32.0 * nnz;
                     } else {
                       bits += 32.0 * p;
                     }
                   },
                   [&](const BatchNormLayer& l) { bits += 32.0 * static_cast<double>(l.gamma.numel() + l.beta.numel()); },
                   [&](const LinearLayer& l) {
                     bits += 32.0 * static_cast<double>(l.weight.numel() + (l.bias.defined() ? l.bias.numel() : 0));
                   },
                   [](const auto&) {},
               },
               layer);
  }
  return bits;
}

double mac_count(const Model& model, const CostOptions& options) {
  LayerShape s{model.input_shape.at(0), model.input_shape.at(1), model.input_shape.at(2)};
  double macs = 0.0;
  for (const auto& layer : model.layers) {
    std::visit(overloaded{
                   [&](const ConvLayer& l) {
                     const std::size_t kh = l.weight.dim(2), kw = l.weight.dim(3);
                     const std::size_t oh = (s.h + 2 * l.padding - kh) / l.stride + 1;
                     const std::size_t ow = (s.w + 2 * l.padding - kw) / l.stride + 1;
                     const double positions = static_cast<double>(oh * ow);
                     double nnz = static_cast<double>(l.weight.numel());
                     if (l.mask.defined()) {
                       nnz = 0.0;
                       for (float m : l.mask.data()) nnz += m != 0.0f;
                     }
                     if (l.scheme != BinaryScheme::none && l.binarize_input) {
                       macs += static_cast<double>(l.num_bases) * nnz * positions * options.binary_mac_weight;
                     } else {
                       macs += nnz * positions;
                     }
                     s = {l.weight.dim(0), oh, ow};
                   },
                   [&](const MaxPoolLayer& l) {
                     s.h = (s.h - l.kernel) / l.stride + 1;
                     s.w = (s.w - l.kernel) / l.stride + 1;
                   },
                   [&](const GapLayer&) { s.h = s.w = 1; },
                   [&](const LinearLayer& l) {
                     macs += static_cast<double>(l.weight.numel());
                     s = {l.weight.dim(0), 1, 1};
                   },
                   [](const auto&) {},
               },
               layer);
  }
  return macs;
}

CompressionStats compression_stats(const Model& model, const Model& baseline, const CostOptions& options) {
  if (arch_family(model.arch) != arch_family(baseline.arch) || model.num_classes != baseline.num_classes) {
    throw std::invalid_argument("compression_stats: " + std::string(arch_name(model.arch)) + " and " +
                                std::string(arch_name(baseline.arch)) + " are not the same architecture family");
  }
  CompressionStats st;
  st.parameter_bits = parameter_bits(model);
  st.baseline_parameter_bits = parameter_bits(baseline);
  st.macs = mac_count(model, options);
  st.baseline_macs = mac_count(baseline, options);
  st.compression_ratio = st.baseline_parameter_bits / st.parameter_bits;
  st.ncc = st.macs / st.baseline_macs;
  return st;
}

}  // namespace bbed

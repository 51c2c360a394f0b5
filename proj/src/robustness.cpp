#include "bbed/robustness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace bbed {
namespace {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::vector<int> predictions(const Model& model, const Dataset& data) {
  std::vector<int> out;
  out.reserve(data.size());
  constexpr std::size_t chunk = 100;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto p = predict(model, data.batch(idx));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

int to_count(double stress, const char* what) {
  const double r = std::round(stress);
  if (stress < 0.0 || std::abs(stress - r) > 1e-9) {
    throw std::invalid_argument(std::string(what) + " stress must be a non-negative integer, got " +
                                std::to_string(stress));
  }
  return static_cast<int>(r);
}

}  // namespace

std::string_view stress_kind_name(StressKind k) {
  switch (k) {
    case StressKind::amplitude: return "amplitude";
    case StressKind::iteration: return "iteration";
    case StressKind::population: return "population";
  }
  return "unknown";
}

StressKind parse_stress_kind(std::string_view name) {
  for (StressKind k : {StressKind::amplitude, StressKind::iteration, StressKind::population}) {
    if (stress_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown stress kind '" + std::string(name) + "'");
}

std::string_view curve_class_name(CurveClass c) {
  switch (c) {
    case CurveClass::brittle: return "brittle";
    case CurveClass::ductile: return "ductile";
    case CurveClass::strong: return "strong";
  }
  return "unknown";
}

double strain(double clean_accuracy, double attacked_accuracy) {
  if (!(clean_accuracy > 0.0)) throw std::invalid_argument("strain: clean accuracy must be > 0");
  return std::max(0.0, (clean_accuracy - attacked_accuracy) / clean_accuracy);
}

double break_threshold(std::size_t num_classes, std::optional<double> override_value) {
  if (num_classes < 2) throw std::invalid_argument("break_threshold: need at least 2 classes");
  return override_value ? *override_value : 1.0 / static_cast<double>(num_classes);
}

CurveClass classify(std::span<const CurvePoint> points, std::optional<std::size_t> break_index,
                    const Taxonomy& taxonomy) {
  const std::size_t last = break_index ? *break_index : points.size() - 1;
  for (std::size_t i = 1; i <= last && i < points.size(); ++i) {
    if (points[i].strain - points[i - 1].strain > taxonomy.brittle_jump) return CurveClass::brittle;
  }
  if (!break_index && points.back().strain < taxonomy.strong_strain) return CurveClass::strong;
  return CurveClass::ductile;
}

StressStrainCurve make_curve(StressKind kind, std::span<const double> stresses, std::span<const double> accuracies,
                             double clean_accuracy, double threshold, const Taxonomy& taxonomy) {
  if (stresses.empty()) throw std::invalid_argument("stress sweep is empty");
  if (stresses.size() != accuracies.size()) throw std::invalid_argument("one accuracy per stress value is required");
  for (std::size_t i = 0; i < stresses.size(); ++i) {
    if (!(stresses[i] >= 0.0) || (i > 0 && !(stresses[i] > stresses[i - 1]))) {
      throw std::invalid_argument("stress values must be non-negative and strictly ascending");
    }
  }
  StressStrainCurve c;
  c.kind = kind;
  c.clean_accuracy = clean_accuracy;
  c.threshold = threshold;
  c.points.push_back({0.0, clean_accuracy, 0.0});
  for (std::size_t i = 0; i < stresses.size(); ++i) {
    if (stresses[i] == 0.0) continue;
    c.points.push_back({stresses[i], accuracies[i], strain(clean_accuracy, accuracies[i])});
  }
  std::optional<std::size_t> brk;
  for (std::size_t i = 0; i < c.points.size(); ++i) {
    if (c.points[i].accuracy <= threshold) {
      brk = i;
      break;
    }
  }
  if (brk) {
    const auto& b = c.points[*brk];
    if (*brk == 0 || b.accuracy == threshold) {
      c.break_stress = b.stress;
    } else {
      const auto& a = c.points[*brk - 1];
      c.break_stress = a.stress + (a.accuracy - threshold) / (a.accuracy - b.accuracy) * (b.stress - a.stress);
    }
  }
  c.classification = classify(c.points, brk, taxonomy);
  return c;
}

AttackConfig apply_stress(const AttackConfig& base, StressKind kind, double stress) {
  AttackConfig cfg = base;
  auto fail = [&] {
    throw std::invalid_argument(std::string(attack_name(base.kind)) + " has no " +
                                std::string(stress_kind_name(kind)) + " axis");
  };
  switch (kind) {
    case StressKind::amplitude:
      if (!is_epsilon_bounded(base.kind)) fail();
      cfg.epsilon = static_cast<float>(stress);
      break;
    case StressKind::iteration:
      switch (base.kind) {
        case AttackKind::pgd: cfg.iterations = to_count(stress, "iteration"); break;
        case AttackKind::cw: cfg.cw.steps = to_count(stress, "iteration"); break;
        case AttackKind::deepfool: cfg.deepfool.max_iter = to_count(stress, "iteration"); break;
        case AttackKind::localsearch: cfg.localsearch.rounds = to_count(stress, "iteration"); break;
        default: fail();
      }
      break;
    case StressKind::population:
      if (base.kind != AttackKind::genattack) fail();
      cfg.genattack.generations = to_count(stress, "population");
      break;
  }
  cfg.validate();
  return cfg;
}

double attacked_accuracy(const Model& model, const AttackConfig& config, const Dataset& eval, std::uint64_t seed,
                         const EvalOptions& options, std::vector<AttackResult>* results) {
  if (eval.size() == 0) throw std::invalid_argument("evaluation set is empty");
  config.validate();
  const auto clean = predictions(model, eval);
  ModelClassifier clf(model, options.route);
  std::vector<char> correct(eval.size(), 0);
  if (results) results->assign(eval.size(), AttackResult{});
  parallel_for(eval.size(), options.threads, [&](std::size_t i) {
    if (clean[i] != eval.labels[i]) return;
    AttackConfig cfg = config;
    cfg.seed = derive_seed(seed, i);
    auto r = run_attack(clf, eval.image(i), eval.labels[i], cfg);
    correct[i] = r.adversarial_class == eval.labels[i];
    if (results) (*results)[i] = std::move(r);
  });
  const auto hits = std::count(correct.begin(), correct.end(), 1);
  return static_cast<double>(hits) / static_cast<double>(eval.size());
}

StressStrainCurve stress_strain(const Model& model, const AttackConfig& base, StressKind kind,
                                std::span<const double> stresses, const Dataset& eval, std::uint64_t seed,
                                const EvalOptions& options) {
  if (stresses.empty()) throw std::invalid_argument("stress sweep is empty");
  if (eval.size() == 0) throw std::invalid_argument("evaluation set is empty");
  const double clean = accuracy(model, eval);
  std::vector<double> acc(stresses.size(), clean);
  for (std::size_t j = 0; j < stresses.size(); ++j) {
    const AttackConfig cfg = apply_stress(base, kind, stresses[j]);
    if (stresses[j] != 0.0) acc[j] = attacked_accuracy(model, cfg, eval, derive_seed(seed, j), options);
  }
  return make_curve(kind, stresses, acc, clean, break_threshold(model.num_classes, options.threshold),
                    options.taxonomy);
}

double quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty list");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

BoxStats box_stats(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("box_stats: empty list");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  BoxStats b;
  b.min = v.front();
  b.max = v.back();
  b.q1 = quantile(v, 0.25);
  b.median = quantile(v, 0.5);
  b.q3 = quantile(v, 0.75);
  const double iqr = b.q3 - b.q1;
  const double lo = b.q1 - 1.5 * iqr, hi = b.q3 + 1.5 * iqr;
  bool seen = false;
  for (double x : v) {
    if (x < lo || x > hi) {
      b.outliers.push_back(x);
    } else {
      if (!seen) b.whisker_low = x;
      b.whisker_high = x;
      seen = true;
    }
  }
  return b;
}

ObservationMatrix::ObservationMatrix(std::vector<std::string> columns) : columns_(std::move(columns)) {
  for (std::size_t i = 0; i < columns_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (columns_[i] == columns_[j]) throw std::invalid_argument("duplicate column '" + columns_[i] + "'");
    }
  }
}

void ObservationMatrix::add_row(std::vector<double> row) {
  if (row.size() != columns_.size()) {
    throw std::invalid_argument("row has " + std::to_string(row.size()) + " cells, expected " +
                                std::to_string(columns_.size()));
  }
  for (std::size_t j = 0; j < row.size(); ++j) {
    if (!std::isfinite(row[j])) throw std::invalid_argument("missing or non-finite value in column '" + columns_[j] + "'");
  }
  rows_.push_back(std::move(row));
}

PcaResult pca(const ObservationMatrix& data, bool standardize) {
  const std::size_t n = data.num_rows(), p = data.num_cols();
  if (n < 2 || p < 1) throw std::invalid_argument("pca needs at least 2 rows and 1 column");
  Eigen::MatrixXd x(n, p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) x(i, j) = data.rows()[i][j];
  }
  PcaResult r;
  r.mean.resize(p);
  r.scale.assign(p, 1.0);
  for (std::size_t j = 0; j < p; ++j) {
    r.mean[j] = x.col(j).mean();
    x.col(j).array() -= r.mean[j];
    if (standardize) {
      const double sd = std::sqrt(x.col(j).squaredNorm() / static_cast<double>(n - 1));
      if (sd == 0.0) throw std::invalid_argument("column '" + data.columns()[j] + "' has zero variance");
      r.scale[j] = sd;
      x.col(j) /= sd;
    }
  }
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");
  const Eigen::VectorXd values = eig.eigenvalues().cwiseMax(0.0);
  const double total = values.sum();
  if (!(total > 0.0)) throw std::invalid_argument("pca: data has zero total variance");
  for (std::size_t k = 0; k < p; ++k) {
    const Eigen::Index col = static_cast<Eigen::Index>(p - 1 - k);  // ascending order from Eigen
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    for (Eigen::Index j = 1; j < v.size(); ++j) {
      if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
    }
    if (v(arg) < 0.0) v = -v;
    r.components.emplace_back(v.data(), v.data() + v.size());
    r.explained_variance_ratio.push_back(values(col) / total);
  }
  r.scores.assign(n, std::vector<double>(p, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < p; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += x(i, j) * r.components[k][j];
      r.scores[i][k] = s;
    }
  }
  return r;
}

std::vector<double> normalize_255(std::span<const double> raw) {
  std::vector<double> out(raw.size(), 0.0);
  if (raw.empty()) return out;
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  if (!(*hi > *lo)) return out;
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - *lo) / span * 255.0;
  return out;
}

CamHeatmap cam_from_features(std::span<const float> features, std::size_t channels, std::size_t height,
                             std::size_t width, std::span<const float> weights) {
  const std::size_t hw = height * width;
  if (features.size() != channels * hw || weights.size() != channels) {
    throw ShapeError("cam: " + std::to_string(channels) + " feature maps of " + std::to_string(height) + "x" +
                     std::to_string(width) + " need as many weights");
  }
  CamHeatmap h;
  h.height = height;
  h.width = width;
  h.raw.assign(hw, 0.0);
  for (std::size_t k = 0; k < channels; ++k) {
    for (std::size_t i = 0; i < hw; ++i) h.raw[i] += static_cast<double>(weights[k]) * features[k * hw + i];
  }
  h.normalized = normalize_255(h.raw);
  return h;
}

CamHeatmap cam(const Model& model, const Tensor& x, int cls) {
  const LinearLayer& head = model.final_linear();
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("cam: expects one 1 x C x H x W input");
  const std::size_t classes = head.weight.dim(0), k = head.weight.dim(1);
  if (cls < 0 || static_cast<std::size_t>(cls) >= classes) throw std::out_of_range("cam: class out of range");
  auto out = forward(model, x);
  const Tensor& f = out.features;
  if (f.dim(1) != k) throw ShapeError("cam: feature channels do not match the final linear layer");
  auto w = head.weight.data().subspan(static_cast<std::size_t>(cls) * k, k);
  CamHeatmap h = cam_from_features(f.data(), k, f.dim(2), f.dim(3), w);
  h.class_index = cls;
  return h;
}

CamHeatmap upsample(const CamHeatmap& h, std::size_t height, std::size_t width) {
  if (h.height == 0 || h.width == 0 || height == 0 || width == 0) throw std::invalid_argument("upsample: empty map");
  CamHeatmap out;
  out.height = height;
  out.width = width;
  out.class_index = h.class_index;
  out.raw.resize(height * width);
  auto coord = [](std::size_t i, std::size_t dst, std::size_t src, std::size_t& a, std::size_t& b, double& t) {
    const double pos = std::clamp((static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5,
                                  0.0, static_cast<double>(src - 1));
    a = static_cast<std::size_t>(std::floor(pos));
    b = std::min(a + 1, src - 1);
    t = pos - static_cast<double>(a);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, height, h.height, y0, y1, ty);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, width, h.width, x0, x1, tx);
      const double top = h.raw[y0 * h.width + x0] * (1 - tx) + h.raw[y0 * h.width + x1] * tx;
      const double bot = h.raw[y1 * h.width + x0] * (1 - tx) + h.raw[y1 * h.width + x1] * tx;
      out.raw[y * width + x] = top * (1 - ty) + bot * ty;
    }
  }
  out.normalized = normalize_255(out.raw);
  return out;
}

std::array<double, 3> cam_quartiles(const CamHeatmap& h) {
  std::vector<double> v(h.normalized);
  std::sort(v.begin(), v.end());
  return {quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75)};
}

}  // namespace bbed

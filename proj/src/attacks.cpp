#include "bbed/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "bbed/autograd.hpp"
#include "bbed/ops.hpp"

namespace bbed {
namespace {

int argmax(std::span<const float> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Largest entry other than `skip`.
int argmax_except(std::span<const float> v, int skip) {
  int best = -1;
  for (int j = 0; j < static_cast<int>(v.size()); ++j) {
    if (j != skip && (best < 0 || v[j] > v[best])) best = j;
  }
  return best;
}

float grad_sign(float g) { return g > 0.0f ? 1.0f : g < 0.0f ? -1.0f : 0.0f; }

void require_single(const Tensor& x, std::size_t classes, int label, int target, const char* who) {
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw ShapeError(std::string(who) + ": expects one 1 x C x H x W input, got " + shape_str(x.shape()));
  }
  if (label < 0 || static_cast<std::size_t>(label) >= classes) {
    throw std::out_of_range(std::string(who) + ": label " + std::to_string(label) + " outside [0, " +
                            std::to_string(classes) + ")");
  }
  if (target < -1 || target >= static_cast<int>(classes)) {
    throw std::out_of_range(std::string(who) + ": target " + std::to_string(target) + " outside [0, " +
                            std::to_string(classes) + ")");
  }
}

struct LossGrad {
  double loss = 0.0;
  std::vector<float> grad;
};

/// Attack loss and its input gradient: CE(label) untargeted, -CE(target) targeted.
LossGrad attack_loss_grad(const DifferentiableClassifier& model, const Tensor& x, int label, int target) {
  Tensor xi = x.clone();
  xi.set_requires_grad();
  Tensor z = model.forward_graph(xi);
  const int cls[1] = {target >= 0 ? target : label};
  Tensor loss = softmax_cross_entropy(z, cls);
  backward(loss);
  LossGrad out;
  const double sign = target >= 0 ? -1.0 : 1.0;
  out.loss = sign * loss.item();
  out.grad.assign(xi.grad().begin(), xi.grad().end());
  if (target >= 0) {
    for (auto& g : out.grad) g = -g;
  }
  check_finite(out.grad, "attack gradient");
  return out;
}

double attack_loss(const Classifier& model, const Tensor& x, int label, int target) {
  Tensor z = model.logits(x);
  const int cls[1] = {target >= 0 ? target : label};
  const double ce = softmax_cross_entropy(z, cls).item();
  return target >= 0 ? -ce : ce;
}

bool is_success(int predicted, int label, int target) { return target >= 0 ? predicted == target : predicted != label; }

void finish(AttackResult& r, const Tensor& x, const Tensor& adv, int adv_class) {
  r.adversarial = adv;
  r.adversarial_class = adv_class;
  r.success = is_success(adv_class, r.label, r.target);
  auto a = adv.data();
  auto b = x.data();
  double linf = 0.0, l2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    linf = std::max(linf, std::abs(d));
    l2 += d * d;
  }
  r.linf = linf;
  r.l2 = std::sqrt(l2);
}

/// Clamp into the epsilon ball around x0 intersected with the valid range.
float project(float v, float x0, float eps, float lo, float hi) {
  return std::clamp(std::clamp(v, x0 - eps, x0 + eps), lo, hi);
}

std::vector<double> softmax(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> p(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += p[i] = std::exp(v[i] - mx);
  for (auto& x : p) x /= s;
  return p;
}

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

ModelClassifier::ModelClassifier(const Model& model, GradientRoute route) : model_(model), route_(route) {}

Tensor ModelClassifier::logits(const Tensor& batch) const { return forward(model_, batch.detach()).logits; }

Tensor ModelClassifier::forward_graph(const Tensor& batch) const {
  ForwardOptions opt;
  opt.route = route_;
  opt.packed = false;
  return forward(model_, batch, opt).logits;
}

std::vector<float> ScoreOracle::probabilities(const Tensor& batch) {
  Tensor z = classifier_.logits(batch);
  queries_ += z.dim(0);
  return softmax_rows(z.data(), z.dim(1));
}

std::string_view attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw: return "cw";
    case AttackKind::deepfool: return "deepfool";
    case AttackKind::localsearch: return "localsearch";
    case AttackKind::genattack: return "genattack";
  }
  return "unknown";
}

AttackKind parse_attack(std::string_view name) {
  for (AttackKind k : {AttackKind::fgsm, AttackKind::pgd, AttackKind::cw, AttackKind::deepfool,
                       AttackKind::localsearch, AttackKind::genattack}) {
    if (attack_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown attack '" + std::string(name) + "'");
}

bool is_black_box(AttackKind k) { return k == AttackKind::localsearch || k == AttackKind::genattack; }

bool is_epsilon_bounded(AttackKind k) { return k != AttackKind::cw && k != AttackKind::deepfool; }

void AttackConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("attack config: " + what); };
  if (!(epsilon >= 0.0f)) fail("epsilon must be >= 0");
  if (iterations < 0) fail("iterations must be >= 0");
  if (!(step_size >= 0.0f)) fail("step_size must be >= 0");
  if (!(cw.c >= 0.0f) || cw.steps < 0 || !(cw.lr >= 0.0f) || !(cw.kappa >= 0.0f)) fail("invalid C&W parameters");
  if (!(deepfool.overshoot >= 0.0f) || deepfool.max_iter < 0) fail("invalid DeepFool parameters");
  if (!(localsearch.perturbation >= 0.0f) || localsearch.half_width < 0 || localsearch.candidates < 0 ||
      localsearch.rounds < 0) {
    fail("invalid LocalSearch parameters");
  }
  if (genattack.population < 1 || genattack.generations < 0 || !(genattack.mutation_range >= 0.0f)) {
    fail("invalid GenAttack parameters");
  }
  if (!(genattack.mutation_rate >= 0.0f && genattack.mutation_rate <= 1.0f)) fail("mutation rate must lie in [0, 1]");
  if (!(clip_min < clip_max)) fail("clip range is empty");
}

std::uint64_t AttackConfig::query_budget() const {
  switch (kind) {
    case AttackKind::localsearch:
      return 1 + static_cast<std::uint64_t>(localsearch.rounds) * static_cast<std::uint64_t>(localsearch.candidates);
    case AttackKind::genattack:
      return static_cast<std::uint64_t>(genattack.population) +
             static_cast<std::uint64_t>(genattack.generations) * static_cast<std::uint64_t>(genattack.population - 1);
    default:
      return 0;
  }
}

AttackResult fgsm(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config) {
  config.validate();
  require_single(x, model.num_classes(), label, config.target, "fgsm");
  AttackResult r;
  r.label = label;
  r.target = config.target;
  r.clean_class = argmax(model.logits(x).data());
  auto g = attack_loss_grad(model, x, label, config.target).grad;
  Tensor adv(x.shape());
  auto src = x.data();
  auto dst = adv.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = std::clamp(src[i] + config.epsilon * grad_sign(g[i]), config.clip_min, config.clip_max);
  }
  r.iterations = 1;
  finish(r, x, adv, argmax(model.logits(adv).data()));
  return r;
}

AttackResult pgd(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config) {
  config.validate();
  require_single(x, model.num_classes(), label, config.target, "pgd");
  AttackResult r;
  r.label = label;
  r.target = config.target;
  r.clean_class = argmax(model.logits(x).data());
  const float eps = config.epsilon;
  auto x0 = x.data();
  Tensor cur = x.clone();
  if (config.random_start && eps > 0.0f) {
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<float> noise(-eps, eps);
    for (std::size_t i = 0; i < x0.size(); ++i) {
      cur.data()[i] = project(x0[i] + noise(rng), x0[i], eps, config.clip_min, config.clip_max);
    }
  }
  Tensor best = cur.clone();
  double best_loss = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < config.iterations; ++k) {
    auto lg = attack_loss_grad(model, cur, label, config.target);
    if (k > 0 && lg.loss > best_loss) {
      best_loss = lg.loss;
      best = cur.clone();
    }
    Tensor next(x.shape());
    auto c = cur.data();
    auto n = next.data();
    for (std::size_t i = 0; i < n.size(); ++i) {
      n[i] = project(c[i] + config.step_size * grad_sign(lg.grad[i]), x0[i], eps, config.clip_min, config.clip_max);
    }
    cur = next;
  }
  if (config.iterations > 0) {
    const double last = attack_loss(model, cur, label, config.target);
    if (config.iterations == 1 || last > best_loss) best = cur;
  }
  r.iterations = config.iterations;
  finish(r, x, best, argmax(model.logits(best).data()));
  return r;
}

AttackResult cw_l2(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config) {
  config.validate();
  require_single(x, model.num_classes(), label, config.target, "cw");
  AttackResult r;
  r.label = label;
  r.target = config.target;
  const int target = config.target;
  const double kappa = config.cw.kappa, c = config.cw.c;
  // Positive while the margin condition is unmet; the other class involved.
  auto margin = [&](std::span<const float> z, int& other) {
    if (target >= 0) {
      other = argmax_except(z, target);
      return static_cast<double>(z[other]) - z[target] + kappa;
    }
    other = argmax_except(z, label);
    return static_cast<double>(z[label]) - z[other] + kappa;
  };

  Tensor z0 = model.logits(x);
  r.clean_class = argmax(z0.data());
  int other = 0;
  if (margin(z0.data(), other) <= 0.0) {
    finish(r, x, x.clone(), r.clean_class);
    return r;
  }

  const double lo = config.clip_min, range = static_cast<double>(config.clip_max) - config.clip_min;
  auto x0 = x.data();
  const std::size_t n = x0.size();
  std::vector<double> w(n), m(n, 0.0), v(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = std::clamp(2.0 * (x0[i] - lo) / range - 1.0, -1.0 + 1e-6, 1.0 - 1e-6);
    w[i] = std::atanh(u);
  }
  auto to_input = [&](const std::vector<double>& wv) {
    Tensor t(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
      t.data()[i] = std::clamp(static_cast<float>(lo + range * 0.5 * (std::tanh(wv[i]) + 1.0)), config.clip_min,
                               config.clip_max);
    }
    return t;
  };
  auto l2_to_x0 = [&](const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (static_cast<double>(t.data()[i]) - x0[i]) * (t.data()[i] - x0[i]);
    return s;
  };

  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  Tensor best;
  double best_l2 = std::numeric_limits<double>::infinity();
  int best_class = -1;
  Tensor cur = to_input(w);
  for (int step = 0; step < config.cw.steps; ++step) {
    Tensor xi = cur.clone();
    xi.set_requires_grad();
    Tensor z = model.forward_graph(xi);
    const int cls = argmax(z.data());
    if (is_success(cls, label, target)) {
      const double d = l2_to_x0(cur);
      if (d < best_l2) {
        best_l2 = d;
        best = cur;
        best_class = cls;
      }
    }
    std::vector<float> gx(n, 0.0f);
    if (margin(z.data(), other) > 0.0 && c > 0.0) {
      std::vector<float> seed(z.numel(), 0.0f);
      const int pos = target >= 0 ? other : label;
      const int neg = target >= 0 ? target : other;
      seed[pos] = static_cast<float>(c);
      seed[neg] = static_cast<float>(-c);
      backward(z, seed);
      gx.assign(xi.grad().begin(), xi.grad().end());
      check_finite(gx, "cw gradient");
    }
    const double t = step + 1;
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = 2.0 * (static_cast<double>(cur.data()[i]) - x0[i]) + gx[i];
      const double th = std::tanh(w[i]);
      const double g = dx * range * 0.5 * (1.0 - th * th);
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double mh = m[i] / (1.0 - std::pow(beta1, t));
      const double vh = v[i] / (1.0 - std::pow(beta2, t));
      w[i] -= config.cw.lr * mh / (std::sqrt(vh) + adam_eps);
    }
    cur = to_input(w);
  }
  r.iterations = config.cw.steps;
  const int last_class = argmax(model.logits(cur).data());
  if (is_success(last_class, label, target) && l2_to_x0(cur) < best_l2) {
    best = cur;
    best_class = last_class;
  }
  if (best.defined()) {
    finish(r, x, best, best_class);
  } else {
    finish(r, x, cur, last_class);
  }
  return r;
}

AttackResult deepfool(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config) {
  config.validate();
  require_single(x, model.num_classes(), label, config.target, "deepfool");
  AttackResult r;
  r.label = label;
  r.target = config.target;
  r.clean_class = argmax(model.logits(x).data());
  if (r.clean_class != label) {
    finish(r, x, x.clone(), r.clean_class);
    return r;
  }
  const int k0 = label;
  const std::size_t classes = model.num_classes();
  auto x0 = x.data();
  const std::size_t n = x0.size();
  std::vector<double> r_tot(n, 0.0);
  Tensor cur = x.clone();
  int cls = k0;
  const double scale = 1.0 + config.deepfool.overshoot;
  for (int it = 0; it < config.deepfool.max_iter; ++it) {
    Tensor xi = cur.clone();
    xi.set_requires_grad();
    Tensor z = model.forward_graph(xi);
    auto zv = z.data();
    double best_dist = std::numeric_limits<double>::infinity();
    double best_f = 0.0, best_norm2 = 0.0;
    std::vector<double> best_w;
    for (std::size_t k = 0; k < classes; ++k) {
      if (static_cast<int>(k) == k0) continue;
      if (config.target >= 0 && static_cast<int>(k) != config.target) continue;
      std::vector<float> seed(classes, 0.0f);
      seed[k] = 1.0f;
      seed[k0] = -1.0f;
      xi.zero_grad();
      backward(z, seed);
      auto g = xi.grad();
      std::vector<double> wk(g.begin(), g.end());
      double norm2 = 0.0;
      for (double v : wk) norm2 += v * v;
      if (norm2 == 0.0) continue;
      const double fk = static_cast<double>(zv[k]) - zv[k0];
      const double dist = std::abs(fk) / std::sqrt(norm2);
      if (dist < best_dist) {
        best_dist = dist;
        best_f = fk;
        best_norm2 = norm2;
        best_w = std::move(wk);
      }
    }
    if (best_w.empty() || best_dist <= 1e-6) break;
    const double coef = std::abs(best_f) / best_norm2;
    for (std::size_t i = 0; i < n; ++i) r_tot[i] += coef * best_w[i];
    ++r.iterations;
    Tensor next(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
      next.data()[i] = std::clamp(static_cast<float>(x0[i] + scale * r_tot[i]), config.clip_min, config.clip_max);
    }
    cur = next;
    cls = argmax(model.logits(cur).data());
    if (cls != k0) break;
  }
  finish(r, x, cur, cls);
  return r;
}

AttackResult localsearch(ScoreOracle& oracle, const Tensor& x, int label, const AttackConfig& config) {
  config.validate();
  require_single(x, oracle.num_classes(), label, config.target, "localsearch");
  const auto& ls = config.localsearch;
  AttackResult r;
  r.label = label;
  r.target = config.target;
  const std::uint64_t start_queries = oracle.queries();
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  const std::size_t classes = oracle.num_classes();
  auto objective = [&](std::span<const float> p) {
    return config.target >= 0 ? -static_cast<double>(p[config.target]) : static_cast<double>(p[label]);
  };

  auto probs = oracle.probabilities(x);
  r.clean_class = argmax(probs);
  Tensor cur = x.clone();
  int cur_class = r.clean_class;
  double cur_score = objective(probs);
  auto x0 = x.data();
  std::vector<bool> in_set(hw, false);
  bool set_empty = true;
  std::mt19937_64 rng(config.seed);

  for (int round = 0; round < ls.rounds && !is_success(cur_class, label, config.target); ++round) {
    std::vector<bool> near(hw, set_empty);
    if (!set_empty) {
      for (std::size_t q = 0; q < hw; ++q) {
        if (!in_set[q]) continue;
        const long qy = static_cast<long>(q / w), qx = static_cast<long>(q % w);
        for (long y = std::max(0L, qy - ls.half_width); y <= std::min<long>(h - 1, qy + ls.half_width); ++y) {
          for (long xx = std::max(0L, qx - ls.half_width); xx <= std::min<long>(w - 1, qx + ls.half_width); ++xx) {
            near[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(xx)] = true;
          }
        }
      }
    }
    auto perturbed = [&](std::size_t q, float dir, std::size_t ch) {
      const std::size_t i = ch * hw + q;
      return project(cur.data()[i] + dir * ls.perturbation, x0[i], config.epsilon, config.clip_min, config.clip_max);
    };
    std::vector<std::pair<std::size_t, float>> cands;
    for (std::size_t q = 0; q < hw; ++q) {
      if (!near[q]) continue;
      for (float dir : {1.0f, -1.0f}) {
        bool changes = false;
        for (std::size_t ch = 0; ch < c && !changes; ++ch) changes = perturbed(q, dir, ch) != cur.data()[ch * hw + q];
        if (changes) cands.emplace_back(q, dir);
      }
    }
    if (cands.empty()) break;
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(ls.candidates), cands.size());
    if (take == 0) break;
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, cands.size() - 1);
      std::swap(cands[i], cands[pick(rng)]);
    }
    Tensor batch({take, c, h, w});
    for (std::size_t k = 0; k < take; ++k) {
      float* img = batch.data().data() + k * c * hw;
      std::copy(cur.data().begin(), cur.data().end(), img);
      for (std::size_t ch = 0; ch < c; ++ch) img[ch * hw + cands[k].first] = perturbed(cands[k].first, cands[k].second, ch);
    }
    auto scores = oracle.probabilities(batch);
    ++r.iterations;
    int chosen = -1;
    bool chosen_success = false;
    double chosen_score = cur_score;
    for (std::size_t k = 0; k < take; ++k) {
      std::span<const float> p(scores.data() + k * classes, classes);
      const bool ok = is_success(argmax(p), label, config.target);
      const double s = objective(p);
      if ((ok && !chosen_success) || (ok == chosen_success && s < chosen_score)) {
        chosen = static_cast<int>(k);
        chosen_success = ok;
        chosen_score = s;
      }
    }
    if (chosen < 0) continue;
    std::span<const float> img(batch.data().data() + static_cast<std::size_t>(chosen) * c * hw, c * hw);
    std::copy(img.begin(), img.end(), cur.data().begin());
    cur_score = chosen_score;
    cur_class = argmax(std::span<const float>(scores.data() + static_cast<std::size_t>(chosen) * classes, classes));
    in_set[cands[static_cast<std::size_t>(chosen)].first] = true;
    set_empty = false;
  }
  r.queries = oracle.queries() - start_queries;
  finish(r, x, cur, cur_class);
  return r;
}

AttackResult genattack(ScoreOracle& oracle, const Tensor& x, int label, const AttackConfig& config) {
  config.validate();
  require_single(x, oracle.num_classes(), label, config.target, "genattack");
  const auto& ga = config.genattack;
  const std::uint64_t start_queries = oracle.queries();
  const std::size_t n = static_cast<std::size_t>(ga.population);
  const std::size_t d = x.numel();
  const std::size_t classes = oracle.num_classes();
  const float eps = config.epsilon;
  auto x0 = x.data();
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  auto uniform = [&](float half) { return half > 0.0f ? (2.0f * unit(rng) - 1.0f) * half : 0.0f; };

  Shape pop_shape = x.shape();
  pop_shape[0] = n;
  Tensor pop(pop_shape);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < d; ++i) {
      const float v = k == 0 ? x0[i] : x0[i] + uniform(eps);
      pop.data()[k * d + i] = project(v, x0[i], eps, config.clip_min, config.clip_max);
    }
  }
  auto probs = oracle.probabilities(pop);

  AttackResult r;
  r.label = label;
  r.clean_class = argmax(std::span<const float>(probs.data(), classes));
  const int target = config.target >= 0 ? config.target : argmax_except(std::span<const float>(probs.data(), classes), r.clean_class);
  if (target < 0 || static_cast<std::size_t>(target) >= classes) throw std::out_of_range("genattack: target out of range");
  if (target == r.clean_class) throw std::invalid_argument("genattack: target equals the clean class");
  r.target = target;

  auto fitness_of = [&](std::span<const float> p) {
    double other = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (static_cast<int>(j) != target) other = std::max(other, static_cast<double>(p[j]));
    }
    constexpr double floor = 1e-30;
    return std::log(std::max<double>(p[target], floor)) - std::log(std::max(other, floor));
  };
  std::vector<double> fitness(n);
  std::vector<int> classes_of(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::span<const float> p(probs.data() + k * classes, classes);
    fitness[k] = fitness_of(p);
    classes_of[k] = argmax(p);
  }
  auto winner = [&]() -> int {
    for (std::size_t k = 0; k < n; ++k) {
      if (classes_of[k] == target) return static_cast<int>(k);
    }
    return -1;
  };
  auto member = [&](std::size_t k) {
    Tensor t(x.shape());
    std::copy_n(pop.data().begin() + static_cast<std::ptrdiff_t>(k * d), d, t.data().begin());
    return t;
  };

  int found = winner();
  for (int g = 0; g < ga.generations && found < 0; ++g) {
    const std::size_t elite = static_cast<std::size_t>(std::max_element(fitness.begin(), fitness.end()) - fitness.begin());
    auto sel = softmax(fitness);
    std::discrete_distribution<std::size_t> parent(sel.begin(), sel.end());
    Tensor next(pop_shape);
    std::copy_n(pop.data().begin() + static_cast<std::ptrdiff_t>(elite * d), d, next.data().begin());
    for (std::size_t k = 1; k < n; ++k) {
      const std::size_t a = parent(rng), b = parent(rng);
      for (std::size_t i = 0; i < d; ++i) {
        float v = unit(rng) < 0.5f ? pop.data()[a * d + i] : pop.data()[b * d + i];
        if (unit(rng) < ga.mutation_rate) v += uniform(ga.mutation_range);
        next.data()[k * d + i] = project(v, x0[i], eps, config.clip_min, config.clip_max);
      }
    }
    const double elite_fit = fitness[elite];
    const int elite_class = classes_of[elite];
    pop = next;
    fitness[0] = elite_fit;
    classes_of[0] = elite_class;
    if (n > 1) {
      Tensor children({n - 1, x.dim(1), x.dim(2), x.dim(3)});
      std::copy(pop.data().begin() + static_cast<std::ptrdiff_t>(d), pop.data().end(), children.data().begin());
      auto cp = oracle.probabilities(children);
      for (std::size_t k = 1; k < n; ++k) {
        std::span<const float> p(cp.data() + (k - 1) * classes, classes);
        fitness[k] = fitness_of(p);
        classes_of[k] = argmax(p);
      }
    }
    r.iterations = g + 1;
    found = winner();
  }
  const std::size_t pick =
      found >= 0 ? static_cast<std::size_t>(found)
                 : static_cast<std::size_t>(std::max_element(fitness.begin(), fitness.end()) - fitness.begin());
  r.queries = oracle.queries() - start_queries;
  finish(r, x, member(pick), classes_of[pick]);
  return r;
}

AttackResult run_attack(const DifferentiableClassifier& model, const Tensor& x, int label, const AttackConfig& config) {
  switch (config.kind) {
    case AttackKind::fgsm: return fgsm(model, x, label, config);
    case AttackKind::pgd: return pgd(model, x, label, config);
    case AttackKind::cw: return cw_l2(model, x, label, config);
    case AttackKind::deepfool: return deepfool(model, x, label, config);
    case AttackKind::localsearch: {
      ScoreOracle oracle(model);
      return localsearch(oracle, x, label, config);
    }
    case AttackKind::genattack: {
      ScoreOracle oracle(model);
      return genattack(oracle, x, label, config);
    }
  }
  throw std::invalid_argument("run_attack: unknown attack kind");
}

std::uint64_t derive_seed(std::uint64_t run_seed, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(run_seed) ^ a) ^ b);
}

}  // namespace bbed

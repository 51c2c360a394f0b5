#include "bbed/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "bbed/format.hpp"

namespace bbed {
namespace {

using Ptree = boost::property_tree::ptree;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto item = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse_value(const std::string& where, const std::string& text) {
  T v{};
  const auto s = trim(text);
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
    throw std::invalid_argument(where + ": cannot parse '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& where, const std::string& text) {
  const auto s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument(where + ": expected a boolean, got '" + s + "'");
}

/// Applies every key of a section through the handler table; unknown keys throw.
class Section {
 public:
  using Handler = std::function<void(const std::string& where, const std::string& value)>;
  Section(std::string name, std::map<std::string, Handler> handlers)
      : name_(std::move(name)), handlers_(std::move(handlers)) {}
  void apply(const Ptree& tree) const {
    for (const auto& [key, node] : tree) {
      const std::string where = "[" + name_ + "] " + key;
      auto it = handlers_.find(key);
      if (it == handlers_.end()) throw std::invalid_argument("unknown key " + where);
      try {
        it->second(where, node.data());
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::exception& e) {
        throw std::invalid_argument(where + ": " + e.what());
      }
    }
  }

 private:
  std::string name_;
  std::map<std::string, Handler> handlers_;
};

template <class T>
Section::Handler num(T& field) {
  return [&field](const std::string& w, const std::string& v) { field = parse_value<T>(w, v); };
}

Section::Handler flag(bool& field) {
  return [&field](const std::string& w, const std::string& v) { field = parse_bool(w, v); };
}

Section::Handler path_of(std::filesystem::path& field, const std::filesystem::path& base) {
  return [&field, base](const std::string&, const std::string& v) {
    std::filesystem::path p = trim(v);
    field = p.is_absolute() || base.empty() ? p : base / p;
  };
}

AttackSweep parse_attack_section(const std::string& name, const Ptree& tree) {
  AttackSweep s;
  s.name = name;
  AttackConfig& c = s.config;
  bool has_values = false;
  Section sec("attack " + name,
              {
                  {"kind", [&](const std::string&, const std::string& v) { c.kind = parse_attack(trim(v)); }},
                  {"stress", [&](const std::string&, const std::string& v) { s.stress = parse_stress_kind(trim(v)); }},
                  {"values",
                   [&](const std::string& w, const std::string& v) {
                     for (const auto& item : split_list(v)) s.values.push_back(parse_value<double>(w, item));
                     has_values = true;
                   }},
                  {"epsilon", num(c.epsilon)},
                  {"iterations", num(c.iterations)},
                  {"step_size", num(c.step_size)},
                  {"random_start", flag(c.random_start)},
                  {"cw_c", num(c.cw.c)},
                  {"cw_kappa", num(c.cw.kappa)},
                  {"cw_steps", num(c.cw.steps)},
                  {"cw_lr", num(c.cw.lr)},
                  {"overshoot", num(c.deepfool.overshoot)},
                  {"max_iter", num(c.deepfool.max_iter)},
                  {"ls_perturbation", num(c.localsearch.perturbation)},
                  {"ls_half_width", num(c.localsearch.half_width)},
                  {"ls_candidates", num(c.localsearch.candidates)},
                  {"ls_rounds", num(c.localsearch.rounds)},
                  {"population", num(c.genattack.population)},
                  {"mutation_rate", num(c.genattack.mutation_rate)},
                  {"mutation_range", num(c.genattack.mutation_range)},
                  {"generations", num(c.genattack.generations)},
                  {"target", num(c.target)},
                  {"clip_min", num(c.clip_min)},
                  {"clip_max", num(c.clip_max)},
              });
  sec.apply(tree);
  if (!has_values) throw std::invalid_argument("[attack " + name + "] needs a 'values' list");
  return s;
}

std::string_view route_name(GradientRoute r) { return r == GradientRoute::ste ? "ste" : "latent"; }

std::string_view dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::synthetic: return "synthetic";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::idx: return "idx";
  }
  return "unknown";
}

}  // namespace

VariantSpec parse_variant(std::string_view name) {
  VariantSpec v;
  v.name = std::string(name);
  if (name == "distilled") {
    v.kind = CompressionKind::distilled;
  } else if (name.rfind("pruned-", 0) == 0) {
    v.kind = CompressionKind::pruned;
    v.regularity = parse_regularity(name.substr(7));
  } else if (name == "xnor") {
    v.kind = CompressionKind::binarized;
    v.scheme = BinaryScheme::xnor;
  } else if (name == "abc") {
    v.kind = CompressionKind::binarized;
    v.scheme = BinaryScheme::abc;
  } else {
    throw std::invalid_argument("unknown variant '" + std::string(name) +
                                "' (expected distilled, pruned-weight, pruned-kernel, pruned-filter, xnor or abc)");
  }
  return v;
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream o;
  auto list = [](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_number(v[i]);
    return s;
  };
  // threads, out and timings never change results, so they stay out of the hash
  o << "[run]\nseeds=" << list(seeds) << "\n";
  const auto& d = dataset;
  o << "[dataset]\nkind=" << dataset_kind_name(d.kind) << "\npath=" << d.path.generic_string()
    << "\ntrain_images=" << d.train_images.generic_string() << "\ntrain_labels=" << d.train_labels.generic_string()
    << "\ntest_images=" << d.test_images.generic_string() << "\ntest_labels=" << d.test_labels.generic_string()
    << "\ntrain_size=" << d.train_size << "\neval_size=" << d.eval_size << "\nsplit_seed=" << d.split_seed
    << "\nchannels=" << d.channels << "\nimage_size=" << d.image_size << "\nclasses=" << d.classes << "\n";
  o << "[model]\narch=" << arch_name(arch) << "\nepochs=" << train.epochs << "\nbatch_size=" << train.batch_size
    << "\nlr=" << format_number(train.lr) << "\nmomentum=" << format_number(train.momentum)
    << "\nweight_decay=" << format_number(train.weight_decay) << "\naugment=" << train.augment << "\n";
  const auto& c = compress;
  o << "[compress]\nvariants=";
  for (std::size_t i = 0; i < c.variants.size(); ++i) o << (i ? "," : "") << c.variants[i].name;
  o << "\nsparsity=" << format_number(c.sparsity) << "\nabc_bases=" << c.abc_bases << "\nstudent=" << arch_name(c.student)
    << "\ntemperature=" << format_number(c.distill.temperature) << "\nmix=" << format_number(c.distill.mix)
    << "\nfinetune_epochs=" << c.finetune_epochs << "\nfinetune_lr=" << format_number(c.finetune_lr) << "\n";
  o << "[evaluate]\nbreak_threshold=" << (eval.break_threshold ? format_number(*eval.break_threshold) : "default")
    << "\nstrong_strain=" << format_number(eval.taxonomy.strong_strain)
    << "\nbrittle_jump=" << format_number(eval.taxonomy.brittle_jump) << "\nattack_samples=" << eval.attack_samples
    << "\ncam_samples=" << eval.cam_samples << "\nroute=" << route_name(eval.route) << "\n";
  for (const auto& a : attacks) {
    const auto& k = a.config;
    o << "[attack " << a.name << "]\nkind=" << attack_name(k.kind) << "\nstress=" << stress_kind_name(a.stress)
      << "\nvalues=" << list(a.values) << "\nepsilon=" << format_number(k.epsilon) << "\niterations=" << k.iterations
      << "\nstep_size=" << format_number(k.step_size) << "\nrandom_start=" << k.random_start
      << "\ncw=" << format_number(k.cw.c) << "," << format_number(k.cw.kappa) << "," << k.cw.steps << ","
      << format_number(k.cw.lr) << "\ndeepfool=" << format_number(k.deepfool.overshoot) << "," << k.deepfool.max_iter
      << "\nlocalsearch=" << format_number(k.localsearch.perturbation) << "," << k.localsearch.half_width << ","
      << k.localsearch.candidates << "," << k.localsearch.rounds << "\ngenattack=" << k.genattack.population << ","
      << format_number(k.genattack.mutation_rate) << "," << format_number(k.genattack.mutation_range) << ","
      << k.genattack.generations << "\ntarget=" << k.target << "\nclip=" << format_number(k.clip_min) << ","
      << format_number(k.clip_max) << "\n";
  }
  return o.str();
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (seeds.empty()) fail("no seeds");
  if (threads == 0) fail("threads must be >= 1");
  auto need = [&](const std::filesystem::path& p, const char* key) {
    if (p.empty()) fail(std::string("[dataset] ") + key + " is required");
    if (!std::filesystem::exists(p)) fail(std::string("[dataset] ") + key + " does not exist: " + p.string());
  };
  switch (dataset.kind) {
    case DatasetKind::cifar10: need(dataset.path, "path"); break;
    case DatasetKind::idx:
      need(dataset.train_images, "train_images");
      need(dataset.train_labels, "train_labels");
      need(dataset.test_images, "test_images");
      need(dataset.test_labels, "test_labels");
      break;
    case DatasetKind::synthetic:
      if (dataset.classes < 2) fail("[dataset] classes must be >= 2");
      {
        const auto shape = make_model(arch, dataset.classes, 0).input_shape;
        if (shape != Shape{dataset.channels, dataset.image_size, dataset.image_size}) {
          fail("[dataset] channels/image_size do not match the input shape of " + std::string(arch_name(arch)));
        }
      }
      break;
  }
  if (train.batch_size == 0) fail("[model] batch_size must be >= 1");
  if (!(compress.sparsity >= 0.0f && compress.sparsity < 1.0f)) fail("[compress] sparsity must lie in [0, 1)");
  if (compress.abc_bases == 0) fail("[compress] abc_bases must be >= 1");
  if (!(compress.distill.temperature > 0.0f)) fail("[compress] temperature must be > 0");
  if (!(compress.distill.mix >= 0.0f && compress.distill.mix <= 1.0f)) fail("[compress] mix must lie in [0, 1]");
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    const auto& a = attacks[i];
    for (std::size_t j = 0; j < i; ++j) {
      if (attacks[j].name == a.name) fail("duplicate attack '" + a.name + "'");
    }
    if (a.values.empty()) fail("[attack " + a.name + "] values is empty");
    for (std::size_t k = 0; k < a.values.size(); ++k) {
      if (!(a.values[k] >= 0.0) || (k > 0 && !(a.values[k] > a.values[k - 1]))) {
        fail("[attack " + a.name + "] values must be non-negative and strictly ascending");
      }
      try {
        apply_stress(a.config, a.stress, a.values[k]);
      } catch (const std::invalid_argument& e) {
        fail("[attack " + a.name + "] " + e.what());
      }
    }
  }
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config.canonical())));
  return buf;
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  Ptree root;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, root);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  // empty sections never reach the tree, so check the headers on the raw text
  std::istringstream lines(text);
  for (std::string line; std::getline(lines, line);) {
    const auto t = trim(line);
    if (t.size() < 2 || t.front() != '[' || t.back() != ']') continue;
    const auto name = trim(std::string_view(t).substr(1, t.size() - 2));
    const bool known = name == "run" || name == "dataset" || name == "model" || name == "compress" ||
                       name == "evaluate" || name.rfind("attack ", 0) == 0;
    if (!known) throw std::invalid_argument("config: unknown section [" + name + "]");
  }
  ExperimentConfig cfg;
  bool augment_given = false;
  for (const auto& [name, tree] : root) {
    if (!tree.data().empty()) throw std::invalid_argument("config: key '" + name + "' outside any section");
    if (name == "run") {
      std::optional<std::uint64_t> single;
      Section("run", {{"seed",
                       [&](const std::string& w, const std::string& v) { single = parse_value<std::uint64_t>(w, v); }},
                      {"seeds",
                       [&](const std::string& w, const std::string& v) {
                         cfg.seeds.clear();
                         for (const auto& item : split_list(v)) cfg.seeds.push_back(parse_value<std::uint64_t>(w, item));
                         cfg.seed_dirs = true;
                       }},
                      {"threads", num(cfg.threads)},
                      {"out", path_of(cfg.out, base_dir)},
                      {"timings", flag(cfg.timings)}})
          .apply(tree);
      if (single && cfg.seed_dirs) throw std::invalid_argument("config: [run] has both seed and seeds");
      if (single) cfg.seeds = {*single};
    } else if (name == "dataset") {
      auto& d = cfg.dataset;
      Section("dataset",
              {{"kind",
                [&](const std::string& w, const std::string& v) {
                  const auto k = trim(v);
                  if (k == "synthetic") d.kind = DatasetKind::synthetic;
                  else if (k == "cifar10") d.kind = DatasetKind::cifar10;
                  else if (k == "idx") d.kind = DatasetKind::idx;
                  else throw std::invalid_argument(w + ": unknown dataset kind '" + k + "'");
                }},
               {"path", path_of(d.path, base_dir)},
               {"train_images", path_of(d.train_images, base_dir)},
               {"train_labels", path_of(d.train_labels, base_dir)},
               {"test_images", path_of(d.test_images, base_dir)},
               {"test_labels", path_of(d.test_labels, base_dir)},
               {"train_size", num(d.train_size)},
               {"eval_size", num(d.eval_size)},
               {"split_seed", num(d.split_seed)},
               {"channels", num(d.channels)},
               {"image_size", num(d.image_size)},
               {"classes", num(d.classes)}})
          .apply(tree);
    } else if (name == "model") {
      auto& t = cfg.train;
      Section("model", {{"arch", [&](const std::string&, const std::string& v) { cfg.arch = parse_arch(trim(v)); }},
                        {"epochs", num(t.epochs)},
                        {"batch_size", num(t.batch_size)},
                        {"lr", num(t.lr)},
                        {"momentum", num(t.momentum)},
                        {"weight_decay", num(t.weight_decay)},
                        {"augment",
                         [&](const std::string& w, const std::string& v) {
                           t.augment = parse_bool(w, v);
                           augment_given = true;
                         }}})
          .apply(tree);
    } else if (name == "compress") {
      auto& c = cfg.compress;
      Section("compress",
              {{"variants",
                [&](const std::string&, const std::string& v) {
                  c.variants.clear();
                  for (const auto& item : split_list(v)) c.variants.push_back(parse_variant(item));
                }},
               {"sparsity", num(c.sparsity)},
               {"abc_bases", num(c.abc_bases)},
               {"student", [&](const std::string&, const std::string& v) { c.student = parse_arch(trim(v)); }},
               {"temperature", num(c.distill.temperature)},
               {"mix", num(c.distill.mix)},
               {"finetune_epochs", num(c.finetune_epochs)},
               {"finetune_lr", num(c.finetune_lr)}})
          .apply(tree);
    } else if (name == "evaluate") {
      auto& e = cfg.eval;
      Section("evaluate",
              {{"break_threshold",
                [&](const std::string& w, const std::string& v) { e.break_threshold = parse_value<double>(w, v); }},
               {"strong_strain", num(e.taxonomy.strong_strain)},
               {"brittle_jump", num(e.taxonomy.brittle_jump)},
               {"attack_samples", num(e.attack_samples)},
               {"cam_samples", num(e.cam_samples)},
               {"route",
                [&](const std::string& w, const std::string& v) {
                  const auto r = trim(v);
                  if (r == "ste") e.route = GradientRoute::ste;
                  else if (r == "latent") e.route = GradientRoute::latent;
                  else throw std::invalid_argument(w + ": expected ste or latent");
                }}})
          .apply(tree);
    } else if (name.rfind("attack ", 0) == 0) {
      const auto attack = trim(std::string_view(name).substr(7));
      if (attack.empty()) throw std::invalid_argument("config: attack section without a name");
      cfg.attacks.push_back(parse_attack_section(attack, tree));
    } else {
      throw std::invalid_argument("config: unknown section [" + name + "]");
    }
  }
  // crops and flips suit natural images, not the procedural bars
  if (!augment_given && cfg.dataset.kind == DatasetKind::synthetic) cfg.train.augment = false;
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

}  // namespace bbed

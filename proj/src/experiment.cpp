#include "bbed/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bbed/checkpoint.hpp"
#include "bbed/format.hpp"
#include "bbed/report.hpp"
#include "json.hpp"

namespace bbed {
namespace fs = std::filesystem;

namespace {

std::string num(double v) { return format_number(v); }
std::string num(std::size_t v) { return std::to_string(v); }

double to_double(const std::string& s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw std::invalid_argument("not an integer: '" + s + "'");
  return v;
}

CompressionKind parse_compression(const std::string& s) {
  for (auto k : {CompressionKind::none, CompressionKind::distilled, CompressionKind::pruned,
                 CompressionKind::binarized}) {
    if (compression_name(k) == s) return k;
  }
  throw std::invalid_argument("unknown compression '" + s + "'");
}

Dataset head(const Dataset& d, std::size_t n) {
  Dataset out{d.sample_shape, d.num_classes, {}, {}};
  n = std::min(n, d.size());
  out.pixels.assign(d.pixels.begin(), d.pixels.begin() + static_cast<std::ptrdiff_t>(n * d.sample_numel()));
  out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

fs::path checkpoint_path(const fs::path& dir, const std::string& name) { return dir / "models" / (name + ".bbed"); }

void check_shape(const Model& m, const Dataset& d) {
  if (m.input_shape != d.sample_shape) {
    throw std::invalid_argument("model " + std::string(arch_name(m.arch)) + " expects input " +
                                shape_str(m.input_shape) + " but the dataset has " + shape_str(d.sample_shape));
  }
  if (m.num_classes != d.num_classes) throw std::invalid_argument("model and dataset disagree on the class count");
}

TrainConfig finetune_config(const ExperimentConfig& c, std::uint64_t seed, const std::string& name) {
  TrainConfig t = c.train;
  t.epochs = c.compress.finetune_epochs;
  t.lr = c.compress.finetune_lr;
  t.seed = derive_seed(seed, fnv1a(name));
  return t;
}

std::string log_rows(const std::string& model, const TrainReport& r) {
  std::string out;
  for (std::size_t e = 0; e < r.epoch_losses.size(); ++e) {
    out += csv_line(std::vector<std::string>{model, num(e + 1), num(static_cast<double>(r.epoch_losses[e]))});
  }
  return out;
}

const std::vector<std::string> kModelColumns = {"model",          "path",         "arch",
                                                "compression",    "clean_accuracy", "compression_ratio",
                                                "ncc",            "parameter_bits", "baseline_parameter_bits",
                                                "macs",           "baseline_macs"};

const std::vector<std::string> kCellColumns = {
    "model",   "attack",    "stress_kind", "stress",       "stress_index", "seed",      "accuracy", "clean_accuracy",
    "samples", "attacked",  "successes",   "mean_queries", "mean_linf",    "mean_l2",   "status"};

std::vector<ModelRow> read_models(const fs::path& dir) {
  const auto t = read_csv(dir / "models.csv");
  std::vector<ModelRow> out;
  for (const auto& r : t.rows) {
    ModelRow m;
    m.name = r[t.column("model")];
    m.path = r[t.column("path")];
    m.arch = parse_arch(r[t.column("arch")]);
    m.compression = parse_compression(r[t.column("compression")]);
    m.clean_accuracy = to_double(r[t.column("clean_accuracy")]);
    m.stats.compression_ratio = to_double(r[t.column("compression_ratio")]);
    m.stats.ncc = to_double(r[t.column("ncc")]);
    m.stats.parameter_bits = to_double(r[t.column("parameter_bits")]);
    m.stats.baseline_parameter_bits = to_double(r[t.column("baseline_parameter_bits")]);
    m.stats.macs = to_double(r[t.column("macs")]);
    m.stats.baseline_macs = to_double(r[t.column("baseline_macs")]);
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<CellRow> read_cells(const fs::path& dir) {
  const auto t = read_csv(dir / "cells.csv");
  std::vector<CellRow> out;
  for (const auto& r : t.rows) {
    CellRow c;
    c.model = r[t.column("model")];
    c.attack = r[t.column("attack")];
    c.kind = parse_stress_kind(r[t.column("stress_kind")]);
    c.stress = to_double(r[t.column("stress")]);
    c.stress_index = to_u64(r[t.column("stress_index")]);
    c.seed = to_u64(r[t.column("seed")]);
    c.accuracy = to_double(r[t.column("accuracy")]);
    c.clean_accuracy = to_double(r[t.column("clean_accuracy")]);
    c.samples = to_u64(r[t.column("samples")]);
    c.attacked = to_u64(r[t.column("attacked")]);
    c.successes = to_u64(r[t.column("successes")]);
    c.mean_queries = to_double(r[t.column("mean_queries")]);
    c.mean_linf = to_double(r[t.column("mean_linf")]);
    c.mean_l2 = to_double(r[t.column("mean_l2")]);
    c.status = r[t.column("status")];
    out.push_back(std::move(c));
  }
  return out;
}

fs::path resolve(const fs::path& dir, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : dir / path;
}

std::string box_row(const std::string& model, const std::string& attack, std::span<const double> values) {
  const auto b = box_stats(values);
  std::string outliers;
  for (std::size_t i = 0; i < b.outliers.size(); ++i) outliers += (i ? ";" : "") + num(b.outliers[i]);
  return csv_line(std::vector<std::string>{model, attack, num(values.size()), num(b.min), num(b.q1), num(b.median),
                                           num(b.q3), num(b.max), num(b.whisker_low), num(b.whisker_high),
                                           outliers});
}

/// Mean over channels of one CHW image, row-major H x W.
std::vector<double> greyscale(const Tensor& x, const Shape& chw) {
  const auto v = x.to_vector();
  const std::size_t hw = chw[1] * chw[2];
  std::vector<double> g(hw, 0.0);
  for (std::size_t c = 0; c < chw[0]; ++c) {
    for (std::size_t i = 0; i < hw; ++i) g[i] += v[c * hw + i];
  }
  for (double& p : g) p /= static_cast<double>(chw[0]);
  return g;
}

int predicted(const Model& m, const Tensor& x) {
  const auto logits = forward(m, x).logits.to_vector();
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

void write_cams(const ExperimentConfig& config, std::uint64_t seed, const fs::path& dir,
                const std::vector<ModelRow>& models, const Dataset& attack_set, RunRecord& record) {
  std::string rows = csv_line(std::vector<std::string>{"model", "sample", "tag", "stress", "class", "q1", "q2", "q3"});
  const std::size_t n = std::min(config.eval.cam_samples, attack_set.size());
  if (!config.attacks.empty() && n > 0) {
    const auto& sweep = config.attacks.front();
    // clean, the mildest attacked level and the strongest
    std::vector<std::size_t> levels;
    for (std::size_t j = 0; j < sweep.values.size(); ++j) {
      if (sweep.values[j] != 0.0) {
        levels.push_back(j);
        break;
      }
    }
    if (!levels.empty() && levels.front() != sweep.values.size() - 1) levels.push_back(sweep.values.size() - 1);
    for (const auto& row : models) {
      const Model model = load_checkpoint(resolve(dir, row.path));
      const ModelClassifier clf(model, config.eval.route);
      const auto& shape = model.input_shape;
      try {
        cam(model, attack_set.image(0), 0);
      } catch (const std::invalid_argument& e) {
        record.failures.push_back("cam " + row.name + ": " + e.what());
        continue;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const Tensor x = attack_set.image(i);
        const int label = attack_set.labels[i];
        const bool correct = predicted(model, x) == label;
        std::vector<std::pair<std::string, std::pair<double, Tensor>>> images{{"clean", {0.0, x}}};
        for (std::size_t j : levels) {
          Tensor adv = x;
          if (correct) {
            AttackConfig cfg = apply_stress(sweep.config, sweep.stress, sweep.values[j]);
            cfg.seed = derive_seed(cell_seed(seed, row.name, sweep.name, j), i);
            adv = run_attack(clf, x, label, cfg).adversarial;
          }
          images.push_back({"stress" + std::to_string(j), {sweep.values[j], adv}});
        }
        for (const auto& [tag, item] : images) {
          const auto& [stress, img] = item;
          const int cls = predicted(model, img);
          const auto h = upsample(cam(model, img, cls), shape[1], shape[2]);
          const std::string stem = row.name + "_s" + std::to_string(i) + "_" + tag;
          write_file(dir / "cam" / (stem + ".pgm"), encode_pgm(h.width, h.height, h.normalized));
          write_file(dir / "cam" / (stem + ".svg"), svg_cam_overlay(h.width, h.height, greyscale(img, shape), h.normalized));
          const auto q = cam_quartiles(h);
          rows += csv_line(std::vector<std::string>{row.name, num(i), tag, num(stress), std::to_string(cls), num(q[0]),
                                                    num(q[1]), num(q[2])});
        }
      }
    }
  }
  write_file(dir / "cam_quartiles.csv", rows);
}

}  // namespace

DataSplit load_data(const DatasetSpec& spec) {
  DataSplit s;
  switch (spec.kind) {
    case DatasetKind::synthetic:
      s.train = make_synthetic(spec.train_size, spec.channels, spec.image_size, spec.classes, spec.split_seed);
      s.eval = subset(make_synthetic(spec.eval_size, spec.channels, spec.image_size, spec.classes,
                                     derive_seed(spec.split_seed, 1)),
                      spec.eval_size, derive_seed(spec.split_seed, 2));
      break;
    case DatasetKind::cifar10: {
      std::vector<fs::path> train_files;
      for (int b = 1; b <= 5; ++b) train_files.push_back(spec.path / ("data_batch_" + std::to_string(b) + ".bin"));
      s.train = subset(load_cifar10(train_files), spec.train_size, spec.split_seed);
      s.eval = subset(load_cifar10({spec.path / "test_batch.bin"}), spec.eval_size, derive_seed(spec.split_seed, 1));
      break;
    }
    case DatasetKind::idx:
      s.train = subset(load_idx(spec.train_images, spec.train_labels, spec.classes), spec.train_size, spec.split_seed);
      s.eval = subset(load_idx(spec.test_images, spec.test_labels, spec.classes), spec.eval_size,
                      derive_seed(spec.split_seed, 1));
      break;
  }
  return s;
}

std::uint64_t cell_seed(std::uint64_t run_seed, const std::string& model, const std::string& attack,
                        std::size_t stress_index) {
  return derive_seed(run_seed, fnv1a(model + "/" + attack), stress_index);
}

fs::path seed_directory(const ExperimentConfig& config, const fs::path& out, std::uint64_t seed) {
  return config.seed_dirs ? out / ("seed_" + std::to_string(seed)) : out;
}

Model train_stage(const ExperimentConfig& config, std::uint64_t seed, const fs::path& dir) {
  const auto data = load_data(config.dataset);
  Model m = make_model(config.arch, data.train.num_classes, seed);
  check_shape(m, data.train);
  TrainConfig t = config.train;
  t.seed = seed;
  const auto report = train(m, data.train, t);
  save_checkpoint(m, checkpoint_path(dir, "vanilla"));
  write_file(dir / "train_log.csv", csv_line(std::vector<std::string>{"model", "epoch", "loss"}) + log_rows("vanilla", report));
  return m;
}

void compress_stage(const ExperimentConfig& config, std::uint64_t seed, const fs::path& dir,
                    const std::optional<fs::path>& teacher_path) {
  const auto data = load_data(config.dataset);
  const Model teacher = load_checkpoint(teacher_path ? *teacher_path : checkpoint_path(dir, "vanilla"));
  check_shape(teacher, data.train);
  const auto& c = config.compress;
  std::string log = csv_line(std::vector<std::string>{"model", "epoch", "loss"});
  for (const auto& v : c.variants) {
    Model m;
    TrainReport report;
    switch (v.kind) {
      case CompressionKind::distilled: {
        TrainConfig t = config.train;
        t.seed = derive_seed(seed, fnv1a(v.name));
        m = distill(teacher, c.student, c.distill, data.train, t, &report);
        break;
      }
      case CompressionKind::pruned:
        m = prune(teacher, v.regularity, c.sparsity);
        if (c.finetune_epochs > 0) report = train(m, data.train, finetune_config(config, seed, v.name));
        break;
      case CompressionKind::binarized:
        m = v.scheme == BinaryScheme::xnor ? binarize_xnor(teacher) : binarize_abc(teacher, c.abc_bases);
        if (c.finetune_epochs > 0) report = train(m, data.train, finetune_config(config, seed, v.name));
        break;
      case CompressionKind::none: break;
    }
    save_checkpoint(m, checkpoint_path(dir, v.name));
    log += log_rows(v.name, report);
  }
  write_file(dir / "compress_log.csv", log);
}

std::size_t attack_stage(const ExperimentConfig& config, std::uint64_t seed, const fs::path& dir,
                         const std::optional<fs::path>& model_path) {
  const auto data = load_data(config.dataset);
  const Dataset attack_set = head(data.eval, config.eval.attack_samples);
  std::vector<std::pair<std::string, fs::path>> targets;
  if (model_path) {
    targets.emplace_back(model_path->stem().string(), *model_path);
  } else {
    targets.emplace_back("vanilla", checkpoint_path(dir, "vanilla"));
    for (const auto& v : config.compress.variants) targets.emplace_back(v.name, checkpoint_path(dir, v.name));
  }
  const fs::path baseline_path = checkpoint_path(dir, "vanilla");
  std::optional<Model> baseline;
  if (fs::exists(baseline_path)) baseline = load_checkpoint(baseline_path);

  const EvalOptions opts{config.eval.break_threshold, config.eval.taxonomy, config.eval.route, config.threads};
  std::string models_csv = csv_line(kModelColumns);
  std::string cells_csv = csv_line(kCellColumns);
  std::string results_csv = csv_line(std::vector<std::string>{
      "model", "attack", "stress", "sample", "label", "attacked", "clean_class", "adversarial_class", "target",
      "success", "queries", "linf", "l2", "iterations"});
  std::string timings_csv = csv_line(std::vector<std::string>{"model", "attack", "stress", "seconds"});
  std::size_t failures = 0;

  for (const auto& [name, path] : targets) {
    const Model model = load_checkpoint(path);
    check_shape(model, data.eval);
    const auto stats = compression_stats(model, baseline ? *baseline : model);
    const fs::path rel = path.lexically_relative(dir);
    const bool inside = !rel.empty() && *rel.begin() != "..";
    models_csv += csv_line(std::vector<std::string>{
        name, (inside ? rel : path).generic_string(), std::string(arch_name(model.arch)),
        std::string(compression_name(model.compression.kind)), num(accuracy(model, data.eval)),
        num(stats.compression_ratio), num(stats.ncc), num(stats.parameter_bits), num(stats.baseline_parameter_bits),
        num(stats.macs), num(stats.baseline_macs)});
    const double clean = attack_set.size() ? accuracy(model, attack_set) : 0.0;

    for (const auto& sweep : config.attacks) {
      for (std::size_t j = 0; j < sweep.values.size(); ++j) {
        CellRow cell;
        cell.model = name;
        cell.attack = sweep.name;
        cell.kind = sweep.stress;
        cell.stress = sweep.values[j];
        cell.stress_index = j;
        cell.seed = cell_seed(seed, name, sweep.name, j);
        cell.clean_accuracy = clean;
        cell.samples = attack_set.size();
        cell.accuracy = clean;
        const auto t0 = std::chrono::steady_clock::now();
        try {
          if (cell.stress != 0.0) {
            const AttackConfig cfg = apply_stress(sweep.config, sweep.stress, cell.stress);
            std::vector<AttackResult> results;
            cell.accuracy = attacked_accuracy(model, cfg, attack_set, cell.seed, opts, &results);
            double queries = 0.0, linf = 0.0, l2 = 0.0;
            for (std::size_t i = 0; i < results.size(); ++i) {
              const auto& r = results[i];
              const bool attacked = r.label >= 0;
              if (attacked) {
                ++cell.attacked;
                cell.successes += r.success;
                queries += static_cast<double>(r.queries);
                linf += r.linf;
                l2 += r.l2;
              }
              results_csv += csv_line(std::vector<std::string>{
                  name, sweep.name, num(cell.stress), num(i), std::to_string(attack_set.labels[i]),
                  attacked ? "1" : "0", std::to_string(r.clean_class), std::to_string(r.adversarial_class),
                  std::to_string(r.target), r.success ? "1" : "0", num(r.queries), num(r.linf), num(r.l2),
                  std::to_string(r.iterations)});
            }
            if (cell.attacked) {
              const auto a = static_cast<double>(cell.attacked);
              cell.mean_queries = queries / a;
              cell.mean_linf = linf / a;
              cell.mean_l2 = l2 / a;
            }
          }
        } catch (const std::exception& e) {
          cell.status = std::string("error: ") + e.what();
          cell.accuracy = 0.0;
          ++failures;
        }
        cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        cells_csv += csv_line(std::vector<std::string>{
            cell.model, cell.attack, std::string(stress_kind_name(cell.kind)), num(cell.stress),
            num(cell.stress_index), num(cell.seed), num(cell.accuracy), num(cell.clean_accuracy), num(cell.samples),
            num(cell.attacked), num(cell.successes), num(cell.mean_queries), num(cell.mean_linf), num(cell.mean_l2),
            cell.status});
        timings_csv += csv_line(std::vector<std::string>{name, sweep.name, num(cell.stress), num(cell.seconds)});
      }
    }
  }
  write_file(dir / "models.csv", models_csv);
  write_file(dir / "cells.csv", cells_csv);
  write_file(dir / "attack_results.csv", results_csv);
  if (config.timings) write_file(dir / "timings.csv", timings_csv);
  return failures;
}

RunRecord evaluate_stage(const ExperimentConfig& config, std::uint64_t seed, const fs::path& dir) {
  RunRecord rec;
  rec.config_hash = config_hash(config);
  rec.canonical_config = config.canonical();
  rec.seed = seed;
  rec.models = read_models(dir);
  rec.cells = read_cells(dir);
  const double threshold = break_threshold(config.dataset.classes, config.eval.break_threshold);

  std::map<std::string, const ModelRow*> by_name;
  for (const auto& m : rec.models) by_name[m.name] = &m;
  std::map<std::string, double> attack_code;
  for (std::size_t i = 0; i < config.attacks.size(); ++i) attack_code[config.attacks[i].name] = static_cast<double>(i);

  // cells are written grouped by (model, attack) in config order
  std::string curves_csv = csv_line(std::vector<std::string>{"model", "attack", "stress_kind", "stress", "accuracy",
                                                             "strain", "break_flag", "classification"});
  std::string summary_csv = csv_line(std::vector<std::string>{"model", "attack", "stress_kind", "clean_accuracy",
                                                              "threshold", "break_stress", "final_strain",
                                                              "classification"});
  for (std::size_t a = 0; a < rec.cells.size();) {
    std::size_t b = a;
    while (b < rec.cells.size() && rec.cells[b].model == rec.cells[a].model && rec.cells[b].attack == rec.cells[a].attack) {
      ++b;
    }
    const auto& first = rec.cells[a];
    std::vector<double> stresses, accs;
    std::string failure;
    for (std::size_t i = a; i < b; ++i) {
      if (rec.cells[i].status != "ok" && failure.empty()) {
        failure = first.model + "/" + first.attack + " stress " + num(rec.cells[i].stress) + ": " + rec.cells[i].status;
      }
      stresses.push_back(rec.cells[i].stress);
      accs.push_back(rec.cells[i].accuracy);
    }
    if (failure.empty()) {
      try {
        auto curve = make_curve(first.kind, stresses, accs, first.clean_accuracy, threshold, config.eval.taxonomy);
        rec.curves.push_back({first.model, first.attack, std::move(curve)});
      } catch (const std::exception& e) {
        failure = first.model + "/" + first.attack + ": " + e.what();
      }
    }
    if (!failure.empty()) rec.failures.push_back(failure);
    a = b;
  }
  for (const auto& nc : rec.curves) {
    const auto& c = nc.curve;
    const std::string cls(curve_class_name(c.classification));
    bool flagged = false;
    for (const auto& p : c.points) {
      const bool flag = !flagged && p.accuracy <= c.threshold;
      flagged = flagged || flag;
      curves_csv += csv_line(std::vector<std::string>{nc.model, nc.attack, std::string(stress_kind_name(c.kind)),
                                                      num(p.stress), num(p.accuracy), num(p.strain), flag ? "1" : "0",
                                                      cls});
    }
    summary_csv += csv_line(std::vector<std::string>{nc.model, nc.attack, std::string(stress_kind_name(c.kind)),
                                                     num(c.clean_accuracy), num(c.threshold),
                                                     c.break_stress ? num(*c.break_stress) : "",
                                                     num(c.points.back().strain), cls});
  }
  write_file(dir / "curves.csv", curves_csv);
  write_file(dir / "curve_summary.csv", summary_csv);

  // observations: one row per attacked cell
  const std::vector<std::string> numeric = {"accuracy_after_attack", "clean_accuracy", "compression_ratio", "ncc",
                                            "stress", "attack_code"};
  std::vector<std::string> header{"model", "attack"};
  header.insert(header.end(), numeric.begin(), numeric.end());
  std::string obs_csv = csv_line(header);
  std::vector<std::vector<double>> obs;
  std::vector<const CellRow*> obs_cells;
  for (const auto& c : rec.cells) {
    if (c.status != "ok" || c.stress == 0.0) continue;
    const auto it = by_name.find(c.model);
    if (it == by_name.end()) throw std::runtime_error("cells.csv names unknown model '" + c.model + "'");
    const auto code = attack_code.count(c.attack) ? attack_code[c.attack] : -1.0;
    obs.push_back({c.accuracy, c.clean_accuracy, it->second->stats.compression_ratio, it->second->stats.ncc, c.stress,
                   code});
    obs_cells.push_back(&c);
    std::vector<std::string> row{c.model, c.attack};
    for (double v : obs.back()) row.push_back(num(v));
    obs_csv += csv_line(row);
  }
  write_file(dir / "observations.csv", obs_csv);

  // box statistics of accuracy after attack, per model overall and per model x attack
  std::string box_csv = csv_line(std::vector<std::string>{"model", "attack", "n", "min", "q1", "median", "q3", "max",
                                                          "whisker_low", "whisker_high", "outliers"});
  for (const auto& m : rec.models) {
    std::vector<double> all;
    std::vector<std::pair<std::string, std::vector<double>>> per;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      if (obs_cells[i]->model != m.name) continue;
      all.push_back(obs[i][0]);
      if (per.empty() || per.back().first != obs_cells[i]->attack) per.push_back({obs_cells[i]->attack, {}});
      per.back().second.push_back(obs[i][0]);
    }
    if (all.empty()) continue;
    box_csv += box_row(m.name, "*", all);
    for (const auto& [attack, values] : per) box_csv += box_row(m.name, attack, values);
  }
  write_file(dir / "box.csv", box_csv);

  // PCA on the standardized observation columns that vary
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < numeric.size(); ++k) {
    bool varies = false;
    for (const auto& row : obs) varies = varies || row[k] != obs.front()[k];
    if (varies) {
      keep.push_back(k);
      rec.pca_columns.push_back(numeric[k]);
    } else {
      rec.pca_dropped.push_back(numeric[k]);
    }
  }
  std::string loadings_csv, scores_csv;
  if (obs.size() >= 2 && !keep.empty()) {
    ObservationMatrix m(rec.pca_columns);
    for (const auto& row : obs) {
      std::vector<double> r;
      for (auto k : keep) r.push_back(row[k]);
      m.add_row(std::move(r));
    }
    rec.pca = pca(m, true);
    const auto& p = *rec.pca;
    std::vector<std::string> h{"column"};
    for (std::size_t c = 0; c < p.components.size(); ++c) h.push_back("pc" + std::to_string(c + 1));
    loadings_csv = csv_line(h);
    for (std::size_t k = 0; k < keep.size(); ++k) {
      std::vector<std::string> row{rec.pca_columns[k]};
      for (const auto& comp : p.components) row.push_back(num(comp[k]));
      loadings_csv += csv_line(row);
    }
    std::vector<std::string> ratio{"explained_variance_ratio"};
    for (double r : p.explained_variance_ratio) ratio.push_back(num(r));
    loadings_csv += csv_line(ratio);
    h[0] = "model";
    h.insert(h.begin() + 1, {"attack", "stress"});
    scores_csv = csv_line(h);
    for (std::size_t i = 0; i < obs.size(); ++i) {
      std::vector<std::string> row{obs_cells[i]->model, obs_cells[i]->attack, num(obs_cells[i]->stress)};
      for (double s : p.scores[i]) row.push_back(num(s));
      scores_csv += csv_line(row);
    }
  } else {
    loadings_csv = csv_line(std::vector<std::string>{"column"});
    scores_csv = csv_line(std::vector<std::string>{"model", "attack", "stress"});
  }
  write_file(dir / "pca_loadings.csv", loadings_csv);
  write_file(dir / "pca_scores.csv", scores_csv);

  const auto data = load_data(config.dataset);
  write_cams(config, seed, dir, rec.models, head(data.eval, config.eval.attack_samples), rec);

  for (const auto& c : rec.cells) {
    if (c.status != "ok") rec.failures.push_back(c.model + "/" + c.attack + " stress " + num(c.stress) + ": " + c.status);
  }
  std::sort(rec.failures.begin(), rec.failures.end());
  rec.failures.erase(std::unique(rec.failures.begin(), rec.failures.end()), rec.failures.end());

  nlohmann::json j;
  j["config_hash"] = rec.config_hash;
  j["config"] = rec.canonical_config;
  j["seed"] = rec.seed;
  j["models"] = nlohmann::json::array();
  for (const auto& m : rec.models) {
    j["models"].push_back({{"name", m.name},
                           {"arch", arch_name(m.arch)},
                           {"compression", compression_name(m.compression)},
                           {"clean_accuracy", m.clean_accuracy},
                           {"compression_ratio", m.stats.compression_ratio},
                           {"ncc", m.stats.ncc}});
  }
  j["cells"] = nlohmann::json::array();
  for (const auto& c : rec.cells) {
    j["cells"].push_back({{"model", c.model},
                          {"attack", c.attack},
                          {"stress_kind", stress_kind_name(c.kind)},
                          {"stress", c.stress},
                          {"seed", c.seed},
                          {"accuracy", c.accuracy},
                          {"attacked", c.attacked},
                          {"successes", c.successes},
                          {"mean_queries", c.mean_queries},
                          {"mean_linf", c.mean_linf},
                          {"mean_l2", c.mean_l2},
                          {"status", c.status}});
  }
  j["curves"] = nlohmann::json::array();
  for (const auto& nc : rec.curves) {
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : nc.curve.points) points.push_back({p.stress, p.accuracy, p.strain});
    j["curves"].push_back({{"model", nc.model},
                           {"attack", nc.attack},
                           {"clean_accuracy", nc.curve.clean_accuracy},
                           {"threshold", nc.curve.threshold},
                           {"break_stress", nc.curve.break_stress ? nlohmann::json(*nc.curve.break_stress) : nullptr},
                           {"classification", curve_class_name(nc.curve.classification)},
                           {"points", points}});
  }
  j["pca"] = {{"columns", rec.pca_columns},
              {"dropped_constant_columns", rec.pca_dropped},
              {"explained_variance_ratio",
               rec.pca ? nlohmann::json(rec.pca->explained_variance_ratio) : nlohmann::json::array()}};
  j["failures"] = rec.failures;
  write_file(dir / "record.json", j.dump(2) + "\n");
  return rec;
}

void report_stage(const ExperimentConfig& config, const fs::path& dir) {
  const auto curves = read_csv(dir / "curves.csv");
  const auto summary = read_csv(dir / "curve_summary.csv");
  const auto models = read_models(dir);
  const auto box = read_csv(dir / "box.csv");
  const std::size_t cm = curves.column("model"), ca = curves.column("attack"), cs = curves.column("stress"),
                    cacc = curves.column("accuracy"), cst = curves.column("strain");

  for (const auto& sweep : config.attacks) {
    std::vector<PlotSeries> strain_series, acc_series;
    for (const auto& m : models) {
      PlotSeries s{m.name, {}}, a{m.name, {}};
      for (const auto& r : curves.rows) {
        if (r[cm] != m.name || r[ca] != sweep.name) continue;
        s.points.emplace_back(to_double(r[cs]), to_double(r[cst]));
        a.points.emplace_back(to_double(r[cs]), to_double(r[cacc]));
      }
      if (!s.points.empty()) {
        strain_series.push_back(std::move(s));
        acc_series.push_back(std::move(a));
      }
    }
    const std::string kind(stress_kind_name(sweep.stress));
    const std::string title = sweep.name + " (" + std::string(attack_name(sweep.config.kind)) + ")";
    write_file(dir / "plots" / (sweep.name + "_strain.svg"),
               svg_line_plot(title, kind + " stress", "strain", strain_series, 1.0));
    write_file(dir / "plots" / (sweep.name + "_accuracy.svg"),
               svg_line_plot(title, kind + " stress", "accuracy", acc_series, 1.0));
  }

  std::vector<std::pair<std::string, BoxStats>> boxes;
  for (const auto& r : box.rows) {
    if (r[box.column("attack")] != "*") continue;
    BoxStats b;
    b.min = to_double(r[box.column("min")]);
    b.q1 = to_double(r[box.column("q1")]);
    b.median = to_double(r[box.column("median")]);
    b.q3 = to_double(r[box.column("q3")]);
    b.max = to_double(r[box.column("max")]);
    b.whisker_low = to_double(r[box.column("whisker_low")]);
    b.whisker_high = to_double(r[box.column("whisker_high")]);
    std::stringstream ss(r[box.column("outliers")]);
    for (std::string item; std::getline(ss, item, ';');) b.outliers.push_back(to_double(item));
    boxes.emplace_back(r[box.column("model")], std::move(b));
  }
  write_file(dir / "plots" / "box_accuracy.svg", svg_box_plot("accuracy after attack", "accuracy", boxes));

  // model rows x attack columns: accuracy at the strongest stress
  std::vector<std::string> header{"model", "clean_accuracy"};
  for (const auto& s : config.attacks) header.push_back(s.name);
  std::string csv = csv_line(header);
  std::string md = "| model | clean |";
  for (const auto& s : config.attacks) md += " " + s.name + " |";
  md += "\n|---|---|";
  for (std::size_t i = 0; i < config.attacks.size(); ++i) md += "---|";
  md += "\n";
  std::string cls_md = md;
  auto fixed3 = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return std::string(buf);
  };
  for (const auto& m : models) {
    std::vector<std::string> row{m.name, num(m.clean_accuracy)};
    md += "| " + m.name + " | " + fixed3(m.clean_accuracy) + " |";
    cls_md += "| " + m.name + " | " + fixed3(m.clean_accuracy) + " |";
    for (const auto& s : config.attacks) {
      std::string last, cls;
      for (const auto& r : curves.rows) {
        if (r[cm] == m.name && r[ca] == s.name) last = r[cacc];
      }
      for (const auto& r : summary.rows) {
        if (r[summary.column("model")] == m.name && r[summary.column("attack")] == s.name) {
          cls = r[summary.column("classification")];
        }
      }
      row.push_back(last);
      md += " " + (last.empty() ? std::string("n/a") : fixed3(to_double(last))) + " |";
      cls_md += " " + (cls.empty() ? std::string("n/a") : cls) + " |";
    }
    csv += csv_line(row);
    md += "\n";
    cls_md += "\n";
  }
  write_file(dir / "summary.csv", csv);
  write_file(dir / "summary.md", "# Accuracy after attack (strongest stress)\n\n" + md +
                                     "\n# Curve classification\n\n" + cls_md);
}

void write_aggregate(const ExperimentConfig& config, const fs::path& out) {
  struct Key {
    std::string model, attack, stress;
  };
  std::vector<Key> order;
  std::map<std::string, std::vector<double>> values;
  for (auto seed : config.seeds) {
    const auto t = read_csv(seed_directory(config, out, seed) / "cells.csv");
    for (const auto& r : t.rows) {
      if (r[t.column("status")] != "ok") continue;
      Key k{r[t.column("model")], r[t.column("attack")], r[t.column("stress")]};
      const std::string id = k.model + "\n" + k.attack + "\n" + k.stress;
      auto& v = values[id];
      if (v.empty()) order.push_back(k);
      v.push_back(to_double(r[t.column("accuracy")]));
    }
  }
  std::string csv = csv_line(std::vector<std::string>{"model", "attack", "stress", "seeds", "mean", "min", "q1",
                                                      "median", "q3", "max"});
  for (const auto& k : order) {
    const auto& v = values[k.model + "\n" + k.attack + "\n" + k.stress];
    const auto b = box_stats(v);
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    csv += csv_line(std::vector<std::string>{k.model, k.attack, k.stress, num(v.size()), num(mean), num(b.min),
                                             num(b.q1), num(b.median), num(b.q3), num(b.max)});
  }
  write_file(out / "aggregate.csv", csv);
}

std::size_t run_experiment(const ExperimentConfig& config, const fs::path& out) {
  std::size_t failures = 0;
  for (auto seed : config.seeds) {
    const auto dir = seed_directory(config, out, seed);
    train_stage(config, seed, dir);
    compress_stage(config, seed, dir);
    failures += attack_stage(config, seed, dir);
    evaluate_stage(config, seed, dir);
    report_stage(config, dir);
  }
  if (config.seed_dirs) write_aggregate(config, out);
  return failures;
}

}  // namespace bbed

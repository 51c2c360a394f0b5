#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "bbed/checkpoint.hpp"
#include "bbed/config.hpp"
#include "bbed/experiment.hpp"
#include "bbed/format.hpp"
#include "bbed/report.hpp"
#include "harness_cases.hpp"
#include "json.hpp"

using namespace bbed;
using namespace bbed::fixtures;
namespace fs = std::filesystem;

namespace {

const fs::path kData = BBED_TEST_DATA_DIR;

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("bbed_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  if (at == std::string::npos) throw std::logic_error("pattern not found: " + from);
  return s.replace(at, from.size(), to);
}

template <class E, class F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  return "<no error>";
}

}  // namespace

// ---------------------------------------------------------------- checkpoint

TEST(Checkpoint, EmptyModelIsTheBareHeader) {
  const auto bytes = encode_checkpoint(Model{});
  const std::vector<std::uint8_t> want{'B', 'B', 'E', 'D', 1, 0, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(bytes, want);
  TempDir dir;
  save_checkpoint(Model{}, dir.path() / "empty.bbed");
  EXPECT_EQ(fs::file_size(dir.path() / "empty.bbed"), 13u);
  const Model m = load_checkpoint(dir.path() / "empty.bbed");
  EXPECT_TRUE(m.layers.empty());
  EXPECT_EQ(m.arch, Arch::none);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 30; ++i) EXPECT_EQ(run_checkpoint_case(rng), "") << "case " << i;
}

TEST(Checkpoint, FileRoundTripLeavesNoTemporary) {
  std::mt19937_64 rng(3);
  const Model m = binarize_abc(make_model(Arch::tiny_cnn, 10, 5), 3);
  TempDir dir;
  const auto path = dir.path() / "nested" / "abc.bbed";
  save_checkpoint(m, path);
  EXPECT_EQ(model_diff(m, load_checkpoint(path)), "");
  EXPECT_EQ(list_files(dir.path()), std::vector<fs::path>{fs::path("nested") / "abc.bbed"});
}

TEST(Checkpoint, EveryTruncationIsRejected) {
  const auto bytes = encode_checkpoint(prune(make_model(Arch::tiny_cnn, 4, 2), Regularity::kernel, 0.5f));
  for (std::size_t n = 0; n < bytes.size(); n += (n < 400 ? 1 : 97)) {
    const std::span<const std::uint8_t> prefix(bytes.data(), n);
    EXPECT_THROW(decode_checkpoint(prefix), CheckpointError) << "prefix " << n;
  }
}

TEST(Checkpoint, HeaderErrors) {
  auto bytes = encode_checkpoint(make_model(Arch::tiny_cnn, 4, 2));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(error_of<CheckpointError>([&] { decode_checkpoint(bad); }).find("magic"), std::string::npos);
  bad = bytes;
  bad[4] = 2;
  EXPECT_NE(error_of<CheckpointError>([&] { decode_checkpoint(bad); }).find("version 2"), std::string::npos);
  bad = bytes;
  bad.push_back(0);
  EXPECT_NE(error_of<CheckpointError>([&] { decode_checkpoint(bad); }).find("trailing"), std::string::npos);
}

TEST(Checkpoint, CorruptTensorIsNamed) {
  const auto bytes = encode_checkpoint(make_model(Arch::tiny_cnn, 4, 2));
  // first tensor: u32 length, "meta.model", then the dtype byte
  auto bad = bytes;
  bad[13 + 4 + 10] = 9;
  const auto msg = error_of<CheckpointError>([&] { decode_checkpoint(bad); });
  EXPECT_NE(msg.find("meta.model"), std::string::npos) << msg;
  EXPECT_NE(msg.find("dtype"), std::string::npos) << msg;

  Model m = make_model(Arch::tiny_cnn, 4, 2);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (auto* b = std::get_if<BatchNormLayer>(&m.layers[i])) {
      b->beta = Tensor({b->gamma.numel() + 1});
      const auto err = error_of<CheckpointError>([&] { decode_checkpoint(encode_checkpoint(m)); });
      EXPECT_NE(err.find("layer" + std::to_string(i) + ".beta"), std::string::npos) << err;
      break;
    }
  }
}

// ---------------------------------------------------------------- datasets

TEST(Dataset, GoldenCifarIsByteAccurate) { EXPECT_EQ(check_golden_cifar(kData / "golden_cifar.bin"), ""); }

TEST(Dataset, GoldenIdxIsByteAccurate) {
  EXPECT_EQ(check_golden_idx(kData / "golden_idx_images.idx", kData / "golden_idx_labels.idx"), "");
}

TEST(Dataset, CifarBatchOfTenThousandRecords) {
  std::vector<std::uint8_t> bytes(10000 * 3073, 17);
  for (std::size_t i = 0; i < 10000; ++i) bytes[i * 3073] = static_cast<std::uint8_t>(i % 10);
  const auto d = parse_cifar10(bytes);
  ASSERT_EQ(d.size(), 10000u);
  for (int l : d.labels) ASSERT_TRUE(l >= 0 && l < 10);
  EXPECT_EQ(d.pixels.size(), 10000u * 3072u);
}

TEST(Dataset, TruncatedCifarReportsTheOffset) {
  const auto bytes = read_file(kData / "golden_cifar.bin");
  const std::span<const std::uint8_t> cut(bytes.data(), 2 * 3073 + 100);
  try {
    parse_cifar10(cut);
    FAIL() << "accepted a truncated record";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 2u * 3073u);
  }
}

TEST(Dataset, IdxLabelMagic) {
  auto bytes = read_file(kData / "golden_idx_labels.idx");
  EXPECT_EQ(parse_idx_labels(bytes).size(), 4u);
  bytes[3] = 0x02;
  try {
    parse_idx_labels(bytes);
    FAIL() << "accepted magic 0x00000802";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Dataset, MutatedMagicFuzz) {
  const auto images = read_file(kData / "golden_idx_images.idx");
  const auto labels = read_file(kData / "golden_idx_labels.idx");
  std::mt19937_64 rng(5);
  for (int i = 0; i < 300; ++i) {
    auto im = images, lb = labels;
    const auto pos = rand_dim(rng, 0, 3);
    const auto val = static_cast<std::uint8_t>(rand_dim(rng, 0, 255));
    im[pos] = val;
    lb[pos] = val;
    if (im[pos] != images[pos]) {
      EXPECT_THROW(parse_idx_images(im), FormatError);
    }
    if (lb[pos] != labels[pos]) {
      EXPECT_THROW(parse_idx_labels(lb), FormatError);
    }
  }
}

TEST(Dataset, HugeDeclaredDimensionsAreRejected) {
  auto bytes = read_file(kData / "golden_idx_images.idx");
  for (int k : {4, 8, 12}) {
    auto b = bytes;
    b[k] = 0xff;
    EXPECT_THROW(parse_idx_images(b), FormatError);
  }
}

TEST(Dataset, SubsetSizeZeroIsEmpty) {
  const auto d = make_synthetic(20, 1, 8, 4, 1);
  const auto s = subset(d, 0, 9);
  EXPECT_EQ(s.size(), 0u);
  EXPECT_TRUE(s.pixels.empty());
}

TEST(Dataset, SubsetIsSeeded) {
  const auto d = make_synthetic(50, 1, 8, 5, 1);
  const auto a = subset(d, 20, 3), b = subset(d, 20, 3), c = subset(d, 20, 4);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, c.pixels);
}

// ---------------------------------------------------------------- config

TEST(Config, ParsesEverySection) {
  const auto c = parse_config(kSmokeConfig);
  EXPECT_EQ(c.seeds, std::vector<std::uint64_t>{3});
  EXPECT_FALSE(c.seed_dirs);
  EXPECT_EQ(c.dataset.kind, DatasetKind::synthetic);
  EXPECT_EQ(c.dataset.classes, 4u);
  EXPECT_EQ(c.arch, Arch::tiny_cnn);
  EXPECT_EQ(c.train.epochs, 2u);
  EXPECT_FALSE(c.train.augment);
  ASSERT_EQ(c.compress.variants.size(), 2u);
  EXPECT_EQ(c.compress.variants[0].kind, CompressionKind::pruned);
  EXPECT_EQ(c.compress.variants[1].scheme, BinaryScheme::xnor);
  ASSERT_EQ(c.attacks.size(), 2u);
  EXPECT_EQ(c.attacks[0].name, "fgsm");
  EXPECT_EQ(c.attacks[0].values, (std::vector<double>{0, 0.1, 0.3}));
  EXPECT_EQ(c.attacks[1].config.kind, AttackKind::localsearch);
  EXPECT_EQ(c.attacks[1].stress, StressKind::iteration);
  EXPECT_EQ(c.attacks[1].config.localsearch.candidates, 6);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, UnknownKeysAndSectionsAreErrors) {
  EXPECT_NE(error_of<std::invalid_argument>([] { parse_config("[model]\nepoch = 3\n"); }).find("[model] epoch"),
            std::string::npos);
  EXPECT_NE(error_of<std::invalid_argument>([] { parse_config("[modle]\n"); }).find("[modle]"), std::string::npos);
  EXPECT_NE(error_of<std::invalid_argument>([] { parse_config("[attack a]\nkind = fgsm\n"); }).find("values"),
            std::string::npos);
  EXPECT_THROW(parse_config("[model]\nlr = fast\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("[run]\nseed = 1\nseeds = 1,2\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("[compress]\nvariants = xnor, ternary\n"), std::invalid_argument);
}

TEST(Config, SeedListAndRelativePaths) {
  const auto c = parse_config("[run]\nseeds = 4, 5, 6\nout = results\n[dataset]\nkind = cifar10\npath = data/c10\n",
                              "/base");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 5, 6}));
  EXPECT_TRUE(c.seed_dirs);
  EXPECT_EQ(c.out, fs::path("/base/results"));
  EXPECT_EQ(c.dataset.path, fs::path("/base/data/c10"));
  EXPECT_TRUE(c.train.augment);
  EXPECT_NE(error_of<std::invalid_argument>([&] { c.validate(); }).find("does not exist"), std::string::npos);
}

TEST(Config, HashCoversResultsOnly) {
  const std::string text = kSmokeConfig;
  const auto h = config_hash(parse_config(text));
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(h, config_hash(parse_config(text)));
  EXPECT_EQ(h, config_hash(parse_config(replace(text, "seed = 3", "seed = 3\nthreads = 4\nout = elsewhere"))));
  EXPECT_NE(h, config_hash(parse_config(replace(text, "values = 0, 0.1, 0.3", "values = 0, 0.1, 0.2"))));
  EXPECT_NE(h, config_hash(parse_config(replace(text, "seed = 3", "seed = 4"))));
  const auto c = parse_config(text);
  EXPECT_EQ(h, [&] {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(c.canonical())));
    return std::string(buf);
  }());
}

TEST(Config, ValidationErrors) {
  const std::string text = kSmokeConfig;
  auto invalid = [&](const std::string& from, const std::string& to) {
    return error_of<std::invalid_argument>([&] { parse_config(replace(text, from, to)).validate(); });
  };
  EXPECT_NE(invalid("values = 0, 0.1, 0.3", "values = 0, 0.3, 0.1").find("ascending"), std::string::npos);
  EXPECT_NE(invalid("stress = amplitude", "stress = population").find("fgsm"), std::string::npos);
  EXPECT_NE(invalid("values = 0, 1, 2", "values = 0, 1.5").find("ls"), std::string::npos);
  EXPECT_NE(invalid("image_size = 28", "image_size = 32").find("input shape"), std::string::npos);
  EXPECT_NE(invalid("finetune_epochs = 1", "sparsity = 1").find("sparsity"), std::string::npos);
  EXPECT_NE(invalid("[attack ls]", "[attack fgsm]").find("duplicate"), std::string::npos);
}

// ---------------------------------------------------------------- report primitives

TEST(Report, CsvFieldsRoundTrip) {
  std::mt19937_64 rng(8);
  const std::string alphabet = "ab,\"\n x";
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> header{"a", "b", "c"}, row(3);
    for (auto& f : row) {
      const auto n = rand_dim(rng, 0, 6);
      for (std::size_t k = 0; k < n; ++k) f += alphabet[rand_dim(rng, 0, alphabet.size() - 1)];
    }
    const auto t = parse_csv(csv_line(header) + csv_line(row));
    ASSERT_EQ(t.rows.size(), 1u);
    EXPECT_EQ(t.rows[0], row);
  }
  EXPECT_THROW(parse_csv("a,b\n1\n"), std::invalid_argument);
}

TEST(Report, NumbersAreShortestRoundTrip) {
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(1.0), "1");
  EXPECT_EQ(format_number(-2.5e-7), "-2.5e-07");
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng);
    const auto s = format_number(v);
    EXPECT_EQ(std::stod(s), v);
    EXPECT_EQ(s.find(','), std::string::npos);
  }
}

TEST(Report, PgmLayout) {
  const std::vector<double> v{0, 127.6, 255, 300, -4, 12};
  const auto pgm = encode_pgm(3, 2, v);
  const std::string head = "P5\n3 2\n255\n";
  ASSERT_EQ(pgm.size(), head.size() + 6);
  EXPECT_EQ(pgm.substr(0, head.size()), head);
  const std::vector<unsigned char> px(pgm.begin() + static_cast<std::ptrdiff_t>(head.size()), pgm.end());
  EXPECT_EQ(px, (std::vector<unsigned char>{0, 128, 255, 255, 0, 12}));
  EXPECT_THROW(encode_pgm(2, 2, v), std::invalid_argument);
}

TEST(Report, SvgDocuments) {
  const std::vector<PlotSeries> s{{"a<b", {{0, 0}, {1, 0.5}}}};
  const auto svg = svg_line_plot("t", "x", "y", s);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_NE(svg.find("a&lt;b"), std::string::npos);
  const std::vector<double> img(4, 0.5), heat{0, 85, 170, 255};
  EXPECT_NE(svg_cam_overlay(2, 2, img, heat).find("fill-opacity"), std::string::npos);
}

// ---------------------------------------------------------------- experiment

TEST(Experiment, GridOfTwoModelsTwoAttacksThreeStresses) {
  TempDir dir;
  auto c = parse_config(replace(kSmokeConfig, "pruned-weight, xnor", "xnor"));
  c.validate();
  EXPECT_EQ(run_experiment(c, dir.path()), 0u);
  const auto cells = read_csv(dir.path() / "cells.csv");
  EXPECT_EQ(cells.rows.size(), 12u);
  EXPECT_EQ(line_count(dir.path() / "curves.csv"), 13u);
  const auto models = read_csv(dir.path() / "models.csv");
  ASSERT_EQ(models.rows.size(), 2u);
  // stress 0 carries the clean accuracy and zero strain
  const auto curves = read_csv(dir.path() / "curves.csv");
  for (const auto& r : curves.rows) {
    if (std::stod(r[curves.column("stress")]) == 0.0) {
      EXPECT_EQ(r[curves.column("strain")], "0");
    }
  }
  const auto rec = nlohmann::json::parse(slurp(dir.path() / "record.json"));
  EXPECT_EQ(rec["config_hash"], config_hash(c));
  EXPECT_EQ(rec["cells"].size(), 12u);
  EXPECT_TRUE(rec["failures"].empty());
  for (const char* f : {"observations.csv", "box.csv", "pca_loadings.csv", "pca_scores.csv", "cam_quartiles.csv",
                        "summary.csv", "summary.md", "plots/fgsm_strain.svg", "plots/ls_accuracy.svg"}) {
    EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  }
  const auto pgm = slurp(dir.path() / "cam" / "vanilla_s0_clean.pgm");
  EXPECT_EQ(pgm.rfind("P5\n28 28\n255\n", 0), 0u);
}

TEST(Experiment, EmptyAttackListGivesCleanAccuraciesOnly) {
  TempDir dir;
  auto text = std::string(kSmokeConfig);
  text = text.substr(0, text.find("[attack fgsm]"));
  const auto c = parse_config(text);
  EXPECT_EQ(run_experiment(c, dir.path()), 0u);
  EXPECT_EQ(line_count(dir.path() / "cells.csv"), 1u);
  EXPECT_EQ(line_count(dir.path() / "curves.csv"), 1u);
  const auto models = read_csv(dir.path() / "models.csv");
  EXPECT_EQ(models.rows.size(), 3u);
  const auto rec = nlohmann::json::parse(slurp(dir.path() / "record.json"));
  EXPECT_TRUE(rec["cells"].empty());
  EXPECT_EQ(rec["models"].size(), 3u);
}

TEST(Experiment, IdenticalRunsAreByteIdentical) {
  TempDir dir;
  const auto c = parse_config(kSmokeConfig);
  run_experiment(c, dir.path() / "a");
  run_experiment(c, dir.path() / "b");
  EXPECT_EQ(tree_diff(dir.path() / "a", dir.path() / "b"), "");
  auto threaded = c;
  threaded.threads = 3;
  run_experiment(threaded, dir.path() / "c");
  EXPECT_EQ(tree_diff(dir.path() / "a", dir.path() / "c"), "");
}

TEST(Experiment, FailedCellIsRecordedAndTheRunContinues) {
  TempDir dir;
  const auto c = parse_config(replace(kSmokeConfig, "values = 0, 1, 2", "values = 0, 1, 2\ntarget = 9"));
  c.validate();
  const auto failures = run_experiment(c, dir.path());
  EXPECT_EQ(failures, 6u);  // 3 models x 2 attacked stress levels
  const auto cells = read_csv(dir.path() / "cells.csv");
  std::size_t ok = 0;
  for (const auto& r : cells.rows) ok += r[cells.column("status")] == "ok";
  EXPECT_EQ(ok, 12u);
  const auto rec = nlohmann::json::parse(slurp(dir.path() / "record.json"));
  EXPECT_EQ(rec["failures"].size(), 6u);
  EXPECT_EQ(rec["curves"].size(), 3u);
}

TEST(Experiment, SeedListWritesPerSeedDirectoriesAndAggregate) {
  TempDir dir;
  auto c = parse_config(replace(replace(kSmokeConfig, "seed = 3", "seeds = 3, 4"), "pruned-weight, xnor", "xnor"));
  run_experiment(c, dir.path());
  EXPECT_TRUE(fs::exists(dir.path() / "seed_3" / "record.json"));
  EXPECT_TRUE(fs::exists(dir.path() / "seed_4" / "record.json"));
  const auto agg = read_csv(dir.path() / "aggregate.csv");
  ASSERT_EQ(agg.rows.size(), 12u);
  const auto a = read_csv(dir.path() / "seed_3" / "cells.csv"), b = read_csv(dir.path() / "seed_4" / "cells.csv");
  for (std::size_t i = 0; i < agg.rows.size(); ++i) {
    const double x = std::stod(a.rows[i][a.column("accuracy")]), y = std::stod(b.rows[i][b.column("accuracy")]);
    EXPECT_DOUBLE_EQ(std::stod(agg.rows[i][agg.column("mean")]), (x + y) / 2);
    EXPECT_EQ(agg.rows[i][agg.column("seeds")], "2");
  }
}

TEST(Experiment, CellSeedsAreDistinct) {
  std::set<std::uint64_t> seen;
  for (const char* m : {"vanilla", "xnor"}) {
    for (const char* a : {"fgsm", "ls"}) {
      for (std::size_t j = 0; j < 5; ++j) seen.insert(cell_seed(1, m, a, j));
    }
  }
  EXPECT_EQ(seen.size(), 20u);
  EXPECT_EQ(cell_seed(1, "vanilla", "fgsm", 2), derive_seed(1, fnv1a("vanilla/fgsm"), 2));
}

// ---------------------------------------------------------------- command line

namespace {

int run_cli(const std::string& args, const fs::path& stderr_file) {
  const std::string cmd = std::string("\"") + BBED_CLI + "\" " + args + " >/dev/null 2>\"" + stderr_file.string() + "\"";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, MissingConfigPrintsUsage) {
  TempDir dir;
  EXPECT_NE(run_cli("attack", dir.path() / "err"), 0);
  const auto err = slurp(dir.path() / "err");
  EXPECT_NE(err.find("--config"), std::string::npos);
  EXPECT_NE(err.find("Usage"), std::string::npos);
  EXPECT_NE(run_cli("attack --config " + (dir.path() / "nope.ini").string(), dir.path() / "err"), 0);
  EXPECT_NE(run_cli("train --config x --frobnicate", dir.path() / "err"), 0);
}

TEST(Cli, AllEqualsTheStageSequence) {
  TempDir dir;
  const auto cfg = dir.path() / "smoke.ini";
  write_file(cfg, kSmokeConfig);
  const auto err = dir.path() / "err";
  ASSERT_EQ(run_cli("all --config " + cfg.string() + " --out " + (dir.path() / "all").string(), err), 0) << slurp(err);
  const std::string out = " --config " + cfg.string() + " --out " + (dir.path() / "staged").string();
  for (const char* stage : {"train", "compress", "attack", "evaluate", "report"}) {
    ASSERT_EQ(run_cli(stage + out, err), 0) << stage << ": " << slurp(err);
  }
  EXPECT_EQ(tree_diff(dir.path() / "all", dir.path() / "staged"), "");
}

TEST(Cli, AttackOneCheckpoint) {
  TempDir dir;
  const auto cfg = dir.path() / "smoke.ini";
  write_file(cfg, kSmokeConfig);
  const auto model = dir.path() / "m.bbed";
  save_checkpoint(make_model(Arch::tiny_cnn, 4, 1), model);
  const auto out = dir.path() / "out";
  ASSERT_EQ(run_cli("attack --config " + cfg.string() + " --model " + model.string() + " --out " + out.string(),
                    dir.path() / "err"),
            0)
      << slurp(dir.path() / "err");
  const auto results = read_csv(out / "attack_results.csv");
  EXPECT_FALSE(results.header.empty());
  const auto models = read_csv(out / "models.csv");
  ASSERT_EQ(models.rows.size(), 1u);
  EXPECT_EQ(models.rows[0][0], "m");
  EXPECT_EQ(line_count(out / "cells.csv"), 7u);
}

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bbed/attacks.hpp"
#include "bbed/dataset.hpp"
#include "bbed/model.hpp"

namespace bbed {

enum class StressKind { amplitude, iteration, population };
enum class CurveClass { brittle, ductile, strong };

std::string_view stress_kind_name(StressKind k);
StressKind parse_stress_kind(std::string_view name);
std::string_view curve_class_name(CurveClass c);

/// max(0, (clean - attacked) / clean). Throws std::invalid_argument when clean <= 0.
double strain(double clean_accuracy, double attacked_accuracy);

/// 1 / num_classes unless overridden.
double break_threshold(std::size_t num_classes, std::optional<double> override_value = std::nullopt);

struct Taxonomy {
  double strong_strain = 0.2;  // S_low: final strain below this with no break is strong
  double brittle_jump = 0.5;   // J: a single-step strain rise above this is brittle
};

struct CurvePoint {
  double stress = 0.0;
  double accuracy = 0.0;
  double strain = 0.0;
};

struct StressStrainCurve {
  StressKind kind = StressKind::amplitude;
  std::vector<CurvePoint> points;  // ascending stress, first point at stress 0
  double clean_accuracy = 0.0;
  double threshold = 0.0;
  std::optional<double> break_stress;
  CurveClass classification = CurveClass::strong;
};

/// Builds a curve from sampled accuracies. Stress 0 is always present and
/// carries the clean accuracy. Break is the first accuracy <= threshold,
/// with the stress interpolated linearly against the previous sample.
StressStrainCurve make_curve(StressKind kind, std::span<const double> stresses, std::span<const double> accuracies,
                             double clean_accuracy, double threshold, const Taxonomy& taxonomy = {});

/// Brittle if a single-step strain rise exceeds J up to and including the
/// break (or over the whole curve without one); strong if there is no break
/// and the final strain is below S_low; ductile otherwise.
CurveClass classify(std::span<const CurvePoint> points, std::optional<std::size_t> break_index,
                    const Taxonomy& taxonomy);

/// Writes the stress value into the field the stress kind sweeps. Throws
/// std::invalid_argument when the attack has no such axis.
AttackConfig apply_stress(const AttackConfig& base, StressKind kind, double stress);

struct EvalOptions {
  std::optional<double> threshold;
  Taxonomy taxonomy;
  GradientRoute route = GradientRoute::ste;
  std::size_t threads = 1;
};

/// Fraction of samples still classified correctly after the attack. Samples
/// misclassified when clean count as wrong without being attacked. Sample i
/// uses seed derive_seed(seed, i).
double attacked_accuracy(const Model& model, const AttackConfig& config, const Dataset& eval, std::uint64_t seed,
                         const EvalOptions& options = {}, std::vector<AttackResult>* results = nullptr);

/// Accuracy at every stress level; level j draws seeds from derive_seed(seed, j).
StressStrainCurve stress_strain(const Model& model, const AttackConfig& base, StressKind kind,
                                std::span<const double> stresses, const Dataset& eval, std::uint64_t seed,
                                const EvalOptions& options = {});

/// Linear interpolation at position q * (n - 1) of the sorted values.
double quantile(std::span<const double> sorted, double q);

struct BoxStats {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
  double whisker_low = 0.0, whisker_high = 0.0;
  std::vector<double> outliers;  // ascending
};

BoxStats box_stats(std::span<const double> values);

class ObservationMatrix {
 public:
  explicit ObservationMatrix(std::vector<std::string> columns);
  void add_row(std::vector<double> row);
  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<double>>& rows() const { return rows_; }
  std::size_t num_rows() const { return rows_.size(); }
  std::size_t num_cols() const { return columns_.size(); }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<double>> rows_;
};

struct PcaResult {
  std::vector<std::vector<double>> components;  // one orthonormal vector per component
  std::vector<double> explained_variance_ratio;
  std::vector<std::vector<double>> scores;  // rows x components
  std::vector<double> mean, scale;
};

/// Components by descending eigenvalue of the covariance, each with its
/// largest-magnitude loading positive.
PcaResult pca(const ObservationMatrix& data, bool standardize);

struct CamHeatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> raw;
  std::vector<double> normalized;  // [0, 255]; all zero for a constant map
  int class_index = -1;
};

/// Map scaled so min -> 0 and max -> 255.
std::vector<double> normalize_255(std::span<const double> raw);

/// sum_k w_k f_k over K feature maps of size h x w.
CamHeatmap cam_from_features(std::span<const float> features, std::size_t channels, std::size_t height,
                             std::size_t width, std::span<const float> weights);

/// CAM of class `cls` for one input. Throws std::invalid_argument when the
/// model does not end in global-average-pool then linear.
CamHeatmap cam(const Model& model, const Tensor& x, int cls);

/// Bilinear resize with half-pixel centres; normalization is recomputed.
CamHeatmap upsample(const CamHeatmap& h, std::size_t height, std::size_t width);

std::array<double, 3> cam_quartiles(const CamHeatmap& h);

}  // namespace bbed

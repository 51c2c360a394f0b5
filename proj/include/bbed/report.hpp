#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bbed/robustness.hpp"

namespace bbed {

/// Quotes a field when it holds a comma, quote or line break.
std::string csv_escape(std::string_view field);
std::string csv_line(std::span<const std::string> fields);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Throws std::invalid_argument when absent.
  std::size_t column(std::string_view name) const;
};

CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);

/// Creates parent directories; throws std::runtime_error when the file cannot be written.
void write_file(const std::filesystem::path& path, std::string_view contents);

/// Binary "P5" greymap, maxval 255; values are rounded and clamped to [0, 255].
std::string encode_pgm(std::size_t width, std::size_t height, std::span<const double> values);

struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

std::string svg_line_plot(std::string_view title, std::string_view x_label, std::string_view y_label,
                          std::span<const PlotSeries> series, std::optional<double> y_max = std::nullopt);

std::string svg_box_plot(std::string_view title, std::string_view y_label,
                         std::span<const std::pair<std::string, BoxStats>> boxes);

/// Greyscale image (row-major, [0,1]) under a half-transparent heatmap (normalized, [0,255]) of the same size.
std::string svg_cam_overlay(std::size_t width, std::size_t height, std::span<const double> image,
                            std::span<const double> heat);

}  // namespace bbed

#include "bbed/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bbed {
namespace {

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 60, kRight = 170, kTop = 40, kBottom = 50;

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void axes(std::ostringstream& o, const Frame& f, std::string_view title, std::string_view x_label,
          std::string_view y_label, bool x_ticks) {
  o << "<text x=\"" << fixed(kWidth / 2 - kRight / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
    << xml_escape(title) << "</text>\n";
  o << "<rect x=\"" << fixed(kLeft) << "\" y=\"" << fixed(kTop) << "\" width=\"" << fixed(kWidth - kLeft - kRight)
    << "\" height=\"" << fixed(kHeight - kTop - kBottom) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    o << "<text x=\"" << fixed(kLeft - 6) << "\" y=\"" << fixed(f.py(y) + 4)
      << "\" text-anchor=\"end\" font-size=\"11\">" << fixed(y) << "</text>\n";
    if (x_ticks) {
      const double x = f.x0 + (f.x1 - f.x0) * i / 4.0;
      o << "<text x=\"" << fixed(f.px(x)) << "\" y=\"" << fixed(kHeight - kBottom + 16)
        << "\" text-anchor=\"middle\" font-size=\"11\">" << fixed(x, 3) << "</text>\n";
    }
  }
  o << "<text x=\"" << fixed(kLeft + (kWidth - kLeft - kRight) / 2) << "\" y=\"" << fixed(kHeight - 12)
    << "\" text-anchor=\"middle\" font-size=\"12\">" << xml_escape(x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << fixed(kTop + (kHeight - kTop - kBottom) / 2)
    << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
    << fixed(kTop + (kHeight - kTop - kBottom) / 2) << ")\">" << xml_escape(y_label) << "</text>\n";
}

std::string svg_open(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(w, 0) + "\" height=\"" + fixed(h, 0) +
         "\" viewBox=\"0 0 " + fixed(w, 0) + " " + fixed(h, 0) + "\" font-family=\"sans-serif\">\n";
}

}  // namespace

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_line(std::span<const std::string> fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  return out + "\n";
}

std::size_t CsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw std::invalid_argument("csv: missing column '" + std::string(name) + "'");
}

CsvTable parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> lines;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      lines.push_back(std::move(row));
      row.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw std::invalid_argument("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    lines.push_back(std::move(row));
  }
  CsvTable t;
  if (lines.empty()) return t;
  t.header = std::move(lines.front());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].size() != t.header.size()) {
      throw std::invalid_argument("csv: row " + std::to_string(i) + " has " + std::to_string(lines[i].size()) +
                                  " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(lines[i]));
  }
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_csv(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string encode_pgm(std::size_t width, std::size_t height, std::span<const double> values) {
  if (values.size() != width * height) throw std::invalid_argument("pgm: size does not match dimensions");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (double v : values) {
    const double c = std::clamp(std::round(v), 0.0, 255.0);
    out += static_cast<char>(static_cast<unsigned char>(c));
  }
  return out;
}

std::string svg_line_plot(std::string_view title, std::string_view x_label, std::string_view y_label,
                          std::span<const PlotSeries> series, std::optional<double> y_max) {
  double x1 = 0.0, y1 = 0.0;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 <= 0.0) x1 = 1.0;
  y1 = y_max ? *y_max : (y1 <= 0.0 ? 1.0 : y1);
  const Frame f{0.0, x1, 0.0, y1};
  std::ostringstream o;
  o << svg_open(kWidth, kHeight);
  axes(o, f, title, x_label, y_label, true);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* colour = kPalette[i % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < series[i].points.size(); ++k) {
      const auto [x, y] = series[i].points[k];
      o << (k ? " " : "") << fixed(f.px(x)) << "," << fixed(f.py(y));
    }
    o << "\"/>\n";
    for (auto [x, y] : series[i].points) {
      o << "<circle cx=\"" << fixed(f.px(x)) << "\" cy=\"" << fixed(f.py(y)) << "\" r=\"3\" fill=\"" << colour
        << "\"/>\n";
    }
    const double ly = kTop + 14 + 18 * static_cast<double>(i);
    o << "<line x1=\"" << fixed(kWidth - kRight + 12) << "\" y1=\"" << fixed(ly - 4) << "\" x2=\""
      << fixed(kWidth - kRight + 32) << "\" y2=\"" << fixed(ly - 4) << "\" stroke=\"" << colour
      << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << fixed(kWidth - kRight + 38) << "\" y=\"" << fixed(ly) << "\" font-size=\"12\">"
      << xml_escape(series[i].label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_box_plot(std::string_view title, std::string_view y_label,
                         std::span<const std::pair<std::string, BoxStats>> boxes) {
  double y1 = 0.0;
  for (const auto& [name, b] : boxes) y1 = std::max(y1, b.max);
  if (y1 <= 0.0) y1 = 1.0;
  const double n = static_cast<double>(std::max<std::size_t>(boxes.size(), 1));
  const Frame f{0.0, n, 0.0, y1};
  std::ostringstream o;
  o << svg_open(kWidth, kHeight);
  axes(o, f, title, "", y_label, false);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& [name, b] = boxes[i];
    const double c = f.px(static_cast<double>(i) + 0.5);
    const double half = 0.3 * (f.px(1.0) - f.px(0.0));
    const char* colour = kPalette[i % std::size(kPalette)];
    o << "<line x1=\"" << fixed(c) << "\" y1=\"" << fixed(f.py(b.whisker_low)) << "\" x2=\"" << fixed(c)
      << "\" y2=\"" << fixed(f.py(b.whisker_high)) << "\" stroke=\"black\"/>\n";
    for (double w : {b.whisker_low, b.whisker_high}) {
      o << "<line x1=\"" << fixed(c - half / 2) << "\" y1=\"" << fixed(f.py(w)) << "\" x2=\"" << fixed(c + half / 2)
        << "\" y2=\"" << fixed(f.py(w)) << "\" stroke=\"black\"/>\n";
    }
    o << "<rect x=\"" << fixed(c - half) << "\" y=\"" << fixed(f.py(b.q3)) << "\" width=\"" << fixed(2 * half)
      << "\" height=\"" << fixed(f.py(b.q1) - f.py(b.q3)) << "\" fill=\"" << colour
      << "\" fill-opacity=\"0.5\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << fixed(c - half) << "\" y1=\"" << fixed(f.py(b.median)) << "\" x2=\"" << fixed(c + half)
      << "\" y2=\"" << fixed(f.py(b.median)) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    for (double v : b.outliers) {
      o << "<circle cx=\"" << fixed(c) << "\" cy=\"" << fixed(f.py(v)) << "\" r=\"3\" fill=\"none\" stroke=\"black\"/>\n";
    }
    o << "<text x=\"" << fixed(c) << "\" y=\"" << fixed(kHeight - kBottom + 16)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << xml_escape(name) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_cam_overlay(std::size_t width, std::size_t height, std::span<const double> image,
                            std::span<const double> heat) {
  if (image.size() != width * height || heat.size() != width * height) {
    throw std::invalid_argument("cam overlay: size does not match dimensions");
  }
  constexpr double cell = 8.0;
  auto channel = [](double v) { return static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
  std::ostringstream o;
  o << svg_open(cell * static_cast<double>(width), cell * static_cast<double>(height));
  for (int layer = 0; layer < 2; ++layer) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t i = y * width + x;
        int r, g, b;
        if (layer == 0) {
          r = g = b = channel(image[i]);
        } else {
          const double v = heat[i] / 255.0;
          r = channel(1.5 - std::abs(4.0 * v - 3.0));
          g = channel(1.5 - std::abs(4.0 * v - 2.0));
          b = channel(1.5 - std::abs(4.0 * v - 1.0));
        }
        char colour[8];
        std::snprintf(colour, sizeof colour, "#%02x%02x%02x", r, g, b);
        o << "<rect x=\"" << fixed(cell * static_cast<double>(x), 0) << "\" y=\""
          << fixed(cell * static_cast<double>(y), 0) << "\" width=\"8\" height=\"8\" fill=\"" << colour << "\""
          << (layer ? " fill-opacity=\"0.45\"" : "") << "/>\n";
      }
    }
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace bbed

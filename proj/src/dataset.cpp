#include "bbed/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace bbed {
namespace {

constexpr std::size_t kCifarPixels = 3072;
constexpr std::size_t kCifarRecord = kCifarPixels + 1;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("truncated IDX header", bytes.size());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::size_t> idx_header(std::span<const std::uint8_t> bytes, std::uint32_t magic, std::size_t& offset) {
  const std::uint32_t got = read_be32(bytes, 0);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX magic 0x%08x, expected 0x%08x", got, magic);
    throw FormatError(buf, 0);
  }
  const std::size_t rank = magic & 0xff;
  std::vector<std::size_t> dims(rank);
  for (std::size_t i = 0; i < rank; ++i) dims[i] = read_be32(bytes, 4 + 4 * i);
  offset = 4 + 4 * rank;
  std::uint64_t payload = 1;
  for (auto d : dims) {
    if (d != 0 && payload > bytes.size() / d) throw FormatError("IDX dimensions exceed the file size", 4);
    payload *= d;
  }
  if (bytes.size() - offset < payload) throw FormatError("truncated IDX payload", bytes.size());
  if (bytes.size() - offset > payload) throw FormatError("trailing bytes after IDX payload", offset + payload);
  return dims;
}

}  // namespace

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Shape shape{indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor t(shape);
  auto dst = t.data();
  const std::size_t k = sample_numel();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = sample(indices[i]);
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return t;
}

Tensor Dataset::image(std::size_t i) const {
  const std::size_t idx[1] = {i};
  return batch(idx);
}

void Dataset::append(std::span<const float> image, int label) {
  if (image.size() != sample_numel()) throw ShapeError("Dataset::append: wrong image size");
  pixels.insert(pixels.end(), image.begin(), image.end());
  labels.push_back(label);
}

Dataset parse_cifar10(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError("truncated CIFAR-10 record", bytes.size() - bytes.size() % kCifarRecord);
  }
  Dataset d{{3, 32, 32}, 10, {}, {}};
  const std::size_t n = bytes.size() / kCifarRecord;
  d.pixels.resize(n * kCifarPixels);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = i * kCifarRecord;
    if (bytes[base] >= 10) throw FormatError("CIFAR-10 label " + std::to_string(bytes[base]) + " out of range", base);
    d.labels[i] = bytes[base];
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      d.pixels[i * kCifarPixels + p] = static_cast<float>(bytes[base + 1 + p]) / 255.0f;
    }
  }
  return d;
}

Dataset load_cifar10(const std::vector<std::filesystem::path>& files) {
  Dataset all{{3, 32, 32}, 10, {}, {}};
  for (const auto& f : files) {
    auto part = parse_cifar10(read_file(f));
    all.pixels.insert(all.pixels.end(), part.pixels.begin(), part.pixels.end());
    all.labels.insert(all.labels.end(), part.labels.begin(), part.labels.end());
  }
  return all;
}

std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  idx_header(bytes, 0x00000801, offset);
  return {bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end()};
}

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  std::size_t offset = 0;
  auto dims = idx_header(bytes, 0x00000803, offset);
  return {dims[0], dims[1], dims[2], {bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end()}};
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t num_classes) {
  auto img = parse_idx_images(read_file(images));
  auto lab = parse_idx_labels(read_file(labels));
  if (img.count != lab.size()) {
    throw FormatError("IDX image count " + std::to_string(img.count) + " differs from label count " +
                          std::to_string(lab.size()),
                      0);
  }
  Dataset d{{1, img.rows, img.cols}, num_classes, {}, {}};
  d.pixels.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) d.pixels[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  d.labels.resize(lab.size());
  for (std::size_t i = 0; i < lab.size(); ++i) {
    if (lab[i] >= num_classes) throw FormatError("IDX label out of range", 8 + i);
    d.labels[i] = lab[i];
  }
  return d;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Dataset subset(const Dataset& data, std::size_t count, std::uint64_t seed) {
  return split(data, std::min(count, data.size()), 0, seed).first;
}

std::pair<Dataset, Dataset> split(const Dataset& data, std::size_t count_a, std::size_t count_b, std::uint64_t seed) {
  if (count_a + count_b > data.size()) {
    throw std::invalid_argument("split: requested " + std::to_string(count_a + count_b) + " of " +
                                std::to_string(data.size()) + " examples");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Dataset a{data.sample_shape, data.num_classes, {}, {}};
  Dataset b = a;
  for (std::size_t i = 0; i < count_a + count_b; ++i) (i < count_a ? a : b).append(data.sample(order[i]), data.labels[order[i]]);
  return {std::move(a), std::move(b)};
}

Dataset make_synthetic(std::size_t count, std::size_t channels, std::size_t size, std::size_t num_classes,
                       std::uint64_t seed) {
  Dataset d{{channels, size, size}, num_classes, {}, {}};
  d.pixels.reserve(count * channels * size * size);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::normal_distribution<float> noise(0.0f, 0.08f);
  std::vector<float> img(channels * size * size);
  const double pi = std::acos(-1.0);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % num_classes);
    const double angle = pi * static_cast<double>(label) / static_cast<double>(num_classes);
    const double freq = 2.0 * pi * (2.0 + static_cast<double>(label % 3)) / static_cast<double>(size);
    const double phase = 2.0 * pi * unit(rng);
    const float contrast = 0.25f + 0.15f * unit(rng);
    for (std::size_t c = 0; c < channels; ++c) {
      const float tint = 0.35f + 0.3f * static_cast<float>((label + c) % num_classes) / static_cast<float>(num_classes);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double u = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
          const float v = tint + contrast * static_cast<float>(std::sin(freq * u + phase)) + noise(rng);
          img[(c * size + y) * size + x] = std::clamp(v, 0.0f, 1.0f);
        }
      }
    }
    d.append(img, label);
  }
  return d;
}

}  // namespace bbed

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bbed/tensor.hpp"

namespace bbed {

/// Labeled images stored as one flat CHW float buffer per example, pixels in [0,1].
struct Dataset {
  Shape sample_shape;  // C, H, W
  std::size_t num_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return shape_numel(sample_shape); }
  std::span<const float> sample(std::size_t i) const {
    return {pixels.data() + i * sample_numel(), sample_numel()};
  }
  /// N x C x H x W batch of the given example indices.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor image(std::size_t i) const;
  void append(std::span<const float> image, int label);
};

/// Raised for malformed dataset files; `offset` is the byte position of the fault.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes).
Dataset parse_cifar10(std::span<const std::uint8_t> bytes);
Dataset load_cifar10(const std::vector<std::filesystem::path>& files);

/// IDX image file (magic 0x00000803) plus label file (magic 0x00000801).
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);
struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};
IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t num_classes = 10);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Deterministic subset of `count` examples chosen by a seeded shuffle.
/// count >= size returns a shuffled copy of everything.
Dataset subset(const Dataset& data, std::size_t count, std::uint64_t seed);

/// Splits into (first `count_a` of a seeded shuffle, the next `count_b`).
std::pair<Dataset, Dataset> split(const Dataset& data, std::size_t count_a, std::size_t count_b, std::uint64_t seed);

/// Procedural classes: each class is a distinct oriented bar pattern with
/// class-specific colour plus noise. Learnable by small CNNs in seconds.
Dataset make_synthetic(std::size_t count, std::size_t channels, std::size_t size, std::size_t num_classes,
                       std::uint64_t seed);

}  // namespace bbed

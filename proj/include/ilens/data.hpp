// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ilens/rng.hpp"
#include "ilens/tensor.hpp"
#include "ilens/zoo.hpp"

namespace ilens {

enum class Split { train, test };

/// Images [n, c, h, w] in [0, 1] with integer labels in [0, num_classes).
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::string name;
  Split split = Split::train;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  ImageShape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  Tensor<float> batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;

  /// Throws ConsistencyError when a stated invariant does not hold.
  void validate() const;
};

/// Shape kinds in class order. A generator with class_offset o and C classes
/// uses kinds o..o+C-1 and labels them 0..C-1.
inline constexpr std::string_view kShapeKinds[] = {"disc", "square", "triangle", "ring",
                                                    "cross", "bars", "checker", "blob"};
inline constexpr std::size_t kShapeKindCount = 8;

/// Balanced procedural dataset of randomly placed, sized, rotated and shaded
/// shapes on a faint noisy background.
Dataset gen_shapes(std::size_t n, std::size_t num_classes, const ImageShape& image, const Rng& rng,
                   std::size_t class_offset = 0, Split split = Split::train);

// IDX files: big-endian magic and sizes, then raw unsigned bytes.
inline constexpr std::uint32_t kIdxImages3 = 0x00000803;  // n, h, w
inline constexpr std::uint32_t kIdxImages4 = 0x00000804;  // n, c, h, w
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);
/// Pixels are quantized to round(255 * x).
void write_idx(const Dataset& ds, const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Sidecar {name, n, classes, image_shape, seed}.
void write_metadata(const Dataset& ds, const std::filesystem::path& path);

enum class CorruptionKind { gaussian_noise, box_blur, contrast, occlusion };
inline constexpr CorruptionKind kCorruptionKinds[] = {CorruptionKind::gaussian_noise, CorruptionKind::box_blur,
                                                      CorruptionKind::contrast, CorruptionKind::occlusion};

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;  // 1..5
};

std::string_view to_string(CorruptionKind k);
CorruptionKind parse_corruption_kind(std::string_view name);

// Severity tables, index = severity - 1.
inline constexpr double kNoiseSigma[5] = {0.04, 0.08, 0.12, 0.18, 0.26};
inline constexpr int kBlurRadius[5] = {1, 2, 3, 4, 5};
inline constexpr double kContrastFactor[5] = {0.75, 0.6, 0.45, 0.3, 0.15};
/// Occluding square side for image height h: floor(h * (0.1 + 0.1 * s)).
inline constexpr std::size_t occlusion_side(std::size_t h, int severity) {
  return h * static_cast<std::size_t>(1 + severity) / 10;
}

/// Same labels and shape; each image distorted with its own stream of rng.
Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec, const Rng& rng);

}  // namespace ilens

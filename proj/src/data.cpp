// SPDX-License-Identifier: Apache-2.0
#include "ilens/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

namespace ilens {

namespace {

constexpr int kSupersample = 4;

struct ShapeParams {
  double cx, cy, radius, angle, fg, bg, wobble_phase;
};

/// Membership of a point given in the shape's rotated unit frame.
bool inside(std::size_t kind, double u, double v, double phase) {
  const double au = std::abs(u), av = std::abs(v);
  switch (kind) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return au <= 0.8 && av <= 0.8;
    case 2:
      return v >= -0.5 && v <= 1.0 - std::sqrt(3.0) * au;
    case 3: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 4:
      return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 5:
      return au <= 0.9 && av <= 0.9 && static_cast<int>(std::floor((v + 0.9) / 0.36)) % 2 == 0;
    case 6:
      return au <= 0.9 && av <= 0.9 &&
             (static_cast<int>(std::floor((u + 0.9) / 0.6)) + static_cast<int>(std::floor((v + 0.9) / 0.6))) % 2 == 0;
    default: {
      const double r = std::sqrt(u * u + v * v);
      return r <= 0.7 + 0.25 * std::sin(3.0 * std::atan2(v, u) + phase);
    }
  }
}

void render(std::size_t kind, const ShapeParams& p, const ImageShape& s, Rng& noise, float* out) {
  const double c = std::cos(p.angle), sn = std::sin(p.angle);
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSupersample - p.cx;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSupersample - p.cy;
          // Image y grows downward; flip so triangles point up.
          const double u = (c * px + sn * py) / p.radius;
          const double v = (sn * px - c * py) / p.radius;
          hits += inside(kind, u, v, p.wobble_phase);
        }
      }
      const double cover = static_cast<double>(hits) / (kSupersample * kSupersample);
      for (std::size_t ch = 0; ch < s.channels; ++ch) {
        const double val = p.bg + cover * (p.fg - p.bg) + noise.normal(0.0, 0.02);
        out[(ch * s.height + y) * s.width + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
}

std::uint32_t read_be32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated IDX header in " + path.string());
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

void box_blur(float* img, const ImageShape& s, int r) {
  std::vector<float> tmp(s.height * s.width);
  const auto h = static_cast<int>(s.height), w = static_cast<int>(s.width);
  for (std::size_t ch = 0; ch < s.channels; ++ch) {
    float* plane = img + ch * s.height * s.width;
    // Separable pass with edge clamping: rows then columns.
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int d = -r; d <= r; ++d) acc += plane[y * w + std::clamp(x + d, 0, w - 1)];
        tmp[y * w + x] = static_cast<float>(acc / (2 * r + 1));
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int d = -r; d <= r; ++d) acc += tmp[std::clamp(y + d, 0, h - 1) * w + x];
        plane[y * w + x] = static_cast<float>(acc / (2 * r + 1));
      }
    }
  }
}

}  // namespace

Tensor<float> Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t per = image_shape().numel();
  std::vector<float> out(indices.size() * per);
  const auto src = images.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) throw IndexError("sample index " + std::to_string(indices[b]) + " out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[b] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  const auto s = image_shape();
  return Tensor<float>({indices.size(), s.channels, s.height, s.width}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.images = batch(indices);
  d.labels = batch_labels(indices);
  d.name = name;
  d.split = split;
  d.num_classes = num_classes;
  d.seed = seed;
  return d;
}

void Dataset::validate() const {
  if (images.rank() != 4) throw ConsistencyError("dataset images must be [n, c, h, w], got " + to_string(images.shape()));
  if (images.dim(0) != labels.size()) {
    throw ConsistencyError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                           std::to_string(labels.size()) + " labels");
  }
  for (float v : images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ConsistencyError("pixel value outside [0, 1]");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ConsistencyError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

Dataset gen_shapes(std::size_t n, std::size_t num_classes, const ImageShape& image, const Rng& rng,
                   std::size_t class_offset, Split split) {
  if (num_classes < 2 || num_classes > kShapeKindCount) {
    throw ArgumentError("num_classes must be in 2..8, got " + std::to_string(num_classes));
  }
  if (class_offset + num_classes > kShapeKindCount) {
    throw ArgumentError("class_offset " + std::to_string(class_offset) + " leaves fewer than " +
                        std::to_string(num_classes) + " shape kinds");
  }
  if (n < num_classes) {
    throw ArgumentError("n=" + std::to_string(n) + " is smaller than num_classes=" + std::to_string(num_classes));
  }
  if (image.height < 4 || image.width < 4 || image.channels == 0) throw ArgumentError("image too small for shapes");

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % num_classes);
  Rng order = rng.derive("order");
  order.shuffle(labels);

  const std::size_t per = image.numel();
  std::vector<float> pixels(n * per);
  const double h = static_cast<double>(image.height), w = static_cast<double>(image.width);
  const double extent = std::min(h, w);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = rng.derive({0x5ea9e5, i});
    ShapeParams p{};
    p.radius = r.uniform(0.32, 0.42) * extent;
    p.cx = r.uniform(0.42, 0.58) * w;
    p.cy = r.uniform(0.42, 0.58) * h;
    p.angle = r.uniform(0.0, 2.0 * std::numbers::pi);
    p.fg = r.uniform(0.6, 1.0);
    p.bg = r.uniform(0.0, 0.15);
    p.wobble_phase = r.uniform(0.0, 2.0 * std::numbers::pi);
    render(class_offset + static_cast<std::size_t>(labels[i]), p, image, r, pixels.data() + i * per);
  }

  Dataset d;
  d.images = Tensor<float>({n, image.channels, image.height, image.width}, std::move(pixels));
  d.labels = std::move(labels);
  d.name = "shapes";
  d.split = split;
  d.num_classes = num_classes;
  d.seed = rng.state().key;
  return d;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  auto img = open_in(images_path);
  const std::uint32_t magic = read_be32(img, images_path);
  std::size_t n = 0;
  ImageShape s{};
  if (magic == kIdxImages3) {
    n = read_be32(img, images_path);
    s.channels = 1;
    s.height = read_be32(img, images_path);
    s.width = read_be32(img, images_path);
  } else if (magic == kIdxImages4) {
    n = read_be32(img, images_path);
    s.channels = read_be32(img, images_path);
    s.height = read_be32(img, images_path);
    s.width = read_be32(img, images_path);
  } else {
    throw FormatError("bad IDX image magic in " + images_path.string());
  }

  auto lab = open_in(labels_path);
  if (read_be32(lab, labels_path) != kIdxLabels) throw FormatError("bad IDX label magic in " + labels_path.string());
  const std::size_t n_labels = read_be32(lab, labels_path);
  if (n_labels != n) {
    throw ConsistencyError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) +
                           " labels");
  }

  std::vector<unsigned char> raw(n * s.numel());
  if (!img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw FormatError("truncated IDX image data in " + images_path.string());
  }
  std::vector<unsigned char> raw_labels(n);
  if (!lab.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(n))) {
    throw FormatError("truncated IDX label data in " + labels_path.string());
  }

  std::vector<float> pixels(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) pixels[i] = static_cast<float>(raw[i]) / 255.0f;
  Dataset d;
  d.images = Tensor<float>({n, s.channels, s.height, s.width}, std::move(pixels));
  d.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = -1;
  for (int l : d.labels) max_label = std::max(max_label, l);
  d.num_classes = static_cast<std::size_t>(max_label + 1);
  d.name = images_path.stem().string();
  return d;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto s = ds.image_shape();
  auto img = open_out(images_path);
  if (s.channels == 1) {
    write_be32(img, kIdxImages3);
    write_be32(img, static_cast<std::uint32_t>(ds.size()));
  } else {
    write_be32(img, kIdxImages4);
    write_be32(img, static_cast<std::uint32_t>(ds.size()));
    write_be32(img, static_cast<std::uint32_t>(s.channels));
  }
  write_be32(img, static_cast<std::uint32_t>(s.height));
  write_be32(img, static_cast<std::uint32_t>(s.width));
  std::vector<unsigned char> raw(ds.images.numel());
  const auto src = ds.images.data();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(src[i], 0.0f, 1.0f) * 255.0f));
  }
  img.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));

  auto lab = open_out(labels_path);
  write_be32(lab, kIdxLabels);
  write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) {
    if (l < 0 || l > 255) throw ArgumentError("label " + std::to_string(l) + " does not fit an IDX byte");
    lab.put(static_cast<char>(l));
  }
  if (!img || !lab) throw IoError("failed writing IDX files");
}

void write_metadata(const Dataset& ds, const std::filesystem::path& path) {
  const auto s = ds.image_shape();
  const nlohmann::json j = {{"name", ds.name},
                            {"n", ds.size()},
                            {"classes", ds.num_classes},
                            {"image_shape", {s.channels, s.height, s.width}},
                            {"seed", ds.seed}};
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

std::string_view to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::gaussian_noise:
      return "gaussian_noise";
    case CorruptionKind::box_blur:
      return "box_blur";
    case CorruptionKind::contrast:
      return "contrast";
    case CorruptionKind::occlusion:
      return "occlusion";
  }
  return "unknown";
}

CorruptionKind parse_corruption_kind(std::string_view name) {
  for (CorruptionKind k : kCorruptionKinds) {
    if (to_string(k) == name) return k;
  }
  throw ArgumentError("unknown corruption kind '" + std::string(name) + "'");
}

Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec, const Rng& rng) {
  if (spec.severity < 1 || spec.severity > 5) {
    throw ArgumentError("corruption severity must be in 1..5, got " + std::to_string(spec.severity));
  }
  const auto s = ds.image_shape();
  const std::size_t per = s.numel();
  const std::size_t plane = s.height * s.width;
  const int idx = spec.severity - 1;
  Dataset out = ds;
  std::vector<float> pixels(ds.images.data().begin(), ds.images.data().end());
  const Rng base = rng.derive({static_cast<std::uint64_t>(spec.kind), static_cast<std::uint64_t>(spec.severity)});

  for (std::size_t i = 0; i < ds.size(); ++i) {
    float* img = pixels.data() + i * per;
    Rng r = base.derive(i);
    switch (spec.kind) {
      case CorruptionKind::gaussian_noise:
        for (std::size_t p = 0; p < per; ++p) img[p] = static_cast<float>(img[p] + r.normal(0.0, kNoiseSigma[idx]));
        break;
      case CorruptionKind::box_blur:
        box_blur(img, s, kBlurRadius[idx]);
        break;
      case CorruptionKind::contrast:
        for (std::size_t ch = 0; ch < s.channels; ++ch) {
          float* pl = img + ch * plane;
          double m = 0;
          for (std::size_t p = 0; p < plane; ++p) m += pl[p];
          m /= static_cast<double>(plane);
          for (std::size_t p = 0; p < plane; ++p) pl[p] = static_cast<float>((pl[p] - m) * kContrastFactor[idx] + m);
        }
        break;
      case CorruptionKind::occlusion: {
        const std::size_t side = std::min({occlusion_side(s.height, spec.severity), s.height, s.width});
        const std::size_t y0 = r.below(s.height - side + 1);
        const std::size_t x0 = r.below(s.width - side + 1);
        for (std::size_t ch = 0; ch < s.channels; ++ch) {
          for (std::size_t y = y0; y < y0 + side; ++y) {
            std::fill_n(img + ch * plane + y * s.width + x0, side, 0.0f);
          }
        }
        break;
      }
    }
    for (std::size_t p = 0; p < per; ++p) img[p] = std::clamp(img[p], 0.0f, 1.0f);
  }
  out.images = Tensor<float>(ds.images.shape(), std::move(pixels));
  return out;
}

}  // namespace ilens

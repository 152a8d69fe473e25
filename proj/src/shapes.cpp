#include "brnpa/shapes.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "brnpa/error.hpp"
#include "brnpa/rng.hpp"

namespace brnpa {

std::string class_name(std::size_t label) {
  switch (label) {
    case 0: return "disk";
    case 1: return "square";
    case 2: return "triangle";
    default: throw ValidationError("unknown shape label " + std::to_string(label));
  }
}

nlohmann::json ShapesSpec::to_json() const {
  return {{"seed", seed},
          {"train", train},
          {"test", test},
          {"image_size", image_size},
          {"max_clutter", max_clutter}};
}

namespace {

// All three shapes enclose the same area as a disk of diameter `size`, so
// area alone does not identify the class.
constexpr double kSquareSide = 0.88622692545275801;    // sqrt(pi) / 2
constexpr double kTriangleSide = 1.3467736870885982;   // sqrt(pi / sqrt(3))

double bounding_radius(ShapeClass cls, double size) {
  switch (cls) {
    case ShapeClass::Disk: return 0.5 * size;
    case ShapeClass::Square: return kSquareSide * size / std::numbers::sqrt2;
    case ShapeClass::Triangle: return kTriangleSide * size / std::numbers::sqrt3;
  }
  return size;
}

bool inside(ShapeClass cls, double size, double rotation, double dx, double dy) {
  const double c = std::cos(rotation), s = std::sin(rotation);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  switch (cls) {
    case ShapeClass::Disk: return dx * dx + dy * dy <= 0.25 * size * size;
    case ShapeClass::Square: {
      const double half = 0.5 * kSquareSide * size;
      return std::abs(u) <= half && std::abs(v) <= half;
    }
    case ShapeClass::Triangle: {
      // Equilateral, centroid at origin: inside when below all three edge lines.
      const double apothem = kTriangleSide * size / (2.0 * std::numbers::sqrt3);
      for (int e = 0; e < 3; ++e) {
        const double a = std::numbers::pi / 2.0 + e * 2.0 * std::numbers::pi / 3.0 + std::numbers::pi / 3.0;
        if (u * std::cos(a) + v * std::sin(a) > apothem) return false;
      }
      return true;
    }
  }
  return false;
}

ShapeSample make_sample(Rng& rng, std::size_t label, std::size_t n, double max_clutter) {
  ShapeSample s;
  s.label = label;
  const auto cls = static_cast<ShapeClass>(label);
  const double extent = static_cast<double>(n);
  s.scale = rng.uniform(0.3, 0.7);
  s.rotation = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.clutter = rng.uniform(0.0, max_clutter);
  const double size = s.scale * extent;
  const double radius = bounding_radius(cls, size);
  auto center = [&](double r) {
    return r < 0.5 * extent ? rng.uniform(r, extent - r) : 0.5 * extent;
  };
  s.center_x = center(radius);
  s.center_y = center(radius);

  const double background = rng.uniform(0.0, 0.25);
  const double foreground = rng.uniform(0.6, 1.0);
  s.image.assign(n * n, background);
  s.mask.assign(n * n, 0);

  // Distractor blobs: small squares of mid intensity.
  const auto blobs = static_cast<std::size_t>(std::floor(s.clutter * 4.0));
  for (std::size_t b = 0; b < std::min<std::size_t>(blobs, 3); ++b) {
    const std::size_t side = 2 + rng.below(2);
    const std::size_t x0 = rng.below(n - side + 1);
    const std::size_t y0 = rng.below(n - side + 1);
    const double level = rng.uniform(0.3, 0.6);
    for (std::size_t y = y0; y < y0 + side; ++y)
      for (std::size_t x = x0; x < x0 + side; ++x) s.image[y * n + x] = level;
  }

  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - s.center_x;
      const double dy = static_cast<double>(y) + 0.5 - s.center_y;
      if (inside(cls, size, s.rotation, dx, dy)) {
        s.mask[y * n + x] = 1;
        s.image[y * n + x] = foreground;
      }
    }

  const double sigma = 0.08 * s.clutter;
  for (auto& px : s.image) px = std::clamp(px + sigma * rng.normal(), 0.0, 1.0);
  return s;
}

std::vector<ShapeSample> make_split(Rng& rng, std::size_t count, std::size_t n, double max_clutter) {
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = i % kShapeClasses;
  rng.shuffle(labels);
  std::vector<ShapeSample> out;
  out.reserve(count);
  for (auto label : labels) out.push_back(make_sample(rng, label, n, max_clutter));
  return out;
}

template <typename T>
void append(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace

ShapesDataset generate_shapes(const ShapesSpec& spec) {
  if (spec.train < kShapeClasses || spec.test < kShapeClasses)
    throw ValidationError("each split needs at least " + std::to_string(kShapeClasses) + " samples");
  if (spec.image_size < 8) throw ValidationError("image size must be at least 8");
  if (!(spec.max_clutter >= 0.0 && spec.max_clutter <= 1.0))
    throw ValidationError("max_clutter must be in [0,1]");
  Rng train_rng(mix_seed(spec.seed, 1));
  Rng test_rng(mix_seed(spec.seed, 2));
  ShapesDataset ds;
  ds.image_size = spec.image_size;
  ds.train = make_split(train_rng, spec.train, spec.image_size, spec.max_clutter);
  ds.test = make_split(test_rng, spec.test, spec.image_size, spec.max_clutter);
  return ds;
}

std::vector<std::uint8_t> ShapesDataset::to_bytes() const {
  std::vector<std::uint8_t> out;
  append(out, static_cast<std::uint64_t>(image_size));
  for (const auto* split : {&train, &test}) {
    append(out, static_cast<std::uint64_t>(split->size()));
    for (const auto& s : *split) {
      append(out, static_cast<std::uint64_t>(s.label));
      for (double v : {s.scale, s.rotation, s.center_x, s.center_y, s.clutter}) append(out, v);
      for (double v : s.image) append(out, v);
      out.insert(out.end(), s.mask.begin(), s.mask.end());
    }
  }
  return out;
}

}  // namespace brnpa

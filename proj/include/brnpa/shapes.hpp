#pragma once

// Synthetic three-class shapes dataset: one disk, square or triangle per
// grayscale image, over a cluttered background.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace brnpa {

enum class ShapeClass : int { Disk = 0, Square = 1, Triangle = 2 };
inline constexpr std::size_t kShapeClasses = 3;

std::string class_name(std::size_t label);

struct ShapesSpec {
  std::uint64_t seed = 0;
  std::size_t train = 300;
  std::size_t test = 150;
  std::size_t image_size = 32;
  /// Upper bound of the per-sample clutter level (drawn uniformly in [0, max]).
  double max_clutter = 1.0;

  nlohmann::json to_json() const;
};

struct ShapeSample {
  std::vector<double> image;        // image_size^2, values in [0,1]
  std::vector<std::uint8_t> mask;   // 1 on the shape
  std::size_t label = 0;
  double scale = 0.0;     // fraction of image width
  double rotation = 0.0;  // radians
  double center_x = 0.0, center_y = 0.0;
  double clutter = 0.0;
};

struct ShapesDataset {
  std::size_t image_size = 32;
  std::vector<ShapeSample> train;
  std::vector<ShapeSample> test;

  /// Deterministic serialization of every field (used for determinism checks).
  std::vector<std::uint8_t> to_bytes() const;
};

/// Throws ValidationError when a split is smaller than the class count.
ShapesDataset generate_shapes(const ShapesSpec& spec);

}  // namespace brnpa

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "brnpa/npa.hpp"

namespace brnpa {

/// Peak-to-mean ratio of the norm-weighted average attention map.
struct SparsityReport {
  double s = 0.0;
  double a_max = 0.0;
  double a_mean = 0.0;
  std::size_t height = 0;
  std::size_t width = 0;

  nlohmann::json to_json() const;
};

/// m_i = mean_k w_k(i); weighted_i = m_i * |f_i|; s = max / mean over all positions.
SparsityReport sparsity(const AttentionStack& stack, const FeatureVolume& volume);
SparsityReport sparsity(const AttentionStack& stack, std::span<const double> norms);

/// Share of the mean attention map that lands on a foreground mask given at
/// a finer resolution (an integer multiple of the map grid).
double foreground_fraction(const AttentionStack& stack, std::span<const std::uint8_t> mask,
                           std::size_t mask_height, std::size_t mask_width);

/// 8-bit interleaved RGB.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), rgb(h * w * 3, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t channel) {
    return rgb[(y * width + x) * 3 + channel];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t channel) const {
    return rgb[(y * width + x) * 3 + channel];
  }
  bool operator==(const Image&) const = default;
};

/// Map k drives channel k (red, green, blue), scaled by feature norm and by a
/// single per-image maximum. At most three maps.
Image render(const AttentionStack& stack, const FeatureVolume& volume);
Image render(const AttentionStack& stack, std::span<const double> norms);

/// Nearest-neighbour resize; cells stay hard-edged.
Image upscale_nearest(const Image& image, std::size_t height, std::size_t width);

/// (1 - blend) * image + blend * rendered, rounded per channel.
Image overlay(const Image& image, const Image& rendered, double blend);

/// Expands a single-channel [0,1] image to gray RGB.
Image gray_to_rgb(std::span<const double> gray, std::size_t height, std::size_t width);

std::string encode_ppm(const Image& image);
Image decode_ppm(std::span<const std::uint8_t> bytes);
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace brnpa

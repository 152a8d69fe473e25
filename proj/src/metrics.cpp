#include "brnpa/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <png.h>

#include "brnpa/error.hpp"

namespace brnpa {

nlohmann::json SparsityReport::to_json() const {
  return {{"s", s}, {"a_max", a_max}, {"a_mean", a_mean}, {"h", height}, {"w", width}};
}

SparsityReport sparsity(const AttentionStack& stack, const FeatureVolume& volume) {
  if (stack.height != volume.height() || stack.width != volume.width())
    throw ShapeError("attention stack is " + std::to_string(stack.height) + "x" +
                     std::to_string(stack.width) + " but volume is " +
                     std::to_string(volume.height()) + "x" + std::to_string(volume.width()));
  return sparsity(stack, volume.norms());
}

SparsityReport sparsity(const AttentionStack& stack, std::span<const double> norms) {
  const std::size_t p = stack.positions();
  if (norms.size() != p) throw ShapeError("norm count does not match attention positions");
  if (stack.size() == 0) throw ValidationError("empty attention stack");

  std::vector<double> weighted(p, 0.0);
  for (std::size_t k = 0; k < stack.size(); ++k) {
    const auto m = stack.map(k);
    for (std::size_t i = 0; i < p; ++i) weighted[i] += m[i];
  }
  const double inv_n = 1.0 / static_cast<double>(stack.size());
  double peak = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    weighted[i] = weighted[i] * inv_n * norms[i];
    peak = std::max(peak, weighted[i]);
    total += weighted[i];
  }
  const double mean = total / static_cast<double>(p);
  if (!(mean > 0.0)) throw ValidationError("degenerate map: norm-weighted attention is all zero");
  return {peak / mean, peak, mean, stack.height, stack.width};
}

double foreground_fraction(const AttentionStack& stack, std::span<const std::uint8_t> mask,
                           std::size_t mask_height, std::size_t mask_width) {
  if (mask.size() != mask_height * mask_width || stack.height == 0 ||
      mask_height % stack.height != 0 || mask_width % stack.width != 0)
    throw ShapeError("mask resolution must be an integer multiple of the attention grid");
  const std::size_t sy = mask_height / stack.height, sx = mask_width / stack.width;
  double on = 0.0, all = 0.0;
  for (std::size_t i = 0; i < stack.positions(); ++i) {
    double m = 0.0;
    for (std::size_t k = 0; k < stack.size(); ++k) m += stack.map(k)[i];
    const std::size_t cy = i / stack.width, cx = i % stack.width;
    std::size_t covered = 0;
    for (std::size_t y = cy * sy; y < (cy + 1) * sy; ++y)
      for (std::size_t x = cx * sx; x < (cx + 1) * sx; ++x) covered += mask[y * mask_width + x] != 0;
    on += m * static_cast<double>(covered) / static_cast<double>(sy * sx);
    all += m;
  }
  return all > 0.0 ? on / all : 0.0;
}

Image render(const AttentionStack& stack, const FeatureVolume& volume) {
  if (stack.height != volume.height() || stack.width != volume.width())
    throw ShapeError("attention stack and volume disagree on spatial extent");
  return render(stack, volume.norms());
}

Image render(const AttentionStack& stack, std::span<const double> norms) {
  if (stack.size() > 3)
    throw ValidationError("cannot render " + std::to_string(stack.size()) +
                          " maps as RGB; render at most 3 maps at a time");
  const std::size_t p = stack.positions();
  if (norms.size() != p) throw ShapeError("norm count does not match attention positions");

  double normalizer = 0.0;
  for (std::size_t k = 0; k < stack.size(); ++k)
    for (std::size_t i = 0; i < p; ++i) normalizer = std::max(normalizer, stack.map(k)[i] * norms[i]);

  Image out(stack.height, stack.width);
  if (!(normalizer > 0.0)) return out;
  for (std::size_t k = 0; k < stack.size(); ++k) {
    const auto m = stack.map(k);
    for (std::size_t i = 0; i < p; ++i) {
      const double v = std::clamp(m[i] * norms[i] / normalizer, 0.0, 1.0);
      out.rgb[i * 3 + k] = static_cast<std::uint8_t>(std::lround(255.0 * v));
    }
  }
  return out;
}

Image upscale_nearest(const Image& image, std::size_t height, std::size_t width) {
  if (image.height == 0 || image.width == 0 || height == 0 || width == 0)
    throw ValidationError("cannot resize an empty image");
  Image out(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * image.height / height;
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = x * image.width / width;
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

Image overlay(const Image& image, const Image& rendered, double blend) {
  if (image.height != rendered.height || image.width != rendered.width)
    throw ShapeError("overlay: image is " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " but attention is " +
                     std::to_string(rendered.height) + "x" + std::to_string(rendered.width));
  if (!(blend >= 0.0 && blend <= 1.0)) throw ValidationError("overlay: blend must be in [0,1]");
  Image out(image.height, image.width);
  for (std::size_t i = 0; i < out.rgb.size(); ++i) {
    const double v = (1.0 - blend) * image.rgb[i] + blend * rendered.rgb[i];
    out.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  return out;
}

Image gray_to_rgb(std::span<const double> gray, std::size_t height, std::size_t width) {
  if (gray.size() != height * width) throw ShapeError("gray image size mismatch");
  Image out(height, width);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(gray[i], 0.0, 1.0)));
    out.rgb[i * 3] = out.rgb[i * 3 + 1] = out.rgb[i * 3 + 2] = v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)

std::string encode_ppm(const Image& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(image.rgb.data()), image.rgb.size());
  return out;
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
  if (start == pos) throw FormatError("ppm: truncated header", pos);
  return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                     bytes.begin() + static_cast<std::ptrdiff_t>(pos));
}

std::size_t ppm_number(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  const std::size_t at = pos;
  const std::string tok = ppm_token(bytes, pos);
  if (tok.size() > 6 || tok.find_first_not_of("0123456789") != std::string::npos)
    throw FormatError("ppm: bad header number '" + tok + "'", at);
  return std::stoul(tok);
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  if (ppm_token(bytes, pos) != "P6") throw FormatError("ppm: expected P6 magic", 0);
  const std::size_t width = ppm_number(bytes, pos);
  const std::size_t height = ppm_number(bytes, pos);
  const std::size_t maxval = ppm_number(bytes, pos);
  if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported", pos);
  if (width == 0 || height == 0) throw FormatError("ppm: empty image", pos);
  ++pos;  // single whitespace after maxval
  const std::size_t need = width * height * 3;
  if (bytes.size() < pos + need)
    throw FormatError("ppm: truncated pixel data, expected " + std::to_string(need) +
                          " bytes, found " + std::to_string(bytes.size() - std::min(pos, bytes.size())),
                      bytes.size());
  Image out(height, width);
  std::memcpy(out.rgb.data(), bytes.data() + pos, need);
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::string data = encode_ppm(image);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_all(path)); }

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, image.rgb.data(), 0, nullptr))
    throw IoError("png write failed for " + path.string() + ": " + png.message);
}

}  // namespace brnpa

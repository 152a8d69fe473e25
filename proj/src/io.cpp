#include "brnpa/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <regex>

#include "brnpa/error.hpp"

namespace brnpa::io {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* field) {
    need(n, field);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::vector<double> doubles(std::size_t count, const char* field) {
    if (count > remaining() / 8)
      throw FormatError(what_ + ": truncated " + field + ", expected " + std::to_string(count) +
                            " x 8 bytes, found " + std::to_string(remaining()),
                        pos_);
    std::vector<double> out(count);
    std::memcpy(out.data(), bytes_.data() + pos_, count * 8);
    pos_ += count * 8;
    return out;
  }

  void expect_end() const {
    if (pos_ != bytes_.size())
      throw FormatError(what_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes", pos_);
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& what() const { return what_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (n > remaining())
      throw FormatError(what_ + ": truncated while reading " + field + " (need " +
                            std::to_string(n) + " bytes, have " + std::to_string(remaining()) + ")",
                        pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

// Product of extents, or max() on overflow.
std::size_t checked_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e != 0 && n > std::numeric_limits<std::size_t>::max() / e)
      return std::numeric_limits<std::size_t>::max();
    n *= e;
  }
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// Volume file

std::vector<std::uint8_t> encode_volume(const Array& volume) {
  if (volume.shape.size() != 3)
    throw ShapeError("volume file holds rank-3 arrays, got " + shape_to_string(volume.shape));
  if (shape_numel(volume.shape) != volume.values.size())
    throw ShapeError("volume values do not match shape " + shape_to_string(volume.shape));
  Writer w;
  w.put_bytes("NPAV", 4);
  w.put<std::uint16_t>(kVolumeVersion);
  w.put<std::uint16_t>(kDtypeFloat64);
  for (auto e : volume.shape) {
    if (e > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("volume extent exceeds u32");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
  }
  w.put_bytes(volume.values.data(), volume.values.size() * 8);
  return std::move(w.bytes);
}

Array decode_volume(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "volume file");
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "NPAV", 4) != 0) throw FormatError("volume file: bad magic", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kVolumeVersion)
    throw FormatError("volume file: unsupported version " + std::to_string(version), 4);
  const auto dtype = r.get<std::uint16_t>("dtype");
  if (dtype != kDtypeFloat64)
    throw FormatError("volume file: unsupported dtype tag " + std::to_string(dtype), 6);
  Shape shape(3);
  for (auto& e : shape) e = r.get<std::uint32_t>("dims");
  const std::size_t count = checked_numel(shape);
  const std::size_t have = r.remaining();
  if (count > have / 8 || count * 8 != have) {
    const std::string expected =
        count > std::numeric_limits<std::size_t>::max() / 8 ? "overflow" : std::to_string(count * 8);
    throw FormatError("volume file: payload length mismatch, expected " + expected +
                          " bytes, found " + std::to_string(have),
                      r.pos());
  }
  Array out{shape, r.doubles(count, "payload")};
  r.expect_end();
  return out;
}

void write_volume(const std::filesystem::path& path, const Array& volume) {
  write_file(path, encode_volume(volume));
}

Array read_volume(const std::filesystem::path& path) { return decode_volume(read_file(path)); }

// ---------------------------------------------------------------------------
// NPY

namespace {

std::string header_field(const std::string& header, const std::string& key, std::size_t offset) {
  const std::regex pattern("['\"]" + key + "['\"]\\s*:\\s*");
  std::smatch m;
  if (!std::regex_search(header, m, pattern))
    throw FormatError("npy: header lacks '" + key + "'", offset);
  return header.substr(static_cast<std::size_t>(m.position(0) + m.length(0)));
}

}  // namespace

Array decode_npy(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "npy");
  const auto magic = r.take(6, "magic");
  if (std::memcmp(magic.data(), "\x93NUMPY", 6) != 0) throw FormatError("npy: bad magic", 0);
  const auto major = r.get<std::uint8_t>("major version");
  r.get<std::uint8_t>("minor version");
  std::size_t header_len = 0;
  if (major == 1) {
    header_len = r.get<std::uint16_t>("header length");
  } else if (major == 2 || major == 3) {
    header_len = r.get<std::uint32_t>("header length");
  } else {
    throw FormatError("npy: unsupported format version " + std::to_string(major), 6);
  }
  const std::size_t header_at = r.pos();
  const auto raw = r.take(header_len, "header");
  const std::string header(raw.begin(), raw.end());

  const std::string descr_tail = header_field(header, "descr", header_at);
  std::size_t item = 0;
  if (descr_tail.rfind("'<f8'", 0) == 0 || descr_tail.rfind("\"<f8\"", 0) == 0) {
    item = 8;
  } else if (descr_tail.rfind("'<f4'", 0) == 0 || descr_tail.rfind("\"<f4\"", 0) == 0) {
    item = 4;
  } else {
    throw FormatError("npy: unsupported dtype " + descr_tail.substr(0, 8) +
                          " (need little-endian float32 or float64)",
                      header_at);
  }
  const std::string order_tail = header_field(header, "fortran_order", header_at);
  if (order_tail.rfind("False", 0) != 0)
    throw FormatError("npy: Fortran-ordered arrays are not supported", header_at);

  const std::string shape_tail = header_field(header, "shape", header_at);
  const std::regex tuple(R"(^\(\s*((?:\d+\s*,\s*)*\d*)\s*,?\s*\))");
  std::smatch m;
  if (!std::regex_search(shape_tail, m, tuple)) throw FormatError("npy: malformed shape", header_at);
  Shape shape;
  const std::string dims = m[1].str();
  const std::regex number(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), number); it != std::sregex_iterator();
       ++it) {
    const std::string digits = it->str();
    if (digits.size() > 12) throw FormatError("npy: extent too large", header_at);
    shape.push_back(static_cast<std::size_t>(std::stoull(digits)));
  }
  if (shape.size() != 3 && shape.size() != 4)
    throw FormatError("npy: expected rank 3 (C,H,W) or 4 (N,C,H,W), got rank " +
                          std::to_string(shape.size()),
                      header_at);

  const std::size_t count = checked_numel(shape);
  const std::size_t have = r.remaining();
  if (count > have / item || count * item != have) {
    throw FormatError("npy: payload length mismatch, expected " +
                          (count > have ? std::string("more than ") + std::to_string(have)
                                        : std::to_string(count * item)) +
                          " bytes, found " + std::to_string(have),
                      r.pos());
  }
  Array out{shape, {}};
  if (item == 8) {
    out.values = r.doubles(count, "payload");
  } else {
    const auto payload = r.take(count * 4, "payload");
    out.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, payload.data() + i * 4, 4);
      out.values[i] = static_cast<double>(f);
    }
  }
  return out;
}

Array read_npy(const std::filesystem::path& path) { return decode_npy(read_file(path)); }

std::vector<std::uint8_t> encode_npy(const Array& array) {
  std::string shape = "(";
  for (std::size_t i = 0; i < array.shape.size(); ++i) shape += std::to_string(array.shape[i]) + ", ";
  if (array.shape.size() > 1) shape.resize(shape.size() - 1), shape.back() = ')';
  else shape += ")";
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  Writer w;
  w.put_bytes("\x93NUMPY", 6);
  w.put<std::uint8_t>(1);
  w.put<std::uint8_t>(0);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(header.size()));
  w.put_bytes(header.data(), header.size());
  w.put_bytes(array.values.data(), array.values.size() * 8);
  return std::move(w.bytes);
}

Array batch_item(const Array& array, std::size_t index) {
  if (array.shape.size() == 3) {
    if (index != 0) throw ValidationError("rank-3 array has a single item");
    return array;
  }
  if (array.shape.size() != 4) throw ShapeError("expected rank 3 or 4, got " + shape_to_string(array.shape));
  if (index >= array.shape[0])
    throw ValidationError("batch index " + std::to_string(index) + " out of range for " +
                          std::to_string(array.shape[0]) + " items");
  const Shape item{array.shape[1], array.shape[2], array.shape[3]};
  const std::size_t n = shape_numel(item);
  const auto first = array.values.begin() + static_cast<std::ptrdiff_t>(index * n);
  return {item, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n))};
}

// ---------------------------------------------------------------------------
// Checkpoint

std::uint64_t fingerprint(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.put_bytes("NPCK", 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint64_t>(fingerprint(checkpoint.config));
  const std::string json = checkpoint.config.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(json.size()));
  w.put_bytes(json.data(), json.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(checkpoint.arrays.size()));
  for (const auto& [name, array] : checkpoint.arrays) {
    if (name.size() > 0xffff) throw ValidationError("checkpoint array name too long");
    if (array.shape.size() > 0xff) throw ValidationError("checkpoint array rank too large");
    if (shape_numel(array.shape) != array.values.size())
      throw ShapeError("checkpoint array '" + name + "' values do not match its shape");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(array.shape.size()));
    for (auto e : array.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    w.put_bytes(array.values.data(), array.values.size() * 8);
  }
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "NPCK", 4) != 0) throw FormatError("checkpoint: bad magic", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  const auto stored = r.get<std::uint64_t>("fingerprint");
  const auto json_len = r.get<std::uint32_t>("config length");
  const std::size_t json_at = r.pos();
  const auto json_bytes = r.take(json_len, "config");
  Checkpoint out;
  out.config = nlohmann::json::parse(json_bytes.begin(), json_bytes.end(), nullptr, false);
  if (out.config.is_discarded()) throw FormatError("checkpoint: config is not valid JSON", json_at);
  if (fingerprint(out.config) != stored)
    throw FormatError("checkpoint: config fingerprint mismatch", 6);
  const auto count = r.get<std::uint32_t>("array count");
  for (std::uint32_t a = 0; a < count; ++a) {
    const auto name_len = r.get<std::uint16_t>("array name length");
    const auto name = r.take(name_len, "array name");
    const auto rank = r.get<std::uint8_t>("array rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>("array dims");
    const std::size_t numel = checked_numel(shape);
    out.arrays.push_back({std::string(name.begin(), name.end()),
                          Array{shape, r.doubles(numel, "array payload")}});
  }
  r.expect_end();
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace brnpa::io

#pragma once

// Little-endian field encoding shared by the dump, sidecar and model formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvatlas::detail {

template <typename UInt>
void put_le(std::ostream& out, UInt value) {
  unsigned char bytes[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFFu);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(UInt));
}

inline void put_f32(std::ostream& out, float value) {
  put_le(out, std::bit_cast<std::uint32_t>(value));
}

template <typename UInt>
UInt decode_le(const unsigned char* bytes) {
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    value |= static_cast<UInt>(bytes[i]) << (8 * i);
  }
  return value;
}

inline void put_f32_block(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) put_f32(out, v);
  }
}

/// Reads exactly n bytes or throws, naming expected vs actual counts.
class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  void read_exact(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    consumed_ += got;
    if (got != n) {
      throw std::runtime_error(source_ + ": truncated " + what + ": expected " +
                               std::to_string(consumed_ - got + n) + " bytes, got " +
                               std::to_string(consumed_));
    }
  }

  template <typename UInt>
  UInt get(const char* what) {
    unsigned char bytes[sizeof(UInt)];
    read_exact(bytes, sizeof(UInt), what);
    return decode_le<UInt>(bytes);
  }

  float get_f32(const char* what) { return std::bit_cast<float>(get<std::uint32_t>(what)); }

  void get_f32_block(std::span<float> dst, const char* what) {
    read_exact(dst.data(), dst.size_bytes(), what);
    if constexpr (std::endian::native != std::endian::little) {
      for (float& v : dst) {
        auto raw = std::bit_cast<std::uint32_t>(v);
        unsigned char b[4];
        std::memcpy(b, &raw, 4);
        v = std::bit_cast<float>(decode_le<std::uint32_t>(b));
      }
    }
  }

  std::size_t consumed() const noexcept { return consumed_; }
  const std::string& source() const noexcept { return source_; }

 private:
  std::istream& in_;
  std::string source_;
  std::size_t consumed_ = 0;
};

}  // namespace kvatlas::detail

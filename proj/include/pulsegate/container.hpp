#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pulsegate::container {

/// Model file layout (all integers little-endian):
///
///   "SEPW" | u16 version | u8 family | u8 horizon | u32 n | n bytes spec JSON
///   | payload | u32 CRC-32C of everything before it
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::size_t kFixedHeaderBytes = 4 + 2 + 1 + 1 + 4;
inline constexpr std::size_t kTrailerBytes = 4;

enum class FamilyTag : std::uint8_t { mlp = 0, lstm = 1, lstm_fcn = 2, gbdt = 3 };

struct Frame {
  FamilyTag family = FamilyTag::mlp;
  std::uint8_t horizon = 1;
  std::string spec_json;
  std::vector<std::byte> payload;
};

std::vector<std::byte> write_frame(const Frame& frame);

/// Checks magic, then length and checksum, then version.
/// Throws BadMagic, ChecksumMismatch or VersionMismatch.
Frame read_frame(std::span<const std::byte> bytes);

class ByteWriter {
 public:
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void raw(std::span<const std::byte> data);

  std::vector<std::byte>& bytes() { return out_; }
  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

/// Bounds-checked reader; overruns throw ChecksumMismatch since a frame that
/// passed its CRC can only be short if it was written inconsistently.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::span<const std::byte> raw(std::size_t n);

  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::span<const std::byte> take(std::size_t n);

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

std::vector<std::byte> read_file(const std::string& path);
/// Writes to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::string& path, std::span<const std::byte> data);

}  // namespace pulsegate::container

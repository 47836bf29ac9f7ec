#include "pulsegate/container.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "pulsegate/crc32c.hpp"
#include "pulsegate/error.hpp"

namespace pulsegate::container {

namespace {

constexpr char kMagic[4] = {'S', 'E', 'P', 'W'};

template <typename U>
void put_le(std::vector<std::byte>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(std::span<const std::byte> s) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(std::to_integer<U>(s[i])) << (8 * i);
  return v;
}

}  // namespace

void ByteWriter::u8(std::uint8_t v) { out_.push_back(static_cast<std::byte>(v)); }
void ByteWriter::u16(std::uint16_t v) { put_le(out_, v); }
void ByteWriter::u32(std::uint32_t v) { put_le(out_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(out_, v); }
void ByteWriter::f32(float v) { put_le(out_, std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { put_le(out_, std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::raw(std::span<const std::byte> data) { out_.insert(out_.end(), data.begin(), data.end()); }

std::span<const std::byte> ByteReader::take(std::size_t n) {
  if (n > remaining()) throw Error(ErrorKind::ChecksumMismatch, "payload shorter than its declared layout");
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t ByteReader::u8() { return std::to_integer<std::uint8_t>(take(1)[0]); }
std::uint16_t ByteReader::u16() { return get_le<std::uint16_t>(take(2)); }
std::uint32_t ByteReader::u32() { return get_le<std::uint32_t>(take(4)); }
std::uint64_t ByteReader::u64() { return get_le<std::uint64_t>(take(8)); }
float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
std::span<const std::byte> ByteReader::raw(std::size_t n) { return take(n); }

std::vector<std::byte> write_frame(const Frame& frame) {
  ByteWriter w;
  w.raw(std::as_bytes(std::span(kMagic)));
  w.u16(kFormatVersion);
  w.u8(static_cast<std::uint8_t>(frame.family));
  w.u8(frame.horizon);
  w.u32(static_cast<std::uint32_t>(frame.spec_json.size()));
  w.raw(std::as_bytes(std::span(frame.spec_json.data(), frame.spec_json.size())));
  w.raw(frame.payload);
  w.u32(crc32c(w.bytes()));
  return w.take();
}

Frame read_frame(std::span<const std::byte> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw Error(ErrorKind::BadMagic, "not a model file");
  if (bytes.size() < kFixedHeaderBytes + kTrailerBytes)
    throw Error(ErrorKind::ChecksumMismatch, "truncated model file");
  const auto body = bytes.first(bytes.size() - kTrailerBytes);
  const auto stored = get_le<std::uint32_t>(bytes.last(kTrailerBytes));
  if (crc32c(body) != stored) throw Error(ErrorKind::ChecksumMismatch, "model file checksum mismatch");

  ByteReader r(body);
  r.raw(4);
  const auto version = r.u16();
  if (version != kFormatVersion)
    throw Error(ErrorKind::VersionMismatch, "model format version " + std::to_string(version));
  Frame frame;
  const auto family = r.u8();
  if (family > static_cast<std::uint8_t>(FamilyTag::gbdt))
    throw Error(ErrorKind::BadMagic, "unknown family tag " + std::to_string(family));
  frame.family = static_cast<FamilyTag>(family);
  frame.horizon = r.u8();
  const auto json = r.raw(r.u32());
  frame.spec_json.assign(reinterpret_cast<const char*>(json.data()), json.size());
  const auto payload = r.raw(r.remaining());
  frame.payload.assign(payload.begin(), payload.end());
  return frame;
}

std::vector<std::byte> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(buf.size());
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

void write_file_atomic(const std::string& path, std::span<const std::byte> data) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorKind::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot rename onto " + path + ": " + ec.message());
}

}  // namespace pulsegate::container

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace badcrnn::io {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written file.
void write_atomic(const std::filesystem::path& path, std::string_view contents);
void write_atomic(const std::filesystem::path& path,
                  const std::vector<std::uint8_t>& contents);

// 64-bit FNV-1a, used for input fingerprints in run manifests.
std::uint64_t fnv1a(std::string_view bytes);
std::string file_fingerprint(const std::filesystem::path& path);

// Little-endian encoding helpers.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void f64(double v);
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
  std::string bytes(std::size_t n);
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  double f64();
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

// "%.9g"-style formatting used by every CSV export.
std::string format_g9(double v);

}  // namespace badcrnn::io

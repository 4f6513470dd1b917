#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cilmp::io {

// Little-endian encoder for the library's binary file formats.
class ByteWriter {
 public:
  void bytes(std::string_view raw);
  void u32(std::uint32_t v);
  void f64(double v);
  const std::string& buffer() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

// Bounds-checked decoder; every failure raises FormatError naming the offset.
class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  static ByteReader from_file(const std::filesystem::path& path);

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_magic(std::string_view magic);
  std::string bytes(std::size_t n);
  std::uint32_t u32();
  double f64();
  void f64_array(std::vector<double>& out, std::size_t n);
  void expect_end() const;
  [[noreturn]] void fail(const std::string& what) const;

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace cilmp::io

#include "cilmp/binary_io.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "cilmp/errors.hpp"

namespace cilmp::io {

void ByteWriter::bytes(std::string_view raw) { buf_.append(raw); }

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void ByteWriter::f64(double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

void ByteWriter::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

ByteReader ByteReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ByteReader(ss.str());
}

void ByteReader::fail(const std::string& what) const {
  throw FormatError(what + " at byte offset " + std::to_string(pos_));
}

void ByteReader::expect_magic(std::string_view magic) {
  if (remaining() < magic.size() || std::string_view(data_).substr(pos_, magic.size()) != magic) {
    fail("bad magic, expected '" + std::string(magic) + "'");
  }
  pos_ += magic.size();
}

std::string ByteReader::bytes(std::size_t n) {
  if (remaining() < n) fail("truncated file: need " + std::to_string(n) + " bytes");
  std::string out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32() {
  if (remaining() < 4) fail("truncated file: need u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 4;
  return v;
}

double ByteReader::f64() {
  if (remaining() < 8) fail("truncated file: need f64");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 8;
  return std::bit_cast<double>(bits);
}

void ByteReader::f64_array(std::vector<double>& out, std::size_t n) {
  if (n > remaining() / 8) fail("truncated payload: need " + std::to_string(n) + " f64 values");
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f64();
}

void ByteReader::expect_end() const {
  if (remaining() != 0) fail(std::to_string(remaining()) + " unexpected trailing bytes");
}

}  // namespace cilmp::io

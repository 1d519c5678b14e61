#pragma once

// Little-endian binary container helpers shared by the replay ("GCRB") and
// network ("GCNN") formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace curioplan::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw std::runtime_error("cannot open '" + path + "' for writing");
  }

  void magic(const char (&tag)[5]) { out_.write(tag, 4); }

  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }

  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  template <class It>
  void f32_array(It first, It last) {
    for (; first != last; ++first) f32(static_cast<float>(*first));
  }

  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("write failed for '" + path_ + "'");
  }

 private:
  template <class U>
  void put_le(U v) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out_.write(bytes.data(), bytes.size());
  }

  std::ofstream out_;
  std::string path_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
    data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  void expect_magic(const char (&tag)[5]) {
    need(4, "magic");
    if (std::memcmp(data_.data() + pos_, tag, 4) != 0)
      throw FormatError("'" + path_ + "': bad magic, expected '" + std::string(tag) + "'");
    pos_ += 4;
  }

  std::uint32_t u32() { return get_le<std::uint32_t>("u32"); }
  std::uint64_t u64() { return get_le<std::uint64_t>("u64"); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>("f32")); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>("f64")); }

  std::string string() {
    const auto n = u32();
    need(n, "string");
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void f32_array(float* dst, std::size_t n) {
    need(n * 4, "float array");
    for (std::size_t i = 0; i < n; ++i) dst[i] = f32();
  }

  bool at_end() const { return pos_ == data_.size(); }
  const std::string& path() const { return path_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw FormatError("'" + path_ + "': truncated while reading " + what);
  }

  template <class U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::vector<char> data_;
  std::size_t pos_ = 0;
  std::string path_;
};

}  // namespace curioplan::io

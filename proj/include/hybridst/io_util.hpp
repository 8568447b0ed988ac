#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hybridst/error.hpp"

namespace hybridst {

/// Little-endian binary writer. All multi-byte fields in the HSTP/HSTG/
/// HSTW/HSTC formats go through this so files are bit-identical across
/// platforms.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) fail(ErrorKind::io, "cannot open for writing: " + path);
  }

  void magic(const char tag[4]) { raw(tag, 4); }

  void u8(std::uint8_t v) { raw(&v, 1); }

  void u32(std::uint32_t v) {
    std::uint8_t b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    raw(b, 4);
  }

  void u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    raw(b, 8);
  }

  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }

  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }

  void f64_array(const double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) f64(data[i]);
  }

  void f32_array(const float* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) f32(data[i]);
  }

  void string_lp(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  void bytes(const void* data, std::size_t count) { raw(data, count); }

  void close() {
    out_.close();
    if (!out_) fail(ErrorKind::io, "write failed: " + path_);
  }

 private:
  void raw(const void* data, std::size_t count) {
    out_.write(static_cast<const char*>(data),
               static_cast<std::streamsize>(count));
    if (!out_) fail(ErrorKind::io, "write failed: " + path_);
  }

  std::string path_;
  std::ofstream out_;
};

/// Little-endian binary reader. Truncation surfaces as a corruption
/// error naming the file, never as a crash or silent partial read.
class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail(ErrorKind::io, "cannot open for reading: " + path);
  }

  void expect_magic(const char tag[4], const std::string& what) {
    char got[4];
    raw(got, 4);
    if (std::memcmp(got, tag, 4) != 0)
      fail(ErrorKind::corruption,
           path_ + ": bad magic, not a " + what + " file");
  }

  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }

  std::uint32_t u32() {
    std::uint8_t b[4];
    raw(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    std::uint8_t b[8];
    raw(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }

  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  void f64_array(double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) data[i] = f64();
  }

  void f32_array(float* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) data[i] = f32();
  }

  std::string string_lp() {
    std::uint32_t len = u32();
    std::string s(len, '\0');
    if (len > 0) raw(s.data(), len);
    return s;
  }

  void bytes(void* data, std::size_t count) { raw(data, count); }

  bool at_eof() {
    return in_.peek() == std::char_traits<char>::eof();
  }

 private:
  void raw(void* data, std::size_t count) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in_.gcount()) != count)
      fail(ErrorKind::corruption, path_ + ": truncated file");
  }

  std::string path_;
  std::ifstream in_;
};

}  // namespace hybridst

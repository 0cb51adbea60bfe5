#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dgseg/types.hpp"

namespace dgseg {

// Binary writer with little-endian fixed-width encoding. Doubles are stored
// as raw IEEE-754 bits so round-trips are bit-exact.
class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  }

  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    raw(b, 8);
  }

  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

  void f64(Scalar v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    u64(bits);
  }

  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }

  void mat(const Mat& m) {
    i64(m.rows());
    i64(m.cols());
    for (Index c = 0; c < m.cols(); ++c)
      for (Index r = 0; r < m.rows(); ++r) f64(m(r, c));
  }

  void bytes(const std::vector<std::uint8_t>& v) {
    u64(v.size());
    raw(v.data(), v.size());
  }

  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("write failed: " + path_);
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }

  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("cannot open for reading: " + path);
  }

  std::uint64_t u64() {
    unsigned char b[8];
    raw(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }

  Scalar f64() {
    const std::uint64_t bits = u64();
    Scalar v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }

  std::string str() {
    const auto n = u64();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  Mat mat() {
    const Index rows = i64();
    const Index cols = i64();
    if (rows < 0 || cols < 0 || rows > (1 << 24) || cols > (1 << 24))
      throw std::runtime_error("corrupt matrix header in " + path_);
    Mat m(rows, cols);
    for (Index c = 0; c < cols; ++c)
      for (Index r = 0; r < rows; ++r) m(r, c) = f64();
    return m;
  }

  std::vector<std::uint8_t> bytes() {
    const auto n = u64();
    std::vector<std::uint8_t> v(n);
    raw(v.data(), n);
    return v;
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw std::runtime_error("unexpected end of file: " + path_);
  }

  std::ifstream in_;
  std::string path_;
};

}  // namespace dgseg

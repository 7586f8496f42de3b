#ifndef DIFFRANK_SERIALIZE_HPP_
#define DIFFRANK_SERIALIZE_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffrank::io {

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian");

class Writer {
 public:
  explicit Writer(const std::string& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open for writing: " + path);
  }

  void magic(const char tag[8]) { out_.write(tag, 8); }
  void u8(uint8_t v) { raw(&v, sizeof v); }
  void u32(uint32_t v) { raw(&v, sizeof v); }
  void u64(uint64_t v) { raw(&v, sizeof v); }
  void i32(int32_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }

  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  template <typename T>
  void array(const std::vector<T>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(T));
  }

  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("write failed on close");
  }

 private:
  void raw(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw std::runtime_error("write failed");
  }
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open for reading: " + path);
  }

  void expect_magic(const char tag[8]) {
    char buf[8];
    raw(buf, 8);
    if (std::memcmp(buf, tag, 8) != 0) {
      throw std::runtime_error("bad file magic (expected " +
                               std::string(tag, 8) + ")");
    }
  }
  uint8_t u8() { return get<uint8_t>(); }
  uint32_t u32() { return get<uint32_t>(); }
  uint64_t u64() { return get<uint64_t>(); }
  int32_t i32() { return get<int32_t>(); }
  double f64() { return get<double>(); }

  std::string str() {
    const uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  template <typename T>
  std::vector<T> array() {
    const uint64_t n = u64();
    std::vector<T> v(n);
    raw(v.data(), n * sizeof(T));
    return v;
  }

 private:
  template <typename T>
  T get() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  void raw(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) {
      throw std::runtime_error("truncated file");
    }
  }
  std::ifstream in_;
};

}  // namespace diffrank::io

#endif  // DIFFRANK_SERIALIZE_HPP_

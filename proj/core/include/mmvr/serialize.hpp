#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "mmvr/errors.hpp"

namespace mmvr {

// Little-endian byte buffer codec used by the feature store and checkpoints.
// Integers are emitted byte by byte so files are portable regardless of host
// endianness; doubles go through their IEEE-754 bit pattern.

class ByteWriter {
 public:
  void put_u8(std::uint8_t v) { buf_.push_back(v); }
  void put_u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_i64(std::int64_t v) { put_u64(static_cast<std::uint64_t>(v)); }
  void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }
  void put_bytes(const void* p, size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void put_string(const std::string& s) {
    put_u64(s.size());
    put_bytes(s.data(), s.size());
  }
  void put_f64_vec(const std::vector<double>& v) {
    put_u64(v.size());
    for (double x : v) put_f64(x);
  }
  void put_i32_vec(const std::vector<int>& v) {
    put_u64(v.size());
    for (int x : v) put_u32(static_cast<std::uint32_t>(x));
  }
  void put_i64_vec(const std::vector<std::int64_t>& v) {
    put_u64(v.size());
    for (std::int64_t x : v) put_i64(x);
  }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }
  size_t size() const { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, size_t size) : data_(data), size_(size) {}

  std::uint8_t get_u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
    return v;
  }
  std::int64_t get_i64() { return static_cast<std::int64_t>(get_u64()); }
  double get_f64() { return std::bit_cast<double>(get_u64()); }
  void get_bytes(void* out, std::uint64_t n) {
    need(n);
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const std::uint64_t n = get_u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> get_f64_vec() {
    const std::uint64_t n = get_u64();
    std::vector<double> v(n);
    for (auto& x : v) x = get_f64();
    return v;
  }
  std::vector<int> get_i32_vec() {
    const std::uint64_t n = get_u64();
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(get_u32());
    return v;
  }
  std::vector<std::int64_t> get_i64_vec() {
    const std::uint64_t n = get_u64();
    std::vector<std::int64_t> v(n);
    for (auto& x : v) x = get_i64();
    return v;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > size_ - pos_) throw DataError("truncated input: need " + std::to_string(n) +
                                          " bytes at offset " + std::to_string(pos_));
  }
  const std::uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

}  // namespace mmvr

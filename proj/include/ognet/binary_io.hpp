#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "ognet/error.hpp"

namespace ognet::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::span<const std::uint8_t> data) { bytes_.insert(bytes_.end(), data.begin(), data.end()); }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_magic(std::string_view magic) { put_raw(magic.data(), magic.size()); }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

/// Sequential reader; every failure names the byte offset where it happened.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  void get_raw(void* out, std::size_t n) { std::memcpy(out, take(n), n); }

  void expect_magic(std::string_view magic) {
    const std::size_t at = offset_;
    const auto* p = take(magic.size());
    if (std::memcmp(p, magic.data(), magic.size()) != 0) fail("bad magic, expected \"" + std::string(magic) + "\"", at);
  }

  [[noreturn]] void fail(const std::string& message, std::size_t at) const {
    throw FormatError(what_ + ": " + message + " at byte offset " + std::to_string(at));
  }
  [[noreturn]] void fail(const std::string& message) const { fail(message, offset_); }

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return data_.size() - offset_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (n > remaining()) {
      fail("truncated input (needed " + std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
    }
    const auto* p = data_.data() + offset_;
    offset_ += n;
    return p;
  }

  std::span<const std::uint8_t> data_;
  std::string what_;
  std::size_t offset_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace ognet::io

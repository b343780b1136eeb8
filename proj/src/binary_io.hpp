#pragma once

// Little-endian byte writer/reader shared by the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objsearch/errors.hpp"

namespace objsearch::detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::is_floating_point_v<T>) {
      using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      put(std::bit_cast<U>(v));
    } else {
      for (std::size_t i = 0; i < sizeof(T); ++i) {
        buf_.push_back(static_cast<std::uint8_t>(
            static_cast<std::make_unsigned_t<T>>(v) >> (8 * i)));
      }
    }
  }

  void put_bytes(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void put_floats(std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
      buf_.insert(buf_.end(), p, p + values.size_bytes());
    } else {
      for (float f : values) put(f);
    }
  }

  std::size_t size() const noexcept { return buf_.size(); }
  std::span<const std::uint8_t> bytes() const noexcept { return buf_; }
  std::span<const std::uint8_t> bytes_from(std::size_t offset) const noexcept {
    return std::span<const std::uint8_t>(buf_).subspan(offset);
  }
  std::vector<std::uint8_t>& buffer() noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

// Reads from a byte span; every overrun throws CorruptionError naming `where`.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string where)
      : data_(data), where_(std::move(where)) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::is_floating_point_v<T>) {
      using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
      return std::bit_cast<T>(get<U>());
    } else {
      need(sizeof(T));
      std::make_unsigned_t<T> v = 0;
      for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= static_cast<std::make_unsigned_t<T>>(data_[pos_ + i]) << (8 * i);
      }
      pos_ += sizeof(T);
      return static_cast<T>(v);
    }
  }

  std::string get_string(std::uint64_t max_len = 1 << 20) {
    const auto len = get<std::uint64_t>();
    if (len > max_len) fail("string length out of range");
    need(static_cast<std::size_t>(len));
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_),
                  static_cast<std::size_t>(len));
    pos_ += static_cast<std::size_t>(len);
    return s;
  }

  void get_floats(std::span<float> out) {
    need(out.size_bytes());
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
      pos_ += out.size_bytes();
    } else {
      for (float& f : out) f = get<float>();
    }
  }

  std::span<const std::uint8_t> get_bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  std::span<const std::uint8_t> consumed_since(std::size_t start) const {
    return data_.subspan(start, pos_ - start);
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw CorruptionError(where_ + ": " + what, where_);
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail("truncated");
  }

  std::span<const std::uint8_t> data_;
  std::string where_;
  std::size_t pos_ = 0;
};

}  // namespace objsearch::detail

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace matekd {

// 64-bit FNV-1a. Stable across runs and platforms; used for vocabulary and
// parameter fingerprints.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
      state_ ^= static_cast<std::uint64_t>(b);
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(std::as_bytes(std::span(s.data(), s.size()))); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace matekd

#pragma once

#include <cstdint>
#include <vector>

#include "lcv2i/common.hpp"

namespace lcv2i {

// One bit per BEV cell, stored row-major.
struct BinaryMask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h_, std::size_t w_, std::uint8_t fill = 0)
      : h(h_), w(w_), bits(h_ * w_, fill) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return bits[r * w + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * w + c]; }
  std::size_t cells() const { return bits.size(); }

  std::size_t popcount() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }

  bool is_binary() const {
    for (auto b : bits)
      if (b != 0 && b != 1) return false;
    return true;
  }
};

inline void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.h != b.h || a.w != b.w)
    throw DimensionError(std::string(op) + ": mask dims (" + std::to_string(a.h) + ", " +
                         std::to_string(a.w) + ") vs (" + std::to_string(b.h) + ", " +
                         std::to_string(b.w) + ")");
}

}  // namespace lcv2i

#pragma once

#include <cstdint>
#include <vector>

#include "mkis/error.hpp"

namespace mkis {

// Dense row-major map of small integers: binary label maps ({0,1}),
// field-of-view masks (0 = excluded), class predictions.
struct ByteMap {
  int64_t h = 0;
  int64_t w = 0;
  std::vector<uint8_t> v;

  ByteMap() = default;
  ByteMap(int64_t h_, int64_t w_, uint8_t fill = 0) : h(h_), w(w_), v(h_ * w_, fill) {}

  int64_t size() const { return h * w; }
  uint8_t& at(int64_t y, int64_t x) { return v[y * w + x]; }
  uint8_t at(int64_t y, int64_t x) const { return v[y * w + x]; }

  bool is_binary() const {
    for (uint8_t b : v)
      if (b > 1) return false;
    return true;
  }
};

inline void require_binary(const ByteMap& m, const char* what) {
  if (!m.is_binary()) throw DataError(std::string(what) + " contains values outside {0,1}");
}

}  // namespace mkis

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace coseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad experiment/CLI configuration (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Corrupt or mismatched data files, shape mismatches (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

// Non-finite values where finite ones are required (exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Per-pixel boolean plane. Used both as a validity mask (true = pixel
// participates) and as the cut-region indicator of box masks.
struct Mask {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int height, int width, bool fill = false)
      : h(height), w(width), v(static_cast<size_t>(height) * width, fill ? 1 : 0) {}

  bool at(int y, int x) const { return v[static_cast<size_t>(y) * w + x] != 0; }
  void set(int y, int x, bool b) { v[static_cast<size_t>(y) * w + x] = b ? 1 : 0; }

  size_t count() const {
    size_t n = 0;
    for (uint8_t b : v) n += b != 0;
    return n;
  }

  Mask logical_and(const Mask& other) const {
    if (other.h != h || other.w != w)
      throw ShapeError("Mask::logical_and: size mismatch " + std::to_string(h) + "x" +
                       std::to_string(w) + " vs " + std::to_string(other.h) + "x" +
                       std::to_string(other.w));
    Mask out(h, w, false);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = (v[i] && other.v[i]) ? 1 : 0;
    return out;
  }

  Mask logical_not() const {
    Mask out(h, w, false);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = v[i] ? 0 : 1;
    return out;
  }
};

// Dense per-pixel class labels in [0, C).
struct ClassMap {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> v;

  ClassMap() = default;
  ClassMap(int height, int width, uint8_t fill = 0)
      : h(height), w(width), v(static_cast<size_t>(height) * width, fill) {}

  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  void set(int y, int x, uint8_t c) { v[static_cast<size_t>(y) * w + x] = c; }
};

}  // namespace coseg

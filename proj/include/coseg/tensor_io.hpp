#pragma once

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "coseg/tensor.hpp"

namespace coseg {

// Binary tensor serialization.
//
// Tensor blob layout (all integers little-endian):
//   magic "CSTN" | dtype u8 (0=f32, 1=f64, 2=u8) | rank u8 | dims rank*u32 | values
//
// Archive layout:
//   magic "CSAR" | version u32 | count u32 | count * (name_len u32 | name | tensor blob)

enum class DType : uint8_t { f32 = 0, f64 = 1, u8 = 2 };

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw DataError("tensor_io: write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n) throw DataError("tensor_io: truncated stream");
}

inline void write_u32(std::ostream& os, uint32_t v) {
  uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
  write_bytes(os, b, 4);
}

inline uint32_t read_u32(std::istream& is) {
  uint8_t b[4];
  read_bytes(is, b, 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline void write_u8(std::ostream& os, uint8_t v) { write_bytes(os, &v, 1); }

inline uint8_t read_u8(std::istream& is) {
  uint8_t v;
  read_bytes(is, &v, 1);
  return v;
}

inline bool host_little_endian() {
  const uint32_t x = 1;
  uint8_t b;
  std::memcpy(&b, &x, 1);
  return b == 1;
}

template <class T>
inline void write_values_le(std::ostream& os, const T* v, size_t n) {
  if (host_little_endian()) {
    write_bytes(os, v, n * sizeof(T));
    return;
  }
  std::vector<uint8_t> buf(n * sizeof(T));
  for (size_t i = 0; i < n; ++i) {
    uint8_t tmp[sizeof(T)];
    std::memcpy(tmp, &v[i], sizeof(T));
    for (size_t j = 0; j < sizeof(T); ++j) buf[i * sizeof(T) + j] = tmp[sizeof(T) - 1 - j];
  }
  write_bytes(os, buf.data(), buf.size());
}

template <class T>
inline void read_values_le(std::istream& is, T* v, size_t n) {
  read_bytes(is, v, n * sizeof(T));
  if (host_little_endian()) return;
  for (size_t i = 0; i < n; ++i) {
    uint8_t tmp[sizeof(T)];
    std::memcpy(tmp, &v[i], sizeof(T));
    std::reverse(tmp, tmp + sizeof(T));
    std::memcpy(&v[i], tmp, sizeof(T));
  }
}

inline void write_header(std::ostream& os, DType dt, const std::vector<int>& shape) {
  write_bytes(os, "CSTN", 4);
  write_u8(os, static_cast<uint8_t>(dt));
  if (shape.empty() || shape.size() > 255) throw DataError("tensor_io: rank out of range");
  write_u8(os, static_cast<uint8_t>(shape.size()));
  for (int d : shape) {
    if (d <= 0) throw DataError("tensor_io: nonpositive dimension");
    write_u32(os, static_cast<uint32_t>(d));
  }
}

inline std::pair<DType, std::vector<int>> read_header(std::istream& is) {
  char magic[4];
  read_bytes(is, magic, 4);
  if (std::memcmp(magic, "CSTN", 4) != 0) throw DataError("tensor_io: bad tensor magic");
  const uint8_t dt = read_u8(is);
  if (dt > 2) throw DataError("tensor_io: unknown dtype " + std::to_string(int(dt)));
  const uint8_t rank = read_u8(is);
  if (rank == 0) throw DataError("tensor_io: zero rank");
  std::vector<int> shape(rank);
  size_t numel = 1;
  for (auto& d : shape) {
    const uint32_t v = read_u32(is);
    if (v == 0 || v > (1u << 30)) throw DataError("tensor_io: dimension out of range");
    d = static_cast<int>(v);
    numel *= v;
    if (numel > (size_t(1) << 33)) throw DataError("tensor_io: tensor too large");
  }
  return {static_cast<DType>(dt), std::move(shape)};
}

}  // namespace detail

// Loaded tensor of any on-disk dtype; exactly one payload vector is filled.
struct AnyTensor {
  DType dtype = DType::f32;
  std::vector<int> shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::vector<uint8_t> u8;

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  template <class T>
  TensorT<T> as_tensor() const {
    std::vector<T> out(numel());
    switch (dtype) {
      case DType::f32:
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(f32[i]);
        break;
      case DType::f64:
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(f64[i]);
        break;
      case DType::u8:
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(u8[i]);
        break;
    }
    return TensorT<T>::from_data(shape, std::move(out), false);
  }
};

inline void write_tensor(std::ostream& os, const TensorT<float>& t) {
  detail::write_header(os, DType::f32, t.shape());
  detail::write_values_le(os, t.values().data(), t.numel());
}

inline void write_tensor(std::ostream& os, const TensorT<double>& t) {
  detail::write_header(os, DType::f64, t.shape());
  detail::write_values_le(os, t.values().data(), t.numel());
}

inline void write_tensor_u8(std::ostream& os, const std::vector<int>& shape, const std::vector<uint8_t>& v) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  if (n != v.size()) throw DataError("tensor_io: u8 payload does not match shape");
  detail::write_header(os, DType::u8, shape);
  detail::write_bytes(os, v.data(), v.size());
}

inline AnyTensor read_tensor(std::istream& is) {
  AnyTensor t;
  auto [dt, shape] = detail::read_header(is);
  t.dtype = dt;
  t.shape = std::move(shape);
  const size_t n = t.numel();
  switch (dt) {
    case DType::f32:
      t.f32.resize(n);
      detail::read_values_le(is, t.f32.data(), n);
      break;
    case DType::f64:
      t.f64.resize(n);
      detail::read_values_le(is, t.f64.data(), n);
      break;
    case DType::u8:
      t.u8.resize(n);
      detail::read_bytes(is, t.u8.data(), n);
      break;
  }
  return t;
}

template <class T>
inline void save_tensor(const std::string& path, const TensorT<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("tensor_io: cannot open for writing: " + path);
  write_tensor(os, t);
}

inline AnyTensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("tensor_io: cannot open: " + path);
  return read_tensor(is);
}

// Ordered name -> tensor archive. Order is preserved on round-trip so that
// checkpoint bytes are deterministic.
struct TensorArchive {
  std::vector<std::pair<std::string, AnyTensor>> entries;

  static constexpr uint32_t kVersion = 1;

  void add(const std::string& name, const TensorT<float>& t) {
    AnyTensor a;
    a.dtype = DType::f32;
    a.shape = t.shape();
    a.f32 = t.values();
    entries.emplace_back(name, std::move(a));
  }

  void add(const std::string& name, const TensorT<double>& t) {
    AnyTensor a;
    a.dtype = DType::f64;
    a.shape = t.shape();
    a.f64 = t.values();
    entries.emplace_back(name, std::move(a));
  }

  const AnyTensor* find(const std::string& name) const {
    for (const auto& [k, v] : entries)
      if (k == name) return &v;
    return nullptr;
  }

  const AnyTensor& at(const std::string& name) const {
    const AnyTensor* p = find(name);
    if (!p) throw DataError("archive: missing tensor '" + name + "'");
    return *p;
  }

  void write(std::ostream& os) const {
    detail::write_bytes(os, "CSAR", 4);
    detail::write_u32(os, kVersion);
    detail::write_u32(os, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
      detail::write_u32(os, static_cast<uint32_t>(name.size()));
      detail::write_bytes(os, name.data(), name.size());
      switch (t.dtype) {
        case DType::f32:
          detail::write_header(os, DType::f32, t.shape);
          detail::write_values_le(os, t.f32.data(), t.f32.size());
          break;
        case DType::f64:
          detail::write_header(os, DType::f64, t.shape);
          detail::write_values_le(os, t.f64.data(), t.f64.size());
          break;
        case DType::u8:
          write_tensor_u8(os, t.shape, t.u8);
          break;
      }
    }
  }

  static TensorArchive read(std::istream& is) {
    char magic[4];
    detail::read_bytes(is, magic, 4);
    if (std::memcmp(magic, "CSAR", 4) != 0) throw DataError("archive: bad magic");
    const uint32_t version = detail::read_u32(is);
    if (version != kVersion) throw DataError("archive: unsupported version " + std::to_string(version));
    const uint32_t count = detail::read_u32(is);
    TensorArchive a;
    a.entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
      const uint32_t len = detail::read_u32(is);
      if (len > 4096) throw DataError("archive: name too long");
      std::string name(len, '\0');
      detail::read_bytes(is, name.data(), len);
      a.entries.emplace_back(std::move(name), read_tensor(is));
    }
    return a;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("archive: cannot open for writing: " + path);
    write(os);
  }

  static TensorArchive load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("archive: cannot open: " + path);
    return read(is);
  }
};

}  // namespace coseg

#pragma once

// Detector checkpoint: single little-endian binary file.
//   header:     magic "CDFD", version u32, n_classes u32, tensor count u32
//   per tensor: name length u32, UTF-8 name bytes, rank u32, dims u32 each,
//               payload of float64 values

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "cdfsod/detector.hpp"

namespace cdfsod {

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& f, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                        (unsigned char)(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (!f) throw std::runtime_error("checkpoint: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline void put_f64(std::ostream& f, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(bits >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  if (!f) throw std::runtime_error("checkpoint: truncated file");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

inline void save_weights(const std::string& path, const ModelWeights& w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write("CDFD", 4);
  detail::put_u32(f, kCheckpointVersion);
  detail::put_u32(f, uint32_t(w.n_classes));
  detail::put_u32(f, uint32_t(w.params.size()));
  for (const auto& [name, t] : w.params) {
    detail::put_u32(f, uint32_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    detail::put_u32(f, uint32_t(t.shape.size()));
    for (int d : t.shape) detail::put_u32(f, uint32_t(d));
    for (double v : t.values()) detail::put_f64(f, v);
  }
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline ModelWeights load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open for read: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "CDFD", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = detail::get_u32(f);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  ModelWeights w;
  w.n_classes = int(detail::get_u32(f));
  uint32_t count = detail::get_u32(f);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = detail::get_u32(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (!f) throw std::runtime_error("checkpoint: truncated file");
    uint32_t rank = detail::get_u32(f);
    Shape shape(rank);
    int64_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = int(detail::get_u32(f));
      n *= shape[d];
    }
    std::vector<double> data(static_cast<size_t>(n));
    for (double& v : data) v = detail::get_f64(f);
    w.params.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return w;
}

}  // namespace cdfsod

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "m2hx/tensor.hpp"

namespace m2hx {

struct SerializeError : std::runtime_error {
  explicit SerializeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor container format:
//   "M2HX-TNS1\n"
//   "dtype=<f32|f64> shape=<d0,d1,...>\n"
//   raw little-endian values

inline constexpr const char* kTensorMagic = "M2HX-TNS1";

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

inline Shape parse_shape_list(const std::string& s) {
  Shape shape;
  size_t pos = 0;
  while (pos < s.size()) {
    size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    shape.push_back(std::stoi(s.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return shape;
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os << kTensorMagic << "\n";
  os << "dtype=" << detail::dtype_name<T>() << " shape=";
  for (int i = 0; i < t.ndim(); ++i) os << (i ? "," : "") << t.dim(i);
  os << "\n";
  os.write(reinterpret_cast<const char*>(t.ptr()), (std::streamsize)(t.numel() * sizeof(T)));
  if (!os) throw SerializeError("tensor container write failed");
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
  std::string magic;
  if (!std::getline(is, magic) || magic != kTensorMagic)
    throw SerializeError("corrupt tensor container: bad magic");
  std::string header;
  if (!std::getline(is, header)) throw SerializeError("corrupt tensor container: no header");
  const std::string dtype_key = "dtype=", shape_key = " shape=";
  if (header.rfind(dtype_key, 0) != 0) throw SerializeError("corrupt tensor container: header");
  const size_t sp = header.find(shape_key);
  if (sp == std::string::npos) throw SerializeError("corrupt tensor container: header");
  const std::string dtype = header.substr(dtype_key.size(), sp - dtype_key.size());
  if (dtype != "f32" && dtype != "f64")
    throw SerializeError("tensor container: unknown dtype " + dtype);
  Shape shape = detail::parse_shape_list(header.substr(sp + shape_key.size()));
  Tensor<T> t = Tensor<T>::zeros(shape);
  const int64_t n = t.numel();
  const size_t elem = dtype == "f32" ? 4 : 8;
  std::vector<char> raw((size_t)n * elem);
  is.read(raw.data(), (std::streamsize)raw.size());
  if (is.gcount() != (std::streamsize)raw.size())
    throw SerializeError("corrupt tensor container: truncated payload");
  if ((dtype == "f32") == (sizeof(T) == 4)) {
    std::memcpy(t.ptr(), raw.data(), raw.size());
  } else if (dtype == "f32") {
    const float* src = reinterpret_cast<const float*>(raw.data());
    for (int64_t i = 0; i < n; ++i) t.ptr()[i] = (T)src[i];
  } else {
    const double* src = reinterpret_cast<const double*>(raw.data());
    for (int64_t i = 0; i < n; ++i) t.ptr()[i] = (T)src[i];
  }
  return t;
}

template <class T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw SerializeError("cannot open for write: " + path);
  write_tensor(os, t);
}

template <class T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SerializeError("cannot open for read: " + path);
  return read_tensor<T>(is);
}

}  // namespace m2hx

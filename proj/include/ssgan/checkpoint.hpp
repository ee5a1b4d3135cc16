#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssgan/tensor.hpp"

namespace ssgan {

// Count-prefixed table of named tensors, "SSGN" magic. Entries keep a dtype
// tag so float32 training state round-trips bitwise. In memory everything is
// widened to double (exact for f32 payloads).
struct TensorStore {
  struct Entry {
    int dtype = 0;  // 0: f32, 1: f64
    Shape shape;
    std::vector<double> data;
  };
  // Ordered map: serialization order is the key order, deterministic.
  std::map<std::string, Entry> entries;

  void put(const std::string& name, const Tensor<float>& t) {
    Entry e;
    e.dtype = 0;
    e.shape = t.shape;
    e.data.assign(t.v.begin(), t.v.end());
    entries[name] = std::move(e);
  }
  void put(const std::string& name, const Tensor<double>& t) {
    Entry e;
    e.dtype = 1;
    e.shape = t.shape;
    e.data.assign(t.v.begin(), t.v.end());
    entries[name] = std::move(e);
  }
  void put_scalar(const std::string& name, double x) {
    put(name, Tensor<double>::scalar(x));
  }

  bool has(const std::string& name) const { return entries.count(name) > 0; }

  template <class T>
  Tensor<T> get(const std::string& name) const {
    auto it = entries.find(name);
    require(it != entries.end(), ErrorCode::invalid_argument,
            "checkpoint entry missing: " + name);
    Tensor<T> t(it->second.shape);
    for (size_t i = 0; i < t.v.size(); ++i)
      t.v[i] = static_cast<T>(it->second.data[i]);
    return t;
  }
  double get_scalar(const std::string& name) const {
    return get<double>(name).v[0];
  }
};

void save_store(const TensorStore& store, const std::string& path);
TensorStore load_store(const std::string& path);

}  // namespace ssgan

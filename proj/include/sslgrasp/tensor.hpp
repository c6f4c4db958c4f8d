#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "sslgrasp/errors.hpp"

namespace sslgrasp::ad {

// Dense row-major tensor of doubles. Rank 0 is a scalar, rank 2 is an
// (H, W) map, rank 3 is a (C, H, W) channel stack. No broadcasting.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() : v(1, 0.0) {}  // scalar zero
  explicit Tensor(std::vector<int> s, double fill = 0.0)
      : shape(std::move(s)), v(static_cast<std::size_t>(numel_of(shape)), fill) {}

  static Tensor scalar(double x) {
    Tensor t;
    t.v[0] = x;
    return t;
  }

  static long long numel_of(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) {
      if (d < 0) throw ConfigError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  int numel() const { return static_cast<int>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool is_scalar() const { return shape.empty(); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double& at2(int h, int w) { return v[static_cast<std::size_t>(h) * shape[1] + w]; }
  double at2(int h, int w) const { return v[static_cast<std::size_t>(h) * shape[1] + w]; }

  double& at3(int c, int h, int w) {
    return v[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }
  double at3(int c, int h, int w) const {
    return v[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w];
  }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ConfigError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                      b.shape_str());
}

}  // namespace sslgrasp::ad

#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "msiseg/common.hpp"

namespace msiseg {

// Dense N-d array with a paired gradient buffer of the same shape.
// Activations are 4-d (N,C,H,W); dense features use (N,F); parameters use
// whatever their op expects. grad is zero-initialized and kept in lockstep.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> values;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) { reset(std::move(s)); }

  void reset(std::vector<int> s) {
    shape = std::move(s);
    size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("tensor dims must be positive");
      n *= static_cast<size_t>(d);
    }
    values.assign(n, T(0));
    grad.assign(n, T(0));
  }

  size_t numel() const { return values.size(); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  // NCHW accessors
  int n() const { return shape[0]; }
  int c() const { return shape[1]; }
  int h() const { return shape[2]; }
  int w() const { return shape[3]; }

  size_t index(int in, int ic, int iy, int ix) const {
    return ((static_cast<size_t>(in) * shape[1] + ic) * shape[2] + iy) * shape[3] + ix;
  }
  T at(int in, int ic, int iy, int ix) const { return values[index(in, ic, iy, ix)]; }
  T& at(int in, int ic, int iy, int ix) { return values[index(in, ic, iy, ix)]; }

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void check_finite(const char* what) const {
    for (const T& v : values)
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError(std::string(what) + ": non-finite value");
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.values.resize(values.size());
    out.grad.assign(grad.size(), U(0));
    for (size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
    return out;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

}  // namespace msiseg

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tkto {

// User/configuration mistakes; the CLI maps these to exit code 2.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major double tensor (1-D or 2-D is all the models need).
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(numel_of(shape)), fill) {}
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<long long>(data.size()))
      throw std::runtime_error("tensor: shape/data size mismatch");
  }

  static long long numel_of(const std::vector<int>& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
  }

  size_t size() const { return data.size(); }
  bool is_scalar() const { return data.size() == 1; }
  int rows() const { return shape.size() == 2 ? shape[0] : 1; }
  int cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 1 : shape[0]); }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }
  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  double scalar() const {
    if (!is_scalar()) throw std::runtime_error("tensor: scalar() on non-scalar");
    return data[0];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::runtime_error(std::string(op) + ": shape mismatch " + a.shape_str() +
                             " vs " + b.shape_str());
}

}  // namespace tkto

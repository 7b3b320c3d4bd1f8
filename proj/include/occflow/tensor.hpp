#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace occflow {

// Dense row-major tensor of 64-bit floats. All kernels in this project run in
// double precision with a fixed summation order so that identical seeds give
// bitwise-identical results.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s, double fill = 0.0);

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, double v) { return Tensor(std::move(s), v); }
  static Tensor from(std::vector<int64_t> s, std::vector<double> values);
  static Tensor scalar(double v) { return from({1}, {v}); }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int64_t ndim() const { return static_cast<int64_t>(shape.size()); }
  int64_t dim(int64_t i) const;
  // Extent of the last axis (channel axis for (..., c) layouts).
  int64_t last_dim() const;

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  double& at2(int64_t r, int64_t c, int64_t ncols) { return data[static_cast<size_t>(r * ncols + c)]; }
  double at2(int64_t r, int64_t c, int64_t ncols) const { return data[static_cast<size_t>(r * ncols + c)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  Tensor reshaped(std::vector<int64_t> s) const;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_str(const std::vector<int64_t>& shape);

// Elementwise helpers (shape-checked, fixed order).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void axpy(Tensor& dst, const Tensor& src, double coeff);  // dst += coeff * src
double dot(const Tensor& a, const Tensor& b);
double sum_squares(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

bool all_finite(const Tensor& a);
void require_finite(const Tensor& a, const std::string& what);
void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what);

// Deterministic RNG with explicit seeding. Gaussian draws use Box-Muller on
// top of the raw engine so the stream layout does not depend on the standard
// library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();
  double uniform();      // [0, 1)
  double normal();       // N(0, 1)
  double rademacher();   // -1 or +1
  int64_t uniform_int(int64_t n);  // [0, n)

  Tensor normal_tensor(std::vector<int64_t> shape);
  Tensor rademacher_tensor(std::vector<int64_t> shape);

  // Derived stream for a named sub-task; decouples consumption patterns
  // between pipeline stages.
  Rng fork(uint64_t stream);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace occflow

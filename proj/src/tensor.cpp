#include "occflow/tensor.hpp"

#include <cmath>
#include <sstream>

namespace occflow {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor extent");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> s, double fill)
    : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}

Tensor Tensor::from(std::vector<int64_t> s, std::vector<double> values) {
  if (shape_numel(s) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("Tensor::from: " + shape_str(s) + " does not hold " +
                                std::to_string(values.size()) + " values");
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(values);
  return t;
}

int64_t Tensor::dim(int64_t i) const {
  if (i < 0 || i >= ndim()) throw std::out_of_range("Tensor::dim index");
  return shape[static_cast<size_t>(i)];
}

int64_t Tensor::last_dim() const {
  if (shape.empty()) throw std::out_of_range("Tensor::last_dim on rank-0 tensor");
  return shape.back();
}

Tensor Tensor::reshaped(std::vector<int64_t> s) const {
  if (shape_numel(s) != size())
    throw std::invalid_argument("reshape " + shape_str(shape) + " -> " + shape_str(s));
  Tensor t;
  t.shape = std::move(s);
  t.data = data;
  return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const std::string& what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(what + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor r = a;
  for (int64_t i = 0; i < r.size(); ++i) r[i] += b[i];
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor r = a;
  for (int64_t i = 0; i < r.size(); ++i) r[i] -= b[i];
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor r = a;
  for (int64_t i = 0; i < r.size(); ++i) r[i] *= b[i];
  return r;
}

Tensor scale(const Tensor& a, double s) {
  Tensor r = a;
  for (int64_t i = 0; i < r.size(); ++i) r[i] *= s;
  return r;
}

void axpy(Tensor& dst, const Tensor& src, double coeff) {
  require_same_shape(dst, src, "axpy");
  for (int64_t i = 0; i < dst.size(); ++i) dst[i] += coeff * src[i];
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double sum_squares(const Tensor& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
  return s;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i]));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& a) {
  for (int64_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i])) return false;
  return true;
}

void require_finite(const Tensor& a, const std::string& what) {
  if (!all_finite(a)) throw std::runtime_error(what + ": non-finite values");
}

namespace {
uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

Rng::Rng(uint64_t seed) {
  uint64_t s = seed;
  // Spread low-entropy seeds before feeding the engine.
  eng_.seed(splitmix64(s));
}

uint64_t Rng::next_u64() { return eng_(); }

double Rng::uniform() {
  // 53-bit mantissa, [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller; u1 shifted away from zero so log() stays finite.
  double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

double Rng::rademacher() { return (next_u64() & 1ULL) ? 1.0 : -1.0; }

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<int64_t>(v % un);
}

Tensor Rng::normal_tensor(std::vector<int64_t> shape) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = normal();
  return t;
}

Tensor Rng::rademacher_tensor(std::vector<int64_t> shape) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rademacher();
  return t;
}

Rng Rng::fork(uint64_t stream) {
  uint64_t mixed = next_u64() ^ (0x45d9f3b3335b369ULL * (stream + 1));
  return Rng(mixed);
}

}  // namespace occflow

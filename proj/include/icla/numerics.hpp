#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace icla {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. Rank-2 accessors assume shape {rows, cols}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.size() > 1 ? shape_[1] : 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  void fill(double value);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

bool all_finite(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

// c = a * b for a [m x k], b [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// c = a^T * b for a [k x m], b [k x n].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
// c = a * b^T for a [m x k], b [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Accumulating variants used by the backward passes.
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out);

void add_inplace(Tensor& dst, const Tensor& src);
void axpy_inplace(Tensor& dst, double alpha, const Tensor& src);

/// Softmax with max subtraction; rejects an empty input.
std::vector<double> softmax(std::span<const double> x);
/// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor.
Tensor softmax(const Tensor& x);

/// out[i] = gain[i] * x[i] / sqrt(mean(x^2) + eps). A zero denominator yields zeros.
std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain, double eps);
/// Row-wise rms_norm of a [T x d] tensor. Optionally returns 1/rms per row.
Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps,
                     std::vector<double>* inv_rms = nullptr);

/// Backward of rms_norm_rows given the saved 1/rms. Returns dx; accumulates into dgain if given.
Tensor rms_norm_rows_backward(const Tensor& x, const Tensor& gain,
                              const std::vector<double>& inv_rms, const Tensor& dy,
                              Tensor* dgain = nullptr);

inline constexpr double kDefaultRmsEps = 1e-6;

/// splitmix64 generator. Normal variates use Box-Muller with a cached spare.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a seed with a label to obtain an independent subsystem seed.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

Tensor rand_normal(SeededRng& rng, Shape shape, double stddev);

using ScalarFn = std::function<double(const Tensor&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h);

}  // namespace icla

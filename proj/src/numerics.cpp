#include "icla/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace icla {

namespace {

std::size_t product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) {
      throw std::invalid_argument("tensor shape " + shape_string(shape) +
                                  " has a zero dimension");
    }
  }
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(what) + ": expected a rank-2 tensor, got " +
                                shape_string(t.shape()));
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      os << 'x';
    }
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(product(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != product(shape_)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff: shape " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ, " + shape_string(a.shape()) +
                                " x " + shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data().data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double ait = a(i, t);
      const double* bt = b.data().data() + t * n;
      for (std::size_t j = 0; j < n; ++j) {
        ci[j] += ait * bt[j];
      }
    }
  }
  return c;
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: row counts differ, " + shape_string(a.shape()) +
                                "^T x " + shape_string(b.shape()));
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (out.shape() != Shape{m, n}) {
    throw std::invalid_argument("matmul_tn: output shape " + shape_string(out.shape()) +
                                " expected " + shape_string({m, n}));
  }
  for (std::size_t t = 0; t < k; ++t) {
    const double* bt = b.data().data() + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double ati = a(t, i);
      double* oi = out.data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        oi[j] += ati * bt[j];
      }
    }
  }
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  Tensor c({a.cols(), b.cols()});
  matmul_tn_acc(a, b, c);
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: column counts differ, " + shape_string(a.shape()) +
                                " x " + shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.data().data() + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) {
        acc += ai[t] * bj[t];
      }
      c(i, j) = acc;
    }
  }
  return c;
}

void add_inplace(Tensor& dst, const Tensor& src) { axpy_inplace(dst, 1.0, src); }

void axpy_inplace(Tensor& dst, double alpha, const Tensor& src) {
  if (!dst.same_shape(src)) {
    throw std::invalid_argument("axpy: shape " + shape_string(dst.shape()) + " vs " +
                                shape_string(src.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += alpha * src[i];
  }
}

std::vector<double> softmax(std::span<const double> x) {
  if (x.empty()) {
    throw std::invalid_argument("softmax: empty axis");
  }
  if (!std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); })) {
    throw std::domain_error("softmax: non-finite input");
  }
  const double mx = *std::max_element(x.begin(), x.end());
  std::vector<double> out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    sum += out[i];
  }
  for (double& v : out) {
    v /= sum;
  }
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 1) {
    return Tensor(x.shape(), softmax(x.data()));
  }
  require_rank2(x, "softmax");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto p = softmax(x.row(r));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

namespace {

double inverse_rms(std::span<const double> x, double eps) {
  double ss = 0.0;
  for (double v : x) {
    ss += v * v;
  }
  const double denom = std::sqrt(ss / static_cast<double>(x.size()) + eps);
  return denom > 0.0 ? 1.0 / denom : 0.0;
}

}  // namespace

std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain,
                             double eps) {
  if (x.empty()) {
    throw std::invalid_argument("rms_norm: empty input");
  }
  if (gain.size() != x.size()) {
    throw std::invalid_argument("rms_norm: gain length " + std::to_string(gain.size()) +
                                " != feature dimension " + std::to_string(x.size()));
  }
  if (eps < 0.0) {
    throw std::invalid_argument("rms_norm: eps must be non-negative");
  }
  const double inv = inverse_rms(x, eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = gain[i] * x[i] * inv;
  }
  return out;
}

Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps,
                     std::vector<double>* inv_rms) {
  require_rank2(x, "rms_norm_rows");
  if (gain.size() != x.cols()) {
    throw std::invalid_argument("rms_norm: gain length " + std::to_string(gain.size()) +
                                " != feature dimension " + std::to_string(x.cols()));
  }
  Tensor out(x.shape());
  if (inv_rms != nullptr) {
    inv_rms->assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    const double inv = inverse_rms(xr, eps);
    auto o = out.row(r);
    for (std::size_t i = 0; i < xr.size(); ++i) {
      o[i] = gain[i] * xr[i] * inv;
    }
    if (inv_rms != nullptr) {
      (*inv_rms)[r] = inv;
    }
  }
  return out;
}

Tensor rms_norm_rows_backward(const Tensor& x, const Tensor& gain,
                              const std::vector<double>& inv_rms, const Tensor& dy,
                              Tensor* dgain) {
  if (!x.same_shape(dy) || inv_rms.size() != x.rows()) {
    throw std::invalid_argument("rms_norm backward: shape " + shape_string(dy.shape()) +
                                " vs input " + shape_string(x.shape()));
  }
  const std::size_t d = x.cols();
  Tensor dx(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    const auto dyr = dy.row(r);
    const double inv = inv_rms[r];
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dot += dyr[i] * gain[i] * xr[i];
    }
    const double coeff = dot * inv * inv * inv / static_cast<double>(d);
    auto dxr = dx.row(r);
    for (std::size_t i = 0; i < d; ++i) {
      dxr[i] = inv * gain[i] * dyr[i] - xr[i] * coeff;
      if (dgain != nullptr) {
        (*dgain)[i] += dyr[i] * xr[i] * inv;
      }
    }
  }
  return dx;
}

std::uint64_t SeededRng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SeededRng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] keeps the logarithm finite.
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(theta);
  has_spare_ = true;
  return radius * std::cos(theta);
}

std::uint64_t SeededRng::uniform_int(std::uint64_t n) {
  if (n == 0) {
    throw std::invalid_argument("uniform_int: empty range");
  }
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = next_u64();
  while (v >= limit) {
    v = next_u64();
  }
  return v % n;
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  SeededRng mix(root ^ h);
  return mix.next_u64();
}

Tensor rand_normal(SeededRng& rng, Shape shape, double stddev) {
  if (stddev < 0.0) {
    throw std::invalid_argument("rand_normal: negative standard deviation");
  }
  Tensor t(std::move(shape));
  if (stddev == 0.0) {
    return t;
  }
  for (double& v : t.data()) {
    v = stddev * rng.normal();
  }
  return t;
}

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("finite_diff_grad: step must be positive");
  }
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double plus = f(probe);
    probe[i] = x[i] - h;
    const double minus = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw std::domain_error("finite_diff_grad: non-finite evaluation at coordinate " +
                              std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

}  // namespace icla

// Dense row-major matrices, the handful of vector primitives the training
// machinery needs, a portable seeded RNG and a finite-difference gradient
// oracle. Everything here is 64-bit floating point.

#ifndef CSMCIR_NUMERICS_HPP
#define CSMCIR_NUMERICS_HPP

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace csmcir {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  /// Single-row matrix holding a copy of `v`.
  static Matrix row_vector(std::span<const double> v);
  /// Stacks equal-length vectors as rows.
  static Matrix from_rows(const std::vector<Vector>& rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  Vector row_copy(std::size_t r) const;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  void fill(double v);
  Matrix& operator+=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---- dense products ------------------------------------------------------

Matrix matmul(const Matrix& a, const Matrix& b);     // A B
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // Aᵀ B
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // A Bᵀ
Matrix transpose(const Matrix& a);
Matrix vstack(const Matrix& top, const Matrix& bottom);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> v);
void axpy(double a, std::span<const double> x, std::span<double> y);  // y += a x

// ---- probability and geometry --------------------------------------------

/// Max-shifted softmax. Throws DomainError on empty or non-finite input.
Vector softmax_row(std::span<const double> logits);

/// Shannon entropy in nats with 0 log 0 = 0. Throws DomainError unless `p`
/// is nonnegative and sums to 1 within 1e-6.
double entropy(std::span<const double> p);

/// Throws DomainError on a zero (or non-finite) vector.
Vector l2_normalize(std::span<const double> v);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

bool all_finite(std::span<const double> v);

// ---- RNG ----------------------------------------------------------------

/// Counter-based splitmix64 stream. The state is just (seed, counter), so the
/// stream is identical on every platform and trivially checkpointed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64() noexcept;
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal() noexcept;
  /// Uniform integer in [0, n). `n` must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Independent stream keyed by (seed, tag).
  Rng fork(std::uint64_t tag) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

Matrix random_normal(std::size_t rows, std::size_t cols, double scale, Rng& rng);

// ---- gradient oracle -----------------------------------------------------

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
/// Throws NonFiniteError if any evaluation is not finite.
Vector finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h = 1e-5);

/// ‖a - b‖ / max(‖a‖, ‖b‖), or 0 when both are zero.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace csmcir

#endif  // CSMCIR_NUMERICS_HPP

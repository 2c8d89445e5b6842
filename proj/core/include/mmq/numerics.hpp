#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace mmq
{

/// Dense row-major matrix with 32-bit storage. Reductions over its entries
/// are carried out in double precision throughout the library.
class Matrix
{
  public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
    Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float &operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    bool all_finite() const noexcept;

    friend bool operator==(const Matrix &, const Matrix &) = default;

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// FNV-1a over bytes; used for naming substreams and content hashes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;

/// Counter-based splitmix64 stream. The n-th draw depends only on (seed, n).
class RngStream
{
  public:
    explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) noexcept : seed_(seed), counter_(counter) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1) with 53 random bits.
    double next_unit() noexcept;
    /// Uniform integer in [0, bound). bound must be > 0.
    std::uint64_t next_below(std::uint64_t bound) noexcept;
    /// Standard normal via Box-Muller (two draws per value).
    double next_normal() noexcept;

    /// Independent stream keyed by a label.
    RngStream fork(std::string_view label) const noexcept;
    RngStream fork(std::uint64_t index) const noexcept;

  private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

Matrix randn_matrix(RngStream &stream, std::size_t rows, std::size_t cols, double std);

/// Lower-triangular L with L·Lᵀ = A + damping·mean(diag A)·I.
Matrix cholesky_spd(const Matrix &a, double damping);

/// (A + damping·mean(diag A)·I)⁻¹ via its Cholesky factor.
Matrix invert_spd(const Matrix &a, double damping);

Matrix transpose(const Matrix &a);
/// A·Bᵀ with double accumulation.
Matrix matmul_transposed(const Matrix &a, const Matrix &b);
Matrix matmul(const Matrix &a, const Matrix &b);
double frobenius_norm(const Matrix &a);

namespace detail
{

// Square double-precision kernels used by the quantizers and the linear
// baseline. Buffers are row-major n×n.

/// In-place lower Cholesky of a + shift·I. Returns the failing column, or -1 on
/// success. The strict upper triangle is zeroed.
long cholesky_lower_inplace(std::span<double> a, std::size_t n, double shift);

/// Inverse of an SPD matrix given its lower Cholesky factor.
std::vector<double> inverse_from_cholesky(std::span<const double> lower, std::size_t n);

/// Solve (L·Lᵀ) x = b.
std::vector<double> cholesky_solve(std::span<const double> lower, std::size_t n, std::span<const double> b);

double dot(std::span<const float> a, std::span<const float> b) noexcept;

} // namespace detail

} // namespace mmq

#include "mmq/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mmq
{

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data))
{
    if (data_.size() != rows_ * cols_)
        throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) + " != " +
                                    std::to_string(rows_) + "x" + std::to_string(cols_));
}

Matrix Matrix::identity(std::size_t n)
{
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        m(i, i) = 1.0f;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows)
{
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto &row : rows)
    {
        if (row.size() != c)
            throw std::invalid_argument("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

bool Matrix::all_finite() const noexcept
{
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::uint64_t mix64(std::uint64_t x) noexcept
{
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) noexcept
{
    std::uint64_t h = basis;
    for (unsigned char c : bytes)
    {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace
{
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
}

std::uint64_t RngStream::next_u64() noexcept
{
    ++counter_;
    return mix64(seed_ + counter_ * kGolden);
}

double RngStream::next_unit() noexcept
{
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::next_below(std::uint64_t bound) noexcept
{
    // Lemire's multiply-shift; the tiny modulo bias is irrelevant here and
    // keeps the draw count fixed at one per call.
    __extension__ using u128 = unsigned __int128;
    const u128 product = static_cast<u128>(next_u64()) * bound;
    return static_cast<std::uint64_t>(product >> 64);
}

double RngStream::next_normal() noexcept
{
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; // (0, 1]
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

RngStream RngStream::fork(std::string_view label) const noexcept
{
    return RngStream(mix64(seed_ ^ fnv1a64(label)));
}

RngStream RngStream::fork(std::uint64_t index) const noexcept
{
    return RngStream(mix64(seed_ ^ mix64(index + kGolden)));
}

Matrix randn_matrix(RngStream &stream, std::size_t rows, std::size_t cols, double std)
{
    if (rows == 0 || cols == 0)
        throw std::invalid_argument("empty matrix");
    if (!(std > 0.0))
        throw std::invalid_argument("randn_matrix: std must be positive");
    Matrix m(rows, cols);
    for (float &v : m.data())
        v = static_cast<float>(stream.next_normal() * std);
    return m;
}

namespace detail
{

long cholesky_lower_inplace(std::span<double> a, std::size_t n, double shift)
{
    for (std::size_t j = 0; j < n; ++j)
    {
        double diag = a[j * n + j] + shift;
        for (std::size_t k = 0; k < j; ++k)
            diag -= a[j * n + k] * a[j * n + k];
        if (!(diag > 0.0) || !std::isfinite(diag))
            return static_cast<long>(j);
        const double pivot = std::sqrt(diag);
        a[j * n + j] = pivot;
        for (std::size_t i = j + 1; i < n; ++i)
        {
            double s = a[i * n + j];
            for (std::size_t k = 0; k < j; ++k)
                s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / pivot;
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            a[i * n + j] = 0.0;
    return -1;
}

std::vector<double> inverse_from_cholesky(std::span<const double> lower, std::size_t n)
{
    // Invert L (lower), then A⁻¹ = L⁻ᵀ·L⁻¹.
    std::vector<double> linv(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j)
    {
        linv[j * n + j] = 1.0 / lower[j * n + j];
        for (std::size_t i = j + 1; i < n; ++i)
        {
            double s = 0.0;
            for (std::size_t k = j; k < i; ++k)
                s -= lower[i * n + k] * linv[k * n + j];
            linv[i * n + j] = s / lower[i * n + i];
        }
    }
    std::vector<double> inv(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j)
        {
            double s = 0.0;
            for (std::size_t k = i; k < n; ++k)
                s += linv[k * n + i] * linv[k * n + j];
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    return inv;
}

std::vector<double> cholesky_solve(std::span<const double> lower, std::size_t n, std::span<const double> b)
{
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t i = 0; i < n; ++i)
    {
        for (std::size_t k = 0; k < i; ++k)
            y[i] -= lower[i * n + k] * y[k];
        y[i] /= lower[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;)
    {
        for (std::size_t k = ii + 1; k < n; ++k)
            y[ii] -= lower[k * n + ii] * y[k];
        y[ii] /= lower[ii * n + ii];
    }
    return y;
}

double dot(std::span<const float> a, std::span<const float> b) noexcept
{
    // Four independent accumulators in a fixed order: deterministic and
    // friendlier to the pipeline than a single dependent chain.
    const std::size_t n = a.size();
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
    {
        s0 += static_cast<double>(a[i]) * b[i];
        s1 += static_cast<double>(a[i + 1]) * b[i + 1];
        s2 += static_cast<double>(a[i + 2]) * b[i + 2];
        s3 += static_cast<double>(a[i + 3]) * b[i + 3];
    }
    for (; i < n; ++i)
        s0 += static_cast<double>(a[i]) * b[i];
    return (s0 + s1) + (s2 + s3);
}

} // namespace detail

namespace
{

std::vector<double> checked_square_copy(const Matrix &a, double damping, double &shift)
{
    if (a.rows() != a.cols())
        throw std::invalid_argument("cholesky: matrix is " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + ", not square");
    if (a.empty())
        throw std::invalid_argument("empty matrix");
    if (damping < 0.0)
        throw std::invalid_argument("cholesky: damping must be non-negative");
    const std::size_t n = a.rows();
    double scale = 0.0;
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i)
    {
        trace += a(i, i);
        for (std::size_t j = 0; j < n; ++j)
            scale = std::max(scale, static_cast<double>(std::fabs(a(i, j))));
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::fabs(static_cast<double>(a(i, j)) - a(j, i)) > 1e-5 * scale)
                throw std::invalid_argument("cholesky: matrix not symmetric at (" + std::to_string(i) + "," +
                                            std::to_string(j) + ")");
    shift = damping * trace / static_cast<double>(n);
    std::vector<double> buf(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            buf[i * n + j] = 0.5 * (static_cast<double>(a(i, j)) + a(j, i));
    return buf;
}

Matrix to_matrix(const std::vector<double> &buf, std::size_t n)
{
    Matrix out(n, n);
    for (std::size_t i = 0; i < n * n; ++i)
        out.data()[i] = static_cast<float>(buf[i]);
    return out;
}

std::vector<double> factor_or_throw(const Matrix &a, double damping)
{
    double shift = 0.0;
    auto buf = checked_square_copy(a, damping, shift);
    const long failed = detail::cholesky_lower_inplace(buf, a.rows(), shift);
    if (failed >= 0)
        throw std::runtime_error("not positive definite: pivot <= 0 at column " + std::to_string(failed));
    return buf;
}

} // namespace

Matrix cholesky_spd(const Matrix &a, double damping)
{
    return to_matrix(factor_or_throw(a, damping), a.rows());
}

Matrix invert_spd(const Matrix &a, double damping)
{
    const auto lower = factor_or_throw(a, damping);
    return to_matrix(detail::inverse_from_cholesky(lower, a.rows()), a.rows());
}

Matrix transpose(const Matrix &a)
{
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            t(j, i) = a(i, j);
    return t;
}

Matrix matmul_transposed(const Matrix &a, const Matrix &b)
{
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_transposed: inner dimensions differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j)
            out(i, j) = static_cast<float>(detail::dot(a.row(i), b.row(j)));
    return out;
}

Matrix matmul(const Matrix &a, const Matrix &b)
{
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions differ");
    return matmul_transposed(a, transpose(b));
}

double frobenius_norm(const Matrix &a)
{
    double s = 0.0;
    for (float v : a.data())
        s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

} // namespace mmq

#include "mmq/numerics.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace mmq;

namespace
{

constexpr double kPinnedStdSeed7 = 0.019951837280002521;

// Textbook Cholesky in long double, used as the reference factor.
std::vector<long double> reference_cholesky(const Matrix &a, long double shift)
{
    const std::size_t n = a.rows();
    std::vector<long double> l(n * n, 0.0L);
    for (std::size_t j = 0; j < n; ++j)
    {
        long double d = static_cast<long double>(a(j, j)) + shift;
        for (std::size_t k = 0; k < j; ++k)
            d -= l[j * n + k] * l[j * n + k];
        l[j * n + j] = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i)
        {
            long double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k)
                s -= l[i * n + k] * l[j * n + k];
            l[i * n + j] = s / l[j * n + j];
        }
    }
    return l;
}

Matrix random_spd(std::uint64_t seed, std::size_t n)
{
    const Matrix m = test::random_matrix(seed, n, n);
    Matrix a = matmul_transposed(m, m);
    for (std::size_t i = 0; i < n; ++i)
        a(i, i) += 1.0f;
    return a;
}

double shift_of(const Matrix &a, double damping)
{
    double trace = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        trace += a(i, i);
    return damping * trace / static_cast<double>(a.rows());
}

double sample_std(std::span<const float> v)
{
    double mean = 0.0;
    for (float x : v)
        mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (float x : v)
        ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

} // namespace

TEST(Rng, SameSeedSameMatrix)
{
    EXPECT_EQ(test::random_matrix(1, 2, 2), test::random_matrix(1, 2, 2));
}

TEST(Rng, DifferentSeedsBothCentered)
{
    const Matrix a = test::random_matrix(1, 64, 64);
    const Matrix b = test::random_matrix(2, 64, 64);
    auto mean = [](const Matrix &m) {
        double s = 0.0;
        for (float v : m.data())
            s += v;
        return s / static_cast<double>(m.size());
    };
    EXPECT_NE(mean(a), mean(b));
    EXPECT_LE(std::fabs(mean(a)), 4.0 / 64.0);
    EXPECT_LE(std::fabs(mean(b)), 4.0 / 64.0);
}

TEST(Rng, PinnedStdForSeed7)
{
    const Matrix m = test::random_matrix(7, 1, 4096, 0.02);
    const double s = sample_std(m.data());
    EXPECT_GE(s, 0.018);
    EXPECT_LE(s, 0.022);
    EXPECT_NEAR(s, kPinnedStdSeed7, 1e-9);
}

TEST(Rng, CounterAddressable)
{
    RngStream a(42);
    for (int i = 0; i < 10; ++i)
        a.next_u64();
    RngStream b(42, 10);
    EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, ForkIsStableAndDistinct)
{
    const RngStream root(99);
    EXPECT_EQ(root.fork("x").seed(), root.fork("x").seed());
    EXPECT_NE(root.fork("x").seed(), root.fork("y").seed());
    EXPECT_NE(root.fork(std::uint64_t{0}).seed(), root.fork(std::uint64_t{1}).seed());
}

TEST(Rng, NextBelowStaysInRange)
{
    RngStream s(3);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i)
    {
        const auto v = s.next_below(7);
        ASSERT_LT(v, 7u);
        ++hits[v];
    }
    for (int h : hits)
        EXPECT_GT(h, 800);
}

TEST(Rng, UnitInterval)
{
    RngStream s(5);
    for (int i = 0; i < 10000; ++i)
    {
        const double u = s.next_unit();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
}

TEST(Rng, EmptyMatrixRejected)
{
    RngStream s(1);
    try
    {
        randn_matrix(s, 0, 3, 1.0);
        FAIL();
    }
    catch (const std::invalid_argument &e)
    {
        EXPECT_STREQ(e.what(), "empty matrix");
    }
    EXPECT_THROW(randn_matrix(s, 2, 2, 0.0), std::invalid_argument);
}

TEST(Cholesky, IdentityFactorsToIdentity)
{
    EXPECT_EQ(cholesky_spd(Matrix::identity(3), 0.0), Matrix::identity(3));
}

TEST(Cholesky, HandTwoByTwo)
{
    const Matrix l = cholesky_spd(Matrix::from_rows({{4, 2}, {2, 3}}), 0.0);
    EXPECT_FLOAT_EQ(l(0, 0), 2.0f);
    EXPECT_FLOAT_EQ(l(0, 1), 0.0f);
    EXPECT_FLOAT_EQ(l(1, 0), 1.0f);
    EXPECT_FLOAT_EQ(l(1, 1), static_cast<float>(std::sqrt(2.0)));
}

TEST(Cholesky, DampingUsesMeanDiagonal)
{
    const Matrix l = cholesky_spd(Matrix::identity(2), 0.01);
    EXPECT_FLOAT_EQ(l(0, 0), static_cast<float>(std::sqrt(1.01)));
    EXPECT_FLOAT_EQ(l(1, 1), static_cast<float>(std::sqrt(1.01)));
    EXPECT_EQ(l(1, 0), 0.0f);
}

TEST(Cholesky, MatchesReferenceFactor)
{
    const Matrix a = random_spd(11, 12);
    const Matrix l = cholesky_spd(a, 0.05);
    const auto ref = reference_cholesky(a, shift_of(a, 0.05));
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j)
            EXPECT_NEAR(l(i, j), static_cast<double>(ref[i * 12 + j]), 1e-4 * (1.0 + std::fabs(static_cast<double>(ref[i * 12 + j]))));
}

TEST(Cholesky, RoundTripOnThousandSpdMatrices)
{
    for (std::uint64_t seed = 0; seed < 1000; ++seed)
    {
        const std::size_t n = 2 + seed % 9;
        const Matrix a = random_spd(1000 + seed, n);
        const double damping = (seed % 3) * 0.01;
        const Matrix l = cholesky_spd(a, damping);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j)
                ASSERT_EQ(l(i, j), 0.0f);
        Matrix target = a;
        const double shift = shift_of(a, damping);
        for (std::size_t i = 0; i < n; ++i)
            target(i, i) = static_cast<float>(target(i, i) + shift);
        const Matrix llt = matmul_transposed(l, l);
        Matrix diff = llt;
        for (std::size_t i = 0; i < diff.size(); ++i)
            diff.data()[i] -= target.data()[i];
        ASSERT_LE(frobenius_norm(diff) / frobenius_norm(target), 1e-5) << "seed " << seed;
    }
}

TEST(Cholesky, Errors)
{
    EXPECT_THROW(cholesky_spd(Matrix(2, 3), 0.0), std::invalid_argument);
    EXPECT_THROW(cholesky_spd(Matrix::from_rows({{1, 2}, {0, 1}}), 0.0), std::invalid_argument);
    try
    {
        cholesky_spd(Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, -1}}), 0.0);
        FAIL();
    }
    catch (const std::runtime_error &e)
    {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("not positive definite"), std::string::npos);
        EXPECT_NE(msg.find("column 2"), std::string::npos);
    }
}

TEST(InvertSpd, Identity)
{
    EXPECT_EQ(invert_spd(Matrix::identity(4), 0.0), Matrix::identity(4));
}

TEST(InvertSpd, Diagonal)
{
    const Matrix b = invert_spd(Matrix::from_rows({{2, 0}, {0, 4}}), 0.0);
    EXPECT_FLOAT_EQ(b(0, 0), 0.5f);
    EXPECT_FLOAT_EQ(b(1, 1), 0.25f);
    EXPECT_EQ(b(0, 1), 0.0f);
}

TEST(InvertSpd, RandomProductIsIdentity)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed)
    {
        const Matrix a = random_spd(seed, 8);
        const Matrix b = invert_spd(a, 0.0);
        Matrix prod = matmul(a, b);
        for (std::size_t i = 0; i < 8; ++i)
            prod(i, i) -= 1.0f;
        EXPECT_LE(frobenius_norm(prod), 1e-4 * 8);
    }
}

TEST(InvertSpd, DampedMatchesUndampedShifted)
{
    const Matrix a = random_spd(4, 6);
    Matrix shifted = a;
    const double shift = shift_of(a, 0.1);
    for (std::size_t i = 0; i < 6; ++i)
        shifted(i, i) = static_cast<float>(shifted(i, i) + shift);
    EXPECT_LE(test::max_abs_diff(invert_spd(a, 0.1), invert_spd(shifted, 0.0)), 1e-5);
}

TEST(DenseOps, MatmulAgreesWithTransposedForm)
{
    const Matrix a = test::random_matrix(1, 5, 7);
    const Matrix b = test::random_matrix(2, 7, 3);
    EXPECT_LE(test::max_abs_diff(matmul(a, b), matmul_transposed(a, transpose(b))), 1e-6);
    EXPECT_THROW(matmul(a, a), std::invalid_argument);
}

TEST(DenseOps, FrobeniusNorm)
{
    EXPECT_DOUBLE_EQ(frobenius_norm(Matrix::from_rows({{3, 4}})), 5.0);
}

TEST(DenseOps, Deterministic)
{
    const Matrix a = random_spd(77, 9);
    EXPECT_EQ(cholesky_spd(a, 0.01), cholesky_spd(a, 0.01));
    EXPECT_EQ(invert_spd(a, 0.01), invert_spd(a, 0.01));
}

TEST(MatrixType, RejectsWrongDataLength)
{
    EXPECT_THROW(Matrix(2, 2, std::vector<float>(3)), std::invalid_argument);
    EXPECT_THROW(Matrix::from_rows({{1, 2}, {3}}), std::invalid_argument);
}

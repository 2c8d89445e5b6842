#pragma once

#include "mmq/numerics.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace mmq
{

enum class GridScheme
{
    PerTensorMinMax,
    PerGroupMinMax,
};

/// Integer codes plus the asymmetric min/max grids needed to reconstruct a
/// weight matrix.
///
/// Per-group layout: each row is split into ⌈cols/group_size⌉ groups of
/// consecutive input channels and every (row, group) owns one grid; grid
/// index = row·groups_per_row + group. Per-tensor layout stores a single
/// grid and group_size = rows·cols.
///
/// When input_scale is non-empty (activation-aware quantization) the codes
/// describe W·diag(s) and dequantize() divides column j by s_j, so the
/// matrix alone reproduces the effective weights.
struct QuantizedMatrix
{
    std::size_t rows = 0;
    std::size_t cols = 0;
    int bits = 0;
    GridScheme scheme = GridScheme::PerTensorMinMax;
    std::size_t group_size = 0;
    std::vector<std::uint16_t> codes;
    std::vector<float> grid_lo;
    std::vector<float> grid_hi;
    std::vector<float> input_scale;

    std::uint32_t max_code() const noexcept { return (1u << bits) - 1u; }
    std::size_t groups_per_row() const noexcept;
    std::size_t grid_count() const noexcept { return grid_lo.size(); }
    std::size_t grid_index(std::size_t r, std::size_t c) const noexcept;

    /// Throws std::invalid_argument describing the first broken invariant.
    void validate() const;
};

Matrix dequantize(const QuantizedMatrix &q);

/// Per-tensor min/max quantization with round-half-to-even codes.
QuantizedMatrix uniform_quantize(const Matrix &w, int bits);

/// Min/max grids per group of group_size input channels. A group_size that
/// covers the whole matrix (>= rows·cols) degenerates to per-tensor.
QuantizedMatrix rtn_group_quantize(const Matrix &w, int bits, std::size_t group_size);

/// ‖X(W − Ŵ)ᵀ‖_F², accumulated in double.
double proxy_loss(const Matrix &w, const Matrix &w_hat, const Matrix &x);

/// Sufficient statistics of one layer's calibration activations X: the Gram
/// matrix XᵀX and the mean absolute activation per input channel. Both
/// calibrated quantizers only ever need these, so grids build them once per
/// layer and reuse them across bit widths.
struct CalibrationStats
{
    std::size_t features = 0;
    std::size_t samples = 0;
    std::vector<double> gram;
    std::vector<double> mean_abs;

    static CalibrationStats from_activations(const Matrix &x);

    /// ‖X(W − Ŵ)ᵀ‖_F² evaluated as Σ_r e_r·(XᵀX)·e_rᵀ.
    double proxy_loss(const Matrix &w, const Matrix &w_hat) const;
};

struct GptqOptions
{
    std::size_t group_size = 128;
    double damping = 0.01;
    std::size_t block_size = 32;
};

struct GptqResult
{
    QuantizedMatrix quantized;
    double proxy_error = 0.0;
    double damping_used = 0.0;
};

/// Second-order error-compensating quantization. Columns are quantized left
/// to right; each column's rounding error is pushed onto the not yet
/// quantized columns through the upper Cholesky factor of the damped inverse
/// Hessian H = 2·XᵀX.
GptqResult gptq_quantize(const Matrix &w, const Matrix &x, int bits, const GptqOptions &opts = {});
GptqResult gptq_quantize(const Matrix &w, const CalibrationStats &stats, int bits, const GptqOptions &opts = {});

struct AwqOptions
{
    std::size_t group_size = 128;
    /// Exponents searched for s_j = (a_j / geomean(a))^α. Defaults to
    /// {0, 0.05, ..., 1.0}.
    std::vector<double> alpha_grid;
};

struct AwqResult
{
    QuantizedMatrix quantized;
    double chosen_alpha = 0.0;
    double proxy_error = 0.0;
};

std::vector<double> default_alpha_grid();

/// Activation-aware scaling search: picks the per-input-channel scale
/// exponent that minimizes the calibration proxy loss of RTN on W·diag(s).
AwqResult awq_quantize(const Matrix &w, const Matrix &x, int bits, const AwqOptions &opts = {});
AwqResult awq_quantize(const Matrix &w, const CalibrationStats &stats, int bits, const AwqOptions &opts = {});

/// Mean |X_ij| per column j.
std::vector<double> channel_activation_magnitude(const Matrix &x);

/// Round-to-nearest code on a [lo, hi] grid; ties to even, clamped.
std::uint16_t quantize_value(double value, double lo, double hi, std::uint32_t max_code) noexcept;
float dequantize_value(std::uint32_t code, float lo, float hi, std::uint32_t max_code) noexcept;

} // namespace mmq

#include "mmq/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace mmq
{

namespace
{

void check_bits(int bits)
{
    if (bits < 2 || bits > 16)
        throw std::invalid_argument("bit width " + std::to_string(bits) + " outside [2, 16]");
}

void check_finite(const Matrix &w, const char *what)
{
    if (w.empty())
        throw std::invalid_argument(std::string(what) + ": empty matrix");
    if (!w.all_finite())
        throw std::invalid_argument(std::string(what) + ": non-finite weight");
}

std::pair<float, float> min_max(std::span<const float> values)
{
    auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    return {*lo, *hi};
}

} // namespace

std::uint16_t quantize_value(double value, double lo, double hi, std::uint32_t max_code) noexcept
{
    if (!(hi > lo))
        return 0;
    const double t = std::nearbyint((value - lo) / (hi - lo) * static_cast<double>(max_code));
    if (!(t > 0.0))
        return 0;
    if (t >= static_cast<double>(max_code))
        return static_cast<std::uint16_t>(max_code);
    return static_cast<std::uint16_t>(t);
}

float dequantize_value(std::uint32_t code, float lo, float hi, std::uint32_t max_code) noexcept
{
    if (code == 0 || !(hi > lo))
        return lo;
    if (code >= max_code)
        return hi;
    const double span = static_cast<double>(hi) - static_cast<double>(lo);
    return static_cast<float>(span * static_cast<double>(code) / static_cast<double>(max_code) + lo);
}

std::size_t QuantizedMatrix::groups_per_row() const noexcept
{
    if (scheme == GridScheme::PerTensorMinMax || group_size == 0)
        return 1;
    return (cols + group_size - 1) / group_size;
}

std::size_t QuantizedMatrix::grid_index(std::size_t r, std::size_t c) const noexcept
{
    if (scheme == GridScheme::PerTensorMinMax)
        return 0;
    return r * groups_per_row() + c / group_size;
}

void QuantizedMatrix::validate() const
{
    check_bits(bits);
    if (codes.size() != rows * cols)
        throw std::invalid_argument("quantized matrix: code count mismatch");
    const std::size_t expected_grids = scheme == GridScheme::PerTensorMinMax ? 1 : rows * groups_per_row();
    if (scheme == GridScheme::PerGroupMinMax && group_size == 0)
        throw std::invalid_argument("quantized matrix: group_size = 0");
    if (grid_lo.size() != expected_grids || grid_hi.size() != expected_grids)
        throw std::invalid_argument("quantized matrix: expected " + std::to_string(expected_grids) + " grids");
    for (std::size_t g = 0; g < expected_grids; ++g)
        if (!std::isfinite(grid_lo[g]) || !std::isfinite(grid_hi[g]) || grid_lo[g] > grid_hi[g])
            throw std::invalid_argument("quantized matrix: invalid grid " + std::to_string(g));
    const auto top = max_code();
    for (auto c : codes)
        if (c > top)
            throw std::invalid_argument("quantized matrix: code exceeds 2^k - 1");
    if (!input_scale.empty())
    {
        if (input_scale.size() != cols)
            throw std::invalid_argument("quantized matrix: input_scale length != cols");
        for (float s : input_scale)
            if (!(s > 0.0f) || !std::isfinite(s))
                throw std::invalid_argument("quantized matrix: input_scale must be positive");
    }
}

Matrix dequantize(const QuantizedMatrix &q)
{
    q.validate();
    Matrix out(q.rows, q.cols);
    const auto top = q.max_code();
    for (std::size_t r = 0; r < q.rows; ++r)
        for (std::size_t c = 0; c < q.cols; ++c)
        {
            const auto g = q.grid_index(r, c);
            float v = dequantize_value(q.codes[r * q.cols + c], q.grid_lo[g], q.grid_hi[g], top);
            if (!q.input_scale.empty())
                v = static_cast<float>(static_cast<double>(v) / q.input_scale[c]);
            out(r, c) = v;
        }
    return out;
}

QuantizedMatrix uniform_quantize(const Matrix &w, int bits)
{
    check_bits(bits);
    check_finite(w, "uniform_quantize");
    QuantizedMatrix q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.bits = bits;
    q.scheme = GridScheme::PerTensorMinMax;
    q.group_size = w.size();
    const auto [lo, hi] = min_max(w.data());
    q.grid_lo = {lo};
    q.grid_hi = {hi};
    q.codes.resize(w.size());
    const auto top = q.max_code();
    for (std::size_t i = 0; i < w.size(); ++i)
        q.codes[i] = quantize_value(w.data()[i], lo, hi, top);
    return q;
}

QuantizedMatrix rtn_group_quantize(const Matrix &w, int bits, std::size_t group_size)
{
    if (group_size == 0)
        throw std::invalid_argument("rtn_group_quantize: group_size = 0");
    check_bits(bits);
    check_finite(w, "rtn_group_quantize");
    if (group_size >= w.size())
        return uniform_quantize(w, bits);

    QuantizedMatrix q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.bits = bits;
    q.scheme = GridScheme::PerGroupMinMax;
    q.group_size = group_size;
    const std::size_t groups = q.groups_per_row();
    q.grid_lo.resize(q.rows * groups);
    q.grid_hi.resize(q.rows * groups);
    q.codes.resize(w.size());
    const auto top = q.max_code();
    for (std::size_t r = 0; r < q.rows; ++r)
    {
        const auto row = w.row(r);
        for (std::size_t g = 0; g < groups; ++g)
        {
            const std::size_t begin = g * group_size;
            const std::size_t end = std::min(begin + group_size, q.cols);
            const auto [lo, hi] = min_max(row.subspan(begin, end - begin));
            q.grid_lo[r * groups + g] = lo;
            q.grid_hi[r * groups + g] = hi;
            for (std::size_t c = begin; c < end; ++c)
                q.codes[r * q.cols + c] = quantize_value(row[c], lo, hi, top);
        }
    }
    return q;
}

double proxy_loss(const Matrix &w, const Matrix &w_hat, const Matrix &x)
{
    if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols())
        throw std::invalid_argument("proxy_loss: W and W_hat shapes differ");
    if (x.cols() != w.cols())
        throw std::invalid_argument("proxy_loss: X has " + std::to_string(x.cols()) + " features, W has " +
                                    std::to_string(w.cols()) + " input channels");
    std::vector<double> diff(w.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        diff[i] = static_cast<double>(w.data()[i]) - static_cast<double>(w_hat.data()[i]);
    double total = 0.0;
    for (std::size_t s = 0; s < x.rows(); ++s)
    {
        const auto xs = x.row(s);
        for (std::size_t r = 0; r < w.rows(); ++r)
        {
            double acc = 0.0;
            const double *d = diff.data() + r * w.cols();
            for (std::size_t c = 0; c < w.cols(); ++c)
                acc += d[c] * xs[c];
            total += acc * acc;
        }
    }
    return total;
}

std::vector<double> channel_activation_magnitude(const Matrix &x)
{
    std::vector<double> mag(x.cols(), 0.0);
    for (std::size_t s = 0; s < x.rows(); ++s)
        for (std::size_t c = 0; c < x.cols(); ++c)
            mag[c] += std::fabs(static_cast<double>(x(s, c)));
    if (x.rows() > 0)
        for (double &m : mag)
            m /= static_cast<double>(x.rows());
    return mag;
}

// ---------------------------------------------------------------------------
// Calibration statistics

CalibrationStats CalibrationStats::from_activations(const Matrix &x)
{
    CalibrationStats st;
    st.features = x.cols();
    st.samples = x.rows();
    const std::size_t n = x.cols();
    st.gram.assign(n * n, 0.0);
    std::vector<double> row(n);
    for (std::size_t s = 0; s < x.rows(); ++s)
    {
        for (std::size_t c = 0; c < n; ++c)
            row[c] = x(s, c);
        for (std::size_t i = 0; i < n; ++i)
        {
            const double xi = row[i];
            if (xi == 0.0)
                continue;
            double *g = st.gram.data() + i * n;
            for (std::size_t j = i; j < n; ++j)
                g[j] += xi * row[j];
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j)
            st.gram[i * n + j] = st.gram[j * n + i];
    st.mean_abs = channel_activation_magnitude(x);
    return st;
}

double CalibrationStats::proxy_loss(const Matrix &w, const Matrix &w_hat) const
{
    if (w.cols() != features || w_hat.cols() != features || w.rows() != w_hat.rows())
        throw std::invalid_argument("proxy_loss: shape mismatch with calibration statistics");
    const std::size_t n = features;
    std::vector<double> e(n), ge(n);
    double total = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r)
    {
        bool nonzero = false;
        for (std::size_t c = 0; c < n; ++c)
        {
            e[c] = static_cast<double>(w(r, c)) - static_cast<double>(w_hat(r, c));
            nonzero = nonzero || e[c] != 0.0;
        }
        if (!nonzero)
            continue;
        for (std::size_t i = 0; i < n; ++i)
        {
            const double *g = gram.data() + i * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                acc += g[j] * e[j];
            ge[i] = acc;
        }
        double q = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            q += e[i] * ge[i];
        total += q;
    }
    return std::max(total, 0.0);
}

// ---------------------------------------------------------------------------
// GPTQ

namespace
{

// Upper Cholesky factor U of the damped inverse Hessian (Hinv = Uᵀ·U), or
// an empty vector if either factorization fails at this damping.
std::vector<double> inverse_hessian_factor(std::vector<double> h, std::size_t n, double damping)
{
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        trace += h[i * n + i];
    const double shift = damping * trace / static_cast<double>(n);
    if (detail::cholesky_lower_inplace(h, n, shift) >= 0)
        return {};
    auto hinv = detail::inverse_from_cholesky(h, n);
    if (detail::cholesky_lower_inplace(hinv, n, 0.0) >= 0)
        return {};
    std::vector<double> upper(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            upper[j * n + i] = hinv[i * n + j];
    return upper;
}

} // namespace

GptqResult gptq_quantize(const Matrix &w, const Matrix &x, int bits, const GptqOptions &opts)
{
    if (x.rows() == 0)
        throw std::invalid_argument("gptq_quantize: calibration set has no samples");
    if (x.cols() != w.cols())
        throw std::invalid_argument("gptq_quantize: calibration has " + std::to_string(x.cols()) +
                                    " features, weight has " + std::to_string(w.cols()) + " input channels");
    return gptq_quantize(w, CalibrationStats::from_activations(x), bits, opts);
}

GptqResult gptq_quantize(const Matrix &w, const CalibrationStats &stats, int bits, const GptqOptions &opts)
{
    check_bits(bits);
    check_finite(w, "gptq_quantize");
    if (stats.samples == 0)
        throw std::invalid_argument("gptq_quantize: calibration set has no samples");
    if (stats.features != w.cols())
        throw std::invalid_argument("gptq_quantize: dimension mismatch between weight and calibration");
    if (opts.group_size == 0 || opts.block_size == 0)
        throw std::invalid_argument("gptq_quantize: group_size and block_size must be positive");

    const std::size_t rows = w.rows();
    const std::size_t n = w.cols();

    std::vector<double> h(n * n);
    for (std::size_t i = 0; i < n * n; ++i)
        h[i] = 2.0 * stats.gram[i];
    for (std::size_t i = 0; i < n; ++i)
        if (h[i * n + i] == 0.0)
            h[i * n + i] = 1.0; // dead input channel

    GptqResult result;
    result.damping_used = opts.damping;
    auto upper = inverse_hessian_factor(h, n, opts.damping);
    if (upper.empty())
    {
        result.damping_used = opts.damping * 10.0;
        upper = inverse_hessian_factor(h, n, result.damping_used);
        if (upper.empty())
            throw std::runtime_error("gptq_quantize: Hessian not positive definite after damping " +
                                     std::to_string(result.damping_used));
    }

    QuantizedMatrix &q = result.quantized;
    q.rows = rows;
    q.cols = n;
    q.bits = bits;
    const bool per_tensor = opts.group_size >= w.size();
    q.scheme = per_tensor ? GridScheme::PerTensorMinMax : GridScheme::PerGroupMinMax;
    q.group_size = per_tensor ? w.size() : opts.group_size;
    const std::size_t groups = q.groups_per_row();
    q.grid_lo.assign(per_tensor ? 1 : rows * groups, 0.0f);
    q.grid_hi.assign(per_tensor ? 1 : rows * groups, 0.0f);
    q.codes.assign(rows * n, 0);
    const auto top = q.max_code();

    if (per_tensor)
    {
        const auto [lo, hi] = min_max(w.data());
        q.grid_lo[0] = lo;
        q.grid_hi[0] = hi;
    }

    std::vector<double> work(w.size());
    for (std::size_t i = 0; i < w.size(); ++i)
        work[i] = w.data()[i];

    const std::size_t block = opts.block_size;
    std::vector<double> err(rows * block);
    for (std::size_t b0 = 0; b0 < n; b0 += block)
    {
        const std::size_t b1 = std::min(b0 + block, n);
        const std::size_t count = b1 - b0;
        for (std::size_t k = 0; k < count; ++k)
        {
            const std::size_t c = b0 + k;
            if (!per_tensor && c % q.group_size == 0)
            {
                const std::size_t end = std::min(c + q.group_size, n);
                for (std::size_t r = 0; r < rows; ++r)
                {
                    // Grids track the already-compensated weights, as float
                    // storage would see them.
                    float lo = std::numeric_limits<float>::max();
                    float hi = std::numeric_limits<float>::lowest();
                    for (std::size_t cc = c; cc < end; ++cc)
                    {
                        const float v = static_cast<float>(work[r * n + cc]);
                        lo = std::min(lo, v);
                        hi = std::max(hi, v);
                    }
                    q.grid_lo[r * groups + c / q.group_size] = lo;
                    q.grid_hi[r * groups + c / q.group_size] = hi;
                }
            }
            const double d = upper[c * n + c];
            for (std::size_t r = 0; r < rows; ++r)
            {
                const std::size_t g = q.grid_index(r, c);
                const double wv = work[r * n + c];
                const auto code = quantize_value(wv, q.grid_lo[g], q.grid_hi[g], top);
                q.codes[r * n + c] = code;
                const double deq = dequantize_value(code, q.grid_lo[g], q.grid_hi[g], top);
                const double e = (wv - deq) / d;
                err[r * block + k] = e;
                if (e == 0.0)
                    continue;
                double *wr = work.data() + r * n;
                const double *uc = upper.data() + c * n;
                for (std::size_t j = c + 1; j < b1; ++j)
                    wr[j] -= e * uc[j];
            }
        }
        if (b1 < n)
            for (std::size_t r = 0; r < rows; ++r)
            {
                double *wr = work.data() + r * n;
                for (std::size_t k = 0; k < count; ++k)
                {
                    const double e = err[r * block + k];
                    if (e == 0.0)
                        continue;
                    const double *uc = upper.data() + (b0 + k) * n;
                    for (std::size_t j = b1; j < n; ++j)
                        wr[j] -= e * uc[j];
                }
            }
    }

    result.proxy_error = stats.proxy_loss(w, dequantize(q));
    return result;
}

// ---------------------------------------------------------------------------
// AWQ

std::vector<double> default_alpha_grid()
{
    std::vector<double> grid;
    for (int i = 0; i <= 20; ++i)
        grid.push_back(static_cast<double>(i) / 20.0);
    return grid;
}

namespace
{

std::vector<float> awq_scales(std::span<const double> magnitude, double alpha)
{
    double log_sum = 0.0;
    std::size_t positive = 0;
    for (double a : magnitude)
        if (a > 0.0)
        {
            log_sum += std::log(a);
            ++positive;
        }
    std::vector<float> s(magnitude.size(), 1.0f);
    if (positive == 0 || alpha == 0.0)
        return s;
    const double log_geomean = log_sum / static_cast<double>(positive);
    for (std::size_t j = 0; j < magnitude.size(); ++j)
    {
        if (!(magnitude[j] > 0.0))
            continue;
        const double v = std::exp(alpha * (std::log(magnitude[j]) - log_geomean));
        s[j] = static_cast<float>(std::clamp(v, 1e-4, 1e4));
    }
    return s;
}

QuantizedMatrix quantize_scaled(const Matrix &w, std::span<const float> s, int bits, std::size_t group_size)
{
    Matrix scaled(w.rows(), w.cols());
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c)
            scaled(r, c) = static_cast<float>(static_cast<double>(w(r, c)) * s[c]);
    auto q = rtn_group_quantize(scaled, bits, group_size);
    q.input_scale.assign(s.begin(), s.end());
    return q;
}

} // namespace

AwqResult awq_quantize(const Matrix &w, const Matrix &x, int bits, const AwqOptions &opts)
{
    if (x.rows() == 0)
        throw std::invalid_argument("awq_quantize: calibration set has no samples");
    if (x.cols() != w.cols())
        throw std::invalid_argument("awq_quantize: calibration has " + std::to_string(x.cols()) +
                                    " features, weight has " + std::to_string(w.cols()) + " input channels");
    return awq_quantize(w, CalibrationStats::from_activations(x), bits, opts);
}

AwqResult awq_quantize(const Matrix &w, const CalibrationStats &stats, int bits, const AwqOptions &opts)
{
    check_bits(bits);
    check_finite(w, "awq_quantize");
    if (stats.samples == 0)
        throw std::invalid_argument("awq_quantize: calibration set has no samples");
    if (stats.features != w.cols())
        throw std::invalid_argument("awq_quantize: dimension mismatch between weight and calibration");
    const auto grid = opts.alpha_grid.empty() ? default_alpha_grid() : opts.alpha_grid;

    AwqResult best;
    bool have = false;
    for (double alpha : grid)
    {
        QuantizedMatrix q;
        if (alpha == 0.0)
            q = rtn_group_quantize(w, bits, opts.group_size);
        else
            q = quantize_scaled(w, awq_scales(stats.mean_abs, alpha), bits, opts.group_size);
        const double loss = stats.proxy_loss(w, dequantize(q));
        if (!have || loss < best.proxy_error)
        {
            best.quantized = std::move(q);
            best.chosen_alpha = alpha;
            best.proxy_error = loss;
            have = true;
        }
    }
    return best;
}

} // namespace mmq

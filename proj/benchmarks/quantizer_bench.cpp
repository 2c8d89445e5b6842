#include "mmq/quantizers.hpp"

#include <benchmark/benchmark.h>

using namespace mmq;

namespace
{

Matrix random(std::uint64_t seed, std::size_t r, std::size_t c)
{
    RngStream s(seed);
    return randn_matrix(s, r, c, 1.0);
}

void BM_Uniform(benchmark::State &state)
{
    const Matrix w = random(1, state.range(0), state.range(0));
    for (auto _ : state)
        benchmark::DoNotOptimize(uniform_quantize(w, 4));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
}
BENCHMARK(BM_Uniform)->Arg(64)->Arg(256);

void BM_RtnGroup(benchmark::State &state)
{
    const Matrix w = random(2, 256, state.range(0));
    for (auto _ : state)
        benchmark::DoNotOptimize(rtn_group_quantize(w, 4, 128));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.size()));
}
BENCHMARK(BM_RtnGroup)->Arg(256)->Arg(1024);

void BM_Gptq(benchmark::State &state)
{
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix w = random(3, n, n);
    const auto stats = CalibrationStats::from_activations(random(4, 512, n));
    for (auto _ : state)
        benchmark::DoNotOptimize(gptq_quantize(w, stats, 4));
}
BENCHMARK(BM_Gptq)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Awq(benchmark::State &state)
{
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix w = random(5, n, n);
    const auto stats = CalibrationStats::from_activations(random(6, 512, n));
    for (auto _ : state)
        benchmark::DoNotOptimize(awq_quantize(w, stats, 4));
}
BENCHMARK(BM_Awq)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_CalibrationStats(benchmark::State &state)
{
    const Matrix x = random(7, 2048, state.range(0));
    for (auto _ : state)
        benchmark::DoNotOptimize(CalibrationStats::from_activations(x));
}
BENCHMARK(BM_CalibrationStats)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

} // namespace

// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "mmq/experiments.hpp"
#include "mmq/importance.hpp"
#include "mmq/quantizers.hpp"
#include "mmq/report_io.hpp"
#include "mmq/results_csv.hpp"
#include "mmq/svg_plot.hpp"
#include "test_support.hpp"

#ifdef MMQ_HAVE_CLI
#include "commands.hpp"
#endif

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace mmq;

namespace
{

struct Outcome
{
    bool pass = false;
    std::string detail;
};

std::string fmt(const char *f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Matrix skewed(std::uint64_t seed, std::size_t samples, std::size_t features, std::size_t hot, float factor)
{
    Matrix x = test::random_matrix(seed, samples, features);
    for (std::size_t s = 0; s < samples; ++s)
        x(s, hot) *= factor;
    return x;
}

AttributionDataset random_dataset(std::uint64_t seed, std::size_t n, std::size_t features,
                                  const std::function<double(const std::vector<double> &)> &f, double noise)
{
    RngStream rng(seed);
    AttributionDataset d;
    for (std::size_t j = 0; j < features; ++j)
        d.feature_names.push_back("f" + std::to_string(j));
    for (std::size_t i = 0; i < n; ++i)
    {
        std::vector<double> x(features);
        for (auto &v : x)
            v = rng.next_unit();
        d.y.push_back(f(x) + noise * rng.next_normal());
        d.x.push_back(std::move(x));
        d.run_ids.push_back(std::to_string(i));
    }
    return d;
}

AttributionDataset bit_grid(const std::function<double(double, double, double)> &f)
{
    AttributionDataset d;
    d.feature_names = {"vision", "connector", "language"};
    for (int v : {2, 3, 4, 5, 6, 8, 16})
        for (int c : {2, 3, 4, 5, 6, 8, 16})
            for (int l : {2, 3, 4, 5, 6, 8, 16})
            {
                d.x.push_back({double(v), double(c), double(l)});
                d.y.push_back(f(v, c, l));
                d.run_ids.push_back(std::to_string(d.run_ids.size()));
            }
    return d;
}

double task_score(const ModelWeights &q, const SeedContext &ctx, TaskKind task)
{
    if (task == TaskKind::Retrieval)
        return score_retrieval(q, ctx.fp, ctx.eval_probes).score;
    return score_generation(q, ctx.fp, ctx.eval_probes, task).score;
}

const std::vector<std::uint64_t> kSeeds{7, 8, 9};

// ---------------------------------------------------------------------------

Outcome uniform_fidelity()
{
    const auto q = uniform_quantize(Matrix::from_rows({{0.0f, 0.4f, 1.0f}}), 2);
    const bool codes_ok = q.codes == std::vector<std::uint16_t>{0, 1, 3};
    // The bound is checked on the grid value lo + code·step in double; the
    // float-stored reconstruction is also reported with one ulp of slack.
    double worst_exact = 0.0, worst_stored = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
    {
        const Matrix w = test::random_matrix(seed, 32, 32);
        const auto q16 = uniform_quantize(w, 16);
        const double lo = q16.grid_lo[0], hi = q16.grid_hi[0];
        const double bound = (hi - lo) / (2.0 * 65535.0);
        const Matrix d = dequantize(q16);
        for (std::size_t i = 0; i < w.size(); ++i)
        {
            const double wi = w.data()[i];
            const double exact = lo + q16.codes[i] * (hi - lo) / 65535.0;
            worst_exact = std::max(worst_exact, std::abs(wi - exact) / bound);
            const double ulp = std::nextafter(std::abs(d.data()[i]), INFINITY) - std::abs(d.data()[i]);
            worst_stored = std::max(worst_stored, std::abs(wi - d.data()[i]) / (bound + ulp));
        }
    }
    const bool bound_ok = worst_exact <= 1.0 + 1e-9 && worst_stored <= 1.0 + 1e-9;
    return {codes_ok && bound_ok,
            fmt("k=2 codes %s; k=16 over 100 matrices: max error / bound = %.9f on the grid, %.9f for float "
                "storage against bound + 1 ulp",
                codes_ok ? "[0,1,3]" : "WRONG", worst_exact, worst_stored)};
}

Outcome gptq_sandwich()
{
    int oracle_ok = 0, beats_rtn = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed)
    {
        const Matrix w = test::random_matrix(seed, 8, 16);
        const Matrix x = test::random_matrix(50'000 + seed, 32, 16);
        const auto full = gptq_quantize(w, x, 2);
        const double rtn = proxy_loss(w, dequantize(rtn_group_quantize(w, 2, 128)), x);
        beats_rtn += full.proxy_error <= rtn * (1.0 + 1e-9) ? 1 : 0;

        // Exhaustive oracle on the leading 2×2 sub-instance, over GPTQ's grids.
        const Matrix ws = test::submatrix(w, 2, 2);
        Matrix xs(32, 2);
        for (std::size_t s = 0; s < 32; ++s)
            for (std::size_t c = 0; c < 2; ++c)
                xs(s, c) = x(s, c);
        const auto sub = gptq_quantize(ws, xs, 2);
        const double optimum = test::brute_force_proxy(ws, xs, sub.quantized);
        oracle_ok += optimum <= sub.proxy_error * (1.0 + 1e-9) + 1e-12 ? 1 : 0;
    }
    return {oracle_ok == 100 && beats_rtn >= 95,
            fmt("brute force <= GPTQ on %d/100 2x2 sub-instances; GPTQ <= RTN on %d/100 8x16 instances (k=2)",
                oracle_ok, beats_rtn)};
}

Outcome awq_benefit()
{
    std::string detail;
    bool pass = true;
    for (int k : {2, 3, 4})
    {
        int wins = 0;
        for (std::uint64_t seed = 0; seed < 100; ++seed)
        {
            const Matrix w = test::random_matrix(seed, 8, 16);
            const Matrix x = skewed(70'000 + seed, 32, 16, seed % 16, 100.0f);
            const auto res = awq_quantize(w, x, k);
            const double rtn = proxy_loss(w, dequantize(rtn_group_quantize(w, k, 128)), x);
            wins += res.proxy_error < rtn ? 1 : 0;
        }
        pass = pass && wins >= 95;
        detail += fmt("k=%d wins %d/100; ", k, wins);
    }
    int exact = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed)
    {
        const Matrix w = test::random_matrix(900 + seed, 8, 32);
        const Matrix x = skewed(950 + seed, 64, 32, seed % 32, 100.0f);
        AwqOptions zero;
        zero.alpha_grid = {0.0};
        zero.group_size = 16;
        const auto res = awq_quantize(w, x, 3, zero);
        const auto rtn = rtn_group_quantize(w, 3, 16);
        exact += res.quantized.codes == rtn.codes && dequantize(res.quantized) == dequantize(rtn) ? 1 : 0;
    }
    pass = pass && exact == 20;
    detail += fmt("alpha=0 bit-exact with RTN on %d/20", exact);
    return {pass, detail};
}

Outcome degradation_monotonicity()
{
    const std::vector<int> bits{2, 3, 4, 5, 6, 8, 16};
    const std::vector<double> bits_d(bits.begin(), bits.end());
    const std::vector<TaskKind> tasks{TaskKind::Retrieval, TaskKind::Caption, TaskKind::VQA};
    std::vector<double> rho_sum(tasks.size(), 0.0);
    GridSpec grid;
    for (auto seed : kSeeds)
    {
        const auto ctx = prepare_seed(PipelineSpec{}, grid, seed, false);
        std::vector<std::vector<double>> scores(tasks.size());
        for (int k : bits)
        {
            QuantizeOptions o;
            o.bits = k;
            const auto q = apply_quantization(ctx.fp, Selector::all(), o);
            for (std::size_t t = 0; t < tasks.size(); ++t)
                scores[t].push_back(task_score(q.weights, ctx, tasks[t]));
        }
        for (std::size_t t = 0; t < tasks.size(); ++t)
            rho_sum[t] += spearman(bits_d, scores[t]);
    }
    bool pass = true;
    std::string detail = "mean Spearman rho over 3 seeds:";
    for (std::size_t t = 0; t < tasks.size(); ++t)
    {
        const double rho = rho_sum[t] / static_cast<double>(kSeeds.size());
        pass = pass && rho >= 0.8;
        detail += fmt(" %s %.3f", std::string(to_string(tasks[t])).c_str(), rho);
    }
    return {pass, detail};
}

Outcome sota_beats_uniform()
{
    const std::vector<TaskKind> tasks{TaskKind::Caption, TaskKind::VQA};
    const std::vector<QuantMethod> methods{QuantMethod::Uniform, QuantMethod::GPTQ, QuantMethod::AWQ};
    std::vector<std::vector<double>> mean(methods.size(), std::vector<double>(tasks.size(), 0.0));
    GridSpec grid;
    for (auto seed : kSeeds)
    {
        const auto ctx = prepare_seed(PipelineSpec{}, grid, seed, true);
        for (std::size_t m = 0; m < methods.size(); ++m)
        {
            QuantizeOptions o;
            o.method = methods[m];
            o.bits = 4;
            const auto q = apply_quantization(ctx.fp, Selector::all(), o, &*ctx.calibration);
            for (std::size_t t = 0; t < tasks.size(); ++t)
                mean[m][t] += task_score(q.weights, ctx, tasks[t]) / static_cast<double>(kSeeds.size());
        }
    }
    bool pass = true;
    std::string detail = "4-bit mean fidelity (uniform / gptq / awq):";
    for (std::size_t t = 0; t < tasks.size(); ++t)
    {
        pass = pass && mean[1][t] >= mean[0][t] && mean[2][t] >= mean[0][t];
        detail += fmt(" %s %.4f / %.4f / %.4f", std::string(to_string(tasks[t])).c_str(), mean[0][t], mean[1][t],
                      mean[2][t]);
    }
    return {pass, detail};
}

Outcome shapley_exactness()
{
    double worst_eff = 0.0, worst_null = 0.0;
    for (std::uint64_t s = 0; s < 50; ++s)
    {
        const std::size_t F = 2 + s % 5;
        auto d = random_dataset(1000 + s, 30, F, [&](const auto &x) {
            double v = 0.0;
            for (std::size_t j = 0; j + 1 < F; ++j)
                v += std::sin(2.0 * x[j] * static_cast<double>(j + 1)) * (j % 2 ? x[0] : 1.0);
            return v;
        }, 0.2);
        for (auto &row : d.x)
            row.back() = 0.5; // dummy feature, never split on
        ForestOptions o;
        o.n_trees = 20;
        o.seed = s;
        const auto f = fit_random_forest(d, o);
        const auto phi = shapley_values(f, d);
        const auto pred = f.predict_all(d.x);
        const double base = std::accumulate(pred.begin(), pred.end(), 0.0) / static_cast<double>(pred.size());
        for (std::size_t i = 0; i < d.rows(); ++i)
        {
            const double total = std::accumulate(phi[i].begin(), phi[i].end(), 0.0);
            worst_eff = std::max(worst_eff, std::abs(total - (pred[i] - base)));
            worst_null = std::max(worst_null, std::abs(phi[i].back()));
        }
    }
    return {worst_eff <= 1e-9 && worst_null <= 1e-9,
            fmt("50 forests: max efficiency gap %.2e, max |phi_dummy| %.2e", worst_eff, worst_null)};
}

Outcome planted_signal()
{
    const auto d = random_dataset(4242, 150, 3, [](const auto &x) { return 3.0 * x[0]; }, 0.1);
    ForestOptions o;
    o.seed = 1;
    const auto forest = fit_random_forest(d, o);
    const auto imp = bootstrap_importance_ci(d, 100, o);
    const auto perm = permutation_importance(forest, d, 50, 1);
    const auto shap = shapley_importance(forest, d, 1);
    const double s_imp = imp.features[0].pct, s_perm = perm.features[0].pct, s_shap = shap.features[0].pct;
    const bool separated =
        imp.features[0].ci_low > imp.features[1].ci_high && imp.features[0].ci_low > imp.features[2].ci_high;
    const bool pass = s_imp >= 95.0 && s_perm >= 95.0 && s_shap >= 95.0 && separated;
    return {pass, fmt("signal share impurity %.2f%%, permutation %.2f%%, shapley %.2f%%; bootstrap CI "
                      "[%.4g, %.4g] vs noise max %.4g",
                      s_imp, s_perm, s_shap, imp.features[0].ci_low, imp.features[0].ci_high,
                      std::max(imp.features[1].ci_high, imp.features[2].ci_high))};
}

bool consensus_row_ok(const std::string &row, std::string &why)
{
    std::vector<std::string> cells;
    std::stringstream ss(row);
    std::string cell;
    while (std::getline(ss, cell, ','))
        cells.push_back(cell);
    if (cells.size() != 6)
    {
        why = "column count " + std::to_string(cells.size());
        return false;
    }
    double sum = 0.0;
    for (std::size_t i = 3; i < 6; ++i)
    {
        if (cells[i] == "--")
            continue;
        const auto dot = cells[i].find('.');
        if (dot == std::string::npos || cells[i].size() - dot - 1 != 2)
        {
            why = "cell '" + cells[i] + "' is not two-decimal";
            return false;
        }
        sum += std::stod(cells[i]);
    }
    if (std::abs(sum - 100.0) > 0.01)
    {
        why = fmt("sum %.4f", sum);
        return false;
    }
    return true;
}

Outcome consensus_contract()
{
    std::vector<std::vector<std::string>> rankings;
    std::vector<std::vector<double>> pcts;
    std::vector<AnalysisReport> reports;
    std::string why;
    bool rows_ok = true;
    for (auto seed : kSeeds)
    {
        GridSpec grid;
        grid.tasks = {TaskKind::Caption};
        grid.seeds = {seed};
        grid.eval_probes = 16;
        const auto table = run_sota_grid(PipelineSpec{}, grid, {QuantMethod::GPTQ});
        if (!table.failures.empty())
            return {false, fmt("seed %llu: %zu failed cells", static_cast<unsigned long long>(seed),
                               table.failures.size())};
        const auto data = dataset_from_results(table.rows, TaskKind::Caption, QuantMethod::GPTQ);
        auto report = analyze(data);
        report.model = "toy";
        report.method = "gptq";
        report.task = TaskKind::Caption;
        rows_ok = rows_ok && consensus_row_ok(consensus_csv_row(report), why);
        rankings.push_back(report.consensus.ranking());
        std::vector<double> p;
        for (const auto &f : report.consensus.features)
            p.push_back(f.pct);
        pcts.push_back(p);
        reports.push_back(std::move(report));
    }
    const std::string csv = consensus_csv(reports);
    const bool header_ok = csv.rfind("Model,Method,Task,Vision,Connector,Language\n", 0) == 0;
    bool stable = true;
    double min_tau = 1.0;
    for (std::size_t s = 1; s < rankings.size(); ++s)
    {
        stable = stable && rankings[s] == rankings[0];
        min_tau = std::min(min_tau, kendall_tau(pcts[0], pcts[s]));
    }
    std::string rows_text;
    for (const auto &r : reports)
        rows_text += " | " + consensus_csv_row(r);
    return {rows_ok && header_ok && stable,
            fmt("rows %s, header %s, ranking %s across 3 seeds (min Kendall tau %.2f)", rows_ok ? "sum to 100" : why.c_str(),
                header_ok ? "ok" : "WRONG", stable ? "identical" : "DIFFERS", min_tau) +
                rows_text};
}

Outcome linear_baseline_motivation()
{
    const auto d = bit_grid([](double v, double, double l) { return (l >= 4 && v >= 3) ? 1.0 : 0.0; });
    const auto forest = fit_random_forest(d);
    const double forest_r2 = r_squared(d.y, forest.predict_all(d.x));
    const double linear_r2 = linear_baseline_r2(d);
    return {forest_r2 - linear_r2 >= 0.15,
            fmt("cliff dataset: forest R2 %.4f, OLS R2 %.4f, gap %.4f", forest_r2, linear_r2, forest_r2 - linear_r2)};
}

PipelineSpec tiny_spec()
{
    PipelineSpec s;
    s.d_model = 32;
    s.heads = 2;
    s.vision_blocks = 3;
    s.connector_blocks = 3;
    s.language_blocks = 3;
    s.patch_count = 8;
    s.patch_dim = 16;
    s.vocab = 64;
    s.num_queries = 4;
    s.max_positions = 32;
    return s;
}

#ifdef MMQ_HAVE_CLI
int cli_call(std::vector<std::string> args)
{
    args.insert(args.begin(), "mmq");
    std::ostringstream out, err;
    return cli::run(args, out, err);
}
#endif

Outcome reproducibility()
{
    std::vector<std::string> mismatched;
    // Library: a uniform grid and a calibrated grid, run twice.
    GridSpec grid;
    grid.bits = {2, 4};
    grid.sota_bits = {3};
    grid.tasks = {TaskKind::Caption, TaskKind::VQA};
    grid.eval_probes = 4;
    grid.calibration_probes = 4;
    const auto u1 = results_to_csv(run_uniform_grid(tiny_spec(), grid).rows);
    grid.workers = 2;
    const auto u2 = results_to_csv(run_uniform_grid(tiny_spec(), grid).rows);
    if (u1 != u2)
        mismatched.push_back("uniform grid CSV");
    const auto s1 = results_to_csv(run_sota_grid(tiny_spec(), grid, {QuantMethod::GPTQ, QuantMethod::AWQ}).rows);
    const auto s2 = results_to_csv(run_sota_grid(tiny_spec(), grid, {QuantMethod::GPTQ, QuantMethod::AWQ}).rows);
    if (s1 != s2)
        mismatched.push_back("calibrated grid CSV");
    const auto rows = results_from_csv(u1);
    if (render_tradeoff_svg(rows, TaskKind::Caption) != render_tradeoff_svg(rows, TaskKind::Caption))
        mismatched.push_back("SVG");
    const auto data = dataset_from_results(rows, TaskKind::Caption);
    AnalysisOptions ao;
    ao.n_boot = 10;
    ao.n_repeats = 10;
    if (analysis_to_json(analyze(data, ao)) != analysis_to_json(analyze(data, ao)))
        mismatched.push_back("analysis JSON");
    std::size_t files = 4;

#ifdef MMQ_HAVE_CLI
    // CLI: every command twice into separate files.
    test::TempDir dir("acceptance-repro");
    test::write_file(dir / "c.json", R"({"pipeline": {"d_model": 32, "heads": 2, "vision_blocks": 3,
      "connector_blocks": 3, "language_blocks": 3, "patch_count": 8, "patch_dim": 16, "vocab": 64,
      "num_queries": 4, "max_positions": 32},
      "grid": {"bits": [2, 4], "sota_bits": [2, 3], "tasks": ["vqa"]},
      "probes": {"eval": 4, "calibration": 4}})");
    const auto cfg = (dir / "c.json").string();
    for (const char *run : {"a", "b"})
    {
        const std::string p = (dir / run).string();
        if (cli_call({"grid", "--config", cfg, "--out", p + ".csv"}) != 0 ||
            cli_call({"grid", "--config", cfg, "--method", "gptq", "--out", p + ".gptq.csv"}) != 0 ||
            cli_call({"analyze", p + ".gptq.csv", "--task", "vqa", "--out", p + ".json", "--consensus-csv",
                      p + ".consensus.csv", "--boot", "10", "--repeats", "10"}) != 0 ||
            cli_call({"plot", p + ".csv", "--task", "vqa", "--out", p + ".svg"}) != 0)
            return {false, "a CLI command exited nonzero"};
    }
    for (const char *suffix :
         {".csv", ".csv.manifest.json", ".gptq.csv", ".gptq.csv.manifest.json", ".json", ".consensus.csv", ".svg"})
    {
        ++files;
        if (test::read_file(dir / (std::string("a") + suffix)) != test::read_file(dir / (std::string("b") + suffix)))
            mismatched.push_back(std::string("cli output *") + suffix);
    }
#endif
    std::string detail = fmt("%zu outputs compared byte-for-byte", files);
    for (const auto &m : mismatched)
        detail += "; differs: " + m;
    return {mismatched.empty(), detail};
}

Outcome bpw_accounting()
{
    PipelineSpec spec;
    spec.d_model = 128;
    const auto w = build_model(spec);
    QuantizeOptions o;
    o.method = QuantMethod::RTN;
    o.bits = 4;
    o.group_size = 128;
    const auto q = apply_quantization(w, Selector::all(), o);
    const double bpw = compute_bpw(q.ledger, q.weights);
    const double base = compute_bpw({}, w);
    return {std::abs(bpw - 4.25) <= 1e-6 && base == 16.0,
            fmt("d_model 128, k=4, group 128: bpw %.9f; unquantized %.9f", bpw, base)};
}

} // namespace

int main()
{
    struct Criterion
    {
        int id;
        const char *name;
        Outcome (*run)();
        double budget_s; // 0: no runtime budget
    };
    const Criterion criteria[] = {
        {1, "uniform quantizer fidelity", uniform_fidelity, 1.0},
        {2, "GPTQ sandwich", gptq_sandwich, 60.0},
        {3, "AWQ benefit", awq_benefit, 60.0},
        {4, "degradation monotonicity", degradation_monotonicity, 600.0},
        {5, "calibrated methods beat uniform at 4 bits", sota_beats_uniform, 0.0},
        {6, "Shapley exactness", shapley_exactness, 60.0},
        {7, "planted signal recovery", planted_signal, 0.0},
        {8, "consensus contract", consensus_contract, 0.0},
        {9, "linear baseline motivation", linear_baseline_motivation, 0.0},
        {10, "reproducibility", reproducibility, 0.0},
        {11, "bpw accounting", bpw_accounting, 0.0},
    };
    int failed = 0;
    for (const auto &c : criteria)
    {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try
        {
            o = c.run();
        }
        catch (const std::exception &e)
        {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (c.budget_s > 0 && secs > c.budget_s)
        {
            o.pass = false;
            o.detail += fmt("; over the %.0f s budget", c.budget_s);
        }
        failed += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << c.id << " (" << c.name << "): " << o.detail
                  << fmt(" [%.2f s]", secs) << std::endl;
    }
    std::cout << (failed ? "FAILED " : "ALL PASSED ") << (11 - failed) << "/11" << std::endl;
    return failed ? 1 : 0;
}

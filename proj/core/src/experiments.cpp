#include "mmq/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace mmq
{

int RunRecord::bits(ComponentId c) const noexcept
{
    switch (c)
    {
    case ComponentId::Vision: return vision_bits;
    case ComponentId::Connector: return connector_bits;
    case ComponentId::Language: return language_bits;
    }
    return 16;
}

std::size_t RunRecord::quantized_component_count() const noexcept
{
    return static_cast<std::size_t>(vision_bits < 16) + static_cast<std::size_t>(connector_bits < 16) +
           static_cast<std::size_t>(language_bits < 16);
}

bool RunRecord::is_full_pipeline_star() const noexcept
{
    const bool same = vision_bits == connector_bits && connector_bits == language_bits;
    const bool star_bits = vision_bits == 8 || vision_bits == 16;
    if (!same || !star_bits)
        return false;
    if (vision_bits == 16)
        return true;
    return groups.size() == 3 && layer_types.size() == 2;
}

void ResultsTable::sort_by_run_id()
{
    std::sort(rows.begin(), rows.end(), [](const RunRecord &a, const RunRecord &b) { return a.run_id < b.run_id; });
    std::sort(failures.begin(), failures.end(),
              [](const CellFailure &a, const CellFailure &b) { return a.run_id < b.run_id; });
}

std::vector<RunRecord> ResultsTable::for_task(TaskKind task) const
{
    std::vector<RunRecord> out;
    for (const auto &r : rows)
        if (r.task == task)
            out.push_back(r);
    return out;
}

void GridSpec::validate() const
{
    auto check_bits = [](const std::vector<int> &bs, const char *what) {
        for (int b : bs)
            if (b < 2 || b > 16)
                throw std::invalid_argument(std::string(what) + ": bit width " + std::to_string(b) +
                                            " outside [2, 16]");
    };
    check_bits(bits, "bits");
    check_bits(sota_bits, "sota_bits");
    if (tasks.empty())
        throw std::invalid_argument("grid needs at least one task");
    if (seeds.empty())
        throw std::invalid_argument("grid needs at least one seed");
    if (group_size == 0)
        throw std::invalid_argument("group_size must be >= 1");
    if (eval_probes < 2)
        throw std::invalid_argument("eval_probes must be >= 2");
    if (calibration_probes == 0)
        throw std::invalid_argument("calibration_probes must be >= 1");
    if (uniform_method != QuantMethod::Uniform && uniform_method != QuantMethod::RTN)
        throw std::invalid_argument("uniform grid method must be uniform or rtn");
}

std::vector<ComponentId> present_components(const PipelineSpec &spec)
{
    std::vector<ComponentId> out;
    for (auto c : kAllComponents)
        if (spec.blocks(c) > 0)
            out.push_back(c);
    return out;
}

std::vector<ComponentId> sota_components(const PipelineSpec &spec)
{
    std::vector<ComponentId> out;
    for (auto c : present_components(spec))
        if (c != ComponentId::Connector || spec.connector_kind == ConnectorKind::QueryCrossAttention)
            out.push_back(c);
    return out;
}

PipelineSpec spec_for_seed(const PipelineSpec &base, std::uint64_t seed)
{
    PipelineSpec s = base;
    s.seed = seed;
    return s;
}

std::uint64_t eval_probe_seed(std::uint64_t seed) noexcept
{
    return mix64(seed ^ fnv1a64("eval-probes"));
}

std::uint64_t calibration_probe_seed(std::uint64_t seed) noexcept
{
    return mix64(seed ^ fnv1a64("calibration-probes"));
}

SeedContext prepare_seed(const PipelineSpec &base, const GridSpec &grid, std::uint64_t seed, bool with_calibration)
{
    SeedContext ctx;
    ctx.seed = seed;
    const PipelineSpec spec = spec_for_seed(base, seed);
    ctx.fp = build_model(spec);
    const auto shape = ProbeShape::from_spec(spec);
    ctx.eval_probes = make_probe_set(eval_probe_seed(seed), grid.eval_probes, shape);
    if (with_calibration)
    {
        ctx.calibration_probes = make_probe_set(calibration_probe_seed(seed), grid.calibration_probes, shape);
        ctx.calibration = collect_calibration(ctx.fp, *ctx.calibration_probes, grid.calibration_probes);
    }
    return ctx;
}

double compute_bpw(const QuantizationLedger &ledger, const ModelWeights &weights)
{
    const std::size_t n_layers = weights.layer_count();
    std::vector<const LedgerEntry *> by_layer(n_layers, nullptr);
    for (const auto &e : ledger.entries)
    {
        if (e.layer_index >= n_layers || weights.layers()[e.layer_index].name() != e.layer)
            throw std::invalid_argument("ledger references unknown layer '" + e.layer + "'");
        if (by_layer[e.layer_index])
            throw std::invalid_argument("ledger lists layer '" + e.layer + "' twice");
        by_layer[e.layer_index] = &e;
    }
    double bits = 0.0;
    double params = 0.0;
    for (std::size_t i = 0; i < n_layers; ++i)
    {
        const double n = static_cast<double>(weights.linear(i).size());
        params += n;
        if (by_layer[i])
            bits += static_cast<double>(by_layer[i]->code_bits()) + static_cast<double>(by_layer[i]->overhead_bits());
        else
            bits += 16.0 * n;
    }
    return params > 0.0 ? bits / params : 16.0;
}

namespace
{

template <class Set>
std::string join_set(const Set &s)
{
    if (s.empty())
        return "none";
    std::string out;
    for (auto v : s)
    {
        if (!out.empty())
            out += '+';
        out += to_string(v);
    }
    return out;
}

std::string spec_key(const PipelineSpec &s)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, "d%zu/v%zu/c%zu/l%zu/h%zu/f%zu/p%zux%zu/V%zu/q%zu/m%zu/%s", s.d_model,
                  s.vision_blocks, s.connector_blocks, s.language_blocks, s.heads, s.ffn_mult, s.patch_count,
                  s.patch_dim, s.vocab, s.num_queries, s.max_positions, std::string(to_string(s.connector_kind)).c_str());
    return buf;
}

} // namespace

std::string make_run_id(const PipelineSpec &spec, const GridSpec &grid, const RunRecord &cell)
{
    const bool calibrated = cell.method == QuantMethod::GPTQ || cell.method == QuantMethod::AWQ;
    std::string key = spec_key(spec);
    key += ";method=" + std::string(to_string(cell.method));
    key += ";task=" + std::string(to_string(cell.task));
    key += ";bits=" + std::to_string(cell.vision_bits) + "," + std::to_string(cell.connector_bits) + "," +
           std::to_string(cell.language_bits);
    key += ";groups=" + join_set(cell.groups) + ";types=" + join_set(cell.layer_types);
    key += ";gs=" + std::to_string(cell.group_size);
    key += ";eval=" + std::to_string(grid.eval_probes);
    if (calibrated)
        key += ";calib=" + std::to_string(grid.calibration_probes);
    key += ";seed=" + std::to_string(cell.seed);
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(key)));
    return hex;
}

std::vector<std::optional<std::string>> parallel_for(std::size_t n, std::size_t workers,
                                                     const std::function<void(std::size_t)> &fn,
                                                     const ProgressFn &progress)
{
    std::vector<std::optional<std::string>> errors(n);
    std::atomic<std::size_t> next{0};
    std::size_t done = 0;
    std::mutex progress_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++)
        {
            try
            {
                fn(i);
            }
            catch (const std::exception &e)
            {
                errors[i] = e.what();
            }
            if (progress)
            {
                std::lock_guard lock(progress_mutex);
                progress(++done, n);
            }
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(workers, 1), n);
    if (threads <= 1)
    {
        worker();
        return errors;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back(worker);
    for (auto &t : pool)
        t.join();
    return errors;
}

namespace
{

using Clock = std::chrono::steady_clock;

std::uint64_t elapsed_ms(Clock::time_point start)
{
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count());
}

std::vector<TaskOutputs> references(const SeedContext &ctx, const GridSpec &grid)
{
    const auto prefixes = compute_prefixes(ctx.fp, ctx.eval_probes);
    std::vector<TaskOutputs> refs;
    for (auto t : grid.tasks)
        refs.push_back(run_task(ctx.fp, ctx.eval_probes, t, 0, &prefixes));
    return refs;
}

RunRecord baseline_row(QuantMethod method, TaskKind task, std::uint64_t seed)
{
    RunRecord r;
    r.method = method;
    r.task = task;
    r.seed = seed;
    r.bpw = 16.0;
    r.score = 1.0;
    return r;
}

struct CellResult
{
    std::vector<RunRecord> rows;
    std::vector<CellFailure> failures;
};

void merge(ResultsTable &table, std::vector<CellResult> &cells)
{
    for (auto &c : cells)
    {
        std::move(c.rows.begin(), c.rows.end(), std::back_inserter(table.rows));
        std::move(c.failures.begin(), c.failures.end(), std::back_inserter(table.failures));
    }
}

std::string describe(const RunRecord &r)
{
    return std::string(to_string(r.method)) + " " + std::string(to_string(r.task)) + " bits=" +
           std::to_string(r.vision_bits) + "/" + std::to_string(r.connector_bits) + "/" +
           std::to_string(r.language_bits) + " groups=" + join_set(r.groups) + " types=" + join_set(r.layer_types) +
           " seed=" + std::to_string(r.seed);
}

} // namespace

ResultsTable run_uniform_grid(const PipelineSpec &spec, const GridSpec &grid, const ProgressFn &progress)
{
    spec.validate();
    grid.validate();
    const auto components = grid.component_subsets.empty() ? nonempty_subsets(present_components(spec))
                                                           : grid.component_subsets;
    const auto groups = grid.group_subsets.empty()
                            ? nonempty_subsets(std::vector<BlockGroup>(kAllGroups, kAllGroups + 3))
                            : grid.group_subsets;
    const auto types = grid.layer_type_subsets.empty()
                           ? nonempty_subsets(std::vector<LayerType>(kAllLayerTypes, kAllLayerTypes + 2))
                           : grid.layer_type_subsets;
    const bool grouped = grid.uniform_method == QuantMethod::RTN;

    ResultsTable table;
    for (auto seed : grid.seeds)
    {
        const SeedContext ctx = prepare_seed(spec, grid, seed, false);
        const PipelineSpec seeded = ctx.fp.spec();
        const auto refs = references(ctx, grid);

        struct Cell
        {
            int k;
            Selector sel;
        };
        std::vector<Cell> cells;
        for (int k : grid.bits)
            for (const auto &c : components)
                for (const auto &b : groups)
                    for (const auto &m : types)
                    {
                        Selector sel{c, b, m};
                        if (!select_layer_indices(ctx.fp, sel).empty())
                            cells.push_back({k, std::move(sel)});
                    }

        for (auto t : grid.tasks)
        {
            RunRecord base = baseline_row(grid.uniform_method, t, seed);
            base.run_id = make_run_id(seeded, grid, base);
            table.rows.push_back(std::move(base));
        }

        std::vector<CellResult> results(cells.size());
        auto run_cell = [&](std::size_t i) {
            const auto start = Clock::now();
            const Cell &cell = cells[i];
            std::vector<RunRecord> rows;
            for (std::size_t t = 0; t < grid.tasks.size(); ++t)
            {
                RunRecord r;
                r.method = grid.uniform_method;
                r.task = grid.tasks[t];
                r.vision_bits = cell.sel.components.contains(ComponentId::Vision) ? cell.k : 16;
                r.connector_bits = cell.sel.components.contains(ComponentId::Connector) ? cell.k : 16;
                r.language_bits = cell.sel.components.contains(ComponentId::Language) ? cell.k : 16;
                r.groups = cell.sel.groups;
                r.layer_types = cell.sel.layer_types;
                r.group_size = grouped ? grid.group_size : 0;
                r.seed = seed;
                r.run_id = make_run_id(seeded, grid, r);
                rows.push_back(std::move(r));
            }
            try
            {
                QuantizeOptions opts;
                opts.method = grid.uniform_method;
                opts.bits = cell.k;
                opts.group_size = grid.group_size;
                const auto q = apply_quantization(ctx.fp, cell.sel, opts);
                const double bpw = compute_bpw(q.ledger, q.weights);
                const auto prefixes = compute_prefixes(q.weights, ctx.eval_probes);
                for (std::size_t t = 0; t < grid.tasks.size(); ++t)
                {
                    rows[t].bpw = bpw;
                    rows[t].score =
                        score_outputs(run_task(q.weights, ctx.eval_probes, grid.tasks[t], 0, &prefixes), refs[t]).score;
                }
                const std::uint64_t ms = grid.record_wall_time ? elapsed_ms(start) : 0;
                for (auto &r : rows)
                    r.wall_ms = ms;
                results[i].rows = std::move(rows);
            }
            catch (const std::exception &e)
            {
                for (const auto &r : rows)
                    results[i].failures.push_back({r.run_id, describe(r), e.what()});
            }
        };
        parallel_for(cells.size(), grid.workers, run_cell, progress);
        merge(table, results);
    }
    table.sort_by_run_id();
    return table;
}

ResultsTable run_sota_grid(const PipelineSpec &spec, const GridSpec &grid, const std::vector<QuantMethod> &methods,
                           const ProgressFn &progress)
{
    spec.validate();
    grid.validate();
    for (auto m : methods)
        if (m != QuantMethod::GPTQ && m != QuantMethod::AWQ && m != QuantMethod::RTN)
            throw std::invalid_argument("sota grid methods must be gptq, awq or rtn");
    const auto comps = sota_components(spec);
    std::vector<int> levels = grid.sota_bits;
    levels.push_back(16);
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

    // Every combination of per-component levels, first component slowest.
    std::vector<std::map<ComponentId, int>> combos{{}};
    for (auto c : comps)
    {
        std::vector<std::map<ComponentId, int>> next;
        for (const auto &partial : combos)
            for (int k : levels)
            {
                auto m = partial;
                m[c] = k;
                next.push_back(std::move(m));
            }
        combos = std::move(next);
    }

    ResultsTable table;
    for (auto seed : grid.seeds)
    {
        const SeedContext ctx = prepare_seed(spec, grid, seed, true);
        const PipelineSpec seeded = ctx.fp.spec();
        const auto refs = references(ctx, grid);
        const auto fp_prefixes = compute_prefixes(ctx.fp, ctx.eval_probes);

        for (auto method : methods)
        {
            // Phase 1: quantize each (component, k) once.
            struct CompJob
            {
                ComponentId c;
                int k;
            };
            std::vector<CompJob> jobs;
            for (auto c : comps)
                for (int k : levels)
                    if (k < 16)
                        jobs.push_back({c, k});
            std::vector<QuantizedModel> quantized(jobs.size());
            auto quant_errors = parallel_for(jobs.size(), grid.workers, [&](std::size_t i) {
                QuantizeOptions opts;
                opts.method = method;
                opts.bits = jobs[i].k;
                opts.group_size = grid.group_size;
                quantized[i] = apply_quantization(ctx.fp, Selector::component(jobs[i].c), opts, &*ctx.calibration);
            });
            auto job_index = [&](ComponentId c, int k) -> std::optional<std::size_t> {
                for (std::size_t i = 0; i < jobs.size(); ++i)
                    if (jobs[i].c == c && jobs[i].k == k)
                        return i;
                return std::nullopt;
            };
            auto assemble = [&](const std::map<ComponentId, int> &bits, ModelWeights &w, QuantizationLedger &ledger,
                                std::string &error) {
                for (const auto &[c, k] : bits)
                {
                    const auto j = job_index(c, k);
                    if (!j)
                        continue;
                    if (quant_errors[*j])
                    {
                        error = *quant_errors[*j];
                        return false;
                    }
                    for (const auto &e : quantized[*j].ledger.entries)
                        w.replace_layer(e.layer_index, quantized[*j].weights.linear_ptr(e.layer_index));
                    ledger.append(quantized[*j].ledger);
                }
                return true;
            };

            // Phase 2: visual prefixes per (vision, connector) assignment.
            std::vector<std::map<ComponentId, int>> prefix_keys;
            for (const auto &combo : combos)
            {
                std::map<ComponentId, int> key;
                for (const auto &[c, k] : combo)
                    if (c != ComponentId::Language)
                        key[c] = k;
                if (std::find(prefix_keys.begin(), prefix_keys.end(), key) == prefix_keys.end())
                    prefix_keys.push_back(std::move(key));
            }
            std::vector<std::vector<Matrix>> prefixes(prefix_keys.size());
            parallel_for(prefix_keys.size(), grid.workers, [&](std::size_t i) {
                bool all_fp = true;
                for (const auto &[c, k] : prefix_keys[i])
                    all_fp = all_fp && k == 16;
                if (all_fp)
                {
                    prefixes[i] = fp_prefixes;
                    return;
                }
                ModelWeights w = ctx.fp;
                QuantizationLedger ledger;
                std::string error;
                if (assemble(prefix_keys[i], w, ledger, error))
                    prefixes[i] = compute_prefixes(w, ctx.eval_probes);
            });

            // Phase 3: score every cell.
            std::vector<CellResult> results(combos.size());
            auto run_cell = [&](std::size_t i) {
                const auto start = Clock::now();
                const auto &combo = combos[i];
                std::vector<RunRecord> rows;
                for (auto t : grid.tasks)
                {
                    RunRecord r;
                    r.method = method;
                    r.task = t;
                    for (const auto &[c, k] : combo)
                    {
                        if (c == ComponentId::Vision)
                            r.vision_bits = k;
                        else if (c == ComponentId::Connector)
                            r.connector_bits = k;
                        else
                            r.language_bits = k;
                    }
                    r.groups = {kAllGroups, kAllGroups + 3};
                    r.layer_types = {kAllLayerTypes, kAllLayerTypes + 2};
                    r.group_size = grid.group_size;
                    r.seed = seed;
                    r.run_id = make_run_id(seeded, grid, r);
                    rows.push_back(std::move(r));
                }
                ModelWeights w = ctx.fp;
                QuantizationLedger ledger;
                std::string error;
                if (!assemble(combo, w, ledger, error))
                {
                    for (const auto &r : rows)
                        results[i].failures.push_back({r.run_id, describe(r), error});
                    return;
                }
                try
                {
                    std::map<ComponentId, int> key;
                    for (const auto &[c, k] : combo)
                        if (c != ComponentId::Language)
                            key[c] = k;
                    const auto pk = std::find(prefix_keys.begin(), prefix_keys.end(), key) - prefix_keys.begin();
                    const double bpw = compute_bpw(ledger, w);
                    for (std::size_t t = 0; t < grid.tasks.size(); ++t)
                    {
                        rows[t].bpw = bpw;
                        rows[t].score =
                            ledger.empty()
                                ? 1.0
                                : score_outputs(run_task(w, ctx.eval_probes, grid.tasks[t], 0, &prefixes[pk]), refs[t])
                                      .score;
                    }
                    const std::uint64_t ms = grid.record_wall_time ? elapsed_ms(start) : 0;
                    for (auto &r : rows)
                        r.wall_ms = ms;
                    results[i].rows = std::move(rows);
                }
                catch (const std::exception &e)
                {
                    for (const auto &r : rows)
                        results[i].failures.push_back({r.run_id, describe(r), e.what()});
                }
            };
            parallel_for(combos.size(), grid.workers, run_cell, progress);
            merge(table, results);
        }
    }
    table.sort_by_run_id();
    return table;
}

std::vector<RunRecord> pareto_frontier(const std::vector<RunRecord> &rows, TaskKind task)
{
    std::vector<RunRecord> slice;
    for (const auto &r : rows)
        if (r.task == task)
            slice.push_back(r);
    std::stable_sort(slice.begin(), slice.end(), [](const RunRecord &a, const RunRecord &b) {
        if (a.bpw != b.bpw)
            return a.bpw < b.bpw;
        if (a.score != b.score)
            return a.score > b.score;
        return a.run_id < b.run_id;
    });
    std::vector<RunRecord> out;
    double best = -INFINITY;
    for (std::size_t i = 0; i < slice.size();)
    {
        std::size_t j = i;
        const double top = slice[i].score;
        while (j < slice.size() && slice[j].bpw == slice[i].bpw)
            ++j;
        if (top > best)
        {
            for (std::size_t k = i; k < j && slice[k].score == top; ++k)
                out.push_back(slice[k]);
            best = top;
        }
        i = j;
    }
    return out;
}

std::vector<RunRecord> component_slice(const std::vector<RunRecord> &rows, std::size_t n)
{
    std::vector<RunRecord> out;
    for (const auto &r : rows)
        if (r.quantized_component_count() == n)
            out.push_back(r);
    return out;
}

} // namespace mmq

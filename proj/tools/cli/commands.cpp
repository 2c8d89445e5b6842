#include "commands.hpp"

#include "mmq/config.hpp"
#include "mmq/experiments.hpp"
#include "mmq/importance.hpp"
#include "mmq/report_io.hpp"
#include "mmq/results_csv.hpp"
#include "mmq/svg_plot.hpp"
#include "mmq/weights_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mmq::cli
{

namespace
{

namespace fs = std::filesystem;

struct UsageError : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

void write_file(const fs::path &path, const std::string &text)
{
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw UsageError("cannot write '" + path.string() + "'");
    f << text;
    if (!f)
        throw UsageError("failed writing '" + path.string() + "'");
}

// Opens the target once up front so an unwritable path fails before a long
// grid run.
void check_writable(const fs::path &path)
{
    std::ofstream f(path, std::ios::binary | std::ios::app);
    if (!f)
        throw UsageError("cannot write '" + path.string() + "'");
}

Config resolve_config(const std::string &path)
{
    Config c = path.empty() ? Config{} : load_config(path);
    if (const char *env = std::getenv("MMQ_WORKERS"); env && *env)
    {
        char *end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (*end != '\0' || v < 1)
            throw UsageError(std::string("MMQ_WORKERS must be a positive integer, got '") + env + "'");
        c.grid.workers = static_cast<std::size_t>(v);
    }
    return c;
}

bool calibrated(QuantMethod m)
{
    return m == QuantMethod::GPTQ || m == QuantMethod::AWQ;
}

template <class Set>
std::string join(const Set &s)
{
    std::string out;
    for (auto v : s)
        out += (out.empty() ? "" : ",") + std::string(to_string(v));
    return out;
}

template <class T, class Parse>
std::set<T> parse_list(const std::string &text, Parse parse)
{
    std::set<T> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty())
            out.insert(parse(item));
    return out;
}

// ---------------------------------------------------------------------------

struct GridArgs
{
    std::string config;
    std::string method = "uniform";
    std::string out;
    std::string manifest;
    bool progress = false;
};

int cmd_grid(const GridArgs &a, std::ostream &out, std::ostream &err)
{
    Config cfg = resolve_config(a.config);
    const QuantMethod method = parse_method(a.method);
    if (calibrated(method) && !cfg.probes_configured)
        throw UsageError("calibration probes required: add a \"probes\" section to the config for " + a.method);
    const fs::path csv = a.out.empty() ? cfg.output_dir / "results.csv" : fs::path(a.out);
    const fs::path manifest = a.manifest.empty() ? fs::path(csv.string() + ".manifest.json") : fs::path(a.manifest);
    check_writable(csv);
    check_writable(manifest);

    ProgressFn progress;
    if (a.progress)
        progress = [&err](std::size_t done, std::size_t total) {
            if (done == total || done % 25 == 0)
                err << "  " << done << "/" << total << " cells\n";
        };
    ResultsTable table;
    if (calibrated(method))
        table = run_sota_grid(cfg.pipeline, cfg.grid, {method}, progress);
    else
    {
        cfg.grid.uniform_method = method;
        table = run_uniform_grid(cfg.pipeline, cfg.grid, progress);
    }
    save_results(table, csv);

    nlohmann::ordered_json m;
    m["tool"] = "mmq";
    m["version"] = "0.1.0";
    m["command"] = "grid";
    m["method"] = std::string(to_string(method));
    m["config_hash"] = cfg.hash();
    m["config"] = nlohmann::ordered_json::parse(cfg.canonical_json());
    m["seeds"] = cfg.grid.seeds;
    m["rows"] = table.rows.size();
    auto &failed = m["failed_cells"] = nlohmann::ordered_json::array();
    for (const auto &f : table.failures)
        failed.push_back({{"run_id", f.run_id}, {"cell", f.description}, {"error", f.message}});
    write_file(manifest, m.dump(2) + "\n");

    out << "wrote " << table.rows.size() << " rows to " << csv.string() << "\n";
    if (!table.failures.empty())
    {
        err << table.failures.size() << " cell(s) failed; see " << manifest.string() << "\n";
        return kExitPartial;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs
{
    std::string input;
    std::string task;
    std::string method;
    std::string model = "toy";
    std::string out;
    std::string consensus_csv;
    std::size_t trees = 100;
    std::size_t boot = 100;
    std::size_t repeats = 50;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

int cmd_analyze(const AnalyzeArgs &a, std::ostream &out)
{
    const TaskKind task = parse_task(a.task);
    const auto table = load_results(a.input);
    std::optional<QuantMethod> method;
    if (!a.method.empty())
        method = parse_method(a.method);
    const auto data = dataset_from_results(table.rows, task, method);
    if (data.rows() < kMinForestRows)
        throw UsageError("need at least " + std::to_string(kMinForestRows) + " rows for task " + a.task + ", got " +
                         std::to_string(data.rows()));
    if (data.features() == 0)
        throw UsageError("no component bits vary in the " + a.task + " rows");
    AnalysisOptions opts;
    opts.forest.n_trees = a.trees;
    opts.forest.seed = a.seed;
    opts.forest.workers = a.workers;
    opts.n_boot = a.boot;
    opts.n_repeats = a.repeats;
    AnalysisReport report = analyze(data, opts);
    report.model = a.model;
    report.task = task;
    if (method)
        report.method = std::string(to_string(*method));
    else
    {
        std::set<QuantMethod> ms;
        for (const auto &r : table.rows)
            if (r.task == task)
                ms.insert(r.method);
        report.method.clear();
        for (auto m : ms)
            report.method += (report.method.empty() ? "" : "+") + std::string(to_string(m));
    }
    const fs::path json_out = a.out.empty() ? fs::path("report.json") : fs::path(a.out);
    write_file(json_out, analysis_to_json(report));
    if (!a.consensus_csv.empty())
        write_file(a.consensus_csv, consensus_csv({report}));

    out << kConsensusHeader << "\n" << consensus_csv_row(report) << "\n";
    char buf[128];
    std::snprintf(buf, sizeof buf, "linear R2: %.4f%s (forest R2: %.4f)\n", report.linear.r2,
                  report.linear.rank_deficient ? " [rank-deficient]" : "", report.forest_r2);
    out << buf;
    return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_plot(const std::string &input, const std::string &task_name, const std::string &out_path, std::ostream &out)
{
    const TaskKind task = parse_task(task_name);
    const auto table = load_results(input);
    std::string svg;
    try
    {
        svg = render_tradeoff_svg(table.rows, task);
    }
    catch (const std::invalid_argument &e)
    {
        throw UsageError(e.what());
    }
    const fs::path path = out_path.empty() ? fs::path("plot.svg") : fs::path(out_path);
    write_file(path, svg);
    out << "wrote " << path.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct QuantizeArgs
{
    std::string config;
    std::string method = "uniform";
    int bits = 4;
    std::string components = "vision,connector,language";
    std::string groups = "front,middle,end";
    std::string types = "attn,ff";
    std::size_t group_size = 128;
    std::string save_weights;
};

int cmd_quantize(const QuantizeArgs &a, std::ostream &out)
{
    const Config cfg = resolve_config(a.config);
    QuantizeOptions opts;
    opts.method = parse_method(a.method);
    opts.bits = a.bits;
    opts.group_size = a.group_size;
    if (opts.bits < 2 || opts.bits > 16)
        throw UsageError("--bits must be in [2, 16]");
    if (calibrated(opts.method) && !cfg.probes_configured)
        throw UsageError("calibration probes required: add a \"probes\" section to the config for " + a.method);
    Selector sel;
    sel.components = parse_list<ComponentId>(a.components, parse_component);
    sel.groups = parse_list<BlockGroup>(a.groups, parse_group);
    sel.layer_types = parse_list<LayerType>(a.types, parse_layer_type);

    const ModelWeights fp = build_model(cfg.pipeline);
    std::optional<CalibrationSet> calib;
    if (calibrated(opts.method))
    {
        const auto probes = make_probe_set(calibration_probe_seed(cfg.pipeline.seed), cfg.grid.calibration_probes,
                                           ProbeShape::from_spec(cfg.pipeline));
        calib = collect_calibration(fp, probes, cfg.grid.calibration_probes);
    }
    const auto q = apply_quantization(fp, sel, opts, calib ? &*calib : nullptr);
    out << "layer,method,bits,group_size,grids,params,proxy_error,alpha\n";
    for (const auto &e : q.ledger.entries)
    {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%s,%d,%zu,%zu,%zu,%s,%s\n", e.layer.c_str(),
                      std::string(to_string(e.method)).c_str(), e.bits, e.group_size, e.grid_count, e.params,
                      e.proxy_error ? std::to_string(*e.proxy_error).c_str() : "",
                      e.chosen_alpha ? std::to_string(*e.chosen_alpha).c_str() : "");
        out << buf;
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "layers: %zu of %zu\nbpw: %.6f\n", q.ledger.entries.size(), fp.layer_count(),
                  compute_bpw(q.ledger, q.weights));
    out << buf;
    if (!a.save_weights.empty())
    {
        save_weights(q.weights, a.save_weights);
        out << "saved weights to " << a.save_weights << "\n";
    }
    return kExitOk;
}

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err)
{
    CLI::App app{"Component-wise quantization lab for a toy vision-connector-language pipeline", "mmq"};
    app.require_subcommand(1);

    GridArgs grid;
    auto *g = app.add_subcommand("grid", "Run a uniform selector sweep or a calibrated per-component grid");
    g->add_option("--config", grid.config, "JSON config file");
    g->add_option("--method", grid.method, "uniform | rtn | gptq | awq")
        ->check(CLI::IsMember({"uniform", "rtn", "gptq", "awq"}));
    g->add_option("--out", grid.out, "Results CSV (default <output_dir>/results.csv)");
    g->add_option("--manifest", grid.manifest, "Run manifest JSON (default <out>.manifest.json)");
    g->add_flag("--progress", grid.progress, "Report progress on stderr");

    AnalyzeArgs an;
    auto *a = app.add_subcommand("analyze", "Component importance from a results CSV");
    a->add_option("results", an.input, "Results CSV")->required();
    a->add_option("--task", an.task, "retrieval | caption | vqa")->required();
    a->add_option("--method", an.method, "Only rows of this method");
    a->add_option("--model", an.model, "Model label for the consensus row");
    a->add_option("--out", an.out, "Report JSON (default report.json)");
    a->add_option("--consensus-csv", an.consensus_csv, "Also write the consensus row as CSV");
    a->add_option("--trees", an.trees, "Forest size")->check(CLI::PositiveNumber);
    a->add_option("--boot", an.boot, "Bootstrap refits")->check(CLI::PositiveNumber);
    a->add_option("--repeats", an.repeats, "Permutation repeats")->check(CLI::PositiveNumber);
    a->add_option("--seed", an.seed, "Analysis seed");
    a->add_option("--workers", an.workers, "Threads for forest fitting")->check(CLI::PositiveNumber);

    std::string plot_in, plot_task, plot_out;
    auto *p = app.add_subcommand("plot", "Score-vs-bpw SVG for one task");
    p->add_option("results", plot_in, "Results CSV")->required();
    p->add_option("--task", plot_task, "retrieval | caption | vqa")->required();
    p->add_option("--out", plot_out, "SVG path (default plot.svg)");

    QuantizeArgs qa;
    auto *q = app.add_subcommand("quantize", "Quantize one selection and print the ledger and bpw");
    q->add_option("--config", qa.config, "JSON config file");
    q->add_option("--method", qa.method, "uniform | rtn | gptq | awq")
        ->check(CLI::IsMember({"uniform", "rtn", "gptq", "awq"}));
    q->add_option("--bits", qa.bits, "Bit width");
    q->add_option("--components", qa.components, "Comma-separated components");
    q->add_option("--groups", qa.groups, "Comma-separated block groups");
    q->add_option("--types", qa.types, "Comma-separated layer types");
    q->add_option("--group-size", qa.group_size, "Input channels per grid (rtn/gptq/awq)")->check(CLI::PositiveNumber);
    q->add_option("--save-weights", qa.save_weights, "Write the quantized weights as an MMQW container");

    std::vector<const char *> argv;
    for (const auto &s : args)
        argv.push_back(s.c_str());
    try
    {
        app.parse(static_cast<int>(argv.size()), argv.data());
    }
    catch (const CLI::ParseError &e)
    {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try
    {
        if (g->parsed())
            return cmd_grid(grid, out, err);
        if (a->parsed())
            return cmd_analyze(an, out);
        if (p->parsed())
            return cmd_plot(plot_in, plot_task, plot_out, out);
        if (q->parsed())
            return cmd_quantize(qa, out);
    }
    catch (const std::exception &e)
    {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

} // namespace mmq::cli

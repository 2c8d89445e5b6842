#include "commands.hpp"

#include "mmq/config.hpp"
#include "mmq/results_csv.hpp"
#include "mmq/weights_io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cstdlib>
#include <sstream>

using namespace mmq;

namespace
{

struct Result
{
    int code = -1;
    std::string out;
    std::string err;
};

Result mmq_run(std::vector<std::string> args)
{
    args.insert(args.begin(), "mmq");
    std::ostringstream out, err;
    Result r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

constexpr const char *kTinyPipeline = R"("pipeline": {"d_model": 32, "heads": 2, "vision_blocks": 3,
  "connector_blocks": 3, "language_blocks": 3, "patch_count": 8, "patch_dim": 16, "vocab": 64,
  "num_queries": 4, "max_positions": 32})";

std::string tiny_config(const std::string &grid, bool probes)
{
    std::string s = std::string("{") + kTinyPipeline + ", \"grid\": " + grid;
    if (probes)
        s += ", \"probes\": {\"eval\": 2, \"calibration\": 2}";
    return s + "}";
}

std::size_t count(const std::string &s, const std::string &needle)
{
    std::size_t n = 0;
    for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1))
        ++n;
    return n;
}

class EnvGuard
{
  public:
    EnvGuard(const char *name, const char *value) : name_(name)
    {
        if (const char *old = std::getenv(name))
            old_ = old;
        ::setenv(name, value, 1);
    }
    ~EnvGuard()
    {
        if (old_)
            ::setenv(name_, old_->c_str(), 1);
        else
            ::unsetenv(name_);
    }

  private:
    const char *name_;
    std::optional<std::string> old_;
};

// score = 1{language ≥ 4} over a full 7³ bit grid, with a second task that
// only has a handful of rows.
std::vector<RunRecord> language_step_rows()
{
    std::vector<RunRecord> rows;
    for (int v : {2, 3, 4, 5, 6, 8, 16})
        for (int c : {2, 3, 4, 5, 6, 8, 16})
            for (int l : {2, 3, 4, 5, 6, 8, 16})
            {
                RunRecord r;
                r.run_id = "s" + std::to_string(rows.size());
                r.method = QuantMethod::GPTQ;
                r.task = TaskKind::Caption;
                r.vision_bits = v;
                r.connector_bits = c;
                r.language_bits = l;
                r.bpw = (v + c + l) / 3.0;
                r.score = l >= 4 ? 0.9 : 0.1;
                r.seed = 7;
                rows.push_back(r);
            }
    for (int k = 2; k < 7; ++k)
    {
        RunRecord r;
        r.run_id = "v" + std::to_string(k);
        r.task = TaskKind::VQA;
        r.vision_bits = k;
        r.bpw = k;
        r.score = 0.1 * k;
        rows.push_back(r);
    }
    return rows;
}

} // namespace

TEST(Cli, HelpAndUsage)
{
    EXPECT_EQ(mmq_run({"--help"}).code, cli::kExitOk);
    EXPECT_EQ(mmq_run({}).code, cli::kExitUsage);
    EXPECT_EQ(mmq_run({"frobnicate"}).code, cli::kExitUsage);
    EXPECT_EQ(mmq_run({"grid", "--method", "fp8"}).code, cli::kExitUsage);
    EXPECT_EQ(mmq_run({"analyze", "x.csv"}).code, cli::kExitUsage);
}

TEST(Cli, GridWritesCsvAndManifest)
{
    test::TempDir dir("cli-grid");
    const std::string cfg_text = tiny_config(R"({"bits": [2, 4], "tasks": ["vqa"], "seeds": [7]})", true);
    test::write_file(dir / "c.json", cfg_text);
    const auto csv = (dir / "r.csv").string();
    const auto r = mmq_run({"grid", "--config", (dir / "c.json").string(), "--out", csv});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    // |bits| · 7 component subsets · 7 group subsets · 3 type subsets + 1 baseline.
    const auto table = load_results(csv);
    EXPECT_EQ(table.rows.size(), 2u * 7 * 7 * 3 + 1);

    const auto m = nlohmann::json::parse(test::read_file(csv + ".manifest.json"));
    EXPECT_EQ(m["command"], "grid");
    EXPECT_EQ(m["method"], "uniform");
    EXPECT_EQ(m["config_hash"], parse_config(cfg_text).hash());
    EXPECT_EQ(m["seeds"], nlohmann::json::array({7}));
    EXPECT_EQ(m["rows"], 295);
    EXPECT_TRUE(m["failed_cells"].empty());
    EXPECT_TRUE(m.contains("version"));

    // Same config again, with a different worker count from the environment.
    EnvGuard env("MMQ_WORKERS", "3");
    const auto again = (dir / "again.csv").string();
    ASSERT_EQ(mmq_run({"grid", "--config", (dir / "c.json").string(), "--out", again}).code, cli::kExitOk);
    EXPECT_EQ(test::read_file(csv), test::read_file(again));
    EXPECT_EQ(test::read_file(csv + ".manifest.json"), test::read_file(again + ".manifest.json"));
}

TEST(Cli, GridErrors)
{
    test::TempDir dir("cli-grid-err");
    test::write_file(dir / "noprobes.json", tiny_config(R"({"bits": [2], "tasks": ["vqa"]})", false));
    auto r = mmq_run({"grid", "--config", (dir / "noprobes.json").string(), "--method", "gptq", "--out",
                      (dir / "r.csv").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("calibration probes required"), std::string::npos) << r.err;

    test::write_file(dir / "bad.json", R"({"grid": {"bitz": [2]}})");
    r = mmq_run({"grid", "--config", (dir / "bad.json").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("/grid/bitz: unknown key"), std::string::npos) << r.err;

    r = mmq_run({"grid", "--config", (dir / "noprobes.json").string(), "--out", "/nonexistent/dir/r.csv"});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("cannot write"), std::string::npos) << r.err;

    EnvGuard env("MMQ_WORKERS", "zero");
    r = mmq_run({"grid", "--config", (dir / "noprobes.json").string(), "--out", (dir / "r.csv").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("MMQ_WORKERS"), std::string::npos);
}

TEST(Cli, AnalyzeLanguageStep)
{
    test::TempDir dir("cli-analyze");
    ResultsTable t;
    t.rows = language_step_rows();
    save_results(t, dir / "r.csv");
    const auto json = (dir / "report.json").string();
    const auto cons = (dir / "consensus.csv").string();
    const std::vector<std::string> args{"analyze", (dir / "r.csv").string(), "--task", "caption", "--out", json,
                                        "--consensus-csv", cons, "--trees", "30", "--boot", "10", "--repeats", "10"};
    const auto r = mmq_run(args);
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;

    const auto j = nlohmann::json::parse(test::read_file(json));
    ASSERT_EQ(j["reports"].size(), 4u);
    for (const auto &rep : j["reports"])
    {
        double sum = 0.0;
        for (const auto &f : rep["features"])
            sum += f["pct"].get<double>();
        EXPECT_NEAR(sum, 100.0, 0.01);
    }
    const auto &consensus = j["reports"][3];
    EXPECT_EQ(consensus["method"], "consensus");
    EXPECT_EQ(consensus["features"][2]["name"], "language");
    EXPECT_GE(consensus["features"][2]["pct"].get<double>(), 90.0);
    const double r2 = j["linear"]["r2"].get<double>();
    EXPECT_LT(r2, 0.5);
    EXPECT_NE(r.out.find("linear R2: "), std::string::npos);
    EXPECT_EQ(r.out.rfind("Model,Method,Task,Vision,Connector,Language\ntoy,gptq,caption,", 0), 0u) << r.out;

    const auto csv_text = test::read_file(cons);
    EXPECT_EQ(csv_text.rfind("Model,Method,Task,Vision,Connector,Language\n", 0), 0u);

    // Byte-identical on rerun.
    const auto first = test::read_file(json);
    ASSERT_EQ(mmq_run(args).code, cli::kExitOk);
    EXPECT_EQ(test::read_file(json), first);
    EXPECT_EQ(test::read_file(cons), csv_text);
}

TEST(Cli, AnalyzeErrors)
{
    test::TempDir dir("cli-analyze-err");
    ResultsTable t;
    t.rows = language_step_rows();
    save_results(t, dir / "r.csv");
    auto r = mmq_run({"analyze", (dir / "r.csv").string(), "--task", "vqa", "--out", (dir / "o.json").string()});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("at least 10 rows"), std::string::npos) << r.err;
    r = mmq_run({"analyze", (dir / "missing.csv").string(), "--task", "caption"});
    EXPECT_EQ(r.code, cli::kExitUsage);
    r = mmq_run({"analyze", (dir / "r.csv").string(), "--task", "ocr"});
    EXPECT_EQ(r.code, cli::kExitUsage);
}

TEST(Cli, AnalyzeCalibratedGrid)
{
    test::TempDir dir("cli-sota");
    test::write_file(dir / "c.json", tiny_config(R"({"sota_bits": [2, 3, 8], "tasks": ["vqa"]})", true));
    const auto csv = (dir / "r.csv").string();
    auto r = mmq_run({"grid", "--config", (dir / "c.json").string(), "--method", "awq", "--out", csv});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    // Each component takes one of the 3 bit widths or stays at 16.
    EXPECT_EQ(load_results(csv).rows.size(), 4u * 4 * 4);
    const auto json = (dir / "report.json").string();
    r = mmq_run({"analyze", csv, "--task", "vqa", "--out", json, "--trees", "20", "--boot", "5", "--repeats", "5"});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    const auto j = nlohmann::json::parse(test::read_file(json));
    EXPECT_EQ(j["method"], "awq");
    EXPECT_EQ(j["n_rows"], 64);
    double sum = 0.0;
    for (const auto &f : j["reports"][3]["features"])
        sum += f["pct"].get<double>();
    EXPECT_NEAR(sum, 100.0, 0.01);
}

TEST(Cli, Plot)
{
    test::TempDir dir("cli-plot");
    ResultsTable t;
    for (int i = 0; i < 3; ++i)
    {
        RunRecord r;
        r.run_id = "p" + std::to_string(i);
        r.task = TaskKind::Caption;
        r.vision_bits = 2 + 2 * i;
        r.bpw = 4 + 2 * i;
        r.score = 0.3 * i;
        t.rows.push_back(r);
    }
    save_results(t, dir / "r.csv");
    const auto svg = (dir / "p.svg").string();
    ASSERT_EQ(mmq_run({"plot", (dir / "r.csv").string(), "--task", "caption", "--out", svg}).code, cli::kExitOk);
    const auto text = test::read_file(svg);
    EXPECT_EQ(count(text, "<circle"), 3u);
    EXPECT_EQ(count(text, "class=\"star\""), 0u);
    ASSERT_EQ(mmq_run({"plot", (dir / "r.csv").string(), "--task", "caption", "--out", svg}).code, cli::kExitOk);
    EXPECT_EQ(test::read_file(svg), text);

    const auto r = mmq_run({"plot", (dir / "r.csv").string(), "--task", "vqa", "--out", svg});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("no rows"), std::string::npos);
}

TEST(Cli, Quantize)
{
    test::TempDir dir("cli-quantize");
    test::write_file(dir / "c.json", tiny_config("{}", true));
    test::write_file(dir / "noprobes.json", tiny_config("{}", false));
    const auto weights = (dir / "q.mmqw").string();
    auto r = mmq_run({"quantize", "--config", (dir / "c.json").string(), "--method", "gptq", "--bits", "3",
                      "--components", "language", "--types", "ff", "--save-weights", weights});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    // 3 language blocks × (up, down).
    EXPECT_EQ(count(r.out, ",gptq,3,"), 6u);
    EXPECT_NE(r.out.find("layers: 6 of "), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("bpw: "), std::string::npos);
    const auto cfg = load_config(dir / "c.json");
    EXPECT_NO_THROW(load_weights(cfg.pipeline, weights));

    r = mmq_run({"quantize", "--config", (dir / "noprobes.json").string(), "--method", "awq"});
    EXPECT_EQ(r.code, cli::kExitUsage);
    EXPECT_NE(r.err.find("calibration probes required"), std::string::npos);
    EXPECT_EQ(mmq_run({"quantize", "--config", (dir / "c.json").string(), "--bits", "1"}).code, cli::kExitUsage);
    EXPECT_EQ(mmq_run({"quantize", "--config", (dir / "c.json").string(), "--groups", "back"}).code,
              cli::kExitUsage);

    // Empty selection leaves the model at 16 bits.
    r = mmq_run({"quantize", "--config", (dir / "c.json").string(), "--components", ""});
    ASSERT_EQ(r.code, cli::kExitOk) << r.err;
    EXPECT_NE(r.out.find("bpw: 16.000000"), std::string::npos) << r.out;
}

#include "mmq/report_io.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <numeric>
#include <sstream>

using namespace mmq;

namespace
{

ImportanceReport report(ImportanceMethod m, std::vector<std::string> names, std::vector<double> values)
{
    ImportanceReport r;
    r.method = m;
    for (std::size_t j = 0; j < names.size(); ++j)
        r.features.push_back({names[j], values[j], values[j] * 0.9, values[j] * 1.1, 0.0});
    normalize_percentages(r);
    return r;
}

AnalysisReport sample_analysis(std::vector<std::string> names, std::vector<double> a, std::vector<double> b,
                               std::vector<double> c)
{
    AnalysisReport r;
    r.model = "toy";
    r.method = "gptq";
    r.task = TaskKind::Caption;
    r.n_rows = 343;
    r.impurity = report(ImportanceMethod::Impurity, names, a);
    r.permutation = report(ImportanceMethod::Permutation, names, b);
    r.shapley = report(ImportanceMethod::Shapley, names, c);
    r.consensus = consensus_ranking({r.impurity, r.permutation, r.shapley});
    r.forest_r2 = 0.97;
    r.linear.r2 = 0.31;
    r.linear.intercept = 0.5;
    r.linear.coefficients = {0.01, 0.02, 0.03};
    return r;
}

double row_sum(const std::string &row)
{
    std::stringstream ss(row);
    std::string cell;
    double s = 0.0;
    for (int i = 0; std::getline(ss, cell, ','); ++i)
        if (i >= 3 && cell != "--")
            s += std::stod(cell);
    return s;
}

} // namespace

TEST(RoundPercentages, LargestRemainder)
{
    const auto r = round_percentages({100.0 / 3, 100.0 / 3, 100.0 / 3});
    EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 100.0, 1e-9);
    // Ties on the remainder go to the earliest entry.
    EXPECT_DOUBLE_EQ(r[0], 33.34);
    EXPECT_DOUBLE_EQ(r[1], 33.33);
    const auto s = round_percentages({50.004, 41.666, 8.33}, 1);
    EXPECT_EQ(s, (std::vector<double>{50.0, 41.7, 8.3}));
    EXPECT_TRUE(round_percentages({}).empty());
}

TEST(RoundPercentages, SumPreservedOnRandomInputs)
{
    RngStream rng(3);
    for (int t = 0; t < 500; ++t)
    {
        std::vector<double> v(3);
        for (auto &x : v)
            x = rng.next_unit();
        const double total = std::accumulate(v.begin(), v.end(), 0.0);
        for (auto &x : v)
            x *= 100.0 / total;
        const auto r = round_percentages(v);
        ASSERT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 100.0, 1e-9);
        for (std::size_t j = 0; j < 3; ++j)
            ASSERT_LE(std::abs(r[j] - v[j]), 0.01 + 1e-12);
    }
}

TEST(ConsensusCsv, HeaderAndRowFormat)
{
    const auto a = sample_analysis({"vision", "connector", "language"}, {100, 0, 0}, {0, 100, 0}, {50, 25, 25});
    const auto row = consensus_csv_row(a);
    EXPECT_EQ(row, "toy,gptq,caption,50.00,41.67,8.33");
    EXPECT_EQ(consensus_csv({a, a}), std::string(kConsensusHeader) + "\n" + row + "\n" + row + "\n");
    EXPECT_NEAR(row_sum(row), 100.0, 0.01);
}

TEST(ConsensusCsv, DroppedComponentPrintsPlaceholder)
{
    const auto a = sample_analysis({"vision", "language"}, {3, 1}, {1, 1}, {2, 2});
    const auto row = consensus_csv_row(a);
    EXPECT_EQ(row.substr(0, row.find(',', row.find(',', row.find(',') + 1) + 1)), "toy,gptq,caption");
    EXPECT_NE(row.find(",--,"), std::string::npos);
    EXPECT_NEAR(row_sum(row), 100.0, 0.01);
}

TEST(ConsensusCsv, RowsSumToHundredOnRandomReports)
{
    RngStream rng(5);
    for (int t = 0; t < 200; ++t)
    {
        std::vector<double> a(3), b(3), c(3);
        for (auto *v : {&a, &b, &c})
            for (auto &x : *v)
                x = rng.next_unit() * 10;
        const auto row = consensus_csv_row(sample_analysis({"vision", "connector", "language"}, a, b, c));
        ASSERT_NEAR(row_sum(row), 100.0, 0.01) << row;
    }
}

TEST(AnalysisJson, Schema)
{
    const auto a = sample_analysis({"vision", "connector", "language"}, {1, 2, 3}, {3, 2, 1}, {1, 1, 1});
    const auto j = nlohmann::json::parse(analysis_to_json(a));
    EXPECT_EQ(j["task"], "caption");
    EXPECT_EQ(j["model"], "toy");
    EXPECT_EQ(j["method"], "gptq");
    EXPECT_EQ(j["n_rows"], 343);
    ASSERT_EQ(j["reports"].size(), 4u);
    const char *methods[] = {"impurity", "permutation", "shapley", "consensus"};
    for (std::size_t i = 0; i < 4; ++i)
    {
        const auto &r = j["reports"][i];
        EXPECT_EQ(r["method"], methods[i]);
        ASSERT_EQ(r["features"].size(), 3u);
        double sum = 0.0;
        for (const auto &f : r["features"])
        {
            for (const char *k : {"name", "importance", "ci_low", "ci_high", "pct"})
                EXPECT_TRUE(f.contains(k)) << k;
            sum += f["pct"].get<double>();
        }
        EXPECT_NEAR(sum, 100.0, 1e-9);
        EXPECT_FALSE(r["degenerate"].get<bool>());
    }
    EXPECT_EQ(j["reports"][0]["features"][2]["name"], "language");
    EXPECT_DOUBLE_EQ(j["forest_r2"].get<double>(), 0.97);
    EXPECT_DOUBLE_EQ(j["linear"]["r2"].get<double>(), 0.31);
    EXPECT_EQ(j["linear"]["coefficients"].size(), 3u);
}

TEST(AnalysisJson, Deterministic)
{
    const auto a = sample_analysis({"vision", "connector", "language"}, {1, 2, 3}, {3, 2, 1}, {1, 1, 1});
    EXPECT_EQ(analysis_to_json(a), analysis_to_json(a));
}

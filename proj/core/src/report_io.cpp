#include "mmq/report_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace mmq
{

namespace
{

nlohmann::ordered_json report_json(const ImportanceReport &r)
{
    nlohmann::ordered_json j;
    j["method"] = std::string(to_string(r.method));
    auto &features = j["features"] = nlohmann::ordered_json::array();
    for (const auto &f : r.features)
        features.push_back(
            {{"name", f.name}, {"importance", f.importance}, {"ci_low", f.ci_low}, {"ci_high", f.ci_high}, {"pct", f.pct}});
    j["degenerate"] = r.degenerate;
    return j;
}

} // namespace

std::string analysis_to_json(const AnalysisReport &report)
{
    nlohmann::ordered_json j;
    j["task"] = std::string(to_string(report.task));
    j["model"] = report.model;
    j["method"] = report.method;
    j["n_rows"] = report.n_rows;
    j["reports"] = nlohmann::ordered_json::array(
        {report_json(report.impurity), report_json(report.permutation), report_json(report.shapley),
         report_json(report.consensus)});
    j["forest_r2"] = report.forest_r2;
    j["linear"] = {{"r2", report.linear.r2},
                   {"rank_deficient", report.linear.rank_deficient},
                   {"intercept", report.linear.intercept},
                   {"coefficients", report.linear.coefficients}};
    return j.dump(2) + "\n";
}

std::vector<double> round_percentages(const std::vector<double> &pct, int decimals)
{
    const double scale = std::pow(10.0, decimals);
    const double total = std::accumulate(pct.begin(), pct.end(), 0.0);
    const auto target = static_cast<long long>(std::llround(total * scale));
    std::vector<long long> units(pct.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    long long assigned = 0;
    for (std::size_t i = 0; i < pct.size(); ++i)
    {
        const double exact = pct[i] * scale;
        units[i] = static_cast<long long>(std::floor(exact));
        assigned += units[i];
        remainders.emplace_back(exact - static_cast<double>(units[i]), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto &a, const auto &b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < target && k < remainders.size(); ++k, ++assigned)
        ++units[remainders[k].second];
    std::vector<double> out;
    for (auto u : units)
        out.push_back(static_cast<double>(u) / scale);
    return out;
}

std::string consensus_csv_row(const AnalysisReport &report)
{
    std::vector<double> pct;
    for (const auto &f : report.consensus.features)
        pct.push_back(f.pct);
    const auto rounded = round_percentages(pct, 2);
    std::string row = report.model + "," + report.method + "," + std::string(to_string(report.task));
    for (auto c : kAllComponents)
    {
        row += ',';
        std::string cell = "--";
        for (std::size_t j = 0; j < report.consensus.features.size(); ++j)
            if (report.consensus.features[j].name == to_string(c))
            {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.2f", rounded[j]);
                cell = buf;
            }
        row += cell;
    }
    return row;
}

std::string consensus_csv(const std::vector<AnalysisReport> &reports)
{
    std::string out = std::string(kConsensusHeader) + "\n";
    for (const auto &r : reports)
        out += consensus_csv_row(r) + "\n";
    return out;
}

} // namespace mmq

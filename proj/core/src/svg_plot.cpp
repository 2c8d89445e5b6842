#include "mmq/svg_plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

namespace mmq
{

namespace
{

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 60, kRight = 20, kTop = 30, kBottom = 50;

const char *color(QuantMethod m)
{
    switch (m)
    {
    case QuantMethod::Uniform: return "#1f77b4";
    case QuantMethod::RTN: return "#9467bd";
    case QuantMethod::GPTQ: return "#d62728";
    case QuantMethod::AWQ: return "#2ca02c";
    }
    return "#000000";
}

std::string fmt(const char *f, double a)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string star_points(double cx, double cy, double r)
{
    std::string pts;
    for (int i = 0; i < 10; ++i)
    {
        const double rr = i % 2 == 0 ? r : r * 0.45;
        const double a = -std::numbers::pi / 2 + i * std::numbers::pi / 5;
        if (i)
            pts += ' ';
        pts += fmt("%.2f", cx + rr * std::cos(a)) + "," + fmt("%.2f", cy + rr * std::sin(a));
    }
    return pts;
}

} // namespace

std::string render_tradeoff_svg(const std::vector<RunRecord> &all_rows, TaskKind task)
{
    std::vector<RunRecord> rows;
    for (const auto &r : all_rows)
        if (r.task == task)
            rows.push_back(r);
    if (rows.empty())
        throw std::invalid_argument("no rows for task '" + std::string(to_string(task)) + "'");
    std::sort(rows.begin(), rows.end(), [](const RunRecord &a, const RunRecord &b) { return a.run_id < b.run_id; });

    double x_min = rows.front().bpw, x_max = rows.front().bpw;
    for (const auto &r : rows)
    {
        x_min = std::min(x_min, r.bpw);
        x_max = std::max(x_max, r.bpw);
    }
    x_min = std::floor(x_min);
    x_max = std::ceil(x_max);
    if (x_max <= x_min)
        x_max = x_min + 1;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto X = [&](double bpw) { return kLeft + (bpw - x_min) / (x_max - x_min) * pw; };
    auto Y = [&](double score) { return kTop + (1.0 - score) * ph; };

    std::string s;
    s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" viewBox=\"0 0 640 420\">\n";
    s += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"420\" fill=\"#ffffff\"/>\n";
    s += "<text x=\"320\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         std::string(to_string(task)) + ": score vs bits per weight</text>\n";
    // axes
    s += "<g stroke=\"#444444\" stroke-width=\"1\">\n";
    s += "<line x1=\"" + fmt("%.2f", kLeft) + "\" y1=\"" + fmt("%.2f", kTop + ph) + "\" x2=\"" + fmt("%.2f", kLeft + pw) +
         "\" y2=\"" + fmt("%.2f", kTop + ph) + "\"/>\n";
    s += "<line x1=\"" + fmt("%.2f", kLeft) + "\" y1=\"" + fmt("%.2f", kTop) + "\" x2=\"" + fmt("%.2f", kLeft) +
         "\" y2=\"" + fmt("%.2f", kTop + ph) + "\"/>\n";
    s += "</g>\n<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#444444\">\n";
    const int x_steps = static_cast<int>(x_max - x_min);
    const int x_stride = x_steps > 8 ? 2 : 1;
    for (int i = 0; i <= x_steps; i += x_stride)
        s += "<text x=\"" + fmt("%.2f", X(x_min + i)) + "\" y=\"" + fmt("%.2f", kTop + ph + 16) +
             "\" text-anchor=\"middle\">" + fmt("%.0f", x_min + i) + "</text>\n";
    for (int i = 0; i <= 5; ++i)
        s += "<text x=\"" + fmt("%.2f", kLeft - 6) + "\" y=\"" + fmt("%.2f", Y(i / 5.0) + 4) +
             "\" text-anchor=\"end\">" + fmt("%.1f", i / 5.0) + "</text>\n";
    s += "<text x=\"" + fmt("%.2f", kLeft + pw / 2) + "\" y=\"" + fmt("%.2f", kHeight - 12) +
         "\" text-anchor=\"middle\">bits per weight</text>\n";
    s += "<text x=\"16\" y=\"" + fmt("%.2f", kTop + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         fmt("%.2f", kTop + ph / 2) + ")\">fidelity score</text>\n";
    s += "</g>\n";

    // legend, only methods present
    std::vector<QuantMethod> methods;
    for (const auto &r : rows)
        if (std::find(methods.begin(), methods.end(), r.method) == methods.end())
            methods.push_back(r.method);
    std::sort(methods.begin(), methods.end());
    s += "<g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (std::size_t i = 0; i < methods.size(); ++i)
    {
        const double ly = kTop + 8 + 16.0 * static_cast<double>(i);
        s += "<rect x=\"" + fmt("%.2f", kLeft + pw - 90) + "\" y=\"" + fmt("%.2f", ly - 8) +
             "\" width=\"10\" height=\"10\" fill=\"" + color(methods[i]) + "\"/>\n";
        s += "<text x=\"" + fmt("%.2f", kLeft + pw - 74) + "\" y=\"" + fmt("%.2f", ly + 1) + "\">" +
             std::string(to_string(methods[i])) + "</text>\n";
    }
    s += "</g>\n";

    s += "<g class=\"points\" fill-opacity=\"0.7\">\n";
    for (const auto &r : rows)
        s += "<circle cx=\"" + fmt("%.2f", X(r.bpw)) + "\" cy=\"" + fmt("%.2f", Y(r.score)) + "\" r=\"3\" fill=\"" +
             color(r.method) + "\"/>\n";
    s += "</g>\n";

    const auto frontier = pareto_frontier(rows, task);
    s += "<polyline class=\"pareto\" fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < frontier.size(); ++i)
        s += (i ? " " : "") + fmt("%.2f", X(frontier[i].bpw)) + "," + fmt("%.2f", Y(frontier[i].score));
    s += "\"/>\n";

    for (const auto &r : rows)
        if (r.is_full_pipeline_star())
            s += "<polygon class=\"star\" fill=\"#000000\" points=\"" + star_points(X(r.bpw), Y(r.score), 8) + "\"/>\n";
    s += "</svg>\n";
    return s;
}

} // namespace mmq

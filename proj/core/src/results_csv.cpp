#include "mmq/results_csv.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mmq
{

namespace
{

template <class Set>
std::string join(const Set &s)
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

template <class T, class Parse>
std::set<T> split_set(std::string_view field, Parse parse)
{
    std::set<T> out;
    if (field == "none")
        return out;
    std::size_t start = 0;
    while (true)
    {
        const auto plus = field.find('+', start);
        const auto token = field.substr(start, plus == std::string_view::npos ? std::string_view::npos : plus - start);
        if (token.empty())
            throw std::invalid_argument("empty token in '" + std::string(field) + "'");
        out.insert(parse(token));
        if (plus == std::string_view::npos)
            break;
        start = plus + 1;
    }
    return out;
}

std::string real(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

template <class T>
T parse_number(std::string_view s, const char *what)
{
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw std::invalid_argument(std::string("bad ") + what + " '" + std::string(s) + "'");
    return v;
}

double parse_real(std::string_view s, const char *what)
{
    // from_chars for double is not available on every libstdc++ we target.
    const std::string tmp(s);
    char *end = nullptr;
    const double v = std::strtod(tmp.c_str(), &end);
    if (tmp.empty() || end != tmp.c_str() + tmp.size())
        throw std::invalid_argument(std::string("bad ") + what + " '" + tmp + "'");
    return v;
}

int parse_bits(std::string_view s, const char *what)
{
    const int b = parse_number<int>(s, what);
    if (b < 2 || b > 16)
        throw std::invalid_argument(std::string(what) + " " + std::to_string(b) + " outside [2, 16]");
    return b;
}

} // namespace

std::string format_groups(const std::set<BlockGroup> &groups)
{
    return join(groups);
}

std::string format_layer_types(const std::set<LayerType> &types)
{
    return join(types);
}

std::set<BlockGroup> parse_groups(std::string_view field)
{
    return split_set<BlockGroup>(field, parse_group);
}

std::set<LayerType> parse_layer_types(std::string_view field)
{
    return split_set<LayerType>(field, parse_layer_type);
}

std::string results_to_csv(const std::vector<RunRecord> &rows)
{
    std::string out(kResultsHeader);
    out += '\n';
    for (const auto &r : rows)
    {
        out += r.run_id;
        out += ',';
        out += to_string(r.method);
        out += ',';
        out += to_string(r.task);
        out += ',' + std::to_string(r.vision_bits) + ',' + std::to_string(r.connector_bits) + ',' +
               std::to_string(r.language_bits);
        out += ',' + format_groups(r.groups) + ',' + format_layer_types(r.layer_types);
        out += ',' + std::to_string(r.group_size);
        out += ',' + real(r.bpw) + ',' + real(r.score);
        out += ',' + std::to_string(r.seed) + ',' + std::to_string(r.wall_ms);
        out += '\n';
    }
    return out;
}

std::vector<RunRecord> results_from_csv(std::string_view text)
{
    std::vector<RunRecord> rows;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool header_seen = false;
    while (pos < text.size())
    {
        auto eol = text.find('\n', pos);
        if (eol == std::string_view::npos)
            eol = text.size();
        std::string_view line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.remove_suffix(1);
        if (!header_seen)
        {
            if (line != kResultsHeader)
                throw std::runtime_error("line 1: unexpected header");
            header_seen = true;
            continue;
        }
        if (line.empty())
            continue;
        std::vector<std::string_view> f;
        std::size_t start = 0;
        while (true)
        {
            const auto comma = line.find(',', start);
            f.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
            if (comma == std::string_view::npos)
                break;
            start = comma + 1;
        }
        try
        {
            if (f.size() != 13)
                throw std::invalid_argument("expected 13 fields, got " + std::to_string(f.size()));
            RunRecord r;
            if (f[0].empty())
                throw std::invalid_argument("empty run_id");
            r.run_id = std::string(f[0]);
            r.method = parse_method(f[1]);
            r.task = parse_task(f[2]);
            r.vision_bits = parse_bits(f[3], "vision_bits");
            r.connector_bits = parse_bits(f[4], "connector_bits");
            r.language_bits = parse_bits(f[5], "language_bits");
            r.groups = parse_groups(f[6]);
            r.layer_types = parse_layer_types(f[7]);
            r.group_size = parse_number<std::size_t>(f[8], "group_size");
            r.bpw = parse_real(f[9], "bpw");
            r.score = parse_real(f[10], "score");
            if (!(r.bpw > 0.0 && r.bpw <= 16.0))
                throw std::invalid_argument("bpw outside (0, 16]");
            if (!(r.score >= 0.0 && r.score <= 1.0))
                throw std::invalid_argument("score outside [0, 1]");
            r.seed = parse_number<std::uint64_t>(f[11], "seed");
            r.wall_ms = parse_number<std::uint64_t>(f[12], "wall_ms");
            rows.push_back(std::move(r));
        }
        catch (const std::invalid_argument &e)
        {
            throw std::runtime_error("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!header_seen)
        throw std::runtime_error("line 1: missing header");
    return rows;
}

void save_results(const ResultsTable &table, const std::filesystem::path &path)
{
    std::vector<RunRecord> rows = table.rows;
    std::sort(rows.begin(), rows.end(), [](const RunRecord &a, const RunRecord &b) { return a.run_id < b.run_id; });
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out << results_to_csv(rows);
    if (!out)
        throw std::runtime_error("failed writing '" + path.string() + "'");
}

ResultsTable load_results(const std::filesystem::path &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    ResultsTable t;
    t.rows = results_from_csv(ss.str());
    return t;
}

} // namespace mmq

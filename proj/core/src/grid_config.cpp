#include "mmq/config.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mmq
{

namespace
{

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string &path, const std::string &what)
{
    throw std::invalid_argument(path + ": " + what);
}

void only_keys(const json &obj, const std::string &path, std::initializer_list<std::string_view> allowed)
{
    if (!obj.is_object())
        fail(path.empty() ? "/" : path, "expected an object");
    for (const auto &[key, _] : obj.items())
    {
        bool ok = false;
        for (auto a : allowed)
            ok = ok || key == a;
        if (!ok)
            fail(path + "/" + key, "unknown key");
    }
}

std::size_t get_count(const json &v, const std::string &path)
{
    if (!v.is_number_integer() || v.get<long long>() < 0)
        fail(path, "expected a non-negative integer");
    return v.get<std::size_t>();
}

std::uint64_t get_u64(const json &v, const std::string &path)
{
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
        fail(path, "expected a non-negative integer");
    return v.get<std::uint64_t>();
}

std::string get_string(const json &v, const std::string &path)
{
    if (!v.is_string())
        fail(path, "expected a string");
    return v.get<std::string>();
}

template <class Parse>
auto parse_with(const json &v, const std::string &path, Parse parse)
{
    const auto s = get_string(v, path);
    try
    {
        return parse(s);
    }
    catch (const std::invalid_argument &e)
    {
        fail(path, e.what());
    }
}

std::vector<int> get_bits(const json &v, const std::string &path)
{
    if (!v.is_array() || v.empty())
        fail(path, "expected a non-empty array of bit widths");
    std::vector<int> out;
    for (std::size_t i = 0; i < v.size(); ++i)
    {
        const auto p = path + "/" + std::to_string(i);
        if (!v[i].is_number_integer())
            fail(p, "expected an integer");
        const int b = v[i].get<int>();
        if (b < 2 || b > 16)
            fail(p, "bit width " + std::to_string(b) + " outside [2, 16]");
        out.push_back(b);
    }
    return out;
}

template <class T, class Parse>
std::vector<std::set<T>> get_subsets(const json &v, const std::string &path, Parse parse)
{
    if (!v.is_array())
        fail(path, "expected an array of arrays");
    std::vector<std::set<T>> out;
    for (std::size_t i = 0; i < v.size(); ++i)
    {
        const auto p = path + "/" + std::to_string(i);
        if (!v[i].is_array() || v[i].empty())
            fail(p, "expected a non-empty array of names");
        std::set<T> s;
        for (std::size_t k = 0; k < v[i].size(); ++k)
            s.insert(parse_with(v[i][k], p + "/" + std::to_string(k), parse));
        out.push_back(std::move(s));
    }
    return out;
}

template <class Set>
ojson names(const Set &s)
{
    ojson a = ojson::array();
    for (auto v : s)
        a.push_back(std::string(to_string(v)));
    return a;
}

template <class T>
ojson subset_list(const std::vector<std::set<T>> &v)
{
    ojson a = ojson::array();
    for (const auto &s : v)
        a.push_back(names(s));
    return a;
}

} // namespace

Config parse_config(std::string_view text)
{
    json root;
    try
    {
        root = json::parse(text);
    }
    catch (const json::parse_error &e)
    {
        fail("/", std::string("invalid JSON: ") + e.what());
    }
    only_keys(root, "", {"model", "pipeline", "grid", "probes", "output_dir", "workers"});
    Config c;
    if (root.contains("model"))
        c.model = get_string(root["model"], "/model");
    if (root.contains("pipeline"))
    {
        const auto &p = root["pipeline"];
        only_keys(p, "/pipeline",
                  {"d_model", "vision_blocks", "connector_blocks", "language_blocks", "heads", "ffn_mult",
                   "patch_count", "patch_dim", "vocab", "num_queries", "max_positions", "connector_kind", "seed"});
        auto &s = c.pipeline;
        auto count = [&](const char *key, std::size_t &dst) {
            if (p.contains(key))
                dst = get_count(p[key], std::string("/pipeline/") + key);
        };
        if (p.contains("connector_kind") &&
            parse_with(p["connector_kind"], "/pipeline/connector_kind", parse_connector_kind) ==
                ConnectorKind::LinearProjector)
            s = PipelineSpec::llava_like();
        count("d_model", s.d_model);
        count("vision_blocks", s.vision_blocks);
        count("connector_blocks", s.connector_blocks);
        count("language_blocks", s.language_blocks);
        count("heads", s.heads);
        count("ffn_mult", s.ffn_mult);
        count("patch_count", s.patch_count);
        count("patch_dim", s.patch_dim);
        count("vocab", s.vocab);
        count("num_queries", s.num_queries);
        count("max_positions", s.max_positions);
        if (p.contains("seed"))
            s.seed = get_u64(p["seed"], "/pipeline/seed");
        try
        {
            s.validate();
        }
        catch (const std::invalid_argument &e)
        {
            fail("/pipeline", e.what());
        }
    }
    auto &g = c.grid;
    g.seeds = {c.pipeline.seed};
    if (root.contains("grid"))
    {
        const auto &j = root["grid"];
        only_keys(j, "/grid",
                  {"bits", "sota_bits", "component_subsets", "group_subsets", "layer_type_subsets", "tasks", "seeds",
                   "uniform_method", "group_size", "record_wall_time"});
        if (j.contains("bits"))
            g.bits = get_bits(j["bits"], "/grid/bits");
        if (j.contains("sota_bits"))
            g.sota_bits = get_bits(j["sota_bits"], "/grid/sota_bits");
        if (j.contains("component_subsets"))
            g.component_subsets = get_subsets<ComponentId>(j["component_subsets"], "/grid/component_subsets",
                                                           parse_component);
        if (j.contains("group_subsets"))
            g.group_subsets = get_subsets<BlockGroup>(j["group_subsets"], "/grid/group_subsets", parse_group);
        if (j.contains("layer_type_subsets"))
            g.layer_type_subsets =
                get_subsets<LayerType>(j["layer_type_subsets"], "/grid/layer_type_subsets", parse_layer_type);
        if (j.contains("tasks"))
        {
            const auto &t = j["tasks"];
            if (!t.is_array() || t.empty())
                fail("/grid/tasks", "expected a non-empty array of task names");
            g.tasks.clear();
            for (std::size_t i = 0; i < t.size(); ++i)
                g.tasks.push_back(parse_with(t[i], "/grid/tasks/" + std::to_string(i), parse_task));
        }
        if (j.contains("seeds"))
        {
            const auto &s = j["seeds"];
            if (!s.is_array() || s.empty())
                fail("/grid/seeds", "expected a non-empty array of seeds");
            g.seeds.clear();
            for (std::size_t i = 0; i < s.size(); ++i)
                g.seeds.push_back(get_u64(s[i], "/grid/seeds/" + std::to_string(i)));
        }
        if (j.contains("uniform_method"))
            g.uniform_method = parse_with(j["uniform_method"], "/grid/uniform_method", parse_method);
        if (j.contains("group_size"))
            g.group_size = get_count(j["group_size"], "/grid/group_size");
        if (j.contains("record_wall_time"))
        {
            if (!j["record_wall_time"].is_boolean())
                fail("/grid/record_wall_time", "expected a boolean");
            g.record_wall_time = j["record_wall_time"].get<bool>();
        }
    }
    if (root.contains("probes"))
    {
        const auto &p = root["probes"];
        only_keys(p, "/probes", {"eval", "calibration"});
        c.probes_configured = true;
        if (p.contains("eval"))
            g.eval_probes = get_count(p["eval"], "/probes/eval");
        if (p.contains("calibration"))
            g.calibration_probes = get_count(p["calibration"], "/probes/calibration");
    }
    if (root.contains("output_dir"))
        c.output_dir = get_string(root["output_dir"], "/output_dir");
    if (root.contains("workers"))
    {
        g.workers = get_count(root["workers"], "/workers");
        if (g.workers == 0)
            fail("/workers", "must be >= 1");
    }
    try
    {
        g.validate();
    }
    catch (const std::invalid_argument &e)
    {
        fail("/grid", e.what());
    }
    return c;
}

Config load_config(const std::filesystem::path &path)
{
    std::ifstream in(path);
    if (!in)
        throw std::invalid_argument("cannot read config '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string Config::canonical_json() const
{
    const auto &s = pipeline;
    ojson j;
    j["model"] = model;
    j["pipeline"] = {{"d_model", s.d_model},
                     {"vision_blocks", s.vision_blocks},
                     {"connector_blocks", s.connector_blocks},
                     {"language_blocks", s.language_blocks},
                     {"heads", s.heads},
                     {"ffn_mult", s.ffn_mult},
                     {"patch_count", s.patch_count},
                     {"patch_dim", s.patch_dim},
                     {"vocab", s.vocab},
                     {"num_queries", s.num_queries},
                     {"max_positions", s.max_positions},
                     {"connector_kind", std::string(to_string(s.connector_kind))},
                     {"seed", s.seed}};
    ojson tasks = ojson::array();
    for (auto t : grid.tasks)
        tasks.push_back(std::string(to_string(t)));
    j["grid"] = {{"bits", grid.bits},
                 {"sota_bits", grid.sota_bits},
                 {"component_subsets", subset_list(grid.component_subsets)},
                 {"group_subsets", subset_list(grid.group_subsets)},
                 {"layer_type_subsets", subset_list(grid.layer_type_subsets)},
                 {"tasks", tasks},
                 {"seeds", grid.seeds},
                 {"uniform_method", std::string(to_string(grid.uniform_method))},
                 {"group_size", grid.group_size},
                 {"record_wall_time", grid.record_wall_time}};
    j["probes"] = {{"configured", probes_configured},
                   {"eval", grid.eval_probes},
                   {"calibration", grid.calibration_probes}};
    // output_dir and workers do not change results and stay out of the hash.
    return j.dump();
}

std::string Config::hash() const
{
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_json())));
    return hex;
}

} // namespace mmq

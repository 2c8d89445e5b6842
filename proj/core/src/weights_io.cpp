#include "mmq/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace mmq
{

namespace
{

constexpr char kMagic[4] = {'M', 'M', 'Q', 'W'};

template <class T>
void put(std::vector<std::uint8_t> &out, T v)
{
    for (std::size_t i = 0; i < sizeof(T); ++i)
        out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
}

class Reader
{
  public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <class T>
    T get()
    {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }

    std::span<const std::uint8_t> take(std::size_t n)
    {
        need(n);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const noexcept { return pos_ == bytes_.size(); }

  private:
    void need(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n)
            throw std::runtime_error("weights container truncated at byte " + std::to_string(pos_));
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> encode_tensors(const std::map<std::string, Matrix> &tensors)
{
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put<std::uint32_t>(out, kWeightsVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto &[name, m] : tensors)
    {
        if (name.size() > 0xffff)
            throw std::invalid_argument("tensor name too long: " + name.substr(0, 32) + "...");
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put<std::uint8_t>(out, 0);
        put<std::uint8_t>(out, 2);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
        for (float v : m.data())
            put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

std::map<std::string, Matrix> decode_tensors(std::span<const std::uint8_t> bytes)
{
    Reader r(bytes);
    const auto magic = r.take(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw std::runtime_error("not a weights container (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kWeightsVersion)
        throw std::runtime_error("unsupported weights container version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::map<std::string, Matrix> out;
    for (std::uint32_t e = 0; e < count; ++e)
    {
        const auto len = r.get<std::uint16_t>();
        const auto raw = r.take(len);
        std::string name(raw.begin(), raw.end());
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != 0)
            throw std::runtime_error("tensor '" + name + "': unsupported dtype " + std::to_string(dtype));
        const auto rank = r.get<std::uint8_t>();
        if (rank != 1 && rank != 2)
            throw std::runtime_error("tensor '" + name + "': unsupported rank " + std::to_string(rank));
        std::size_t rows = 1;
        if (rank == 2)
            rows = r.get<std::uint32_t>();
        const std::size_t cols = r.get<std::uint32_t>();
        if (rows != 0 && cols > bytes.size() / 4 / rows)
            throw std::runtime_error("tensor '" + name + "': payload larger than file");
        std::vector<float> data(rows * cols);
        for (auto &v : data)
            v = std::bit_cast<float>(r.get<std::uint32_t>());
        if (!out.emplace(name, Matrix(rows, cols, std::move(data))).second)
            throw std::runtime_error("duplicate tensor '" + name + "'");
    }
    if (!r.done())
        throw std::runtime_error("trailing bytes after last tensor");
    return out;
}

void save_tensors(const std::map<std::string, Matrix> &tensors, const std::filesystem::path &path)
{
    const auto bytes = encode_tensors(tensors);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw std::runtime_error("failed writing '" + path.string() + "'");
}

std::map<std::string, Matrix> load_tensors(const std::filesystem::path &path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open '" + path.string() + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tensors(bytes);
}

std::map<std::string, Matrix> model_tensors(const ModelWeights &w)
{
    std::map<std::string, Matrix> out;
    for (std::size_t i = 0; i < w.layer_count(); ++i)
        out.emplace(w.layers()[i].name(), w.linear(i));
    for (const auto &[name, m] : w.params())
        out.emplace(name, *m);
    return out;
}

void save_weights(const ModelWeights &w, const std::filesystem::path &path)
{
    save_tensors(model_tensors(w), path);
}

ModelWeights load_weights(const PipelineSpec &spec, const std::filesystem::path &path)
{
    return ModelWeights::from_parts(spec, load_tensors(path));
}

} // namespace mmq

#include "ddvi/pipeline/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ddvi::pipeline
{

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace
{

constexpr std::size_t magic_len = sizeof(checkpoint_magic) - 1;

void put_u64(std::string& out, std::uint64_t v)
{
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

class Reader
{
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }

    std::uint64_t u64(const char* what)
    {
        need(8, what);
        std::uint64_t v = 0;
        std::memcpy(&v, bytes_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }

    std::string str(std::uint64_t n, const char* what)
    {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void doubles(std::vector<double>& out, std::uint64_t n, const char* what)
    {
        if (n > (bytes_.size() - pos_) / 8)
            truncated(what);
        out.resize(n);
        if (n > 0)
            std::memcpy(out.data(), bytes_.data() + pos_, n * 8);
        pos_ += n * 8;
    }

private:
    void need(std::uint64_t n, const char* what)
    {
        if (n > bytes_.size() - pos_)
            truncated(what);
    }

    [[noreturn]] void truncated(const char* what) const
    {
        throw ValidationError(detail::concat("checkpoint truncated while reading ", what, " at byte ", pos_));
    }

    const std::string& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

void Checkpoint::put(const std::string& name, const Matrix& m)
{
    NamedArray a;
    a.name = name;
    a.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
    a.data.reserve(static_cast<std::size_t>(m.size()));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j)
            a.data.push_back(m(i, j));
    for (NamedArray& existing : arrays)
        if (existing.name == name) {
            existing = std::move(a);
            return;
        }
    arrays.push_back(std::move(a));
}

bool Checkpoint::has(const std::string& name) const
{
    for (const NamedArray& a : arrays)
        if (a.name == name)
            return true;
    return false;
}

const NamedArray& Checkpoint::get(const std::string& name) const
{
    for (const NamedArray& a : arrays)
        if (a.name == name)
            return a;
    throw ValidationError("checkpoint has no array '" + name + "'");
}

Matrix Checkpoint::matrix(const std::string& name) const
{
    const NamedArray& a = get(name);
    if (a.dims.empty() || a.dims.size() > 2)
        throw ValidationError(detail::concat("checkpoint array '", name, "' has rank ", a.dims.size()));
    const auto rows = static_cast<Index>(a.dims[0]);
    const auto cols = a.dims.size() == 2 ? static_cast<Index>(a.dims[1]) : Index{1};
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j)
            m(i, j) = a.data[static_cast<std::size_t>(i * cols + j)];
    return m;
}

std::string serialize(const Checkpoint& ckpt)
{
    std::string out(checkpoint_magic, magic_len);
    put_u64(out, ckpt.config.size());
    out += ckpt.config;
    for (const NamedArray& a : ckpt.arrays) {
        std::uint64_t count = 1;
        for (const std::uint64_t d : a.dims)
            count *= d;
        if (count != a.data.size())
            throw ValidationError(detail::concat("checkpoint array '", a.name, "' has ", a.data.size(),
                                                 " values for its dims"));
        put_u64(out, a.name.size());
        out += a.name;
        put_u64(out, a.dims.size());
        for (const std::uint64_t d : a.dims)
            put_u64(out, d);
        out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(double));
    }
    return out;
}

Checkpoint deserialize(const std::string& bytes)
{
    if (bytes.size() < magic_len || bytes.compare(0, magic_len, checkpoint_magic) != 0)
        throw ValidationError("not a checkpoint file (bad magic)");
    const std::string body = bytes.substr(magic_len);
    Reader r(body);
    Checkpoint ckpt;
    ckpt.config = r.str(r.u64("config length"), "config");
    while (!r.done()) {
        NamedArray a;
        a.name = r.str(r.u64("name length"), "name");
        const std::uint64_t rank = r.u64("rank");
        if (rank > 8)
            throw ValidationError(detail::concat("checkpoint array '", a.name, "' has implausible rank ", rank));
        std::uint64_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            a.dims.push_back(r.u64("dims"));
            count *= a.dims.back();
        }
        r.doubles(a.data, count, "array data");
        ckpt.arrays.push_back(std::move(a));
    }
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt)
{
    const std::string bytes = serialize(ckpt);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw ValidationError("cannot write checkpoint '" + tmp + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out)
            throw ValidationError("failed writing checkpoint '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw ValidationError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ValidationError("cannot open checkpoint '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

} // namespace ddvi::pipeline

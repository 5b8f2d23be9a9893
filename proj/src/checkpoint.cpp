#include "wxr/checkpoint.hpp"

#include "wxr/digest.hpp"
#include "wxr/errors.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace wxr {

namespace {

constexpr char kMagic[4] = {'W', 'X', 'R', 'C'};
constexpr uint32_t kVersion = 1;

uint8_t dtype_code(torch::ScalarType t)
{
    switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    case torch::kUInt8: return 3;
    default: throw IoError(std::string("checkpoint: unsupported dtype ") + c10::toString(t));
    }
}

torch::ScalarType code_dtype(uint8_t c)
{
    switch (c) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    case 3: return torch::kUInt8;
    default: throw IoError("checkpoint: unknown dtype code " + std::to_string(c));
    }
}

class Writer {
public:
    template <typename T>
    void pod(const T& v)
    {
        raw(&v, sizeof(T));
    }
    void raw(const void* p, size_t n)
    {
        const auto* b = static_cast<const char*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    std::vector<char> buf;
};

class Reader {
public:
    Reader(const std::vector<char>& b, size_t end) : buf(b), limit(end) {}
    template <typename T>
    T pod()
    {
        T v;
        raw(&v, sizeof(T));
        return v;
    }
    void raw(void* p, size_t n)
    {
        if (n > limit - pos)
            throw IoError("checkpoint: truncated file");
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    const std::vector<char>& buf;
    size_t limit;
    size_t pos = 0;
};

} // namespace

void save_archive(const std::filesystem::path& file, const Archive& archive)
{
    Writer w;
    w.raw(kMagic, 4);
    w.pod(kVersion);
    const auto meta = archive.meta.dump();
    w.pod(static_cast<uint64_t>(meta.size()));
    w.raw(meta.data(), meta.size());
    w.pod(static_cast<uint32_t>(archive.tensors.size()));
    for (const auto& [name, tensor] : archive.tensors) {
        auto t = tensor.detach().cpu().contiguous();
        w.pod(static_cast<uint32_t>(name.size()));
        w.raw(name.data(), name.size());
        w.pod(dtype_code(t.scalar_type()));
        w.pod(static_cast<uint32_t>(t.dim()));
        for (auto s : t.sizes())
            w.pod(static_cast<int64_t>(s));
        w.raw(t.data_ptr(), t.nbytes());
    }
    w.pod(fnv1a64(std::as_bytes(std::span(w.buf.data(), w.buf.size()))));

    if (file.has_parent_path())
        std::filesystem::create_directories(file.parent_path());
    auto tmp = file;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
        if (!out)
            throw IoError("cannot write checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, file);
}

Archive load_archive(const std::filesystem::path& file)
{
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw IoError("cannot open checkpoint " + file.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 + 4 + 8 + 4 + 8 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw IoError(file.string() + " is not a checkpoint");
    const auto body = buf.size() - sizeof(uint64_t);
    uint64_t stored;
    std::memcpy(&stored, buf.data() + body, sizeof stored);
    if (stored != fnv1a64(std::as_bytes(std::span(buf.data(), body))))
        throw IoError("checkpoint " + file.string() + " failed its checksum");

    Reader r(buf, body);
    r.pos = 4;
    if (auto v = r.pod<uint32_t>(); v != kVersion)
        throw IoError("checkpoint version " + std::to_string(v) + " is not supported");
    Archive a;
    std::string meta(r.pod<uint64_t>(), '\0');
    r.raw(meta.data(), meta.size());
    a.meta = nlohmann::json::parse(meta);
    const auto count = r.pod<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name(r.pod<uint32_t>(), '\0');
        r.raw(name.data(), name.size());
        const auto dtype = code_dtype(r.pod<uint8_t>());
        std::vector<int64_t> dims(r.pod<uint32_t>());
        for (auto& d : dims)
            d = r.pod<int64_t>();
        auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
        r.raw(t.data_ptr(), t.nbytes());
        a.tensors.emplace(std::move(name), t);
    }
    return a;
}

void put_module(Archive& archive, const std::string& prefix, const torch::nn::Module& module)
{
    for (const auto& p : module.named_parameters())
        archive.tensors[prefix + p.key()] = p.value().detach().clone();
    for (const auto& b : module.named_buffers())
        archive.tensors[prefix + b.key()] = b.value().detach().clone();
}

void get_module(const Archive& archive, const std::string& prefix, torch::nn::Module& module)
{
    torch::NoGradGuard guard;
    auto restore = [&](const std::string& name, torch::Tensor& dst) {
        auto it = archive.tensors.find(prefix + name);
        if (it == archive.tensors.end())
            throw IoError("checkpoint is missing tensor '" + prefix + name + "'");
        if (it->second.sizes() != dst.sizes())
            throw IoError("checkpoint tensor '" + prefix + name + "' has a different shape");
        dst.copy_(it->second);
    };
    for (auto& p : module.named_parameters())
        restore(p.key(), p.value());
    for (auto& b : module.named_buffers())
        restore(b.key(), b.value());
}

} // namespace wxr

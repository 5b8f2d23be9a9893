#include "wxr/teacher.hpp"

#include "wxr/digest.hpp"
#include "wxr/errors.hpp"

#include <torch/script.h>

#include <ATen/CPUGeneratorImpl.h>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace wxr {

void TeacherSpec::validate() const
{
    if (stage_channels.empty() || stage_channels.size() != stage_strides.size())
        throw ConfigError("teacher '" + name + "': stage_channels and stage_strides must be equal, non-empty lists");
    for (size_t i = 1; i < stage_strides.size(); ++i)
        if (stage_strides[i] % stage_strides[i - 1] != 0)
            throw ConfigError("teacher '" + name + "': stage strides must be cumulative multiples");
    for (auto s : distill_stages)
        if (s < 1 || s > static_cast<int64_t>(stage_channels.size()))
            throw ConfigError("teacher '" + name + "': distill stage " + std::to_string(s) + " out of range");
    if (global_dim < 1)
        throw ConfigError("teacher '" + name + "': global_dim must be positive");
}

// ---------------------------------------------------------------------------

PromptSet PromptSet::weather_default()
{
    return {{"snow", "raindrop", "rainhaze"}, {"snow", "raindrops", "heavy rain and haze"}};
}

std::vector<std::string> PromptSet::prompts() const
{
    std::vector<std::string> out;
    out.reserve(phrases.size());
    for (const auto& p : phrases)
        out.push_back("An image with " + p);
    return out;
}

int64_t PromptSet::index_of(const std::string& cls) const
{
    for (size_t i = 0; i < classes.size(); ++i)
        if (classes[i] == cls)
            return static_cast<int64_t>(i);
    std::string valid;
    for (const auto& c : classes)
        valid += (valid.empty() ? "" : ", ") + c;
    throw ConfigError("unknown weather class '" + cls + "' (valid: " + valid + ")");
}

// ---------------------------------------------------------------------------

Teacher::Teacher(TeacherSpec spec) : spec_(std::move(spec))
{
    spec_.validate();
}

torch::Tensor Teacher::preprocess(const torch::Tensor& images) const
{
    if (images.dim() != 4 || images.size(1) != 3)
        throw ConfigError("teacher expects B x 3 x H x W images");
    auto x = images.detach().to(torch::kFloat32);
    if (spec_.input_size > 0 && (x.size(2) != spec_.input_size || x.size(3) != spec_.input_size))
        x = F::interpolate(x, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{spec_.input_size, spec_.input_size})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
    auto mean = torch::tensor({spec_.mean[0], spec_.mean[1], spec_.mean[2]}, torch::kFloat32).view({1, 3, 1, 1});
    auto std = torch::tensor({spec_.std[0], spec_.std[1], spec_.std[2]}, torch::kFloat32).view({1, 3, 1, 1});
    return (x - mean) / std;
}

std::vector<torch::Tensor> Teacher::extract_stage_features(const torch::Tensor& images)
{
    torch::NoGradGuard guard;
    auto stages = all_stages(preprocess(images));
    std::vector<torch::Tensor> out;
    for (auto s : spec_.distill_stages)
        out.push_back(stages.at(static_cast<size_t>(s - 1)));
    return out;
}

torch::Tensor Teacher::extract_global_embedding(const torch::Tensor& images)
{
    torch::NoGradGuard guard;
    return global(preprocess(images));
}

torch::Tensor Teacher::text_class_embeddings(const PromptSet& prompts)
{
    torch::NoGradGuard guard;
    auto table = text(prompts.prompts()).to(torch::kFloat32);
    return table / table.norm(2, 1, true).clamp_min(1e-12);
}

TeacherFeatures Teacher::extract(const torch::Tensor& images)
{
    return {extract_stage_features(images), extract_global_embedding(images)};
}

// ---------------------------------------------------------------------------

struct StubTeacher::Net {
    std::vector<torch::Tensor> weights;
    std::vector<torch::Tensor> biases;
    std::vector<int64_t> strides;
    torch::Tensor global_proj;
};

StubTeacher::StubTeacher(TeacherSpec spec, uint64_t seed) : Teacher(std::move(spec)), net_(std::make_unique<Net>()),
                                                            seed_(seed)
{
    auto gen = at::detail::createCPUGenerator(seed);
    int64_t in_ch = 3;
    int64_t prev_stride = 1;
    int64_t pooled = 0;
    for (size_t i = 0; i < spec_.stage_channels.size(); ++i) {
        const auto out_ch = spec_.stage_channels[i];
        const auto stride = spec_.stage_strides[i] / prev_stride;
        const int64_t k = stride >= 4 ? 2 * stride - 1 : 3;
        const double scale = std::sqrt(2.0 / static_cast<double>(in_ch * k * k));
        net_->weights.push_back(torch::randn({out_ch, in_ch, k, k}, gen, torch::kFloat32) * scale);
        net_->biases.push_back(torch::randn({out_ch}, gen, torch::kFloat32) * 0.1);
        net_->strides.push_back(stride);
        pooled += 2 * out_ch;
        in_ch = out_ch;
        prev_stride = spec_.stage_strides[i];
    }
    net_->global_proj = torch::randn({spec_.global_dim, pooled}, gen, torch::kFloat32) /
                        std::sqrt(static_cast<double>(pooled));
}

StubTeacher::~StubTeacher() = default;

std::vector<torch::Tensor> StubTeacher::all_stages(const torch::Tensor& x)
{
    std::vector<torch::Tensor> out;
    auto h = x;
    for (size_t i = 0; i < net_->weights.size(); ++i) {
        const auto k = net_->weights[i].size(-1);
        h = torch::gelu(F::conv2d(h, net_->weights[i],
                                  F::Conv2dFuncOptions().bias(net_->biases[i]).stride(net_->strides[i]).padding(k / 2)));
        out.push_back(h);
    }
    return out;
}

torch::Tensor StubTeacher::global(const torch::Tensor& x)
{
    std::vector<torch::Tensor> pooled;
    for (const auto& f : all_stages(x)) {
        pooled.push_back(f.mean({2, 3}));
        pooled.push_back(f.std({2, 3}, /*unbiased=*/false));
    }
    return torch::matmul(torch::cat(pooled, 1), net_->global_proj.t());
}

torch::Tensor StubTeacher::text(const std::vector<std::string>& prompts)
{
    std::vector<torch::Tensor> rows;
    for (const auto& p : prompts) {
        auto gen = at::detail::createCPUGenerator(fnv1a64(p) ^ seed_);
        rows.push_back(torch::randn({spec_.global_dim}, gen, torch::kFloat32));
    }
    return torch::stack(rows);
}

uint64_t StubTeacher::parameter_digest() const
{
    uint64_t h = fnv1a64(spec_.name);
    for (const auto& w : net_->weights)
        h = tensor_digest(w, h);
    for (const auto& b : net_->biases)
        h = tensor_digest(b, h);
    return tensor_digest(net_->global_proj, h);
}

// ---------------------------------------------------------------------------

struct TorchScriptTeacher::Impl {
    torch::jit::script::Module module;
    std::map<std::string, torch::Tensor> text_rows;
};

TorchScriptTeacher::TorchScriptTeacher(TeacherSpec spec, const fs::path& file)
    : Teacher(std::move(spec)), impl_(std::make_unique<Impl>())
{
    try {
        impl_->module = torch::jit::load(file.string());
    } catch (const c10::Error& e) {
        throw TeacherLoadError("failed to load teacher '" + spec_.name + "' from " + file.string() + ": " +
                               e.what_without_backtrace());
    }
    impl_->module.eval();
    for (auto p : impl_->module.parameters())
        p.set_requires_grad(false);
    if (!impl_->module.find_method("stage_features") || !impl_->module.find_method("global_embedding"))
        throw TeacherLoadError("teacher '" + spec_.name + "' (" + file.string() +
                               ") must define stage_features() and global_embedding()");
    if (impl_->module.hasattr("prompts") && impl_->module.hasattr("text_table")) {
        auto prompts = impl_->module.attr("prompts").toListRef();
        auto table = impl_->module.attr("text_table").toTensor();
        for (size_t i = 0; i < prompts.size(); ++i)
            impl_->text_rows[prompts[i].toStringRef()] = table[static_cast<int64_t>(i)].clone();
    }
}

TorchScriptTeacher::~TorchScriptTeacher() = default;

std::vector<torch::Tensor> TorchScriptTeacher::all_stages(const torch::Tensor& x)
{
    auto result = impl_->module.get_method("stage_features")({x});
    std::vector<torch::Tensor> out;
    for (const auto& t : result.toTensorList())
        out.push_back(t);
    if (out.size() != spec_.stage_channels.size())
        throw ConfigError("teacher '" + spec_.name + "' returned " + std::to_string(out.size()) + " stages, spec has " +
                          std::to_string(spec_.stage_channels.size()));
    return out;
}

torch::Tensor TorchScriptTeacher::global(const torch::Tensor& x)
{
    auto g = impl_->module.get_method("global_embedding")({x}).toTensor();
    if (g.dim() != 2 || g.size(1) != spec_.global_dim)
        throw ConfigError("teacher '" + spec_.name + "' global embedding has dim " + std::to_string(g.size(-1)) +
                          ", spec says " + std::to_string(spec_.global_dim));
    return g;
}

torch::Tensor TorchScriptTeacher::text(const std::vector<std::string>& prompts)
{
    std::vector<torch::Tensor> rows;
    for (const auto& p : prompts) {
        auto it = impl_->text_rows.find(p);
        if (it == impl_->text_rows.end())
            throw TeacherLoadError("teacher '" + spec_.name + "' has no exported text embedding for prompt \"" + p +
                                   "\"; re-export with this prompt set");
        rows.push_back(it->second);
    }
    return torch::stack(rows);
}

uint64_t TorchScriptTeacher::parameter_digest() const
{
    uint64_t h = fnv1a64(spec_.name);
    for (const auto& p : impl_->module.named_parameters())
        h = tensor_digest(p.value, fnv1a64(p.name, h));
    for (const auto& b : impl_->module.named_buffers())
        h = tensor_digest(b.value, fnv1a64(b.name, h));
    return h;
}

// ---------------------------------------------------------------------------

std::unique_ptr<Teacher> make_teacher(const TeacherOptions& options)
{
    auto spec = options.spec;
    spec.name = options.name;
    if (options.kind == "stub")
        return std::make_unique<StubTeacher>(spec, options.seed);
    if (options.kind == "torchscript") {
        fs::path dir = options.dir;
        if (dir.empty()) {
            if (const char* env = std::getenv("WXR_TEACHER_DIR"))
                dir = env;
        }
        const auto file = dir / (options.name + ".pt");
        if (dir.empty() || !fs::exists(file))
            throw TeacherLoadError("teacher weights not found at '" + file.string() +
                                   "'. Export them with `python3 tools/export_teacher.py --name " + options.name +
                                   " --out <dir>` and pass the directory via the teacher 'dir' setting or "
                                   "WXR_TEACHER_DIR, or use kind \"stub\".");
        return std::make_unique<TorchScriptTeacher>(spec, file);
    }
    throw ConfigError("unknown teacher kind '" + options.kind + "' (valid: stub, torchscript)");
}

// ---------------------------------------------------------------------------

torch::Tensor channel_match(const torch::Tensor& feature, int64_t target_channels)
{
    if (feature.dim() != 4 || feature.size(1) < 1)
        throw ConfigError("channel_match expects B x C x H x W with C >= 1");
    if (target_channels < 1)
        throw ConfigError("channel_match: target_channels must be >= 1");
    const auto b = feature.size(0);
    const auto c = feature.size(1);
    const auto h = feature.size(2);
    const auto w = feature.size(3);
    if (c == target_channels)
        return feature;
    auto flat = feature.permute({0, 2, 3, 1}).reshape({b * h * w, 1, c});
    auto pooled = F::adaptive_avg_pool1d(flat, F::AdaptiveAvgPool1dFuncOptions(target_channels));
    return pooled.reshape({b, h, w, target_channels}).permute({0, 3, 1, 2});
}

torch::Tensor resize_match(const torch::Tensor& feature, int64_t height, int64_t width)
{
    if (feature.size(2) == height && feature.size(3) == width)
        return feature;
    return F::interpolate(feature, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{height, width})
                                       .mode(torch::kBilinear)
                                       .align_corners(false));
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kCacheMagic[4] = {'W', 'X', 'R', 'F'};
constexpr uint32_t kCacheVersion = 1;

template <typename T>
void put(std::string& buf, T v)
{
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& pos)
{
    if (pos + sizeof(T) > buf.size())
        throw IoError("feature cache blob truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

FeatureCache::FeatureCache(fs::path dir) : dir_(std::move(dir))
{
    if (dir_.empty()) {
        if (const char* env = std::getenv("WXR_CACHE_DIR"))
            dir_ = env;
    }
    if (!dir_.empty())
        fs::create_directories(dir_);
}

std::string FeatureCache::key(const std::string& teacher_name, const torch::Tensor& image)
{
    return teacher_name + "-" + hex64(tensor_digest(image.to(torch::kFloat32)));
}

void FeatureCache::write_blob(const fs::path& file, const std::string& teacher_name, const TeacherFeatures& features)
{
    std::string buf(kCacheMagic, 4);
    put<uint32_t>(buf, kCacheVersion);
    put<uint32_t>(buf, static_cast<uint32_t>(teacher_name.size()));
    buf += teacher_name;
    std::vector<torch::Tensor> tensors = features.stage_features;
    tensors.push_back(features.global_embedding);
    put<uint32_t>(buf, static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        auto c = t.detach().to(torch::kFloat32).contiguous();
        put<uint32_t>(buf, static_cast<uint32_t>(c.dim()));
        for (auto s : c.sizes())
            put<int64_t>(buf, s);
        buf.append(static_cast<const char*>(c.data_ptr()), c.nbytes());
    }
    put<uint64_t>(buf, fnv1a64(std::string_view(buf)));

    auto tmp = file;
    tmp += ".tmp" + std::to_string(reinterpret_cast<uintptr_t>(&buf));
    {
        std::ofstream os(tmp, std::ios::binary);
        os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!os)
            throw IoError("failed to write feature cache " + tmp.string());
    }
    fs::rename(tmp, file);
}

TeacherFeatures FeatureCache::read_blob(const fs::path& file, const std::string& teacher_name)
{
    std::ifstream is(file, std::ios::binary);
    if (!is)
        throw IoError("cannot open feature cache " + file.string());
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 + 8 || std::memcmp(buf.data(), kCacheMagic, 4) != 0)
        throw IoError("bad feature cache magic in " + file.string());
    const auto payload = buf.size() - sizeof(uint64_t);
    size_t tail = payload;
    if (take<uint64_t>(buf, tail) != fnv1a64(std::string_view(buf.data(), payload)))
        throw IoError("feature cache checksum mismatch in " + file.string());

    size_t pos = 4;
    if (take<uint32_t>(buf, pos) != kCacheVersion)
        throw IoError("unsupported feature cache version in " + file.string());
    const auto name_len = take<uint32_t>(buf, pos);
    if (pos + name_len > payload || buf.compare(pos, name_len, teacher_name) != 0 || name_len != teacher_name.size())
        throw IoError("feature cache " + file.string() + " belongs to a different teacher");
    pos += name_len;
    const auto count = take<uint32_t>(buf, pos);
    std::vector<torch::Tensor> tensors;
    for (uint32_t i = 0; i < count; ++i) {
        const auto ndim = take<uint32_t>(buf, pos);
        std::vector<int64_t> shape;
        for (uint32_t d = 0; d < ndim; ++d)
            shape.push_back(take<int64_t>(buf, pos));
        auto t = torch::empty(shape, torch::kFloat32);
        if (pos + t.nbytes() > payload)
            throw IoError("feature cache blob truncated: " + file.string());
        std::memcpy(t.data_ptr(), buf.data() + pos, t.nbytes());
        pos += t.nbytes();
        tensors.push_back(t);
    }
    if (tensors.empty())
        throw IoError("feature cache blob has no tensors: " + file.string());
    TeacherFeatures out;
    out.global_embedding = tensors.back();
    tensors.pop_back();
    out.stage_features = std::move(tensors);
    return out;
}

std::optional<TeacherFeatures> FeatureCache::lookup(const std::string& teacher_name, const torch::Tensor& image)
{
    const auto k = key(teacher_name, image);
    std::lock_guard lock(mutex_);
    if (auto it = memory_.find(k); it != memory_.end())
        return it->second;
    if (!dir_.empty()) {
        const auto file = dir_ / (k + ".bin");
        if (fs::exists(file)) {
            auto f = read_blob(file, teacher_name);
            memory_[k] = f;
            return f;
        }
    }
    return std::nullopt;
}

void FeatureCache::store(const std::string& teacher_name, const torch::Tensor& image, const TeacherFeatures& features)
{
    const auto k = key(teacher_name, image);
    std::lock_guard lock(mutex_);
    memory_[k] = features;
    if (!dir_.empty())
        write_blob(dir_ / (k + ".bin"), teacher_name, features);
}

TeacherFeatures FeatureCache::get_or_compute(Teacher& teacher, const torch::Tensor& image)
{
    if (image.dim() != 3)
        throw ConfigError("feature cache expects a single C x H x W image");
    if (auto hit = lookup(teacher.spec().name, image)) {
        ++hits_;
        return *hit;
    }
    ++misses_;
    auto batch = teacher.extract(image.unsqueeze(0));
    TeacherFeatures single;
    for (const auto& f : batch.stage_features)
        single.stage_features.push_back(f[0].contiguous());
    single.global_embedding = batch.global_embedding[0].contiguous();
    store(teacher.spec().name, image, single);
    return single;
}

TeacherFeatures FeatureCache::get_or_compute_batch(Teacher& teacher, const torch::Tensor& images)
{
    std::vector<TeacherFeatures> per;
    for (int64_t i = 0; i < images.size(0); ++i)
        per.push_back(get_or_compute(teacher, images[i]));
    TeacherFeatures out;
    for (size_t s = 0; s < per.front().stage_features.size(); ++s) {
        std::vector<torch::Tensor> parts;
        for (const auto& p : per)
            parts.push_back(p.stage_features[s]);
        out.stage_features.push_back(torch::stack(parts));
    }
    std::vector<torch::Tensor> globals;
    for (const auto& p : per)
        globals.push_back(p.global_embedding);
    out.global_embedding = torch::stack(globals);
    return out;
}

} // namespace wxr

#include "wxr/weather_synth.hpp"

#include "wxr/digest.hpp"
#include "wxr/errors.hpp"
#include "wxr/image_io.hpp"

#include <json.hpp>

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace wxr {

std::string to_string(WeatherClass c)
{
    switch (c) {
    case WeatherClass::Snow:
        return "snow";
    case WeatherClass::Raindrop:
        return "raindrop";
    case WeatherClass::RainHaze:
        return "rainhaze";
    }
    return "unknown";
}

WeatherClass weather_class_from_string(const std::string& name)
{
    if (name == "snow")
        return WeatherClass::Snow;
    if (name == "raindrop")
        return WeatherClass::Raindrop;
    if (name == "rainhaze")
        return WeatherClass::RainHaze;
    throw ConfigError("unknown weather class '" + name + "' (valid: snow, raindrop, rainhaze)");
}

torch::Tensor one_hot_label(WeatherClass c)
{
    auto label = torch::zeros({kNumWeatherClasses}, torch::kFloat32);
    label[static_cast<int64_t>(c)] = 1.0;
    return label;
}

// ---------------------------------------------------------------------------

namespace {

void check_image(const torch::Tensor& clean)
{
    if (clean.dim() != 3 || clean.size(0) != 3)
        throw ConfigError("weather synthesis expects a 3 x H x W image");
}

void check_map(const torch::Tensor& map, const torch::Tensor& clean, const char* what)
{
    if (map.dim() != 2 || map.size(0) != clean.size(1) || map.size(1) != clean.size(2))
        throw ConfigError(std::string(what) + " must be H x W matching the image");
}

uint64_t splitmix64(uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double uniform(at::Generator& gen, double lo, double hi)
{
    return lo + (hi - lo) * torch::rand({1}, gen, torch::kFloat64).item<double>();
}

int64_t randint(at::Generator& gen, int64_t lo, int64_t hi_inclusive)
{
    return torch::randint(lo, hi_inclusive + 1, {1}, gen, torch::kInt64).item<int64_t>();
}

// Separable Gaussian blur of a C x H x W (or H x W) tensor with replicate padding.
torch::Tensor gaussian_blur(const torch::Tensor& x, double sigma)
{
    if (sigma <= 0.0)
        return x;
    const bool plane = x.dim() == 2;
    auto img = plane ? x.unsqueeze(0) : x;
    const auto channels = img.size(0);
    const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
    auto coords = torch::arange(-radius, radius + 1, img.options());
    auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
    g = g / g.sum();
    auto in = F::pad(img.unsqueeze(0), F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
    auto kx = g.view({1, 1, 1, -1}).repeat({channels, 1, 1, 1});
    auto ky = g.view({1, 1, -1, 1}).repeat({channels, 1, 1, 1});
    auto out = F::conv2d(F::conv2d(in, kx, F::Conv2dFuncOptions().groups(channels)), ky,
                         F::Conv2dFuncOptions().groups(channels));
    out = out.squeeze(0);
    return plane ? out.squeeze(0) : out;
}

// Smooth random field in [0, 1].
torch::Tensor smooth_field(int64_t h, int64_t w, double sigma, at::Generator& gen)
{
    auto f = gaussian_blur(torch::rand({h, w}, gen, torch::kFloat32), sigma);
    auto lo = f.min();
    auto hi = f.max();
    return (f - lo) / (hi - lo + 1e-6);
}

// Rasterized line segment of the given length and angle (radians from vertical), unit sum.
torch::Tensor motion_kernel(double length, double angle)
{
    const int64_t size = std::max<int64_t>(3, static_cast<int64_t>(std::ceil(length)) | 1);
    auto k = torch::zeros({size, size}, torch::kFloat32);
    auto acc = k.accessor<float, 2>();
    const double c = static_cast<double>(size - 1) / 2.0;
    const int samples = static_cast<int>(length * 4.0) + 1;
    for (int s = 0; s < samples; ++s) {
        const double t = (samples == 1 ? 0.0 : static_cast<double>(s) / (samples - 1) - 0.5) * length;
        const double y = c + t * std::cos(angle);
        const double x = c + t * std::sin(angle);
        const auto y0 = static_cast<int64_t>(std::floor(y));
        const auto x0 = static_cast<int64_t>(std::floor(x));
        const double fy = y - static_cast<double>(y0);
        const double fx = x - static_cast<double>(x0);
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const auto yy = y0 + dy;
                const auto xx = x0 + dx;
                if (yy < 0 || xx < 0 || yy >= size || xx >= size)
                    continue;
                acc[yy][xx] += static_cast<float>((dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx));
            }
    }
    return k / k.sum();
}

uint64_t digest_all(std::initializer_list<torch::Tensor> tensors, uint64_t h = 0xcbf29ce484222325ULL)
{
    for (const auto& t : tensors)
        h = tensor_digest(t, h);
    return h;
}

} // namespace

// ---------------------------------------------------------------------------

torch::Tensor composite_raindrop(const torch::Tensor& clean, const RaindropParams& p)
{
    check_image(clean);
    check_map(p.mask, clean, "raindrop mask");
    if (p.residual.sizes() != clean.sizes())
        throw ConfigError("raindrop residual must match the image");
    return ((1.0 - p.mask.unsqueeze(0)) * clean + p.residual).clamp(0.0, 1.0);
}

torch::Tensor composite_heavyrain(const torch::Tensor& clean, const HeavyRainParams& p)
{
    check_image(clean);
    check_map(p.transmission, clean, "transmission map");
    if (p.atmospheric_light.numel() != 1 && p.atmospheric_light.numel() != 3)
        throw ConfigError("atmospheric light must have 1 or 3 values");
    auto streaked = clean.clone();
    for (const auto& r : p.streaks) {
        if (r.sizes() != clean.sizes())
            throw ConfigError("rain streak layer must match the image");
        streaked = streaked + r;
    }
    auto t = p.transmission.unsqueeze(0);
    auto a = p.atmospheric_light.to(clean.dtype()).reshape({-1, 1, 1});
    return (t * streaked + (1.0 - t) * a).clamp(0.0, 1.0);
}

torch::Tensor composite_snow(const torch::Tensor& clean, const SnowParams& p)
{
    check_image(clean);
    check_map(p.mask, clean, "snow mask");
    if (p.flakes.sizes() != clean.sizes())
        throw ConfigError("snow flake map must match the image");
    auto m = p.mask.unsqueeze(0);
    return ((1.0 - m) * clean + m * p.flakes).clamp(0.0, 1.0);
}

// ---------------------------------------------------------------------------

RaindropParams sample_raindrop_params(const torch::Tensor& clean, const RaindropRanges& r, uint64_t seed)
{
    check_image(clean);
    auto gen = at::detail::createCPUGenerator(seed);
    const auto h = clean.size(1);
    const auto w = clean.size(2);
    const double side = static_cast<double>(std::min(h, w));
    auto ys = torch::arange(h, torch::kFloat32).view({h, 1});
    auto xs = torch::arange(w, torch::kFloat32).view({1, w});

    auto mask = torch::zeros({h, w}, torch::kFloat32);
    const auto drops = randint(gen, r.min_drops, r.max_drops);
    for (int64_t i = 0; i < drops; ++i) {
        const double cy = uniform(gen, 0.0, static_cast<double>(h));
        const double cx = uniform(gen, 0.0, static_cast<double>(w));
        const double rx = std::max(1.0, uniform(gen, r.min_radius, r.max_radius) * side);
        const double ry = rx * uniform(gen, 0.7, 1.3);
        const double opacity = uniform(gen, 0.85, 1.0);
        auto d = torch::sqrt((ys - cy).pow(2) / (ry * ry) + (xs - cx).pow(2) / (rx * rx));
        auto soft = torch::sigmoid((1.0 - d) * std::min(rx, ry) / r.edge_softness) * opacity;
        mask = torch::maximum(mask, soft);
    }
    mask = torch::where(mask < 1e-3, torch::zeros_like(mask), mask);

    // Drops act as small lenses: blurred, vertically flipped, slightly brightened scene.
    auto refracted = (gaussian_blur(clean.to(torch::kFloat32).flip({1}), r.blur_sigma) * 0.8 + 0.15).clamp(0.0, 1.0);
    return {mask, mask.unsqueeze(0) * refracted};
}

HeavyRainParams sample_heavyrain_params(const torch::Tensor& clean, const HeavyRainRanges& r, uint64_t seed)
{
    check_image(clean);
    auto gen = at::detail::createCPUGenerator(seed);
    const auto h = clean.size(1);
    const auto w = clean.size(2);
    const double side = static_cast<double>(std::min(h, w));

    HeavyRainParams p;
    const double base = uniform(gen, r.min_transmission, r.max_transmission);
    p.transmission = (base + (smooth_field(h, w, side / 4.0, gen) - 0.5) * 0.2).clamp(0.0, 1.0);

    const double angle = uniform(gen, -0.45, 0.45);
    for (int64_t layer = 0; layer < r.layers; ++layer) {
        auto drops = (torch::rand({h, w}, gen, torch::kFloat32) < r.streak_density).to(torch::kFloat32);
        drops = drops * torch::rand({h, w}, gen, torch::kFloat32);
        const double length = uniform(gen, r.min_streak_length, r.max_streak_length) * side;
        auto kernel = motion_kernel(length, angle + uniform(gen, -0.05, 0.05));
        const auto k = kernel.size(0);
        auto streak = F::conv2d(drops.view({1, 1, h, w}), kernel.view({1, 1, k, k}),
                                F::Conv2dFuncOptions().padding(k / 2))
                          .view({h, w});
        streak = streak / (streak.max() + 1e-6) * r.streak_intensity * uniform(gen, 0.5, 1.0);
        p.streaks.push_back(streak.unsqueeze(0).expand({3, h, w}).contiguous());
    }

    const double light = uniform(gen, r.min_light, r.max_light);
    if (r.chromatic_light) {
        auto jitter = (torch::rand({3}, gen, torch::kFloat32) - 0.5) * 0.1;
        p.atmospheric_light = (light + jitter).clamp(0.0, 1.0);
    } else {
        p.atmospheric_light = torch::full({1}, light, torch::kFloat32);
    }
    return p;
}

SnowParams sample_snow_params(const torch::Tensor& clean, const SnowRanges& r, uint64_t seed)
{
    check_image(clean);
    auto gen = at::detail::createCPUGenerator(seed);
    const auto h = clean.size(1);
    const auto w = clean.size(2);

    // Flakes in three size buckets: impulses blurred by a peak-normalized Gaussian.
    auto mask = torch::zeros({h, w}, torch::kFloat32);
    constexpr int kBuckets = 3;
    for (int b = 0; b < kBuckets; ++b) {
        const double sigma = r.min_sigma + (r.max_sigma - r.min_sigma) * b / (kBuckets - 1);
        const double density = r.flake_density / (1.0 + b); // fewer large flakes
        auto impulses = (torch::rand({h, w}, gen, torch::kFloat32) < density).to(torch::kFloat32);
        impulses = impulses * (0.6 + 0.4 * torch::rand({h, w}, gen, torch::kFloat32));
        const double peak = 1.0 / (2.0 * std::numbers::pi * sigma * sigma);
        mask = mask + gaussian_blur(impulses, sigma) / peak;
    }
    mask = mask.clamp(0.0, 1.0);

    const double brightness = uniform(gen, r.min_brightness, 1.0);
    auto tint = torch::tensor({brightness * 0.97, brightness * 0.98, brightness}, torch::kFloat32).view({3, 1, 1});
    return {mask, tint.expand({3, h, w}).contiguous()};
}

SynthResult synth_raindrop(const torch::Tensor& clean, const RaindropRanges& r, uint64_t seed)
{
    auto p = sample_raindrop_params(clean, r, seed);
    return {composite_raindrop(clean, p), WeatherClass::Raindrop, digest_all({p.mask, p.residual})};
}

SynthResult synth_heavyrain(const torch::Tensor& clean, const HeavyRainRanges& r, uint64_t seed)
{
    auto p = sample_heavyrain_params(clean, r, seed);
    auto d = digest_all({p.transmission, p.atmospheric_light});
    for (const auto& s : p.streaks)
        d = tensor_digest(s, d);
    return {composite_heavyrain(clean, p), WeatherClass::RainHaze, d};
}

SynthResult synth_snow(const torch::Tensor& clean, const SnowRanges& r, uint64_t seed)
{
    auto p = sample_snow_params(clean, r, seed);
    return {composite_snow(clean, p), WeatherClass::Snow, digest_all({p.mask, p.flakes})};
}

SynthResult synth_weather(const torch::Tensor& clean, WeatherClass c, uint64_t seed)
{
    switch (c) {
    case WeatherClass::Snow:
        return synth_snow(clean, {}, seed);
    case WeatherClass::Raindrop:
        return synth_raindrop(clean, {}, seed);
    case WeatherClass::RainHaze:
        return synth_heavyrain(clean, {}, seed);
    }
    throw ConfigError("unknown weather class");
}

// ---------------------------------------------------------------------------

torch::Tensor generate_clean_scene(int64_t height, int64_t width, uint64_t seed)
{
    auto gen = at::detail::createCPUGenerator(seed);
    auto ys = torch::linspace(0.0, 1.0, height, torch::kFloat32).view({1, height, 1});
    auto xs = torch::linspace(0.0, 1.0, width, torch::kFloat32).view({1, 1, width});

    auto top = torch::rand({3, 1, 1}, gen, torch::kFloat32) * 0.4 + torch::tensor({0.3f, 0.4f, 0.55f}).view({3, 1, 1});
    auto bottom = torch::rand({3, 1, 1}, gen, torch::kFloat32) * 0.5 + 0.2;
    auto img = top * (1.0 - ys) + bottom * ys;
    img = img.expand({3, height, width}).clone();

    // Textured ground below a wavy horizon.
    const double horizon = uniform(gen, 0.45, 0.7);
    const double wave = uniform(gen, 0.02, 0.08);
    const double freq = uniform(gen, 2.0, 8.0);
    auto ground_mask = (ys > horizon + wave * torch::sin(xs * freq * 2.0 * std::numbers::pi)).to(torch::kFloat32);
    auto ground_color = torch::rand({3, 1, 1}, gen, torch::kFloat32) * 0.5 + 0.1;
    auto texture = gaussian_blur(torch::rand({height, width}, gen, torch::kFloat32), 1.0).unsqueeze(0);
    auto ground = (ground_color + (texture - 0.5) * 0.35).clamp(0.0, 1.0);
    img = img * (1.0 - ground_mask) + ground * ground_mask;

    // Buildings / objects.
    const auto shapes = randint(gen, 3, 8);
    for (int64_t i = 0; i < shapes; ++i) {
        auto color = torch::rand({3, 1, 1}, gen, torch::kFloat32);
        const double cy = uniform(gen, 0.1, 0.95);
        const double cx = uniform(gen, 0.0, 1.0);
        const double hy = uniform(gen, 0.05, 0.25);
        const double hx = uniform(gen, 0.03, 0.2);
        torch::Tensor m;
        if (randint(gen, 0, 1) == 0) {
            m = ((ys - cy).abs() < hy).logical_and((xs - cx).abs() < hx).to(torch::kFloat32);
        } else {
            m = ((ys - cy).pow(2) / (hy * hy) + (xs - cx).pow(2) / (hx * hx) < 1.0).to(torch::kFloat32);
        }
        // Stripes give the shapes some high-frequency structure.
        const double stripe = uniform(gen, 10.0, 40.0);
        auto pattern = 1.0 + 0.15 * torch::sin(ys * stripe * 2.0 * std::numbers::pi);
        img = img * (1.0 - m) + (color * pattern).clamp(0.0, 1.0) * m;
    }
    return gaussian_blur(img, 0.6).clamp(0.0, 1.0).contiguous();
}

// ---------------------------------------------------------------------------

fs::path Manifest::resolve(const std::string& path) const
{
    fs::path p(path);
    return p.is_absolute() ? p : root / p;
}

Manifest read_manifest(const fs::path& file)
{
    std::ifstream is(file);
    if (!is)
        throw IoError("cannot open manifest " + file.string());
    Manifest m;
    m.root = file.parent_path();
    std::string line;
    int64_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        try {
            auto j = nlohmann::json::parse(line);
            ManifestEntry e;
            e.clean_path = j.at("clean_path").get<std::string>();
            e.weather_path = j.at("weather_path").get<std::string>();
            e.weather_class = j.at("class").get<std::string>();
            e.seed = j.value("seed", uint64_t{0});
            e.params_digest = j.value("params_digest", std::string{});
            weather_class_from_string(e.weather_class);
            m.entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw IoError(file.string() + ":" + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return m;
}

void write_manifest(const fs::path& file, const Manifest& manifest)
{
    if (file.has_parent_path())
        fs::create_directories(file.parent_path());
    std::ofstream os(file);
    if (!os)
        throw IoError("cannot write manifest " + file.string());
    for (const auto& e : manifest.entries) {
        nlohmann::ordered_json j;
        j["clean_path"] = e.clean_path;
        j["weather_path"] = e.weather_path;
        j["class"] = e.weather_class;
        j["seed"] = e.seed;
        j["params_digest"] = e.params_digest;
        os << j.dump() << '\n';
    }
}

namespace {

std::vector<fs::path> list_images(const fs::path& dir)
{
    if (!fs::is_directory(dir))
        throw IoError("clean image directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file())
            continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp")
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw IoError("no images found in " + dir.string());
    return files;
}

} // namespace

Manifest build_dataset(const fs::path& clean_dir, const fs::path& out_dir, const DatasetSpec& spec, uint64_t seed)
{
    if (spec.per_class < 1)
        throw ConfigError("per_class must be >= 1");
    const auto files = list_images(clean_dir);
    fs::create_directories(out_dir / "clean");
    fs::create_directories(out_dir / "weather");

    Manifest m;
    m.root = out_dir;
    std::set<std::string> copied;
    const WeatherClass classes[] = {WeatherClass::Snow, WeatherClass::Raindrop, WeatherClass::RainHaze};
    for (int64_t c = 0; c < kNumWeatherClasses; ++c) {
        for (int64_t i = 0; i < spec.per_class; ++i) {
            const auto& src = files[static_cast<size_t>(c * spec.per_class + i) % files.size()];
            const uint64_t item_seed = splitmix64(seed ^ (static_cast<uint64_t>(c) << 40) ^ static_cast<uint64_t>(i));
            auto clean = load_image(src);

            SynthResult res;
            switch (classes[c]) {
            case WeatherClass::Snow:
                res = synth_snow(clean, spec.snow, item_seed);
                break;
            case WeatherClass::Raindrop:
                res = synth_raindrop(clean, spec.raindrop, item_seed);
                break;
            case WeatherClass::RainHaze:
                res = synth_heavyrain(clean, spec.heavyrain, item_seed);
                break;
            }

            const auto clean_rel = "clean/" + src.stem().string() + ".png";
            if (copied.insert(clean_rel).second)
                save_image(out_dir / clean_rel, clean);
            const auto weather_rel = "weather/" + to_string(classes[c]) + "_" + std::to_string(i) + ".png";
            save_image(out_dir / weather_rel, res.weather);
            m.entries.push_back({clean_rel, weather_rel, to_string(classes[c]), item_seed, hex64(res.params_digest)});
        }
    }
    write_manifest(out_dir / "manifest.jsonl", m);
    return m;
}

void write_procedural_scenes(const fs::path& dir, int64_t count, int64_t height, int64_t width, uint64_t seed)
{
    fs::create_directories(dir);
    for (int64_t i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05lld.png", static_cast<long long>(i));
        save_image(dir / name, generate_clean_scene(height, width, splitmix64(seed + static_cast<uint64_t>(i))));
    }
}

} // namespace wxr

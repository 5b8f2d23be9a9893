#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace wxr {

// Class order matches PromptSet::weather_default().
enum class WeatherClass : int64_t { Snow = 0, Raindrop = 1, RainHaze = 2 };

inline constexpr int64_t kNumWeatherClasses = 3;

std::string to_string(WeatherClass c);
WeatherClass weather_class_from_string(const std::string& name);
// One-hot probability vector of length kNumWeatherClasses.
torch::Tensor one_hot_label(WeatherClass c);

// Images are 3 x H x W in [0, 1]; masks and transmission maps are H x W.

struct RaindropParams {
    torch::Tensor mask;     // H x W in [0, 1]
    torch::Tensor residual; // 3 x H x W, zero wherever mask is zero
};

struct HeavyRainParams {
    torch::Tensor transmission;          // H x W in [0, 1]
    std::vector<torch::Tensor> streaks;  // n layers, 3 x H x W each
    torch::Tensor atmospheric_light;     // 1 or 3 values in [0, 1]
};

struct SnowParams {
    torch::Tensor mask;   // H x W in [0, 1]
    torch::Tensor flakes; // 3 x H x W
};

// Compositing models, clipped to [0, 1]:
//   raindrop   (1 - M) * I + R
//   heavy rain T * (I + sum_i R_i) + (1 - T) * A
//   snow       (1 - M) * I + M * S
torch::Tensor composite_raindrop(const torch::Tensor& clean, const RaindropParams& p);
torch::Tensor composite_heavyrain(const torch::Tensor& clean, const HeavyRainParams& p);
torch::Tensor composite_snow(const torch::Tensor& clean, const SnowParams& p);

struct RaindropRanges {
    int64_t min_drops = 8;
    int64_t max_drops = 20;
    double min_radius = 0.03; // fraction of the shorter side
    double max_radius = 0.10;
    double edge_softness = 1.5; // pixels
    double blur_sigma = 3.0;    // refracted content inside a drop
};

struct HeavyRainRanges {
    int64_t layers = 2;
    double min_transmission = 0.45;
    double max_transmission = 0.85;
    double min_light = 0.7;
    double max_light = 0.95;
    bool chromatic_light = false;
    double streak_density = 0.03;
    double min_streak_length = 0.08; // fraction of the shorter side
    double max_streak_length = 0.2;
    double streak_intensity = 0.8;
};

struct SnowRanges {
    double flake_density = 0.012; // flakes per pixel
    double min_sigma = 0.6;
    double max_sigma = 2.2;
    double min_brightness = 0.85;
};

// Parameter samplers: pure functions of (image size, clean image, ranges, seed).
RaindropParams sample_raindrop_params(const torch::Tensor& clean, const RaindropRanges& r, uint64_t seed);
HeavyRainParams sample_heavyrain_params(const torch::Tensor& clean, const HeavyRainRanges& r, uint64_t seed);
SnowParams sample_snow_params(const torch::Tensor& clean, const SnowRanges& r, uint64_t seed);

struct SynthResult {
    torch::Tensor weather;
    WeatherClass label;
    uint64_t params_digest = 0;
};

SynthResult synth_raindrop(const torch::Tensor& clean, const RaindropRanges& r, uint64_t seed);
SynthResult synth_heavyrain(const torch::Tensor& clean, const HeavyRainRanges& r, uint64_t seed);
SynthResult synth_snow(const torch::Tensor& clean, const SnowRanges& r, uint64_t seed);
SynthResult synth_weather(const torch::Tensor& clean, WeatherClass c, uint64_t seed);

// Procedural clean scene (gradient sky, textured ground, random shapes) for desk-scale data.
torch::Tensor generate_clean_scene(int64_t height, int64_t width, uint64_t seed);

// --- manifests ---------------------------------------------------------------

struct ManifestEntry {
    std::string clean_path;   // relative to the manifest directory unless absolute
    std::string weather_path;
    std::string weather_class;
    uint64_t seed = 0;
    std::string params_digest;
};

struct Manifest {
    std::filesystem::path root; // directory relative paths resolve against
    std::vector<ManifestEntry> entries;

    std::filesystem::path resolve(const std::string& path) const;
};

// One JSON object per line: {"clean_path", "weather_path", "class", "seed", "params_digest"}.
Manifest read_manifest(const std::filesystem::path& file);
void write_manifest(const std::filesystem::path& file, const Manifest& manifest);

struct DatasetSpec {
    int64_t per_class = 10;
    RaindropRanges raindrop;
    HeavyRainRanges heavyrain;
    SnowRanges snow;
};

// Writes clean/ and weather/ PNGs plus manifest.jsonl under out_dir; returns the manifest.
// Clean images are taken from clean_dir in sorted order, cycling as needed.
Manifest build_dataset(const std::filesystem::path& clean_dir, const std::filesystem::path& out_dir,
                       const DatasetSpec& spec, uint64_t seed);

// Writes `count` procedural clean scenes as PNGs into dir.
void write_procedural_scenes(const std::filesystem::path& dir, int64_t count, int64_t height, int64_t width,
                             uint64_t seed);

} // namespace wxr

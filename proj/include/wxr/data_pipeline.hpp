#pragma once

#include "wxr/weather_synth.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <random>
#include <utility>
#include <vector>

namespace wxr {

// A degraded/clean pair with its class-probability label (float64, sums to 1).
struct Sample {
    torch::Tensor weather; // 3 x H x W
    torch::Tensor clean;   // 3 x H x W
    torch::Tensor label;   // K
};

struct AugmentConfig {
    double mix_prob = 0.7;
    int64_t crop = 256;
    double min_mix_area = 0.1;
    double max_mix_area = 0.5;

    void validate() const;
};

// Pixel box [top, top + height) x [left, left + width).
struct CutBox {
    int64_t top = 0;
    int64_t left = 0;
    int64_t height = 0;
    int64_t width = 0;

    int64_t area() const { return height * width; }
};

using Rng = std::mt19937_64;

// Same window for both images. Throws InputSizeError when either side is smaller than size.
std::pair<torch::Tensor, torch::Tensor> paired_random_crop(const torch::Tensor& weather, const torch::Tensor& clean,
                                                           int64_t size, Rng& rng);

// Box with uniform center and area fraction uniform in [min_area, max_area], clipped to the image.
CutBox sample_cut_box(int64_t height, int64_t width, double min_area, double max_area, Rng& rng);

// Pastes box of b into a (weather and clean alike); label mixes by pasted pixel fraction.
Sample cutmix(const Sample& a, const Sample& b, const CutBox& box);
Sample cutmix(const Sample& a, const Sample& b, const AugmentConfig& cfg, Rng& rng);

struct Batch {
    torch::Tensor weather; // B x 3 x S x S
    torch::Tensor clean;   // B x 3 x S x S
    torch::Tensor labels;  // B x K, float64
    std::vector<int64_t> indices;   // manifest rows
    std::vector<bool> mixed;        // Cut-Mix applied per element
    std::vector<CutBox> boxes;      // pasted region per element (empty box when not mixed)
};

/// Deterministic batch source over a manifest.
///
/// Epoch e visits a seeded permutation of the manifest; batch contents depend
/// only on (manifest, seed, epoch, batch index), so any batch can be rebuilt
/// independently (resume, replay). The final partial batch is kept.
class BatchLoader {
public:
    BatchLoader(Manifest manifest, int64_t batch_size, AugmentConfig cfg, uint64_t seed, bool cache_images = true);

    int64_t num_batches() const;
    int64_t size() const { return static_cast<int64_t>(manifest_.entries.size()); }
    Batch batch(int64_t epoch, int64_t index);
    std::vector<Batch> epoch(int64_t epoch);

    // Un-augmented sample (full resolution).
    Sample load(int64_t row);

    const Manifest& manifest() const { return manifest_; }

private:
    std::vector<int64_t> permutation(int64_t epoch) const;

    Manifest manifest_;
    int64_t batch_size_;
    AugmentConfig cfg_;
    uint64_t seed_;
    bool cache_images_;
    std::map<int64_t, Sample> cache_;
};

} // namespace wxr

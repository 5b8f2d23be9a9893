#include "wxr/data_pipeline.hpp"

#include "wxr/errors.hpp"
#include "wxr/image_io.hpp"

#include <algorithm>
#include <cmath>

namespace wxr {

void AugmentConfig::validate() const
{
    if (mix_prob < 0.0 || mix_prob > 1.0)
        throw ConfigError("augment.mix_prob must be in [0, 1]");
    if (crop < 1)
        throw ConfigError("augment.crop must be positive");
    if (min_mix_area < 0.0 || max_mix_area > 1.0 || min_mix_area > max_mix_area)
        throw ConfigError("augment mix area range must satisfy 0 <= min <= max <= 1");
}

namespace {

int64_t uniform_int(Rng& rng, int64_t lo, int64_t hi_inclusive)
{
    return std::uniform_int_distribution<int64_t>(lo, hi_inclusive)(rng);
}

double uniform_real(Rng& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Rng derived_rng(uint64_t seed, int64_t epoch, int64_t index)
{
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                      static_cast<uint32_t>(index), 0x5eedu};
    return Rng(seq);
}

} // namespace

std::pair<torch::Tensor, torch::Tensor> paired_random_crop(const torch::Tensor& weather, const torch::Tensor& clean,
                                                           int64_t size, Rng& rng)
{
    if (weather.sizes() != clean.sizes())
        throw ConfigError("paired crop: weather and clean images differ in size");
    const auto h = weather.size(-2);
    const auto w = weather.size(-1);
    if (h < size || w < size)
        throw InputSizeError("image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than crop " +
                             std::to_string(size));
    const auto top = uniform_int(rng, 0, h - size);
    const auto left = uniform_int(rng, 0, w - size);
    return {weather.narrow(-2, top, size).narrow(-1, left, size), clean.narrow(-2, top, size).narrow(-1, left, size)};
}

CutBox sample_cut_box(int64_t height, int64_t width, double min_area, double max_area, Rng& rng)
{
    const double fraction = uniform_real(rng, min_area, max_area);
    const double cy = uniform_real(rng, 0.0, static_cast<double>(height));
    const double cx = uniform_real(rng, 0.0, static_cast<double>(width));
    const double bh = std::sqrt(fraction) * static_cast<double>(height);
    const double bw = std::sqrt(fraction) * static_cast<double>(width);
    auto clip = [](double v, int64_t hi) { return std::clamp<int64_t>(static_cast<int64_t>(std::lround(v)), 0, hi); };
    const auto top = clip(cy - bh / 2.0, height);
    const auto bottom = clip(cy + bh / 2.0, height);
    const auto left = clip(cx - bw / 2.0, width);
    const auto right = clip(cx + bw / 2.0, width);
    return {top, left, bottom - top, right - left};
}

Sample cutmix(const Sample& a, const Sample& b, const CutBox& box)
{
    if (a.weather.sizes() != b.weather.sizes() || a.clean.sizes() != b.clean.sizes())
        throw ConfigError("cutmix: samples differ in size");
    const auto h = a.weather.size(-2);
    const auto w = a.weather.size(-1);
    if (box.top < 0 || box.left < 0 || box.height < 0 || box.width < 0 || box.top + box.height > h ||
        box.left + box.width > w)
        throw ConfigError("cutmix: box outside the image");

    Sample out{a.weather.clone(), a.clean.clone(), a.label};
    if (box.area() > 0) {
        auto region = [&](const torch::Tensor& t) {
            return t.narrow(-2, box.top, box.height).narrow(-1, box.left, box.width);
        };
        region(out.weather).copy_(region(b.weather));
        region(out.clean).copy_(region(b.clean));
    }
    const double alpha = static_cast<double>(box.area()) / static_cast<double>(h * w);
    out.label = (1.0 - alpha) * a.label.to(torch::kFloat64) + alpha * b.label.to(torch::kFloat64);
    return out;
}

Sample cutmix(const Sample& a, const Sample& b, const AugmentConfig& cfg, Rng& rng)
{
    return cutmix(a, b, sample_cut_box(a.weather.size(-2), a.weather.size(-1), cfg.min_mix_area, cfg.max_mix_area, rng));
}

// ---------------------------------------------------------------------------

BatchLoader::BatchLoader(Manifest manifest, int64_t batch_size, AugmentConfig cfg, uint64_t seed, bool cache_images)
    : manifest_(std::move(manifest)), batch_size_(batch_size), cfg_(cfg), seed_(seed), cache_images_(cache_images)
{
    cfg_.validate();
    if (batch_size_ < 1)
        throw ConfigError("batch size must be positive");
    if (manifest_.entries.empty())
        throw ConfigError("manifest has no entries");
}

int64_t BatchLoader::num_batches() const
{
    return (size() + batch_size_ - 1) / batch_size_;
}

Sample BatchLoader::load(int64_t row)
{
    if (auto it = cache_.find(row); it != cache_.end())
        return it->second;
    const auto& e = manifest_.entries.at(static_cast<size_t>(row));
    Sample s{load_image(manifest_.resolve(e.weather_path)), load_image(manifest_.resolve(e.clean_path)),
             one_hot_label(weather_class_from_string(e.weather_class)).to(torch::kFloat64)};
    if (s.weather.sizes() != s.clean.sizes())
        throw IoError("manifest row " + std::to_string(row) + ": weather and clean images differ in size");
    if (cache_images_)
        cache_[row] = s;
    return s;
}

std::vector<int64_t> BatchLoader::permutation(int64_t epoch) const
{
    std::vector<int64_t> order(static_cast<size_t>(size()));
    for (size_t i = 0; i < order.size(); ++i)
        order[i] = static_cast<int64_t>(i);
    auto rng = derived_rng(seed_, epoch, -1);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

Batch BatchLoader::batch(int64_t epoch, int64_t index)
{
    if (index < 0 || index >= num_batches())
        throw ConfigError("batch index out of range");
    const auto order = permutation(epoch);
    const auto begin = index * batch_size_;
    const auto end = std::min(size(), begin + batch_size_);
    auto rng = derived_rng(seed_, epoch, index);

    std::vector<Sample> crops;
    Batch b;
    for (auto i = begin; i < end; ++i) {
        const auto row = order[static_cast<size_t>(i)];
        auto s = load(row);
        auto [w, c] = paired_random_crop(s.weather, s.clean, cfg_.crop, rng);
        crops.push_back({w, c, s.label});
        b.indices.push_back(row);
    }

    // Shifted pairing: element i may receive a patch from element i + 1.
    const auto n = static_cast<int64_t>(crops.size());
    std::vector<torch::Tensor> weather, clean, labels;
    for (int64_t i = 0; i < n; ++i) {
        const bool mix = uniform_real(rng, 0.0, 1.0) < cfg_.mix_prob;
        Sample s = crops[static_cast<size_t>(i)];
        CutBox box;
        if (mix) {
            box = sample_cut_box(cfg_.crop, cfg_.crop, cfg_.min_mix_area, cfg_.max_mix_area, rng);
            s = cutmix(s, crops[static_cast<size_t>((i + 1) % n)], box);
        }
        b.boxes.push_back(box);
        weather.push_back(s.weather);
        clean.push_back(s.clean);
        labels.push_back(s.label.to(torch::kFloat64));
        b.mixed.push_back(mix);
    }
    b.weather = torch::stack(weather).contiguous();
    b.clean = torch::stack(clean).contiguous();
    b.labels = torch::stack(labels);
    return b;
}

std::vector<Batch> BatchLoader::epoch(int64_t epoch)
{
    std::vector<Batch> out;
    for (int64_t i = 0; i < num_batches(); ++i)
        out.push_back(batch(epoch, i));
    return out;
}

} // namespace wxr

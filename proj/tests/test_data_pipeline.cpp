#include "wxr/data_pipeline.hpp"
#include "wxr/errors.hpp"

#include <doctest.h>

using namespace wxr;
namespace fs = std::filesystem;

namespace {

Sample constant_sample(double value, WeatherClass c, int64_t size = 8)
{
    return {torch::full({3, size, size}, value, torch::kFloat64), torch::full({3, size, size}, value + 0.5, torch::kFloat64),
            one_hot_label(c).to(torch::kFloat64)};
}

Manifest small_dataset()
{
    static const Manifest m = [] {
        auto root = fs::temp_directory_path() / "wxr_test_pipeline";
        fs::remove_all(root);
        write_procedural_scenes(root / "scenes", 10, 32, 32, 8);
        DatasetSpec spec;
        spec.per_class = 10;
        return build_dataset(root / "scenes", root / "data", spec, 21);
    }();
    return m;
}

} // namespace

TEST_SUITE("data_pipeline")
{
    TEST_CASE("quarter-area Cut-Mix gives a 0.75 / 0.25 label")
    {
        auto a = constant_sample(0.0, WeatherClass::Snow);
        auto b = constant_sample(0.25, WeatherClass::Raindrop);
        auto mixed = cutmix(a, b, CutBox{2, 2, 4, 4});
        CHECK(mixed.label.equal(torch::tensor({0.75, 0.25, 0.0}, torch::kFloat64)));
        CHECK(mixed.weather.eq(0.25).sum().item<int64_t>() == 3 * 16);
        CHECK(mixed.clean.eq(0.75).sum().item<int64_t>() == 3 * 16);
        CHECK(mixed.weather[0][3][3].item<double>() == 0.25);
        CHECK(mixed.weather[0][1][1].item<double>() == 0.0);
        CHECK(a.weather.max().item<double>() == 0.0);

        auto none = cutmix(a, b, CutBox{3, 3, 0, 0});
        CHECK(none.label.equal(a.label));
        CHECK(none.weather.equal(a.weather));
        auto full = cutmix(a, b, CutBox{0, 0, 8, 8});
        CHECK(full.label.equal(b.label));
        CHECK(full.weather.equal(b.weather));
        CHECK(full.clean.equal(b.clean));
        CHECK_THROWS_AS(cutmix(a, b, CutBox{6, 0, 4, 4}), ConfigError);
    }

    TEST_CASE("sampled boxes: label mass equals pasted pixel fraction")
    {
        Rng rng(5);
        auto a = constant_sample(0.0, WeatherClass::Snow, 16);
        auto b = constant_sample(1.0, WeatherClass::RainHaze, 16);
        AugmentConfig cfg;
        for (int i = 0; i < 1000; ++i) {
            auto box = sample_cut_box(16, 16, cfg.min_mix_area, cfg.max_mix_area, rng);
            CHECK(box.top >= 0);
            CHECK(box.left >= 0);
            CHECK(box.top + box.height <= 16);
            CHECK(box.left + box.width <= 16);
            auto m = cutmix(a, b, box);
            const auto pasted = m.weather[0].eq(1.0).sum().item<int64_t>();
            CHECK(pasted == box.area());
            CHECK(m.label.sum().item<double>() == doctest::Approx(1.0).epsilon(1e-15));
            CHECK(m.label[2].item<double>() * 256.0 == doctest::Approx(static_cast<double>(pasted)).epsilon(1e-12));
        }
    }

    TEST_CASE("paired crop keeps weather and clean aligned")
    {
        auto weather = torch::arange(3 * 20 * 24, torch::kFloat64).view({3, 20, 24});
        auto clean = weather * 2.0;
        Rng rng(1);
        for (int i = 0; i < 50; ++i) {
            auto [w, c] = paired_random_crop(weather, clean, 8, rng);
            CHECK(w.sizes() == torch::IntArrayRef{3, 8, 8});
            CHECK(c.equal(w * 2.0));
            const auto origin = static_cast<int64_t>(w[0][0][0].item<double>());
            const auto top = origin / 24, left = origin % 24;
            CHECK(w.equal(weather.narrow(1, top, 8).narrow(2, left, 8)));
        }
        CHECK_THROWS_AS(paired_random_crop(weather, clean, 21, rng), InputSizeError);
        CHECK_THROWS_AS(paired_random_crop(weather, clean.narrow(1, 0, 10), 4, rng), ConfigError);
    }

    TEST_CASE("loader mixes at the configured rate")
    {
        AugmentConfig cfg;
        cfg.crop = 16;
        BatchLoader loader(small_dataset(), 10, cfg, 3);
        CHECK(loader.size() == 30);
        CHECK(loader.num_batches() == 3);
        int64_t samples = 0, mixed = 0;
        for (int64_t epoch = 0; samples < 1000; ++epoch) {
            for (const auto& b : loader.epoch(epoch)) {
                CHECK(b.weather.sizes() == torch::IntArrayRef{10, 3, 16, 16});
                CHECK((b.labels.sum(1) - 1.0).abs().max().item<double>() < 1e-12);
                for (bool m : b.mixed)
                    mixed += m ? 1 : 0;
                samples += static_cast<int64_t>(b.mixed.size());
            }
        }
        const double rate = static_cast<double>(mixed) / static_cast<double>(samples);
        CHECK(rate == doctest::Approx(0.7).epsilon(0.05 / 0.7));
    }

    TEST_CASE("batches replay deterministically")
    {
        AugmentConfig cfg;
        cfg.crop = 16;
        BatchLoader a(small_dataset(), 8, cfg, 11);
        BatchLoader b(small_dataset(), 8, cfg, 11, false);
        CHECK(a.num_batches() == 4);
        auto x = a.batch(2, 1);
        auto y = b.batch(2, 1);
        CHECK(x.weather.equal(y.weather));
        CHECK(x.clean.equal(y.clean));
        CHECK(x.labels.equal(y.labels));
        CHECK(x.indices == y.indices);
        CHECK(a.batch(2, 3).weather.size(0) == 6);
        CHECK_FALSE(a.batch(3, 1).weather.equal(x.weather));
        CHECK_FALSE(BatchLoader(small_dataset(), 8, cfg, 12).batch(2, 1).weather.equal(x.weather));
        CHECK_THROWS_AS(a.batch(0, 4), ConfigError);
        AugmentConfig bad;
        bad.mix_prob = 1.5;
        CHECK_THROWS_AS(BatchLoader(small_dataset(), 8, bad, 1), ConfigError);
    }
}

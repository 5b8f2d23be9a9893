#include "oracles.hpp"

#include "wxr/digest.hpp"
#include "wxr/errors.hpp"
#include "wxr/image_io.hpp"
#include "wxr/losses.hpp"
#include "wxr/weather_synth.hpp"

#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

using namespace wxr;
namespace fs = std::filesystem;

namespace {

std::string file_bytes(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name)
{
    auto dir = fs::temp_directory_path() / ("wxr_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_SUITE("weather_synth")
{
    TEST_CASE("composites match scalar loops")
    {
        for (int trial = 0; trial < 5; ++trial) {
            auto clean = torch::rand({3, 9, 11}, torch::kFloat64);
            RaindropParams rd{torch::rand({9, 11}, torch::kFloat64), torch::rand({3, 9, 11}, torch::kFloat64) * 0.6};
            CHECK(oracle::max_abs_diff(composite_raindrop(clean, rd), oracle::raindrop(clean, rd.mask, rd.residual)) <
                  1e-7);

            HeavyRainParams hr{torch::rand({9, 11}, torch::kFloat64),
                               {torch::rand({3, 9, 11}, torch::kFloat64) * 0.3,
                                torch::rand({3, 9, 11}, torch::kFloat64) * 0.3},
                               torch::tensor({0.8, 0.7, 0.9}, torch::kFloat64)};
            CHECK(oracle::max_abs_diff(composite_heavyrain(clean, hr),
                                       oracle::heavyrain(clean, hr.transmission, hr.streaks, {0.8, 0.7, 0.9})) < 1e-7);
            hr.atmospheric_light = torch::tensor({0.75}, torch::kFloat64);
            CHECK(oracle::max_abs_diff(composite_heavyrain(clean, hr),
                                       oracle::heavyrain(clean, hr.transmission, hr.streaks, {0.75})) < 1e-7);

            SnowParams sn{torch::rand({9, 11}, torch::kFloat64), torch::rand({3, 9, 11}, torch::kFloat64)};
            CHECK(oracle::max_abs_diff(composite_snow(clean, sn), oracle::snow(clean, sn.mask, sn.flakes)) < 1e-7);
        }
    }

    TEST_CASE("degenerate parameters")
    {
        auto clean = torch::rand({3, 8, 8});
        auto zero_map = torch::zeros({8, 8});
        auto one_map = torch::ones({8, 8});
        auto residual = torch::rand({3, 8, 8});
        CHECK(composite_raindrop(clean, {zero_map, torch::zeros({3, 8, 8})}).equal(clean));
        CHECK(composite_raindrop(clean, {one_map, residual}).equal(residual));
        CHECK(composite_heavyrain(clean, {one_map, {torch::zeros({3, 8, 8})}, torch::tensor({0.9})}).equal(clean));
        auto hazed = composite_heavyrain(clean, {zero_map, {residual}, torch::tensor({0.9})});
        CHECK((hazed - 0.9).abs().max().item<double>() < 1e-7);
        CHECK(composite_snow(clean, {zero_map, residual}).equal(clean));
        CHECK(composite_snow(clean, {one_map, residual}).equal(residual));
        auto bright = composite_raindrop(clean, {zero_map, torch::ones({3, 8, 8})});
        CHECK(bright.max().item<double>() <= 1.0);
        CHECK_THROWS_AS(composite_snow(clean, {torch::zeros({4, 8}), residual}), ConfigError);
        CHECK_THROWS_AS(composite_heavyrain(clean, {one_map, {}, torch::tensor({0.1, 0.2})}), ConfigError);
    }

    TEST_CASE("samplers are deterministic and respect their invariants")
    {
        auto clean = generate_clean_scene(48, 64, 5);
        CHECK(clean.sizes() == torch::IntArrayRef{3, 48, 64});
        CHECK(clean.equal(generate_clean_scene(48, 64, 5)));
        CHECK_FALSE(clean.equal(generate_clean_scene(48, 64, 6)));

        auto rd = sample_raindrop_params(clean, {}, 1);
        CHECK(rd.mask.min().item<double>() >= 0.0);
        CHECK(rd.mask.max().item<double>() <= 1.0);
        CHECK(rd.residual.masked_select((rd.mask == 0).unsqueeze(0).expand_as(rd.residual)).abs().max().item<double>() ==
              0.0);
        auto hr = sample_heavyrain_params(clean, {}, 1);
        CHECK(hr.transmission.min().item<double>() >= 0.0);
        CHECK(hr.transmission.max().item<double>() <= 1.0);
        CHECK(hr.streaks.size() == 2);
        CHECK(hr.atmospheric_light.min().item<double>() >= 0.0);
        CHECK(hr.atmospheric_light.max().item<double>() <= 1.0);
        auto sn = sample_snow_params(clean, {}, 1);
        CHECK(sn.mask.min().item<double>() >= 0.0);
        CHECK(sn.mask.max().item<double>() <= 1.0);

        const WeatherClass classes[] = {WeatherClass::Snow, WeatherClass::Raindrop, WeatherClass::RainHaze};
        for (auto c : classes) {
            auto a = synth_weather(clean, c, 42);
            auto b = synth_weather(clean, c, 42);
            CHECK(a.label == c);
            CHECK(a.weather.equal(b.weather));
            CHECK(a.params_digest == b.params_digest);
            CHECK(a.params_digest != synth_weather(clean, c, 43).params_digest);
            CHECK(a.weather.min().item<double>() >= 0.0);
            CHECK(a.weather.max().item<double>() <= 1.0);
            const double p = psnr(a.weather.unsqueeze(0), clean.unsqueeze(0)).item<double>();
            CHECK(std::isfinite(p));
            CHECK(p < 40.0);
        }
    }

    TEST_CASE("labels")
    {
        CHECK(weather_class_from_string(to_string(WeatherClass::RainHaze)) == WeatherClass::RainHaze);
        CHECK(one_hot_label(WeatherClass::Raindrop).equal(torch::tensor({0.0f, 1.0f, 0.0f})));
        CHECK_THROWS_AS(weather_class_from_string("hail"), ConfigError);
    }

    TEST_CASE("manifest round trip")
    {
        const auto dir = scratch("manifest");
        Manifest m;
        m.root = dir;
        m.entries.push_back({"clean/a.png", "weather/a.png", "snow", 7, "00000000000000ff"});
        m.entries.push_back({"/abs/b.png", "weather/b.png", "rainhaze", 18446744073709551615ULL, "1"});
        write_manifest(dir / "m.jsonl", m);
        auto r = read_manifest(dir / "m.jsonl");
        REQUIRE(r.entries.size() == 2);
        CHECK(r.entries[1].seed == 18446744073709551615ULL);
        CHECK(r.entries[0].weather_class == "snow");
        CHECK(r.entries[0].params_digest == "00000000000000ff");
        CHECK(r.resolve(r.entries[0].clean_path) == dir / "clean/a.png");
        CHECK(r.resolve(r.entries[1].clean_path) == fs::path("/abs/b.png"));
        CHECK_THROWS_AS(read_manifest(dir / "missing.jsonl"), IoError);
    }

    TEST_CASE("dataset build is balanced and reproducible")
    {
        const auto root = scratch("dataset");
        write_procedural_scenes(root / "scenes", 4, 32, 40, 3);
        DatasetSpec spec;
        spec.per_class = 3;
        auto a = build_dataset(root / "scenes", root / "a", spec, 99);
        auto b = build_dataset(root / "scenes", root / "b", spec, 99);
        REQUIRE(a.entries.size() == 9);
        std::map<std::string, int> counts;
        for (const auto& e : a.entries)
            ++counts[e.weather_class];
        CHECK(counts["snow"] == 3);
        CHECK(counts["raindrop"] == 3);
        CHECK(counts["rainhaze"] == 3);
        for (size_t i = 0; i < a.entries.size(); ++i) {
            CHECK(a.entries[i].params_digest == b.entries[i].params_digest);
            CHECK(file_bytes(a.resolve(a.entries[i].weather_path)) == file_bytes(b.resolve(b.entries[i].weather_path)));
            auto w = load_image(a.resolve(a.entries[i].weather_path));
            auto c = load_image(a.resolve(a.entries[i].clean_path));
            CHECK(w.sizes() == c.sizes());
        }
        CHECK(file_bytes(root / "a" / "manifest.jsonl") == file_bytes(root / "b" / "manifest.jsonl"));
        auto reread = read_manifest(root / "a" / "manifest.jsonl");
        CHECK(reread.entries.size() == 9);
        auto c = build_dataset(root / "scenes", root / "c", spec, 100);
        CHECK(c.entries[0].params_digest != a.entries[0].params_digest);
    }
}

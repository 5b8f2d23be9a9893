#include "wxr/checkpoint.hpp"
#include "wxr/config.hpp"
#include "wxr/errors.hpp"
#include "wxr/image_io.hpp"
#include "wxr/trainer.hpp"

#include <doctest.h>

#include <fstream>

using namespace wxr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    auto dir = fs::temp_directory_path() / ("wxr_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const Manifest& toy_manifest()
{
    static const Manifest m = [] {
        auto root = scratch("trainer_data");
        write_procedural_scenes(root / "scenes", 8, 48, 48, 17);
        DatasetSpec spec;
        spec.per_class = 4;
        return build_dataset(root / "scenes", root / "data", spec, 5);
    }();
    return m;
}

TrainConfig toy_config(const std::string& name)
{
    auto cfg = profile_config("desk");
    cfg.augment.crop = 32;
    cfg.batch_size = 4;
    cfg.out_dir = scratch(name).string();
    cfg.seed = 3;
    return cfg;
}

} // namespace

TEST_SUITE("trainer")
{
    TEST_CASE("learning rate halves on schedule")
    {
        auto cfg = profile_config("paper");
        CHECK(lr_schedule(0, cfg) == doctest::Approx(2e-4));
        CHECK(lr_schedule(99, cfg) == doctest::Approx(2e-4));
        CHECK(lr_schedule(100, cfg) == doctest::Approx(1e-4));
        CHECK(lr_schedule(249, cfg) == doctest::Approx(5e-5));
    }

    TEST_CASE("profiles")
    {
        auto paper = profile_config("paper");
        CHECK(paper.epochs == 250);
        CHECK(paper.batch_size == 32);
        CHECK(paper.beta1 == 0.9);
        CHECK(paper.beta2 == 0.999);
        CHECK(paper.lr_halving_period == 100);
        CHECK(paper.distill.start_epoch == 200);
        CHECK(paper.weights.perceptual == 0.04);
        CHECK(paper.augment.mix_prob == 0.7);
        CHECK(paper.augment.crop == 256);
        paper.validate();
        auto desk = profile_config("desk");
        CHECK(desk.augment.crop == 64);
        CHECK(desk.model.encoder.channels == std::vector<int64_t>{16, 32, 64, 128});
        CHECK(desk.model.encoder.blocks == std::vector<int64_t>{2, 2, 2, 1});
        CHECK(desk.model.cwp.prior_tokens == 8);
        CHECK(desk.model.residual_output);
        CHECK_FALSE(profile_config("paper").model.residual_output);
        CHECK(desk.batch_size == 8);
        CHECK(desk.epochs == 30);
        desk.validate();
        CHECK_THROWS_AS(profile_config("huge"), ConfigError);
    }

    TEST_CASE("config overrides and unknown keys")
    {
        nlohmann::json tree = {{"profile", "desk"}};
        apply_override(tree, "optim.lr=0.01");
        apply_override(tree, "distill.enabled=false");
        apply_override(tree, "run.out_dir=somewhere");
        apply_override(tree, "model.encoder.use_sar=false");
        auto cfg = config_from_json(tree);
        CHECK(cfg.lr == 0.01);
        CHECK_FALSE(cfg.distill.enabled);
        CHECK(cfg.out_dir == "somewhere");
        CHECK(cfg.batch_size == 8);
        CHECK_FALSE(cfg.model.encoder.use_sar);

        auto round = config_from_json(to_json(cfg));
        CHECK(config_digest(round) == config_digest(cfg));
        CHECK(config_digest(round) != config_digest(profile_config("desk")));

        try {
            config_from_json({{"optim", {{"learning_rate", 1}}}});
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("learning_rate") != std::string::npos);
            CHECK(msg.find("batch_size") != std::string::npos);
            CHECK(msg.find("lr_halving_period") != std::string::npos);
        }
        CHECK_THROWS_AS(config_from_json({{"bogus", 1}}), ConfigError);
        CHECK_THROWS_AS(config_from_json({{"optim", {{"lr", "fast"}}}}), ConfigError);
        CHECK_THROWS_AS(config_from_json({{"device", "cuda"}}).validate(), ConfigError);
        nlohmann::json odd = {{"profile", "desk"}};
        apply_override(odd, "augment.crop=40");
        CHECK_THROWS_AS(config_from_json(odd).validate(), ConfigError);
        CHECK_THROWS_AS(apply_override(odd, "novalue"), ConfigError);
    }

    TEST_CASE("config file with overrides")
    {
        const auto dir = scratch("config_file");
        {
            std::ofstream f(dir / "c.json");
            f << R"({"profile": "desk", "optim": {"epochs": 3}, "seed": 9})";
        }
        auto cfg = load_config(dir / "c.json", {"optim.batch_size=2"});
        CHECK(cfg.epochs == 3);
        CHECK(cfg.seed == 9);
        CHECK(cfg.batch_size == 2);
        CHECK_THROWS_AS(load_config(dir / "missing.json", {}), ConfigError);
    }

    TEST_CASE("loss isolation and bookkeeping")
    {
        auto cfg = toy_config("isolation");
        cfg.distill.start_epoch = 0;
        Trainer trainer(cfg);
        BatchLoader loader(toy_manifest(), 4, cfg.augment, cfg.seed);
        auto batch = loader.batch(0, 0);
        auto r = trainer.compute_terms(batch, 0);
        REQUIRE(r.distill_on);
        const double recombined = r.terms.smooth_l1.item<double>() + 0.04 * r.terms.perceptual.item<double>() +
                                  0.1 * r.terms.ssim.item<double>() + 0.02 * r.terms.psnr.item<double>() +
                                  0.08 * r.terms.text.item<double>() + 0.1 * r.terms.distill.item<double>();
        CHECK(r.total.item<double>() == doctest::Approx(recombined).epsilon(1e-6));

        auto step = trainer.train_step(batch, 0);
        const double again = step.smooth_l1 + 0.04 * step.perceptual + 0.1 * step.ssim + 0.02 * step.psnr +
                             0.08 * step.text + 0.1 * step.distill;
        CHECK(std::abs(step.total - again) < 1e-6);
        CHECK(step.describe().find("smooth_l1") != std::string::npos);

        auto zeroed = toy_config("isolation_zero");
        zeroed.weights = LossWeights{0, 0, 0, 0, 0};
        zeroed.distill.weight = 0;
        Trainer z(zeroed);
        auto zr = z.compute_terms(batch, 0);
        CHECK(zr.total.item<double>() == zr.terms.smooth_l1.item<double>());
    }

    TEST_CASE("distillation leaves the other terms unchanged")
    {
        auto cfg = toy_config("distill_toggle");
        cfg.distill.start_epoch = 1;
        Trainer trainer(cfg);
        BatchLoader loader(toy_manifest(), 4, cfg.augment, cfg.seed);
        auto batch = loader.batch(0, 0);
        auto off = trainer.compute_terms(batch, 0);
        auto on = trainer.compute_terms(batch, 1);
        CHECK_FALSE(off.distill_on);
        CHECK(on.distill_on);
        CHECK_FALSE(off.terms.distill.defined());
        CHECK(on.terms.smooth_l1.equal(off.terms.smooth_l1));
        CHECK(on.terms.perceptual.equal(off.terms.perceptual));
        CHECK(on.terms.ssim.equal(off.terms.ssim));
        CHECK(on.terms.psnr.equal(off.terms.psnr));
        CHECK(on.terms.text.equal(off.terms.text));
    }

    TEST_CASE("fifty steps lower the moving-average loss")
    {
        auto cfg = toy_config("fifty");
        BatchLoader loader(toy_manifest(), 4, cfg.augment, cfg.seed);
        Trainer trainer(cfg);
        std::vector<double> losses;
        for (int64_t step = 0; step < 50; ++step)
            losses.push_back(trainer.train_step(loader.batch(step / 3, step % 3), 0).total);
        std::vector<double> windows;
        for (size_t w = 0; w < 5; ++w) {
            double s = 0.0;
            for (size_t i = 0; i < 10; ++i)
                s += losses[w * 10 + i];
            windows.push_back(s / 10.0);
        }
        for (size_t w = 1; w < windows.size(); ++w)
            CHECK(windows[w] < windows[w - 1]);
    }

    TEST_CASE("checkpoint round trip and exact resume")
    {
        auto cfg = toy_config("resume");
        cfg.epochs = 2;
        cfg.checkpoint_every = 1;
        BatchLoader loader(toy_manifest(), 4, cfg.augment, cfg.seed);

        Trainer a(cfg);
        a.train(loader, {}, 1);
        const auto file = fs::path(cfg.out_dir) / "checkpoint_e0001.wxr";
        REQUIRE(fs::exists(file));
        REQUIRE(fs::exists(fs::path(cfg.out_dir) / "loss_log.csv"));
        const auto next = a.train_step(loader.batch(1, 0), 1);

        auto b = Trainer::load(file);
        CHECK(b.epoch() == 1);
        CHECK(b.global_step() == 3);
        const auto resumed = b.train_step(loader.batch(1, 0), 1);
        CHECK(std::abs(resumed.total - next.total) < 1e-6);

        auto c = Trainer::load(file);
        auto pa = a.model()->parameters();
        c.train_step(loader.batch(1, 0), 1);
        auto pc = c.model()->parameters();
        double diff = 0.0;
        for (size_t i = 0; i < pa.size(); ++i)
            diff = std::max(diff, (pa[i] - pc[i]).abs().max().item<double>());
        CHECK(diff < 1e-6);

        auto archive = load_archive(file);
        CHECK(archive.meta.at("config_digest").get<std::string>() == config_digest(cfg));
        CHECK(archive.tensors.count("rng/torch_cpu") == 1);

        {
            std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(100);
            f.put('\x01');
            f.seekp(101);
            f.put('\x02');
        }
        CHECK_THROWS_AS(Trainer::load(file), IoError);
        CHECK_THROWS_AS(Trainer::load(fs::path(cfg.out_dir) / "nope.wxr"), IoError);
    }

    TEST_CASE("evaluation reports")
    {
        auto perfect = evaluate_pairs(torch::rand({2, 3, 32, 32}).clamp(0, 1), torch::zeros({2, 3, 32, 32}), true);
        auto x = torch::rand({2, 3, 32, 32});
        auto gt = evaluate_pairs(x, x, true);
        CHECK(gt.mean_psnr == kPsnrCeiling);
        CHECK(gt.mean_ssim == doctest::Approx(1.0));
        CHECK(perfect.mean_psnr < gt.mean_psnr);

        auto cfg = toy_config("evaluate");
        BatchLoader loader(toy_manifest(), 4, cfg.augment, cfg.seed);
        Trainer trainer(cfg);
        trainer.train(loader, {}, 2, false);
        auto comparison = trainer.evaluate(toy_manifest(), EvalMode::Comparison, cfg.out_dir);
        auto ablation = trainer.evaluate(toy_manifest(), EvalMode::Ablation);
        REQUIRE(comparison.datasets.size() == 3);
        CHECK(comparison.datasets[0].name == "snow");
        CHECK(comparison.datasets[0].count == 4);
        CHECK(comparison.rows.size() == 12);
        CHECK(comparison.overall.psnr != ablation.overall.psnr);
        CHECK(fs::exists(fs::path(cfg.out_dir) / "restored"));
        CHECK(comparison.rows[0].predicted_class >= 0);
        comparison.write_csv(fs::path(cfg.out_dir) / "per_image.csv");
        CHECK(fs::file_size(fs::path(cfg.out_dir) / "per_image.csv") > 0);
        CHECK(comparison.table().find("rainhaze") != std::string::npos);
        CHECK(eval_mode_from_string("ablation") == EvalMode::Ablation);
        CHECK_THROWS_AS(eval_mode_from_string("fast"), ConfigError);

        auto image = load_image(toy_manifest().resolve(toy_manifest().entries[0].weather_path)).narrow(1, 0, 45);
        CHECK(trainer.restore(image).sizes() == image.sizes());
        write_inspection(trainer, image, fs::path(cfg.out_dir) / "inspect");
        CHECK(fs::exists(fs::path(cfg.out_dir) / "inspect" / "restored.png"));
        CHECK(fs::exists(fs::path(cfg.out_dir) / "inspect" / "weights_stage1_block1_k1.png"));
        CHECK(fs::exists(fs::path(cfg.out_dir) / "inspect" / "residual_stage4_block1.png"));
    }

    TEST_CASE("prior and encoder ablations are config toggles")
    {
        const std::vector<std::vector<std::string>> variants = {
            {"model.prior_encoder=\"learnable\""},
            {"model.prior_encoder=\"none\"", "distill.enabled=false"},
            {"distill.start_epoch=0", "distill.match_all_blocks=false"},
            {"distill.start_epoch=0", "distill.normalize=false"},
            {"model.encoder.use_sar=false"},
        };
        for (const auto& v : variants) {
            nlohmann::json tree = {{"profile", "desk"}};
            for (const auto& s : v)
                apply_override(tree, s);
            apply_override(tree, "augment.crop=32");
            apply_override(tree, "optim.batch_size=4");
            auto cfg = config_from_json(tree);
            Trainer trainer(cfg);
            BatchLoader loader(toy_manifest(), 4, cfg.augment, 1);
            auto step = trainer.train_step(loader.batch(0, 0), 0);
            CHECK(std::isfinite(step.total));
        }
    }
}

#include "wxr/config.hpp"
#include "wxr/errors.hpp"
#include "wxr/image_io.hpp"
#include "wxr/trainer.hpp"
#include "wxr/weather_synth.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;

namespace {

// Relative run directories resolve under WXR_RUN_ROOT when it is set.
std::string run_dir(const std::string& dir)
{
    const char* root = std::getenv("WXR_RUN_ROOT");
    if (!root || !*root || fs::path(dir).is_absolute())
        return dir;
    return (fs::path(root) / dir).string();
}

struct SynthArgs {
    std::string clean_dir;
    std::string out;
    int64_t per_class = 100;
    uint64_t seed = 0;
    int64_t procedural = 0;
    int64_t size = 96;
};

int run_synth(const SynthArgs& a)
{
    auto clean_dir = a.clean_dir;
    if (a.procedural > 0) {
        clean_dir = (fs::path(a.out) / "scenes").string();
        wxr::write_procedural_scenes(clean_dir, a.procedural, a.size, a.size, a.seed);
    }
    if (clean_dir.empty())
        throw wxr::ConfigError("synth needs --clean-dir or --procedural");
    wxr::DatasetSpec spec;
    spec.per_class = a.per_class;
    auto manifest = wxr::build_dataset(clean_dir, a.out, spec, a.seed);
    std::cout << "wrote " << manifest.entries.size() << " pairs, manifest " << (fs::path(a.out) / "manifest.jsonl")
              << '\n';
    return 0;
}

struct TrainArgs {
    std::string config;
    std::vector<std::string> sets;
    std::optional<uint64_t> seed;
    std::optional<int64_t> epochs;
    std::string train_manifest;
    std::string eval_manifest;
    std::string out;
    std::string profile;
    std::string resume;
    bool print_config = false;
};

int run_train(TrainArgs a)
{
    if (!a.profile.empty())
        a.sets.insert(a.sets.begin(), "profile=" + nlohmann::json(a.profile).dump());
    if (a.seed)
        a.sets.push_back("seed=" + std::to_string(*a.seed));
    if (a.epochs)
        a.sets.push_back("optim.epochs=" + std::to_string(*a.epochs));
    if (!a.train_manifest.empty())
        a.sets.push_back("run.train_manifest=" + nlohmann::json(a.train_manifest).dump());
    if (!a.eval_manifest.empty())
        a.sets.push_back("run.eval_manifest=" + nlohmann::json(a.eval_manifest).dump());
    if (!a.out.empty())
        a.sets.push_back("run.out_dir=" + nlohmann::json(a.out).dump());

    auto cfg = wxr::load_config(a.config, a.sets);
    cfg.out_dir = run_dir(cfg.out_dir);
    if (a.print_config) {
        std::cout << wxr::to_json(cfg).dump(2) << '\n';
        return 0;
    }
    if (cfg.train_manifest.empty())
        throw wxr::ConfigError("run.train_manifest is required (or --train-manifest)");

    auto trainer = a.resume.empty() ? wxr::Trainer(cfg) : wxr::Trainer::load(a.resume);
    if (!a.resume.empty() && wxr::config_digest(trainer.config()) != wxr::config_digest(cfg))
        std::cerr << "warning: resuming with the configuration stored in " << a.resume << '\n';
    const auto& c = trainer.config();
    wxr::BatchLoader loader(wxr::read_manifest(c.train_manifest), c.batch_size, c.augment, c.seed);
    trainer.train(loader);
    std::cout << "checkpoint " << (fs::path(c.out_dir) / "last.wxr") << '\n';
    if (!c.eval_manifest.empty()) {
        auto report = trainer.evaluate(wxr::read_manifest(c.eval_manifest), wxr::EvalMode::Ablation);
        std::cout << report.table();
    }
    return 0;
}

int run_eval(const std::string& checkpoint, const std::string& manifest, const std::string& mode,
             const std::string& out)
{
    auto trainer = wxr::Trainer::load(checkpoint);
    auto report = trainer.evaluate(wxr::read_manifest(manifest), wxr::eval_mode_from_string(mode), out);
    if (!out.empty())
        report.write_csv(fs::path(out) / "per_image.csv");
    std::cout << report.table();
    return 0;
}

int run_infer(const std::string& checkpoint, const std::string& input, const std::string& output)
{
    auto trainer = wxr::Trainer::load(checkpoint);
    wxr::save_image(output, trainer.restore(wxr::load_image(input)));
    return 0;
}

int run_inspect(const std::string& checkpoint, const std::string& input, const std::string& out)
{
    auto trainer = wxr::Trainer::load(checkpoint);
    wxr::write_inspection(trainer, wxr::load_image(input), out);
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multi-weather image restoration: data synthesis, training, evaluation"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Build a synthetic snow / raindrop / rain+haze dataset");
    s->add_option("--clean-dir", synth.clean_dir, "Directory of clean PNG images");
    s->add_option("--out", synth.out, "Output directory")->required();
    s->add_option("--per-class", synth.per_class, "Images per weather class");
    s->add_option("--seed", synth.seed, "Random seed");
    s->add_option("--procedural", synth.procedural, "Generate this many procedural clean scenes instead");
    s->add_option("--size", synth.size, "Procedural scene size in pixels");

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", train.config, "JSON config file");
    t->add_option("--set", train.sets, "Override a config key, e.g. --set optim.lr=1e-4");
    t->add_option("--profile", train.profile, "Base profile: paper or desk");
    t->add_option("--seed", train.seed, "Seed for every random stream");
    t->add_option("--epochs", train.epochs, "Number of epochs");
    t->add_option("--train-manifest", train.train_manifest, "Training manifest.jsonl");
    t->add_option("--eval-manifest", train.eval_manifest, "Held-out manifest.jsonl");
    t->add_option("--out", train.out, "Run directory");
    t->add_option("--resume", train.resume, "Continue from a checkpoint");
    t->add_flag("--print-config", train.print_config, "Print the resolved config and exit");

    std::string checkpoint, manifest, mode = "comparison", out, input, output;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    e->add_option("--checkpoint", checkpoint)->required();
    e->add_option("--manifest", manifest)->required();
    e->add_option("--mode", mode, "comparison (8-bit PNG round trip) or ablation (raw outputs)");
    e->add_option("--out", out, "Directory for restored PNGs and per_image.csv");

    auto* i = app.add_subcommand("infer", "Restore a single image");
    i->add_option("--checkpoint", checkpoint)->required();
    i->add_option("--input", input)->required();
    i->add_option("--output", output)->required();

    auto* n = app.add_subcommand("inspect", "Write weights-map and residual heatmap images");
    n->add_option("--checkpoint", checkpoint)->required();
    n->add_option("--input", input)->required();
    n->add_option("--out", out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (s->parsed())
            return run_synth(synth);
        if (t->parsed())
            return run_train(train);
        if (e->parsed())
            return run_eval(checkpoint, manifest, mode, out);
        if (i->parsed())
            return run_infer(checkpoint, input, output);
        if (n->parsed())
            return run_inspect(checkpoint, input, out);
    } catch (const wxr::ConfigError& err) {
        std::cerr << "config error: " << err.what() << '\n';
        return 2;
    } catch (const wxr::TeacherLoadError& err) {
        std::cerr << "teacher error: " << err.what() << '\n';
        return 2;
    } catch (const wxr::NumericError& err) {
        std::cerr << "numeric error: " << err.what() << '\n';
        return 3;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    }
    return 0;
}

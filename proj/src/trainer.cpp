#include "wxr/trainer.hpp"

#include "wxr/errors.hpp"
#include "wxr/image_io.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

namespace F = torch::nn::functional;

namespace wxr {

double lr_schedule(int64_t epoch, const TrainConfig& cfg)
{
    if (epoch < 0)
        throw ConfigError("lr_schedule: negative epoch");
    return cfg.lr * std::pow(0.5, static_cast<double>(epoch / cfg.lr_halving_period));
}

std::string LossBreakdown::describe() const
{
    std::ostringstream s;
    s << std::setprecision(8) << "epoch=" << epoch << " step=" << step << " lr=" << lr << " smooth_l1=" << smooth_l1
      << " perceptual=" << perceptual << " ssim=" << ssim << " psnr=" << psnr << " text=" << text
      << " distill=" << distill << (distill_on ? "" : "(off)") << " total=" << total;
    return s.str();
}

EvalMode eval_mode_from_string(const std::string& name)
{
    if (name == "comparison")
        return EvalMode::Comparison;
    if (name == "ablation")
        return EvalMode::Ablation;
    throw ConfigError("eval mode must be 'comparison' or 'ablation', got '" + name + "'");
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg))
{
    cfg_.validate();
    build();
}

void Trainer::build()
{
    torch::set_num_threads(static_cast<int>(cfg_.threads));
    torch::manual_seed(cfg_.seed);
    model_ = RestorationModel(cfg_.model);

    prior_teacher_ = make_teacher(cfg_.prior_teacher);
    if (cfg_.prior_teacher.spec.global_dim != cfg_.model.teacher_dim)
        throw ConfigError("prior teacher dimension does not match model.teacher_dim");
    try {
        text_table_ = prior_teacher_->text_class_embeddings(PromptSet::weather_default());
    } catch (const TeacherLoadError& e) {
        std::cerr << "warning: " << e.what() << "; text classification loss disabled\n";
    }
    if (cfg_.distill.enabled)
        distill_teacher_ = make_teacher(cfg_.distill_teacher);
    perceptual_ = make_perceptual_extractor(cfg_.perceptual_extractor, 0x9e3779b9ULL);

    std::vector<torch::Tensor> params;
    for (auto& p : model_->parameters())
        if (p.requires_grad())
            params.push_back(p);
    optimizer_ = std::make_unique<torch::optim::Adam>(
        params, torch::optim::AdamOptions(cfg_.lr).betas({cfg_.beta1, cfg_.beta2}));
}

void Trainer::apply_lr(double lr)
{
    for (auto& group : optimizer_->param_groups())
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

StepResult Trainer::compute_terms(const Batch& batch, int64_t epoch)
{
    model_->train();
    const auto weather = batch.weather.to(torch::kFloat32);
    const auto clean = batch.clean.to(torch::kFloat32);

    StepResult r;
    r.output = model_forward(model_, prior_teacher_.get(), weather);
    const auto& out = r.output.restored;

    r.terms.smooth_l1 = smooth_l1(out, clean, cfg_.smooth_l1_beta);
    r.terms.perceptual = perceptual_loss(out, clean, *perceptual_);
    r.terms.ssim = ssim_loss(out, clean);
    r.terms.psnr = psnr_loss(out, clean);
    if (r.output.class_features.defined() && text_table_.defined())
        r.terms.text = text_classification_loss(r.output.class_features, text_table_, batch.labels, cfg_.temperature);

    r.distill_on = distill_teacher_ && distill_active(epoch, cfg_.distill);
    if (r.distill_on) {
        auto tc = distill_teacher_->extract_stage_features(clean);
        auto tw = distill_teacher_->extract_stage_features(weather);
        r.terms.distill = distillation_loss(r.output.residuals, tc, tw, cfg_.distill);
    }
    auto weights = cfg_.weights;
    weights.distill = cfg_.distill.weight;
    r.total = total_loss(r.terms, weights, r.distill_on);
    return r;
}

namespace {

double value_of(const torch::Tensor& t)
{
    return t.defined() ? t.item<double>() : 0.0;
}

} // namespace

LossBreakdown Trainer::train_step(const Batch& batch, int64_t epoch)
{
    const double lr = lr_schedule(epoch, cfg_);
    apply_lr(lr);
    auto r = compute_terms(batch, epoch);

    LossBreakdown b;
    b.epoch = epoch;
    b.step = step_;
    b.lr = lr;
    b.smooth_l1 = value_of(r.terms.smooth_l1);
    b.perceptual = value_of(r.terms.perceptual);
    b.ssim = value_of(r.terms.ssim);
    b.psnr = value_of(r.terms.psnr);
    b.text = value_of(r.terms.text);
    b.distill = value_of(r.terms.distill);
    b.total = r.total.item<double>();
    b.distill_on = r.distill_on;
    if (!std::isfinite(b.total))
        throw NumericError("non-finite loss: " + b.describe());

    optimizer_->zero_grad();
    r.total.backward();
    optimizer_->step();
    ++step_;
    history_.push_back(b);
    return b;
}

void Trainer::train(BatchLoader& loader, const StepCallback& on_step, int64_t until, bool write_files)
{
    if (until < 0)
        until = cfg_.epochs;
    const std::filesystem::path out_dir = cfg_.out_dir;
    std::ofstream log;
    if (write_files) {
        std::filesystem::create_directories(out_dir);
        const auto log_file = out_dir / "loss_log.csv";
        const bool fresh = step_ == 0 || !std::filesystem::exists(log_file);
        log.open(log_file, fresh ? std::ios::trunc : std::ios::app);
        if (fresh)
            log << "epoch,step,lr,smooth_l1,perceptual,ssim,psnr,text,distill,distill_on,total\n";
        log << std::setprecision(10);
    }

    while (epoch_ < until) {
        double sum = 0.0;
        int64_t count = 0;
        for (; next_batch_ < loader.num_batches(); ++next_batch_) {
            auto b = train_step(loader.batch(epoch_, next_batch_), epoch_);
            sum += b.total;
            ++count;
            if (log.is_open())
                log << b.epoch << ',' << b.step << ',' << b.lr << ',' << b.smooth_l1 << ',' << b.perceptual << ','
                    << b.ssim << ',' << b.psnr << ',' << b.text << ',' << b.distill << ',' << b.distill_on << ','
                    << b.total << '\n';
            if (on_step)
                on_step(b);
        }
        if (write_files)
            std::cerr << "epoch " << epoch_ << " mean loss " << (count ? sum / static_cast<double>(count) : 0.0)
                      << '\n';
        ++epoch_;
        next_batch_ = 0;
        if (write_files) {
            log.flush();
            if (epoch_ % cfg_.checkpoint_every == 0 || epoch_ == until) {
                std::ostringstream name;
                name << "checkpoint_e" << std::setw(4) << std::setfill('0') << epoch_ << ".wxr";
                save(out_dir / name.str());
                save(out_dir / "last.wxr");
            }
            if (cfg_.eval_every > 0 && epoch_ % cfg_.eval_every == 0 && !cfg_.eval_manifest.empty()) {
                auto report = evaluate(read_manifest(cfg_.eval_manifest), EvalMode::Ablation);
                std::cerr << report.table();
            }
        }
    }
}

// ---------------------------------------------------------------------------

Archive Trainer::to_archive() const
{
    Archive a;
    a.meta["format"] = "wxr-checkpoint";
    a.meta["epoch"] = epoch_;
    a.meta["next_batch"] = next_batch_;
    a.meta["step"] = step_;
    a.meta["config"] = to_json(cfg_);
    a.meta["config_digest"] = config_digest(cfg_);
    put_module(a, "model/", *model_);

    const auto& state = optimizer_->state();
    for (const auto& p : model_->named_parameters()) {
        auto it = state.find(p.value().unsafeGetTensorImpl());
        if (it == state.end())
            continue;
        const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
        const auto base = "optim/" + p.key() + "/";
        a.tensors[base + "exp_avg"] = s.exp_avg().clone();
        a.tensors[base + "exp_avg_sq"] = s.exp_avg_sq().clone();
        a.tensors[base + "step"] = torch::tensor({s.step()}, torch::kInt64);
    }
    a.tensors["rng/torch_cpu"] = at::detail::getDefaultCPUGenerator().get_state();
    return a;
}

void Trainer::save(const std::filesystem::path& file) const
{
    save_archive(file, to_archive());
}

Trainer Trainer::load(const std::filesystem::path& file)
{
    auto a = load_archive(file);
    if (a.meta.value("format", "") != "wxr-checkpoint")
        throw IoError(file.string() + " is not a training checkpoint");
    auto cfg = config_from_json(a.meta.at("config"));
    if (config_digest(cfg) != a.meta.at("config_digest").get<std::string>())
        throw IoError("checkpoint config digest mismatch in " + file.string());

    Trainer t(cfg);
    get_module(a, "model/", *t.model_);
    auto& state = t.optimizer_->state();
    for (auto& p : t.model_->named_parameters()) {
        const auto base = "optim/" + p.key() + "/";
        auto it = a.tensors.find(base + "exp_avg");
        if (it == a.tensors.end())
            continue;
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->exp_avg(it->second.clone());
        s->exp_avg_sq(a.tensors.at(base + "exp_avg_sq").clone());
        s->step(a.tensors.at(base + "step").item<int64_t>());
        state[p.value().unsafeGetTensorImpl()] = std::move(s);
    }
    if (auto it = a.tensors.find("rng/torch_cpu"); it != a.tensors.end()) {
        auto gen = at::detail::getDefaultCPUGenerator();
        gen.set_state(it->second);
    }
    t.epoch_ = a.meta.at("epoch").get<int64_t>();
    t.next_batch_ = a.meta.at("next_batch").get<int64_t>();
    t.step_ = a.meta.at("step").get<int64_t>();
    return t;
}

// ---------------------------------------------------------------------------

ModelOutput Trainer::predict(const torch::Tensor& weather)
{
    torch::NoGradGuard guard;
    model_->eval();
    return model_forward(model_, prior_teacher_.get(), weather.to(torch::kFloat32));
}

torch::Tensor Trainer::restore(const torch::Tensor& image)
{
    if (image.dim() != 3 || image.size(0) != 3)
        throw ConfigError("restore expects a 3 x H x W image");
    const auto m = cfg_.model.encoder.total_stride();
    const auto h = image.size(1);
    const auto w = image.size(2);
    const auto ph = (m - h % m) % m;
    const auto pw = (m - w % m) % m;
    auto x = image.unsqueeze(0).to(torch::kFloat32);
    if (ph || pw)
        x = F::pad(x, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
    auto out = predict(x).restored[0];
    return out.narrow(1, 0, h).narrow(2, 0, w).contiguous();
}

std::vector<int64_t> Trainer::classify(const ModelOutput& out) const
{
    std::vector<int64_t> cls;
    if (!out.class_features.defined() || !text_table_.defined()) {
        cls.assign(static_cast<size_t>(out.restored.size(0)), -1);
        return cls;
    }
    auto idx = text_logits(out.class_features, text_table_, cfg_.temperature).argmax(1);
    for (int64_t i = 0; i < idx.size(0); ++i)
        cls.push_back(idx[i].item<int64_t>());
    return cls;
}

EvalReport Trainer::evaluate(const Manifest& manifest, EvalMode mode, const std::filesystem::path& out_dir)
{
    const auto m = cfg_.model.encoder.total_stride();
    const auto prompts = PromptSet::weather_default();
    EvalReport report;
    for (const auto& e : manifest.entries) {
        auto weather = center_crop_to_multiple(load_image(manifest.resolve(e.weather_path)), m);
        auto clean = center_crop_to_multiple(load_image(manifest.resolve(e.clean_path)), m);
        if (weather.sizes() != clean.sizes())
            throw IoError("evaluate: " + e.weather_path + " and its clean image differ in size");

        auto out = predict(weather.unsqueeze(0));
        auto restored = out.restored[0];
        if (mode == EvalMode::Comparison) {
            if (!out_dir.empty()) {
                const auto file = out_dir / "restored" / (std::filesystem::path(e.weather_path).stem().string() + ".png");
                save_image(file, restored);
                restored = load_image(file);
            } else {
                restored = quantize_8bit(restored);
            }
        }
        auto score = evaluate_pairs(restored, clean, false).per_image.front();
        auto base = evaluate_pairs(weather, clean, false).per_image.front();
        report.rows.push_back({e.weather_path, e.weather_class, score.psnr, score.ssim, base.psnr, base.ssim,
                               classify(out).front()});
    }

    auto aggregate = [&](const std::string& name, const std::string& cls) {
        DatasetRow d;
        d.name = name;
        int64_t correct = 0;
        bool has_prior = true;
        for (const auto& r : report.rows) {
            if (!cls.empty() && r.weather_class != cls)
                continue;
            ++d.count;
            d.psnr += r.psnr;
            d.ssim += r.ssim;
            d.input_psnr += r.input_psnr;
            d.input_ssim += r.input_ssim;
            has_prior = has_prior && r.predicted_class >= 0;
            if (r.predicted_class >= 0 && r.predicted_class == prompts.index_of(r.weather_class))
                ++correct;
        }
        if (d.count > 0) {
            const auto n = static_cast<double>(d.count);
            d.psnr /= n;
            d.ssim /= n;
            d.input_psnr /= n;
            d.input_ssim /= n;
        }
        d.accuracy = has_prior && d.count > 0 ? static_cast<double>(correct) / static_cast<double>(d.count)
                                              : std::numeric_limits<double>::quiet_NaN();
        return d;
    };
    for (const auto& cls : prompts.classes) {
        auto d = aggregate(cls, cls);
        if (d.count > 0)
            report.datasets.push_back(d);
    }
    report.overall = aggregate("mean", "");
    return report;
}

void EvalReport::write_csv(const std::filesystem::path& file) const
{
    if (file.has_parent_path())
        std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out)
        throw IoError("cannot write " + file.string());
    out << std::setprecision(10) << "weather_path,class,psnr,ssim,input_psnr,input_ssim,predicted_class\n";
    for (const auto& r : rows)
        out << r.weather_path << ',' << r.weather_class << ',' << r.psnr << ',' << r.ssim << ',' << r.input_psnr << ','
            << r.input_ssim << ',' << r.predicted_class << '\n';
}

std::string EvalReport::table() const
{
    std::ostringstream s;
    s << std::fixed;
    s << std::left << std::setw(10) << "dataset" << std::right << std::setw(7) << "images" << std::setw(10) << "PSNR"
      << std::setw(9) << "SSIM" << std::setw(11) << "in PSNR" << std::setw(9) << "in SSIM" << std::setw(8) << "acc"
      << '\n';
    auto row = [&](const DatasetRow& d) {
        s << std::left << std::setw(10) << d.name << std::right << std::setw(7) << d.count << std::setprecision(2)
          << std::setw(10) << d.psnr << std::setprecision(4) << std::setw(9) << d.ssim << std::setprecision(2)
          << std::setw(11) << d.input_psnr << std::setprecision(4) << std::setw(9) << d.input_ssim
          << std::setprecision(3) << std::setw(8) << d.accuracy << '\n';
    };
    for (const auto& d : datasets)
        row(d);
    row(overall);
    return s.str();
}

// ---------------------------------------------------------------------------

void write_inspection(Trainer& trainer, const torch::Tensor& image, const std::filesystem::path& out_dir)
{
    const auto m = trainer.config().model.encoder.total_stride();
    auto x = center_crop_to_multiple(image, m).unsqueeze(0);
    auto out = trainer.predict(x);
    std::filesystem::create_directories(out_dir);
    save_image(out_dir / "input.png", x[0]);
    save_image(out_dir / "restored.png", out.restored[0]);

    auto normalize = [](const torch::Tensor& t) {
        auto lo = t.min();
        auto hi = t.max();
        return (t - lo) / (hi - lo).clamp_min(1e-12);
    };
    auto upsample = [&](const torch::Tensor& map) {
        return F::interpolate(map.view({1, 1, map.size(-2), map.size(-1)}),
                              F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{x.size(2), x.size(3)})
                                  .mode(torch::kNearest))[0];
    };
    for (size_t s = 0; s < out.residuals.size(); ++s) {
        for (size_t b = 0; b < out.residuals[s].size(); ++b) {
            const auto tag = "stage" + std::to_string(s + 1) + "_block" + std::to_string(b + 1);
            auto heat = out.residuals[s][b][0].abs().mean(0);
            save_image(out_dir / ("residual_" + tag + ".png"), upsample(normalize(heat)));
            const auto& w = out.weights[s][b];
            if (!w.defined())
                continue;
            for (int64_t k = 0; k < w.size(1); ++k)
                save_image(out_dir / ("weights_" + tag + "_k" + std::to_string(k + 1) + ".png"), upsample(w[0][k]));
        }
    }
}

} // namespace wxr

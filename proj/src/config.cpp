#include "wxr/config.hpp"

#include "wxr/digest.hpp"
#include "wxr/errors.hpp"

#include <fstream>
#include <sstream>

using nlohmann::json;

namespace wxr {

void TrainConfig::validate() const
{
    if (profile != "paper" && profile != "desk")
        throw ConfigError("profile must be 'paper' or 'desk'");
    if (device != "cpu")
        throw ConfigError("device '" + device + "' is not supported by this build (use 'cpu')");
    if (threads < 1)
        throw ConfigError("threads must be >= 1");
    model.validate();
    prior_teacher.spec.validate();
    distill_teacher.spec.validate();
    if (prior_teacher.spec.global_dim != model.teacher_dim)
        throw ConfigError("prior_teacher.spec.global_dim (" + std::to_string(prior_teacher.spec.global_dim) +
                          ") must equal model.teacher_dim (" + std::to_string(model.teacher_dim) + ")");
    for (const auto* t : {&prior_teacher, &distill_teacher})
        if (t->kind != "stub" && t->kind != "torchscript")
            throw ConfigError("teacher kind must be 'stub' or 'torchscript', got '" + t->kind + "'");
    if (distill_teacher.spec.distill_stages.size() != model.encoder.blocks.size())
        throw ConfigError("distill_teacher.spec.distill_stages needs one entry per encoder stage");
    weights.validate();
    distill.validate();
    augment.validate();
    if (augment.crop % model.encoder.total_stride() != 0)
        throw ConfigError("augment.crop must be a multiple of " + std::to_string(model.encoder.total_stride()));
    if (smooth_l1_beta <= 0 || temperature <= 0)
        throw ConfigError("smooth_l1_beta and temperature must be positive");
    if (epochs < 0 || batch_size < 1 || lr <= 0 || lr_halving_period < 1)
        throw ConfigError("epochs >= 0, batch_size >= 1, lr > 0 and lr_halving_period >= 1 required");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
        throw ConfigError("Adam betas must be in [0, 1)");
    if (checkpoint_every < 1 || eval_every < 0)
        throw ConfigError("checkpoint_every >= 1 and eval_every >= 0 required");
}

TrainConfig profile_config(const std::string& profile)
{
    TrainConfig cfg;
    cfg.profile = profile;
    if (profile == "paper")
        return cfg;
    if (profile != "desk")
        throw ConfigError("unknown profile '" + profile + "' (valid: paper, desk)");
    cfg.model.encoder.channels = {16, 32, 64, 128};
    cfg.model.encoder.blocks = {2, 2, 2, 1};
    cfg.model.cwp.prior_tokens = 8;
    cfg.model.residual_output = true;
    cfg.augment.crop = 64;
    cfg.batch_size = 8;
    cfg.epochs = 30;
    // Same fractions of the run as 200/250 and 100/250.
    cfg.distill.start_epoch = 24;
    cfg.lr_halving_period = 12;
    cfg.lr = 1e-3;
    cfg.checkpoint_every = 5;
    return cfg;
}

namespace {

json spec_json(const TeacherSpec& s)
{
    return {{"name", s.name},
            {"stage_channels", s.stage_channels},
            {"stage_strides", s.stage_strides},
            {"distill_stages", s.distill_stages},
            {"global_dim", s.global_dim},
            {"input_size", s.input_size},
            {"mean", s.mean},
            {"std", s.std}};
}

json teacher_json(const TeacherOptions& t)
{
    return {{"kind", t.kind}, {"name", t.name}, {"dir", t.dir}, {"seed", t.seed}, {"spec", spec_json(t.spec)}};
}

template <typename T>
void get(const json& j, const char* key, T& out)
{
    j.at(key).get_to(out);
}

void read_spec(const json& j, TeacherSpec& s)
{
    get(j, "name", s.name);
    get(j, "stage_channels", s.stage_channels);
    get(j, "stage_strides", s.stage_strides);
    get(j, "distill_stages", s.distill_stages);
    get(j, "global_dim", s.global_dim);
    get(j, "input_size", s.input_size);
    get(j, "mean", s.mean);
    get(j, "std", s.std);
}

void read_teacher(const json& j, TeacherOptions& t)
{
    get(j, "kind", t.kind);
    get(j, "name", t.name);
    get(j, "dir", t.dir);
    get(j, "seed", t.seed);
    read_spec(j.at("spec"), t.spec);
}

TrainConfig from_full_json(const json& j)
{
    TrainConfig c;
    get(j, "profile", c.profile);
    get(j, "seed", c.seed);
    get(j, "device", c.device);
    get(j, "threads", c.threads);

    const auto& m = j.at("model");
    const auto& e = m.at("encoder");
    auto& ec = c.model.encoder;
    get(e, "blocks", ec.blocks);
    get(e, "channels", ec.channels);
    get(e, "heads", ec.heads);
    get(e, "reductions", ec.reductions);
    get(e, "strides", ec.strides);
    get(e, "in_channels", ec.in_channels);
    get(e, "num_kernels", ec.num_kernels);
    get(e, "ffn_expansion", ec.ffn_expansion);
    get(e, "use_sar", ec.use_sar);
    const auto& w = m.at("cwp");
    get(w, "num_blocks", c.model.cwp.num_blocks);
    get(w, "heads", c.model.cwp.heads);
    get(w, "prior_tokens", c.model.cwp.prior_tokens);
    get(w, "ffn_expansion", c.model.cwp.ffn_expansion);
    get(m, "residual_output", c.model.residual_output);
    get(m, "prior_encoder", c.model.prior_encoder);
    get(m, "teacher_dim", c.model.teacher_dim);

    read_teacher(j.at("prior_teacher"), c.prior_teacher);
    read_teacher(j.at("distill_teacher"), c.distill_teacher);

    const auto& l = j.at("loss");
    get(l, "perceptual", c.weights.perceptual);
    get(l, "ssim", c.weights.ssim);
    get(l, "psnr", c.weights.psnr);
    get(l, "text", c.weights.text);
    get(l, "smooth_l1_beta", c.smooth_l1_beta);
    get(l, "temperature", c.temperature);
    get(l, "perceptual_extractor", c.perceptual_extractor);

    const auto& d = j.at("distill");
    get(d, "enabled", c.distill.enabled);
    get(d, "start_epoch", c.distill.start_epoch);
    get(d, "weight", c.distill.weight);
    get(d, "match_all_blocks", c.distill.match_all_blocks);
    get(d, "normalize", c.distill.normalize);
    get(d, "prefactor", c.distill.prefactor);
    get(d, "target", c.distill.target);
    c.weights.distill = c.distill.weight;

    const auto& a = j.at("augment");
    get(a, "mix_prob", c.augment.mix_prob);
    get(a, "crop", c.augment.crop);
    get(a, "min_mix_area", c.augment.min_mix_area);
    get(a, "max_mix_area", c.augment.max_mix_area);

    const auto& o = j.at("optim");
    get(o, "epochs", c.epochs);
    get(o, "batch_size", c.batch_size);
    get(o, "lr", c.lr);
    get(o, "beta1", c.beta1);
    get(o, "beta2", c.beta2);
    get(o, "lr_halving_period", c.lr_halving_period);

    const auto& r = j.at("run");
    get(r, "checkpoint_every", c.checkpoint_every);
    get(r, "eval_every", c.eval_every);
    get(r, "train_manifest", c.train_manifest);
    get(r, "eval_manifest", c.eval_manifest);
    get(r, "out_dir", c.out_dir);
    return c;
}

std::string valid_keys(const json& level)
{
    std::string out;
    for (const auto& [k, v] : level.items())
        out += (out.empty() ? "" : ", ") + k;
    return out;
}

void merge(json& base, const json& overrides, const std::string& path)
{
    if (!overrides.is_object())
        throw ConfigError("config" + (path.empty() ? std::string() : " key '" + path + "'") + " must be an object");
    for (const auto& [key, value] : overrides.items()) {
        const auto full = path.empty() ? key : path + "." + key;
        if (!base.contains(key))
            throw ConfigError("unknown config key '" + full + "'; valid keys" +
                              (path.empty() ? std::string() : " under '" + path + "'") + ": " + valid_keys(base));
        auto& slot = base[key];
        if (slot.is_object())
            merge(slot, value, full);
        else
            slot = value;
    }
}

} // namespace

json to_json(const TrainConfig& c)
{
    const auto& ec = c.model.encoder;
    return {
        {"profile", c.profile},
        {"seed", c.seed},
        {"device", c.device},
        {"threads", c.threads},
        {"model",
         {{"encoder",
           {{"blocks", ec.blocks},
            {"channels", ec.channels},
            {"heads", ec.heads},
            {"reductions", ec.reductions},
            {"strides", ec.strides},
            {"in_channels", ec.in_channels},
            {"num_kernels", ec.num_kernels},
            {"ffn_expansion", ec.ffn_expansion},
            {"use_sar", ec.use_sar}}},
          {"cwp",
           {{"num_blocks", c.model.cwp.num_blocks},
            {"heads", c.model.cwp.heads},
            {"prior_tokens", c.model.cwp.prior_tokens},
            {"ffn_expansion", c.model.cwp.ffn_expansion}}},
          {"residual_output", c.model.residual_output},
          {"prior_encoder", c.model.prior_encoder},
          {"teacher_dim", c.model.teacher_dim}}},
        {"prior_teacher", teacher_json(c.prior_teacher)},
        {"distill_teacher", teacher_json(c.distill_teacher)},
        {"loss",
         {{"perceptual", c.weights.perceptual},
          {"ssim", c.weights.ssim},
          {"psnr", c.weights.psnr},
          {"text", c.weights.text},
          {"smooth_l1_beta", c.smooth_l1_beta},
          {"temperature", c.temperature},
          {"perceptual_extractor", c.perceptual_extractor}}},
        {"distill",
         {{"enabled", c.distill.enabled},
          {"start_epoch", c.distill.start_epoch},
          {"weight", c.distill.weight},
          {"match_all_blocks", c.distill.match_all_blocks},
          {"normalize", c.distill.normalize},
          {"prefactor", c.distill.prefactor},
          {"target", c.distill.target}}},
        {"augment",
         {{"mix_prob", c.augment.mix_prob},
          {"crop", c.augment.crop},
          {"min_mix_area", c.augment.min_mix_area},
          {"max_mix_area", c.augment.max_mix_area}}},
        {"optim",
         {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"lr_halving_period", c.lr_halving_period}}},
        {"run",
         {{"checkpoint_every", c.checkpoint_every},
          {"eval_every", c.eval_every},
          {"train_manifest", c.train_manifest},
          {"eval_manifest", c.eval_manifest},
          {"out_dir", c.out_dir}}},
    };
}

TrainConfig config_from_json(const json& overrides)
{
    std::string profile = "paper";
    if (overrides.is_object() && overrides.contains("profile")) {
        if (!overrides["profile"].is_string())
            throw ConfigError("config key 'profile' must be a string");
        profile = overrides["profile"].get<std::string>();
    }
    auto tree = to_json(profile_config(profile));
    if (!overrides.is_null())
        merge(tree, overrides, "");
    try {
        return from_full_json(tree);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config value has the wrong type: ") + e.what());
    }
}

json read_config_file(const std::filesystem::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw ConfigError("cannot open config file " + file.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + file.string() + " is not valid JSON: " + e.what());
    }
}

void apply_override(json& tree, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + assignment + "' must look like key.path=value");
    const auto path = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded())
        value = text;

    json* node = &tree;
    std::stringstream parts(path);
    std::string part;
    std::vector<std::string> keys;
    while (std::getline(parts, part, '.'))
        keys.push_back(part);
    for (size_t i = 0; i + 1 < keys.size(); ++i) {
        if (!node->is_object())
            *node = json::object();
        node = &(*node)[keys[i]];
    }
    if (!node->is_object())
        *node = json::object();
    (*node)[keys.back()] = value;
}

TrainConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides)
{
    json tree = file.empty() ? json::object() : read_config_file(file);
    for (const auto& o : overrides)
        apply_override(tree, o);
    auto cfg = config_from_json(tree);
    cfg.validate();
    return cfg;
}

std::string config_digest(const TrainConfig& cfg)
{
    return hex64(fnv1a64(to_json(cfg).dump()));
}

} // namespace wxr

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ska1/core/errors.hpp"
#include "ska1/datapipe.hpp"
#include "ska1/diffusion.hpp"
#include "ska1/model/model.hpp"
#include "ska1/training.hpp"

namespace ska1 {

// ---- per-struct JSON (explicit fields so round-trips are lossless) ----

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
    return {{"latent_channels", m.latent_channels}, {"latent_frames", m.latent_frames},
            {"latent_h", m.latent_h},               {"latent_w", m.latent_w},
            {"patch", m.patch},                     {"dim", m.dim},
            {"heads", m.heads},                     {"depth", m.depth},
            {"d_id", m.d_id},                       {"lm_channels", m.lm_channels},
            {"text_len", m.text_len},               {"text_vocab", m.text_vocab},
            {"vae_hidden", m.vae_hidden},           {"guider_hidden", m.guider_hidden},
            {"ffn_mult", m.ffn_mult}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig m;
    m.latent_channels = j.at("latent_channels").get<int>();
    m.latent_frames = j.at("latent_frames").get<int>();
    m.latent_h = j.at("latent_h").get<int>();
    m.latent_w = j.at("latent_w").get<int>();
    m.patch = j.at("patch").get<int>();
    m.dim = j.at("dim").get<int>();
    m.heads = j.at("heads").get<int>();
    m.depth = j.at("depth").get<int>();
    m.d_id = j.at("d_id").get<int>();
    m.lm_channels = j.at("lm_channels").get<int>();
    m.text_len = j.at("text_len").get<int>();
    m.text_vocab = j.at("text_vocab").get<int>();
    m.vae_hidden = j.at("vae_hidden").get<int>();
    m.guider_hidden = j.at("guider_hidden").get<int>();
    m.ffn_mult = j.at("ffn_mult").get<int>();
    m.validate();
    return m;
}

inline nlohmann::json diffusion_config_to_json(const DiffusionConfig& d) {
    return {{"T", d.T},
            {"beta_min", d.beta_min},
            {"beta_max", d.beta_max},
            {"loss_weight", d.loss_weight},
            {"cfg_scale", d.cfg_scale},
            {"sampler_steps", d.sampler_steps}};
}

inline DiffusionConfig diffusion_config_from_json(const nlohmann::json& j) {
    DiffusionConfig d;
    d.T = j.at("T").get<int>();
    d.beta_min = j.at("beta_min").get<double>();
    d.beta_max = j.at("beta_max").get<double>();
    d.loss_weight = j.at("loss_weight").get<double>();
    d.cfg_scale = j.at("cfg_scale").get<double>();
    d.sampler_steps = j.at("sampler_steps").get<int>();
    d.validate();
    return d;
}

inline nlohmann::json stage_config_to_json(const StageConfig& s) {
    return {{"stage_id", s.stage_id},
            {"steps", s.steps},
            {"learning_rate", s.learning_rate},
            {"batch_size", s.batch_size}};
}

inline StageConfig stage_config_from_json(const nlohmann::json& j) {
    StageConfig s = make_stage_config(j.at("stage_id").get<int>(), j.at("steps").get<int>(),
                                      j.at("learning_rate").get<double>(), j.at("batch_size").get<int>());
    s.validate();
    return s;
}

inline nlohmann::json thresholds_to_json(const FilterThresholds& t) {
    return {{"min_head_angle_range", t.min_head_angle_range},
            {"min_mouth_variation", t.min_mouth_variation},
            {"max_faces", t.max_faces},
            {"min_frames", t.min_frames}};
}

inline FilterThresholds thresholds_from_json(const nlohmann::json& j) {
    FilterThresholds t;
    t.min_head_angle_range = j.at("min_head_angle_range").get<double>();
    t.min_mouth_variation = j.at("min_mouth_variation").get<double>();
    t.max_faces = j.at("max_faces").get<int>();
    t.min_frames = j.at("min_frames").get<int>();
    t.validate();
    return t;
}

// ---- the whole run ----

struct SynthPlan {
    // geometry matches the default ModelConfig so a bare RunConfig is runnable
    int n_clips = 6;
    int n_frames = 16;
    int width = 64;
    int height = 64;
    double fps = 12.0;
    // cycled over clips in order
    std::vector<std::string> profiles{"talking", "turning", "static", "two_faces"};
};

struct EvalPlan {
    int n_pairs = 3;
    int sampler_steps = 6;
    double cfg_scale = 3.0;
};

struct RunConfig {
    std::uint64_t seed = 7;
    std::string data_root = "ska1_data"; // resolved against SKA1_HOME when relative-default
    std::string checkpoint_dir = "checkpoints";
    std::string report_dir = "reports";
    ModelConfig model;
    DiffusionConfig diffusion;
    std::vector<StageConfig> stages = default_stages();
    FilterThresholds thresholds;
    SynthPlan synth;
    VaePretrainConfig vae_pretrain;
    TrainHyper hyper;
    EvalPlan eval;

    void validate() const {
        model.validate();
        diffusion.validate();
        if (stages.size() != 3) throw ConfigError("run config needs exactly three stages");
        for (std::size_t i = 0; i < 3; ++i) {
            if (stages[i].stage_id != static_cast<int>(i) + 1)
                throw ConfigError("stages must be ids 1,2,3 in order");
            stages[i].validate();
        }
        thresholds.validate();
        if (synth.n_clips < 1 || synth.n_frames < 1 || synth.width < 1 || synth.height < 1 ||
            synth.profiles.empty())
            throw ConfigError("bad synth plan");
        if (eval.n_pairs < 1 || eval.sampler_steps < 1) throw ConfigError("bad eval plan");
        if (vae_pretrain.steps < 0 || !(vae_pretrain.learning_rate > 0.0))
            throw ConfigError("bad pretrain settings");
        if (!(hyper.cond_dropout >= 0.0 && hyper.cond_dropout < 1.0))
            throw ConfigError("cond_dropout must be in [0,1)");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["v"] = 1;
        j["seed"] = seed;
        j["paths"] = {{"data_root", data_root}, {"checkpoints", checkpoint_dir}, {"reports", report_dir}};
        j["model"] = model_config_to_json(model);
        j["diffusion"] = diffusion_config_to_json(diffusion);
        nlohmann::json st = nlohmann::json::array();
        for (const auto& s : stages) st.push_back(stage_config_to_json(s));
        j["stages"] = std::move(st);
        j["thresholds"] = thresholds_to_json(thresholds);
        j["synth"] = {{"n_clips", synth.n_clips}, {"n_frames", synth.n_frames}, {"width", synth.width},
                      {"height", synth.height},   {"fps", synth.fps},           {"profiles", synth.profiles}};
        j["vae_pretrain"] = {{"steps", vae_pretrain.steps}, {"learning_rate", vae_pretrain.learning_rate}};
        j["train"] = {{"cond_dropout", hyper.cond_dropout}};
        j["eval"] = {{"n_pairs", eval.n_pairs},
                     {"sampler_steps", eval.sampler_steps},
                     {"cfg_scale", eval.cfg_scale}};
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        if (j.at("v").get<int>() != 1) throw ConfigError("unsupported run config schema");
        RunConfig c;
        c.seed = j.at("seed").get<std::uint64_t>();
        c.data_root = j.at("paths").at("data_root").get<std::string>();
        c.checkpoint_dir = j.at("paths").at("checkpoints").get<std::string>();
        c.report_dir = j.at("paths").at("reports").get<std::string>();
        c.model = model_config_from_json(j.at("model"));
        c.diffusion = diffusion_config_from_json(j.at("diffusion"));
        c.stages.clear();
        for (const auto& s : j.at("stages")) c.stages.push_back(stage_config_from_json(s));
        c.thresholds = thresholds_from_json(j.at("thresholds"));
        const auto& sy = j.at("synth");
        c.synth.n_clips = sy.at("n_clips").get<int>();
        c.synth.n_frames = sy.at("n_frames").get<int>();
        c.synth.width = sy.at("width").get<int>();
        c.synth.height = sy.at("height").get<int>();
        c.synth.fps = sy.at("fps").get<double>();
        c.synth.profiles = sy.at("profiles").get<std::vector<std::string>>();
        c.vae_pretrain.steps = j.at("vae_pretrain").at("steps").get<int>();
        c.vae_pretrain.learning_rate = j.at("vae_pretrain").at("learning_rate").get<double>();
        c.hyper.cond_dropout = j.at("train").at("cond_dropout").get<double>();
        c.eval.n_pairs = j.at("eval").at("n_pairs").get<int>();
        c.eval.sampler_steps = j.at("eval").at("sampler_steps").get<int>();
        c.eval.cfg_scale = j.at("eval").at("cfg_scale").get<double>();
        c.validate();
        return c;
    }
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config: " + path.string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse failed: " + std::string(e.what()));
    }
    return RunConfig::from_json(j);
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write config: " + path.string());
    f << cfg.to_json().dump(2) << "\n";
}

// Data root resolution order: explicit flag, then the config file value, then
// $SKA1_HOME, then ./ska1_data.
inline std::filesystem::path resolve_data_root(const std::string& flag_value, const std::string& config_value) {
    if (!flag_value.empty()) return flag_value;
    if (!config_value.empty() && config_value != "ska1_data") return config_value;
    if (const char* home = std::getenv("SKA1_HOME"); home != nullptr && home[0] != '\0')
        return std::filesystem::path(home);
    return config_value.empty() ? std::filesystem::path("ska1_data") : std::filesystem::path(config_value);
}

// Hash of everything that determines checkpoint tensor shapes and the noise
// schedule; sampler/report knobs deliberately excluded so they can vary
// without invalidating saved weights.
inline std::string config_hash_hex(const RunConfig& cfg) {
    nlohmann::json j;
    j["model"] = model_config_to_json(cfg.model);
    j["T"] = cfg.diffusion.T;
    j["beta_min"] = cfg.diffusion.beta_min;
    j["beta_max"] = cfg.diffusion.beta_max;
    const std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace ska1

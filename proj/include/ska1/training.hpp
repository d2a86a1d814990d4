#pragma once

#include <chrono>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ska1/core/rng.hpp"
#include "ska1/diffusion.hpp"
#include "ska1/model/model.hpp"

namespace ska1 {

// ---- staged freeze sets ----

inline std::set<std::string> stage_trainable_groups(int stage_id) {
    switch (stage_id) {
        case 1: return {"patch_embed_conv"};
        case 2: return {"identity_projection"};
        case 3: return {"landmark_guider", "dit_blocks", "identity_projection"};
        default: throw ConfigError("unknown stage id " + std::to_string(stage_id));
    }
}

struct StageConfig {
    int stage_id = 1;
    std::set<std::string> trainable_groups = stage_trainable_groups(1);
    int steps = 200;
    double learning_rate = 1e-5;
    int batch_size = 4;

    void validate() const {
        if (trainable_groups != stage_trainable_groups(stage_id))
            throw ConfigError("stage " + std::to_string(stage_id) + " trainable groups are fixed");
        if (steps < 0 || batch_size < 1 || !(learning_rate > 0.0)) throw ConfigError("bad stage config");
    }
};

inline StageConfig make_stage_config(int stage_id, int steps, double lr, int batch_size) {
    StageConfig s;
    s.stage_id = stage_id;
    s.trainable_groups = stage_trainable_groups(stage_id);
    s.steps = steps;
    s.learning_rate = lr;
    s.batch_size = batch_size;
    return s;
}

// Full-scale reference settings: steps 2000/2000/1000 (ratio 2:2:1), learning
// rates 1e-5/1e-5/1e-6, batch 512. Desk-scale defaults keep the ratio.
inline std::vector<StageConfig> default_stages(int batch_size = 4) {
    return {make_stage_config(1, 200, 1e-5, batch_size), make_stage_config(2, 200, 1e-5, batch_size),
            make_stage_config(3, 100, 1e-6, batch_size)};
}

inline std::vector<Param*> apply_stage_freeze(ParameterRegistry& reg, const StageConfig& stage) {
    stage.validate();
    reg.set_trainable_groups(stage.trainable_groups);
    return reg.trainable();
}

// ---- optimizer: decoupled-weight-decay adaptive moments ----

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    AdamW(std::vector<Param*> params, double lr, const AdamWConfig& cfg = {}) : lr_(lr), cfg_(cfg) {
        for (Param* p : params) {
            Slot s;
            s.node = p->var.get();
            s.m = Tensor(p->var->val.shape());
            s.v = Tensor(p->var->val.shape());
            slots_.push_back(std::move(s));
        }
    }

    // One update over every attached tensor whose gradient was touched this
    // step. theta -= lr * (mhat / (sqrt(vhat) + eps) + wd * theta).
    void step() {
        for (Slot& s : slots_) {
            if (s.node->grad.numel() == 0) continue;
            ++s.t;
            const double bc1 = 1.0 - std::pow(cfg_.beta1, s.t);
            const double bc2 = 1.0 - std::pow(cfg_.beta2, s.t);
            Tensor& theta = s.node->val;
            const Tensor& g = s.node->grad;
            for (std::int64_t i = 0; i < theta.numel(); ++i) {
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                theta[i] -= lr_ * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[i]);
            }
        }
    }

private:
    struct Slot {
        ag::Node* node = nullptr;
        Tensor m, v;
        int t = 0;
    };
    double lr_;
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
};

// ---- batches ----

struct TrainClip {
    std::string clip_id;
    Tensor latent;   // [N, C, H', W'], frozen-VAE encoding of the clip
    Tensor lm_video; // [1, T_px, H_px, W_px] rasterized driving landmarks
    Tensor weights;  // [N, H', W'] motion weights in [1.0, 1.5]
    Tensor f_id;     // [d_id] reference-frame identity embedding
    std::string prompt;
};

struct StepDraw {
    int clip_index = 0;
    int t = 0;
    Tensor eps;
    bool dropped = false; // condition dropout for guidance training
};

inline std::vector<StepDraw> draw_batch(Rng& rng, int n_clips, int batch_size, int T,
                                        const std::vector<int>& latent_shape, double cond_dropout) {
    std::vector<StepDraw> draws(static_cast<std::size_t>(batch_size));
    for (auto& d : draws) {
        d.clip_index = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n_clips)));
        d.t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(T)));
        d.eps = Tensor::randn(latent_shape, rng);
        d.dropped = rng.bernoulli(cond_dropout);
    }
    return draws;
}

// Builds one clip's noise prediction graph from a draw.
inline ag::Var clip_eps_prediction(const VideoModel& model, const TrainClip& clip, const StepDraw& draw,
                                   const NoiseSchedule& sched) {
    Tensor x_t = add_noise(clip.latent, draw.t, draw.eps, sched);
    Conditioning cond;
    if (draw.dropped) {
        cond = model.make_uncond_conditioning();
    } else {
        ag::Var lm = model.guider_encode(ag::constant(clip.lm_video));
        cond = model.make_conditioning(lm, clip.f_id, clip.prompt);
    }
    return model.eps_predict(ag::constant(std::move(x_t)), cond, draw.t);
}

struct TrainHyper {
    double cond_dropout = 0.1;
    AdamWConfig adamw;
};

// One optimization step over a drawn batch: noise, predict, motion-weighted
// loss averaged over the batch, backprop, update trainable tensors.
inline double train_step(VideoModel& model, const NoiseSchedule& sched, const std::vector<TrainClip>& data,
                         const std::vector<StepDraw>& draws, AdamW& opt, int stage_id, int step_index) {
    model.reg.clear_grads();
    std::vector<ag::Var> losses;
    for (const StepDraw& d : draws) {
        const TrainClip& clip = data.at(static_cast<std::size_t>(d.clip_index));
        ag::Var pred = clip_eps_prediction(model, clip, d, sched);
        losses.push_back(ag::weighted_channel_mse(pred, d.eps, clip.weights));
    }
    ag::Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = ag::add(total, losses[i]);
    if (losses.size() > 1) total = ag::scale(total, 1.0 / static_cast<double>(losses.size()));
    const double loss = total->val[0];
    if (!std::isfinite(loss)) {
        std::string ids;
        for (const StepDraw& d : draws)
            ids += data.at(static_cast<std::size_t>(d.clip_index)).clip_id + "(t=" + std::to_string(d.t) + ") ";
        throw NonFiniteLossError("non-finite loss at stage " + std::to_string(stage_id) + " step " +
                                 std::to_string(step_index) + ": " + ids);
    }
    ag::backward(total);
    opt.step();
    return loss;
}

// Appends {stage, step, loss, lr, wall_ms} rows; creates the header when new.
class TrainLog {
public:
    explicit TrainLog(const std::filesystem::path& path) {
        const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
        out_.open(path, std::ios::app);
        if (!out_) throw IoError("cannot open train log: " + path.string());
        if (fresh) out_ << "stage,step,loss,lr,wall_ms\n";
    }

    void row(int stage, int step, double loss, double lr, double wall_ms) {
        out_ << stage << "," << step << "," << loss << "," << lr << "," << wall_ms << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

// Runs one stage to completion. The RNG stream depends only on (seed, stage),
// so a resumed stage replays identically regardless of process history.
inline std::vector<double> train_stage(VideoModel& model, const NoiseSchedule& sched,
                                       const std::vector<TrainClip>& data, const StageConfig& stage,
                                       std::uint64_t seed, const TrainHyper& hyper = {},
                                       TrainLog* log = nullptr) {
    if (data.empty()) throw InputError("train_stage: no clips");
    std::vector<Param*> trainable = apply_stage_freeze(model.reg, stage);
    AdamW opt(trainable, stage.learning_rate, hyper.adamw);
    Rng rng = Rng(seed).derive("train_stage", static_cast<std::uint64_t>(stage.stage_id));
    const std::vector<int> shape = data[0].latent.shape();
    std::vector<double> losses;
    losses.reserve(static_cast<std::size_t>(stage.steps));
    for (int step = 0; step < stage.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<StepDraw> draws = draw_batch(rng, static_cast<int>(data.size()), stage.batch_size,
                                                 sched.T, shape, hyper.cond_dropout);
        const double loss = train_step(model, sched, data, draws, opt, stage.stage_id, step);
        losses.push_back(loss);
        if (log) {
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            log->row(stage.stage_id, step, loss, stage.learning_rate, ms);
        }
    }
    return losses;
}

// ---- VAE stub pretraining (separate phase; the three stages never touch it) ----

struct VaePretrainConfig {
    int steps = 300;
    double learning_rate = 3e-3;
    AdamWConfig adamw;
};

// Plain reconstruction objective over pixel videos; afterwards the latent
// scale buffer is set to 1/std of the raw latents so diffusion sees
// unit-variance inputs. Returns the mean reconstruction MSE over `videos`
// measured after training.
inline double vae_pretrain(VideoModel& model, const std::vector<Tensor>& videos,
                           const VaePretrainConfig& cfg, std::uint64_t seed, TrainLog* log = nullptr) {
    if (videos.empty()) throw InputError("vae_pretrain: no videos");
    model.set_latent_scale(1.0);
    model.reg.set_trainable_groups({"vae_stub"});
    AdamW opt(model.reg.trainable(), cfg.learning_rate, cfg.adamw);
    Rng rng = Rng(seed).derive("vae_pretrain");
    for (int step = 0; step < cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto idx = rng.uniform_int(videos.size());
        model.reg.clear_grads();
        ag::Var x = ag::constant(videos[idx]);
        ag::Var recon = model.vae_decode(model.vae_encode(x));
        ag::Var loss = ag::mse_loss(recon, videos[idx]);
        if (!std::isfinite(loss->val[0]))
            throw NonFiniteLossError("non-finite VAE loss at step " + std::to_string(step));
        ag::backward(loss);
        opt.step();
        if (log) {
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            log->row(0, step, loss->val[0], cfg.learning_rate, ms);
        }
    }
    model.reg.freeze_all();

    // calibrate the latent scale on the training clips
    double sum = 0.0, sumsq = 0.0;
    std::int64_t count = 0;
    {
        ag::NoGradGuard ng;
        for (const Tensor& v : videos) {
            Tensor lat = model.vae_encode(ag::constant(v))->val;
            for (std::int64_t i = 0; i < lat.numel(); ++i) {
                sum += lat[i];
                sumsq += lat[i] * lat[i];
            }
            count += lat.numel();
        }
    }
    const double mean = sum / count;
    const double var = sumsq / count - mean * mean;
    if (var > 1e-12) model.set_latent_scale(1.0 / std::sqrt(var));

    double mse = 0.0;
    {
        ag::NoGradGuard ng;
        for (const Tensor& v : videos) {
            Tensor recon = model.vae_decode(model.vae_encode(ag::constant(v)))->val;
            mse += ska1::mse(recon, v);
        }
    }
    return mse / static_cast<double>(videos.size());
}

} // namespace ska1

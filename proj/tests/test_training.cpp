#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "ska1/checkpoint.hpp"
#include "ska1/training.hpp"

using namespace ska1;

namespace {

ModelConfig micro() {
    ModelConfig m;
    m.latent_channels = 2;
    m.latent_frames = 2;
    m.latent_h = 4;
    m.latent_w = 4;
    m.patch = 2;
    m.dim = 16;
    m.heads = 2;
    m.depth = 2;
    m.d_id = 8;
    m.lm_channels = 2;
    m.text_len = 3;
    m.text_vocab = 32;
    m.vae_hidden = 4;
    m.guider_hidden = 3;
    m.ffn_mult = 2;
    return m;
}

std::vector<TrainClip> micro_data(const ModelConfig& m, int n_clips, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainClip> data;
    for (int c = 0; c < n_clips; ++c) {
        TrainClip clip;
        clip.clip_id = "clip_" + std::to_string(c);
        clip.latent = Tensor::randn({m.latent_frames, m.latent_channels, m.latent_h, m.latent_w}, rng);
        clip.lm_video = Tensor::randn({1, m.pixel_frames(), m.pixel_h(), m.pixel_w()}, rng, 0.3);
        Tensor w({m.latent_frames, m.latent_h, m.latent_w});
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = 1.0 + 0.5 * rng.uniform();
        clip.weights = std::move(w);
        clip.f_id = Tensor::randn({m.d_id}, rng);
        clip.prompt = "portrait";
        data.push_back(std::move(clip));
    }
    return data;
}

DiffusionConfig micro_diffusion() {
    DiffusionConfig d;
    d.T = 100;
    d.sampler_steps = 4;
    return d;
}

std::map<std::string, Tensor> snapshot(const ParameterRegistry& reg) {
    std::map<std::string, Tensor> snap;
    for (const auto& p : reg.params()) snap.emplace(p.key(), p.var->val);
    return snap;
}

// returns groups whose tensors changed since the snapshot
std::set<std::string> changed_groups(const ParameterRegistry& reg,
                                     const std::map<std::string, Tensor>& snap) {
    std::set<std::string> out;
    for (const auto& p : reg.params()) {
        const Tensor& was = snap.at(p.key());
        const Tensor& now = p.var->val;
        for (std::int64_t i = 0; i < now.numel(); ++i)
            if (was[i] != now[i]) {
                out.insert(p.group);
                break;
            }
    }
    return out;
}

} // namespace

// ---- stage configuration ----

TEST(Stages, TrainableGroupSets) {
    EXPECT_EQ(stage_trainable_groups(1), (std::set<std::string>{"patch_embed_conv"}));
    EXPECT_EQ(stage_trainable_groups(2), (std::set<std::string>{"identity_projection"}));
    EXPECT_EQ(stage_trainable_groups(3),
              (std::set<std::string>{"landmark_guider", "dit_blocks", "identity_projection"}));
    EXPECT_THROW(stage_trainable_groups(0), ConfigError);
    EXPECT_THROW(stage_trainable_groups(4), ConfigError);
}

TEST(Stages, ConfigValidation) {
    StageConfig s = make_stage_config(2, 10, 1e-4, 2);
    EXPECT_NO_THROW(s.validate());
    s.trainable_groups.insert("vae_stub"); // tampering with the freeze set
    EXPECT_THROW(s.validate(), ConfigError);

    EXPECT_THROW(make_stage_config(1, -1, 1e-4, 2).validate(), ConfigError);
    EXPECT_THROW(make_stage_config(1, 10, 0.0, 2).validate(), ConfigError);
    EXPECT_THROW(make_stage_config(1, 10, 1e-4, 0).validate(), ConfigError);
}

TEST(Stages, DefaultScheduleKeepsRatio) {
    const std::vector<StageConfig> stages = default_stages(4);
    ASSERT_EQ(stages.size(), 3u);
    EXPECT_EQ(stages[0].stage_id, 1);
    EXPECT_EQ(stages[1].stage_id, 2);
    EXPECT_EQ(stages[2].stage_id, 3);
    EXPECT_EQ(stages[0].steps, stages[1].steps);
    EXPECT_EQ(stages[0].steps, 2 * stages[2].steps);
    EXPECT_DOUBLE_EQ(stages[0].learning_rate, stages[1].learning_rate);
    EXPECT_DOUBLE_EQ(stages[2].learning_rate, stages[0].learning_rate / 10.0);
}

// ---- optimizer ----

TEST(AdamW_, MatchesHandComputedUpdate) {
    ParameterRegistry reg;
    ag::Var v = reg.add("output_head", "w", Tensor({2}, {1.0, -2.0}));
    reg.set_trainable_groups({"output_head"});
    AdamWConfig cfg; // 0.9 / 0.999 / 1e-8 / 0.01
    const double lr = 0.1;
    AdamW opt(reg.trainable(), lr, cfg);

    const double g0 = 0.5, g1 = -1.5;
    v->grad = Tensor({2}, {g0, g1});
    opt.step();

    auto expected = [&](double theta, double g) {
        const double m = 0.1 * g, vv = 0.001 * g * g;
        const double mhat = m / 0.1, vhat = vv / 0.001;
        return theta - lr * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * theta);
    };
    EXPECT_NEAR(v->val[0], expected(1.0, g0), 1e-15);
    EXPECT_NEAR(v->val[1], expected(-2.0, g1), 1e-15);
}

TEST(AdamW_, SecondStepUsesRunningMoments) {
    ParameterRegistry reg;
    ag::Var v = reg.add("output_head", "w", Tensor({1}, {1.0}));
    reg.set_trainable_groups({"output_head"});
    const double lr = 0.01;
    AdamW opt(reg.trainable(), lr);

    double theta = 1.0, m = 0.0, vv = 0.0;
    const double g[2] = {0.3, -0.2};
    for (int t = 1; t <= 2; ++t) {
        v->grad = Tensor({1}, {g[t - 1]});
        opt.step();
        m = 0.9 * m + 0.1 * g[t - 1];
        vv = 0.999 * vv + 0.001 * g[t - 1] * g[t - 1];
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = vv / (1.0 - std::pow(0.999, t));
        theta -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * theta);
        EXPECT_NEAR(v->val[0], theta, 1e-15) << "step " << t;
    }
}

TEST(AdamW_, SkipsParamsWithoutGradient) {
    ParameterRegistry reg;
    ag::Var a = reg.add("output_head", "w", Tensor({1}, {1.0}));
    ag::Var b = reg.add("output_head", "b", Tensor({1}, {2.0}));
    reg.set_trainable_groups({"output_head"});
    AdamW opt(reg.trainable(), 0.1);
    a->grad = Tensor({1}, {1.0});
    // b's grad stays unallocated (as after clear_grads)
    opt.step();
    EXPECT_NE(a->val[0], 1.0);
    EXPECT_DOUBLE_EQ(b->val[0], 2.0);
}

// ---- objective plumbing ----

TEST(Objective, UnitWeightsReduceToPlainMse) {
    Rng rng(21);
    const Tensor pred_t = Tensor::randn({2, 3, 4, 4}, rng);
    const Tensor target = Tensor::randn({2, 3, 4, 4}, rng);
    const Tensor w = Tensor::full({2, 4, 4}, 1.0);
    ag::NoGradGuard ng;
    const double weighted = ag::weighted_channel_mse(ag::constant(pred_t), target, w)->val[0];
    const double plain = ag::mse_loss(ag::constant(pred_t), target)->val[0];
    EXPECT_NEAR(weighted, plain, 1e-12);
}

// ---- staged training ----

TEST(TrainStage, FreezeInvariantsHoldBitwise) {
    const ModelConfig m = micro();
    const NoiseSchedule sched = make_schedule(micro_diffusion());
    const std::vector<TrainClip> data = micro_data(m, 3, 5);

    for (int stage_id = 1; stage_id <= 3; ++stage_id) {
        VideoModel model(m, 7);
        const auto before = snapshot(model.reg);
        train_stage(model, sched, data, make_stage_config(stage_id, 4, 1e-3, 2), 11);
        const std::set<std::string> changed = changed_groups(model.reg, before);
        for (const auto& g : changed)
            EXPECT_TRUE(stage_trainable_groups(stage_id).count(g))
                << "stage " << stage_id << " touched frozen group " << g;
        // at this learning rate every trainable group must actually move
        for (const auto& g : stage_trainable_groups(stage_id))
            EXPECT_TRUE(changed.count(g)) << "stage " << stage_id << " left " << g << " untouched";
    }
}

TEST(TrainStage, DeterministicInSeed) {
    const ModelConfig m = micro();
    const NoiseSchedule sched = make_schedule(micro_diffusion());
    const std::vector<TrainClip> data = micro_data(m, 3, 5);

    VideoModel a(m, 7), b(m, 7);
    const std::vector<double> la = train_stage(a, sched, data, make_stage_config(1, 5, 1e-3, 2), 11);
    const std::vector<double> lb = train_stage(b, sched, data, make_stage_config(1, 5, 1e-3, 2), 11);
    ASSERT_EQ(la.size(), lb.size());
    for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i], lb[i]);
    for (std::size_t i = 0; i < a.reg.params().size(); ++i) {
        const Tensor& ta = a.reg.params()[i].var->val;
        const Tensor& tb = b.reg.params()[i].var->val;
        for (std::int64_t k = 0; k < ta.numel(); ++k) EXPECT_EQ(ta[k], tb[k]);
    }

    VideoModel c(m, 7);
    const std::vector<double> lc = train_stage(c, sched, data, make_stage_config(1, 5, 1e-3, 2), 12);
    bool differs = false;
    for (std::size_t i = 0; i < la.size(); ++i) differs |= la[i] != lc[i];
    EXPECT_TRUE(differs);
}

TEST(TrainStage, ResumeFromCheckpointIsBitwiseEquivalent) {
    const ModelConfig m = micro();
    const NoiseSchedule sched = make_schedule(micro_diffusion());
    const std::vector<TrainClip> data = micro_data(m, 3, 5);
    const std::uint64_t seed = 21;

    // one continuous process: stages 1, 2, 3
    VideoModel full(m, 7);
    train_stage(full, sched, data, make_stage_config(1, 4, 1e-3, 2), seed);
    train_stage(full, sched, data, make_stage_config(2, 4, 1e-3, 2), seed);
    train_stage(full, sched, data, make_stage_config(3, 4, 1e-3, 2), seed);

    // interrupted after stage 2, checkpointed, resumed in a fresh model
    VideoModel part(m, 7);
    train_stage(part, sched, data, make_stage_config(1, 4, 1e-3, 2), seed);
    train_stage(part, sched, data, make_stage_config(2, 4, 1e-3, 2), seed);
    const auto path = std::filesystem::temp_directory_path() / "ska1_test_resume.ckpt";
    save_checkpoint(path, part.reg, CheckpointMeta{"h", 2, 4});
    VideoModel resumed(m, 99); // deliberately different init
    load_checkpoint(path, resumed.reg);
    train_stage(resumed, sched, data, make_stage_config(3, 4, 1e-3, 2), seed);

    for (std::size_t i = 0; i < full.reg.params().size(); ++i) {
        const Tensor& tf = full.reg.params()[i].var->val;
        const Tensor& tr = resumed.reg.params()[i].var->val;
        for (std::int64_t k = 0; k < tf.numel(); ++k)
            EXPECT_EQ(tf[k], tr[k]) << full.reg.params()[i].key();
    }
    std::filesystem::remove(path);
}

TEST(TrainStage, ConditionDropoutControlsGuiderUpdates) {
    const ModelConfig m = micro();
    const NoiseSchedule sched = make_schedule(micro_diffusion());
    const std::vector<TrainClip> data = micro_data(m, 3, 5);

    // dropout 1: every draw uses the unconditional branch; the guider can
    // never receive a gradient in stage 3
    VideoModel all_dropped(m, 7);
    TrainHyper hyper;
    hyper.cond_dropout = 1.0;
    const auto before = snapshot(all_dropped.reg);
    train_stage(all_dropped, sched, data, make_stage_config(3, 4, 1e-3, 2), 11, hyper);
    EXPECT_FALSE(changed_groups(all_dropped.reg, before).count("landmark_guider"));

    VideoModel none_dropped(m, 7);
    hyper.cond_dropout = 0.0;
    const auto before2 = snapshot(none_dropped.reg);
    train_stage(none_dropped, sched, data, make_stage_config(3, 4, 1e-3, 2), 11, hyper);
    EXPECT_TRUE(changed_groups(none_dropped.reg, before2).count("landmark_guider"));
}

TEST(TrainStage, NonFiniteLossRaises) {
    const ModelConfig m = micro();
    const NoiseSchedule sched = make_schedule(micro_diffusion());
    std::vector<TrainClip> data = micro_data(m, 1, 5);
    data[0].latent[0] = std::nan("");
    VideoModel model(m, 7);
    EXPECT_THROW(train_stage(model, sched, data, make_stage_config(1, 1, 1e-3, 1), 11),
                 NonFiniteLossError);
}

TEST(TrainStage, EmptyDataRejected) {
    VideoModel model(micro(), 7);
    const NoiseSchedule sched = make_schedule(micro_diffusion());
    EXPECT_THROW(train_stage(model, sched, {}, make_stage_config(1, 1, 1e-3, 1), 11), InputError);
}

// ---- train log ----

TEST(TrainLog_, HeaderOnceRowsAppend) {
    const auto path = std::filesystem::temp_directory_path() / "ska1_test_log.csv";
    std::filesystem::remove(path);
    {
        TrainLog log(path);
        log.row(1, 0, 0.5, 1e-4, 12.5);
    }
    {
        TrainLog log(path); // reopen: no second header
        log.row(1, 1, 0.25, 1e-4, 13.0);
    }
    std::ifstream in(path);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[0], "stage,step,loss,lr,wall_ms");
    EXPECT_TRUE(lines[1].rfind("1,0,0.5,0.0001,", 0) == 0);
    EXPECT_TRUE(lines[2].rfind("1,1,0.25,0.0001,", 0) == 0);
    std::filesystem::remove(path);
}

// ---- vae pretraining ----

TEST(VaePretrain, ImprovesReconstructionAndCalibratesScale) {
    const ModelConfig m = micro();
    VideoModel model(m, 7);
    Rng rng(31);
    std::vector<Tensor> videos;
    for (int i = 0; i < 3; ++i) {
        Tensor v({1, m.pixel_frames(), m.pixel_h(), m.pixel_w()});
        for (std::int64_t k = 0; k < v.numel(); ++k) v[k] = 0.5 + 0.3 * std::sin(0.1 * (k + i * 7.0));
        videos.push_back(std::move(v));
    }

    // reconstruction error of the untrained stub
    double before = 0.0;
    {
        ag::NoGradGuard ng;
        for (const Tensor& v : videos) {
            const Tensor rec = model.vae_decode(model.vae_encode(ag::constant(v)))->val;
            double acc = 0.0;
            for (std::int64_t k = 0; k < v.numel(); ++k) acc += (rec[k] - v[k]) * (rec[k] - v[k]);
            before += acc / static_cast<double>(v.numel());
        }
        before /= static_cast<double>(videos.size());
    }

    VaePretrainConfig cfg;
    cfg.steps = 60;
    cfg.learning_rate = 3e-3;
    const double after = vae_pretrain(model, videos, cfg, 13);
    EXPECT_LT(after, before);

    // latent statistics are normalized to roughly unit spread
    double acc = 0.0, acc2 = 0.0;
    std::int64_t n = 0;
    ag::NoGradGuard ng;
    for (const Tensor& v : videos) {
        const Tensor lat = model.vae_encode(ag::constant(v))->val;
        for (std::int64_t k = 0; k < lat.numel(); ++k) {
            acc += lat[k];
            acc2 += lat[k] * lat[k];
            ++n;
        }
    }
    const double mean = acc / static_cast<double>(n);
    const double stddev = std::sqrt(acc2 / static_cast<double>(n) - mean * mean);
    EXPECT_NEAR(stddev, 1.0, 0.2);
    EXPECT_NE(model.latent_scale(), 1.0);
}

TEST(VaePretrain, RejectsEmptyInput) {
    VideoModel model(micro(), 7);
    EXPECT_THROW(vae_pretrain(model, {}, VaePretrainConfig{}, 1), InputError);
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    return RUN_ALL_TESTS();
}

#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "ska1/checkpoint.hpp"
#include "ska1/core/errors.hpp"
#include "ska1/datapipe.hpp"
#include "ska1/evalsuite.hpp"
#include "ska1/flowmask.hpp"
#include "ska1/model/model.hpp"
#include "ska1/runconfig.hpp"
#include "ska1/training.hpp"

namespace ska1 {

class PhaseError : public Error {
public:
    std::string phase;
    PhaseError(const std::string& phase_name, const std::string& msg)
        : Error("phase " + phase_name + ": " + msg), phase(phase_name) {}
};

// Assembles the frozen-VAE training view of every kept clip: latents, the
// rasterized landmark video, motion weights pooled to latent resolution, and
// the stored reference embedding.
inline std::vector<TrainClip> prepare_train_clips(const VideoModel& model,
                                                  const std::vector<ClipManifest>& manifests,
                                                  const std::filesystem::path& data_root) {
    const ModelConfig& cfg = model.cfg;
    std::vector<TrainClip> out;
    for (const ClipManifest& m : manifests) {
        if (!m.verdict.kept()) continue;
        const LoadedClip clip = load_clip_frames(data_root / m.frames_path);
        if (static_cast<int>(clip.frames.size()) != cfg.pixel_frames() ||
            clip.frames[0].w != cfg.pixel_w() || clip.frames[0].h != cfg.pixel_h())
            throw InputError("clip " + m.clip_id + " does not match the model's pixel geometry");
        const LandmarkSequence lms = load_landmarks(data_root / m.landmarks_path);
        if (static_cast<int>(lms.frames.size()) != cfg.pixel_frames())
            throw InputError("clip " + m.clip_id + " landmark count mismatch");
        TrainClip tc;
        tc.clip_id = m.clip_id;
        tc.latent = model.encode_frames(clip.frames);
        tc.lm_video = video_to_tensor(rasterize_landmark_video(lms, cfg.pixel_w(), cfg.pixel_h()));
        tc.weights = latent_weight_masks(clip_weight_masks(clip.frames), cfg.temporal_stride(),
                                         cfg.latent_h, cfg.latent_w);
        if (m.identity_embedding_path.empty())
            throw InputError("clip " + m.clip_id + " has no identity embedding");
        tc.f_id = load_embedding(data_root / m.identity_embedding_path);
        tc.prompt = m.profile.empty() ? std::string("portrait") : m.profile;
        out.push_back(std::move(tc));
    }
    if (out.empty()) throw InputError("no kept clips to train on");
    return out;
}

// End-to-end run: synth -> filter -> vae_pretrain -> stage1..3 -> eval.
// Every phase is detected as done by the presence of its output, so reruns
// resume (or no-op) instead of recomputing.
class Pipeline {
public:
    Pipeline(const RunConfig& config, const std::filesystem::path& data_root) : cfg(config), root(data_root) {
        cfg.validate();
        if (cfg.synth.n_frames != cfg.model.pixel_frames() || cfg.synth.width != cfg.model.pixel_w() ||
            cfg.synth.height != cfg.model.pixel_h())
            throw ConfigError("synth geometry must match the model: " + std::to_string(cfg.model.pixel_frames()) +
                              " frames of " + std::to_string(cfg.model.pixel_w()) + "x" +
                              std::to_string(cfg.model.pixel_h()));
        ckpt_dir = sub(cfg.checkpoint_dir);
        report_dir = sub(cfg.report_dir);
        hash = config_hash_hex(cfg);
    }

    struct Phase {
        std::string name;
        std::filesystem::path marker; // phase is done when this exists
    };

    std::vector<Phase> phases() const {
        return {{"synth", root / "manifest_raw.jsonl"},
                {"filter", root / "manifest.jsonl"},
                {"vae_pretrain", ckpt_dir / "vae.ckpt"},
                {"stage1", ckpt_dir / "stage1.ckpt"},
                {"stage2", ckpt_dir / "stage2.ckpt"},
                {"stage3", ckpt_dir / "stage3.ckpt"},
                {"eval", report_dir / "report.json"}};
    }

    void print_plan(std::ostream& os) const {
        for (const Phase& p : phases())
            os << "phase " << p.name << ": " << (std::filesystem::exists(p.marker) ? "done" : "pending")
               << " (" << p.marker.string() << ")\n";
    }

    // Runs all pending phases in order. Returns the number executed.
    int run(std::ostream& log) {
        int executed = 0;
        for (const Phase& p : phases()) {
            if (std::filesystem::exists(p.marker)) {
                log << "phase " << p.name << ": done, skipping\n";
                continue;
            }
            log << "phase " << p.name << ": running\n";
            try {
                run_phase(p.name);
            } catch (const Error& e) {
                throw PhaseError(p.name, e.what());
            }
            ++executed;
        }
        return executed;
    }

    void run_phase(const std::string& name) {
        if (name == "synth") phase_synth();
        else if (name == "filter") phase_filter();
        else if (name == "vae_pretrain") phase_vae_pretrain();
        else if (name == "stage1") phase_stage(1);
        else if (name == "stage2") phase_stage(2);
        else if (name == "stage3") phase_stage(3);
        else if (name == "eval") phase_eval();
        else throw ConfigError("unknown phase: " + name);
    }

    const std::filesystem::path& data_root() const { return root; }
    std::filesystem::path checkpoint_path(const std::string& stem) const { return ckpt_dir / (stem + ".ckpt"); }
    std::filesystem::path report_path() const { return report_dir / "report.json"; }
    const std::string& config_hash() const { return hash; }

    // ---- phases ----

    void phase_synth() {
        std::filesystem::create_directories(root / "clips");
        std::vector<ClipManifest> manifests;
        for (int i = 0; i < cfg.synth.n_clips; ++i) {
            const std::string profile_name = cfg.synth.profiles[static_cast<std::size_t>(i) % cfg.synth.profiles.size()];
            const MotionProfile profile = motion_profile_from_name(profile_name);
            const std::uint64_t clip_seed =
                Rng(cfg.seed).derive("synth", static_cast<std::uint64_t>(i)).uniform_int(UINT64_MAX);
            const SynthClip clip = synth_clip(clip_seed, cfg.synth.n_frames, profile, cfg.synth.width,
                                              cfg.synth.height, cfg.synth.fps);
            char idbuf[64];
            std::snprintf(idbuf, sizeof idbuf, "clip_%03d_%s", i, profile_name.c_str());
            const std::string clip_id = idbuf;
            const std::filesystem::path dir = root / "clips" / clip_id;
            save_clip_frames(dir, clip.frames, cfg.synth.fps);
            save_landmarks(dir / "landmarks.json", clip.landmarks);
            ClipManifest m;
            m.clip_id = clip_id;
            m.frames_path = "clips/" + clip_id;
            m.landmarks_path = "clips/" + clip_id + "/landmarks.json";
            m.n_frames = static_cast<int>(clip.frames.size());
            m.fps = cfg.synth.fps;
            m.face_boxes = clip.face_boxes;
            m.verdict = Verdict::keep(); // provisional until the filter phase
            m.profile = profile_name;
            manifests.push_back(std::move(m));
        }
        save_manifests(root / "manifest_raw.jsonl", manifests);
    }

    void phase_filter() {
        std::vector<ClipManifest> manifests = load_manifests(root / "manifest_raw.jsonl");
        const VisionStub vision(cfg.model.d_id);
        for (ClipManifest& m : manifests) {
            m.verdict = filter_clip_files(m, root, cfg.thresholds);
            if (!m.verdict.kept()) continue;
            const LoadedClip clip = load_clip_frames(root / m.frames_path);
            const ReferencePick pick = pick_reference(m, clip.frames, vision, cfg.seed);
            m.reference_frame = pick.frame_index;
            m.identity_embedding_path = m.frames_path + "/identity.json";
            save_embedding(root / m.identity_embedding_path, pick.embedding);
        }
        save_manifests(root / "manifest.jsonl", manifests);
    }

    void phase_vae_pretrain() {
        std::filesystem::create_directories(ckpt_dir);
        VideoModel model = make_model();
        const std::vector<ClipManifest> manifests = load_manifests(root / "manifest.jsonl");
        std::vector<Tensor> videos;
        for (const ClipManifest& m : manifests) {
            if (!m.verdict.kept()) continue;
            videos.push_back(video_to_tensor(load_clip_frames(root / m.frames_path).frames));
        }
        if (videos.empty()) throw InputError("vae_pretrain: no kept clips");
        TrainLog log(root / "train_log.csv");
        const double recon = vae_pretrain(model, videos, cfg.vae_pretrain, cfg.seed, &log);
        {
            nlohmann::json j;
            j["recon_mse"] = recon;
            j["latent_scale"] = model.latent_scale();
            std::ofstream f(ckpt_dir / "vae_recon.json");
            f << j.dump(2) << "\n";
        }
        save_checkpoint(checkpoint_path("vae"), model.reg, CheckpointMeta{hash, 0, cfg.vae_pretrain.steps});
    }

    void phase_stage(int stage_id) {
        VideoModel model = make_model();
        const std::string prev = stage_id == 1 ? "vae" : "stage" + std::to_string(stage_id - 1);
        load_checkpoint(checkpoint_path(prev), model.reg, hash);
        const std::vector<ClipManifest> manifests = load_manifests(root / "manifest.jsonl");
        const std::vector<TrainClip> data = prepare_train_clips(model, manifests, root);
        const NoiseSchedule sched = make_schedule(cfg.diffusion);
        TrainLog log(root / "train_log.csv");
        const StageConfig& stage = cfg.stages.at(static_cast<std::size_t>(stage_id - 1));
        train_stage(model, sched, data, stage, cfg.seed, cfg.hyper, &log);
        save_checkpoint(checkpoint_path("stage" + std::to_string(stage_id)), model.reg,
                        CheckpointMeta{hash, stage_id, stage.steps});
    }

    void phase_eval() {
        std::filesystem::create_directories(report_dir);
        VideoModel model = make_model();
        load_checkpoint(checkpoint_path("stage3"), model.reg, hash);
        const std::vector<ClipManifest> manifests = load_manifests(root / "manifest.jsonl");
        const NoiseSchedule sched = make_schedule(cfg.diffusion);
        EvalOptions opt;
        opt.n_pairs = cfg.eval.n_pairs;
        opt.seed = cfg.seed;
        opt.sampler_steps = cfg.eval.sampler_steps;
        opt.cfg_scale = cfg.eval.cfg_scale;
        const MetricReport report = evaluate_run(model, sched, manifests, root, model.vision, opt);
        {
            std::ofstream f(report_dir / "report.json");
            if (!f) throw IoError("cannot write report");
            f << report.to_json().dump(2) << "\n";
        }
        {
            std::ofstream f(report_dir / "report.txt");
            f << report.to_table();
        }
    }

    VideoModel make_model() const {
        const std::uint64_t init_seed = Rng(cfg.seed).derive("model_init").uniform_int(UINT64_MAX);
        return VideoModel(cfg.model, init_seed);
    }

    RunConfig cfg;

private:
    std::filesystem::path sub(const std::string& p) const {
        const std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : root / fp;
    }

    std::filesystem::path root, ckpt_dir, report_dir;
    std::string hash;
};

} // namespace ska1

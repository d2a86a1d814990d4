// Desk-scale portrait animation tool: data synthesis/filtering, staged
// training, animation inference, flow-mask debugging, evaluation, and the
// end-to-end pipeline. One binary, subcommand style.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ska1/checkpoint.hpp"
#include "ska1/datapipe.hpp"
#include "ska1/diffusion.hpp"
#include "ska1/evalsuite.hpp"
#include "ska1/flowmask.hpp"
#include "ska1/landmarks.hpp"
#include "ska1/model/model.hpp"
#include "ska1/pipeline.hpp"
#include "ska1/runconfig.hpp"
#include "ska1/training.hpp"

namespace fs = std::filesystem;
using namespace ska1;

namespace {

struct CommandError {
    std::string phase;
    std::string message;
};

int fail(const std::string& command, const std::string& phase, const std::string& message) {
    nlohmann::json j;
    j["error"] = {{"command", command}, {"phase", phase}, {"message", message}};
    std::cout << j.dump() << "\n";
    std::cerr << "error [" << (phase.empty() ? command : phase) << "]: " << message << "\n";
    return 1;
}

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return load_run_config(path);
}

// shared flags: every subcommand takes --seed and is rerun-deterministic
struct Common {
    std::string config_path;
    std::string root_flag;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_config = true) {
    if (with_config) cmd->add_option("--config", c.config_path, "run config JSON");
    cmd->add_option("--root", c.root_flag, "data root (overrides config and SKA1_HOME)");
    cmd->add_option("--seed", c.seed, "seed override")->each([&c](const std::string&) { c.seed_set = true; });
}

RunConfig resolve(const Common& c, fs::path& root_out) {
    RunConfig cfg = load_config_or_default(c.config_path);
    if (c.seed_set) cfg.seed = c.seed;
    root_out = resolve_data_root(c.root_flag, cfg.data_root);
    return cfg;
}

Image weight_mask_to_image(const Tensor& w) {
    Image img(w.dim(0), w.dim(1));
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) img.at(y, x) = (w.at(y, x) - 1.0) * 2.0;
    img.quantize8();
    return img;
}

// ---- subcommand bodies (throw ska1::Error on failure) ----

void run_data_synth(const Common& c, int count, int frames, int width, int height, double fps,
                    const std::vector<std::string>& profiles) {
    fs::path root;
    RunConfig cfg = resolve(c, root);
    cfg.synth.n_clips = count;
    cfg.synth.n_frames = frames;
    cfg.synth.width = width;
    cfg.synth.height = height;
    cfg.synth.fps = fps;
    if (!profiles.empty()) cfg.synth.profiles = profiles;
    fs::create_directories(root / "clips");
    std::vector<ClipManifest> manifests;
    for (int i = 0; i < cfg.synth.n_clips; ++i) {
        const std::string profile_name = cfg.synth.profiles[static_cast<std::size_t>(i) % cfg.synth.profiles.size()];
        const std::uint64_t clip_seed =
            Rng(cfg.seed).derive("synth", static_cast<std::uint64_t>(i)).uniform_int(UINT64_MAX);
        const SynthClip clip = synth_clip(clip_seed, cfg.synth.n_frames, motion_profile_from_name(profile_name),
                                          cfg.synth.width, cfg.synth.height, cfg.synth.fps);
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "clip_%03d_%s", i, profile_name.c_str());
        const std::string clip_id = idbuf;
        save_clip_frames(root / "clips" / clip_id, clip.frames, cfg.synth.fps);
        save_landmarks(root / "clips" / clip_id / "landmarks.json", clip.landmarks);
        ClipManifest m;
        m.clip_id = clip_id;
        m.frames_path = "clips/" + clip_id;
        m.landmarks_path = "clips/" + clip_id + "/landmarks.json";
        m.n_frames = static_cast<int>(clip.frames.size());
        m.fps = cfg.synth.fps;
        m.face_boxes = clip.face_boxes;
        m.verdict = Verdict::keep();
        m.profile = profile_name;
        manifests.push_back(std::move(m));
    }
    save_manifests(root / "manifest_raw.jsonl", manifests);
    std::cout << "wrote " << manifests.size() << " clips under " << (root / "clips").string() << "\n";
}

void run_data_filter(const Common& c, const std::string& thresholds_path) {
    fs::path root;
    RunConfig cfg = resolve(c, root);
    if (!thresholds_path.empty()) {
        std::ifstream f(thresholds_path);
        if (!f) throw IoError("cannot read thresholds: " + thresholds_path);
        nlohmann::json j;
        f >> j;
        cfg.thresholds = thresholds_from_json(j);
    }
    std::vector<ClipManifest> manifests = load_manifests(root / "manifest_raw.jsonl");
    const VisionStub vision(cfg.model.d_id);
    int kept = 0;
    for (ClipManifest& m : manifests) {
        m.verdict = filter_clip_files(m, root, cfg.thresholds);
        if (!m.verdict.kept()) continue;
        const LoadedClip clip = load_clip_frames(root / m.frames_path);
        const ReferencePick pick = pick_reference(m, clip.frames, vision, cfg.seed);
        m.reference_frame = pick.frame_index;
        m.identity_embedding_path = m.frames_path + "/identity.json";
        save_embedding(root / m.identity_embedding_path, pick.embedding);
        ++kept;
    }
    save_manifests(root / "manifest.jsonl", manifests);
    std::cout << "kept " << kept << " of " << manifests.size() << " clips\n";
}

void run_data_croppad(const Common& c, int target_w, int target_h, const std::string& out_flag) {
    fs::path root;
    resolve(c, root);
    const fs::path out_root = out_flag.empty() ? root / "croppad" : fs::path(out_flag);
    const fs::path manifest_in =
        fs::exists(root / "manifest.jsonl") ? root / "manifest.jsonl" : root / "manifest_raw.jsonl";
    std::vector<ClipManifest> manifests = load_manifests(manifest_in);
    fs::create_directories(out_root / "clips");
    for (ClipManifest& m : manifests) {
        const LoadedClip clip = load_clip_frames(root / m.frames_path);
        const CropPadResult res = crop_pad_with_offsets(clip.frames, m.face_boxes, target_w, target_h);
        save_clip_frames(out_root / m.frames_path, res.frames, clip.fps);
        // landmarks are canonical-space, independent of the pixel window
        fs::copy_file(root / m.landmarks_path, out_root / m.landmarks_path,
                      fs::copy_options::overwrite_existing);
        for (std::size_t i = 0; i < m.face_boxes.size(); ++i) {
            const auto [ox, oy] = res.offsets.at(i);
            for (RectI& b : m.face_boxes[i])
                b = clamp_rect(RectI{b.x0 - ox, b.y0 - oy, b.x1 - ox, b.y1 - oy}, target_w, target_h);
        }
        if (!m.identity_embedding_path.empty() && fs::exists(root / m.identity_embedding_path))
            fs::copy_file(root / m.identity_embedding_path, out_root / m.identity_embedding_path,
                          fs::copy_options::overwrite_existing);
    }
    save_manifests(out_root / "manifest_raw.jsonl", manifests);
    std::cout << "wrote " << manifests.size() << " cropped clips to " << out_root.string() << "\n";
}

void run_train(const Common& c, const std::string& stage_sel, bool resume) {
    fs::path root;
    const RunConfig cfg = resolve(c, root);
    Pipeline pipe(cfg, root);
    std::vector<std::string> wanted;
    if (stage_sel == "all") wanted = {"vae_pretrain", "stage1", "stage2", "stage3"};
    else if (stage_sel == "1" || stage_sel == "2" || stage_sel == "3") wanted = {"stage" + stage_sel};
    else throw ConfigError("--stage must be 1, 2, 3, or all");

    for (const std::string& name : wanted) {
        fs::path marker;
        for (const auto& p : pipe.phases())
            if (p.name == name) marker = p.marker;
        if (resume && fs::exists(marker)) {
            std::cout << "phase " << name << ": done, skipping\n";
            continue;
        }
        std::cout << "phase " << name << ": running\n";
        try {
            pipe.run_phase(name);
        } catch (const Error& e) {
            throw PhaseError(name, e.what());
        }
    }
}

void run_animate(const Common& c, const std::string& ckpt, const std::string& ref_path,
                 const std::string& lm_path, const std::string& out_dir, int steps, double cfg_scale,
                 std::uint64_t sample_seed) {
    fs::path root;
    const RunConfig cfg = resolve(c, root);
    const ModelConfig& mc = cfg.model;

    VideoModel model(mc, Rng(cfg.seed).derive("model_init").uniform_int(UINT64_MAX));
    load_checkpoint(ckpt, model.reg, config_hash_hex(cfg));

    const Image ref = read_pgm(ref_path);
    const FaceCrop crop = face_extract(ref, std::nullopt);
    const Tensor f_id = model.vision.encode_arc(crop.crop);

    const LandmarkSequence driving = load_landmarks(lm_path);
    const int K = static_cast<int>(driving.frames.size());
    if (K != mc.latent_frames)
        throw InputError("driving sequence must have exactly " + std::to_string(mc.latent_frames) +
                         " frames (the model's latent window); got " + std::to_string(K));

    // each driving frame spans one latent step: repeat it across the VAE's
    // temporal stride so the output has K * stride frames
    std::vector<Image> lm_video;
    for (const LandmarkFrame& f : driving.frames) {
        const Image r = rasterize_landmarks(f, mc.pixel_w(), mc.pixel_h());
        for (int k = 0; k < mc.temporal_stride(); ++k) lm_video.push_back(r);
    }

    ag::NoGradGuard ng;
    const ag::Var lm_latent = model.guider_encode(ag::constant(video_to_tensor(lm_video)));
    const Conditioning cond = model.make_conditioning(lm_latent, f_id, "portrait");
    const Conditioning uncond = model.make_uncond_conditioning();
    auto cond_fn = [&](const Tensor& x, int t) { return model.eps_predict(ag::constant(x), cond, t)->val; };
    auto uncond_fn = [&](const Tensor& x, int t) { return model.eps_predict(ag::constant(x), uncond, t)->val; };

    const NoiseSchedule sched = make_schedule(cfg.diffusion);
    const int use_steps = steps > 0 ? steps : cfg.diffusion.sampler_steps;
    const double use_cfg = cfg_scale >= 0.0 ? cfg_scale : cfg.diffusion.cfg_scale;
    const Tensor latent = ddim_sample(cond_fn, uncond_fn, use_cfg, sched, use_steps,
                                      {mc.latent_frames, mc.latent_channels, mc.latent_h, mc.latent_w},
                                      sample_seed);
    const std::vector<Image> frames = model.decode_latent(latent);
    save_clip_frames(out_dir, frames, driving.fps);
    std::cout << "wrote " << frames.size() << " frames to " << out_dir << "\n";
}

void run_eval(const Common& c, const std::string& ckpt, const std::string& manifests_path, int pairs,
              const std::string& out_dir) {
    fs::path root;
    const RunConfig cfg = resolve(c, root);
    VideoModel model(cfg.model, Rng(cfg.seed).derive("model_init").uniform_int(UINT64_MAX));
    load_checkpoint(ckpt, model.reg, config_hash_hex(cfg));
    const fs::path mpath = manifests_path.empty() ? root / "manifest.jsonl" : fs::path(manifests_path);
    const std::vector<ClipManifest> manifests = load_manifests(mpath);
    const NoiseSchedule sched = make_schedule(cfg.diffusion);
    EvalOptions opt;
    opt.n_pairs = pairs > 0 ? pairs : cfg.eval.n_pairs;
    opt.seed = cfg.seed;
    opt.sampler_steps = cfg.eval.sampler_steps;
    opt.cfg_scale = cfg.eval.cfg_scale;
    const MetricReport report = evaluate_run(model, sched, manifests, root, model.vision, opt);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream jf(fs::path(out_dir) / "report.json");
        jf << report.to_json().dump(2) << "\n";
        std::ofstream tf(fs::path(out_dir) / "report.txt");
        tf << report.to_table();
    }
    std::cout << report.to_table();
}

void run_flowmask(const std::string& clip_dir, const std::string& out_dir) {
    const LoadedClip clip = load_clip_frames(clip_dir);
    fs::create_directories(out_dir);
    nlohmann::json entries = nlohmann::json::array();
    // frame 0 has no predecessor: all-ones weight by convention
    {
        Tensor ones = Tensor::full({clip.frames[0].h, clip.frames[0].w}, 1.0);
        write_pgm(fs::path(out_dir) / "weight_0000.pgm", weight_mask_to_image(ones));
        entries.push_back({{"frame", 0}, {"tau", 0.0}, {"s", 0}, {"f_fg", 0.0}, {"convention", "all-ones"}});
    }
    for (std::size_t i = 1; i < clip.frames.size(); ++i) {
        const FlowField flow = estimate_flow(clip.frames[i - 1], clip.frames[i]);
        const FlowThreshold th = flow_threshold(flow);
        const Tensor mask = binary_mask(th.magnitude, th.tau);
        const ForegroundMean fg = foreground_mean(th.magnitude, mask);
        const Tensor weight = normalized_mask(fg.masked_field * kFlowToIntensity);
        for (std::int64_t k = 0; k < weight.numel(); ++k)
            if (weight[k] < 1.0 || weight[k] > 1.5)
                throw InputError("flowmask: weight outside [1.0, 1.5] before write");
        char name[32];
        std::snprintf(name, sizeof name, "weight_%04zu.pgm", i);
        write_pgm(fs::path(out_dir) / name, weight_mask_to_image(weight));
        entries.push_back({{"frame", i}, {"tau", th.tau}, {"s", fg.s}, {"f_fg", fg.f_fg}});
    }
    nlohmann::json summary;
    summary["v"] = 1;
    summary["n_frames"] = clip.frames.size();
    summary["entries"] = std::move(entries);
    std::ofstream f(fs::path(out_dir) / "summary.json");
    if (!f) throw IoError("cannot write flowmask summary");
    f << summary.dump(2) << "\n";
    std::cout << "wrote " << clip.frames.size() << " weight masks to " << out_dir << "\n";
}

void run_pipeline(const Common& c, bool dry_run) {
    fs::path root;
    const RunConfig cfg = resolve(c, root);
    Pipeline pipe(cfg, root);
    if (dry_run) {
        pipe.print_plan(std::cout);
        return;
    }
    fs::create_directories(root);
    const int executed = pipe.run(std::cout);
    std::cout << "pipeline complete (" << executed << " phases executed)\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale expression-conditioned portrait animation"};
    app.require_subcommand(1);

    // data
    auto* data = app.add_subcommand("data", "dataset synthesis and curation");
    data->require_subcommand(1);

    Common synth_c;
    int synth_count = 6, synth_frames = 16, synth_w = 32, synth_h = 32;
    double synth_fps = 12.0;
    std::vector<std::string> synth_profiles;
    auto* synth = data->add_subcommand("synth", "generate synthetic clips");
    add_common(synth, synth_c);
    synth->add_option("--count", synth_count, "number of clips");
    synth->add_option("--frames", synth_frames, "frames per clip");
    synth->add_option("--width", synth_w, "frame width");
    synth->add_option("--height", synth_h, "frame height");
    synth->add_option("--fps", synth_fps, "frames per second");
    synth->add_option("--profiles", synth_profiles, "motion profiles to cycle");

    Common filter_c;
    std::string filter_thresholds;
    auto* filter = data->add_subcommand("filter", "filter clips and pick references");
    add_common(filter, filter_c);
    filter->add_option("--thresholds", filter_thresholds, "thresholds JSON file (overrides config)");

    Common croppad_c;
    int cp_w = 480, cp_h = 720;
    std::string cp_out;
    auto* croppad = data->add_subcommand("croppad", "crop/pad clips to fixed dimensions");
    croppad->set_help_flag("--help", "print help"); // frees --h for the height flag
    add_common(croppad, croppad_c);
    croppad->add_option("--w", cp_w, "target width");
    croppad->add_option("--h", cp_h, "target height");
    croppad->add_option("--out", cp_out, "output root (default <root>/croppad)");

    // train
    Common train_c;
    std::string train_stage = "all";
    bool train_resume = false;
    auto* train = app.add_subcommand("train", "staged training");
    add_common(train, train_c);
    train->add_option("--stage", train_stage, "1, 2, 3, or all");
    train->add_flag("--resume", train_resume, "skip stages whose checkpoints exist");

    // animate
    Common anim_c;
    std::string anim_ckpt, anim_ref, anim_lm, anim_out;
    int anim_steps = 0;
    double anim_cfg = -1.0;
    std::uint64_t anim_seed = 0;
    auto* animate = app.add_subcommand("animate", "drive a reference portrait with landmarks");
    add_common(animate, anim_c);
    animate->add_option("--ckpt", anim_ckpt, "model checkpoint")->required();
    animate->add_option("--ref", anim_ref, "reference portrait (PGM)")->required();
    animate->add_option("--landmarks", anim_lm, "driving landmark JSON")->required();
    animate->add_option("--out", anim_out, "output clip directory")->required();
    animate->add_option("--steps", anim_steps, "sampler steps (default from config)");
    animate->add_option("--cfg-scale", anim_cfg, "guidance scale (default from config)");
    animate->add_option("--sample-seed", anim_seed, "sampling noise seed");

    // eval
    Common eval_c;
    std::string eval_ckpt, eval_manifests, eval_out;
    int eval_pairs = 0;
    auto* eval_cmd = app.add_subcommand("eval", "cross-identity metric evaluation");
    add_common(eval_cmd, eval_c);
    eval_cmd->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
    eval_cmd->add_option("--manifests", eval_manifests, "manifest JSONL (default <root>/manifest.jsonl)");
    eval_cmd->add_option("--pairs", eval_pairs, "number of cross-identity pairs");
    eval_cmd->add_option("--out", eval_out, "report output directory");

    // flowmask
    Common flow_c;
    std::string flow_clip, flow_out;
    auto* flowmask_cmd = app.add_subcommand("flowmask", "write per-frame motion weight masks");
    add_common(flowmask_cmd, flow_c, /*with_config=*/false);
    flowmask_cmd->add_option("--clip", flow_clip, "clip directory")->required();
    flowmask_cmd->add_option("--out", flow_out, "output directory")->required();

    // pipeline
    Common pipe_c;
    bool pipe_dry = false;
    auto* pipeline_cmd = app.add_subcommand("pipeline", "run every phase end to end");
    add_common(pipeline_cmd, pipe_c);
    pipeline_cmd->add_flag("--dry-run", pipe_dry, "print the phase plan without side effects");

    CLI11_PARSE(app, argc, argv);

    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        if (synth->parsed()) run_data_synth(synth_c, synth_count, synth_frames, synth_w, synth_h, synth_fps, synth_profiles);
        else if (filter->parsed()) run_data_filter(filter_c, filter_thresholds);
        else if (croppad->parsed()) run_data_croppad(croppad_c, cp_w, cp_h, cp_out);
        else if (train->parsed()) run_train(train_c, train_stage, train_resume);
        else if (animate->parsed()) run_animate(anim_c, anim_ckpt, anim_ref, anim_lm, anim_out, anim_steps, anim_cfg, anim_seed);
        else if (eval_cmd->parsed()) run_eval(eval_c, eval_ckpt, eval_manifests, eval_pairs, eval_out);
        else if (flowmask_cmd->parsed()) run_flowmask(flow_clip, flow_out);
        else if (pipeline_cmd->parsed()) run_pipeline(pipe_c, pipe_dry);
    } catch (const PhaseError& e) {
        return fail(cmd, e.phase, e.what());
    } catch (const Error& e) {
        return fail(cmd, cmd, e.what());
    } catch (const std::exception& e) {
        return fail(cmd, cmd, e.what());
    }
    return 0;
}

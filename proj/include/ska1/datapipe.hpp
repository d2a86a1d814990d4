#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ska1/core/errors.hpp"
#include "ska1/core/image.hpp"
#include "ska1/core/rng.hpp"
#include "ska1/landmarks.hpp"
#include "ska1/model/stubs.hpp"

namespace ska1 {

// ---- synthetic clips ----

enum class MotionProfile { kStatic, kTalking, kTurning, kTwoFaces };

inline const char* motion_profile_name(MotionProfile p) {
    switch (p) {
        case MotionProfile::kStatic: return "static";
        case MotionProfile::kTalking: return "talking";
        case MotionProfile::kTurning: return "turning";
        case MotionProfile::kTwoFaces: return "two_faces";
    }
    return "?";
}

inline MotionProfile motion_profile_from_name(const std::string& s) {
    if (s == "static") return MotionProfile::kStatic;
    if (s == "talking") return MotionProfile::kTalking;
    if (s == "turning") return MotionProfile::kTurning;
    if (s == "two_faces") return MotionProfile::kTwoFaces;
    throw ConfigError("unknown motion profile: " + s);
}

// Renders one cartoon face: bright head ellipse, dark eye discs, dark mouth
// ellipse whose vertical extent tracks the landmark aperture. Feature centers
// ride the same rotated template points the landmarks use, so rendered frames
// and landmark sequences stay geometrically consistent.
inline void render_face(Image& img, const HeadPose& pose, double aperture, double center_dx = 0.0,
                        double face_scale = 1.0, const Projection& proj = {}) {
    const Rot3 R = euler_to_rot(pose);
    const double s = proj.scale(img.w, img.h) * face_scale;
    const double cx_px = img.w / 2.0 + center_dx * proj.scale(img.w, img.h);
    const double cy_px = img.h / 2.0;
    auto place = [&](const std::array<double, 3>& p) {
        const std::array<double, 3> q = rotate_point(R, p);
        return std::pair<double, double>{cx_px + q[0] * s, cy_px - q[1] * s};
    };
    // head (centered on the rotation origin, so it never translates)
    const double rx = s * 0.98 * std::max(0.55, std::cos(pose.pitch));
    const double ry = s * 1.22 * std::max(0.55, std::cos(pose.roll));
    fill_ellipse(img, cx_px, cy_px, rx, ry, 0.85);
    // eyes
    for (double ex : {-0.42, 0.42}) {
        auto [px, py] = place({ex, 0.28, 0.15});
        fill_ellipse(img, px, py, s * 0.11, s * 0.11, 0.15);
    }
    // mouth
    auto [mx, my] = place({0.0, -0.40 - aperture / 2.0, 0.22});
    fill_ellipse(img, mx, my, s * 0.26, s * (0.03 + aperture / 2.0), 0.15);
}

struct SynthClip {
    std::vector<Image> frames;
    LandmarkSequence landmarks;
    std::vector<std::vector<RectI>> face_boxes; // per frame, usually one box
};

// Scripted pose/aperture trajectories per profile, with small per-seed jitter
// on amplitudes and phases. Frames are quantized to the 8-bit grid at render
// time so saved and in-memory pixels agree exactly.
inline SynthClip synth_clip(std::uint64_t seed, int n_frames, MotionProfile profile, int width,
                            int height, double fps = 12.0) {
    if (n_frames < 1) throw InputError("synth_clip: n_frames must be >= 1");
    Rng rng = Rng(seed).derive("synth_clip");
    const double base_ap = 0.08 + 0.06 * rng.uniform();
    const double talk_amp = 0.10 + 0.04 * rng.uniform();
    const double head_amp = 0.20 + 0.10 * rng.uniform();
    const double phase = rng.uniform() * 6.283185307179586;
    const Projection proj;

    SynthClip clip;
    clip.landmarks.fps = fps;
    for (int i = 0; i < n_frames; ++i) {
        HeadPose pose;
        double aperture = base_ap;
        switch (profile) {
            case MotionProfile::kStatic:
                aperture = base_ap + 0.08;
                break;
            case MotionProfile::kTalking:
                // pitch-only head motion keeps landmark y intact, so the scripted
                // aperture std survives rotation exactly
                pose.pitch = 0.5 * head_amp * std::sin(6.283185307179586 * i / n_frames + phase);
                aperture = base_ap + 0.06 + talk_amp * std::sin(6.283185307179586 * 2.0 * i / n_frames);
                break;
            case MotionProfile::kTurning:
                pose.pitch = head_amp * std::sin(6.283185307179586 * i / n_frames + phase);
                pose.roll = 0.3 * head_amp * std::sin(6.283185307179586 * i / n_frames);
                aperture = base_ap;
                break;
            case MotionProfile::kTwoFaces:
                pose.pitch = 0.5 * head_amp * std::sin(6.283185307179586 * i / n_frames + phase);
                aperture = base_ap + 0.06;
                break;
        }

        Image img(height, width, 0.08);
        render_face(img, pose, aperture, 0.0, 1.0, proj);
        const double s = proj.scale(width, height);
        std::vector<RectI> boxes;
        {
            const double half = 1.25 * s;
            RectI b{static_cast<int>(std::floor(width / 2.0 - half)),
                    static_cast<int>(std::floor(height / 2.0 - half)),
                    static_cast<int>(std::ceil(width / 2.0 + half)),
                    static_cast<int>(std::ceil(height / 2.0 + half))};
            boxes.push_back(clamp_rect(b, width, height));
        }
        if (profile == MotionProfile::kTwoFaces) {
            const double dx = -0.95; // second, smaller face to the left
            render_face(img, HeadPose{}, base_ap, dx, 0.45, proj);
            const double half = 0.6 * s;
            RectI b{static_cast<int>(std::floor(width / 2.0 + dx * s - half)),
                    static_cast<int>(std::floor(height / 2.0 - half)),
                    static_cast<int>(std::ceil(width / 2.0 + dx * s + half)),
                    static_cast<int>(std::ceil(height / 2.0 + half))};
            boxes.push_back(clamp_rect(b, width, height));
        }
        img.quantize8();
        clip.frames.push_back(std::move(img));
        clip.face_boxes.push_back(std::move(boxes));

        LandmarkFrame lf = rotated(canonical_face_template(aperture), euler_to_rot(pose));
        lf.frame_index = i;
        clip.landmarks.frames.push_back(std::move(lf));
    }
    return clip;
}

inline std::vector<Image> rasterize_landmark_video(const LandmarkSequence& seq, int width, int height,
                                                   double radius = 1.0) {
    std::vector<Image> out;
    out.reserve(seq.frames.size());
    for (const auto& f : seq.frames) out.push_back(rasterize_landmarks(f, width, height, radius));
    return out;
}

// ---- clip storage ----
// One directory per clip: zero-padded PGM frames plus index.json; landmarks
// and the reference embedding sit alongside.

inline std::string frame_file_name(int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "frame_%04d.pgm", i);
    return buf;
}

inline void save_clip_frames(const std::filesystem::path& dir, const std::vector<Image>& frames, double fps) {
    if (frames.empty()) throw InputError("save_clip_frames: no frames");
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < frames.size(); ++i)
        write_pgm(dir / frame_file_name(static_cast<int>(i)), frames[i]);
    nlohmann::json j;
    j["v"] = 1;
    j["n"] = frames.size();
    j["w"] = frames[0].w;
    j["h"] = frames[0].h;
    j["fps"] = fps;
    std::ofstream f(dir / "index.json");
    if (!f) throw IoError("cannot write clip index in " + dir.string());
    f << j.dump(0) << "\n";
}

struct LoadedClip {
    std::vector<Image> frames;
    double fps = 12.0;
};

inline LoadedClip load_clip_frames(const std::filesystem::path& dir) {
    std::ifstream f(dir / "index.json");
    if (!f) throw IoError("cannot read clip index in " + dir.string());
    nlohmann::json j;
    f >> j;
    if (j.at("v").get<int>() != 1) throw IoError("unsupported clip index schema in " + dir.string());
    LoadedClip clip;
    clip.fps = j.at("fps").get<double>();
    const int n = j.at("n").get<int>();
    for (int i = 0; i < n; ++i) clip.frames.push_back(read_pgm(dir / frame_file_name(i)));
    return clip;
}

// ---- embeddings ----

inline void save_embedding(const std::filesystem::path& path, const Tensor& emb) {
    nlohmann::json j;
    j["v"] = 1;
    j["dim"] = emb.numel();
    std::vector<double> vals(emb.data(), emb.data() + emb.numel());
    j["values"] = vals;
    std::ofstream f(path);
    if (!f) throw IoError("cannot write embedding: " + path.string());
    f << j.dump(0) << "\n";
}

inline Tensor load_embedding(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read embedding: " + path.string());
    nlohmann::json j;
    f >> j;
    const auto vals = j.at("values").get<std::vector<double>>();
    if (static_cast<int>(vals.size()) != j.at("dim").get<int>())
        throw IoError("embedding dim mismatch in " + path.string());
    return Tensor({static_cast<int>(vals.size())}, vals);
}

// ---- manifests ----

struct Verdict {
    enum class Status { kKept, kDropped, kIoError };
    Status status = Status::kDropped;
    std::string reason; // empty when kept

    bool kept() const { return status == Status::kKept; }
    static Verdict keep() { return {Status::kKept, ""}; }
    static Verdict drop(std::string why) { return {Status::kDropped, std::move(why)}; }
    static Verdict io_error(std::string why) { return {Status::kIoError, std::move(why)}; }
};

inline const char* verdict_status_name(Verdict::Status s) {
    switch (s) {
        case Verdict::Status::kKept: return "kept";
        case Verdict::Status::kDropped: return "dropped";
        case Verdict::Status::kIoError: return "io_error";
    }
    return "?";
}

inline Verdict::Status verdict_status_from_name(const std::string& s) {
    if (s == "kept") return Verdict::Status::kKept;
    if (s == "dropped") return Verdict::Status::kDropped;
    if (s == "io_error") return Verdict::Status::kIoError;
    throw IoError("unknown verdict status: " + s);
}

struct ClipManifest {
    std::string clip_id;
    std::string frames_path;    // relative to the data root
    std::string landmarks_path; // "
    int n_frames = 0;
    double fps = 12.0;
    std::vector<std::vector<RectI>> face_boxes;
    Verdict verdict;
    int reference_frame = -1;
    std::string identity_embedding_path; // empty until pick_reference ran
    std::string profile;                 // provenance note for synthetic clips

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["v"] = 1;
        j["clip_id"] = clip_id;
        j["frames_path"] = frames_path;
        j["landmarks_path"] = landmarks_path;
        j["n_frames"] = n_frames;
        j["fps"] = fps;
        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& frame_boxes : face_boxes) {
            nlohmann::json fb = nlohmann::json::array();
            for (const auto& b : frame_boxes) fb.push_back({b.x0, b.y0, b.x1, b.y1});
            boxes.push_back(std::move(fb));
        }
        j["face_boxes"] = std::move(boxes);
        j["status"] = verdict_status_name(verdict.status);
        j["reason"] = verdict.reason;
        j["reference_frame"] = reference_frame;
        j["identity_embedding_path"] = identity_embedding_path;
        j["profile"] = profile;
        return j;
    }

    static ClipManifest from_json(const nlohmann::json& j) {
        if (j.at("v").get<int>() != 1) throw IoError("unsupported manifest schema");
        ClipManifest m;
        m.clip_id = j.at("clip_id").get<std::string>();
        m.frames_path = j.at("frames_path").get<std::string>();
        m.landmarks_path = j.at("landmarks_path").get<std::string>();
        m.n_frames = j.at("n_frames").get<int>();
        m.fps = j.at("fps").get<double>();
        for (const auto& fb : j.at("face_boxes")) {
            std::vector<RectI> frame_boxes;
            for (const auto& b : fb)
                frame_boxes.push_back(RectI{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()});
            m.face_boxes.push_back(std::move(frame_boxes));
        }
        m.verdict.status = verdict_status_from_name(j.at("status").get<std::string>());
        m.verdict.reason = j.at("reason").get<std::string>();
        m.reference_frame = j.at("reference_frame").get<int>();
        m.identity_embedding_path = j.at("identity_embedding_path").get<std::string>();
        m.profile = j.value("profile", "");
        return m;
    }
};

inline void save_manifests(const std::filesystem::path& path, const std::vector<ClipManifest>& manifests) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write manifest: " + path.string());
    for (const auto& m : manifests) f << m.to_json().dump() << "\n";
    if (!f) throw IoError("manifest write failed: " + path.string());
}

inline std::vector<ClipManifest> load_manifests(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read manifest: " + path.string());
    std::vector<ClipManifest> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(ClipManifest::from_json(nlohmann::json::parse(line)));
    }
    return out;
}

// ---- filtering ----

struct FilterThresholds {
    double min_head_angle_range = 0.1; // radians
    double min_mouth_variation = 0.02; // canonical units
    int max_faces = 1;
    int min_frames = 16;

    void validate() const {
        if (!(min_head_angle_range > 0.0) || !(min_mouth_variation > 0.0) || max_faces < 1 || min_frames < 1)
            throw ConfigError("filter thresholds must be positive");
    }
};

// Largest per-angle spread of recovered head poses across the sequence.
inline double head_angle_range(const LandmarkSequence& seq) {
    const LandmarkFrame tmpl = canonical_face_template(0.0);
    double lo[3] = {1e30, 1e30, 1e30}, hi[3] = {-1e30, -1e30, -1e30};
    for (const auto& f : seq.frames) {
        const HeadPose p = head_pose_from_landmarks(f, tmpl);
        const double a[3] = {p.yaw, p.pitch, p.roll};
        for (int i = 0; i < 3; ++i) {
            lo[i] = std::min(lo[i], a[i]);
            hi[i] = std::max(hi[i], a[i]);
        }
    }
    double range = 0.0;
    for (int i = 0; i < 3; ++i) range = std::max(range, hi[i] - lo[i]);
    return range;
}

// Keep clips with exactly one face throughout, enough frames, and significant
// motion in either the head or the mouth (both must be quiet to drop).
inline Verdict filter_clip(const ClipManifest& manifest, const LandmarkSequence& seq,
                           const FilterThresholds& th) {
    th.validate();
    for (const auto& frame_boxes : manifest.face_boxes)
        if (static_cast<int>(frame_boxes.size()) > th.max_faces) return Verdict::drop("multi-character");
    if (head_angle_range(seq) < th.min_head_angle_range && mouth_variation(seq) < th.min_mouth_variation)
        return Verdict::drop("insufficient motion");
    if (manifest.n_frames < th.min_frames) return Verdict::drop("too short");
    return Verdict::keep();
}

// Load-then-filter wrapper: unreadable inputs become an io_error verdict,
// which is distinct from a drop.
inline Verdict filter_clip_files(const ClipManifest& manifest, const std::filesystem::path& data_root,
                                 const FilterThresholds& th) {
    LandmarkSequence seq;
    try {
        seq = load_landmarks(data_root / manifest.landmarks_path);
    } catch (const Error& e) {
        return Verdict::io_error(e.what());
    }
    return filter_clip(manifest, seq, th);
}

// ---- crop / pad ----

struct CropPadResult {
    std::vector<Image> frames;
    std::vector<std::pair<int, int>> offsets; // per-frame (ox, oy) of the window origin in source coords
};

// Fixed-size window centered on the temporal union of the face boxes, clamped
// into the frame where it fits and edge-replicated where it does not. Output
// is exactly (target_w, target_h); no rescaling.
inline CropPadResult crop_pad_with_offsets(const std::vector<Image>& frames,
                                           const std::vector<std::vector<RectI>>& face_boxes, int target_w,
                                           int target_h) {
    if (frames.empty()) throw InputError("crop_pad: empty frame list");
    if (target_w <= 0 || target_h <= 0) throw InputError("crop_pad: non-positive target");
    double cx = frames[0].w / 2.0, cy = frames[0].h / 2.0;
    {
        int x0 = 1 << 30, y0 = 1 << 30, x1 = -(1 << 30), y1 = -(1 << 30);
        bool any = false;
        for (const auto& fb : face_boxes)
            for (const auto& b : fb) {
                x0 = std::min(x0, b.x0); y0 = std::min(y0, b.y0);
                x1 = std::max(x1, b.x1); y1 = std::max(y1, b.y1);
                any = true;
            }
        if (any) { cx = (x0 + x1) / 2.0; cy = (y0 + y1) / 2.0; }
    }
    CropPadResult out;
    out.frames.reserve(frames.size());
    for (const Image& src : frames) {
        int ox = static_cast<int>(std::lround(cx - target_w / 2.0));
        int oy = static_cast<int>(std::lround(cy - target_h / 2.0));
        if (src.w >= target_w) ox = std::clamp(ox, 0, src.w - target_w);
        else ox = (src.w - target_w) / 2;
        if (src.h >= target_h) oy = std::clamp(oy, 0, src.h - target_h);
        else oy = (src.h - target_h) / 2;
        Image dst(target_h, target_w);
        for (int y = 0; y < target_h; ++y) {
            const int sy = std::clamp(oy + y, 0, src.h - 1);
            for (int x = 0; x < target_w; ++x)
                dst.at(y, x) = src.at(sy, std::clamp(ox + x, 0, src.w - 1));
        }
        out.frames.push_back(std::move(dst));
        out.offsets.emplace_back(ox, oy);
    }
    return out;
}

inline std::vector<Image> crop_pad(const std::vector<Image>& frames,
                                   const std::vector<std::vector<RectI>>& face_boxes, int target_w,
                                   int target_h) {
    return crop_pad_with_offsets(frames, face_boxes, target_w, target_h).frames;
}

// ---- reference selection ----

struct ReferencePick {
    int frame_index = 0;
    Tensor embedding; // d_id arc-head embedding of the extracted face
};

// Seeded-uniform frame choice (stable per clip id), face crop via the known
// box for that frame, embedding from the frozen vision stub.
inline ReferencePick pick_reference(const ClipManifest& manifest, const std::vector<Image>& frames,
                                    const VisionStub& vision, std::uint64_t seed) {
    if (!manifest.verdict.kept()) throw InputError("pick_reference: clip was dropped");
    if (frames.empty()) throw InputError("pick_reference: no frames");
    Rng rng = Rng(seed).derive("pick_reference").derive(manifest.clip_id);
    const int idx = static_cast<int>(rng.uniform_int(frames.size()));
    std::optional<RectI> box;
    if (idx < static_cast<int>(manifest.face_boxes.size()) && !manifest.face_boxes[static_cast<std::size_t>(idx)].empty())
        box = manifest.face_boxes[static_cast<std::size_t>(idx)][0];
    const FaceCrop crop = face_extract(frames[static_cast<std::size_t>(idx)], box);
    return ReferencePick{idx, vision.encode_arc(crop.crop)};
}

} // namespace ska1

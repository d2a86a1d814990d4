#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ska1/core/errors.hpp"
#include "ska1/core/linalg.hpp"
#include "ska1/core/rng.hpp"
#include "ska1/core/tensor.hpp"
#include "ska1/datapipe.hpp"
#include "ska1/diffusion.hpp"
#include "ska1/landmarks.hpp"
#include "ska1/model/model.hpp"
#include "ska1/model/stubs.hpp"

namespace ska1 {

// ---- cosine similarity ----

inline double identity_similarity(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel() || a.numel() == 0)
        throw ShapeError("identity_similarity: dim mismatch " + a.shape_str() + " vs " + b.shape_str());
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < a.numel(); ++i) {
        dot += a.data()[i] * b.data()[i];
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    if (na <= 0.0 || nb <= 0.0) throw UndefinedSimilarityError("identity_similarity: zero-norm embedding");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---- Frechet distance between Gaussian fits ----

// ||mu1-mu2||^2 + tr(S1 + S2 - 2*sqrt(sqrt(S1) S2 sqrt(S1))); the sandwich form
// keeps every square root on a symmetric PSD matrix.
inline double frechet_distance(const Tensor& mu1, const Tensor& cov1, const Tensor& mu2, const Tensor& cov2,
                               double asym_tol = 1e-8) {
    if (mu1.rank() != 1 || mu2.rank() != 1 || mu1.dim(0) != mu2.dim(0))
        throw ShapeError("frechet_distance: mean dim mismatch");
    const int d = mu1.dim(0);
    for (const Tensor* c : {&cov1, &cov2}) {
        if (c->rank() != 2 || c->dim(0) != d || c->dim(1) != d)
            throw ShapeError("frechet_distance: covariance must be " + std::to_string(d) + "x" + std::to_string(d));
        double scale = 1.0;
        for (int i = 0; i < c->numel(); ++i) scale = std::max(scale, std::abs(c->data()[i]));
        if (max_asymmetry(*c) > asym_tol * scale)
            throw InputError("frechet_distance: covariance is not symmetric");
    }
    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = mu1.data()[i] - mu2.data()[i];
        mean_term += diff * diff;
    }
    const Tensor s1h = sqrt_psd(cov1);
    Tensor inner = matmul_plain(matmul_plain(s1h, cov2), s1h);
    // symmetrize away roundoff before the second root
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double m = 0.5 * (inner.at(i, j) + inner.at(j, i));
            inner.at(i, j) = m;
            inner.at(j, i) = m;
        }
    const Tensor cross = sqrt_psd(inner, 1e-6);
    double trace_term = 0.0;
    for (int i = 0; i < d; ++i) trace_term += cov1.at(i, i) + cov2.at(i, i) - 2.0 * cross.at(i, i);
    double out = mean_term + trace_term;
    if (out < 0.0 && out > -1e-9) out = 0.0; // numerical floor
    return out;
}

struct GaussianFit {
    Tensor mu;  // [d]
    Tensor cov; // [d,d], population covariance
};

inline GaussianFit fit_gaussian(const std::vector<Tensor>& samples) {
    if (samples.empty()) throw InputError("fit_gaussian: no samples");
    const int d = samples[0].numel();
    GaussianFit g{Tensor({d}), Tensor({d, d})};
    for (const Tensor& s : samples) {
        if (s.numel() != d) throw ShapeError("fit_gaussian: inconsistent sample dims");
        for (int i = 0; i < d; ++i) g.mu.data()[i] += s.data()[i];
    }
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    for (int i = 0; i < d; ++i) g.mu.data()[i] *= inv_n;
    for (const Tensor& s : samples)
        for (int i = 0; i < d; ++i) {
            const double di = s.data()[i] - g.mu.data()[i];
            for (int j = i; j < d; ++j) g.cov.at(i, j) += di * (s.data()[j] - g.mu.data()[j]);
        }
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            g.cov.at(i, j) *= inv_n;
            g.cov.at(j, i) = g.cov.at(i, j);
        }
    return g;
}

// ---- expression / pose distances ----

// Scalar expression parameters recovered from a landmark frame: mouth and eye
// apertures as mean 3-D gap distances, so they survive head rotation.
struct ExpressionParams {
    double mouth = 0.0;
    double eye = 0.0;
};

inline ExpressionParams expression_params(const LandmarkFrame& f, const MouthIndices& mouth = {},
                                          const EyelidPairs& eyes = {}) {
    auto gap = [&](int a, int b) {
        const auto& pa = f.points.at(static_cast<std::size_t>(a));
        const auto& pb = f.points.at(static_cast<std::size_t>(b));
        const double dx = pa[0] - pb[0], dy = pa[1] - pb[1], dz = pa[2] - pb[2];
        return std::sqrt(dx * dx + dy * dy + dz * dz);
    };
    ExpressionParams p;
    for (std::size_t i = 0; i < mouth.upper.size(); ++i) p.mouth += gap(mouth.upper[i], mouth.lower[i]);
    p.mouth /= static_cast<double>(mouth.upper.size());
    for (const auto& [top, bot] : eyes.pairs) p.eye += gap(top, bot);
    p.eye /= static_cast<double>(eyes.pairs.size());
    return p;
}

struct ExprPoseDistance {
    double expression_l1 = 0.0;
    double pose_l1 = 0.0;
};

inline ExprPoseDistance expression_pose_distance(const LandmarkSequence& driving,
                                                 const LandmarkSequence& generated) {
    driving.validate();
    generated.validate();
    if (driving.frames.size() != generated.frames.size())
        throw ShapeError("expression_pose_distance: frame count mismatch");
    const LandmarkFrame tmpl = canonical_face_template(0.0);
    ExprPoseDistance d;
    for (std::size_t i = 0; i < driving.frames.size(); ++i) {
        const ExpressionParams ea = expression_params(driving.frames[i]);
        const ExpressionParams eb = expression_params(generated.frames[i]);
        d.expression_l1 += 0.5 * (std::abs(ea.mouth - eb.mouth) + std::abs(ea.eye - eb.eye));
        const HeadPose pa = head_pose_from_landmarks(driving.frames[i], tmpl);
        const HeadPose pb = head_pose_from_landmarks(generated.frames[i], tmpl);
        d.pose_l1 += (std::abs(pa.yaw - pb.yaw) + std::abs(pa.pitch - pb.pitch) + std::abs(pa.roll - pb.roll)) / 3.0;
    }
    const double inv = 1.0 / static_cast<double>(driving.frames.size());
    d.expression_l1 *= inv;
    d.pose_l1 *= inv;
    return d;
}

// ---- pseudo landmarks from rendered frames ----

// Blob-based face reading tuned to the synthetic renderer: bright head
// ellipse, two dark eye discs above center, dark mouth below. Thresholds are
// relative to the frame's own range so decoded (softened) frames still parse.
struct FaceParams {
    HeadPose pose;
    double mouth_aperture = 0.0;
};

inline FaceParams extract_face_params(const Image& img) {
    double lo = 1e30, hi = -1e30;
    for (double v : img.pix) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi - lo > 0.05)) throw FaceNotFoundError("extract_face_params: flat image");
    const double bright_thr = lo + 0.55 * (hi - lo);
    int x0 = img.w, y0 = img.h, x1 = -1, y1 = -1;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            if (img.at(y, x) > bright_thr) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < x0) throw FaceNotFoundError("extract_face_params: no bright face region");
    const double cx = (x0 + x1) / 2.0, cy = (y0 + y1) / 2.0;
    const double rx = std::max(1.0, (x1 - x0) / 2.0), ry = std::max(1.0, (y1 - y0) / 2.0);
    const double s = ry / 1.22; // head ellipse vertical radius in renderer units

    const double dark_thr = lo + 0.30 * (hi - lo);
    struct Blob {
        double sx = 0.0, sy = 0.0;
        int n = 0;
        int ymin = 1 << 30, ymax = -1;
        void add(int x, int y) {
            sx += x;
            sy += y;
            ++n;
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    } eye_l, eye_r, mouth;
    for (int y = std::max(0, y0); y <= std::min(img.h - 1, y1); ++y)
        for (int x = std::max(0, x0); x <= std::min(img.w - 1, x1); ++x) {
            const double ex = (x - cx) / rx, ey = (y - cy) / ry;
            if (ex * ex + ey * ey > 0.92 * 0.92) continue; // outside the head
            if (img.at(y, x) >= dark_thr) continue;
            if (y < cy) (x < cx ? eye_l : eye_r).add(x, y);
            else mouth.add(x, y);
        }
    if (eye_l.n == 0 || eye_r.n == 0 || mouth.n == 0)
        throw FaceNotFoundError("extract_face_params: missing facial features");

    // canonical (y-up) feature coordinates relative to the head center
    auto canon = [&](double px, double py) {
        return std::pair<double, double>{(px - cx) / s, (cy - py) / s};
    };
    auto [elx, ely] = canon(eye_l.sx / eye_l.n, eye_l.sy / eye_l.n);
    auto [erx, ery] = canon(eye_r.sx / eye_r.n, eye_r.sy / eye_r.n);

    FaceParams out;
    // eye line angle is the in-plane rotation, independent of the other axes
    out.pose.yaw = std::atan2(ery - ely, erx - elx);
    const double cyaw = std::cos(out.pose.yaw), syaw = std::sin(out.pose.yaw);
    auto derot = [&](double x, double y) {
        return std::pair<double, double>{cyaw * x + syaw * y, -syaw * x + cyaw * y};
    };
    auto [lx, ly] = derot(elx, ely);
    auto [rxc, ryc] = derot(erx, ery);
    const double mid_x = 0.5 * (lx + rxc), mid_y = 0.5 * (ly + ryc);
    const double sep = rxc - lx;
    // roll: eye midpoint height 0.28*cos(roll) - 0.15*sin(roll)
    {
        const double R = std::sqrt(0.28 * 0.28 + 0.15 * 0.15);
        const double alpha = std::atan2(0.15, 0.28);
        const double ratio = std::clamp(mid_y / R, -1.0, 1.0);
        const double r1 = std::acos(ratio) - alpha, r2 = -std::acos(ratio) - alpha;
        out.pose.roll = std::abs(r1) <= std::abs(r2) ? r1 : r2;
    }
    // pitch: eye separation 0.84*cos(pitch), midpoint x-shift from eye depth
    {
        const double depth = 0.28 * std::sin(out.pose.roll) + 0.15 * std::cos(out.pose.roll);
        out.pose.pitch = std::atan2(mid_x / depth, sep / 0.84);
    }
    out.mouth_aperture = std::max(0.0, 2.0 * ((mouth.ymax - mouth.ymin + 1) / 2.0 / s - 0.03));
    return out;
}

inline LandmarkFrame pseudo_landmarks(const FaceParams& p, int frame_index = 0) {
    LandmarkFrame f = rotated(canonical_face_template(p.mouth_aperture), euler_to_rot(p.pose));
    f.frame_index = frame_index;
    return f;
}

inline LandmarkSequence pseudo_landmark_sequence(const std::vector<Image>& frames, double fps = 12.0) {
    LandmarkSequence seq;
    seq.fps = fps;
    for (std::size_t i = 0; i < frames.size(); ++i)
        seq.frames.push_back(pseudo_landmarks(extract_face_params(frames[i]), static_cast<int>(i)));
    return seq;
}

// ---- evaluation run ----

struct PairFailure {
    int pair_index = 0;
    std::string reference_clip;
    std::string driving_clip;
    std::string message;
};

struct MetricReport {
    double id_sim_arc = 0.0;
    double id_sim_cur = 0.0;
    double frechet = 0.0;
    double expression_l1 = 0.0;
    double pose_l1 = 0.0;
    int n_samples = 0; // pairs that completed
    std::vector<PairFailure> failures;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["v"] = 1;
        j["id_sim_arc"] = id_sim_arc;
        j["id_sim_cur"] = id_sim_cur;
        j["frechet"] = frechet;
        j["expression_l1"] = expression_l1;
        j["pose_l1"] = pose_l1;
        j["n_samples"] = n_samples;
        nlohmann::json fails = nlohmann::json::array();
        for (const auto& f : failures) {
            fails.push_back({{"pair", f.pair_index},
                             {"reference", f.reference_clip},
                             {"driving", f.driving_clip},
                             {"error", f.message}});
        }
        j["failures"] = std::move(fails);
        return j;
    }

    std::string to_table() const {
        char buf[512];
        std::string out;
        out += "metric            value      full-scale ref\n";
        out += "----------------  ---------  --------------\n";
        std::snprintf(buf, sizeof buf, "%-16s  %9.4f  %s\n", "id_sim_arc", id_sim_arc, "0.7196");
        out += buf;
        std::snprintf(buf, sizeof buf, "%-16s  %9.4f  %s\n", "id_sim_cur", id_sim_cur, "0.7314");
        out += buf;
        std::snprintf(buf, sizeof buf, "%-16s  %9.4f  %s\n", "frechet", frechet, "59.6884");
        out += buf;
        std::snprintf(buf, sizeof buf, "%-16s  %9.4f  %s\n", "expression_l1", expression_l1, "0.0363");
        out += buf;
        std::snprintf(buf, sizeof buf, "%-16s  %9.4f  %s\n", "pose_l1", pose_l1, "0.8245");
        out += buf;
        std::snprintf(buf, sizeof buf, "pairs evaluated: %d, failures: %d\n", n_samples,
                      static_cast<int>(failures.size()));
        out += buf;
        out += "reference column: values reported for the original full-scale system;\n";
        out += "desk-scale stub metrics are internally consistent, not comparable.\n";
        return out;
    }
};

struct EvalOptions {
    int n_pairs = 4;
    std::uint64_t seed = 0;
    int sampler_steps = 8;
    double cfg_scale = 3.0;
    std::string prompt = "portrait";
};

// Cross-identity protocol: each pair drives one kept clip's reference portrait
// with another kept clip's landmarks, samples with DDIM, then reads identity
// embeddings and pseudo landmarks back off the generated frames. Failed pairs
// are recorded and excluded from the averages.
inline MetricReport evaluate_run(VideoModel& model, const NoiseSchedule& sched,
                                 const std::vector<ClipManifest>& manifests,
                                 const std::filesystem::path& data_root, const VisionStub& vision,
                                 const EvalOptions& opt) {
    std::vector<const ClipManifest*> kept;
    for (const auto& m : manifests)
        if (m.verdict.kept()) kept.push_back(&m);
    if (kept.size() < 2) throw InputError("evaluate_run: need at least two kept clips");
    if (opt.n_pairs < 1) throw InputError("evaluate_run: n_pairs must be >= 1");

    const auto& cfg = model.cfg;
    const int n_px = cfg.pixel_frames();
    MetricReport report;
    double sum_arc = 0.0, sum_cur = 0.0, sum_expr = 0.0, sum_pose = 0.0;
    std::vector<Tensor> drive_feats, gen_feats;

    for (int p = 0; p < opt.n_pairs; ++p) {
        Rng pair_rng = Rng(opt.seed).derive("eval_pair", static_cast<std::uint64_t>(p));
        const std::size_t ref_i = pair_rng.uniform_int(kept.size());
        std::size_t drv_i = pair_rng.uniform_int(kept.size() - 1);
        if (drv_i >= ref_i) ++drv_i;
        const ClipManifest& ref_m = *kept[ref_i];
        const ClipManifest& drv_m = *kept[drv_i];
        try {
            const LoadedClip ref_clip = load_clip_frames(data_root / ref_m.frames_path);
            const LoadedClip drv_clip = load_clip_frames(data_root / drv_m.frames_path);
            LandmarkSequence drv_lms = load_landmarks(data_root / drv_m.landmarks_path);
            if (static_cast<int>(drv_clip.frames.size()) < n_px ||
                static_cast<int>(drv_lms.frames.size()) < n_px)
                throw InputError("driving clip shorter than the model's frame window");

            const int ref_frame = ref_m.reference_frame >= 0 ? ref_m.reference_frame : 0;
            std::optional<RectI> ref_box;
            if (ref_frame < static_cast<int>(ref_m.face_boxes.size()) &&
                !ref_m.face_boxes[static_cast<std::size_t>(ref_frame)].empty())
                ref_box = ref_m.face_boxes[static_cast<std::size_t>(ref_frame)][0];
            const FaceCrop ref_crop = face_extract(ref_clip.frames.at(static_cast<std::size_t>(ref_frame)), ref_box);
            const Tensor ref_arc = vision.encode_arc(ref_crop.crop);
            const Tensor ref_cur = vision.encode_cur(ref_crop.crop);

            std::vector<Image> drive_frames(drv_clip.frames.begin(), drv_clip.frames.begin() + n_px);
            LandmarkSequence drv_window;
            drv_window.fps = drv_lms.fps;
            drv_window.frames.assign(drv_lms.frames.begin(), drv_lms.frames.begin() + n_px);

            ag::NoGradGuard ng;
            const std::vector<Image> lm_video =
                rasterize_landmark_video(drv_window, cfg.pixel_w(), cfg.pixel_h());
            const ag::Var lm_latent = model.guider_encode(ag::constant(video_to_tensor(lm_video)));
            const Conditioning cond = model.make_conditioning(lm_latent, ref_arc, opt.prompt);
            const Conditioning uncond = model.make_uncond_conditioning();

            auto cond_fn = [&](const Tensor& x, int t) { return model.eps_predict(ag::constant(x), cond, t)->val; };
            auto uncond_fn = [&](const Tensor& x, int t) { return model.eps_predict(ag::constant(x), uncond, t)->val; };
            const std::uint64_t pair_seed =
                Rng(opt.seed).derive("eval_ddim", static_cast<std::uint64_t>(p)).uniform_int(UINT64_MAX);
            const Tensor latent = ddim_sample(cond_fn, uncond_fn, opt.cfg_scale, sched, opt.sampler_steps,
                                              {cfg.latent_frames, cfg.latent_channels, cfg.latent_h, cfg.latent_w},
                                              pair_seed);
            const std::vector<Image> generated = model.decode_latent(latent);

            double arc = 0.0, cur = 0.0;
            std::vector<Tensor> pair_drive_feats, pair_gen_feats;
            for (const Image& frame : generated) {
                const FaceCrop crop = face_extract(frame, std::nullopt);
                const Tensor fa = vision.encode_arc(crop.crop);
                arc += identity_similarity(ref_arc, fa);
                cur += identity_similarity(ref_cur, vision.encode_cur(crop.crop));
                pair_gen_feats.push_back(fa);
            }
            arc /= static_cast<double>(generated.size());
            cur /= static_cast<double>(generated.size());
            for (const Image& frame : drive_frames) {
                const FaceCrop crop = face_extract(frame, std::nullopt);
                pair_drive_feats.push_back(vision.encode_arc(crop.crop));
            }
            const LandmarkSequence drv_pseudo = pseudo_landmark_sequence(drive_frames, drv_clip.fps);
            const LandmarkSequence gen_pseudo = pseudo_landmark_sequence(generated, drv_clip.fps);
            const ExprPoseDistance epd = expression_pose_distance(drv_pseudo, gen_pseudo);

            sum_arc += arc;
            sum_cur += cur;
            sum_expr += epd.expression_l1;
            sum_pose += epd.pose_l1;
            for (auto& t : pair_drive_feats) drive_feats.push_back(std::move(t));
            for (auto& t : pair_gen_feats) gen_feats.push_back(std::move(t));
            ++report.n_samples;
        } catch (const Error& e) {
            report.failures.push_back(PairFailure{p, ref_m.clip_id, drv_m.clip_id, e.what()});
        }
    }

    if (report.n_samples > 0) {
        const double inv = 1.0 / report.n_samples;
        report.id_sim_arc = sum_arc * inv;
        report.id_sim_cur = sum_cur * inv;
        report.expression_l1 = sum_expr * inv;
        report.pose_l1 = sum_pose * inv;
        const GaussianFit gd = fit_gaussian(drive_feats);
        const GaussianFit gg = fit_gaussian(gen_feats);
        report.frechet = frechet_distance(gd.mu, gd.cov, gg.mu, gg.cov);
    }
    return report;
}

} // namespace ska1

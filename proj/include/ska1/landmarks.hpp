#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "json.hpp"

#include "ska1/core/errors.hpp"
#include "ska1/core/image.hpp"
#include "ska1/core/linalg.hpp"

namespace ska1 {

// 3D facial keypoints in canonical face units: origin at face center, x right,
// y up, z toward the camera. K = 68 with the usual iBUG-style layout
// (jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, outer lips 48-59,
// inner lips 60-67).

struct LandmarkFrame {
    std::vector<std::array<double, 3>> points;
    int frame_index = 0;
};

struct LandmarkSequence {
    std::vector<LandmarkFrame> frames;
    double fps = 12.0;

    int k() const { return frames.empty() ? 0 : static_cast<int>(frames[0].points.size()); }

    void validate() const {
        if (frames.empty()) throw InputError("landmark sequence is empty");
        const std::size_t K = frames[0].points.size();
        int prev_idx = frames[0].frame_index - 1;
        for (const auto& f : frames) {
            if (f.points.size() != K) throw InputError("landmark frame K varies within sequence");
            if (f.frame_index <= prev_idx) throw InputError("landmark frame_index not increasing");
            prev_idx = f.frame_index;
            for (const auto& p : f.points)
                for (double c : p)
                    if (!std::isfinite(c)) throw InputError("non-finite landmark coordinate");
        }
        if (!(fps > 0.0)) throw InputError("fps must be positive");
    }
};

// Euler angles, radians. Convention (used everywhere in this codebase):
// intrinsic yaw-pitch-roll, R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct HeadPose {
    double yaw = 0.0, pitch = 0.0, roll = 0.0;
};

using Rot3 = std::array<std::array<double, 3>, 3>;

inline Rot3 euler_to_rot(const HeadPose& p) {
    const double cy = std::cos(p.yaw), sy = std::sin(p.yaw);
    const double cp = std::cos(p.pitch), sp = std::sin(p.pitch);
    const double cr = std::cos(p.roll), sr = std::sin(p.roll);
    return Rot3{{{cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr},
                 {sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr},
                 {-sp, cp * sr, cp * cr}}};
}

inline HeadPose rot_to_euler(const Rot3& r) {
    HeadPose p;
    const double s = -r[2][0];
    if (s >= 1.0 - 1e-12 || s <= -1.0 + 1e-12) {
        // gimbal lock: pitch at +-pi/2, yaw/roll split is arbitrary; put it all in yaw
        p.pitch = (s > 0) ? 1.5707963267948966 : -1.5707963267948966;
        p.roll = 0.0;
        p.yaw = std::atan2(-r[0][1], r[1][1]);
    } else {
        p.pitch = std::asin(s);
        p.yaw = std::atan2(r[1][0], r[0][0]);
        p.roll = std::atan2(r[2][1], r[2][2]);
    }
    return p;
}

inline std::array<double, 3> rotate_point(const Rot3& r, const std::array<double, 3>& p) {
    return {r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]};
}

inline LandmarkFrame rotated(const LandmarkFrame& f, const Rot3& r) {
    LandmarkFrame out = f;
    for (auto& p : out.points) p = rotate_point(r, p);
    return out;
}

inline LandmarkFrame translated(const LandmarkFrame& f, double dx, double dy, double dz) {
    LandmarkFrame out = f;
    for (auto& p : out.points) { p[0] += dx; p[1] += dy; p[2] += dz; }
    return out;
}

// Landmark index bookkeeping for the 68-point layout. Inner-lip pairs are
// (61,67), (62,66), (63,65); corner points 60/64 are excluded from aperture.
struct MouthIndices {
    std::array<int, 3> upper{61, 62, 63};
    std::array<int, 3> lower{67, 66, 65};
};

struct EyelidPairs {
    // (upper, lower) per pair, left eye then right eye
    std::array<std::array<int, 2>, 4> pairs{{{37, 41}, {38, 40}, {43, 47}, {44, 46}}};
};

// Neutral 68-point face with a parametric mouth opening `aperture` (canonical
// units): the inner-lip vertical gap equals `aperture` exactly.
inline LandmarkFrame canonical_face_template(double aperture = 0.0) {
    LandmarkFrame f;
    f.points.resize(68);
    auto set = [&](int i, double x, double y, double z) { f.points[static_cast<std::size_t>(i)] = {x, y, z}; };
    const double a = aperture;
    // jaw 0-16
    for (int i = 0; i <= 16; ++i) {
        const double t = 3.14159265358979323846 * i / 16.0;
        set(i, -0.85 * std::cos(t), 0.10 - 1.05 * std::sin(t), 0.0);
    }
    // brows 17-26
    for (int i = 0; i < 5; ++i) {
        const double x = 0.55 - 0.10 * i; // 0.55 .. 0.15
        set(17 + i, -x, 0.45 + 0.02 * std::min(i, 4 - i), 0.15);
        set(26 - i, x, 0.45 + 0.02 * std::min(i, 4 - i), 0.15);
    }
    // nose bridge 27-30, base 31-35
    for (int i = 0; i < 4; ++i) set(27 + i, 0.0, 0.25 - 0.10 * i, 0.25 + 0.0333333333333333 * i);
    for (int i = 0; i < 5; ++i) set(31 + i, -0.12 + 0.06 * i, -0.12, 0.25);
    // eyes 36-41 (left), 42-47 (right); eyelid gap 0.10
    set(36, -0.54, 0.28, 0.15); set(37, -0.47, 0.33, 0.15); set(38, -0.37, 0.33, 0.15);
    set(39, -0.30, 0.28, 0.15); set(40, -0.37, 0.23, 0.15); set(41, -0.47, 0.23, 0.15);
    set(42, 0.30, 0.28, 0.15); set(43, 0.37, 0.33, 0.15); set(44, 0.47, 0.33, 0.15);
    set(45, 0.54, 0.28, 0.15); set(46, 0.47, 0.23, 0.15); set(47, 0.37, 0.23, 0.15);
    // outer lips 48-59
    set(48, -0.30, -0.40 - a / 2, 0.22); set(49, -0.18, -0.33, 0.22); set(50, -0.07, -0.31, 0.22);
    set(51, 0.0, -0.32, 0.22); set(52, 0.07, -0.31, 0.22); set(53, 0.18, -0.33, 0.22);
    set(54, 0.30, -0.40 - a / 2, 0.22); set(55, 0.18, -0.47 - a, 0.22); set(56, 0.07, -0.49 - a, 0.22);
    set(57, 0.0, -0.50 - a, 0.22); set(58, -0.07, -0.49 - a, 0.22); set(59, -0.18, -0.47 - a, 0.22);
    // inner lips 60-67; pairs (61,67),(62,66),(63,65) open by exactly `a`
    set(60, -0.24, -0.40 - a / 2, 0.22); set(61, -0.10, -0.40, 0.22); set(62, 0.0, -0.40, 0.22);
    set(63, 0.10, -0.40, 0.22); set(64, 0.24, -0.40 - a / 2, 0.22); set(65, 0.10, -0.40 - a, 0.22);
    set(66, 0.0, -0.40 - a, 0.22); set(67, -0.10, -0.40 - a, 0.22);
    return f;
}

// Rigid alignment of `tmpl` onto `frame` (rotation after centroid removal),
// solved in closed form with the quaternion eigenvector method, then converted
// to Euler angles. Least-squares optimal, deterministic.
inline HeadPose head_pose_from_landmarks(const LandmarkFrame& frame, const LandmarkFrame& tmpl) {
    const std::size_t K = tmpl.points.size();
    if (frame.points.size() != K) throw ShapeError("head_pose: frame/template K mismatch");
    if (K < 3) throw DegenerateGeometryError("head_pose: need at least 3 points");

    std::array<double, 3> ca{0, 0, 0}, cb{0, 0, 0};
    for (std::size_t i = 0; i < K; ++i)
        for (int d = 0; d < 3; ++d) {
            ca[static_cast<std::size_t>(d)] += tmpl.points[i][static_cast<std::size_t>(d)];
            cb[static_cast<std::size_t>(d)] += frame.points[i][static_cast<std::size_t>(d)];
        }
    for (int d = 0; d < 3; ++d) { ca[static_cast<std::size_t>(d)] /= K; cb[static_cast<std::size_t>(d)] /= K; }

    // cross-covariance of centered sets, plus template scatter for the rank check
    double S[3][3] = {};
    double scat[3][3] = {};
    for (std::size_t i = 0; i < K; ++i) {
        double a[3], b[3];
        for (int d = 0; d < 3; ++d) {
            a[d] = tmpl.points[i][static_cast<std::size_t>(d)] - ca[static_cast<std::size_t>(d)];
            b[d] = frame.points[i][static_cast<std::size_t>(d)] - cb[static_cast<std::size_t>(d)];
        }
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
                S[r][c] += a[r] * b[c];
                scat[r][c] += a[r] * a[c];
            }
    }
    {
        Tensor sc({3, 3});
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) sc.at(r, c) = scat[r][c];
        const EigenSym es = eigen_sym(sc);
        // need at least two independent directions for a well-posed rotation
        const double lmax = std::max(es.values[2], 1.0);
        if (es.values[1] <= 1e-12 * lmax)
            throw DegenerateGeometryError("head_pose: point set is (near-)collinear");
    }

    // 4x4 quaternion form of the alignment problem; top eigenvector = rotation
    Tensor N({4, 4});
    N.at(0, 0) = S[0][0] + S[1][1] + S[2][2];
    N.at(0, 1) = S[1][2] - S[2][1];
    N.at(0, 2) = S[2][0] - S[0][2];
    N.at(0, 3) = S[0][1] - S[1][0];
    N.at(1, 1) = S[0][0] - S[1][1] - S[2][2];
    N.at(1, 2) = S[0][1] + S[1][0];
    N.at(1, 3) = S[2][0] + S[0][2];
    N.at(2, 2) = -S[0][0] + S[1][1] - S[2][2];
    N.at(2, 3) = S[1][2] + S[2][1];
    N.at(3, 3) = -S[0][0] - S[1][1] + S[2][2];
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < r; ++c) N.at(r, c) = N.at(c, r);

    const EigenSym eq = eigen_sym(N);
    const double w = eq.vectors.at(0, 3), x = eq.vectors.at(1, 3), y = eq.vectors.at(2, 3), z = eq.vectors.at(3, 3);
    Rot3 R{{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
            {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
            {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
    return rot_to_euler(R);
}

// Population std-dev across frames of the mean vertical inner-lip gap
// (upper y minus lower y; positive when the mouth is open).
inline double mouth_variation(const LandmarkSequence& seq, const MouthIndices& mouth = {}) {
    seq.validate();
    const int K = seq.k();
    for (int i : mouth.upper)
        if (i < 0 || i >= K) throw InputError("mouth index out of range");
    for (int i : mouth.lower)
        if (i < 0 || i >= K) throw InputError("mouth index out of range");
    if (seq.frames.size() < 2) return 0.0;

    std::vector<double> aperture;
    aperture.reserve(seq.frames.size());
    for (const auto& f : seq.frames) {
        double acc = 0.0;
        for (std::size_t j = 0; j < mouth.upper.size(); ++j)
            acc += f.points[static_cast<std::size_t>(mouth.upper[j])][1] -
                   f.points[static_cast<std::size_t>(mouth.lower[j])][1];
        aperture.push_back(acc / static_cast<double>(mouth.upper.size()));
    }
    double mean = 0.0;
    for (double v : aperture) mean += v;
    mean /= static_cast<double>(aperture.size());
    double var = 0.0;
    for (double v : aperture) var += (v - mean) * (v - mean);
    var /= static_cast<double>(aperture.size());
    return std::sqrt(var);
}

// Canonical-units -> pixel mapping shared by the rasterizer, the synthetic
// renderer, and the landmark re-extraction in the metric suite.
struct Projection {
    double scale_factor = 0.38; // face scale as a fraction of min(w,h)

    double scale(int w, int h) const { return scale_factor * std::min(w, h); }
    double px(double x, int w, int h) const { return w / 2.0 + x * scale(w, h); }
    double py(double y, int w, int h) const { return h / 2.0 - y * scale(w, h); }
    double inv_x(double px_, int w, int h) const { return (px_ - w / 2.0) / scale(w, h); }
    double inv_y(double py_, int w, int h) const { return (h / 2.0 - py_) / scale(w, h); }
};

// Orthographic projection of the x,y coordinates; each landmark becomes a hard
// filled disc (radius 0 = its single rounded pixel). Out-of-bounds landmarks
// are clipped silently.
inline Image rasterize_landmarks(const LandmarkFrame& frame, int width, int height,
                                 double radius = 1.0, const Projection& proj = {}) {
    if (width <= 0 || height <= 0) throw InputError("rasterize_landmarks: non-positive size");
    Image img(height, width, 0.0);
    for (const auto& p : frame.points) {
        const double cx = proj.px(p[0], width, height);
        const double cy = proj.py(p[1], width, height);
        if (radius <= 0.0) {
            const int ix = static_cast<int>(std::lround(cx));
            const int iy = static_cast<int>(std::lround(cy));
            if (ix >= 0 && ix < width && iy >= 0 && iy < height) img.at(iy, ix) = 1.0;
        } else {
            const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
            const int y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + radius)));
            const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
            const int x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + radius)));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double dx = x - cx, dy = y - cy;
                    if (dx * dx + dy * dy <= radius * radius) img.at(y, x) = 1.0;
                }
        }
    }
    return img;
}

// ---- sequence file I/O ----
// One JSON document per clip: {"v":1, "fps": r, "k": K, "frames": [[[x,y,z] x K], ...]}

inline void save_landmarks(const std::filesystem::path& path, const LandmarkSequence& seq) {
    seq.validate();
    nlohmann::json j;
    j["v"] = 1;
    j["fps"] = seq.fps;
    j["k"] = seq.k();
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : seq.frames) {
        nlohmann::json pts = nlohmann::json::array();
        for (const auto& p : f.points) pts.push_back({p[0], p[1], p[2]});
        frames.push_back(std::move(pts));
    }
    j["frames"] = std::move(frames);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write landmarks: " + path.string());
    out << j.dump(0) << "\n";
    if (!out) throw IoError("write failed: " + path.string());
}

inline LandmarkSequence load_landmarks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read landmarks: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad landmark JSON in " + path.string() + ": " + e.what());
    }
    if (!j.contains("v") || j["v"].get<int>() != 1) throw IoError("unsupported landmark schema: " + path.string());
    LandmarkSequence seq;
    seq.fps = j.at("fps").get<double>();
    const int K = j.at("k").get<int>();
    int idx = 0;
    for (const auto& jframe : j.at("frames")) {
        LandmarkFrame f;
        f.frame_index = idx++;
        for (const auto& jp : jframe) {
            if (jp.size() != 3) throw IoError("landmark point arity != 3 in " + path.string());
            f.points.push_back({jp[0].get<double>(), jp[1].get<double>(), jp[2].get<double>()});
        }
        if (static_cast<int>(f.points.size()) != K) throw IoError("frame K mismatch in " + path.string());
        seq.frames.push_back(std::move(f));
    }
    seq.validate();
    return seq;
}

} // namespace ska1

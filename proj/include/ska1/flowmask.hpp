#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "ska1/core/errors.hpp"
#include "ska1/core/image.hpp"
#include "ska1/core/tensor.hpp"

namespace ska1 {

static_assert(std::endian::native == std::endian::little, "flow file I/O assumes a little-endian host");

struct FlowField {
    Tensor u, v; // H x W pixel displacements, a -> b

    int h() const { return u.dim(0); }
    int w() const { return u.dim(1); }

    void validate() const {
        if (u.rank() != 2 || v.rank() != 2) throw ShapeError("flow field must be rank 2");
        require_same_shape(u, v, "flow u/v");
        if (!u.all_finite() || !v.all_finite()) throw InputError("non-finite flow values");
    }
};

namespace detail {

inline Image downsample2(const Image& src) {
    const int oh = src.h / 2, ow = src.w / 2;
    Image out(oh, ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            out.at(y, x) = 0.25 * (src.at(2 * y, 2 * x) + src.at(2 * y, 2 * x + 1) +
                                   src.at(2 * y + 1, 2 * x) + src.at(2 * y + 1, 2 * x + 1));
    return out;
}

// SSD between an 8x8 block of `a` at (bx,by) and the same block displaced by
// (dx,dy) in `b`, averaged over displaced pixels that stay in bounds.
// Returns +inf when fewer than a quarter of the pixels are usable.
inline double block_cost(const Image& a, const Image& b, int bx, int by, int bs, int dx, int dy) {
    double acc = 0.0;
    int count = 0;
    for (int y = 0; y < bs; ++y) {
        const int yb = by + y + dy;
        if (yb < 0 || yb >= b.h) continue;
        for (int x = 0; x < bs; ++x) {
            const int xb = bx + x + dx;
            if (xb < 0 || xb >= b.w) continue;
            const double d = a.at(by + y, bx + x) - b.at(yb, xb);
            acc += d * d;
            ++count;
        }
    }
    if (count * 4 < bs * bs) return std::numeric_limits<double>::infinity();
    return acc / count;
}

} // namespace detail

// Dense displacement field a -> b via coarse-to-fine block matching: 3-level
// pyramid, 8x8 blocks, +-4 px integer search around the propagated coarse
// estimate, parabolic sub-pixel refinement at the finest level. Identical
// frames give an exactly-zero field (ties never displace the zero candidate,
// and refinement is skipped at zero cost).
inline FlowField estimate_flow(const Image& frame_a, const Image& frame_b) {
    if (frame_a.h != frame_b.h || frame_a.w != frame_b.w)
        throw ShapeError("estimate_flow: frame dimensions differ");
    if (frame_a.h <= 0 || frame_a.w <= 0) throw InputError("estimate_flow: empty frames");

    constexpr int kBlock = 8;
    constexpr int kSearch = 4;

    // build pyramids (level 0 = full res), stopping before blocks stop fitting
    std::vector<Image> pa{frame_a}, pb{frame_b};
    for (int l = 1; l < 3; ++l) {
        const Image& prev = pa.back();
        if (prev.h / 2 < kBlock || prev.w / 2 < kBlock) break;
        pa.push_back(detail::downsample2(pa.back()));
        pb.push_back(detail::downsample2(pb.back()));
    }

    Tensor u, v;
    for (int l = static_cast<int>(pa.size()) - 1; l >= 0; --l) {
        const Image& a = pa[static_cast<std::size_t>(l)];
        const Image& b = pb[static_cast<std::size_t>(l)];
        Tensor nu({a.h, a.w}), nv({a.h, a.w});
        const bool have_init = u.numel() > 0;
        const bool finest = (l == 0);

        for (int by = 0; by < a.h; by += kBlock) {
            const int oy = std::min(by, a.h - kBlock);
            for (int bx = 0; bx < a.w; bx += kBlock) {
                const int ox = std::min(bx, a.w - kBlock);

                int idx = 0, idy = 0;
                if (have_init) {
                    // average the coarser estimate over this block's footprint
                    double su = 0.0, sv = 0.0;
                    for (int y = 0; y < kBlock; ++y)
                        for (int x = 0; x < kBlock; ++x) {
                            const int cy = std::min((oy + y) / 2, u.dim(0) - 1);
                            const int cx = std::min((ox + x) / 2, u.dim(1) - 1);
                            su += 2.0 * u.at(cy, cx);
                            sv += 2.0 * v.at(cy, cx);
                        }
                    idx = static_cast<int>(std::lround(su / (kBlock * kBlock)));
                    idy = static_cast<int>(std::lround(sv / (kBlock * kBlock)));
                }

                // strict-less search keeps the propagated candidate on ties
                int bdx = idx, bdy = idy;
                double best = detail::block_cost(a, b, ox, oy, kBlock, idx, idy);
                for (int dy = idy - kSearch; dy <= idy + kSearch; ++dy)
                    for (int dx = idx - kSearch; dx <= idx + kSearch; ++dx) {
                        if (dx == idx && dy == idy) continue;
                        const double c = detail::block_cost(a, b, ox, oy, kBlock, dx, dy);
                        if (c < best) { best = c; bdx = dx; bdy = dy; }
                    }

                double fx = bdx, fy = bdy;
                if (finest && best > 0.0 && std::isfinite(best)) {
                    const double cxm = detail::block_cost(a, b, ox, oy, kBlock, bdx - 1, bdy);
                    const double cxp = detail::block_cost(a, b, ox, oy, kBlock, bdx + 1, bdy);
                    if (std::isfinite(cxm) && std::isfinite(cxp)) {
                        const double den = cxm - 2.0 * best + cxp;
                        if (den > 0.0) fx += std::clamp(0.5 * (cxm - cxp) / den, -0.5, 0.5);
                    }
                    const double cym = detail::block_cost(a, b, ox, oy, kBlock, bdx, bdy - 1);
                    const double cyp = detail::block_cost(a, b, ox, oy, kBlock, bdx, bdy + 1);
                    if (std::isfinite(cym) && std::isfinite(cyp)) {
                        const double den = cym - 2.0 * best + cyp;
                        if (den > 0.0) fy += std::clamp(0.5 * (cym - cyp) / den, -0.5, 0.5);
                    }
                }

                for (int y = 0; y < kBlock; ++y)
                    for (int x = 0; x < kBlock; ++x) {
                        nu.at(oy + y, ox + x) = fx;
                        nv.at(oy + y, ox + x) = fy;
                    }
            }
        }
        u = std::move(nu);
        v = std::move(nv);
    }
    return FlowField{std::move(u), std::move(v)};
}

// ---- mask chain ----

struct FlowThreshold {
    Tensor magnitude; // H x W, sqrt(u^2 + v^2)
    double tau = 0.0; // arithmetic mean of magnitude
};

inline FlowThreshold flow_threshold(const FlowField& flow) {
    flow.validate();
    Tensor mag(flow.u.shape());
    double acc = 0.0;
    for (std::int64_t i = 0; i < mag.numel(); ++i) {
        mag[i] = std::sqrt(flow.u[i] * flow.u[i] + flow.v[i] * flow.v[i]);
        acc += mag[i];
    }
    return FlowThreshold{std::move(mag), acc / static_cast<double>(flow.u.numel())};
}

// 1 exactly where magnitude strictly exceeds tau.
inline Tensor binary_mask(const Tensor& magnitude, double tau) {
    if (tau < 0.0) throw InputError("binary_mask: negative tau");
    Tensor mask(magnitude.shape());
    for (std::int64_t i = 0; i < mask.numel(); ++i) mask[i] = magnitude[i] > tau ? 1.0 : 0.0;
    return mask;
}

struct ForegroundMean {
    double f_fg = 0.0;
    std::int64_t s = 0;  // foreground pixel count
    Tensor masked_field; // mask (.) magnitude
};

inline ForegroundMean foreground_mean(const Tensor& magnitude, const Tensor& mask) {
    require_same_shape(magnitude, mask, "foreground_mean");
    ForegroundMean out;
    out.masked_field = Tensor(magnitude.shape());
    double acc = 0.0;
    for (std::int64_t i = 0; i < magnitude.numel(); ++i) {
        out.masked_field[i] = mask[i] * magnitude[i];
        acc += out.masked_field[i];
        if (mask[i] != 0.0) ++out.s;
    }
    out.f_fg = out.s > 0 ? acc / static_cast<double>(out.s) : 0.0; // uniform-flow clips degrade to plain MSE
    return out;
}

// Per-pixel weight clip(value/255 + 0.5, 1.0, 1.5). The input field is in
// 0-255 intensity units; see flow magnitude scaling below.
inline Tensor normalized_mask(const Tensor& masked_field) {
    Tensor out(masked_field.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        if (masked_field[i] < 0.0) throw InputError("normalized_mask: negative input");
        out[i] = std::clamp(masked_field[i] / 255.0 + 0.5, 1.0, 1.5);
    }
    return out;
}

// Flow magnitudes are in pixels; the weight formula wants 8-bit intensity
// units. Default scale saturates the weight at 10 px of motion.
constexpr double kFlowToIntensity = 25.5;

inline Tensor resize_mask_to_latent(const Tensor& weight_mask, int lat_h, int lat_w) {
    return resize_area(weight_mask, lat_h, lat_w);
}

struct FlowMaskBundle {
    Tensor magnitude;
    double tau = 0.0;
    Tensor binary;
    std::int64_t s = 0;
    double f_fg = 0.0;
    Tensor weight_pixel;  // H x W, in [1.0, 1.5]
    Tensor weight_latent; // lat_h x lat_w
};

inline FlowMaskBundle flow_mask_bundle(const FlowField& flow, int lat_h, int lat_w,
                                       double flow_to_intensity = kFlowToIntensity) {
    FlowMaskBundle b;
    FlowThreshold th = flow_threshold(flow);
    b.magnitude = std::move(th.magnitude);
    b.tau = th.tau;
    b.binary = binary_mask(b.magnitude, b.tau);
    ForegroundMean fg = foreground_mean(b.magnitude, b.binary);
    b.s = fg.s;
    b.f_fg = fg.f_fg;
    Tensor scaled = fg.masked_field * flow_to_intensity;
    b.weight_pixel = normalized_mask(scaled);
    b.weight_latent = resize_mask_to_latent(b.weight_pixel, lat_h, lat_w);
    return b;
}

// Objective over per-channel-averaged squared errors: mean over all positions
// of weight * err^2, with plain double accumulation.
inline double face_aware_loss(const Tensor& eps_true, const Tensor& eps_pred, const Tensor& weights) {
    require_same_shape(eps_true, eps_pred, "face_aware_loss");
    require_same_shape(eps_true, weights, "face_aware_loss weights");
    double acc = 0.0;
    for (std::int64_t i = 0; i < eps_true.numel(); ++i) {
        if (weights[i] < 1.0 - 1e-12 || weights[i] > 1.5 + 1e-12)
            throw InputError("face_aware_loss: weight outside [1.0, 1.5]");
        const double d = eps_true[i] - eps_pred[i];
        acc += weights[i] * d * d;
    }
    return acc / static_cast<double>(eps_true.numel());
}

// Multi-channel form: squared error is averaged over C before weighting.
inline double face_aware_loss_nchw(const Tensor& eps_true, const Tensor& eps_pred, const Tensor& weights) {
    require_same_shape(eps_true, eps_pred, "face_aware_loss_nchw");
    if (eps_true.rank() != 4) throw ShapeError("face_aware_loss_nchw needs [N,C,H,W]");
    const int N = eps_true.dim(0), C = eps_true.dim(1), H = eps_true.dim(2), W = eps_true.dim(3);
    if (weights.rank() != 3 || weights.dim(0) != N || weights.dim(1) != H || weights.dim(2) != W)
        throw ShapeError("face_aware_loss_nchw: weights must be [N,H,W]");
    double acc = 0.0;
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double ch = 0.0;
                for (int c = 0; c < C; ++c) {
                    const double d = eps_true.at(n, c, h, w) - eps_pred.at(n, c, h, w);
                    ch += d * d;
                }
                acc += weights.at(n, h, w) * ch / static_cast<double>(C);
            }
    return acc / (static_cast<double>(N) * H * W);
}

// Per-frame pixel-space weight masks for a clip: frame 0 is all 1.0 by
// convention, frame i >= 1 derives from the flow of frame i-1 -> i.
inline std::vector<Tensor> clip_weight_masks(const std::vector<Image>& frames,
                                             double flow_to_intensity = kFlowToIntensity) {
    if (frames.empty()) throw InputError("clip_weight_masks: no frames");
    std::vector<Tensor> out;
    out.reserve(frames.size());
    out.push_back(Tensor::full({frames[0].h, frames[0].w}, 1.0));
    for (std::size_t i = 1; i < frames.size(); ++i) {
        FlowField fl = estimate_flow(frames[i - 1], frames[i]);
        FlowThreshold th = flow_threshold(fl);
        Tensor mask = binary_mask(th.magnitude, th.tau);
        ForegroundMean fg = foreground_mean(th.magnitude, mask);
        out.push_back(normalized_mask(fg.masked_field * flow_to_intensity));
    }
    return out;
}

// Collapse pixel-rate weight masks to latent resolution: latent frame m
// averages the masks of the temporal_stride pixel frames it covers, then
// area-resizes to (lat_h, lat_w). Returns [n_latent, lat_h, lat_w].
inline Tensor latent_weight_masks(const std::vector<Tensor>& pixel_masks, int temporal_stride,
                                  int lat_h, int lat_w) {
    if (pixel_masks.empty()) throw InputError("latent_weight_masks: no masks");
    if (temporal_stride <= 0 || pixel_masks.size() % static_cast<std::size_t>(temporal_stride) != 0)
        throw ShapeError("latent_weight_masks: frame count not divisible by temporal stride");
    const int n_lat = static_cast<int>(pixel_masks.size()) / temporal_stride;
    Tensor out({n_lat, lat_h, lat_w});
    for (int m = 0; m < n_lat; ++m) {
        Tensor avg(pixel_masks[0].shape());
        for (int k = 0; k < temporal_stride; ++k) {
            const Tensor& pm = pixel_masks[static_cast<std::size_t>(m * temporal_stride + k)];
            for (std::int64_t i = 0; i < avg.numel(); ++i) avg[i] += pm[i];
        }
        avg = avg * (1.0 / temporal_stride);
        Tensor lat = resize_mask_to_latent(avg, lat_h, lat_w);
        for (int y = 0; y < lat_h; ++y)
            for (int x = 0; x < lat_w; ++x) out.at(m, y, x) = lat.at(y, x);
    }
    return out;
}

// ---- flow file I/O ----
// Layout: magic "SKA1FLOW", u32 H, u32 W, u32 version (=1), then H*W
// little-endian float32 (u, v) pairs, row-major.

inline void write_flow(const std::filesystem::path& path, const FlowField& flow) {
    flow.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write flow: " + path.string());
    f.write("SKA1FLOW", 8);
    const std::uint32_t h = static_cast<std::uint32_t>(flow.h());
    const std::uint32_t w = static_cast<std::uint32_t>(flow.w());
    const std::uint32_t ver = 1;
    f.write(reinterpret_cast<const char*>(&h), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    f.write(reinterpret_cast<const char*>(&ver), 4);
    std::vector<float> buf(static_cast<std::size_t>(flow.u.numel()) * 2);
    for (std::int64_t i = 0; i < flow.u.numel(); ++i) {
        buf[static_cast<std::size_t>(2 * i)] = static_cast<float>(flow.u[i]);
        buf[static_cast<std::size_t>(2 * i) + 1] = static_cast<float>(flow.v[i]);
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!f) throw IoError("flow write failed: " + path.string());
}

inline FlowField read_flow(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read flow: " + path.string());
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "SKA1FLOW", 8) != 0) throw IoError("bad flow magic: " + path.string());
    std::uint32_t h = 0, w = 0, ver = 0;
    f.read(reinterpret_cast<char*>(&h), 4);
    f.read(reinterpret_cast<char*>(&w), 4);
    f.read(reinterpret_cast<char*>(&ver), 4);
    if (!f || ver != 1) throw IoError("unsupported flow version in " + path.string());
    if (h == 0 || w == 0 || h > 1u << 20 || w > 1u << 20) throw IoError("implausible flow dims in " + path.string());
    std::vector<float> buf(static_cast<std::size_t>(h) * w * 2);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!f) throw IoError("truncated flow file: " + path.string());
    FlowField flow{Tensor({static_cast<int>(h), static_cast<int>(w)}),
                   Tensor({static_cast<int>(h), static_cast<int>(w)})};
    for (std::int64_t i = 0; i < flow.u.numel(); ++i) {
        flow.u[i] = buf[static_cast<std::size_t>(2 * i)];
        flow.v[i] = buf[static_cast<std::size_t>(2 * i) + 1];
    }
    flow.validate();
    return flow;
}

} // namespace ska1

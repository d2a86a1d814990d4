#pragma once

#include <optional>
#include <string>

#include "ska1/core/errors.hpp"
#include "ska1/core/image.hpp"
#include "ska1/core/rng.hpp"
#include "ska1/core/tensor.hpp"

namespace ska1 {

// ---- face extraction ----

struct FaceCrop {
    RectI box;  // square region in source coordinates
    Image crop; // resized to the encoder input size
};

constexpr int kFaceCropSize = 32;

// Locates the face as the bounding box of bright pixels (the rendered head is
// light on a dark background), squares it, clamps it inside the image, and
// resizes. When a known box is passed (synthetic clips carry their boxes in
// the manifest) it is used verbatim apart from bounds clamping.
inline FaceCrop face_extract(const Image& img, const std::optional<RectI>& known_box = std::nullopt,
                             int out_size = kFaceCropSize) {
    RectI box;
    if (known_box) {
        box = clamp_rect(*known_box, img.w, img.h);
        if (box.empty()) throw FaceNotFoundError("face box degenerate after clamping");
    } else {
        int x0 = img.w, y0 = img.h, x1 = -1, y1 = -1;
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                if (img.at(y, x) > 0.5) {
                    x0 = std::min(x0, x); x1 = std::max(x1, x);
                    y0 = std::min(y0, y); y1 = std::max(y1, y);
                }
        if (x1 < 0) throw FaceNotFoundError("no bright face region found");
        box = RectI{x0, y0, x1 + 1, y1 + 1};
        // square it around the center
        int side = std::max(box.width(), box.height());
        side = std::min(side, std::min(img.w, img.h));
        int cx0 = box.x0 + (box.width() - side) / 2;
        int cy0 = box.y0 + (box.height() - side) / 2;
        cx0 = std::clamp(cx0, 0, img.w - side);
        cy0 = std::clamp(cy0, 0, img.h - side);
        box = RectI{cx0, cy0, cx0 + side, cy0 + side};
    }
    Image region = crop_pad(img, box, box.height(), box.width());
    return FaceCrop{box, resize_bilinear(region, out_size, out_size)};
}

// ---- vision encoder stub ----
// A small frozen convolutional trunk with two linear heads. Weights are
// procedurally generated from a fixed label so every process sees the same
// encoder; biases are zero throughout, so a zero image maps to a zero
// embedding. Not part of the parameter registry: nothing here ever trains.

class VisionStub {
public:
    explicit VisionStub(int d_id) : d_id_(d_id) {
        Rng rng(0x76697331); // stable stub identity, independent of run seeds
        const double s1 = std::sqrt(2.0 / (9.0 + 9.0 * kC1));
        const double s2 = std::sqrt(2.0 / (9.0 * kC1 + 9.0 * kC2));
        const double sh = std::sqrt(2.0 / (kC2 + d_id));
        w1_ = Tensor::randn({kC1, 1, 3, 3}, rng) * s1;
        w2_ = Tensor::randn({kC2, kC1, 3, 3}, rng) * s2;
        arc_ = Tensor::randn({d_id, kC2}, rng) * sh;
        cur_ = Tensor::randn({d_id, kC2}, rng) * sh;
    }

    int d_id() const { return d_id_; }

    Tensor encode_arc(const Image& face) const { return head(trunk(face), arc_); }
    Tensor encode_cur(const Image& face) const { return head(trunk(face), cur_); }

private:
    static constexpr int kC1 = 8;
    static constexpr int kC2 = 16;

    int d_id_;
    Tensor w1_, w2_, arc_, cur_;

    static Tensor conv2d_s2(const Tensor& x, const Tensor& w) {
        // x [Ci,H,W], w [Co,Ci,3,3], stride 2, pad 1, no bias
        const int Ci = x.dim(0), H = x.dim(1), W = x.dim(2), Co = w.dim(0);
        const int Ho = H / 2, Wo = W / 2;
        Tensor y({Co, Ho, Wo});
        for (int co = 0; co < Co; ++co)
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo) {
                    double acc = 0.0;
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int dy = 0; dy < 3; ++dy) {
                            const int yy = 2 * ho + dy - 1;
                            if (yy < 0 || yy >= H) continue;
                            for (int dx = 0; dx < 3; ++dx) {
                                const int xx = 2 * wo + dx - 1;
                                if (xx < 0 || xx >= W) continue;
                                acc += w.at(co, ci, dy, dx) * x.at(ci, yy, xx);
                            }
                        }
                    y.at(co, ho, wo) = acc;
                }
        return y;
    }

    static void gelu_inplace(Tensor& t) {
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t[i] = 0.5 * t[i] * (1.0 + std::erf(t[i] * 0.7071067811865475244));
    }

    Tensor trunk(const Image& face) const {
        if (face.h != kFaceCropSize || face.w != kFaceCropSize)
            throw ShapeError("vision stub expects a " + std::to_string(kFaceCropSize) + "px square crop");
        Tensor x({1, face.h, face.w});
        for (int y = 0; y < face.h; ++y)
            for (int xx = 0; xx < face.w; ++xx) x.at(0, y, xx) = face.at(y, xx);
        Tensor h1 = conv2d_s2(x, w1_);
        gelu_inplace(h1);
        Tensor h2 = conv2d_s2(h1, w2_);
        gelu_inplace(h2);
        // global average pool per channel
        Tensor pooled({kC2});
        const int hw = h2.dim(1) * h2.dim(2);
        for (int c = 0; c < kC2; ++c) {
            double acc = 0.0;
            for (int i = 0; i < h2.dim(1); ++i)
                for (int j = 0; j < h2.dim(2); ++j) acc += h2.at(c, i, j);
            pooled[c] = acc / hw;
        }
        return pooled;
    }

    Tensor head(const Tensor& pooled, const Tensor& w) const {
        Tensor out({d_id_});
        for (int o = 0; o < d_id_; ++o) {
            double acc = 0.0;
            for (int c = 0; c < kC2; ++c) acc += w.at(o, c) * pooled[c];
            out[o] = acc;
        }
        return out;
    }
};

// ---- text tokenization (the embedding table itself lives in the registry) ----

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Whitespace tokens hashed into a fixed vocabulary; right-padded to max_len
// with a validity mask. Empty prompt -> all padding.
inline std::pair<std::vector<int>, std::vector<char>> hash_tokenize(const std::string& prompt,
                                                                    int vocab, int max_len) {
    std::vector<int> ids;
    std::vector<char> mask;
    std::string word;
    auto flush = [&] {
        if (!word.empty() && static_cast<int>(ids.size()) < max_len) {
            ids.push_back(static_cast<int>(fnv1a64(word) % static_cast<std::uint64_t>(vocab)));
            mask.push_back(1);
            word.clear();
        } else {
            word.clear();
        }
    };
    for (char c : prompt) {
        if (std::isspace(static_cast<unsigned char>(c))) flush();
        else word.push_back(c);
    }
    flush();
    while (static_cast<int>(ids.size()) < max_len) {
        ids.push_back(0);
        mask.push_back(0);
    }
    return {ids, mask};
}

} // namespace ska1

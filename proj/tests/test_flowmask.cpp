#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ska1/core/rng.hpp"
#include "ska1/flowmask.hpp"

using namespace ska1;

namespace {

Image noise_image(int h, int w, Rng& rng) {
    Image img(h, w);
    for (auto& p : img.pix) p = rng.uniform();
    return img;
}

// wrap-around translate: out(y, x) = src(y - dy, x - dx)
Image shifted(const Image& src, int dx, int dy) {
    Image out(src.h, src.w);
    for (int y = 0; y < src.h; ++y)
        for (int x = 0; x < src.w; ++x) {
            const int sy = ((y - dy) % src.h + src.h) % src.h;
            const int sx = ((x - dx) % src.w + src.w) % src.w;
            out.at(y, x) = src.at(sy, sx);
        }
    return out;
}

} // namespace

// ---- threshold / mask chain, hand-worked values ----

TEST(FlowChain, MagnitudeAndTau) {
    FlowField f{Tensor({1, 1}, {3.0}), Tensor({1, 1}, {4.0})};
    const FlowThreshold th = flow_threshold(f);
    EXPECT_DOUBLE_EQ(th.magnitude[0], 5.0);
    EXPECT_DOUBLE_EQ(th.tau, 5.0);
}

TEST(FlowChain, TauIsMeanOfMagnitudes) {
    // magnitudes 1, 3, 5, 7 -> tau 4
    FlowField f{Tensor({2, 2}, {1.0, 3.0, 5.0, 7.0}), Tensor({2, 2})};
    const FlowThreshold th = flow_threshold(f);
    EXPECT_DOUBLE_EQ(th.tau, 4.0);
    const Tensor mask = binary_mask(th.magnitude, th.tau);
    EXPECT_DOUBLE_EQ(mask[0], 0.0);
    EXPECT_DOUBLE_EQ(mask[1], 0.0);
    EXPECT_DOUBLE_EQ(mask[2], 1.0);
    EXPECT_DOUBLE_EQ(mask[3], 1.0);
}

TEST(FlowChain, MaskIsStrictlyAboveTau) {
    const Tensor mag({3}, {2.0, 4.0, 4.0 + 1e-12});
    const Tensor mask = binary_mask(mag, 4.0);
    EXPECT_DOUBLE_EQ(mask[0], 0.0);
    EXPECT_DOUBLE_EQ(mask[1], 0.0); // equality does not pass
    EXPECT_DOUBLE_EQ(mask[2], 1.0);
    EXPECT_THROW(binary_mask(mag, -0.1), InputError);
}

TEST(FlowChain, ForegroundMean) {
    const Tensor mag({2, 2}, {1.0, 3.0, 5.0, 7.0});
    const Tensor mask({2, 2}, {0.0, 0.0, 1.0, 1.0});
    const ForegroundMean fg = foreground_mean(mag, mask);
    EXPECT_EQ(fg.s, 2);
    EXPECT_DOUBLE_EQ(fg.f_fg, 6.0);
    EXPECT_DOUBLE_EQ(fg.masked_field[2], 5.0);
    EXPECT_DOUBLE_EQ(fg.masked_field[0], 0.0);
}

TEST(FlowChain, ForegroundMeanEmptyMask) {
    const Tensor mag({2}, {1.0, 2.0});
    const Tensor mask({2}, {0.0, 0.0});
    const ForegroundMean fg = foreground_mean(mag, mask);
    EXPECT_EQ(fg.s, 0);
    EXPECT_DOUBLE_EQ(fg.f_fg, 0.0);
}

TEST(FlowChain, NormalizedMaskFormula) {
    const Tensor field({4}, {204.0, 0.0, 500.0, 127.5});
    const Tensor w = normalized_mask(field);
    EXPECT_DOUBLE_EQ(w[0], 1.3);  // 204/255 + 0.5
    EXPECT_DOUBLE_EQ(w[1], 1.0);  // clipped up
    EXPECT_DOUBLE_EQ(w[2], 1.5);  // clipped down
    EXPECT_DOUBLE_EQ(w[3], 1.0);  // 0.5 + 0.5 sits exactly at the lower clip
    EXPECT_THROW(normalized_mask(Tensor({1}, {-1.0})), InputError);
}

TEST(FlowChain, IntensityScaleSaturatesAtTenPixels) {
    EXPECT_DOUBLE_EQ(10.0 * kFlowToIntensity, 255.0);
    const Tensor w = normalized_mask(Tensor({1}, {10.0}) * kFlowToIntensity);
    EXPECT_DOUBLE_EQ(w[0], 1.5);
}

TEST(FlowChain, BundleEndToEnd) {
    // magnitudes {0, 0, 10, 10}: tau 5, two foreground pixels at weight 1.5
    FlowField f{Tensor({2, 2}, {0.0, 0.0, 6.0, 8.0}), Tensor({2, 2}, {0.0, 0.0, 8.0, 6.0})};
    const FlowMaskBundle b = flow_mask_bundle(f, 1, 1);
    EXPECT_DOUBLE_EQ(b.tau, 5.0);
    EXPECT_EQ(b.s, 2);
    EXPECT_DOUBLE_EQ(b.f_fg, 10.0);
    EXPECT_DOUBLE_EQ(b.weight_pixel.at(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(b.weight_pixel.at(1, 0), 1.5);
    EXPECT_DOUBLE_EQ(b.weight_latent.at(0, 0), 1.25); // area mean of {1,1,1.5,1.5}
}

TEST(FlowChain, RejectsNonFiniteFlow) {
    FlowField f{Tensor({1, 2}, {1.0, std::nan("")}), Tensor({1, 2})};
    EXPECT_THROW(flow_threshold(f), InputError);
}

// ---- weighted loss ----

TEST(FaceAwareLoss, HandValues) {
    const Tensor t({2}, {0.0, 0.0}), p({2}, {1.0, 2.0});
    const Tensor w({2}, {1.0, 1.5});
    // (1.0*1 + 1.5*4) / 2
    EXPECT_DOUBLE_EQ(face_aware_loss(t, p, w), 3.5);
}

TEST(FaceAwareLoss, WeightsAllOneEqualsMse) {
    Rng rng(55);
    const int n = 64;
    Tensor t({n}), p({n});
    for (int i = 0; i < n; ++i) {
        t[i] = rng.normal();
        p[i] = rng.normal();
    }
    const Tensor w = Tensor::full({n}, 1.0);
    double mse = 0.0;
    for (int i = 0; i < n; ++i) mse += (t[i] - p[i]) * (t[i] - p[i]);
    mse /= n;
    EXPECT_NEAR(face_aware_loss(t, p, w), mse, 1e-15);
}

TEST(FaceAwareLoss, BoundedByMseBand) {
    Rng rng(56);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_int(32));
        Tensor t({n}), p({n}), w({n});
        double mse = 0.0;
        for (int i = 0; i < n; ++i) {
            t[i] = rng.normal();
            p[i] = rng.normal();
            w[i] = 1.0 + 0.5 * rng.uniform();
            mse += (t[i] - p[i]) * (t[i] - p[i]);
        }
        mse /= n;
        const double loss = face_aware_loss(t, p, w);
        EXPECT_GE(loss, mse - 1e-12);
        EXPECT_LE(loss, 1.5 * mse + 1e-12);
    }
}

TEST(FaceAwareLoss, RejectsWeightsOutsideBand) {
    const Tensor t({1}, {0.0}), p({1}, {1.0});
    EXPECT_THROW(face_aware_loss(t, p, Tensor({1}, {0.9})), InputError);
    EXPECT_THROW(face_aware_loss(t, p, Tensor({1}, {1.6})), InputError);
    EXPECT_NO_THROW(face_aware_loss(t, p, Tensor({1}, {1.5})));
}

TEST(FaceAwareLoss, NchwChannelAveragesBeforeWeighting) {
    // N=1 C=2 H=1 W=2; per-position channel-mean squared errors: 5 and 2
    Tensor t({1, 2, 1, 2}), p({1, 2, 1, 2});
    p.at(0, 0, 0, 0) = 1.0; // err^2 = 1
    p.at(0, 1, 0, 0) = 3.0; // err^2 = 9
    p.at(0, 0, 0, 1) = 0.0; // err^2 = 0
    p.at(0, 1, 0, 1) = 2.0; // err^2 = 4
    Tensor w({1, 1, 2});
    w.at(0, 0, 0) = 1.5;
    w.at(0, 0, 1) = 1.0;
    EXPECT_DOUBLE_EQ(face_aware_loss_nchw(t, p, w), (1.5 * 5.0 + 1.0 * 2.0) / 2.0);
}

TEST(FaceAwareLoss, NchwMatchesFlatWhenSingleChannel) {
    Rng rng(57);
    Tensor t({2, 1, 3, 3}), p({2, 1, 3, 3}), w3({2, 3, 3}), wflat({2, 1, 3, 3});
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        t[i] = rng.normal();
        p[i] = rng.normal();
    }
    for (std::int64_t i = 0; i < w3.numel(); ++i) {
        w3[i] = 1.0 + 0.5 * rng.uniform();
        wflat[i] = w3[i];
    }
    EXPECT_NEAR(face_aware_loss_nchw(t, p, w3), face_aware_loss(t, p, wflat), 1e-15);
}

// ---- flow estimation ----

TEST(FlowEstimate, IdenticalFramesGiveExactZero) {
    Rng rng(58);
    const Image f = noise_image(32, 48, rng);
    const FlowField fl = estimate_flow(f, f);
    for (std::int64_t i = 0; i < fl.u.numel(); ++i) {
        EXPECT_EQ(fl.u[i], 0.0);
        EXPECT_EQ(fl.v[i], 0.0);
    }
}

TEST(FlowEstimate, RecoverIntegerTranslations) {
    // smooth periodic texture: coarse pyramid levels stay informative,
    // and the wrap-around shift is exact everywhere
    Rng rng(59);
    for (int trial = 0; trial < 20; ++trial) {
        const int dx = static_cast<int>(rng.uniform_int(9)) - 4;
        const int dy = static_cast<int>(rng.uniform_int(9)) - 4;
        const double p1 = rng.uniform(0.0, 6.28), p2 = rng.uniform(0.0, 6.28),
                     p3 = rng.uniform(0.0, 6.28);
        Image a(64, 64);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                a.at(y, x) = 0.5 + 0.15 * std::sin(2.0 * 3.14159265358979 * (2 * x + y) / 64.0 + p1) +
                             0.12 * std::sin(2.0 * 3.14159265358979 * (3 * y - x) / 64.0 + p2) +
                             0.10 * std::sin(2.0 * 3.14159265358979 * (x + 3 * y) / 64.0 + p3);
        const Image b = shifted(a, dx, dy);
        const FlowField fl = estimate_flow(a, b);
        double err = 0.0;
        for (std::int64_t i = 0; i < fl.u.numel(); ++i)
            err += std::abs(fl.u[i] - dx) + std::abs(fl.v[i] - dy);
        err /= static_cast<double>(fl.u.numel());
        EXPECT_LT(err, 0.5) << "shift (" << dx << "," << dy << ")";
    }
}

TEST(FlowEstimate, RejectsMismatchedFrames) {
    const Image a(16, 16), b(16, 17);
    EXPECT_THROW(estimate_flow(a, b), ShapeError);
}

// ---- per-clip weight masks ----

TEST(ClipMasks, FirstFrameIsAllOnes) {
    Rng rng(60);
    const std::vector<Image> frames{noise_image(16, 16, rng), noise_image(16, 16, rng)};
    const std::vector<Tensor> masks = clip_weight_masks(frames);
    ASSERT_EQ(masks.size(), 2u);
    for (std::int64_t i = 0; i < masks[0].numel(); ++i) EXPECT_DOUBLE_EQ(masks[0][i], 1.0);
}

TEST(ClipMasks, StaticClipIsAllOnes) {
    Rng rng(61);
    const Image f = noise_image(16, 16, rng);
    const std::vector<Tensor> masks = clip_weight_masks({f, f, f});
    for (const Tensor& m : masks)
        for (std::int64_t i = 0; i < m.numel(); ++i) EXPECT_DOUBLE_EQ(m[i], 1.0);
}

TEST(ClipMasks, ValuesStayInBand) {
    Rng rng(62);
    const Image a = noise_image(32, 32, rng);
    const Image b = shifted(a, 3, -2);
    const std::vector<Tensor> masks = clip_weight_masks({a, b});
    for (std::int64_t i = 0; i < masks[1].numel(); ++i) {
        EXPECT_GE(masks[1][i], 1.0);
        EXPECT_LE(masks[1][i], 1.5);
    }
    EXPECT_THROW(clip_weight_masks({}), InputError);
}

TEST(LatentMasks, WindowAverageThenResize) {
    const std::vector<Tensor> pm{Tensor::full({2, 2}, 1.0), Tensor::full({2, 2}, 1.5),
                                 Tensor::full({2, 2}, 1.2), Tensor::full({2, 2}, 1.2)};
    const Tensor lat = latent_weight_masks(pm, 2, 1, 1);
    ASSERT_EQ(lat.dim(0), 2);
    EXPECT_DOUBLE_EQ(lat.at(0, 0, 0), 1.25);
    EXPECT_DOUBLE_EQ(lat.at(1, 0, 0), 1.2);
}

TEST(LatentMasks, RejectsIndivisibleFrameCount) {
    const std::vector<Tensor> pm{Tensor::full({2, 2}, 1.0), Tensor::full({2, 2}, 1.0),
                                 Tensor::full({2, 2}, 1.0)};
    EXPECT_THROW(latent_weight_masks(pm, 2, 1, 1), ShapeError);
}

// ---- flow file format ----

TEST(FlowIo, RoundTrip) {
    Rng rng(63);
    const int h = 5, w = 7;
    Tensor u({h, w}), v({h, w});
    for (std::int64_t i = 0; i < u.numel(); ++i) {
        // quarter-pixel values survive the float32 narrowing exactly
        u[i] = 0.25 * static_cast<double>(static_cast<int>(rng.uniform_int(33)) - 16);
        v[i] = 0.25 * static_cast<double>(static_cast<int>(rng.uniform_int(33)) - 16);
    }
    const auto path = std::filesystem::temp_directory_path() / "ska1_test_flow.bin";
    write_flow(path, FlowField{u, v});
    const FlowField back = read_flow(path);
    ASSERT_EQ(back.h(), h);
    ASSERT_EQ(back.w(), w);
    for (std::int64_t i = 0; i < u.numel(); ++i) {
        EXPECT_DOUBLE_EQ(back.u[i], u[i]);
        EXPECT_DOUBLE_EQ(back.v[i], v[i]);
    }
    std::filesystem::remove(path);
}

TEST(FlowIo, RejectsBadMagic) {
    const auto path = std::filesystem::temp_directory_path() / "ska1_test_flow_bad.bin";
    std::ofstream(path, std::ios::binary) << "NOTAFLOWFILE";
    EXPECT_THROW(read_flow(path), IoError);
    std::filesystem::remove(path);
    EXPECT_THROW(read_flow(path), IoError); // missing file
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    return RUN_ALL_TESTS();
}

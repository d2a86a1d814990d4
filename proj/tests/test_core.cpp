#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "ska1/core/autograd.hpp"
#include "ska1/core/image.hpp"
#include "ska1/core/linalg.hpp"
#include "ska1/core/rng.hpp"
#include "ska1/core/tensor.hpp"

using namespace ska1;

// ---- rng ----

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform_int(1u << 30), b.uniform_int(1u << 30));
}

TEST(Rng, DeriveIsStableAndDisjoint) {
    Rng root(7);
    Rng a1 = Rng(7).derive("alpha");
    Rng a2 = Rng(7).derive("alpha");
    Rng b = Rng(7).derive("beta");
    EXPECT_EQ(a1.uniform_int(1u << 30), a2.uniform_int(1u << 30));
    bool differs = false;
    Rng a3 = Rng(7).derive("alpha");
    for (int i = 0; i < 16; ++i) differs |= a3.uniform_int(1u << 30) != b.uniform_int(1u << 30);
    EXPECT_TRUE(differs);
    (void)root;
}

TEST(Rng, DeriveIndexedStreams) {
    Rng a = Rng(3).derive("stage", 1), b = Rng(3).derive("stage", 2);
    bool differs = false;
    for (int i = 0; i < 16; ++i) differs |= a.uniform_int(1u << 30) != b.uniform_int(1u << 30);
    EXPECT_TRUE(differs);
}

TEST(Rng, UniformInUnitInterval) {
    Rng r(11);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(Rng, NormalMoments) {
    Rng r(5);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        sum += x;
        sq += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.05);
    EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(Rng, UniformIntBounds) {
    Rng r(9);
    for (int i = 0; i < 1000; ++i) EXPECT_LT(r.uniform_int(17), 17u);
}

// ---- tensor ----

TEST(Tensor, ShapeAndIndexing) {
    Tensor t({2, 3});
    t.at(1, 2) = 5.0;
    EXPECT_EQ(t.numel(), 6);
    EXPECT_DOUBLE_EQ(t[5], 5.0);
    Tensor u({2, 2, 2, 2});
    u.at(1, 0, 1, 0) = 3.0;
    EXPECT_DOUBLE_EQ(u[10], 3.0);
}

TEST(Tensor, Arithmetic) {
    Tensor a({2}, {1.0, 2.0}), b({2}, {10.0, 20.0});
    const Tensor c = a + b, d = b - a, e = a * 2.0;
    EXPECT_DOUBLE_EQ(c[1], 22.0);
    EXPECT_DOUBLE_EQ(d[0], 9.0);
    EXPECT_DOUBLE_EQ(e[1], 4.0);
}

// ---- linalg ----

TEST(Linalg, TwoByTwoEigen) {
    const Tensor a({2, 2}, {2.0, 1.0, 1.0, 2.0});
    const EigenSym e = eigen_sym(a);
    EXPECT_NEAR(e.values[0], 1.0, 1e-12);
    EXPECT_NEAR(e.values[1], 3.0, 1e-12);
    // eigenvector of 3 is (1,1)/sqrt(2) up to sign
    const double v0 = e.vectors.at(0, 1), v1 = e.vectors.at(1, 1);
    EXPECT_NEAR(std::abs(v0), std::sqrt(0.5), 1e-12);
    EXPECT_NEAR(v0, v1, 1e-12);
}

TEST(Linalg, EigenReconstructsRandomSymmetric) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_int(5));
        Tensor a({n, n});
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) a.at(i, j) = a.at(j, i) = rng.normal();
        const EigenSym e = eigen_sym(a);
        // V diag(values) V^T == A
        double max_err = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int k = 0; k < n; ++k)
                    acc += e.vectors.at(i, k) * e.values[static_cast<std::size_t>(k)] * e.vectors.at(j, k);
                max_err = std::max(max_err, std::abs(acc - a.at(i, j)));
            }
        EXPECT_LT(max_err, 1e-9);
        for (std::size_t k = 1; k < e.values.size(); ++k) EXPECT_LE(e.values[k - 1], e.values[k]);
    }
}

TEST(Linalg, SqrtPsdSquaresBack) {
    Rng rng(33);
    for (int trial = 0; trial < 10; ++trial) {
        const int n = 3;
        Tensor b({n, n});
        for (int i = 0; i < n * n; ++i) b[i] = rng.normal();
        Tensor a = matmul_plain(b, transpose_plain(b)); // PSD by construction
        const Tensor r = sqrt_psd(a);
        const Tensor rr = matmul_plain(r, r);
        for (int i = 0; i < n * n; ++i) EXPECT_NEAR(rr[i], a[i], 1e-9);
    }
}

TEST(Linalg, SqrtPsdRejectsNegativeEigenvalues) {
    const Tensor a({2, 2}, {1.0, 0.0, 0.0, -0.5});
    EXPECT_THROW(sqrt_psd(a), InputError);
}

TEST(Linalg, SqrtPsdClipsTinyNegatives) {
    const Tensor a({2, 2}, {1.0, 0.0, 0.0, -1e-9});
    const Tensor r = sqrt_psd(a);
    EXPECT_NEAR(r.at(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(r.at(1, 1), 0.0, 1e-12);
}

// ---- autograd: finite differences ----

namespace {

using Builder = std::function<ag::Var(const std::vector<ag::Var>&)>;

// Central-difference check of d(scalar output)/d(every input element).
void check_grads(const Builder& build, const std::vector<Tensor>& inputs, double tol = 1e-6,
                 double h = 1e-5) {
    std::vector<ag::Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(ag::leaf(t));
    ag::Var out = build(leaves);
    ASSERT_EQ(out->val.numel(), 1);
    ag::backward(out);

    auto eval = [&](const std::vector<Tensor>& xs) {
        ag::NoGradGuard ng;
        std::vector<ag::Var> vs;
        for (const Tensor& t : xs) vs.push_back(ag::constant(t));
        return build(vs)->val[0];
    };

    for (std::size_t which = 0; which < inputs.size(); ++which) {
        const Tensor& grad = leaves[which]->grad;
        for (std::int64_t i = 0; i < inputs[which].numel(); ++i) {
            std::vector<Tensor> xs = inputs;
            xs[which][i] += h;
            const double up = eval(xs);
            xs[which][i] -= 2.0 * h;
            const double dn = eval(xs);
            const double num = (up - dn) / (2.0 * h);
            const double ana = grad.numel() == 0 ? 0.0 : grad[i];
            EXPECT_NEAR(ana, num, tol * std::max(1.0, std::abs(num)))
                << "input " << which << " element " << i;
        }
    }
}

Tensor rand_t(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
    return t;
}

} // namespace

TEST(Autograd, AddSubMulScale) {
    Rng rng(1);
    const Tensor a = rand_t({3, 2}, rng), b = rand_t({3, 2}, rng);
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::mul(ag::add(v[0], v[1]), ag::sub(v[0], ag::scale(v[1], 0.5))));
    }, {a, b});
}

TEST(Autograd, AddScalarGelu) {
    Rng rng(2);
    const Tensor a = rand_t({4}, rng);
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::gelu(ag::add_scalar(v[0], 0.3)));
    }, {a});
}

TEST(Autograd, GeluMatchesErfForm) {
    ag::NoGradGuard ng;
    const Tensor x({3}, {-1.0, 0.0, 2.0});
    const Tensor y = ag::gelu(ag::constant(x))->val;
    for (int i = 0; i < 3; ++i)
        EXPECT_NEAR(y[i], x[i] * 0.5 * (1.0 + std::erf(x[i] / std::sqrt(2.0))), 1e-15);
}

TEST(Autograd, MatmulForms) {
    Rng rng(3);
    const Tensor a = rand_t({2, 3}, rng), b = rand_t({3, 4}, rng), c = rand_t({4, 3}, rng);
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::matmul(v[0], v[1]));
    }, {a, b});
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::matmul_nt(v[0], v[1])); // a [2,3] x b[4,3]^T
    }, {a, c});
}

TEST(Autograd, LinearWithAndWithoutBias) {
    Rng rng(4);
    const Tensor x = rand_t({3, 4}, rng), w = rand_t({2, 4}, rng), b = rand_t({2}, rng);
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::linear(v[0], v[1], v[2]));
    }, {x, w, b});
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::linear(v[0], v[1], nullptr));
    }, {x, w});
}

TEST(Autograd, RowvecOps) {
    Rng rng(5);
    const Tensor x = rand_t({3, 4}, rng), v = rand_t({4}, rng);
    check_grads([](const std::vector<ag::Var>& vs) {
        return ag::mean_all(ag::mul_rowvec(ag::add_rowvec(vs[0], vs[1]), vs[1]));
    }, {x, v});
    check_grads([](const std::vector<ag::Var>& vs) {
        return ag::mean_all(ag::repeat_row(vs[0], 5));
    }, {v});
}

TEST(Autograd, LayerNorm) {
    Rng rng(6);
    const Tensor x = rand_t({3, 5}, rng), g = rand_t({5}, rng, 0.5), b = rand_t({5}, rng);
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::layernorm_rows(v[0], v[1], v[2]));
    }, {x, g, b}, 1e-5);
}

TEST(Autograd, LayerNormNormalizes) {
    ag::NoGradGuard ng;
    Rng rng(7);
    const Tensor x = rand_t({2, 8}, rng, 3.0);
    const Tensor g = Tensor::full({8}, 1.0), b = Tensor({8});
    const Tensor y = ag::layernorm_rows(ag::constant(x), ag::constant(g), ag::constant(b))->val;
    for (int r = 0; r < 2; ++r) {
        double mean = 0.0, var = 0.0;
        for (int c = 0; c < 8; ++c) mean += y.at(r, c);
        mean /= 8.0;
        for (int c = 0; c < 8; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
        var /= 8.0;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(Autograd, SoftmaxRowsSumToOne) {
    ag::NoGradGuard ng;
    Rng rng(8);
    const Tensor x = rand_t({3, 6}, rng, 2.0);
    const Tensor y = ag::softmax_rows(ag::constant(x))->val;
    for (int r = 0; r < 3; ++r) {
        double s = 0.0;
        for (int c = 0; c < 6; ++c) s += y.at(r, c);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Autograd, SoftmaxGrad) {
    Rng rng(9);
    const Tensor x = rand_t({2, 5}, rng), w = rand_t({2, 5}, rng);
    check_grads([&w](const std::vector<ag::Var>& v) {
        // weighted sum makes the gradient row-dependent
        return ag::mean_all(ag::mul(ag::softmax_rows(v[0]), ag::constant(w)));
    }, {x}, 1e-5);
}

TEST(Autograd, SoftmaxMaskZerosAndRenormalizes) {
    ag::NoGradGuard ng;
    const Tensor x({1, 3}, {1.0, 2.0, 3.0});
    const std::vector<char> mask{1, 0, 1};
    const Tensor y = ag::softmax_rows(ag::constant(x), &mask)->val;
    EXPECT_DOUBLE_EQ(y.at(0, 1), 0.0);
    EXPECT_NEAR(y.at(0, 0) + y.at(0, 2), 1.0, 1e-12);
    const double e = std::exp(1.0 - 3.0);
    EXPECT_NEAR(y.at(0, 0), e / (e + 1.0), 1e-12);
}

TEST(Autograd, MaskedSoftmaxGrad) {
    Rng rng(10);
    const Tensor x = rand_t({2, 4}, rng), w = rand_t({2, 4}, rng);
    static const std::vector<char> mask{1, 1, 0, 1};
    check_grads([&w](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::mul(ag::softmax_rows(v[0], &mask), ag::constant(w)));
    }, {x}, 1e-5);
}

TEST(Autograd, ShapeOps) {
    Rng rng(11);
    const Tensor a = rand_t({2, 6}, rng), b = rand_t({3, 6}, rng);
    check_grads([](const std::vector<ag::Var>& v) {
        ag::Var cat = ag::concat_axis0({v[0], v[1]});
        ag::Var sl = ag::slice_axis0(cat, 1, 4);
        return ag::mean_all(ag::reshape(sl, {9, 2}));
    }, {a, b});
    check_grads([](const std::vector<ag::Var>& v) {
        ag::Var head = ag::slice_axis0(v[1], 0, 2);
        ag::Var cols = ag::concat_cols({ag::slice_cols(v[0], 0, 3), ag::slice_cols(head, 2, 6)});
        return ag::mean_all(cols);
    }, {a, b});
}

TEST(Autograd, SwapAxes01) {
    Rng rng(12);
    const Tensor x = rand_t({2, 3, 2, 2}, rng);
    {
        ag::NoGradGuard ng;
        const Tensor y = ag::swap_axes01(ag::constant(x))->val;
        ASSERT_EQ(y.dim(0), 3);
        ASSERT_EQ(y.dim(1), 2);
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 3; ++b)
                for (int i = 0; i < 2; ++i)
                    for (int j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(y.at(b, a, i, j), x.at(a, b, i, j));
    }
    const Tensor w = rand_t({3, 2, 2, 2}, rng);
    check_grads([&w](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::mul(ag::swap_axes01(v[0]), ag::constant(w)));
    }, {x});
}

TEST(Autograd, Conv3dGrad) {
    Rng rng(13);
    const Tensor x = rand_t({2, 3, 4, 4}, rng), w = rand_t({2, 2, 2, 3, 3}, rng, 0.5),
                 b = rand_t({2}, rng);
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::conv3d(v[0], v[1], v[2], {1, 2, 2, 1, 1, 1}));
    }, {x, w, b}, 1e-5);
}

TEST(Autograd, Conv3dCausalPadding) {
    // temporal kernel 2, front pad 1: output frame t sees input frames <= t
    ag::NoGradGuard ng;
    Rng rng(14);
    Tensor x = rand_t({1, 4, 2, 2}, rng);
    const Tensor w = rand_t({1, 1, 2, 1, 1}, rng), b = Tensor({1});
    const Tensor y0 = ag::conv3d(ag::constant(x), ag::constant(w), ag::constant(b), {1, 1, 1, 1, 0, 0})->val;
    x.at(0, 3, 1, 1) += 10.0; // edit the last frame
    const Tensor y1 = ag::conv3d(ag::constant(x), ag::constant(w), ag::constant(b), {1, 1, 1, 1, 0, 0})->val;
    for (int t = 0; t < 3; ++t)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(y0.at(0, t, i, j), y1.at(0, t, i, j));
    EXPECT_NE(y0.at(0, 3, 1, 1), y1.at(0, 3, 1, 1));
}

TEST(Autograd, UpsampleNearest) {
    Rng rng(15);
    const Tensor x = rand_t({2, 2, 2, 2}, rng);
    {
        ag::NoGradGuard ng;
        const Tensor y = ag::upsample_nearest3d(ag::constant(x), 2, 2, 2)->val;
        ASSERT_EQ(y.dim(1), 4);
        EXPECT_DOUBLE_EQ(y.at(1, 3, 3, 2), x.at(1, 1, 1, 1));
        EXPECT_DOUBLE_EQ(y.at(0, 0, 1, 1), x.at(0, 0, 0, 0));
    }
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::upsample_nearest3d(v[0], 1, 2, 2));
    }, {x});
}

TEST(Autograd, TokenPipelineRoundTrip) {
    Rng rng(16);
    const Tensor x = rand_t({3, 2, 2, 2}, rng); // [d=3, N=2, Hp=2, Wp=2]
    {
        ag::NoGradGuard ng;
        const Tensor tok = ag::conv_out_to_tokens(ag::constant(x))->val;
        ASSERT_EQ(tok.dim(0), 8);
        ASSERT_EQ(tok.dim(1), 3);
        // token order is frame-major, then row, then column
        EXPECT_DOUBLE_EQ(tok.at(0, 0), x.at(0, 0, 0, 0));
        EXPECT_DOUBLE_EQ(tok.at(1, 2), x.at(2, 0, 0, 1));
        EXPECT_DOUBLE_EQ(tok.at(4, 1), x.at(1, 1, 0, 0));
    }
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::conv_out_to_tokens(v[0]));
    }, {x});

    const Tensor tok = rand_t({4, 8}, rng); // [N*Hp*Wp=4, p*p*C=8] with N=1,C=2,Hp=2,Wp=2,p=2
    {
        ag::NoGradGuard ng;
        const Tensor lat = ag::tokens_to_latent(ag::constant(tok), 1, 2, 2, 2, 2)->val;
        ASSERT_EQ(lat.dim(0), 1);
        ASSERT_EQ(lat.dim(1), 2);
        ASSERT_EQ(lat.dim(2), 4);
        ASSERT_EQ(lat.dim(3), 4);
        // token s=(i=0,j=1), channel c=1, offset (pi=1,pj=0) -> pixel (1, 2)
        EXPECT_DOUBLE_EQ(lat.at(0, 1, 1, 2), tok.at(1, (1 * 2 + 1) * 2 + 0));
    }
    check_grads([](const std::vector<ag::Var>& v) {
        return ag::mean_all(ag::tokens_to_latent(v[0], 1, 2, 2, 2, 2));
    }, {tok});
}

TEST(Autograd, Losses) {
    Rng rng(17);
    const Tensor pred = rand_t({2, 3}, rng), target = rand_t({2, 3}, rng);
    check_grads([&target](const std::vector<ag::Var>& v) {
        return ag::mse_loss(v[0], target, 1.3);
    }, {pred});

    const Tensor p4 = rand_t({2, 2, 3, 3}, rng), t4 = rand_t({2, 2, 3, 3}, rng);
    Tensor w({2, 3, 3});
    for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = 1.0 + 0.5 * rng.uniform();
    check_grads([&t4, &w](const std::vector<ag::Var>& v) {
        return ag::weighted_channel_mse(v[0], t4, w);
    }, {p4});
}

TEST(Autograd, NoGradSkipsTape) {
    ag::NoGradGuard ng;
    ag::Var a = ag::leaf(Tensor({2}, {1.0, 2.0}));
    ag::Var b = ag::scale(a, 2.0);
    EXPECT_TRUE(b->parents.empty());
}

TEST(Autograd, BackwardAccumulatesSharedNodes) {
    ag::Var a = ag::leaf(Tensor({1}, {3.0}));
    ag::Var y = ag::add(ag::mul(a, a), a); // y = a^2 + a, dy/da = 2a + 1 = 7
    ag::backward(y);
    EXPECT_NEAR(a->grad[0], 7.0, 1e-12);
}

// ---- image ----

TEST(Image, PgmRoundTrip) {
    Rng rng(18);
    Image img(5, 7);
    for (auto& p : img.pix) p = rng.uniform();
    img.quantize8();
    const auto path = std::filesystem::temp_directory_path() / "ska1_test_roundtrip.pgm";
    write_pgm(path, img);
    const Image back = read_pgm(path);
    ASSERT_EQ(back.h, img.h);
    ASSERT_EQ(back.w, img.w);
    for (std::size_t i = 0; i < img.pix.size(); ++i) EXPECT_DOUBLE_EQ(back.pix[i], img.pix[i]);
    std::filesystem::remove(path);
}

TEST(Image, Quantize8Idempotent) {
    Image img(2, 2);
    img.pix = {0.123456, 0.9999, 0.0, 0.5};
    Image once = img;
    once.quantize8();
    Image twice = once;
    twice.quantize8();
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(once.pix[static_cast<std::size_t>(i)], twice.pix[static_cast<std::size_t>(i)]);
}

TEST(Image, ResizeAreaConservesMass) {
    Rng rng(19);
    Tensor src({6, 8});
    double mass = 0.0;
    for (std::int64_t i = 0; i < src.numel(); ++i) {
        src[i] = rng.uniform();
        mass += src[i];
    }
    const Tensor dst = resize_area(src, 3, 4);
    double out_mass = 0.0;
    for (std::int64_t i = 0; i < dst.numel(); ++i) out_mass += dst[i];
    // each output cell averages a 2x2 block; total mass scales by area ratio
    EXPECT_NEAR(out_mass * 4.0, mass, 1e-9);
}

TEST(Image, ResizeAreaExactBoxAverage) {
    Tensor src({2, 2}, {1.0, 3.0, 5.0, 7.0});
    const Tensor dst = resize_area(src, 1, 1);
    EXPECT_NEAR(dst[0], 4.0, 1e-12);
}

TEST(Image, CropPadTopLeftAnchored) {
    Image src(4, 4, 0.0);
    src.at(1, 1) = 1.0;
    const Image out = crop_pad(src, RectI{1, 1, 3, 3}, 3, 3, 0.5);
    EXPECT_DOUBLE_EQ(out.at(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(out.at(2, 2), 0.5); // beyond the 2x2 source rect -> fill
}

TEST(Image, BilinearResizeConstant) {
    Image src(3, 5, 0.7);
    const Image out = resize_bilinear(src, 7, 2);
    for (double p : out.pix) EXPECT_NEAR(p, 0.7, 1e-12);
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    return RUN_ALL_TESTS();
}

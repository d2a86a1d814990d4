#pragma once

#include <string>
#include <vector>

#include "ska1/core/autograd.hpp"
#include "ska1/core/errors.hpp"
#include "ska1/core/image.hpp"
#include "ska1/core/rng.hpp"
#include "ska1/model/registry.hpp"
#include "ska1/model/stubs.hpp"

namespace ska1 {

struct ModelConfig {
    int latent_channels = 4; // C
    int latent_frames = 8;   // N
    int latent_h = 16;
    int latent_w = 16;
    int patch = 2;
    int dim = 128; // token width, shared with text tokens
    int heads = 4;
    int depth = 4; // DiT blocks
    int d_id = 64;
    int lm_channels = 4; // guider output channels
    int text_len = 4;
    int text_vocab = 256;
    int vae_hidden = 12;
    int guider_hidden = 8;
    int ffn_mult = 4;

    // fixed by the two stride-2 stages of the stub encoders
    int spatial_stride() const { return 4; }
    int temporal_stride() const { return 2; }
    int pixel_h() const { return latent_h * spatial_stride(); }
    int pixel_w() const { return latent_w * spatial_stride(); }
    int pixel_frames() const { return latent_frames * temporal_stride(); }
    int patches_h() const { return latent_h / patch; }
    int patches_w() const { return latent_w / patch; }
    int video_tokens() const { return latent_frames * patches_h() * patches_w(); }
    int prefix_tokens() const { return 1 + text_len; }

    void validate() const {
        if (dim % heads != 0) throw ConfigError("model: dim must be divisible by heads");
        if (dim % 2 != 0) throw ConfigError("model: dim must be even");
        if (latent_h % patch != 0 || latent_w % patch != 0)
            throw ConfigError("model: latent dims must be divisible by patch");
        if (latent_channels < 1 || latent_frames < 1 || depth < 1 || text_len < 1)
            throw ConfigError("model: non-positive dimension");
        if (pixel_frames() % temporal_stride() != 0) throw ConfigError("model: frame stride mismatch");
    }
};

// Standard sinusoidal embedding row.
inline Tensor sin_cos_embed(double pos, int d) {
    Tensor out({1, d});
    for (int i = 0; i < d / 2; ++i) {
        const double freq = std::exp(-std::log(10000.0) * (2.0 * i / d));
        out.at(0, 2 * i) = std::sin(pos * freq);
        out.at(0, 2 * i + 1) = std::cos(pos * freq);
    }
    return out;
}

inline Tensor video_to_tensor(const std::vector<Image>& frames) {
    if (frames.empty()) throw InputError("video_to_tensor: no frames");
    const int T = static_cast<int>(frames.size()), H = frames[0].h, W = frames[0].w;
    Tensor out({1, T, H, W});
    for (int t = 0; t < T; ++t) {
        if (frames[static_cast<std::size_t>(t)].h != H || frames[static_cast<std::size_t>(t)].w != W)
            throw ShapeError("video_to_tensor: frame dimensions vary");
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out.at(0, t, y, x) = frames[static_cast<std::size_t>(t)].at(y, x);
    }
    return out;
}

inline std::vector<Image> tensor_to_video(const Tensor& video) {
    if (video.rank() != 4 || video.dim(0) != 1) throw ShapeError("tensor_to_video needs [1,T,H,W]");
    std::vector<Image> frames;
    for (int t = 0; t < video.dim(1); ++t) {
        Image img(video.dim(2), video.dim(3));
        for (int y = 0; y < video.dim(2); ++y)
            for (int x = 0; x < video.dim(3); ++x) img.at(y, x) = std::clamp(video.at(0, t, y, x), 0.0, 1.0);
        frames.push_back(std::move(img));
    }
    return frames;
}

inline Tensor swap01_plain(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("swap01_plain needs rank 4");
    Tensor out({x.dim(1), x.dim(0), x.dim(2), x.dim(3)});
    for (int a = 0; a < x.dim(0); ++a)
        for (int b = 0; b < x.dim(1); ++b)
            for (int h = 0; h < x.dim(2); ++h)
                for (int w = 0; w < x.dim(3); ++w) out.at(b, a, h, w) = x.at(a, b, h, w);
    return out;
}

// Conditioning bundle for one clip. The unconditional variant swaps identity
// and text for the learned null token and zeroes the landmark latent.
struct Conditioning {
    ag::Var lm_latent;   // [C_lm, N, H', W']
    ag::Var id_token;    // [1, d]
    ag::Var text_tokens; // [text_len, d]
    std::vector<char> text_mask;
};

// The conditioned video denoiser plus its satellite encoders. All learnable
// tensors are registered into grouped storage at construction; forward paths
// read the registry vars so freezing/checkpointing see every weight.
class VideoModel {
public:
    ModelConfig cfg;
    ParameterRegistry reg;
    VisionStub vision;

    VideoModel(const ModelConfig& config, std::uint64_t init_seed) : cfg(config), vision(config.d_id) {
        cfg.validate();
        Rng root(init_seed);
        auto init = [&](const std::string& group, const std::string& name, std::vector<int> shape,
                        double std_dev) {
            Rng r = root.derive(group + "/" + name);
            Tensor t = std_dev == 0.0 ? Tensor(shape) : Tensor::randn(shape, r) * std_dev;
            return reg.add(group, name, std::move(t));
        };
        auto xavier = [](std::int64_t fan_in, std::int64_t fan_out) {
            return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
        };

        const int C = cfg.latent_channels, Clm = cfg.lm_channels, d = cfg.dim, p = cfg.patch;
        const int vh = cfg.vae_hidden, gh = cfg.guider_hidden;

        // vae stub: two strided causal convs + 1x1x1 latent head; mirrored decoder
        enc1_w_ = init("vae_stub", "enc1_w", {vh, 1, 3, 3, 3}, xavier(27, 27 * vh));
        enc1_b_ = init("vae_stub", "enc1_b", {vh}, 0.0);
        enc2_w_ = init("vae_stub", "enc2_w", {vh, vh, 3, 3, 3}, xavier(27 * vh, 27 * vh));
        enc2_b_ = init("vae_stub", "enc2_b", {vh}, 0.0);
        enc3_w_ = init("vae_stub", "enc3_w", {C, vh, 1, 1, 1}, xavier(vh, C));
        enc3_b_ = init("vae_stub", "enc3_b", {C}, 0.0);
        dec0_w_ = init("vae_stub", "dec0_w", {vh, C, 1, 1, 1}, xavier(C, vh));
        dec0_b_ = init("vae_stub", "dec0_b", {vh}, 0.0);
        dec1_w_ = init("vae_stub", "dec1_w", {vh, vh, 3, 3, 3}, xavier(27 * vh, 27 * vh));
        dec1_b_ = init("vae_stub", "dec1_b", {vh}, 0.0);
        dec2_w_ = init("vae_stub", "dec2_w", {vh, vh, 1, 3, 3}, xavier(9 * vh, 9 * vh));
        dec2_b_ = init("vae_stub", "dec2_b", {vh}, 0.0);
        dec3_w_ = init("vae_stub", "dec3_w", {1, vh, 1, 1, 1}, xavier(vh, 1));
        dec3_b_ = init("vae_stub", "dec3_b", {1}, 0.0);
        latent_scale_ = reg.add("vae_stub", "latent_scale", Tensor::full({1}, 1.0));

        // landmark guider: same causal topology, its own width and output channels
        g1_w_ = init("landmark_guider", "g1_w", {gh, 1, 3, 3, 3}, xavier(27, 27 * gh));
        g1_b_ = init("landmark_guider", "g1_b", {gh}, 0.0);
        g2_w_ = init("landmark_guider", "g2_w", {gh, gh, 3, 3, 3}, xavier(27 * gh, 27 * gh));
        g2_b_ = init("landmark_guider", "g2_b", {gh}, 0.0);
        g3_w_ = init("landmark_guider", "g3_w", {Clm, gh, 1, 1, 1}, xavier(gh, Clm));
        g3_b_ = init("landmark_guider", "g3_b", {Clm}, 0.0);

        patch_w_ = init("patch_embed_conv", "w", {d, C + Clm, 1, p, p}, xavier((C + Clm) * p * p, d));
        patch_b_ = init("patch_embed_conv", "b", {d}, 0.0);

        idp_w1_ = init("identity_projection", "w1", {d, cfg.d_id}, xavier(cfg.d_id, d));
        idp_b1_ = init("identity_projection", "b1", {d}, 0.0);
        idp_w2_ = init("identity_projection", "w2", {d, d}, xavier(d, d));
        idp_b2_ = init("identity_projection", "b2", {d}, 0.0);

        text_table_ = init("text_stub", "table", {cfg.text_vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)));

        t_w1_ = init("dit_blocks", "t_w1", {d, d}, xavier(d, d));
        t_b1_ = init("dit_blocks", "t_b1", {d}, 0.0);
        t_w2_ = init("dit_blocks", "t_w2", {d, d}, xavier(d, d));
        t_b2_ = init("dit_blocks", "t_b2", {d}, 0.0);
        null_token_ = init("dit_blocks", "null_token", {1, d}, 0.0);
        final_gamma_ = reg.add("dit_blocks", "final_gamma", Tensor::full({d}, 1.0));
        final_beta_ = init("dit_blocks", "final_beta", {d}, 0.0);

        const double resid = 1.0 / std::sqrt(2.0 * cfg.depth);
        const int dff = cfg.ffn_mult * d;
        blocks_.resize(static_cast<std::size_t>(cfg.depth));
        for (int i = 0; i < cfg.depth; ++i) {
            const std::string pre = "b" + std::to_string(i) + "_";
            Block& b = blocks_[static_cast<std::size_t>(i)];
            b.qkv_w = init("dit_blocks", pre + "qkv_w", {3 * d, d}, xavier(d, 3 * d));
            b.qkv_b = init("dit_blocks", pre + "qkv_b", {3 * d}, 0.0);
            b.o_w = init("dit_blocks", pre + "o_w", {d, d}, xavier(d, d) * resid);
            b.o_b = init("dit_blocks", pre + "o_b", {d}, 0.0);
            b.ff1_w = init("dit_blocks", pre + "ff1_w", {dff, d}, xavier(d, dff));
            b.ff1_b = init("dit_blocks", pre + "ff1_b", {dff}, 0.0);
            b.ff2_w = init("dit_blocks", pre + "ff2_w", {d, dff}, xavier(dff, d) * resid);
            b.ff2_b = init("dit_blocks", pre + "ff2_b", {d}, 0.0);
            // modulation starts as identity: zero shifts/scales, unit gates, so
            // gradients reach the prefix tokens from step one in every stage
            b.mod_w = init("dit_blocks", pre + "mod_w", {6 * d, d}, 0.0);
            Tensor mb({6 * d});
            for (int k = 0; k < d; ++k) {
                mb[2 * d + k] = 1.0; // gate after attention
                mb[5 * d + k] = 1.0; // gate after FFN
            }
            b.mod_b = reg.add("dit_blocks", pre + "mod_b", std::move(mb));
        }

        head_w_ = init("output_head", "w", {p * p * C, d}, xavier(d, p * p * C));
        head_b_ = init("output_head", "b", {p * p * C}, 0.0);

        // fixed positional table: per-axis sinusoids summed, video tokens only
        Tensor pe({cfg.video_tokens(), d});
        for (int n = 0; n < cfg.latent_frames; ++n)
            for (int i = 0; i < cfg.patches_h(); ++i)
                for (int j = 0; j < cfg.patches_w(); ++j) {
                    const int s = (n * cfg.patches_h() + i) * cfg.patches_w() + j;
                    const Tensor en = sin_cos_embed(n, d), ei = sin_cos_embed(i, d), ej = sin_cos_embed(j, d);
                    for (int k = 0; k < d; ++k) pe.at(s, k) = en.at(0, k) + ei.at(0, k) + ej.at(0, k);
                }
        pos_enc_ = ag::constant(std::move(pe));
        ln_gamma1_ = ag::constant(Tensor::full({d}, 1.0));
        ln_beta0_ = ag::constant(Tensor({d}));
    }

    // ---- VAE stub ----

    double latent_scale() const { return latent_scale_->val[0]; }
    void set_latent_scale(double s) { latent_scale_->val[0] = s; }

    // [1, T_px, H_px, W_px] -> [C, N, H', W']
    ag::Var vae_encode(const ag::Var& video) const {
        check_video_dims(video->val, "vae_encode");
        ag::Var h = ag::conv3d(video, enc1_w_, enc1_b_, {1, 2, 2, 2, 1, 1});
        h = ag::gelu(h);
        h = ag::conv3d(h, enc2_w_, enc2_b_, {2, 2, 2, 2, 1, 1});
        h = ag::gelu(h);
        h = ag::conv3d(h, enc3_w_, enc3_b_, {1, 1, 1, 0, 0, 0});
        return ag::scale(h, latent_scale());
    }

    // [C, N, H', W'] -> [1, T_px, H_px, W_px]
    ag::Var vae_decode(const ag::Var& latent) const {
        ag::Var h = ag::scale(latent, 1.0 / latent_scale());
        h = ag::conv3d(h, dec0_w_, dec0_b_, {1, 1, 1, 0, 0, 0});
        h = ag::gelu(h);
        h = ag::upsample_nearest3d(h, 2, 2, 2);
        h = ag::conv3d(h, dec1_w_, dec1_b_, {1, 1, 1, 2, 1, 1});
        h = ag::gelu(h);
        h = ag::upsample_nearest3d(h, 1, 2, 2);
        h = ag::conv3d(h, dec2_w_, dec2_b_, {1, 1, 1, 0, 1, 1});
        h = ag::gelu(h);
        return ag::conv3d(h, dec3_w_, dec3_b_, {1, 1, 1, 0, 0, 0});
    }

    // Plain-tensor conveniences for frozen-path use ([N,C,H',W'] outward layout).
    Tensor encode_frames(const std::vector<Image>& frames) const {
        ag::NoGradGuard ng;
        ag::Var v = ag::constant(video_to_tensor(frames));
        return swap01_plain(vae_encode(v)->val);
    }

    std::vector<Image> decode_latent(const Tensor& latent_nchw) const {
        ag::NoGradGuard ng;
        ag::Var v = ag::constant(swap01_plain(latent_nchw));
        return tensor_to_video(vae_decode(v)->val);
    }

    // ---- landmark guider ----

    // [1, T_px, H_px, W_px] rasterized landmark video -> [C_lm, N, H', W']
    ag::Var guider_encode(const ag::Var& lm_video) const {
        check_video_dims(lm_video->val, "guider_encode");
        ag::Var h = ag::conv3d(lm_video, g1_w_, g1_b_, {1, 2, 2, 2, 1, 1});
        h = ag::gelu(h);
        h = ag::conv3d(h, g2_w_, g2_b_, {2, 2, 2, 2, 1, 1});
        h = ag::gelu(h);
        return ag::conv3d(h, g3_w_, g3_b_, {1, 1, 1, 0, 0, 0});
    }

    // ---- conditioning ----

    ag::Var identity_project(const ag::Var& f_id) const {
        if (f_id->val.numel() != cfg.d_id) throw ShapeError("identity_project: expected dim " + std::to_string(cfg.d_id));
        ag::Var x = f_id->val.rank() == 2 ? f_id : ag::reshape(f_id, {1, cfg.d_id});
        ag::Var h = ag::linear(x, idp_w1_, idp_b1_);
        h = ag::gelu(h);
        return ag::linear(h, idp_w2_, idp_b2_);
    }

    // deterministic hash-vocabulary text embedding with padding mask
    std::pair<ag::Var, std::vector<char>> text_encode(const std::string& prompt) const {
        auto [ids, mask] = hash_tokenize(prompt, cfg.text_vocab, cfg.text_len);
        std::vector<ag::Var> rows;
        for (int i = 0; i < cfg.text_len; ++i) {
            if (mask[static_cast<std::size_t>(i)])
                rows.push_back(ag::slice_axis0(text_table_, ids[static_cast<std::size_t>(i)],
                                               ids[static_cast<std::size_t>(i)] + 1));
            else
                rows.push_back(ag::constant(Tensor({1, cfg.dim})));
        }
        return {ag::concat_axis0(rows), mask};
    }

    Conditioning make_conditioning(const ag::Var& lm_latent, const Tensor& f_id, const std::string& prompt) const {
        Conditioning c;
        c.lm_latent = lm_latent;
        c.id_token = identity_project(ag::constant(f_id));
        auto [tok, mask] = text_encode(prompt);
        c.text_tokens = tok;
        c.text_mask = std::move(mask);
        return c;
    }

    // Unconditional branch: learned null token stands in for identity and text;
    // the landmark latent is zeroed. Token counts match the conditional branch.
    Conditioning make_uncond_conditioning() const {
        Conditioning c;
        c.lm_latent = ag::constant(Tensor({cfg.lm_channels, cfg.latent_frames, cfg.latent_h, cfg.latent_w}));
        c.id_token = null_token_;
        c.text_tokens = ag::repeat_row(null_token_, cfg.text_len);
        c.text_mask.assign(static_cast<std::size_t>(cfg.text_len), 1);
        return c;
    }

    // ---- denoiser ----

    // x_t [N, C, H', W'] plus conditioning -> predicted noise, same shape.
    ag::Var eps_predict(const ag::Var& x_t, const Conditioning& cond, int t) const {
        const ModelConfig& m = cfg;
        if (x_t->val.rank() != 4 || x_t->val.dim(0) != m.latent_frames || x_t->val.dim(1) != m.latent_channels ||
            x_t->val.dim(2) != m.latent_h || x_t->val.dim(3) != m.latent_w)
            throw ShapeError("eps_predict: x_t shape " + x_t->val.shape_str());
        if (cond.lm_latent->val.dim(0) != m.lm_channels) throw ShapeError("eps_predict: lm latent channels");

        // channel concat (noise first, landmarks second), patchify, tokenize
        ag::Var xc = ag::swap_axes01(x_t); // [C, N, H', W']
        ag::Var joint = ag::concat_axis0({xc, cond.lm_latent});
        ag::Var conv = ag::conv3d(joint, patch_w_, patch_b_, {1, m.patch, m.patch, 0, 0, 0});
        ag::Var tokens = ag::conv_out_to_tokens(conv); // [S_video, d]
        tokens = ag::add(tokens, pos_enc_);

        ag::Var seq = ag::concat_axis0({cond.id_token, cond.text_tokens, tokens});
        std::vector<char> mask;
        mask.reserve(static_cast<std::size_t>(m.prefix_tokens() + m.video_tokens()));
        mask.push_back(1);
        mask.insert(mask.end(), cond.text_mask.begin(), cond.text_mask.end());
        mask.insert(mask.end(), static_cast<std::size_t>(m.video_tokens()), 1);

        // timestep embedding -> MLP; blocks modulate on its gelu
        ag::Var temb = ag::constant(sin_cos_embed(static_cast<double>(t), m.dim));
        temb = ag::linear(temb, t_w1_, t_b1_);
        temb = ag::gelu(temb);
        temb = ag::linear(temb, t_w2_, t_b2_);
        ag::Var tact = ag::gelu(temb);

        for (const Block& b : blocks_) seq = block_forward(seq, b, tact, mask);

        seq = ag::layernorm_rows(seq, final_gamma_, final_beta_);
        ag::Var video = ag::slice_axis0(seq, m.prefix_tokens(), m.prefix_tokens() + m.video_tokens());
        ag::Var out_tokens = ag::linear(video, head_w_, head_b_);
        return ag::tokens_to_latent(out_tokens, m.latent_frames, m.latent_channels, m.patches_h(),
                                    m.patches_w(), m.patch);
    }

private:
    struct Block {
        ag::Var qkv_w, qkv_b, o_w, o_b, ff1_w, ff1_b, ff2_w, ff2_b, mod_w, mod_b;
    };

    ag::Var enc1_w_, enc1_b_, enc2_w_, enc2_b_, enc3_w_, enc3_b_;
    ag::Var dec0_w_, dec0_b_, dec1_w_, dec1_b_, dec2_w_, dec2_b_, dec3_w_, dec3_b_;
    ag::Var latent_scale_;
    ag::Var g1_w_, g1_b_, g2_w_, g2_b_, g3_w_, g3_b_;
    ag::Var patch_w_, patch_b_;
    ag::Var idp_w1_, idp_b1_, idp_w2_, idp_b2_;
    ag::Var text_table_;
    ag::Var t_w1_, t_b1_, t_w2_, t_b2_, null_token_, final_gamma_, final_beta_;
    std::vector<Block> blocks_;
    ag::Var head_w_, head_b_;
    ag::Var pos_enc_, ln_gamma1_, ln_beta0_;

    void check_video_dims(const Tensor& v, const char* who) const {
        if (v.rank() != 4 || v.dim(0) != 1 || v.dim(1) != cfg.pixel_frames() || v.dim(2) != cfg.pixel_h() ||
            v.dim(3) != cfg.pixel_w())
            throw ShapeError(std::string(who) + ": expected [1," + std::to_string(cfg.pixel_frames()) + "," +
                             std::to_string(cfg.pixel_h()) + "," + std::to_string(cfg.pixel_w()) + "], got " +
                             v.shape_str());
    }

    ag::Var modulate(const ag::Var& x, const ag::Var& shift, const ag::Var& scale1p) const {
        return ag::add_rowvec(ag::mul_rowvec(x, ag::add_scalar(scale1p, 1.0)), shift);
    }

    ag::Var attention(const ag::Var& x, const Block& b, const std::vector<char>& mask) const {
        const int d = cfg.dim, h = cfg.heads, dh = d / h;
        ag::Var qkv = ag::linear(x, b.qkv_w, b.qkv_b); // [S, 3d]
        std::vector<ag::Var> head_outs;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int i = 0; i < h; ++i) {
            ag::Var q = ag::slice_cols(qkv, i * dh, (i + 1) * dh);
            ag::Var k = ag::slice_cols(qkv, d + i * dh, d + (i + 1) * dh);
            ag::Var v = ag::slice_cols(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh);
            ag::Var scores = ag::scale(ag::matmul_nt(q, k), inv_sqrt);
            ag::Var attn = ag::softmax_rows(scores, &mask);
            head_outs.push_back(ag::matmul(attn, v));
        }
        return ag::linear(ag::concat_cols(head_outs), b.o_w, b.o_b);
    }

    ag::Var block_forward(const ag::Var& seq, const Block& b, const ag::Var& tact,
                          const std::vector<char>& mask) const {
        const int d = cfg.dim;
        ag::Var mod = ag::linear(tact, b.mod_w, b.mod_b); // [1, 6d]
        ag::Var shift1 = ag::slice_cols(mod, 0, d);
        ag::Var scale1 = ag::slice_cols(mod, d, 2 * d);
        ag::Var gate1 = ag::slice_cols(mod, 2 * d, 3 * d);
        ag::Var shift2 = ag::slice_cols(mod, 3 * d, 4 * d);
        ag::Var scale2 = ag::slice_cols(mod, 4 * d, 5 * d);
        ag::Var gate2 = ag::slice_cols(mod, 5 * d, 6 * d);

        ag::Var x1 = modulate(ag::layernorm_rows(seq, ln_gamma1_, ln_beta0_), shift1, scale1);
        ag::Var s1 = ag::add(seq, ag::mul_rowvec(attention(x1, b, mask), gate1));
        ag::Var x2 = modulate(ag::layernorm_rows(s1, ln_gamma1_, ln_beta0_), shift2, scale2);
        ag::Var ff = ag::linear(ag::gelu(ag::linear(x2, b.ff1_w, b.ff1_b)), b.ff2_w, b.ff2_b);
        return ag::add(s1, ag::mul_rowvec(ff, gate2));
    }
};

} // namespace ska1

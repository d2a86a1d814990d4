#pragma once

#include <functional>
#include <vector>

#include "ska1/core/errors.hpp"
#include "ska1/core/rng.hpp"
#include "ska1/core/tensor.hpp"

namespace ska1 {

struct DiffusionConfig {
    int T = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    double loss_weight = 1.0; // w in the noise objective
    double cfg_scale = 3.0;
    int sampler_steps = 50;

    void validate() const {
        if (T < 1) throw ConfigError("diffusion: T must be >= 1");
        if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
            throw ConfigError("diffusion: need 0 < beta_min <= beta_max < 1");
        if (sampler_steps < 1 || sampler_steps > T) throw ConfigError("diffusion: sampler_steps must be in [1, T]");
    }
};

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas_bar;
    std::vector<double> posterior_var; // beta_tilde_t
};

// Linear beta schedule plus the derived cumulative products and posterior
// variances. T=1 degenerates to the single point beta_min.
inline NoiseSchedule make_schedule(const DiffusionConfig& cfg) {
    cfg.validate();
    NoiseSchedule s;
    s.T = cfg.T;
    s.betas.resize(static_cast<std::size_t>(cfg.T));
    s.alphas_bar.resize(static_cast<std::size_t>(cfg.T));
    s.posterior_var.resize(static_cast<std::size_t>(cfg.T));
    double abar = 1.0;
    for (int t = 0; t < cfg.T; ++t) {
        const double frac = cfg.T == 1 ? 0.0 : static_cast<double>(t) / (cfg.T - 1);
        const double beta = cfg.beta_min + (cfg.beta_max - cfg.beta_min) * frac;
        const double abar_prev = abar;
        abar *= 1.0 - beta;
        s.betas[static_cast<std::size_t>(t)] = beta;
        s.alphas_bar[static_cast<std::size_t>(t)] = abar;
        s.posterior_var[static_cast<std::size_t>(t)] = (1.0 - abar_prev) / (1.0 - abar) * beta;
    }
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "add_noise");
    if (t < 0 || t >= sched.T) throw InputError("add_noise: t out of range");
    const double a = std::sqrt(sched.alphas_bar[static_cast<std::size_t>(t)]);
    const double b = std::sqrt(1.0 - sched.alphas_bar[static_cast<std::size_t>(t)]);
    Tensor out(x0.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

// w * mean((eps_true - eps_pred)^2), accumulated in double
inline double noise_loss(const Tensor& eps_true, const Tensor& eps_pred, double w = 1.0) {
    require_same_shape(eps_true, eps_pred, "noise_loss");
    double acc = 0.0;
    for (std::int64_t i = 0; i < eps_true.numel(); ++i) {
        const double d = eps_true[i] - eps_pred[i];
        acc += d * d;
    }
    return w * acc / static_cast<double>(eps_true.numel());
}

// eps_uncond + s * (eps_cond - eps_uncond); s==1 / s==0 short-circuit so the
// trivial scales are bit-exact copies of their branch.
inline Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s) {
    require_same_shape(eps_uncond, eps_cond, "cfg_combine");
    if (s == 1.0) return eps_cond;
    if (s == 0.0) return eps_uncond;
    Tensor out(eps_uncond.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = eps_uncond[i] + s * (eps_cond[i] - eps_uncond[i]);
    return out;
}

// Leading-spaced step subsequence {0, T/steps, 2T/steps, ...}, ascending.
inline std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw InputError("ddim_timesteps: steps must be in [1, T]");
    const int stride = T / steps;
    std::vector<int> taus(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) taus[static_cast<std::size_t>(i)] = i * stride;
    return taus;
}

using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t)>;

// Deterministic (eta = 0) DDIM walk over an explicit ascending tau
// subsequence, starting from x_init treated as x at the largest tau. A
// single-element tau list performs one inversion step and returns the x0
// estimate directly.
inline Tensor ddim_sample_core(const NoisePredictor& model, const NoiseSchedule& sched,
                               const std::vector<int>& taus, const Tensor& x_init) {
    if (taus.empty()) throw SamplingError("ddim: empty timestep list");
    for (std::size_t i = 0; i < taus.size(); ++i) {
        if (taus[i] < 0 || taus[i] >= sched.T) throw SamplingError("ddim: tau out of schedule range");
        if (i > 0 && taus[i] <= taus[i - 1]) throw SamplingError("ddim: taus must be strictly ascending");
    }
    Tensor x = x_init;
    for (std::size_t i = taus.size(); i-- > 0;) {
        const int t = taus[i];
        const double abar = sched.alphas_bar[static_cast<std::size_t>(t)];
        Tensor eps = model(x, t);
        if (eps.shape() != x.shape())
            throw SamplingError("ddim: model output shape " + eps.shape_str() + " != state " + x.shape_str());
        if (!eps.all_finite()) throw SamplingError("ddim: non-finite model output at t=" + std::to_string(t));
        const double sq_ab = std::sqrt(abar);
        const double sq_1mab = std::sqrt(1.0 - abar);
        Tensor x0(x.shape());
        for (std::int64_t k = 0; k < x.numel(); ++k) x0[k] = (x[k] - sq_1mab * eps[k]) / sq_ab;
        if (i == 0) {
            x = std::move(x0);
        } else {
            const double abar_prev = sched.alphas_bar[static_cast<std::size_t>(taus[i - 1])];
            const double a = std::sqrt(abar_prev);
            const double b = std::sqrt(1.0 - abar_prev);
            for (std::int64_t k = 0; k < x.numel(); ++k) x[k] = a * x0[k] + b * eps[k];
        }
    }
    return x;
}

// Full sampler: seeds x at the largest leading-spaced tau from a labeled RNG
// stream and walks down to the x0 estimate. With cfg_scale != 1 each step
// evaluates both branches and blends; scale 1 calls only the conditional.
inline Tensor ddim_sample(const NoisePredictor& cond_model, const NoisePredictor& uncond_model,
                          double cfg_scale, const NoiseSchedule& sched, int steps,
                          const std::vector<int>& shape, std::uint64_t seed) {
    Rng rng = Rng(seed).derive("ddim_init");
    Tensor x = Tensor::randn(shape, rng);
    const std::vector<int> taus = ddim_timesteps(sched.T, steps);
    NoisePredictor model;
    if (cfg_scale == 1.0 || !uncond_model) {
        model = cond_model;
    } else {
        model = [&](const Tensor& xt, int t) {
            Tensor eu = uncond_model(xt, t);
            Tensor ec = cond_model(xt, t);
            return cfg_combine(eu, ec, cfg_scale);
        };
    }
    return ddim_sample_core(model, sched, taus, x);
}

} // namespace ska1

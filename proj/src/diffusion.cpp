#include "gf/diffusion.hpp"

#include <cmath>

namespace gf::diffusion {

using nn::Tensor;

Schedule build_schedule(int T, double beta_min, double beta_max) {
    if (T < 2) throw Error(ErrKind::config, "schedule needs T >= 2");
    if (!(beta_min > 0) || !(beta_max > beta_min) || !(beta_max < 1))
        throw Error(ErrKind::config, "schedule needs 0 < beta_min < beta_max < 1");
    Schedule s;
    s.T = T;
    s.beta.assign(size_t(T) + 1, 0.0);
    s.alpha.assign(size_t(T) + 1, 1.0);
    s.alpha_bar.assign(size_t(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        s.beta[size_t(t)] = beta_min + (beta_max - beta_min) * double(t - 1) / double(T - 1);
        s.alpha[size_t(t)] = 1.0 - s.beta[size_t(t)];
        s.alpha_bar[size_t(t)] = s.alpha_bar[size_t(t) - 1] * s.alpha[size_t(t)];
    }
    return s;
}

std::vector<int> strided_timesteps(int T, int num_steps) {
    if (num_steps < 2 || num_steps > T)
        throw Error(ErrKind::config, "num_steps must be in [2, T]");
    std::vector<int> ts(static_cast<size_t>(num_steps), 0);
    for (int i = 0; i < num_steps; ++i) {
        const double pos = double(T) - double(i) * double(T - 1) / double(num_steps - 1);
        ts[size_t(i)] = int(std::lround(pos));
    }
    ts.front() = T;
    ts.back() = 1;
    for (size_t i = 1; i < ts.size(); ++i)
        if (ts[i] >= ts[i - 1])
            throw Error(ErrKind::internal, "strided timesteps must be strictly decreasing");
    return ts;
}

static void check_t(const Schedule& s, int t) {
    if (t < 1 || t > s.T)
        throw Error(ErrKind::validation, "timestep " + std::to_string(t) + " outside [1," +
                                             std::to_string(s.T) + "]");
}

Tensor forward_corrupt(const Tensor& z0, int t, const Tensor& eps, const Schedule& s) {
    check_t(s, t);
    if (!z0.same_shape(eps))
        throw Error(ErrKind::validation, "forward_corrupt: noise shape mismatch");
    const double a = std::sqrt(s.alpha_bar[size_t(t)]);
    const double b = std::sqrt(1.0 - s.alpha_bar[size_t(t)]);
    Tensor out = z0;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * z0.v[i] + b * eps.v[i];
    return out;
}

Tensor cfg_combine(const Tensor& eps_u, const Tensor& eps_c, double omega) {
    if (!eps_u.same_shape(eps_c))
        throw Error(ErrKind::validation, "cfg_combine: shape mismatch");
    Tensor out = eps_u;
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = eps_u.v[i] + omega * (eps_c.v[i] - eps_u.v[i]);
    return out;
}

Tensor ddpm_step(const Tensor& x, const Tensor& eps_hat, int t, int t_prev, const Schedule& s,
                 Rng& rng) {
    check_t(s, t);
    if (t_prev < 0 || t_prev >= t)
        throw Error(ErrKind::validation, "ddpm_step needs 0 <= t_prev < t");
    if (!x.same_shape(eps_hat))
        throw Error(ErrKind::validation, "ddpm_step: eps shape mismatch");
    const double abar_t = s.alpha_bar[size_t(t)];
    const double abar_p = s.alpha_bar[size_t(t_prev)];
    const double a_eff = abar_t / abar_p;
    const double inv_sqrt_a = 1.0 / std::sqrt(a_eff);
    const double eps_coef = (1.0 - a_eff) / std::sqrt(1.0 - abar_t);
    const double var = (1.0 - abar_p) / (1.0 - abar_t) * (1.0 - a_eff);
    const double sigma = var > 0 ? std::sqrt(var) : 0.0;

    Tensor out = x;
    for (size_t i = 0; i < out.v.size(); ++i) {
        double mean = inv_sqrt_a * (x.v[i] - eps_coef * eps_hat.v[i]);
        out.v[i] = sigma > 0 ? mean + sigma * rng.normal() : mean;
    }
    return out;
}

Tensor randn_tensor(const std::vector<int>& shape, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.v) v = rng.normal();
    return t;
}

Tensor sample_loop(const Schedule& s, int num_steps, const std::vector<int>& shape, Rng& rng,
                   const EpsFn& eps_fn, const CompositeFn& composite, const Tensor* x_init) {
    if (!eps_fn) throw Error(ErrKind::internal, "sample_loop needs an eps function");
    const auto ts = strided_timesteps(s.T, num_steps);
    Tensor x = x_init ? *x_init : randn_tensor(shape, rng);
    if (x.dims != shape)
        throw Error(ErrKind::validation, "sample_loop: x_init shape mismatch");
    for (size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        Tensor eps = eps_fn(x, t);
        x = ddpm_step(x, eps, t, t_prev, s, rng);
        if (composite) composite(x, t_prev);
    }
    return x;
}

Tensor inpaint_known_mix(const Tensor& x, const Tensor& known, const Tensor& region, int t_prev,
                         const Schedule& s, Rng& rng) {
    if (!x.same_shape(known))
        throw Error(ErrKind::validation, "inpaint mix: known shape mismatch");
    if (region.ndim() != 4 || region.dim(0) != x.dim(0) || region.dim(1) != 1 ||
        region.dim(2) != x.dim(2) || region.dim(3) != x.dim(3))
        throw Error(ErrKind::validation, "inpaint mix: region must be (B,1,H,W)");
    Tensor known_t = known;
    if (t_prev > 0) {
        Tensor eps = randn_tensor(known.dims, rng);
        known_t = forward_corrupt(known, t_prev, eps, s);
    }
    const int B = x.dim(0), C = x.dim(1);
    const size_t S = size_t(x.dim(2)) * x.dim(3);
    Tensor out = x;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const size_t base = (size_t(b) * C + c) * S;
            const double* m = region.v.data() + size_t(b) * S;
            for (size_t i = 0; i < S; ++i)
                out.v[base + i] = m[i] * x.v[base + i] + (1.0 - m[i]) * known_t.v[base + i];
        }
    return out;
}

}  // namespace gf::diffusion

#pragma once

#include <functional>
#include <vector>

#include "gf/core.hpp"
#include "gf/nn.hpp"

namespace gf::diffusion {

// DDPM with a linear beta schedule and epsilon parameterization. Sampling
// walks an evenly strided subsequence of timesteps; the posterior uses the
// effective alpha between visited steps so any stride count is consistent.

struct Schedule {
    int T = 0;
    // Indexed 1..T; index 0 holds the conventions beta=0, alpha=1, alpha_bar=1.
    std::vector<double> beta, alpha, alpha_bar;
};

Schedule build_schedule(int T, double beta_min = 1e-4, double beta_max = 0.02);

// num_steps evenly spaced timesteps from T down to 1 inclusive, strictly
// decreasing. num_steps must be in [2, T].
std::vector<int> strided_timesteps(int T, int num_steps);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
nn::Tensor forward_corrupt(const nn::Tensor& z0, int t, const nn::Tensor& eps, const Schedule& s);

// eps_u + omega * (eps_c - eps_u)
nn::Tensor cfg_combine(const nn::Tensor& eps_u, const nn::Tensor& eps_c, double omega);

// One ancestral step from t to t_prev (t_prev = 0 finishes with no noise).
nn::Tensor ddpm_step(const nn::Tensor& x, const nn::Tensor& eps_hat, int t, int t_prev,
                     const Schedule& s, Rng& rng);

using EpsFn = std::function<nn::Tensor(const nn::Tensor& x, int t)>;
using CompositeFn = std::function<void(nn::Tensor& x, int t_prev)>;

// Full sampling loop. Starts from x_init if given (e.g. a corrupted known
// image) else standard normal noise. The composite hook runs after every
// step at the new noise level t_prev.
nn::Tensor sample_loop(const Schedule& s, int num_steps, const std::vector<int>& shape, Rng& rng,
                       const EpsFn& eps_fn, const CompositeFn& composite = nullptr,
                       const nn::Tensor* x_init = nullptr);

// Known-region replacement for inpainting: keeps x where region == 1 and
// substitutes the known content, forward-corrupted to level t_prev, where
// region == 0. region is (B,1,H,W) and broadcasts over channels.
nn::Tensor inpaint_known_mix(const nn::Tensor& x, const nn::Tensor& known,
                             const nn::Tensor& region, int t_prev, const Schedule& s, Rng& rng);

// Standard normal tensor from the given stream.
nn::Tensor randn_tensor(const std::vector<int>& shape, Rng& rng);

}  // namespace gf::diffusion

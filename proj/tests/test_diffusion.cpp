#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "gf/diffusion.hpp"

using namespace gf;
using namespace gf::diffusion;
using nn::Tensor;

TEST_CASE("schedule endpoints and monotonicity") {
    Schedule s = build_schedule(200, 1e-4, 0.02);
    CHECK(s.T == 200);
    CHECK(s.beta[1] == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.beta[200] == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(s.alpha_bar[0] == 1.0);
    for (int t = 1; t <= 200; ++t) {
        CHECK(s.alpha[t] == doctest::Approx(1.0 - s.beta[t]));
        CHECK(s.alpha_bar[t] > 0.0);
        CHECK(s.alpha_bar[t] < 1.0);
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
    CHECK_THROWS_AS((void)build_schedule(1), Error);
    CHECK_THROWS_AS((void)build_schedule(100, 0.02, 1e-4), Error);
}

TEST_CASE("strided timesteps hit both ends") {
    auto ts = strided_timesteps(200, 50);
    REQUIRE(ts.size() == 50);
    CHECK(ts.front() == 200);
    CHECK(ts.back() == 1);
    for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);

    auto two = strided_timesteps(200, 2);
    CHECK(two == std::vector<int>({200, 1}));

    auto all = strided_timesteps(10, 10);
    CHECK(all == std::vector<int>({10, 9, 8, 7, 6, 5, 4, 3, 2, 1}));

    CHECK_THROWS_AS((void)strided_timesteps(200, 1), Error);
    CHECK_THROWS_AS((void)strided_timesteps(200, 201), Error);
}

TEST_CASE("forward corruption formula") {
    Schedule s = build_schedule(100);
    Tensor z0({2, 3});
    Tensor eps({2, 3});
    Rng r(7);
    for (auto& v : z0.v) v = r.normal();
    for (auto& v : eps.v) v = r.normal();
    const int t = 37;
    Tensor zt = forward_corrupt(z0, t, eps, s);
    for (size_t i = 0; i < zt.v.size(); ++i) {
        const double want =
            std::sqrt(s.alpha_bar[t]) * z0.v[i] + std::sqrt(1 - s.alpha_bar[t]) * eps.v[i];
        CHECK(zt.v[i] == doctest::Approx(want).epsilon(1e-14));
    }
    CHECK_THROWS_AS((void)forward_corrupt(z0, 0, eps, s), Error);
    CHECK_THROWS_AS((void)forward_corrupt(z0, 101, eps, s), Error);
}

TEST_CASE("cfg combine blends predictions") {
    Tensor u({4}), c({4});
    for (int i = 0; i < 4; ++i) {
        u.v[i] = i;
        c.v[i] = 2 * i + 1;
    }
    CHECK(cfg_combine(u, c, 0.0).v == u.v);
    CHECK(cfg_combine(u, c, 1.0).v == c.v);
    Tensor g = cfg_combine(u, c, 7.5);
    for (int i = 0; i < 4; ++i)
        CHECK(g.v[i] == doctest::Approx(u.v[i] + 7.5 * (c.v[i] - u.v[i])));
}

TEST_CASE("final ddpm step inverts the corruption") {
    Schedule s = build_schedule(200);
    Rng r(3);
    Tensor z0({1, 1, 4, 4});
    for (auto& v : z0.v) v = r.uniform() * 2 - 1;
    for (int t : {1, 50, 200}) {
        Tensor eps({1, 1, 4, 4});
        for (auto& v : eps.v) v = r.normal();
        Tensor xt = forward_corrupt(z0, t, eps, s);
        Rng noise(9);
        Tensor back = ddpm_step(xt, eps, t, 0, s, noise);
        for (size_t i = 0; i < back.v.size(); ++i)
            CHECK(back.v[i] == doctest::Approx(z0.v[i]).epsilon(1e-10));
    }
    Rng noise(9);
    Tensor eps({1, 1, 4, 4});
    CHECK_THROWS_AS((void)ddpm_step(z0, eps, 10, 10, s, noise), Error);
    CHECK_THROWS_AS((void)ddpm_step(z0, eps, 10, 11, s, noise), Error);
}

TEST_CASE("intermediate step noise has posterior scale") {
    Schedule s = build_schedule(200);
    const int t = 200, tp = 100;
    const double a_eff = s.alpha_bar[t] / s.alpha_bar[tp];
    const double want_var = (1 - s.alpha_bar[tp]) / (1 - s.alpha_bar[t]) * (1 - a_eff);
    Tensor x({1, 1, 64, 64});
    Tensor eps({1, 1, 64, 64});
    Rng noise(11);
    Tensor out = ddpm_step(x, eps, t, tp, s, noise);
    double sq = 0;
    for (double v : out.v) sq += v * v;
    const double got_var = sq / double(out.v.size());
    CHECK(got_var == doctest::Approx(want_var).epsilon(0.08));
}

TEST_CASE("oracle denoiser reconstructs the target") {
    Schedule s = build_schedule(200);
    Rng r(21);
    Tensor z0({1, 1, 8, 8});
    for (auto& v : z0.v) v = r.uniform() * 2 - 1;

    auto oracle = [&](const Tensor& x, int t) {
        Tensor e = x;
        const double a = std::sqrt(s.alpha_bar[t]);
        const double b = std::sqrt(1 - s.alpha_bar[t]);
        for (size_t i = 0; i < e.v.size(); ++i) e.v[i] = (x.v[i] - a * z0.v[i]) / b;
        return e;
    };

    Rng noise(5);
    Tensor out = sample_loop(s, 50, {1, 1, 8, 8}, noise, oracle);
    double worst = 0;
    for (size_t i = 0; i < out.v.size(); ++i)
        worst = std::max(worst, std::abs(out.v[i] - z0.v[i]));
    CHECK(worst <= 1e-4);

    // same seed, same trajectory
    Rng noise2(5);
    Tensor out2 = sample_loop(s, 50, {1, 1, 8, 8}, noise2, oracle);
    CHECK(out.v == out2.v);

    // explicit x_init path
    Rng noise3(6);
    Tensor xT = forward_corrupt(z0, 200, randn_tensor({1, 1, 8, 8}, noise3), s);
    Tensor out3 = sample_loop(s, 25, {1, 1, 8, 8}, noise3, oracle, nullptr, &xT);
    worst = 0;
    for (size_t i = 0; i < out3.v.size(); ++i)
        worst = std::max(worst, std::abs(out3.v[i] - z0.v[i]));
    CHECK(worst <= 1e-4);
}

TEST_CASE("composite hook runs at each visited level") {
    Schedule s = build_schedule(100);
    std::vector<int> seen;
    auto eps_fn = [](const Tensor& x, int) { return Tensor(x.dims); };
    auto hook = [&](Tensor&, int tp) { seen.push_back(tp); };
    Rng noise(1);
    (void)sample_loop(s, 5, {1, 1, 2, 2}, noise, eps_fn, hook);
    auto ts = strided_timesteps(100, 5);
    REQUIRE(seen.size() == 5);
    for (size_t i = 0; i + 1 < ts.size(); ++i) CHECK(seen[i] == ts[i + 1]);
    CHECK(seen.back() == 0);
}

TEST_CASE("inpaint mix replaces only the known region") {
    Schedule s = build_schedule(100);
    Tensor x({1, 2, 2, 2}, 5.0);
    Tensor known({1, 2, 2, 2}, -1.0);
    Tensor region({1, 1, 2, 2});
    region.v = {1, 0, 1, 0};  // regenerate left column, keep right known
    Rng noise(2);
    Tensor out = inpaint_known_mix(x, known, region, 0, s, noise);
    CHECK(out.v[0] == 5.0);
    CHECK(out.v[1] == -1.0);
    CHECK(out.v[2] == 5.0);
    CHECK(out.v[3] == -1.0);
    // channel 2 uses the same region
    CHECK(out.v[4] == 5.0);
    CHECK(out.v[5] == -1.0);

    // at t_prev > 0 the known part is corrupted, not copied
    Rng noise2(3);
    Tensor out2 = inpaint_known_mix(x, known, region, 50, s, noise2);
    CHECK(out2.v[1] != -1.0);
    CHECK(out2.v[0] == 5.0);

    Tensor bad({1, 2, 2, 1});
    Rng noise3(4);
    CHECK_THROWS_AS((void)inpaint_known_mix(x, known, bad, 0, s, noise3), Error);
}

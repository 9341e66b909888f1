/*
   Copyright 2026 The fmint-sde Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "fmint/sde_systems.hpp"

namespace fmint {
namespace {

TEST(Registry, HasThirteenSystems) {
    std::set<std::string> names;
    for (const auto& s : registry()) names.insert(std::string(s.name()));
    const std::set<std::string> want{"gbm",
                                     "mueller",
                                     "periodic_oscillator",
                                     "stochastic_lorenz",
                                     "ou",
                                     "inhomogeneous_ou",
                                     "double_well",
                                     "coupled_double_well",
                                     "duffing",
                                     "perturbed_limit_cycle",
                                     "predator_prey",
                                     "predator_prey_variant",
                                     "fluxgate"};
    EXPECT_EQ(names, want);
}

TEST(Registry, InvariantsHold) {
    for (const auto& s : registry()) {
        SCOPED_TRACE(std::string(s.name()));
        EXPECT_NO_THROW(validate(s));
        EXPECT_LE(s.state_dim, 3);
        EXPECT_GE(s.stride_k, 2);
        EXPECT_GT(s.dt_fine, 0.0);
        EXPECT_EQ(static_cast<int>(s.ic_box.size()), s.state_dim);
        for (const auto& r : s.param_spec) EXPECT_LE(r.lower, r.upper);
    }
    EXPECT_EQ(get_system(SystemId::fluxgate).state_dim, 3);
    EXPECT_EQ(get_system(SystemId::fluxgate).sim_dim, 6);
    EXPECT_EQ(get_system(SystemId::mueller).dt_fine, 1e-5);
    EXPECT_EQ(get_system(SystemId::mueller).stride_k, 100);
}

TEST(Registry, UnknownIdThrows) { EXPECT_THROW(get_system("nope"), std::invalid_argument); }

TEST(Registry, JsonRoundTrip) {
    const auto back = registry_from_json(registry_to_json());
    ASSERT_EQ(back.size(), registry().size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(to_json(back[i]), to_json(registry()[i]));
    }
}

TEST(Drift, GbmExample) {
    const auto& s = get_system(SystemId::gbm);
    const auto p = make_params(s, {{"mu", 0.1}, {"sigma", 0.2}});
    const double x[1] = {2.0};
    EXPECT_NEAR(drift(s, p, x, 0.0)[0], 0.2, 1e-15);
}

TEST(Drift, OuVanishesAtMean) {
    const auto& s = get_system(SystemId::ou);
    const auto p = make_params(s, {{"theta", 0.5}, {"mu", 3.0}, {"sigma", 0.2}});
    const double x[1] = {3.0};
    EXPECT_EQ(drift(s, p, x, 0.0)[0], 0.0);
}

TEST(Drift, LorenzExample) {
    const auto& s = get_system(SystemId::stochastic_lorenz);
    const auto p = make_params(s, {{"sigma", 10.0}, {"rho", 28.0}, {"beta", 8.0 / 3.0}});
    const double x[3] = {1.0, 1.0, 1.0};
    const auto b = drift(s, p, x, 0.0);
    EXPECT_NEAR(b[0], 0.0, 1e-14);
    EXPECT_NEAR(b[1], 26.0, 1e-14);
    EXPECT_NEAR(b[2], 1.0 - 8.0 / 3.0, 1e-14);
}

TEST(Drift, NonFiniteInputRejected) {
    const auto& s = get_system(SystemId::gbm);
    const double x[1] = {std::nan("")};
    EXPECT_THROW(drift(s, default_params(s), x, 0.0), std::domain_error);
}

TEST(Diffusion, GbmExample) {
    const auto& s = get_system(SystemId::gbm);
    const auto p = make_params(s, {{"mu", 0.1}, {"sigma", 0.2}});
    const double x[1] = {5.0};
    EXPECT_NEAR(diffusion(s, p, x, 0.0)(0, 0), 1.0, 1e-15);
}

TEST(Diffusion, MuellerIsScaledIdentity) {
    const auto& s = get_system(SystemId::mueller);
    const auto p = make_params(s, {{"beta", 2.0}});
    for (double a : {-0.3, 0.0, 0.7}) {
        const double x[2] = {a, 1.0 - a};
        const Matrix m = diffusion(s, p, x, 0.0);
        EXPECT_NEAR(m(0, 0), 1.0, 1e-15);
        EXPECT_NEAR(m(1, 1), 1.0, 1e-15);
        EXPECT_EQ(m(0, 1), 0.0);
        EXPECT_EQ(m(1, 0), 0.0);
    }
}

TEST(Diffusion, PeriodicOscillatorExample) {
    const auto& s = get_system(SystemId::periodic_oscillator);
    const auto p = make_params(s, {{"sigma", 1.0}, {"omega", 2.0 * std::numbers::pi}});
    const double x[2] = {1.0, 2.0};
    const Matrix m = diffusion(s, p, x, 0.0);
    EXPECT_NEAR(m(0, 0), 2.0, 1e-14);
    EXPECT_NEAR(m(1, 0), 4.0, 1e-14);
}

TEST(Mueller, BaseConstants) {
    const MuellerShape sh;
    EXPECT_EQ(sh.D, (std::array<double, 4>{-200.0, -100.0, -170.0, 15.0}));
}

TEST(Mueller, DirectFourTermSum) {
    // Independent evaluation of sum_i D_i exp(a_i dx^2 + b_i dx dy + c_i dy^2) at (1, 0).
    const double a[4] = {-1, -1, -6.5, 0.7}, b[4] = {0, 0, 11, 0.6}, c[4] = {-10, -10, -6.5, 0.7};
    const double D[4] = {-200, -100, -170, 15}, X[4] = {1, 0, -0.5, -1}, Y[4] = {0, 0.5, 1.5, 1};
    double want = 0.0;
    for (int i = 0; i < 4; ++i) {
        const double dx = 1.0 - X[i], dy = 0.0 - Y[i];
        want += D[i] * std::exp(a[i] * dx * dx + b[i] * dx * dy + c[i] * dy * dy);
    }
    const auto v = mueller_potential(1.0, 0.0, MuellerShape{});
    EXPECT_NEAR(v.value, want, 1e-12);
    // -200 from the first well plus 15 e^2.3 from the shallow fourth term.
    EXPECT_NEAR(v.value, -200.0 - 100.0 * std::exp(-3.5) + 15.0 * std::exp(2.3), 0.01);
}

TEST(Mueller, GradientMatchesFiniteDifferences) {
    CounterRng rng(42);
    MuellerShape sh;
    sh.a_scale = 1.1;
    sh.D_scale = 0.9;
    sh.X_shift = 0.05;
    for (int trial = 0; trial < 20; ++trial) {
        const double x = rng.uniform(-1.5, 1.0), y = rng.uniform(-0.5, 2.0);
        const auto v = mueller_potential(x, y, sh);
        const double h = 1e-5;
        const double gx = (mueller_potential(x + h, y, sh).value - mueller_potential(x - h, y, sh).value) / (2 * h);
        const double gy = (mueller_potential(x, y + h, sh).value - mueller_potential(x, y - h, sh).value) / (2 * h);
        EXPECT_LT(std::abs(v.gradient[0] - gx), 1e-6 * std::max(1.0, std::abs(gx)));
        EXPECT_LT(std::abs(v.gradient[1] - gy), 1e-6 * std::max(1.0, std::abs(gy)));
    }
}

TEST(Mueller, IdentityScaling) {
    MuellerShape sh;
    const auto base = mueller_potential(0.3, 0.4, sh);
    const auto& s = get_system(SystemId::mueller);
    const auto p = make_params(s, {{"a_scale", 1.0}, {"b_scale", 1.0}, {"c_scale", 1.0}, {"D_scale", 1.0},
                                   {"X_shift", 0.0}, {"Y_shift", 0.0}, {"beta", 1.0}});
    const auto v = mueller_potential(0.3, 0.4, mueller_shape(p));
    EXPECT_EQ(v.value, base.value);
    EXPECT_EQ(v.gradient, base.gradient);
}

TEST(Sampling, ParamsReproducible) {
    const auto& s = get_system(SystemId::gbm);
    auto r1 = param_stream(7, s.hash(), 3);
    auto r2 = param_stream(7, s.hash(), 3);
    EXPECT_EQ(sample_params(s, r1), sample_params(s, r2));
}

TEST(Sampling, GbmMuWithinRange) {
    const auto& s = get_system(SystemId::gbm);
    CounterRng rng(1);
    double lo = 1e9, hi = -1e9;
    for (int i = 0; i < 10000; ++i) {
        const double mu = sample_params(s, rng).get("mu");
        lo = std::min(lo, mu);
        hi = std::max(hi, mu);
    }
    EXPECT_GE(lo, 0.01);
    EXPECT_LE(hi, 0.15);
    EXPECT_LT(lo, 0.012);
    EXPECT_GT(hi, 0.148);
}

TEST(Sampling, DegenerateRangeIsConstant) {
    const auto& s = get_system(SystemId::predator_prey);
    CounterRng rng(5);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_params(s, rng).get("r"), 0.4);
}

TEST(Sampling, InitialConditionBoxes) {
    CounterRng rng(9);
    for (int i = 0; i < 1000; ++i) {
        const auto g = sample_initial(get_system(SystemId::gbm), rng);
        ASSERT_EQ(g.size(), 1u);
        EXPECT_GE(g[0], 50.0);
        EXPECT_LE(g[0], 100.0);
        for (double v : sample_initial(get_system(SystemId::stochastic_lorenz), rng)) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
    }
    auto a = initial_stream(3, 4, 5, 6), b = initial_stream(3, 4, 5, 6);
    EXPECT_EQ(sample_initial(get_system(SystemId::mueller), a), sample_initial(get_system(SystemId::mueller), b));
}

TEST(Purity, FiniteAndBitIdenticalEverywhere) {
    CounterRng rng(11);
    for (const auto& s : registry()) {
        SCOPED_TRACE(std::string(s.name()));
        for (int i = 0; i < 1000; ++i) {
            const auto p = sample_params(s, rng);
            std::vector<double> x = sample_initial(s, rng);
            const double t = rng.uniform(0.0, 10.0);
            const auto b1 = drift(s, p, x, t), b2 = drift(s, p, x, t);
            const auto m1 = diffusion(s, p, x, t), m2 = diffusion(s, p, x, t);
            ASSERT_TRUE(all_finite(b1));
            ASSERT_TRUE(all_finite(m1.data));
            ASSERT_EQ(b1, b2);
            ASSERT_EQ(m1, m2);
        }
    }
}

}  // namespace
}  // namespace fmint

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

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fmint/common.hpp"
#include "fmint/rng.hpp"

namespace fmint {

enum class SystemId {
    gbm,
    mueller,
    periodic_oscillator,
    stochastic_lorenz,
    ou,
    inhomogeneous_ou,
    double_well,
    coupled_double_well,
    duffing,
    perturbed_limit_cycle,
    predator_prey,
    predator_prey_variant,
    fluxgate,
};

inline constexpr std::array<SystemId, 13> kAllSystems = {
    SystemId::gbm,
    SystemId::mueller,
    SystemId::periodic_oscillator,
    SystemId::stochastic_lorenz,
    SystemId::ou,
    SystemId::inhomogeneous_ou,
    SystemId::double_well,
    SystemId::coupled_double_well,
    SystemId::duffing,
    SystemId::perturbed_limit_cycle,
    SystemId::predator_prey,
    SystemId::predator_prey_variant,
    SystemId::fluxgate,
};

inline constexpr std::string_view to_string(SystemId id) {
    switch (id) {
        case SystemId::gbm: return "gbm";
        case SystemId::mueller: return "mueller";
        case SystemId::periodic_oscillator: return "periodic_oscillator";
        case SystemId::stochastic_lorenz: return "stochastic_lorenz";
        case SystemId::ou: return "ou";
        case SystemId::inhomogeneous_ou: return "inhomogeneous_ou";
        case SystemId::double_well: return "double_well";
        case SystemId::coupled_double_well: return "coupled_double_well";
        case SystemId::duffing: return "duffing";
        case SystemId::perturbed_limit_cycle: return "perturbed_limit_cycle";
        case SystemId::predator_prey: return "predator_prey";
        case SystemId::predator_prey_variant: return "predator_prey_variant";
        case SystemId::fluxgate: return "fluxgate";
    }
    return "unknown";
}

inline SystemId system_from_string(std::string_view name) {
    for (SystemId id : kAllSystems) {
        if (to_string(id) == name) return id;
    }
    throw std::invalid_argument("unknown system id '" + std::string(name) + "'");
}

struct ParamRange {
    std::string name;
    double lower = 0.0;
    double upper = 0.0;
};

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

/// One SDE family: equations are selected by `id`, everything else is data.
///
/// `state_dim` counts the observed coordinates. `sim_dim` counts the
/// coordinates the integrator advances; it differs only for the fluxgate,
/// whose colored-noise variables y1..y3 follow the observed x1..x3.
struct SdeSystem {
    SystemId id = SystemId::gbm;
    int state_dim = 1;
    int sim_dim = 1;
    int noise_dim = 1;
    std::vector<ParamRange> param_spec;
    double dt_fine = 1e-3;
    int stride_k = 100;
    int horizon_steps_coarse = 50;
    std::vector<Interval> ic_box;  // one per observed dim
    /// Noise channels written into demos (at most three).
    std::vector<int> demo_noise_channels;

    std::string_view name() const { return to_string(id); }
    std::uint64_t hash() const { return hash_name(name()); }
    std::size_t param_index(std::string_view pname) const {
        for (std::size_t i = 0; i < param_spec.size(); ++i) {
            if (param_spec[i].name == pname) return i;
        }
        throw std::invalid_argument("system '" + std::string(name()) + "' has no parameter '" +
                                    std::string(pname) + "'");
    }
};

/// Parameter values ordered as the owning system's param_spec.
struct ParamVector {
    std::vector<std::string> names;
    std::vector<double> values;

    double operator[](std::size_t i) const { return values[i]; }
    double get(std::string_view n) const {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == n) return values[i];
        }
        throw std::invalid_argument("no parameter named '" + std::string(n) + "'");
    }
    void set(std::string_view n, double v) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == n) {
                values[i] = v;
                return;
            }
        }
        throw std::invalid_argument("no parameter named '" + std::string(n) + "'");
    }
    friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

// ---------------------------------------------------------------------------
// Mueller potential
// ---------------------------------------------------------------------------

struct MuellerShape {
    std::array<double, 4> a{-1.0, -1.0, -6.5, 0.7};
    std::array<double, 4> b{0.0, 0.0, 11.0, 0.6};
    std::array<double, 4> c{-10.0, -10.0, -6.5, 0.7};
    std::array<double, 4> D{-200.0, -100.0, -170.0, 15.0};
    std::array<double, 4> X{1.0, 0.0, -0.5, -1.0};
    std::array<double, 4> Y{0.0, 0.5, 1.5, 1.0};
    double a_scale = 1.0;
    double b_scale = 1.0;
    double c_scale = 1.0;
    double D_scale = 1.0;
    double X_shift = 0.0;
    double Y_shift = 0.0;
    double beta = 1.0;
};

struct PotentialValue {
    double value = 0.0;
    std::array<double, 2> gradient{0.0, 0.0};
};

inline PotentialValue mueller_potential(double x1, double x2, const MuellerShape& s) {
    if (!std::isfinite(x1) || !std::isfinite(x2)) {
        throw std::domain_error("mueller_potential: non-finite input");
    }
    PotentialValue out;
    for (int i = 0; i < 4; ++i) {
        const double a = s.a_scale * s.a[i];
        const double b = s.b_scale * s.b[i];
        const double c = s.c_scale * s.c[i];
        const double D = s.D_scale * s.D[i];
        const double dx = x1 - (s.X_shift + s.X[i]);
        const double dy = x2 - (s.Y_shift + s.Y[i]);
        const double e = D * std::exp(a * dx * dx + b * dx * dy + c * dy * dy);
        out.value += e;
        out.gradient[0] += e * (2.0 * a * dx + b * dy);
        out.gradient[1] += e * (b * dx + 2.0 * c * dy);
    }
    return out;
}

/// Mueller shape encoded by a parameter vector of the mueller system.
inline MuellerShape mueller_shape(const ParamVector& p) {
    MuellerShape s;
    s.a_scale = p[0];
    s.b_scale = p[1];
    s.c_scale = p[2];
    s.D_scale = p[3];
    s.X_shift = p[4];
    s.Y_shift = p[5];
    s.beta = p[6];
    return s;
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

namespace detail {

inline SdeSystem make_system(SystemId id, int state_dim, int sim_dim, int noise_dim, std::vector<ParamRange> spec,
                             double dt, int k, std::vector<Interval> ic) {
    SdeSystem s;
    s.id = id;
    s.state_dim = state_dim;
    s.sim_dim = sim_dim;
    s.noise_dim = noise_dim;
    s.param_spec = std::move(spec);
    s.dt_fine = dt;
    s.stride_k = k;
    s.ic_box = std::move(ic);
    for (int c = 0; c < std::min(noise_dim, 3); ++c) s.demo_noise_channels.push_back(c);
    return s;
}

inline std::vector<SdeSystem> build_registry() {
    using std::numbers::pi;
    std::vector<SdeSystem> r;
    const std::vector<Interval> unit2{{-1.0, 1.0}, {-1.0, 1.0}};

    r.push_back(make_system(SystemId::gbm, 1, 1, 1, {{"mu", 0.01, 0.15}, {"sigma", 0.01, 0.2}}, 5e-4, 100,
                            {{50.0, 100.0}}));
    r.push_back(make_system(SystemId::mueller, 2, 2, 2,
                            {{"a_scale", 0.8, 1.2},
                             {"b_scale", 0.8, 1.2},
                             {"c_scale", 0.8, 1.2},
                             {"D_scale", 0.7, 1.3},
                             {"X_shift", -0.1, 0.1},
                             {"Y_shift", -0.1, 0.1},
                             {"beta", 0.05, 2.0}},
                            1e-5, 100, {{-0.5, 0.5}, {-0.5, 1.5}}));
    r.push_back(make_system(SystemId::periodic_oscillator, 2, 2, 1,
                            {{"omega", pi, 2.0 * pi}, {"Omega", 0.1, pi}, {"sigma", 0.01, 1.0}}, 1e-5, 10, unit2));
    r.push_back(make_system(SystemId::stochastic_lorenz, 3, 3, 3,
                            {{"sigma", 5.0, 15.0},
                             {"rho", 20.0, 40.0},
                             {"beta", 1.0, 3.0},
                             {"eta1", 0.1, 2.0},
                             {"eta2", 0.1, 2.0},
                             {"eta3", 0.1, 2.0}},
                            1e-4, 100, {{-1.0, 1.0}, {-1.0, 1.0}, {-1.0, 1.0}}));
    r.push_back(make_system(SystemId::ou, 1, 1, 1, {{"theta", 0.1, 0.5}, {"mu", 1.0, 5.0}, {"sigma", 0.1, 0.5}},
                            1e-3, 100, {{50.0, 100.0}}));
    r.push_back(make_system(SystemId::inhomogeneous_ou, 1, 1, 1,
                            {{"a", 0.5, 2.0}, {"omega", pi, 4.0 * pi}, {"theta", 0.5, 2.0}, {"sigma", 0.1, 0.5}},
                            1e-3, 100, {{50.0, 100.0}}));
    r.push_back(make_system(SystemId::double_well, 2, 2, 2, {{"alpha", 0.1, 0.5}, {"beta", 5.0, 20.0}}, 1e-5, 100,
                            unit2));
    r.push_back(make_system(SystemId::coupled_double_well, 2, 2, 2, {{"alpha", 0.1, 0.5}, {"beta", 5.0, 20.0}},
                            1e-5, 100, unit2));
    r.push_back(make_system(SystemId::duffing, 2, 2, 1,
                            {{"delta", 0.05, 0.5},
                             {"alpha", -1.0, 1.0},
                             {"beta", 1.0, 10.0},
                             {"gamma", 0.1, 1.0},
                             {"omega", 0.5, 6.0},
                             {"epsilon", 0.01, 0.1}},
                            1e-4, 100, unit2));
    r.push_back(make_system(SystemId::perturbed_limit_cycle, 2, 2, 2, {{"T", 0.01, 2.0 * pi}, {"sigma", 0.01, 1.0}},
                            1e-5, 100, unit2));

    // Point values from the published figure; see with_jitter() for ranges.
    std::vector<ParamRange> pp{{"r", 0.4, 0.4},    {"a", 0.02, 0.02},  {"s", 0.35, 0.35},     {"b", 0.4, 0.4},
                               {"k", 0.4, 0.4},    {"g", 0.5, 0.5},    {"D", 0.4, 0.4},       {"v1", 0.25, 0.25},
                               {"v2", 0.25, 0.25}, {"sigma1", 0.15, 0.15}, {"sigma2", 0.12, 0.12}, {"sigma3", 0.1, 0.1}};
    const std::vector<Interval> pp_ic{{0.8, 1.2}, {0.48, 0.72}, {0.32, 0.48}};
    r.push_back(make_system(SystemId::predator_prey, 3, 3, 3, pp, 5e-4, 100, pp_ic));
    pp.push_back({"sigma4", 0.005, 0.005});
    auto variant = make_system(SystemId::predator_prey_variant, 3, 3, 4, pp, 5e-4, 100, pp_ic);
    variant.demo_noise_channels = {0, 1, 3};
    r.push_back(std::move(variant));

    r.push_back(make_system(SystemId::fluxgate, 3, 6, 3,
                            {{"c", 3.0, 5.0}, {"lambda", 0.1, 1.0}, {"epsilon", 0.1, 0.5}, {"omega", 3.0, 3.0}}, 1e-3,
                            100, {{-1.0, 1.0}, {-1.0, 1.0}, {-1.0, 1.0}}));
    return r;
}

}  // namespace detail

inline const std::vector<SdeSystem>& registry() {
    static const std::vector<SdeSystem> systems = detail::build_registry();
    return systems;
}

inline const SdeSystem& get_system(SystemId id) {
    for (const auto& s : registry()) {
        if (s.id == id) return s;
    }
    throw std::invalid_argument("system not registered");
}

inline const SdeSystem& get_system(std::string_view name) { return get_system(system_from_string(name)); }

/// Widens every degenerate (point) range to value*(1 -/+ fraction).
inline SdeSystem with_jitter(SdeSystem s, double fraction) {
    for (auto& r : s.param_spec) {
        if (r.lower == r.upper && r.lower != 0.0) {
            const double lo = r.lower * (1.0 - fraction);
            const double hi = r.lower * (1.0 + fraction);
            r.lower = std::min(lo, hi);
            r.upper = std::max(lo, hi);
        }
    }
    return s;
}

inline void validate(const SdeSystem& s) {
    auto fail = [&](const std::string& what) {
        throw std::invalid_argument("invalid system '" + std::string(s.name()) + "': " + what);
    };
    if (s.state_dim < 1 || s.state_dim > 3) fail("state_dim must be in 1..3");
    if (s.sim_dim < s.state_dim) fail("sim_dim < state_dim");
    if (s.noise_dim < 1) fail("noise_dim must be >= 1");
    if (s.stride_k < 2) fail("stride_k must be >= 2");
    if (!(s.dt_fine > 0.0)) fail("dt_fine must be positive");
    if (s.horizon_steps_coarse < 1) fail("horizon_steps_coarse must be >= 1");
    if (static_cast<int>(s.ic_box.size()) != s.state_dim) fail("ic_box size != state_dim");
    for (const auto& r : s.param_spec) {
        if (!(r.lower <= r.upper)) fail("parameter range '" + r.name + "' has lower > upper");
    }
    for (const auto& b : s.ic_box) {
        if (!(b.lower <= b.upper)) fail("ic_box has lower > upper");
    }
}

// ---------------------------------------------------------------------------
// Named parameter presets for the regime studies
// ---------------------------------------------------------------------------

struct Preset {
    std::string name;
    SystemId system;
    std::vector<std::pair<std::string, double>> values;
};

inline const std::vector<Preset>& presets() {
    static const std::vector<Preset> all = [] {
        std::vector<Preset> p;
        auto duff = [&](std::string n, double d, double al, double be, double ga, double om, double ep) {
            p.push_back({std::move(n), SystemId::duffing,
                         {{"delta", d}, {"alpha", al}, {"beta", be}, {"gamma", ga}, {"omega", om}, {"epsilon", ep}}});
        };
        duff("duffing_chaotic", 1.0, -1.0, 1.0, 1.0, 1.4, 0.2);
        duff("duffing_single_well", 1.5, -1.0, 1.0, 0.1, 1.0, 0.1);
        duff("duffing_resonance", 0.5, -1.0, 1.0, 0.5, 1.0, 0.05);
        auto pp = [&](std::string n, double s, double g) {
            p.push_back({std::move(n),
                         SystemId::predator_prey,
                         {{"r", 0.4}, {"a", 0.02}, {"s", s}, {"b", 0.4}, {"k", 0.4}, {"g", g}, {"D", 0.4},
                          {"v1", 0.25}, {"v2", 0.25}, {"sigma1", 0.15}, {"sigma2", 0.12}, {"sigma3", 0.1}}});
        };
        pp("predator_prey_coexistence", 0.0, 0.4);
        pp("predator_prey_large_cycles", 0.2, 0.4);
        pp("predator_prey_prey_dominated", 0.2, 0.6);
        auto lor = [&](std::string n, double rho, double eta) {
            p.push_back({std::move(n),
                         SystemId::stochastic_lorenz,
                         {{"sigma", 10.0}, {"rho", rho}, {"beta", 8.0 / 3.0}, {"eta1", eta}, {"eta2", eta}, {"eta3", eta}}});
        };
        lor("lorenz_rho_0.5", 0.5, 0.8);
        lor("lorenz_rho_1", 1.0, 0.8);
        lor("lorenz_rho_13.926", 13.926, 0.8);
        lor("lorenz_rho_20", 20.0, 0.8);
        lor("lorenz_rho_24.06", 24.06, 0.8);
        lor("lorenz_rho_24.5", 24.5, 0.8);
        lor("lorenz_rho_24.76", 24.76, 0.8);
        lor("lorenz_rho_100", 100.0, 0.8);
        lor("lorenz_rho_28_eta_2", 28.0, 2.0);
        return p;
    }();
    return all;
}

/// Parameter vector with every entry at the midpoint of its range.
inline ParamVector default_params(const SdeSystem& s) {
    ParamVector p;
    for (const auto& r : s.param_spec) {
        p.names.push_back(r.name);
        p.values.push_back(0.5 * (r.lower + r.upper));
    }
    return p;
}

inline ParamVector make_params(const SdeSystem& s, const std::vector<std::pair<std::string, double>>& values) {
    ParamVector p = default_params(s);
    for (const auto& [n, v] : values) p.set(n, v);
    return p;
}

inline ParamVector preset_params(std::string_view name) {
    for (const auto& pr : presets()) {
        if (pr.name == name) return make_params(get_system(pr.system), pr.values);
    }
    throw std::invalid_argument("unknown preset '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

inline ParamVector sample_params(const SdeSystem& s, CounterRng& rng) {
    ParamVector p;
    p.names.reserve(s.param_spec.size());
    p.values.reserve(s.param_spec.size());
    for (const auto& r : s.param_spec) {
        p.names.push_back(r.name);
        p.values.push_back(rng.uniform(r.lower, r.upper));
    }
    return p;
}

/// Initial condition of length sim_dim. Hidden coordinates start at zero.
inline std::vector<double> sample_initial(const SdeSystem& s, CounterRng& rng) {
    std::vector<double> x(static_cast<std::size_t>(s.sim_dim), 0.0);
    for (int d = 0; d < s.state_dim; ++d) {
        x[d] = rng.uniform(s.ic_box[d].lower, s.ic_box[d].upper);
    }
    return x;
}

// ---------------------------------------------------------------------------
// Drift and diffusion
// ---------------------------------------------------------------------------

/// Drift at a full simulation state (length sim_dim). No input checks.
inline void drift_into(const SdeSystem& s, const ParamVector& pv, std::span<const double> x, double t,
                       std::span<double> out) {
    const auto& p = pv.values;
    switch (s.id) {
        case SystemId::gbm:
            out[0] = p[0] * x[0];
            return;
        case SystemId::mueller: {
            const auto v = mueller_potential(x[0], x[1], mueller_shape(pv));
            out[0] = -v.gradient[0];
            out[1] = -v.gradient[1];
            return;
        }
        case SystemId::periodic_oscillator: {
            const double scale = 2.0 * std::numbers::pi / p[0];
            const double r = std::sqrt(x[0] * x[0] + x[1] * x[1]);
            const double g = 1.0 + r * (std::cos(2.0 * std::numbers::pi * t) - 1.0);
            out[0] = scale * (-p[1] * x[1] + x[0] * g);
            out[1] = scale * (p[1] * x[0] + x[1] * g);
            return;
        }
        case SystemId::stochastic_lorenz:
            out[0] = p[0] * (x[1] - x[0]);
            out[1] = x[0] * (p[1] - x[2]) - x[1];
            out[2] = x[0] * x[1] - p[2] * x[2];
            return;
        case SystemId::ou:
            out[0] = p[0] * (p[1] - x[0]);
            return;
        case SystemId::inhomogeneous_ou:
            out[0] = p[0] * std::cos(p[1] * t) - p[2] * x[0];
            return;
        case SystemId::double_well:
            out[0] = -4.0 * x[0] * (x[0] * x[0] - 1.0);
            out[1] = -2.0 * p[0] * x[1];
            return;
        case SystemId::coupled_double_well:
            out[0] = -(4.0 * x[0] * (x[0] * x[0] - 1.0) + p[0] * x[1]);
            out[1] = -(x[1] + p[0] * x[0]);
            return;
        case SystemId::duffing:
            out[0] = x[1];
            out[1] = -p[0] * x[1] - p[1] * x[0] - p[2] * x[0] * x[0] * x[0] + p[3] * std::cos(p[4] * t);
            return;
        case SystemId::perturbed_limit_cycle: {
            const double r2 = x[0] * x[0] + x[1] * x[1];
            out[0] = p[0] * (x[0] - x[1] - x[0] * r2);
            out[1] = p[0] * (x[0] + x[1] - x[1] * r2);
            return;
        }
        case SystemId::predator_prey:
        case SystemId::predator_prey_variant: {
            // r a s b k g D v1 v2
            out[0] = x[0] * (p[0] - p[1] * x[0] + p[2] * x[1] - p[3] * x[2]);
            out[1] = p[4] * x[0] * x[2] - x[1] * (p[5] * x[0] + p[6] + p[7]);
            out[2] = p[6] * x[1] - p[8] * x[2];
            return;
        }
        case SystemId::fluxgate: {
            const double c = p[0], lambda = p[1], omega = p[3];
            for (int j = 0; j < 3; ++j) {
                const int next = (j + 1) % 3;
                out[j] = -x[j] + std::tanh(c * (x[j] + lambda * x[next] + x[3 + j]));
                out[3 + j] = -omega * x[3 + j];
            }
            return;
        }
    }
}

/// Diffusion matrix (sim_dim x noise_dim, row-major) at a full state.
inline void diffusion_into(const SdeSystem& s, const ParamVector& pv, std::span<const double> x, double /*t*/,
                           std::span<double> out) {
    const auto& p = pv.values;
    std::fill(out.begin(), out.end(), 0.0);
    const int nd = s.noise_dim;
    auto at = [&](int r, int c) -> double& { return out[static_cast<std::size_t>(r * nd + c)]; };
    switch (s.id) {
        case SystemId::gbm:
            at(0, 0) = p[1] * x[0];
            return;
        case SystemId::mueller: {
            const double a = std::sqrt(2.0 / p[6]);
            at(0, 0) = a;
            at(1, 1) = a;
            return;
        }
        case SystemId::periodic_oscillator: {
            const double a = p[2] * std::sqrt(2.0 * std::numbers::pi / p[0]);
            at(0, 0) = a * x[0] * x[1];
            at(1, 0) = a * x[1] * x[1];
            return;
        }
        case SystemId::stochastic_lorenz:
            at(0, 0) = p[3];
            at(1, 1) = p[4];
            at(2, 2) = p[5];
            return;
        case SystemId::ou:
            at(0, 0) = p[2];
            return;
        case SystemId::inhomogeneous_ou:
            at(0, 0) = p[3];
            return;
        case SystemId::double_well:
        case SystemId::coupled_double_well: {
            const double a = std::sqrt(2.0 / p[1]);
            at(0, 0) = a;
            at(1, 1) = a;
            return;
        }
        case SystemId::duffing:
            at(1, 0) = std::sqrt(p[5]);
            return;
        case SystemId::perturbed_limit_cycle: {
            const double a = p[1] * std::sqrt(p[0]);
            at(0, 0) = a * x[0] * x[1];
            at(1, 1) = a * x[1] * x[1];
            return;
        }
        case SystemId::predator_prey:
            at(0, 0) = p[9] * x[0];
            at(1, 1) = p[10] * x[1];
            at(2, 2) = p[11] * x[2];
            return;
        case SystemId::predator_prey_variant:
            at(0, 0) = p[9] * x[0];
            at(1, 1) = p[10] * x[1];
            at(1, 2) = p[12] * x[0] * x[2];
            at(2, 3) = p[11] * x[2];
            return;
        case SystemId::fluxgate: {
            const double a = p[3] * std::sqrt(p[2]);
            at(3, 0) = a;
            at(4, 1) = a;
            at(5, 2) = a;
            return;
        }
    }
}

namespace detail {

inline void check_inputs(const SdeSystem& s, const ParamVector& p, std::span<const double> x, double t,
                         const char* what) {
    if (p.values.size() != s.param_spec.size()) {
        throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(s.param_spec.size()) +
                                    " parameters for '" + std::string(s.name()) + "', got " +
                                    std::to_string(p.values.size()));
    }
    if (static_cast<int>(x.size()) != s.sim_dim && static_cast<int>(x.size()) != s.state_dim) {
        throw std::invalid_argument(std::string(what) + ": state length " + std::to_string(x.size()) +
                                    " does not match system '" + std::string(s.name()) + "'");
    }
    if (!all_finite(x) || !std::isfinite(t) || !all_finite(p.values)) {
        throw std::domain_error(std::string(what) + ": non-finite input for system '" + std::string(s.name()) + "'");
    }
}

inline std::vector<double> full_state(const SdeSystem& s, std::span<const double> x) {
    std::vector<double> full(static_cast<std::size_t>(s.sim_dim), 0.0);
    std::copy(x.begin(), x.end(), full.begin());
    return full;
}

}  // namespace detail

/// Checked drift. Accepts either the full simulation state or just the
/// observed coordinates (hidden ones are taken as zero); the result has the
/// same length as the input.
inline std::vector<double> drift(const SdeSystem& s, const ParamVector& p, std::span<const double> x, double t) {
    detail::check_inputs(s, p, x, t, "drift");
    const auto full = detail::full_state(s, x);
    std::vector<double> out(full.size());
    drift_into(s, p, full, t, out);
    out.resize(x.size());
    return out;
}

/// Checked diffusion, returned as rows = len(x), cols = noise_dim.
inline Matrix diffusion(const SdeSystem& s, const ParamVector& p, std::span<const double> x, double t) {
    detail::check_inputs(s, p, x, t, "diffusion");
    const auto full = detail::full_state(s, x);
    Matrix m(full.size(), static_cast<std::size_t>(s.noise_dim));
    diffusion_into(s, p, full, t, m.data);
    m.rows = x.size();
    m.data.resize(m.rows * m.cols);
    return m;
}

/// d sigma / dx for scalar systems, analytic where the form is known.
inline std::optional<double> analytic_sigma_derivative(const SdeSystem& s, const ParamVector& p) {
    switch (s.id) {
        case SystemId::gbm: return p[1];
        case SystemId::ou:
        case SystemId::inhomogeneous_ou: return 0.0;
        default: return std::nullopt;
    }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const SdeSystem& s) {
    nlohmann::json j;
    j["id"] = std::string(s.name());
    j["state_dim"] = s.state_dim;
    j["noise_dim"] = s.noise_dim;
    j["dt_fine"] = s.dt_fine;
    j["stride_k"] = s.stride_k;
    j["horizon_steps_coarse"] = s.horizon_steps_coarse;
    j["param_spec"] = nlohmann::json::array();
    for (const auto& r : s.param_spec) {
        j["param_spec"].push_back({{"name", r.name}, {"lower", r.lower}, {"upper", r.upper}});
    }
    j["ic_box"] = nlohmann::json::array();
    for (const auto& b : s.ic_box) j["ic_box"].push_back({b.lower, b.upper});
    return j;
}

/// Rebuilds a system from its JSON dump. The equations come from the id;
/// dimensions must agree with the registered definition.
inline SdeSystem system_from_json(const nlohmann::json& j) {
    SdeSystem s = get_system(j.at("id").get<std::string>());
    if (j.at("state_dim").get<int>() != s.state_dim || j.at("noise_dim").get<int>() != s.noise_dim) {
        throw std::invalid_argument("system JSON for '" + std::string(s.name()) +
                                    "' has dimensions that differ from the registered equations");
    }
    s.dt_fine = j.at("dt_fine").get<double>();
    s.stride_k = j.at("stride_k").get<int>();
    s.horizon_steps_coarse = j.at("horizon_steps_coarse").get<int>();
    std::vector<ParamRange> spec;
    for (const auto& r : j.at("param_spec")) {
        spec.push_back({r.at("name").get<std::string>(), r.at("lower").get<double>(), r.at("upper").get<double>()});
    }
    if (spec.size() != s.param_spec.size()) {
        throw std::invalid_argument("system JSON for '" + std::string(s.name()) + "' has the wrong parameter count");
    }
    for (std::size_t i = 0; i < spec.size(); ++i) {
        if (spec[i].name != s.param_spec[i].name) {
            throw std::invalid_argument("system JSON parameter '" + spec[i].name + "' out of order, expected '" +
                                        s.param_spec[i].name + "'");
        }
    }
    s.param_spec = std::move(spec);
    s.ic_box.clear();
    for (const auto& b : j.at("ic_box")) s.ic_box.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
    validate(s);
    return s;
}

inline nlohmann::json registry_to_json() {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : registry()) j.push_back(to_json(s));
    return j;
}

inline std::vector<SdeSystem> registry_from_json(const nlohmann::json& j) {
    std::vector<SdeSystem> out;
    for (const auto& e : j) out.push_back(system_from_json(e));
    return out;
}

}  // namespace fmint

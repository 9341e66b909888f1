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
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmint/common.hpp"
#include "fmint/rng.hpp"
#include "fmint/sde_systems.hpp"

namespace fmint {

enum class Scheme { euler_maruyama, milstein };

/// Raised when a step produces a non-finite state.
class BlowUpError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Scratch buffers for the unchecked step kernels.
struct StepWorkspace {
    std::vector<double> drift;
    std::vector<double> sigma;
    explicit StepWorkspace(const SdeSystem& s)
        : drift(static_cast<std::size_t>(s.sim_dim)),
          sigma(static_cast<std::size_t>(s.sim_dim * s.noise_dim)) {}
};

/// x_out = x + b(x,t) dt + sigma(x,t) dW over the full simulation state.
/// x and x_out may alias.
inline void em_step_into(const SdeSystem& s, const ParamVector& p, std::span<const double> x, double t, double dt,
                         std::span<const double> dW, std::span<double> x_out, StepWorkspace& ws) {
    drift_into(s, p, x, t, ws.drift);
    diffusion_into(s, p, x, t, ws.sigma);
    const int nd = s.noise_dim;
    for (int i = 0; i < s.sim_dim; ++i) {
        double acc = x[i] + ws.drift[i] * dt;
        const double* row = ws.sigma.data() + static_cast<std::size_t>(i * nd);
        for (int j = 0; j < nd; ++j) acc += row[j] * dW[j];
        x_out[i] = acc;
    }
}

inline std::vector<double> em_step(const SdeSystem& s, const ParamVector& p, std::span<const double> x, double t,
                                   double dt, std::span<const double> dW) {
    if (!(dt > 0.0)) throw std::invalid_argument("em_step: dt must be positive");
    if (static_cast<int>(dW.size()) != s.noise_dim) {
        throw std::invalid_argument("em_step: dW has length " + std::to_string(dW.size()) + ", system '" +
                                    std::string(s.name()) + "' has noise_dim " + std::to_string(s.noise_dim));
    }
    detail::check_inputs(s, p, x, t, "em_step");
    auto full = detail::full_state(s, x);
    StepWorkspace ws(s);
    em_step_into(s, p, full, t, dt, dW, full, ws);
    if (!all_finite(full)) {
        throw BlowUpError("em_step: non-finite state for system '" + std::string(s.name()) + "' at t=" +
                          std::to_string(t));
    }
    full.resize(x.size());
    return full;
}

namespace detail {

inline double scalar_sigma(const SdeSystem& s, const ParamVector& p, double x, double t) {
    double sig = 0.0;
    const double xs[1] = {x};
    diffusion_into(s, p, xs, t, std::span<double>(&sig, 1));
    return sig;
}

}  // namespace detail

/// d sigma/dx for a scalar system: analytic when registered, otherwise a
/// central difference with step 1e-6 (1 + |x|).
inline double sigma_derivative(const SdeSystem& s, const ParamVector& p, double x, double t) {
    if (auto d = analytic_sigma_derivative(s, p)) return *d;
    const double h = 1e-6 * (1.0 + std::abs(x));
    return (detail::scalar_sigma(s, p, x + h, t) - detail::scalar_sigma(s, p, x - h, t)) / (2.0 * h);
}

inline double milstein_step_unchecked(const SdeSystem& s, const ParamVector& p, double x, double t, double dt,
                                      double dW) {
    double b = 0.0;
    const double xs[1] = {x};
    drift_into(s, p, xs, t, std::span<double>(&b, 1));
    const double sig = detail::scalar_sigma(s, p, x, t);
    const double dsig = sigma_derivative(s, p, x, t);
    return x + b * dt + sig * dW + 0.5 * sig * dsig * (dW * dW - dt);
}

inline double milstein_step(const SdeSystem& s, const ParamVector& p, double x, double t, double dt, double dW) {
    if (s.state_dim != 1 || s.sim_dim != 1 || s.noise_dim != 1) {
        throw std::invalid_argument("milstein_step: system '" + std::string(s.name()) +
                                    "' is not one-dimensional; Milstein is only provided for scalar SDEs");
    }
    if (!(dt > 0.0)) throw std::invalid_argument("milstein_step: dt must be positive");
    const double xs[1] = {x};
    detail::check_inputs(s, p, xs, t, "milstein_step");
    const double out = milstein_step_unchecked(s, p, x, t, dt, dW);
    if (!std::isfinite(out)) throw BlowUpError("milstein_step: non-finite state");
    return out;
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Fine-step Brownian increments dW ~ N(0, dt I) for one trajectory.
class NoiseStream {
public:
    NoiseStream(const SeedMaterial& seed, double dt, int noise_dim)
        : seed_(seed), rng_(noise_stream(seed)), sqrt_dt_(std::sqrt(dt)), dt_(dt), noise_dim_(noise_dim) {}

    const SeedMaterial& seed() const noexcept { return seed_; }
    double dt() const noexcept { return dt_; }
    int noise_dim() const noexcept { return noise_dim_; }

    void next(std::span<double> out) {
        for (int j = 0; j < noise_dim_; ++j) out[j] = sqrt_dt_ * rng_.normal();
    }

    /// Draws `steps` increments as a steps x noise_dim matrix.
    Matrix take(std::size_t steps) {
        Matrix m(steps, static_cast<std::size_t>(noise_dim_));
        for (std::size_t i = 0; i < steps; ++i) next(m.row(i));
        return m;
    }

private:
    SeedMaterial seed_;
    CounterRng rng_;
    double sqrt_dt_;
    double dt_;
    int noise_dim_;
};

// ---------------------------------------------------------------------------
// Paired fine / coarse simulation
// ---------------------------------------------------------------------------

struct TrajectoryPair {
    int state_dim = 0;
    int noise_dim = 0;
    double dt_fine = 0.0;
    int stride_k = 0;
    int n_coarse = 0;
    Matrix fine;       // (k N + 1) x state_dim, empty unless kept
    Matrix coarse;     // (N + 1) x state_dim
    Matrix agg_noise;  // N x noise_dim, sum of k fine increments per coarse step
    Matrix err;        // (N + 1) x state_dim, fine - coarse at t_n = n k dt
    bool rejected = false;
    std::string reject_reason;

    double coarse_dt() const { return dt_fine * stride_k; }

    /// Fine states at the coarse time stamps, i.e. coarse + err.
    Matrix fine_at_coarse() const {
        Matrix m = coarse;
        for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] += err.data[i];
        return m;
    }
};

struct SimulationOptions {
    Scheme scheme = Scheme::euler_maruyama;
    double blow_up_bound = 1e8;
    bool keep_fine_path = true;
    double t0 = 0.0;
};

namespace detail {

inline bool out_of_bounds(std::span<const double> x, double bound) {
    for (double v : x) {
        if (!(std::abs(v) <= bound)) return true;  // also catches NaN
    }
    return false;
}

template <class NextIncrement>
TrajectoryPair simulate_pair_impl(const SdeSystem& s, const ParamVector& p, std::span<const double> x0, double dt,
                                  int n_coarse, int k, const SimulationOptions& opt, NextIncrement&& next) {
    if (n_coarse < 1) throw std::invalid_argument("simulate_pair: need at least one coarse step");
    if (k < 1) throw std::invalid_argument("simulate_pair: stride k must be >= 1");
    if (opt.scheme == Scheme::milstein && (s.sim_dim != 1 || s.noise_dim != 1)) {
        throw std::invalid_argument("simulate_pair: Milstein requested for multi-dimensional system '" +
                                    std::string(s.name()) + "'");
    }
    const std::size_t sd = static_cast<std::size_t>(s.state_dim);
    const std::size_t nd = static_cast<std::size_t>(s.noise_dim);
    TrajectoryPair out;
    out.state_dim = s.state_dim;
    out.noise_dim = s.noise_dim;
    out.dt_fine = dt;
    out.stride_k = k;
    out.n_coarse = n_coarse;
    out.coarse = Matrix(static_cast<std::size_t>(n_coarse) + 1, sd);
    out.err = Matrix(static_cast<std::size_t>(n_coarse) + 1, sd);
    out.agg_noise = Matrix(static_cast<std::size_t>(n_coarse), nd);
    if (opt.keep_fine_path) out.fine = Matrix(static_cast<std::size_t>(n_coarse) * k + 1, sd);

    auto fine = full_state(s, x0);
    auto coarse = fine;
    StepWorkspace ws(s);
    std::vector<double> dW(nd), agg(nd);

    for (std::size_t d = 0; d < sd; ++d) {
        out.coarse(0, d) = coarse[d];
        if (opt.keep_fine_path) out.fine(0, d) = fine[d];
    }

    auto step = [&](std::vector<double>& x, double t, double h, std::span<const double> w) {
        if (opt.scheme == Scheme::milstein) {
            x[0] = milstein_step_unchecked(s, p, x[0], t, h, w[0]);
        } else {
            em_step_into(s, p, x, t, h, w, x, ws);
        }
    };

    const double hk = dt * k;
    for (int n = 0; n < n_coarse; ++n) {
        std::fill(agg.begin(), agg.end(), 0.0);
        for (int i = 0; i < k; ++i) {
            const long m = static_cast<long>(n) * k + i;
            next(std::span<double>(dW));
            for (std::size_t j = 0; j < nd; ++j) agg[j] += dW[j];
            step(fine, opt.t0 + static_cast<double>(m) * dt, dt, dW);
            if (out_of_bounds(fine, opt.blow_up_bound)) {
                out.rejected = true;
                out.reject_reason = "fine path left the bound at step " + std::to_string(m + 1);
                return out;
            }
            if (opt.keep_fine_path) {
                for (std::size_t d = 0; d < sd; ++d) out.fine(static_cast<std::size_t>(m + 1), d) = fine[d];
            }
        }
        step(coarse, opt.t0 + static_cast<double>(n) * hk, hk, agg);
        if (out_of_bounds(coarse, opt.blow_up_bound)) {
            out.rejected = true;
            out.reject_reason = "coarse path left the bound at step " + std::to_string(n + 1);
            return out;
        }
        for (std::size_t j = 0; j < nd; ++j) out.agg_noise(static_cast<std::size_t>(n), j) = agg[j];
        for (std::size_t d = 0; d < sd; ++d) {
            out.coarse(static_cast<std::size_t>(n) + 1, d) = coarse[d];
            out.err(static_cast<std::size_t>(n) + 1, d) = fine[d] - coarse[d];
        }
    }
    return out;
}

}  // namespace detail

/// Fine path at dt, coarse path at k dt driven by the summed fine
/// increments, and their difference at the coarse time stamps.
inline TrajectoryPair simulate_pair(const SdeSystem& s, const ParamVector& p, std::span<const double> x0,
                                    NoiseStream& noise, int n_coarse, int k, const SimulationOptions& opt = {}) {
    return detail::simulate_pair_impl(s, p, x0, noise.dt(), n_coarse, k, opt,
                                      [&](std::span<double> w) { noise.next(w); });
}

/// Single-resolution EM path of `steps` steps at the stream's dt. Stores
/// every `record_every`-th state (plus the initial one); increments used are
/// returned summed over each recorded interval.
struct PathResult {
    Matrix states;
    Matrix agg_noise;
    bool rejected = false;
};

inline PathResult simulate_path(const SdeSystem& s, const ParamVector& p, std::span<const double> x0,
                                NoiseStream& noise, int steps, int record_every = 1,
                                const SimulationOptions& opt = {}) {
    if (steps < 1 || record_every < 1 || steps % record_every != 0) {
        throw std::invalid_argument("simulate_path: steps must be a positive multiple of record_every");
    }
    const std::size_t sd = static_cast<std::size_t>(s.state_dim);
    const std::size_t nd = static_cast<std::size_t>(s.noise_dim);
    const std::size_t rows = static_cast<std::size_t>(steps / record_every);
    PathResult out;
    out.states = Matrix(rows + 1, sd);
    out.agg_noise = Matrix(rows, nd);
    auto x = detail::full_state(s, x0);
    StepWorkspace ws(s);
    std::vector<double> dW(nd);
    for (std::size_t d = 0; d < sd; ++d) out.states(0, d) = x[d];
    const double dt = noise.dt();
    for (int m = 0; m < steps; ++m) {
        noise.next(dW);
        em_step_into(s, p, x, opt.t0 + static_cast<double>(m) * dt, dt, dW, x, ws);
        const std::size_t r = static_cast<std::size_t>(m / record_every);
        for (std::size_t j = 0; j < nd; ++j) out.agg_noise(r, j) += dW[j];
        if ((m + 1) % record_every == 0) {
            if (detail::out_of_bounds(x, opt.blow_up_bound)) {
                out.rejected = true;
                return out;
            }
            for (std::size_t d = 0; d < sd; ++d) out.states(r + 1, d) = x[d];
        }
    }
    return out;
}

/// Same as simulate_pair, but with the fine increments supplied explicitly
/// (at least k N rows of noise_dim columns).
inline TrajectoryPair simulate_pair(const SdeSystem& s, const ParamVector& p, std::span<const double> x0,
                                    const Matrix& increments, double dt, int n_coarse, int k,
                                    const SimulationOptions& opt = {}) {
    if (increments.rows < static_cast<std::size_t>(n_coarse) * k ||
        increments.cols != static_cast<std::size_t>(s.noise_dim)) {
        throw std::invalid_argument("simulate_pair: increment matrix " + shape_str(increments.rows, increments.cols) +
                                    " too small for N*k=" + std::to_string(n_coarse * k));
    }
    std::size_t row = 0;
    return detail::simulate_pair_impl(s, p, x0, dt, n_coarse, k, opt, [&](std::span<double> w) {
        const auto r = increments.row(row++);
        std::copy(r.begin(), r.end(), w.begin());
    });
}

// ---------------------------------------------------------------------------
// Convergence probes
// ---------------------------------------------------------------------------

/// Least-squares slope of log(y) against log(x), skipping non-positive y.
inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0 && y[i] > 0.0) {
            lx.push_back(std::log(x[i]));
            ly.push_back(std::log(y[i]));
        }
    }
    if (lx.size() < 2) return std::nan("");
    const double n = static_cast<double>(lx.size());
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    return sxy / sxx;
}

struct OrderProbeResult {
    std::vector<double> h;
    std::vector<double> mean_error;  // E[ sup_j |X_j - Y_j| ]
    std::vector<double> ci95;
    double slope = 0.0;
};

struct OrderProbeConfig {
    Scheme scheme = Scheme::euler_maruyama;
    std::vector<double> h_list{1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2};
    int realizations = 2000;
    double horizon = 1.0;
    double x0 = 1.0;
    std::uint64_t seed = 1;
};

/// Strong-error probe on geometric Brownian motion against the exact
/// solution X0 exp((mu - sigma^2/2) t + sigma W_t), all step sizes sharing one
/// Brownian path per realization sampled on the finest grid.
inline OrderProbeResult strong_order_probe(const SdeSystem& s, const ParamVector& p, const OrderProbeConfig& cfg) {
    if (s.id != SystemId::gbm) {
        throw std::invalid_argument("strong_order_probe: needs the gbm system (exact solution is known)");
    }
    if (cfg.h_list.size() < 2) throw std::invalid_argument("strong_order_probe: need at least two step sizes");
    if (cfg.realizations < 1) throw std::invalid_argument("strong_order_probe: need at least one realization");
    const double h_min = *std::min_element(cfg.h_list.begin(), cfg.h_list.end());
    if (!(h_min > 0.0)) throw std::invalid_argument("strong_order_probe: step sizes must be positive");
    const auto n_fine = static_cast<std::size_t>(std::llround(cfg.horizon / h_min));
    std::vector<std::size_t> ratio;
    for (double h : cfg.h_list) {
        const auto r = static_cast<std::size_t>(std::llround(h / h_min));
        if (r == 0 || std::abs(static_cast<double>(r) * h_min - h) > 1e-9 * h || n_fine % r != 0) {
            throw std::invalid_argument("strong_order_probe: every step size must be a multiple of the smallest and "
                                        "divide the horizon");
        }
        ratio.push_back(r);
    }
    const double mu = p.get("mu"), sigma = p.get("sigma");
    const std::size_t nh = cfg.h_list.size();
    std::vector<double> sum(nh, 0.0), sum_sq(nh, 0.0);
    std::vector<double> w(n_fine);
    CounterRng root(derive_key({cfg.seed, s.hash(), 0x50524F4245ULL}));
    const double sq = std::sqrt(h_min);
    StepWorkspace ws(s);

    for (int m = 0; m < cfg.realizations; ++m) {
        CounterRng rng = root.split(static_cast<std::uint64_t>(m));
        for (auto& v : w) v = sq * rng.normal();
        for (std::size_t ih = 0; ih < nh; ++ih) {
            const std::size_t r = ratio[ih];
            const double h = cfg.h_list[ih];
            double x = cfg.x0, W = 0.0, worst = 0.0;
            for (std::size_t j = 0; j < n_fine / r; ++j) {
                double dW = 0.0;
                for (std::size_t i = 0; i < r; ++i) dW += w[j * r + i];
                const double t = static_cast<double>(j) * h;
                if (cfg.scheme == Scheme::milstein) {
                    x = milstein_step_unchecked(s, p, x, t, h, dW);
                } else {
                    const double xs[1] = {x};
                    double xn = 0.0;
                    em_step_into(s, p, xs, t, h, std::span<const double>(&dW, 1), std::span<double>(&xn, 1), ws);
                    x = xn;
                }
                W += dW;
                const double tn = static_cast<double>(j + 1) * h;
                const double exact = cfg.x0 * std::exp((mu - 0.5 * sigma * sigma) * tn + sigma * W);
                worst = std::max(worst, std::abs(x - exact));
            }
            sum[ih] += worst;
            sum_sq[ih] += worst * worst;
        }
    }

    OrderProbeResult res;
    res.h = cfg.h_list;
    const double M = cfg.realizations;
    for (std::size_t ih = 0; ih < nh; ++ih) {
        const double mean = sum[ih] / M;
        const double var = M > 1 ? std::max(0.0, (sum_sq[ih] - M * mean * mean) / (M - 1)) : 0.0;
        res.mean_error.push_back(mean);
        res.ci95.push_back(1.96 * std::sqrt(var / M));
    }
    res.slope = loglog_slope(res.h, res.mean_error);
    return res;
}

inline void write_order_csv(std::ostream& os, const OrderProbeResult& r) {
    os << "h,mean_strong_error,ci95\n";
    os.precision(10);
    for (std::size_t i = 0; i < r.h.size(); ++i) os << r.h[i] << ',' << r.mean_error[i] << ',' << r.ci95[i] << '\n';
}

struct ScalingProbeResult {
    std::vector<int> k;
    std::vector<double> coarse_dt;
    std::vector<double> mean_abs_err;
    double slope = 0.0;
};

struct ScalingProbeConfig {
    std::vector<int> k_list{2, 5, 10, 20, 50};
    int realizations = 2000;
    int n_coarse = 1;  // coarse steps per realization; 1 isolates the one-step error
    std::uint64_t seed = 1;
};

/// Mean |err_N| against the coarse step k dt. All k share the same fine
/// increments within a realization.
inline ScalingProbeResult coarse_error_scaling_probe(const SdeSystem& s, const ParamVector& p,
                                                     std::span<const double> x0, const ScalingProbeConfig& cfg) {
    if (cfg.k_list.empty()) throw std::invalid_argument("coarse_error_scaling_probe: empty k list");
    const int k_max = *std::max_element(cfg.k_list.begin(), cfg.k_list.end());
    const std::size_t steps = static_cast<std::size_t>(k_max) * cfg.n_coarse;
    std::vector<double> sums(cfg.k_list.size(), 0.0);
    SimulationOptions opt;
    opt.keep_fine_path = false;
    for (int m = 0; m < cfg.realizations; ++m) {
        NoiseStream noise({cfg.seed, s.hash(), 0, 0, static_cast<std::uint64_t>(m)}, s.dt_fine, s.noise_dim);
        const Matrix inc = noise.take(steps);
        for (std::size_t ik = 0; ik < cfg.k_list.size(); ++ik) {
            const auto pair = simulate_pair(s, p, x0, inc, s.dt_fine, cfg.n_coarse, cfg.k_list[ik], opt);
            if (pair.rejected) throw BlowUpError("coarse_error_scaling_probe: trajectory blew up");
            const auto last = pair.err.row(pair.err.rows - 1);
            double norm = 0.0;
            for (double v : last) norm += v * v;
            sums[ik] += std::sqrt(norm);
        }
    }
    ScalingProbeResult res;
    for (std::size_t ik = 0; ik < cfg.k_list.size(); ++ik) {
        res.k.push_back(cfg.k_list[ik]);
        res.coarse_dt.push_back(cfg.k_list[ik] * s.dt_fine);
        res.mean_abs_err.push_back(sums[ik] / cfg.realizations);
    }
    res.slope = loglog_slope(res.coarse_dt, res.mean_abs_err);
    return res;
}

inline void write_scaling_csv(std::ostream& os, const ScalingProbeResult& r) {
    os << "k,coarse_dt,mean_abs_err\n";
    os.precision(10);
    for (std::size_t i = 0; i < r.k.size(); ++i) os << r.k[i] << ',' << r.coarse_dt[i] << ',' << r.mean_abs_err[i] << '\n';
}

}  // namespace fmint

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
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmint/correct.hpp"
#include "fmint/integrate.hpp"

namespace fmint {

/// Trajectories indexed [equation i][realization w][time j][dim d].
struct TrajectoryBatch {
    std::size_t n_eq = 0;
    std::size_t m = 0;
    std::size_t steps = 0;
    std::size_t dims = 0;
    std::vector<double> data;

    TrajectoryBatch() = default;
    TrajectoryBatch(std::size_t n_eq_, std::size_t m_, std::size_t steps_, std::size_t dims_)
        : n_eq(n_eq_), m(m_), steps(steps_), dims(dims_), data(n_eq_ * m_ * steps_ * dims_, 0.0) {}

    double& operator()(std::size_t i, std::size_t w, std::size_t j, std::size_t d) {
        return data[((i * m + w) * steps + j) * dims + d];
    }
    double operator()(std::size_t i, std::size_t w, std::size_t j, std::size_t d) const {
        return data[((i * m + w) * steps + j) * dims + d];
    }

    /// Copies a (steps x dims) path into slot (i, w).
    void set_path(std::size_t i, std::size_t w, const Matrix& path) {
        if (path.rows != steps || path.cols != dims) {
            throw std::invalid_argument("TrajectoryBatch: path shape " + shape_str(path.rows, path.cols) +
                                        " does not match " + shape_str(steps, dims));
        }
        std::copy(path.data.begin(), path.data.end(), data.begin() + static_cast<std::ptrdiff_t>((i * m + w) * steps * dims));
    }
};

/// How a multi-dim difference at one time stamp becomes a scalar.
enum class DimNorm {
    euclidean,     // 2-norm over dims at each time stamp
    per_dim_max,   // metric per dim separately, then the largest
};

namespace detail {

inline void check_same_shape(const TrajectoryBatch& a, const TrajectoryBatch& b, const char* op) {
    if (a.n_eq != b.n_eq || a.m != b.m || a.steps != b.steps || a.dims != b.dims) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch [" + std::to_string(a.n_eq) + "," +
                                    std::to_string(a.m) + "," + std::to_string(a.steps) + "," +
                                    std::to_string(a.dims) + "] vs [" + std::to_string(b.n_eq) + "," +
                                    std::to_string(b.m) + "," + std::to_string(b.steps) + "," +
                                    std::to_string(b.dims) + "]");
    }
    if (a.n_eq == 0 || a.m == 0 || a.steps == 0 || a.dims == 0) {
        throw std::invalid_argument(std::string(op) + ": empty batch");
    }
}

inline double amd_dims(const TrajectoryBatch& x, const TrajectoryBatch& y, std::size_t d0, std::size_t d1) {
    double total = 0.0;
    for (std::size_t i = 0; i < x.n_eq; ++i) {
        double per_eq = 0.0;
        for (std::size_t w = 0; w < x.m; ++w) {
            double mx = 0.0;
            for (std::size_t j = 0; j < x.steps; ++j) {
                double sq = 0.0;
                for (std::size_t d = d0; d < d1; ++d) {
                    const double e = x(i, w, j, d) - y(i, w, j, d);
                    sq += e * e;
                }
                mx = std::max(mx, std::sqrt(sq));
            }
            per_eq += mx;
        }
        total += per_eq / static_cast<double>(x.m);
    }
    return total / static_cast<double>(x.n_eq);
}

inline double mad_dims(const TrajectoryBatch& x, const TrajectoryBatch& y, std::size_t d0, std::size_t d1) {
    double best = 0.0;
    std::vector<double> diff(d1 - d0);
    for (std::size_t j = 0; j < x.steps; ++j) {
        double avg = 0.0;
        for (std::size_t i = 0; i < x.n_eq; ++i) {
            std::fill(diff.begin(), diff.end(), 0.0);
            for (std::size_t w = 0; w < x.m; ++w) {
                for (std::size_t d = d0; d < d1; ++d) diff[d - d0] += x(i, w, j, d) - y(i, w, j, d);
            }
            double sq = 0.0;
            for (double v : diff) {
                const double mean = v / static_cast<double>(x.m);
                sq += mean * mean;
            }
            avg += std::sqrt(sq);
        }
        best = std::max(best, avg / static_cast<double>(x.n_eq));
    }
    return best;
}

}  // namespace detail

/// Averaged maximum difference: mean over equations and realizations of the
/// largest deviation over time.
inline double amd(const TrajectoryBatch& pred, const TrajectoryBatch& ref, DimNorm norm = DimNorm::euclidean) {
    detail::check_same_shape(pred, ref, "amd");
    if (norm == DimNorm::euclidean) return detail::amd_dims(pred, ref, 0, pred.dims);
    double mx = 0.0;
    for (std::size_t d = 0; d < pred.dims; ++d) mx = std::max(mx, detail::amd_dims(pred, ref, d, d + 1));
    return mx;
}

/// Maximum averaged difference: largest deviation over time between the
/// realization means, averaged over equations.
inline double mad(const TrajectoryBatch& pred, const TrajectoryBatch& ref, DimNorm norm = DimNorm::euclidean) {
    detail::check_same_shape(pred, ref, "mad");
    if (norm == DimNorm::euclidean) return detail::mad_dims(pred, ref, 0, pred.dims);
    double mx = 0.0;
    for (std::size_t d = 0; d < pred.dims; ++d) mx = std::max(mx, detail::mad_dims(pred, ref, d, d + 1));
    return mx;
}

/// Mean over trajectories of the 2-norm of the flattened (time, dim) error.
inline double mae(const TrajectoryBatch& pred, const TrajectoryBatch& ref) {
    detail::check_same_shape(pred, ref, "mae");
    const std::size_t len = pred.steps * pred.dims;
    double total = 0.0;
    for (std::size_t t = 0; t < pred.n_eq * pred.m; ++t) {
        double sq = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
            const double e = pred.data[t * len + k] - ref.data[t * len + k];
            sq += e * e;
        }
        total += std::sqrt(sq);
    }
    return total / static_cast<double>(pred.n_eq * pred.m);
}

/// Root of the mean over trajectories of the squared flattened 2-norm.
inline double rmse(const TrajectoryBatch& pred, const TrajectoryBatch& ref) {
    detail::check_same_shape(pred, ref, "rmse");
    const std::size_t len = pred.steps * pred.dims;
    double total = 0.0;
    for (std::size_t t = 0; t < pred.n_eq * pred.m; ++t) {
        for (std::size_t k = 0; k < len; ++k) {
            const double e = pred.data[t * len + k] - ref.data[t * len + k];
            total += e * e;
        }
    }
    return std::sqrt(total / static_cast<double>(pred.n_eq * pred.m));
}

struct Histogram {
    std::vector<double> edges;  // bins + 1
    std::vector<std::size_t> counts;
};

/// Signed errors pred - ref, pooled over all dims (dim < 0) or for one dim.
/// With lo == hi the range is taken from the data.
inline Histogram error_histogram(const TrajectoryBatch& pred, const TrajectoryBatch& ref, std::size_t bins,
                                 int dim = -1, double lo = 0.0, double hi = 0.0) {
    detail::check_same_shape(pred, ref, "error_histogram");
    if (bins == 0) throw std::invalid_argument("error_histogram: need at least one bin");
    if (dim >= static_cast<int>(pred.dims)) throw std::invalid_argument("error_histogram: dim out of range");
    std::vector<double> e;
    for (std::size_t k = 0; k < pred.data.size(); ++k) {
        if (dim >= 0 && k % pred.dims != static_cast<std::size_t>(dim)) continue;
        e.push_back(pred.data[k] - ref.data[k]);
    }
    if (lo == hi) {
        lo = *std::min_element(e.begin(), e.end());
        hi = *std::max_element(e.begin(), e.end());
        if (lo == hi) {
            lo -= 0.5;
            hi += 0.5;
        }
    }
    Histogram h;
    for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / bins);
    h.counts.assign(bins, 0);
    for (double v : e) {
        if (v < lo || v > hi) continue;
        auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
        h.counts[std::min(b, bins - 1)]++;
    }
    return h;
}

inline void write_histogram_csv(std::ostream& os, const Histogram& h) {
    os << "bin_lo,bin_hi,count\n";
    os.precision(12);
    for (std::size_t b = 0; b < h.counts.size(); ++b) os << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.counts[b] << '\n';
}

struct MetricReport {
    std::string system;
    std::string method;
    double amd = 0.0;
    double mad = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    std::size_t n_eq = 0;
    std::size_t m = 0;
    std::size_t steps = 0;
};

inline MetricReport metric_report(const std::string& system, const std::string& method, const TrajectoryBatch& pred,
                                  const TrajectoryBatch& ref, DimNorm norm = DimNorm::euclidean) {
    MetricReport r;
    r.system = system;
    r.method = method;
    r.amd = amd(pred, ref, norm);
    r.mad = mad(pred, ref, norm);
    r.mae = mae(pred, ref);
    r.rmse = rmse(pred, ref);
    r.n_eq = pred.n_eq;
    r.m = pred.m;
    r.steps = pred.steps;
    return r;
}

inline void write_metric_csv(std::ostream& os, const std::vector<MetricReport>& rows) {
    os << "system,method,MAE,RMSE,AMD,MAD\n";
    os.precision(8);
    for (const auto& r : rows) {
        os << r.system << ',' << r.method << ',' << r.mae << ',' << r.rmse << ',' << r.amd << ',' << r.mad << '\n';
    }
}

// ---------------------------------------------------------------------------
// Runtime
// ---------------------------------------------------------------------------

struct RuntimeConfig {
    int n_eq = 25;
    int m = 40;
    int n_coarse = 50;
    int k = 0;              // 0: system stride
    double dt_fine = 0.0;   // 0: system step
    int k_demos = 4;
    int repeats = 3;        // best of
    std::uint64_t seed = 0;
};

/// Wall-clock seconds for each way of producing the batch, plus the same
/// numbers normalized so the coarse solve is 1.
struct RuntimeReport {
    double fine_s = 0.0;
    double coarse_s = 0.0;
    double corrected_s = 0.0;  // coarse solve + correction
    double fine_norm() const { return fine_s / coarse_s; }
    double coarse_norm() const { return coarse_s / coarse_s; }
    double corrected_norm() const { return corrected_s / coarse_s; }
};

inline void write_runtime_csv(std::ostream& os, const std::string& system, const RuntimeReport& r) {
    os << "system,method,seconds,normalized\n";
    os.precision(8);
    os << system << ",fine," << r.fine_s << ',' << r.fine_norm() << '\n';
    os << system << ",coarse," << r.coarse_s << ',' << r.coarse_norm() << '\n';
    os << system << ",coarse+correction," << r.corrected_s << ',' << r.corrected_norm() << '\n';
}

/// Times fine simulation, coarse simulation and coarse simulation plus
/// correction on n_eq parameter draws x m noise realizations. Demos are
/// prepared beforehand and not timed.
inline RuntimeReport runtime_report(const SdeSystem& sys, Corrector& corrector, const RuntimeConfig& cfg) {
    using clock = std::chrono::steady_clock;
    const int k = cfg.k > 0 ? cfg.k : sys.stride_k;
    const double dt = cfg.dt_fine > 0.0 ? cfg.dt_fine : sys.dt_fine;
    const double hk = dt * k;
    const std::uint64_t h = sys.hash();
    std::vector<ParamVector> params;
    std::vector<std::vector<double>> x0;
    std::vector<std::vector<Demo>> demos;
    SimulationOptions opt;
    opt.keep_fine_path = false;
    for (int i = 0; i < cfg.n_eq; ++i) {
        auto prng = param_stream(cfg.seed, h, static_cast<std::uint64_t>(i));
        params.push_back(sample_params(sys, prng));
        auto irng = initial_stream(cfg.seed, h, static_cast<std::uint64_t>(i), 0);
        x0.push_back(sample_initial(sys, irng));
        std::vector<Demo> ds;
        for (int e = 0; e < cfg.k_demos; ++e) {
            auto drng = initial_stream(cfg.seed, h, static_cast<std::uint64_t>(i), 1000 + static_cast<std::uint64_t>(e));
            const auto dx0 = sample_initial(sys, drng);
            NoiseStream ns({cfg.seed, h, static_cast<std::uint64_t>(i), 1000 + static_cast<std::uint64_t>(e), 0}, dt,
                           sys.noise_dim);
            auto pair = simulate_pair(sys, params.back(), dx0, ns, cfg.n_coarse, k, opt);
            if (pair.rejected) continue;
            ds.push_back(build_demo(pair, sys, params.back()));
        }
        demos.push_back(std::move(ds));
    }
    auto seed_of = [&](int i, int w, std::uint64_t tag) {
        return SeedMaterial{cfg.seed ^ tag, h, static_cast<std::uint64_t>(i), 0, static_cast<std::uint64_t>(w)};
    };
    volatile double sink = 0.0;
    RuntimeReport best{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
                       std::numeric_limits<double>::infinity()};
    for (int rep = 0; rep < std::max(1, cfg.repeats); ++rep) {
        auto t0 = clock::now();
        for (int i = 0; i < cfg.n_eq; ++i) {
            for (int w = 0; w < cfg.m; ++w) {
                NoiseStream ns(seed_of(i, w, 1), dt, sys.noise_dim);
                auto r = simulate_path(sys, params[static_cast<std::size_t>(i)], x0[static_cast<std::size_t>(i)], ns,
                                       cfg.n_coarse * k, k, opt);
                sink = sink + r.states.data.back();
            }
        }
        auto t1 = clock::now();
        for (int i = 0; i < cfg.n_eq; ++i) {
            for (int w = 0; w < cfg.m; ++w) {
                NoiseStream ns(seed_of(i, w, 2), hk, sys.noise_dim);
                auto r = simulate_path(sys, params[static_cast<std::size_t>(i)], x0[static_cast<std::size_t>(i)], ns,
                                       cfg.n_coarse, 1, opt);
                sink = sink + r.states.data.back();
            }
        }
        auto t2 = clock::now();
        for (int i = 0; i < cfg.n_eq; ++i) {
            std::vector<RolloutInput> inputs;
            for (int w = 0; w < cfg.m; ++w) {
                NoiseStream ns(seed_of(i, w, 2), hk, sys.noise_dim);
                auto r = simulate_path(sys, params[static_cast<std::size_t>(i)], x0[static_cast<std::size_t>(i)], ns,
                                       cfg.n_coarse, 1, opt);
                RolloutInput in;
                in.system = std::string(sys.name());
                in.params = params[static_cast<std::size_t>(i)].values;
                in.coarse = std::move(r.states);
                in.agg_noise = std::move(r.agg_noise);
                in.coarse_dt = hk;
                in.noise_channels = sys.demo_noise_channels;
                inputs.push_back(std::move(in));
            }
            auto res = rollout_many(corrector, inputs, demos[static_cast<std::size_t>(i)],
                                    static_cast<std::size_t>(cfg.n_coarse));
            sink = sink + res.back().corrected.data.back();
        }
        auto t3 = clock::now();
        best.fine_s = std::min(best.fine_s, std::chrono::duration<double>(t1 - t0).count());
        best.coarse_s = std::min(best.coarse_s, std::chrono::duration<double>(t2 - t1).count());
        best.corrected_s = std::min(best.corrected_s, std::chrono::duration<double>(t3 - t2).count());
    }
    (void)sink;
    return best;
}

}  // namespace fmint

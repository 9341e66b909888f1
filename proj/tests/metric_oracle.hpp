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

// Brute-force metric implementations over nested vectors, written straight
// from the definitions without sharing code with the library.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fmint/metrics.hpp"

namespace fmint::testing {

using Nested = std::vector<std::vector<std::vector<std::vector<double>>>>;  // [i][w][j][d]

inline Nested nested(const TrajectoryBatch& b) {
    Nested out(b.n_eq, std::vector<std::vector<std::vector<double>>>(
                           b.m, std::vector<std::vector<double>>(b.steps, std::vector<double>(b.dims))));
    for (std::size_t i = 0; i < b.n_eq; ++i)
        for (std::size_t w = 0; w < b.m; ++w)
            for (std::size_t j = 0; j < b.steps; ++j)
                for (std::size_t d = 0; d < b.dims; ++d) out[i][w][j][d] = b(i, w, j, d);
    return out;
}

inline double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline std::vector<double> minus(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> r(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) r[k] = a[k] - b[k];
    return r;
}

inline double brute_amd(const Nested& x, const Nested& y) {
    double outer = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double inner = 0.0;
        for (std::size_t w = 0; w < x[i].size(); ++w) {
            std::vector<double> per_t;
            for (std::size_t j = 0; j < x[i][w].size(); ++j) per_t.push_back(norm2(minus(x[i][w][j], y[i][w][j])));
            inner += *std::max_element(per_t.begin(), per_t.end());
        }
        outer += inner / static_cast<double>(x[i].size());
    }
    return outer / static_cast<double>(x.size());
}

inline double brute_mad(const Nested& x, const Nested& y) {
    const std::size_t steps = x[0][0].size(), dims = x[0][0][0].size();
    std::vector<double> per_t;
    for (std::size_t j = 0; j < steps; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            std::vector<double> mx(dims, 0.0), my(dims, 0.0);
            for (std::size_t w = 0; w < x[i].size(); ++w) {
                for (std::size_t d = 0; d < dims; ++d) {
                    mx[d] += x[i][w][j][d] / static_cast<double>(x[i].size());
                    my[d] += y[i][w][j][d] / static_cast<double>(x[i].size());
                }
            }
            s += norm2(minus(mx, my));
        }
        per_t.push_back(s / static_cast<double>(x.size()));
    }
    return *std::max_element(per_t.begin(), per_t.end());
}

inline std::vector<double> flat_diff(const Nested& x, const Nested& y, std::size_t i, std::size_t w) {
    std::vector<double> r;
    for (std::size_t j = 0; j < x[i][w].size(); ++j)
        for (std::size_t d = 0; d < x[i][w][j].size(); ++d) r.push_back(x[i][w][j][d] - y[i][w][j][d]);
    return r;
}

inline double brute_mae(const Nested& x, const Nested& y) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t w = 0; w < x[i].size(); ++w, ++n) s += norm2(flat_diff(x, y, i, w));
    return s / static_cast<double>(n);
}

inline double brute_rmse(const Nested& x, const Nested& y) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t w = 0; w < x[i].size(); ++w, ++n) {
            const double e = norm2(flat_diff(x, y, i, w));
            s += e * e;
        }
    return std::sqrt(s / static_cast<double>(n));
}

inline TrajectoryBatch random_batch(CounterRng& rng, std::size_t n_eq, std::size_t m, std::size_t steps,
                                    std::size_t dims, double spread = 1.0) {
    TrajectoryBatch b(n_eq, m, steps, dims);
    for (double& v : b.data) v = spread * rng.normal();
    return b;
}

/// Largest relative gap between library and brute-force metrics on one
/// random batch pair.
inline double metric_oracle_gap(std::uint64_t seed) {
    CounterRng rng(derive_key({seed, 0x4D455452ULL}));
    const std::size_t n_eq = 1 + rng.below(4), m = 1 + rng.below(5), steps = 1 + rng.below(6), dims = 1 + rng.below(3);
    const TrajectoryBatch x = random_batch(rng, n_eq, m, steps, dims);
    const TrajectoryBatch y = random_batch(rng, n_eq, m, steps, dims);
    const Nested nx = nested(x), ny = nested(y);
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
    return std::max({rel(amd(x, y), brute_amd(nx, ny)), rel(mad(x, y), brute_mad(nx, ny)),
                     rel(mae(x, y), brute_mae(nx, ny)), rel(rmse(x, y), brute_rmse(nx, ny))});
}

}  // namespace fmint::testing

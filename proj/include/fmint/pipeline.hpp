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

#include <cstdint>
#include <string>
#include <vector>

#include "fmint/correct.hpp"
#include "fmint/dataset.hpp"
#include "fmint/metrics.hpp"

namespace fmint {

/// Held-out test protocol: n_eq parameter draws, each with n_ics x n_noises
/// trajectories of `blocks` x N coarse steps, corrected block by block with
/// k_demos demos of length N drawn from the same parameters.
struct EvalConfig {
    int n_eq = 5;
    int n_ics = 25;
    int n_noises = 40;
    int k_demos = 4;
    int blocks = 1;
    int n_coarse = 0;  // block length, 0: system default
    std::uint64_t seed = 1;
    int workers = 1;
    DimNorm norm = DimNorm::euclidean;
    std::size_t hist_bins = 50;
};

struct EvalResult {
    MetricReport coarse;
    MetricReport corrected;
    Histogram hist_coarse;
    Histogram hist_corrected;
    TrajectoryBatch fine_batch;
    TrajectoryBatch coarse_batch;
    TrajectoryBatch corrected_batch;
    std::vector<CorrectionResult> examples;  // first trajectory of each equation
};

/// Demo set for parameter draw `pi`: ICs indexed past the test ICs so demos
/// never coincide with test trajectories.
inline std::vector<Demo> eval_demos(const SdeSystem& s, const EvalConfig& cfg, std::uint32_t pi) {
    DatasetConfig dc;
    dc.n_params = cfg.n_eq;
    dc.n_ics = cfg.n_ics + cfg.k_demos;
    dc.n_noises = cfg.n_noises;
    dc.seed = cfg.seed;
    dc.n_coarse = cfg.n_coarse > 0 ? cfg.n_coarse : s.horizon_steps_coarse;
    std::vector<Demo> demos;
    for (int e = 0; e < cfg.k_demos; ++e) {
        auto [rec, rej] = simulate_record(s, dc, pi, static_cast<std::uint32_t>(cfg.n_ics + e), 0);
        demos.push_back(record_demo(s, rec));
    }
    return demos;
}

inline EvalResult evaluate(const SdeSystem& s, Corrector& corrector, const EvalConfig& cfg) {
    const int N = cfg.n_coarse > 0 ? cfg.n_coarse : s.horizon_steps_coarse;
    DatasetConfig dc;
    dc.n_params = cfg.n_eq;
    dc.n_ics = cfg.n_ics;
    dc.n_noises = cfg.n_noises;
    dc.seed = cfg.seed;
    dc.n_coarse = N * cfg.blocks;
    dc.workers = cfg.workers;
    const Dataset test = generate_dataset(s, dc);
    const std::size_t m = static_cast<std::size_t>(cfg.n_ics) * static_cast<std::size_t>(cfg.n_noises);
    const std::size_t steps = static_cast<std::size_t>(dc.n_coarse) + 1;
    const std::size_t dims = static_cast<std::size_t>(s.state_dim);
    EvalResult out;
    out.fine_batch = TrajectoryBatch(static_cast<std::size_t>(cfg.n_eq), m, steps, dims);
    out.coarse_batch = out.fine_batch;
    out.corrected_batch = out.fine_batch;
    for (int i = 0; i < cfg.n_eq; ++i) {
        const auto demos = eval_demos(s, cfg, static_cast<std::uint32_t>(i));
        std::vector<RolloutInput> inputs;
        for (std::size_t w = 0; w < m; ++w) {
            const auto& r = test.records[static_cast<std::size_t>(i) * m + w];
            inputs.push_back(RolloutInput::from_pair(r.pair, s, params_of(s, r.params)));
        }
        auto res = rollout_many(corrector, inputs, demos, static_cast<std::size_t>(N));
        for (std::size_t w = 0; w < m; ++w) {
            out.fine_batch.set_path(static_cast<std::size_t>(i), w, *res[w].fine);
            out.coarse_batch.set_path(static_cast<std::size_t>(i), w, res[w].coarse);
            out.corrected_batch.set_path(static_cast<std::size_t>(i), w, res[w].corrected);
        }
        out.examples.push_back(std::move(res.front()));
    }
    const std::string name(s.name());
    out.coarse = metric_report(name, "coarse", out.coarse_batch, out.fine_batch, cfg.norm);
    out.corrected = metric_report(name, "corrected", out.corrected_batch, out.fine_batch, cfg.norm);
    // Shared range so the two histograms are comparable.
    Histogram hc = error_histogram(out.coarse_batch, out.fine_batch, cfg.hist_bins);
    out.hist_coarse = hc;
    out.hist_corrected =
        error_histogram(out.corrected_batch, out.fine_batch, cfg.hist_bins, -1, hc.edges.front(), hc.edges.back());
    return out;
}

}  // namespace fmint

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

// Random ICL samples and the information-flow properties of the model,
// shared by the unit tests and the acceptance run.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fmint/dataset.hpp"
#include "fmint/model.hpp"

namespace fmint::testing {

struct RandomSample {
    IclSample sample;
    NormStats stats;
};

/// Demos from one random system and parameter draw, K in [1, 4], N in [2, 8],
/// sometimes with prompt tokens and timestamp dropout.
inline RandomSample random_sample(std::uint64_t seed, const ModelConfig& c) {
    CounterRng rng(derive_key({seed, 0x53414D50ULL}));
    const auto& reg = registry();
    const SdeSystem& s = reg[rng.below(reg.size())];
    const int K = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(4, c.max_examples - 1))));
    const int N = 2 + static_cast<int>(rng.below(7));
    DatasetConfig dc;
    dc.n_params = 1;
    dc.n_ics = K + 1;
    dc.n_noises = 1;
    dc.seed = seed;
    dc.n_coarse = N;
    std::vector<Demo> demos;
    for (int e = 0; e <= K; ++e) {
        demos.push_back(record_demo(s, simulate_record(s, dc, 0, static_cast<std::uint32_t>(e), 0).first));
    }
    RandomSample out;
    out.stats = compute_norm_stats(demos);
    Demo query = demos.back();
    demos.pop_back();
    std::optional<PromptTokens> prompt;
    if (c.max_prompt_tokens > 0 && rng.uniform() < 0.3) {
        prompt = embed_prompt_stub("sample " + std::to_string(seed), 1 + rng.below(2), static_cast<std::size_t>(c.d_model));
    }
    out.sample = assemble_icl_sample(std::move(demos), std::move(query), prompt);
    if (rng.uniform() < 0.5) out.sample = apply_timestamp_dropout(std::move(out.sample), 0.2, rng);
    return out;
}

/// Weights with nonzero biases so every parameter shapes the output.
inline ModelParams<double> random_model(const ModelConfig& c, std::uint64_t seed) {
    ModelParams<double> mp = init_params<double>(c, seed);
    CounterRng rng(derive_key({seed, 0x42494153ULL}));
    for (auto& p : mp.tensors) {
        if (is_bias(p.name) || is_gain(p.name)) {
            for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += rng.uniform(-0.2, 0.2);
        }
    }
    return mp;
}

inline Tensor<double> model_output(ModelParams<double>& mp, const IclSample& s, const NormStats& st) {
    const ModelInput<double> in = encode<double>(s, st, mp.config);
    Tape<double> t;
    return forward(t, mp, in).value();
}

/// Overwrites every feature of the err tokens of example `e` with noise.
inline void scramble_err_block(IclSample& s, int e, CounterRng& rng) {
    const std::size_t P = s.prompt_count();
    for (std::size_t pos = P; pos < s.token_count(); ++pos) {
        if (s.category[pos] != TokenCategory::err || s.example_index[pos] != e) continue;
        for (std::size_t f = 0; f < static_cast<std::size_t>(kFeatureDim); ++f) {
            s.tokens(pos - P, f) = rng.uniform(-5.0, 5.0);
        }
    }
}

struct PropertyResult {
    bool ok = true;
    std::string detail;
};

/// (a) The query's err block reaches no output.
inline PropertyResult query_err_invisible(std::uint64_t seed, const ModelConfig& c) {
    auto [s, st] = random_sample(seed, c);
    auto mp = random_model(c, seed);
    const Tensor<double> y0 = model_output(mp, s, st);
    CounterRng rng(derive_key({seed, 1}));
    scramble_err_block(s, static_cast<int>(s.num_examples()) - 1, rng);
    const Tensor<double> y1 = model_output(mp, s, st);
    if (y0 != y1) return {false, "seed " + std::to_string(seed) + ": output changed"};
    return {};
}

/// (b) Demo e's err block leaves the outputs of examples 0..e untouched.
inline PropertyResult demo_err_causal(std::uint64_t seed, const ModelConfig& c) {
    auto [s, st] = random_sample(seed, c);
    auto mp = random_model(c, seed);
    CounterRng rng(derive_key({seed, 2}));
    const int e = static_cast<int>(rng.below(s.num_examples() - 1));
    const Tensor<double> y0 = model_output(mp, s, st);
    scramble_err_block(s, e, rng);
    const Tensor<double> y1 = model_output(mp, s, st);
    bool later_changed = false;
    for (std::size_t i = 0; i < s.cond_positions.size(); ++i) {
        const int ex = s.example_index[s.cond_positions[i]];
        const auto r = static_cast<Eigen::Index>(i);
        if (ex <= e && y0.row(r) != y1.row(r)) {
            return {false, "seed " + std::to_string(seed) + ": example " + std::to_string(ex) +
                               " changed after perturbing demo " + std::to_string(e)};
        }
        if (ex > e && y0.row(r) != y1.row(r)) later_changed = true;
    }
    // Later examples do see the block; a silent model would pass vacuously.
    if (!later_changed) return {false, "seed " + std::to_string(seed) + ": perturbation had no effect at all"};
    return {};
}

/// (c) Permuting the query's cond columns permutes its outputs.
inline PropertyResult query_permutation_equivariant(std::uint64_t seed, const ModelConfig& c, double tol) {
    auto [s, st] = random_sample(seed, c);
    auto mp = random_model(c, seed);
    const Tensor<double> y0 = model_output(mp, s, st);
    const int q = static_cast<int>(s.num_examples()) - 1;
    const std::size_t P = s.prompt_count();
    std::vector<std::size_t> rows;  // token rows of the query's cond block
    std::vector<std::size_t> outs;  // matching output rows
    for (std::size_t i = 0; i < s.cond_positions.size(); ++i) {
        if (s.example_index[s.cond_positions[i]] == q) {
            rows.push_back(s.cond_positions[i] - P);
            outs.push_back(i);
        }
    }
    std::vector<std::size_t> perm(rows.size());
    std::iota(perm.begin(), perm.end(), 0);
    CounterRng rng(derive_key({seed, 3}));
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    IclSample p = s;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t f = 0; f < static_cast<std::size_t>(kFeatureDim); ++f) {
            p.tokens(rows[i], f) = s.tokens(rows[perm[i]], f);
        }
        p.loss_mask[outs[i]] = s.loss_mask[outs[perm[i]]];
        p.dropped[outs[i]] = s.dropped[outs[perm[i]]];
    }
    const Tensor<double> y1 = model_output(mp, p, st);
    double worst = 0.0;
    for (Eigen::Index r = 0; r < y0.rows(); ++r) {
        const auto it = std::find(outs.begin(), outs.end(), static_cast<std::size_t>(r));
        const Eigen::Index src = it == outs.end() ? r : static_cast<Eigen::Index>(outs[perm[it - outs.begin()]]);
        worst = std::max(worst, (y1.row(r) - y0.row(src)).cwiseAbs().maxCoeff());
    }
    const double scale = std::max(1.0, y0.cwiseAbs().maxCoeff());
    if (worst > tol * scale) {
        return {false, "seed " + std::to_string(seed) + ": max deviation " + std::to_string(worst)};
    }
    return {};
}

/// Full forward plus MSD loss against central differences; max relative error.
inline double model_grad_error(std::uint64_t seed, const ModelConfig& c, std::size_t max_coords) {
    RandomSample rs = random_sample(seed, c);
    if (!rs.sample.trainable()) rs = random_sample(seed + 7919, c);
    auto mp = random_model(c, seed);
    const ModelInput<double> in = encode<double>(rs.sample, rs.stats, c);
    if (in.scored == 0) return 0.0;
    return grad_check([&](Tape<double>& t) { return msd_loss(forward(t, mp, in), in); }, mp.pointers(), 1e-5,
                      max_coords, seed);
}

}  // namespace fmint::testing

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

#include <sstream>

#include "fmint/correct.hpp"
#include "rollout_props.hpp"

namespace fmint {
namespace {

using testing::oracle_run;

ModelParams<float> tiny_model(std::uint64_t seed) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_ff = 32;
    return init_params<float>(c, seed);
}

TEST(Oracle, RolloutReproducesFinePathForEverySystem) {
    for (const auto& s : registry()) {
        EXPECT_LT(testing::oracle_rollout_error(s, 17, 4, 3), 1e-9) << s.name();
    }
}

TEST(Rollout, ZeroCorrectorGivesCoarsePath) {
    const auto& s = get_system(SystemId::gbm);
    auto run = oracle_run(s, 5, 3, 3);
    ZeroCorrector zero;
    const auto res = rollout_many(zero, run.inputs, run.demos, run.block);
    for (std::size_t t = 0; t < res.size(); ++t) {
        EXPECT_EQ(res[t].corrected, run.inputs[t].coarse);
        EXPECT_EQ(res[t].shifts.size(), 3u);
        ASSERT_TRUE(res[t].residual.has_value());
    }
}

TEST(Rollout, SingleBlockMatchesCorrectBlock) {
    const auto& s = get_system(SystemId::ou);
    auto run = oracle_run(s, 6, 1, 1);
    ModelCorrector model(tiny_model(1), compute_norm_stats(run.demos));
    const auto rolled = rollout(model, run.inputs[0], run.demos, run.block);
    const Demo query = query_conditions(build_demo(
        [&] {
            TrajectoryPair p;
            p.state_dim = 1;
            p.noise_dim = 1;
            p.dt_fine = s.dt_fine;
            p.stride_k = s.stride_k;
            p.n_coarse = static_cast<int>(run.block);
            p.coarse = run.inputs[0].coarse;
            p.agg_noise = run.inputs[0].agg_noise;
            p.err = Matrix(p.coarse.rows, 1);
            return p;
        }(),
        s, params_of(s, run.inputs[0].params)));
    const auto direct = correct_block(model, run.demos, query);
    ASSERT_EQ(direct.corrected.rows, rolled.corrected.rows);
    for (std::size_t i = 0; i < direct.corrected.data.size(); ++i) {
        EXPECT_NEAR(rolled.corrected.data[i], direct.corrected.data[i], 1e-12);
    }
}

TEST(Rollout, BlocksJoinAndUseLocalTimes) {
    const auto& s = get_system(SystemId::double_well);
    auto run = oracle_run(s, 8, 2, 3, 5);
    ModelCorrector model(tiny_model(2), compute_norm_stats(run.demos));
    const auto res = rollout_many(model, run.inputs, run.demos, run.block);
    for (std::size_t t = 0; t < res.size(); ++t) {
        const auto& r = res[t];
        ASSERT_EQ(r.shifts.size(), 3u);
        EXPECT_EQ(r.corrected(0, 0), run.inputs[t].coarse(0, 0));
        for (std::size_t b = 0; b < 3; ++b) {
            const std::size_t s0 = b * run.block;
            EXPECT_DOUBLE_EQ(r.shifts[b][0], r.corrected(s0, 0) - run.inputs[t].coarse(s0, 0));
            for (std::size_t n = 1; n <= run.block; ++n) {
                EXPECT_NEAR(r.corrected(s0 + n, 0),
                            run.inputs[t].coarse(s0 + n, 0) + r.shifts[b][0] + r.predicted_err(s0 + n, 0), 1e-12);
            }
        }
        // Global time axis on the result.
        EXPECT_DOUBLE_EQ(r.times[10], 10 * run.inputs[t].coarse_dt);
    }
}

TEST(Rollout, PartialLastBlock) {
    const auto& s = get_system(SystemId::ou);
    auto run = oracle_run(s, 9, 1, 2, 4);
    OracleCorrector oracle({*run.inputs[0].fine});
    const auto r = rollout(oracle, run.inputs[0], run.demos, 3);  // 8 steps in blocks of 3, 3, 2
    EXPECT_EQ(r.shifts.size(), 3u);
    for (std::size_t i = 0; i < r.corrected.data.size(); ++i) {
        EXPECT_NEAR(r.corrected.data[i], run.inputs[0].fine->data[i], 1e-12);
    }
}

TEST(Rollout, RejectsBadInput) {
    const auto& s = get_system(SystemId::ou);
    auto run = oracle_run(s, 10, 1, 1, 4);
    ZeroCorrector zero;
    EXPECT_THROW(rollout(zero, run.inputs[0], run.demos, 0), std::invalid_argument);
    auto bad = run.inputs[0];
    bad.agg_noise.rows -= 1;
    EXPECT_THROW(rollout(zero, bad, run.demos, 4), std::invalid_argument);
    auto other = run.demos;
    other[0].params[0] += 1.0;
    EXPECT_THROW(rollout(zero, run.inputs[0], other, 4), std::runtime_error);
}

TEST(ModelCorrector, ZeroShotNeedsPrompt) {
    const auto& s = get_system(SystemId::ou);
    auto run = oracle_run(s, 11, 1, 1, 4);
    ModelCorrector model(tiny_model(3), NormStats{});
    EXPECT_THROW(rollout(model, run.inputs[0], {}, 4), std::runtime_error);
    ModelCorrector prompted(tiny_model(3), NormStats{}, embed_prompt_stub("mean reverting", 2, 16));
    const auto r = rollout(prompted, run.inputs[0], {}, 4);
    EXPECT_EQ(r.demos_used, 0u);
    for (double v : r.corrected.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Csv, HeaderAndRows) {
    CorrectionResult r;
    r.coarse = Matrix(2, 1);
    r.coarse.data = {1.0, 2.0};
    r.predicted_err = Matrix(2, 1);
    r.predicted_err.data = {0.0, 0.5};
    r.corrected = Matrix(2, 1);
    r.corrected.data = {1.0, 2.5};
    r.fine = r.corrected;
    r.times = {0.0, 0.1};
    std::ostringstream os;
    write_correction_csv(os, r);
    EXPECT_EQ(os.str(), "n,t,coarse1,predicted_err1,corrected1,fine1\n0,0,1,0,1,1\n1,0.1,2,0.5,2.5,2.5\n");
}

}  // namespace
}  // namespace fmint

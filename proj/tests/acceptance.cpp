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


// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// when a criterion fails, unless it was named with --known-fail.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fmint/cli.hpp"
#include "fmint/pipeline.hpp"
#include "fmint/train.hpp"
#include "metric_oracle.hpp"
#include "model_props.hpp"
#include "rollout_props.hpp"

namespace fs = std::filesystem;
using namespace fmint;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

ParamVector gbm_params(double mu, double sigma) {
    return make_params(get_system(SystemId::gbm), {{"mu", mu}, {"sigma", sigma}});
}

Outcome integrator_orders() {
    const auto t0 = clock_type::now();
    const auto& s = get_system(SystemId::gbm);
    OrderProbeConfig em;
    em.scheme = Scheme::euler_maruyama;
    OrderProbeConfig mil = em;
    mil.scheme = Scheme::milstein;
    const double a = strong_order_probe(s, gbm_params(0.1, 0.2), em).slope;
    const double b = strong_order_probe(s, gbm_params(0.1, 0.2), mil).slope;
    const double secs = seconds_since(t0);
    const bool ok = a >= 0.4 && a <= 0.6 && b >= 0.85 && b <= 1.15 && secs < 120.0;
    return {ok, "EM slope " + fmt(a) + " in [0.4, 0.6], Milstein slope " + fmt(b) + " in [0.85, 1.15], " +
                    fmt(secs) + " s"};
}

Outcome coarse_scaling() {
    const auto t0 = clock_type::now();
    ScalingProbeConfig cfg;
    const auto& gbm = get_system(SystemId::gbm);
    const std::vector<double> gx{75.0};
    const double a = coarse_error_scaling_probe(gbm, gbm_params(0.1, 0.2), gx, cfg).slope;
    const auto& ou = get_system(SystemId::ou);
    const auto op = make_params(ou, {{"theta", 0.3}, {"mu", 3.0}, {"sigma", 0.3}});
    const std::vector<double> ox{3.0};
    const double b = coarse_error_scaling_probe(ou, op, ox, cfg).slope;
    const double secs = seconds_since(t0);
    const bool ok = a >= 0.8 && a <= 1.2 && b >= 1.2 && b <= 1.8 && secs < 120.0;
    return {ok, "GBM slope " + fmt(a) + " in [0.8, 1.2], OU slope " + fmt(b) + " in [1.2, 1.8], " + fmt(secs) + " s"};
}

Outcome oracle_rollout() {
    double worst = 0.0;
    std::string at;
    for (const auto& s : registry()) {
        const double e = testing::oracle_rollout_error(s, 17, 10, 3);
        if (!(e <= worst)) {
            worst = e;
            at = std::string(s.name());
        }
    }
    return {worst < 1e-9, std::to_string(registry().size()) + " systems, max relative error " + fmt(worst) +
                              (at.empty() ? "" : " (" + at + ")")};
}

Outcome mask_properties() {
    const ModelConfig c = toy_config();
    int fails[3] = {0, 0, 0};
    std::string first;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const testing::PropertyResult r[3] = {testing::query_err_invisible(seed, c),
                                              testing::demo_err_causal(seed, c),
                                              testing::query_permutation_equivariant(seed, c, 1e-10)};
        for (int p = 0; p < 3; ++p) {
            if (r[p].ok) continue;
            ++fails[p];
            if (first.empty()) first = "; first failure: " + r[p].detail;
        }
    }
    return {fails[0] + fails[1] + fails[2] == 0, "failures (a) " + std::to_string(fails[0]) + "/100, (b) " +
                                                     std::to_string(fails[1]) + "/100, (c) " +
                                                     std::to_string(fails[2]) + "/100" + first};
}

Outcome gradient_check() {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) worst = std::max(worst, testing::model_grad_error(seed, toy_config(), 300));
    return {worst < 1e-3, "max relative error " + fmt(worst) + " over 5 seeds"};
}

Outcome metric_oracle() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) worst = std::max(worst, testing::metric_oracle_gap(seed));
    // Hand cases: a 3-4-5 difference and cancelling errors.
    TrajectoryBatch ref(1, 1, 2, 2), pred(1, 1, 2, 2);
    pred(0, 0, 1, 0) = 3.0;
    pred(0, 0, 1, 1) = 4.0;
    TrajectoryBatch r2(1, 2, 3, 1), p2(1, 2, 3, 1);
    for (std::size_t j = 0; j < 3; ++j) {
        p2(0, 0, j, 0) = 0.25;
        p2(0, 1, j, 0) = -0.25;
    }
    const bool hand = amd(pred, ref) == 5.0 && mae(pred, ref) == 5.0 && amd(pred, ref, DimNorm::per_dim_max) == 4.0 &&
                      mad(p2, r2) == 0.0 && amd(p2, r2) == 0.25;
    return {worst < 1e-12 && hand,
            "max gap " + fmt(worst) + " over 50 batches, hand cases " + (hand ? "exact" : "wrong")};
}

Outcome corrected_beats_coarse() {
    const auto t0 = clock_type::now();
    const auto& s = get_system(SystemId::ou);
    DatasetConfig dc;
    dc.n_params = 200;
    dc.n_ics = 5;
    dc.n_noises = 10;
    dc.seed = 7;
    Dataset ds = generate_dataset(s, dc);
    const NormStats st = compute_norm_stats(s, ds.records);
    const std::vector<SystemData> data{SystemData(s, st, std::move(ds.records))};
    TrainConfig tc;
    tc.steps_per_epoch = 5000;
    tc.batch_size = 8;
    tc.k_demos = 4;
    tc.peak_lr = 1e-3;
    tc.seed = 3;
    const TrainResult tr = train_loop(toy_config(), data, tc);
    ModelCorrector corrector(tr.checkpoint.model(), st);
    EvalConfig ec;
    ec.seed = 99;
    const EvalResult ev = evaluate(s, corrector, ec);
    const double ratio = ev.corrected.amd / ev.coarse.amd;
    const double secs = seconds_since(t0);
    return {ratio <= 0.5 && secs < 1800.0, "AMD corrected " + fmt(ev.corrected.amd) + " / coarse " +
                                               fmt(ev.coarse.amd) + " = " + fmt(ratio) + " (need <= 0.5), " +
                                               fmt(secs) + " s"};
}

Outcome runtime_direction() {
    const auto& s = get_system(SystemId::stochastic_lorenz);
    ModelCorrector corrector(init_params<float>(toy_config(), 1), NormStats{});
    RuntimeConfig rc;
    rc.n_eq = 5;
    rc.k = 100;
    const RuntimeReport r = runtime_report(s, corrector, rc);
    return {r.corrected_s < r.fine_s, "fine " + fmt(r.fine_s) + " s, coarse " + fmt(r.coarse_s) +
                                          " s, coarse+correction " + fmt(r.corrected_s) + " s"};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FMINT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
}

Outcome determinism() {
    const fs::path dir = fs::temp_directory_path() / ("fmint-acceptance-" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const std::string d = dir.string();
    const std::string gen = "gen-data --system ou --params 20 --ics 4 --noises 5 --n-coarse 10 --seed 3 --out ";
    bool ok = run_cli(gen + d + "/g1") == 0 && run_cli(gen + d + "/g2") == 0 &&
              run_cli(gen + d + "/g4 --workers 4") == 0;
    const std::string shard = slurp(dir / "g1" / "ou.fmsd");
    const bool gen_same = ok && !shard.empty() && shard == slurp(dir / "g2" / "ou.fmsd");
    const bool par_same = ok && shard == slurp(dir / "g4" / "ou.fmsd");
    const std::string train = "train --shard " + d + "/g1/ou.fmsd --layers 1 --heads 2 --d-model 16 --d-ff 32 "
                              "--steps 20 --batch 4 --k-demos 2 --seed 5 --workers 1 --out ";
    ok = ok && run_cli(train + d + "/t1") == 0 && run_cli(train + d + "/t2") == 0;
    const std::string ck = slurp(dir / "t1" / "model.fmck");
    const bool train_same = ok && !ck.empty() && ck == slurp(dir / "t2" / "model.fmck") &&
                            slurp(dir / "t1" / "loss.csv") == slurp(dir / "t2" / "loss.csv");
    fs::remove_all(dir);
    auto yn = [](bool b) { return b ? "identical" : "DIFFERENT"; };
    return {gen_same && par_same && train_same, std::string("gen-data reruns ") + yn(gen_same) + ", 4 workers vs 1 " +
                                                    yn(par_same) + ", train reruns " + yn(train_same)};
}

Outcome parameter_count() {
    const auto n = param_count(full_scale_config());
    return {n >= 14'000'000 && n <= 18'000'000, std::to_string(n) + " parameters, need [14M, 18M]"};
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Acceptance checks"};
    std::vector<int> only, known_fail;
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
    app.add_option("--known-fail", known_fail, "Criteria whose failure does not fail the run")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"integrator strong orders", integrator_orders},
        {"coarse error scaling", coarse_scaling},
        {"oracle roll-out identity", oracle_rollout},
        {"mask information flow", mask_properties},
        {"gradient check", gradient_check},
        {"metric oracle", metric_oracle},
        {"toy corrected beats coarse", corrected_beats_coarse},
        {"runtime direction on Lorenz", runtime_direction},
        {"determinism", determinism},
        {"parameter count", parameter_count},
    };
    const std::set<int> selected(only.begin(), only.end());
    const std::set<int> tolerated(known_fail.begin(), known_fail.end());
    int unexpected = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
                  << o.detail << (o.pass || !tolerated.count(id) ? "" : " [known failure]") << std::endl;
        if (!o.pass && !tolerated.count(id)) ++unexpected;
    }
    return unexpected == 0 ? 0 : 1;
}

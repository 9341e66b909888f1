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

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmint/correct.hpp"
#include "fmint/dataset.hpp"
#include "fmint/integrate.hpp"
#include "fmint/metrics.hpp"
#include "fmint/model.hpp"
#include "fmint/pipeline.hpp"
#include "fmint/plot.hpp"
#include "fmint/train.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fmint {

/// Keeps large tensors on the heap instead of fresh mmap pages. Training
/// allocates and frees many multi-megabyte buffers per step, and the default
/// glibc thresholds turn each of them into page faults.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
}

namespace cli {

/// JSON reader/writer for CLI11 configs. Values are kept as the strings the
/// parser saw so a dump read back with --config reproduces the same run.
/// Options of the selected subcommand live in an object named after it.
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
        return dump(app, default_also).dump(2) + "\n";
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json j;
        try {
            input >> j;
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConversionError("config is not valid JSON: " + std::string(e.what()));
        }
        if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
        std::vector<CLI::ConfigItem> items;
        collect(j, {}, items);
        return items;
    }

private:
    static nlohmann::json dump(const CLI::App* app, bool default_also) {
        nlohmann::json j = nlohmann::json::object();
        for (const CLI::Option* opt : app->get_options({})) {
            if (!opt->get_configurable()) continue;
            const std::string name = opt->get_single_name();
            if (name.empty()) continue;
            if (opt->get_type_size() == 0) {
                if (opt->count() > 0 || default_also) j[name] = opt->count() > 0 ? "true" : "false";
                continue;
            }
            // Unset list options are left out.
            if (opt->count() > 0) {
                const auto& r = opt->results();
                if (opt->get_expected_max() > 1) {
                    j[name] = r;
                } else {
                    j[name] = r.back();
                }
            } else if (default_also && opt->get_expected_max() <= 1 && !opt->get_default_str().empty()) {
                j[name] = opt->get_default_str();
            }
        }
        for (const CLI::App* sub : app->get_subcommands()) j[sub->get_name()] = dump(sub, default_also);
        return j;
    }

    static void collect(const nlohmann::json& j, const std::vector<std::string>& parents,
                        std::vector<CLI::ConfigItem>& items) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it->is_object()) {
                auto p = parents;
                p.push_back(it.key());
                // "++" / "--" enter and leave a subcommand section, as CLI11's
                // own readers do; entering marks the subcommand as selected.
                items.push_back(section(p, "++"));
                collect(*it, p, items);
                items.push_back(section(p, "--"));
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = it.key();
            if (it->is_array()) {
                for (const auto& v : *it) item.inputs.push_back(scalar(v, it.key()));
            } else {
                item.inputs.push_back(scalar(*it, it.key()));
            }
            items.push_back(std::move(item));
        }
    }

    static CLI::ConfigItem section(const std::vector<std::string>& p, const std::string& marker) {
        CLI::ConfigItem item;
        item.parents.assign(p.begin(), p.end() - 1);
        item.name = marker;
        item.parents.push_back(p.back());
        return item;
    }

    static std::string scalar(const nlohmann::json& v, const std::string& key) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number_integer()) return std::to_string(v.get<long long>());
        if (v.is_number()) return v.dump();
        throw CLI::ConversionError("config value for '" + key + "' must be a string, number or boolean");
    }
};

/// Options shared by every subcommand.
struct Common {
    std::uint64_t seed = 0;
    int workers = 1;
    std::string out = "out";
};

struct GenDataOpts {
    std::string system;
    int params = 20, ics = 10, noises = 40, n_coarse = 0;
    std::string name;
};

struct ModelOpts {
    int layers = 2, heads = 4, d_model = 64, d_ff = 256, head_dim = 0, max_examples = 5, prompt_tokens = 8;
    bool full = false;
    ModelConfig config() const {
        if (full) return full_scale_config();
        ModelConfig c;
        c.n_layers = layers;
        c.n_heads = heads;
        c.d_model = d_model;
        c.d_ff = d_ff;
        c.head_dim = head_dim;
        c.max_examples = max_examples;
        c.max_prompt_tokens = prompt_tokens;
        return c;
    }
};

struct TrainOpts {
    std::vector<std::string> shards;
    int epochs = 1, steps = 1000, batch = 8, k_demos = 4;
    double lr = 1e-4, warmup = 0.05, dropout = 0.05, prompt_prob = 0.0, weight_decay = 1e-4, clip = 1.0;
    std::string resume, checkpoint = "model.fmck";
};

struct FinetuneOpts {
    std::string base;
    std::vector<std::string> shards;
    int n_traj = 50, iters = 1000, batch = 8, k_demos = 4;
    double lr = 1e-4, warmup = 0.05, dropout = 0.05;
    std::string checkpoint = "finetuned.fmck";
};

struct CorrectorOpts {
    std::string kind = "model";
    std::string checkpoint;
};

struct EvalOpts {
    std::string system;
    int eq = 5, ics = 25, noises = 40, k_demos = 4, blocks = 1, n_coarse = 0, bins = 50;
    std::string norm = "euclidean";
    bool runtime = false;
};

struct RolloutOpts {
    std::string system;
    int blocks = 3, n_coarse = 0, k_demos = 4, param_index = 0, ic_index = 0, noise_index = 0;
};

struct ConvergenceOpts {
    std::string system = "gbm";
    std::string probe = "order";
    std::string method = "em";
    int realizations = 2000;
    std::vector<std::string> param_values;
    std::vector<double> x0;
};

struct PlotOpts {
    std::string csv;
    std::string kind = "auto";
    std::string svg;
    std::string title, x;
    int width = 800, height = 500;
    bool log_x = false, log_y = false;
};

namespace detail {

inline void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--seed", c.seed, "Base seed of every random stream");
    sub->add_option("--workers", c.workers, "Worker threads; 1 is the determinism reference")
        ->check(CLI::PositiveNumber);
    sub->add_option("--out", c.out, "Output directory (overrides FMSD_OUT)")->envname("FMSD_OUT");
}

inline void add_model(CLI::App* sub, ModelOpts& m) {
    sub->add_option("--layers", m.layers, "Transformer layers (full scale: 6)");
    sub->add_option("--heads", m.heads, "Attention heads (full scale: 8)");
    sub->add_option("--d-model", m.d_model, "Model width (full scale: 256)");
    sub->add_option("--d-ff", m.d_ff, "Feed-forward width (full scale: 1024)");
    sub->add_option("--head-dim", m.head_dim, "Per-head key width, 0 for d-model/heads (full scale: 256)");
    sub->add_option("--max-examples", m.max_examples, "Example slots including the query");
    sub->add_option("--prompt-tokens", m.prompt_tokens, "Maximum prompt tokens");
    sub->add_flag("--full-scale", m.full, "Use the full-scale architecture, ignoring the size flags above");
}

inline void add_corrector(CLI::App* sub, CorrectorOpts& c) {
    sub->add_option("--corrector", c.kind, "Error estimate: model, zero or oracle")
        ->check(CLI::IsMember({"model", "zero", "oracle"}));
    sub->add_option("--checkpoint", c.checkpoint, "Trained checkpoint (needed by --corrector model)");
}

inline std::filesystem::path out_dir(const Common& c) {
    std::filesystem::path p(c.out);
    std::filesystem::create_directories(p);
    return p;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + p.string() + "' for writing");
    return os;
}

inline std::vector<SystemData> load_shards(const std::vector<std::string>& paths) {
    if (paths.empty()) throw std::invalid_argument("no shard given; pass --shard PATH (from gen-data)");
    std::vector<SystemData> data;
    for (const auto& p : paths) {
        if (!std::filesystem::exists(p)) {
            throw std::runtime_error("shard '" + p + "' not found; create it with gen-data");
        }
        data.push_back(SystemData::from_shard(ShardReader(p)));
    }
    return data;
}

inline Checkpoint load_ckpt(const std::string& path) {
    if (path.empty()) throw std::invalid_argument("--corrector model needs --checkpoint PATH (from train)");
    if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint '" + path + "' not found");
    return load_checkpoint(path);
}

inline std::unique_ptr<Corrector> make_model_corrector(const Checkpoint& ck, const SdeSystem& s) {
    const std::string name(s.name());
    if (ck.norm.find(name) == ck.norm.end()) {
        throw std::runtime_error("checkpoint was not trained on system '" + name +
                                 "'; fine-tune it on a shard of that system first");
    }
    return std::make_unique<ModelCorrector>(ck.model(), ck.stats_for(name));
}

}  // namespace detail

/// Runs the command line. Returns 0 on success, 2 on usage errors and 1 on
/// runtime errors; diagnostics go to `err`, progress to `out`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app("Coarse-to-fine error correction for SDE simulations", "fmint-sde");
    app.option_defaults()->always_capture_default();
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "Read options from a JSON file written by --dump-config");
    bool dump_config = false;
    app.add_flag("--dump-config", dump_config, "Print the resolved options as JSON and exit")->configurable(false);
    app.require_subcommand(1);
    app.fallthrough();

    Common common;
    GenDataOpts gd;
    ModelOpts model;
    TrainOpts tr;
    FinetuneOpts ft;
    CorrectorOpts corr;
    EvalOpts ev;
    RolloutOpts ro;
    ConvergenceOpts cv;
    PlotOpts pl;

    auto* gen = app.add_subcommand("gen-data", "Simulate fine/coarse trajectory pairs into a shard");
    gen->add_option("--system", gd.system, "System id")->required();
    gen->add_option("--params", gd.params, "Parameter draws (full scale: 1000)")->check(CLI::PositiveNumber);
    gen->add_option("--ics", gd.ics, "Initial conditions per draw (full scale: 10)")->check(CLI::PositiveNumber);
    gen->add_option("--noises", gd.noises, "Noise realizations per initial condition (full scale: 40)")
        ->check(CLI::PositiveNumber);
    gen->add_option("--n-coarse", gd.n_coarse, "Coarse steps per trajectory, 0 for the system default");
    gen->add_option("--name", gd.name, "Shard file name, default <system>.fmsd");
    detail::add_common(gen, common);

    auto* train = app.add_subcommand("train", "Train a model on one or more shards");
    train->add_option("--shard", tr.shards, "Shard written by gen-data (repeatable)")->required();
    detail::add_model(train, model);
    train->add_option("--epochs", tr.epochs, "Epochs (full scale: 100)");
    train->add_option("--steps", tr.steps, "Optimizer steps per epoch (full scale: 10000)")->check(CLI::PositiveNumber);
    train->add_option("--batch", tr.batch, "Samples per step")->check(CLI::PositiveNumber);
    train->add_option("--k-demos", tr.k_demos, "Demos per sample");
    train->add_option("--lr", tr.lr, "Peak learning rate");
    train->add_option("--warmup", tr.warmup, "Warmup fraction of all steps");
    train->add_option("--dropout", tr.dropout, "Fraction of timestamps dropped per sample");
    train->add_option("--prompt-prob", tr.prompt_prob, "Probability of attaching a text prompt");
    train->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay");
    train->add_option("--clip", tr.clip, "Gradient norm clip");
    train->add_option("--resume", tr.resume, "Continue from a checkpoint written by train");
    train->add_option("--checkpoint", tr.checkpoint, "Output checkpoint file name");
    detail::add_common(train, common);

    auto* fine = app.add_subcommand("finetune", "Adapt a trained checkpoint to a small dataset");
    fine->add_option("--base", ft.base, "Checkpoint to start from")->required();
    fine->add_option("--shard", ft.shards, "Shard of the target system (repeatable)")->required();
    fine->add_option("--n-traj", ft.n_traj, "Trajectories kept per shard, 0 for all");
    fine->add_option("--iters", ft.iters, "Optimizer steps (full scale: 1000 or 2000)");
    fine->add_option("--batch", ft.batch, "Samples per step")->check(CLI::PositiveNumber);
    fine->add_option("--k-demos", ft.k_demos, "Demos per sample");
    fine->add_option("--lr", ft.lr, "Peak learning rate");
    fine->add_option("--warmup", ft.warmup, "Warmup fraction of all steps");
    fine->add_option("--dropout", ft.dropout, "Fraction of timestamps dropped per sample");
    fine->add_option("--checkpoint", ft.checkpoint, "Output checkpoint file name");
    detail::add_common(fine, common);

    auto* eval = app.add_subcommand("eval", "Compare coarse and corrected paths against fine references");
    eval->add_option("--system", ev.system, "System id")->required();
    detail::add_corrector(eval, corr);
    eval->add_option("--eq", ev.eq, "Parameter draws (equations)")->check(CLI::PositiveNumber);
    eval->add_option("--ics", ev.ics, "Initial conditions per equation (full scale: 25)")->check(CLI::PositiveNumber);
    eval->add_option("--noises", ev.noises, "Noise realizations per initial condition (full scale: 40)")
        ->check(CLI::PositiveNumber);
    eval->add_option("--k-demos", ev.k_demos, "Demos per equation");
    eval->add_option("--blocks", ev.blocks, "Roll-out blocks per trajectory")->check(CLI::PositiveNumber);
    eval->add_option("--n-coarse", ev.n_coarse, "Block length in coarse steps, 0 for the system default");
    eval->add_option("--bins", ev.bins, "Histogram bins")->check(CLI::PositiveNumber);
    eval->add_option("--norm", ev.norm, "Norm over dimensions for AMD/MAD: euclidean or per-dim-max")
        ->check(CLI::IsMember({"euclidean", "per-dim-max"}));
    eval->add_flag("--runtime", ev.runtime, "Also time fine, coarse and coarse+correction generation");
    detail::add_common(eval, common);

    auto* roll = app.add_subcommand("rollout", "Correct one long trajectory block by block");
    roll->add_option("--system", ro.system, "System id")->required();
    detail::add_corrector(roll, corr);
    roll->add_option("--blocks", ro.blocks, "Blocks")->check(CLI::PositiveNumber);
    roll->add_option("--n-coarse", ro.n_coarse, "Block length in coarse steps, 0 for the system default");
    roll->add_option("--k-demos", ro.k_demos, "Demos");
    roll->add_option("--param-index", ro.param_index, "Parameter draw index");
    roll->add_option("--ic-index", ro.ic_index, "Initial condition index");
    roll->add_option("--noise-index", ro.noise_index, "Noise realization index");
    detail::add_common(roll, common);

    auto* conv = app.add_subcommand("convergence", "Strong-order or coarse-error scaling probe");
    conv->add_option("--system", cv.system, "System id (order probe: gbm only)");
    conv->add_option("--probe", cv.probe, "order: strong error vs step; scaling: |err_N| vs k dt")
        ->check(CLI::IsMember({"order", "scaling"}));
    conv->add_option("--method", cv.method, "Integrator for the order probe: em or milstein")
        ->check(CLI::IsMember({"em", "milstein"}));
    conv->add_option("--realizations", cv.realizations, "Monte Carlo realizations")->check(CLI::PositiveNumber);
    conv->add_option("--param", cv.param_values, "Parameter override name=value (repeatable)");
    conv->add_option("--x0", cv.x0, "Initial state; default 1 for the order probe, the OU mean or the system IC "
                                    "sample for the scaling probe");
    detail::add_common(conv, common);

    auto* plot = app.add_subcommand("plot", "Render a CSV written by this tool as an SVG chart");
    plot->add_option("csv", pl.csv, "CSV file")->required();
    plot->add_option("--kind", pl.kind, "auto, line or histogram")->check(CLI::IsMember({"auto", "line", "histogram"}));
    plot->add_option("--svg", pl.svg, "Output SVG path, default <csv stem>.svg in the output directory");
    plot->add_option("--title", pl.title, "Chart title");
    plot->add_option("--x", pl.x, "Column for the x axis");
    plot->add_option("--width", pl.width, "Width in pixels");
    plot->add_option("--height", pl.height, "Height in pixels");
    plot->add_flag("--log-x", pl.log_x, "Logarithmic x axis");
    plot->add_flag("--log-y", pl.log_y, "Logarithmic y axis");
    detail::add_common(plot, common);

    for (auto* sub : app.get_subcommands({})) sub->configurable();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, out, err);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        err << "run with --help for usage\n";
        return 2;
    }

    if (dump_config) {
        out << app.config_to_str(true, false);
        return 0;
    }

    try {
        const std::filesystem::path dir = detail::out_dir(common);
        if (gen->parsed()) {
            const SdeSystem& s = get_system(gd.system);
            DatasetConfig dc;
            dc.n_params = gd.params;
            dc.n_ics = gd.ics;
            dc.n_noises = gd.noises;
            dc.n_coarse = gd.n_coarse;
            dc.seed = common.seed;
            dc.workers = common.workers;
            const Dataset ds = generate_dataset(s, dc);
            const auto path = dir / (gd.name.empty() ? gd.system + ".fmsd" : gd.name);
            const ShardManifest m = write_shard(ds, path);
            out << "wrote " << m.record_count << " trajectories (" << ds.rejected << " re-simulated) to "
                << path.string() << "\n";
        } else if (train->parsed()) {
            const auto data = detail::load_shards(tr.shards);
            TrainConfig tc;
            tc.epochs = tr.epochs;
            tc.steps_per_epoch = tr.steps;
            tc.batch_size = tr.batch;
            tc.k_demos = tr.k_demos;
            tc.peak_lr = tr.lr;
            tc.warmup_fraction = tr.warmup;
            tc.dropout = tr.dropout;
            tc.prompt_probability = tr.prompt_prob;
            tc.adamw.weight_decay = tr.weight_decay;
            tc.clip_norm = tr.clip;
            tc.seed = common.seed;
            tc.workers = common.workers;
            std::optional<Checkpoint> resume;
            ModelConfig mc = model.config();
            if (!tr.resume.empty()) {
                resume = detail::load_ckpt(tr.resume);
                if (resume->config != mc) {
                    throw std::runtime_error("checkpoint '" + tr.resume +
                                             "' has a different architecture; pass the size flags it was trained with");
                }
            }
            TrainHooks hooks;
            hooks.on_epoch = [&](int epoch, const Checkpoint& ck) {
                out << "epoch " << epoch << " done\n";
                save_checkpoint(ck, dir / tr.checkpoint);
            };
            const std::int64_t total = tc.total_steps();
            hooks.on_step = [&](const LossPoint& p) {
                if (p.step % 100 == 0 || p.step == total) out << "step " << p.step << " msd " << p.msd << "\n";
            };
            const TrainResult r = train_loop(mc, data, tc, hooks, resume);
            save_checkpoint(r.checkpoint, dir / tr.checkpoint);
            auto os = detail::open_out(dir / "loss.csv");
            write_loss_csv(os, r.curve);
            out << "wrote " << (dir / tr.checkpoint).string() << " and " << (dir / "loss.csv").string() << "\n";
        } else if (fine->parsed()) {
            const Checkpoint base = detail::load_ckpt(ft.base);
            auto data = detail::load_shards(ft.shards);
            TrainConfig tc;
            tc.batch_size = ft.batch;
            tc.k_demos = ft.k_demos;
            tc.peak_lr = ft.lr;
            tc.warmup_fraction = ft.warmup;
            tc.dropout = ft.dropout;
            tc.seed = common.seed;
            tc.workers = common.workers;
            if (tc.k_demos + 1 > base.config.max_examples) {
                throw std::runtime_error("--k-demos " + std::to_string(tc.k_demos) + " exceeds the checkpoint's " +
                                         std::to_string(base.config.max_examples - 1) + " demo slots");
            }
            TrainHooks hooks;
            hooks.on_eval = [&](std::int64_t step, ModelParams<float>& mp) {
                out << "step " << step << " msd " << evaluate_msd(mp, data, tc, -1) << "\n";
            };
            const TrainResult r = finetune(base, data, static_cast<std::size_t>(ft.n_traj), ft.iters, tc, hooks);
            save_checkpoint(r.checkpoint, dir / ft.checkpoint);
            auto os = detail::open_out(dir / "finetune_loss.csv");
            write_loss_csv(os, r.curve);
            out << "wrote " << (dir / ft.checkpoint).string() << "\n";
        } else if (eval->parsed()) {
            const SdeSystem& s = get_system(ev.system);
            std::unique_ptr<Corrector> c;
            std::optional<Checkpoint> ck;
            if (corr.kind == "model") {
                ck = detail::load_ckpt(corr.checkpoint);
                c = detail::make_model_corrector(*ck, s);
            } else if (corr.kind == "zero") {
                c = std::make_unique<ZeroCorrector>();
            } else {
                throw std::invalid_argument("eval supports --corrector model or zero; use rollout for the oracle");
            }
            EvalConfig ec;
            ec.n_eq = ev.eq;
            ec.n_ics = ev.ics;
            ec.n_noises = ev.noises;
            ec.k_demos = ev.k_demos;
            ec.blocks = ev.blocks;
            ec.n_coarse = ev.n_coarse;
            ec.seed = common.seed;
            ec.workers = common.workers;
            ec.hist_bins = static_cast<std::size_t>(ev.bins);
            ec.norm = ev.norm == "euclidean" ? DimNorm::euclidean : DimNorm::per_dim_max;
            const EvalResult r = evaluate(s, *c, ec);
            {
                auto os = detail::open_out(dir / "metrics.csv");
                write_metric_csv(os, {r.coarse, r.corrected});
            }
            {
                auto os = detail::open_out(dir / "hist_coarse.csv");
                write_histogram_csv(os, r.hist_coarse);
            }
            {
                auto os = detail::open_out(dir / "hist_corrected.csv");
                write_histogram_csv(os, r.hist_corrected);
            }
            write_metric_csv(out, {r.coarse, r.corrected});
            if (ev.runtime) {
                RuntimeConfig rc;
                rc.n_eq = ev.eq;
                rc.m = ev.ics * ev.noises;
                rc.n_coarse = ev.n_coarse > 0 ? ev.n_coarse : s.horizon_steps_coarse;
                rc.k_demos = ev.k_demos;
                rc.seed = common.seed;
                const RuntimeReport rr = runtime_report(s, *c, rc);
                auto os = detail::open_out(dir / "runtime.csv");
                write_runtime_csv(os, ev.system, rr);
                write_runtime_csv(out, ev.system, rr);
            }
        } else if (roll->parsed()) {
            const SdeSystem& s = get_system(ro.system);
            const int N = ro.n_coarse > 0 ? ro.n_coarse : s.horizon_steps_coarse;
            DatasetConfig dc;
            dc.n_params = ro.param_index + 1;
            dc.n_ics = ro.ic_index + 1;
            dc.n_noises = ro.noise_index + 1;
            dc.n_coarse = N * ro.blocks;
            dc.seed = common.seed;
            const auto [rec, rejected] = simulate_record(s, dc, static_cast<std::uint32_t>(ro.param_index),
                                                         static_cast<std::uint32_t>(ro.ic_index),
                                                         static_cast<std::uint32_t>(ro.noise_index));
            const RolloutInput in = RolloutInput::from_pair(rec.pair, s, params_of(s, rec.params));
            EvalConfig ec;
            ec.n_eq = ro.param_index + 1;
            ec.n_ics = ro.ic_index + 1;
            ec.n_noises = ro.noise_index + 1;
            ec.k_demos = ro.k_demos;
            ec.n_coarse = N;
            ec.seed = common.seed;
            const auto demos = eval_demos(s, ec, static_cast<std::uint32_t>(ro.param_index));
            std::unique_ptr<Corrector> c;
            std::optional<Checkpoint> ck;
            if (corr.kind == "model") {
                ck = detail::load_ckpt(corr.checkpoint);
                c = detail::make_model_corrector(*ck, s);
            } else if (corr.kind == "zero") {
                c = std::make_unique<ZeroCorrector>();
            } else {
                c = std::make_unique<OracleCorrector>(std::vector<Matrix>{*in.fine});
            }
            const CorrectionResult r = rollout(*c, in, demos, static_cast<std::size_t>(N));
            auto os = detail::open_out(dir / "rollout.csv");
            write_correction_csv(os, r);
            double worst_coarse = 0.0, worst_corr = 0.0;
            for (std::size_t k = 0; k < r.corrected.data.size(); ++k) {
                worst_coarse = std::max(worst_coarse, std::abs(r.coarse.data[k] - r.fine->data[k]));
                worst_corr = std::max(worst_corr, std::abs(r.corrected.data[k] - r.fine->data[k]));
            }
            out << "max |coarse - fine| " << worst_coarse << ", max |corrected - fine| " << worst_corr << "\n";
            out << "wrote " << (dir / "rollout.csv").string() << "\n";
        } else if (conv->parsed()) {
            const SdeSystem& s = get_system(cv.system);
            ParamVector p = default_params(s);
            if (s.id == SystemId::gbm) p = make_params(s, {{"mu", 0.1}, {"sigma", 0.2}});
            for (const auto& kv : cv.param_values) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw std::invalid_argument("--param expects name=value, got '" + kv + "'");
                p.set(kv.substr(0, eq), std::stod(kv.substr(eq + 1)));
            }
            auto os = detail::open_out(dir / "convergence.csv");
            double slope = 0.0;
            if (cv.probe == "order") {
                OrderProbeConfig oc;
                oc.scheme = cv.method == "milstein" ? Scheme::milstein : Scheme::euler_maruyama;
                oc.realizations = cv.realizations;
                oc.seed = common.seed;
                if (!cv.x0.empty()) oc.x0 = cv.x0.front();
                const auto r = strong_order_probe(s, p, oc);
                write_order_csv(os, r);
                slope = r.slope;
            } else {
                std::vector<double> x0 = cv.x0;
                if (x0.empty()) {
                    if (s.id == SystemId::ou) {
                        x0 = {p.get("mu")};
                    } else {
                        auto rng = initial_stream(common.seed, s.hash(), 0, 0);
                        x0 = sample_initial(s, rng);
                    }
                }
                ScalingProbeConfig sc;
                sc.realizations = cv.realizations;
                sc.seed = common.seed;
                const auto r = coarse_error_scaling_probe(s, p, x0, sc);
                write_scaling_csv(os, r);
                slope = r.slope;
            }
            out << "slope " << slope << "\n";
            out << "wrote " << (dir / "convergence.csv").string() << "\n";
        } else if (plot->parsed()) {
            PlotOptions po;
            po.kind = pl.kind == "line" ? PlotKind::line : pl.kind == "histogram" ? PlotKind::histogram
                                                                                  : PlotKind::automatic;
            po.width = pl.width;
            po.height = pl.height;
            po.title = pl.title;
            po.x_column = pl.x;
            po.log_x = pl.log_x;
            po.log_y = pl.log_y;
            if (!std::filesystem::exists(pl.csv)) throw std::runtime_error("CSV '" + pl.csv + "' not found");
            const std::filesystem::path svg =
                pl.svg.empty() ? dir / std::filesystem::path(pl.csv).stem().concat(".svg") : std::filesystem::path(pl.svg);
            plot_export(pl.csv, svg, po);
            out << "wrote " << svg.string() << "\n";
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace cli
}  // namespace fmint

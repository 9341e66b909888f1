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
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fmint/dataset.hpp"
#include "fmint/model.hpp"
#include "fmint/prompts.hpp"

namespace fmint {

struct Schedule {
    double peak_lr = 1e-4;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;
};

/// Linear warmup from 0 to peak, then cosine decay to 0 at total_steps.
/// Steps past the end clamp to the final value.
inline double lr_at(std::int64_t step, const Schedule& s) {
    if (step <= 0) return 0.0;
    if (step >= s.total_steps) return s.warmup_steps >= s.total_steps ? s.peak_lr : 0.0;
    if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const double progress = static_cast<double>(step - s.warmup_steps) /
                            static_cast<double>(std::max<std::int64_t>(1, s.total_steps - s.warmup_steps));
    return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

template <class T>
struct OptimState {
    AdamWConfig config;
    std::int64_t step = 0;
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
};

template <class T>
OptimState<T> make_optim_state(const std::vector<Parameter<T>>& params, AdamWConfig cfg = {}) {
    OptimState<T> s;
    s.config = cfg;
    for (const auto& p : params) {
        s.m.push_back(Tensor<T>::Zero(p.value.rows(), p.value.cols()));
        s.v.push_back(Tensor<T>::Zero(p.value.rows(), p.value.cols()));
    }
    return s;
}

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One AdamW update with bias-corrected moments and decoupled weight decay:
///   w -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * w).
template <class T>
void adamw_step(std::vector<Parameter<T>>& params, OptimState<T>& s, double lr) {
    if (s.m.size() != params.size() || s.v.size() != params.size()) {
        throw std::invalid_argument("adamw_step: optimizer state does not match the parameter list");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (p.grad.size() != 0 && (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())) {
            throw std::invalid_argument("adamw_step: gradient of '" + p.name + "' has shape " + shape_of(p.grad) +
                                        ", parameter " + shape_of(p.value));
        }
        if (p.grad.size() != 0 && !p.grad.allFinite()) {
            throw NonFiniteGradient("adamw_step: non-finite gradient in tensor '" + p.name + "'");
        }
    }
    ++s.step;
    const auto& c = s.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
    const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& m = s.m[i];
        auto& v = s.v[i];
        for (Eigen::Index j = 0; j < p.value.size(); ++j) {
            const T g = p.grad.size() ? p.grad.data()[j] : T(0);
            T& mj = m.data()[j];
            T& vj = v.data()[j];
            mj = b1 * mj + (T(1) - b1) * g;
            vj = b2 * vj + (T(1) - b2) * g * g;
            const double mhat = static_cast<double>(mj) / bc1;
            const double vhat = static_cast<double>(vj) / bc2;
            T& w = p.value.data()[j];
            const double upd = mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * static_cast<double>(w);
            w = static_cast<T>(static_cast<double>(w) - lr * upd);
        }
    }
}

/// Scales gradients so their global 2-norm is at most max_norm. Returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(std::vector<Parameter<T>>& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        for (Eigen::Index j = 0; j < p.grad.size(); ++j) {
            const double g = static_cast<double>(p.grad.data()[j]);
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T f = static_cast<T>(max_norm / norm);
        for (auto& p : params) p.grad *= f;
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Training data
// ---------------------------------------------------------------------------

/// Trajectories of one system, grouped by parameter draw so that demos and
/// query of a sample always share parameters.
struct SystemData {
    SdeSystem system;
    NormStats stats;
    std::vector<TrajectoryRecord> records;
    std::vector<std::vector<std::size_t>> groups;

    SystemData() = default;
    SystemData(SdeSystem s, NormStats st, std::vector<TrajectoryRecord> r)
        : system(std::move(s)), stats(st), records(std::move(r)) {
        std::map<std::uint32_t, std::vector<std::size_t>> by_param;
        for (std::size_t i = 0; i < records.size(); ++i) by_param[records[i].param_index].push_back(i);
        for (auto& [k, g] : by_param) groups.push_back(std::move(g));
    }

    static SystemData from_shard(const ShardReader& r) {
        return SystemData(r.system(), r.manifest().stats, r.records());
    }
};

struct TrainConfig {
    int epochs = 1;
    int steps_per_epoch = 100;
    int batch_size = 8;
    int k_demos = 4;
    double prompt_probability = 0.0;
    std::uint64_t seed = 0;
    double dropout = 0.05;
    double peak_lr = 1e-4;
    double warmup_fraction = 0.05;
    double clip_norm = 1.0;
    AdamWConfig adamw{};
    int workers = 1;

    std::int64_t total_steps() const { return static_cast<std::int64_t>(epochs) * steps_per_epoch; }

    Schedule schedule() const {
        Schedule s;
        s.peak_lr = peak_lr;
        s.total_steps = total_steps();
        s.warmup_steps = static_cast<std::int64_t>(std::llround(warmup_fraction * static_cast<double>(s.total_steps)));
        return s;
    }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw std::invalid_argument("TrainConfig: " + msg);
        };
        need(epochs >= 0, "epochs must be non-negative");
        need(steps_per_epoch >= 1, "steps_per_epoch must be positive");
        need(batch_size >= 1, "batch_size must be positive");
        need(k_demos >= 0, "k_demos must be non-negative");
        need(prompt_probability >= 0.0 && prompt_probability <= 1.0, "prompt_probability must be in [0, 1]");
        need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
        need(peak_lr > 0.0, "peak_lr must be positive");
        need(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "warmup_fraction must be in [0, 1]");
        need(workers >= 1, "workers must be positive");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"steps_per_epoch", c.steps_per_epoch},
            {"batch_size", c.batch_size},
            {"k_demos", c.k_demos},
            {"prompt_probability", c.prompt_probability},
            {"seed", c.seed},
            {"dropout", c.dropout},
            {"peak_lr", c.peak_lr},
            {"warmup_fraction", c.warmup_fraction},
            {"clip_norm", c.clip_norm},
            {"weight_decay", c.adamw.weight_decay},
            {"beta1", c.adamw.beta1},
            {"beta2", c.adamw.beta2},
            {"workers", c.workers}};
}

/// A training sample together with the statistics to normalize it.
struct DrawnSample {
    IclSample sample;
    const NormStats* stats = nullptr;
};

/// Draws sample `item` of step `step`. Depends only on (seed, step, item),
/// so resumed and multi-worker runs see the same data.
inline DrawnSample draw_sample(const std::vector<SystemData>& data, const TrainConfig& cfg, const ModelConfig& mc,
                               std::int64_t step, int item) {
    CounterRng rng(derive_key({cfg.seed, hash_name("train-sample"), static_cast<std::uint64_t>(step),
                               static_cast<std::uint64_t>(item)}));
    for (int attempt = 0; attempt < 64; ++attempt) {
        const SystemData& sd = data[rng.below(data.size())];
        if (sd.groups.empty()) continue;
        const auto& group = sd.groups[rng.below(sd.groups.size())];
        const bool with_prompt = cfg.prompt_probability > 0.0 && rng.uniform() < cfg.prompt_probability &&
                                 mc.max_prompt_tokens > 0;
        const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.k_demos), group.size() - 1);
        if (k == 0 && !with_prompt) continue;
        std::vector<std::size_t> pick(group);
        for (std::size_t i = 0; i <= k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(pick.size() - i));
            std::swap(pick[i], pick[j]);
        }
        std::vector<Demo> demos;
        for (std::size_t i = 0; i < k; ++i) demos.push_back(record_demo(sd.system, sd.records[pick[i]]));
        Demo query = record_demo(sd.system, sd.records[pick[k]]);
        std::optional<PromptTokens> prompt;
        if (with_prompt) {
            const auto texts = prompts_for(sd.system.id);
            prompt = embed_prompt_stub(texts[rng.below(texts.size())], static_cast<std::size_t>(mc.max_prompt_tokens),
                                       static_cast<std::size_t>(mc.d_model));
        }
        IclSample s = assemble_icl_sample(std::move(demos), std::move(query), std::move(prompt));
        s = apply_timestamp_dropout(std::move(s), cfg.dropout, rng);
        if (!s.trainable()) continue;
        return {std::move(s), &sd.stats};
    }
    throw std::runtime_error("draw_sample: no trainable sample found; every parameter group needs at least two "
                             "trajectories or a prompt");
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct LossPoint {
    std::int64_t step = 0;
    double lr = 0.0;
    double msd = 0.0;
};

inline void write_loss_csv(std::ostream& os, const std::vector<LossPoint>& curve) {
    os << "step,lr,msd\n";
    os.precision(9);
    for (const auto& p : curve) os << p.step << ',' << p.lr << ',' << p.msd << '\n';
}

struct TrainHooks {
    /// Called after every optimizer step.
    std::function<void(const LossPoint&)> on_step;
    /// Called with the 1-based epoch and the epoch-end checkpoint.
    std::function<void(int, const Checkpoint&)> on_epoch;
    /// Called every `eval_every` steps with the current weights.
    std::function<void(std::int64_t, ModelParams<float>&)> on_eval;
    std::int64_t eval_every = 0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossPoint> curve;
};

namespace detail {

inline std::map<std::string, NormStats> norm_map(const std::vector<SystemData>& data) {
    std::map<std::string, NormStats> m;
    for (const auto& d : data) m[std::string(d.system.name())] = d.stats;
    return m;
}

inline void store_optimizer(Checkpoint& ck, const OptimState<float>& opt, const ModelParams<float>& mp) {
    for (std::size_t i = 0; i < mp.tensors.size(); ++i) {
        ck.tensors.emplace_back("adam.m." + mp.tensors[i].name, opt.m[i]);
        ck.tensors.emplace_back("adam.v." + mp.tensors[i].name, opt.v[i]);
    }
    ck.meta["adam_step"] = opt.step;
}

inline void restore_optimizer(const Checkpoint& ck, OptimState<float>& opt, const ModelParams<float>& mp) {
    for (std::size_t i = 0; i < mp.tensors.size(); ++i) {
        const auto* m = ck.find("adam.m." + mp.tensors[i].name);
        const auto* v = ck.find("adam.v." + mp.tensors[i].name);
        if (!m || !v) throw std::runtime_error("checkpoint lacks optimizer state for '" + mp.tensors[i].name + "'");
        opt.m[i] = m->value;
        opt.v[i] = v->value;
    }
    opt.step = ck.meta.value("adam_step", std::int64_t{0});
}

/// Forward and backward over one batch; returns the mean loss. Gradients are
/// summed in item order whatever the worker count.
inline double batch_gradient(ModelParams<float>& mp, const std::vector<SystemData>& data, const TrainConfig& cfg,
                             std::int64_t step) {
    const int B = cfg.batch_size;
    const float inv_b = 1.0f / static_cast<float>(B);
    std::vector<double> losses(static_cast<std::size_t>(B), 0.0);
    mp.zero_grad();
    auto run_item = [&](ModelParams<float>& local, int b) {
        DrawnSample ds = draw_sample(data, cfg, local.config, step, b);
        const ModelInput<float> in = encode<float>(ds.sample, *ds.stats, local.config);
        Tape<float> tape;
        Var<float> loss = msd_loss(forward(tape, local, in), in);
        losses[static_cast<std::size_t>(b)] = static_cast<double>(loss.value()(0, 0));
        tape.backward(ad::scale(loss, inv_b));
    };
    if (cfg.workers <= 1 || B == 1) {
        for (int b = 0; b < B; ++b) run_item(mp, b);
    } else {
        std::vector<ModelParams<float>> replicas(static_cast<std::size_t>(B));
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(B));
        const int W = std::min(cfg.workers, B);
        std::vector<std::thread> pool;
        for (int w = 0; w < W; ++w) {
            pool.emplace_back([&, w] {
                for (int b = w; b < B; b += W) {
                    try {
                        auto& r = replicas[static_cast<std::size_t>(b)];
                        r = mp;
                        r.zero_grad();
                        run_item(r, b);
                    } catch (...) {
                        errors[static_cast<std::size_t>(b)] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
        for (int b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < mp.tensors.size(); ++i) {
                mp.tensors[i].grad += replicas[static_cast<std::size_t>(b)].tensors[i].grad;
            }
        }
    }
    double mean = 0.0;
    for (double l : losses) mean += l;
    return mean / static_cast<double>(B);
}

}  // namespace detail

/// Multi-example training. Starts from `init` when given (fresh optimizer)
/// or resumes from `resume` (weights, optimizer and step restored).
inline TrainResult train_loop(const ModelConfig& mc, const std::vector<SystemData>& data, const TrainConfig& cfg,
                              const TrainHooks& hooks = {}, const std::optional<Checkpoint>& resume = std::nullopt,
                              const std::optional<ModelParams<float>>& init = std::nullopt) {
    cfg.validate();
    mc.validate();
    if (data.empty()) throw std::invalid_argument("train_loop: no training data");
    for (const auto& d : data) {
        if (d.records.empty()) {
            throw std::invalid_argument("train_loop: shard for system '" + std::string(d.system.name()) + "' is empty");
        }
        if (d.system.state_dim > kMaxDims) throw std::invalid_argument("train_loop: system dimension exceeds 3");
    }
    if (cfg.k_demos + 1 > mc.max_examples) {
        throw std::invalid_argument("train_loop: " + std::to_string(cfg.k_demos) + " demos plus a query exceed the "
                                    "model's " + std::to_string(mc.max_examples) + " example slots");
    }
    ModelParams<float> mp = init ? *init : init_params<float>(mc, cfg.seed);
    if (mp.config != mc) throw std::invalid_argument("train_loop: initial weights have a different config");
    OptimState<float> opt = make_optim_state(mp.tensors, cfg.adamw);
    std::int64_t start = 0;
    if (resume) {
        if (resume->config != mc) {
            throw std::invalid_argument("train_loop: checkpoint config does not match the model config");
        }
        mp = resume->model();
        detail::restore_optimizer(*resume, opt, mp);
        start = resume->meta.value("step", std::int64_t{0});
    }
    const Schedule sched = cfg.schedule();
    const auto norm = detail::norm_map(data);
    auto snapshot = [&](std::int64_t step) {
        Checkpoint ck = make_checkpoint(mp, norm);
        ck.meta["step"] = step;
        ck.meta["train_config"] = to_json(cfg);
        detail::store_optimizer(ck, opt, mp);
        return ck;
    };
    TrainResult res;
    for (std::int64_t step = start; step < sched.total_steps; ++step) {
        const double msd = detail::batch_gradient(mp, data, cfg, step);
        clip_grad_norm(mp.tensors, cfg.clip_norm);
        const double lr = lr_at(step + 1, sched);
        adamw_step(mp.tensors, opt, lr);
        LossPoint lp{step + 1, lr, msd};
        res.curve.push_back(lp);
        if (hooks.on_step) hooks.on_step(lp);
        if (hooks.on_eval && hooks.eval_every > 0 && (step + 1) % hooks.eval_every == 0) hooks.on_eval(step + 1, mp);
        if ((step + 1) % cfg.steps_per_epoch == 0 && hooks.on_epoch) {
            hooks.on_epoch(static_cast<int>((step + 1) / cfg.steps_per_epoch), snapshot(step + 1));
        }
    }
    res.checkpoint = snapshot(std::max(start, sched.total_steps));
    return res;
}

/// Loss of the current weights on a fixed batch, without updating.
inline double evaluate_msd(ModelParams<float>& mp, const std::vector<SystemData>& data, const TrainConfig& cfg,
                           std::int64_t probe_step) {
    TrainConfig c = cfg;
    c.workers = 1;
    double sum = 0.0;
    for (int b = 0; b < c.batch_size; ++b) {
        DrawnSample ds = draw_sample(data, c, mp.config, probe_step, b);
        const ModelInput<float> in = encode<float>(ds.sample, *ds.stats, mp.config);
        Tape<float> tape;
        sum += static_cast<double>(msd_loss(forward(tape, mp, in), in).value()(0, 0));
    }
    return sum / static_cast<double>(c.batch_size);
}

/// Continues training a checkpoint on a small dataset for exactly `iters`
/// optimizer steps with a fresh optimizer and schedule. Normalization
/// statistics of the checkpoint are kept for systems it already knows.
inline TrainResult finetune(const Checkpoint& base, std::vector<SystemData> data, std::size_t n_traj,
                            std::int64_t iters, TrainConfig cfg, TrainHooks hooks = {}) {
    if (iters < 0) throw std::invalid_argument("finetune: iters must be non-negative");
    if (iters == 0) return TrainResult{base, {}};
    for (auto& d : data) {
        if (n_traj > 0 && d.records.size() > n_traj) d.records.resize(n_traj);
        const auto it = base.norm.find(std::string(d.system.name()));
        d = SystemData(d.system, it != base.norm.end() ? it->second : d.stats, std::move(d.records));
    }
    cfg.epochs = 1;
    cfg.steps_per_epoch = static_cast<int>(iters);
    if (hooks.eval_every == 0) hooks.eval_every = 100;
    TrainResult r = train_loop(base.config, data, cfg, hooks, std::nullopt, base.model());
    for (const auto& [k, v] : base.norm) r.checkpoint.norm.emplace(k, v);
    return r;
}

}  // namespace fmint

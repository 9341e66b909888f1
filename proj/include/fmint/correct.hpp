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

#include <cmath>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmint/dataset.hpp"
#include "fmint/model.hpp"

namespace fmint {

/// Where a query block sits inside a longer trajectory.
struct BlockContext {
    std::size_t trajectory = 0;
    std::size_t start = 0;  // coarse index of the block's first column
};

/// Produces error estimates for query blocks given demos. Returned matrices
/// are (columns x state_dim) per query.
class Corrector {
public:
    virtual ~Corrector() = default;
    virtual std::vector<Matrix> predict(const std::vector<Demo>& demos, const std::vector<Demo>& queries,
                                        const std::vector<BlockContext>& ctx) = 0;
};

/// Predicts no error: corrected paths equal the coarse ones.
class ZeroCorrector final : public Corrector {
public:
    std::vector<Matrix> predict(const std::vector<Demo>&, const std::vector<Demo>& queries,
                                const std::vector<BlockContext>&) override {
        std::vector<Matrix> out;
        for (const auto& q : queries) out.emplace_back(q.columns(), static_cast<std::size_t>(q.state_dim));
        return out;
    }
};

/// Test double that knows the fine paths at coarse time stamps and returns
/// fine minus the query's (possibly shifted) coarse values.
class OracleCorrector final : public Corrector {
public:
    explicit OracleCorrector(std::vector<Matrix> fine) : fine_(std::move(fine)) {}

    std::vector<Matrix> predict(const std::vector<Demo>&, const std::vector<Demo>& queries,
                                const std::vector<BlockContext>& ctx) override {
        std::vector<Matrix> out;
        for (std::size_t i = 0; i < queries.size(); ++i) {
            const Demo& q = queries[i];
            const Matrix& f = fine_.at(ctx.at(i).trajectory);
            Matrix e(q.columns(), static_cast<std::size_t>(q.state_dim));
            for (std::size_t n = 0; n < q.columns(); ++n) {
                for (int d = 0; d < q.state_dim; ++d) {
                    e(n, static_cast<std::size_t>(d)) = f(ctx[i].start + n, static_cast<std::size_t>(d)) - q.values(n, d);
                }
            }
            out.push_back(std::move(e));
        }
        return out;
    }

private:
    std::vector<Matrix> fine_;
};

/// Trained network. The demo prefix is computed once per distinct demo set.
class ModelCorrector final : public Corrector {
public:
    ModelCorrector(ModelParams<float> params, NormStats stats, std::optional<PromptTokens> prompt = std::nullopt)
        : params_(std::move(params)), stats_(stats), prompt_(std::move(prompt)) {}

    std::vector<Matrix> predict(const std::vector<Demo>& demos, const std::vector<Demo>& queries,
                                const std::vector<BlockContext>&) override {
        if (demos.empty() && !prompt_) {
            throw std::invalid_argument("ModelCorrector: zero-shot correction needs a prompt");
        }
        for (const auto& q : queries) {
            for (const auto& d : demos) {
                if (d.state_dim != q.state_dim) throw std::invalid_argument("ModelCorrector: layout mismatch");
            }
        }
        if (!cache_ || cached_demos_ != demos) {
            cache_ = build_prefix(params_, demos, prompt_, stats_);
            cached_demos_ = demos;
        }
        return predict_queries(params_, *cache_, queries);
    }

    const ModelParams<float>& params() const { return params_; }

private:
    ModelParams<float> params_;
    NormStats stats_;
    std::optional<PromptTokens> prompt_;
    std::optional<PrefixCache<float>> cache_;
    std::vector<Demo> cached_demos_;
};

struct CorrectionResult {
    Matrix coarse;                 // (shifted) coarse values, columns x dim
    Matrix predicted_err;          // columns x dim, row 0 is zero
    Matrix corrected;              // coarse + predicted_err
    std::optional<Matrix> fine;    // reference when available
    std::optional<Matrix> residual;  // corrected - fine
    std::vector<double> times;
    std::size_t demos_used = 0;
    std::vector<std::vector<double>> shifts;  // per block alignment offsets
};

namespace detail {

inline void attach_reference(CorrectionResult& r, const std::optional<Matrix>& fine) {
    if (!fine) return;
    if (fine->rows != r.corrected.rows || fine->cols != r.corrected.cols) {
        throw std::invalid_argument("fine reference shape " + shape_str(fine->rows, fine->cols) +
                                    " does not match the corrected path " +
                                    shape_str(r.corrected.rows, r.corrected.cols));
    }
    r.fine = fine;
    Matrix res(fine->rows, fine->cols);
    for (std::size_t i = 0; i < res.data.size(); ++i) res.data[i] = r.corrected.data[i] - fine->data[i];
    r.residual = std::move(res);
}

inline Matrix values_of(const Demo& d) {
    Matrix m(d.columns(), static_cast<std::size_t>(d.state_dim));
    for (std::size_t n = 0; n < d.columns(); ++n) {
        for (int k = 0; k < d.state_dim; ++k) m(n, static_cast<std::size_t>(k)) = d.values(n, k);
    }
    return m;
}

}  // namespace detail

/// Corrects several query blocks that share one demo set.
inline std::vector<CorrectionResult> correct_blocks(Corrector& corrector, const std::vector<Demo>& demos,
                                                    const std::vector<Demo>& queries,
                                                    const std::vector<BlockContext>& ctx = {}) {
    for (const auto& d : demos) {
        for (const auto& q : queries) {
            if (d.system != q.system || d.params != q.params) {
                throw std::invalid_argument("correct_block: demos and query come from different systems or "
                                            "parameters");
            }
        }
    }
    std::vector<BlockContext> c = ctx;
    if (c.empty()) {
        for (std::size_t i = 0; i < queries.size(); ++i) c.push_back({i, 0});
    }
    if (c.size() != queries.size()) throw std::invalid_argument("correct_block: one context per query required");
    std::vector<Matrix> err = corrector.predict(demos, queries, c);
    if (err.size() != queries.size()) throw std::runtime_error("correct_block: corrector returned a wrong count");
    std::vector<CorrectionResult> out;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const Demo& q = queries[i];
        CorrectionResult r;
        r.coarse = detail::values_of(q);
        if (err[i].rows != q.columns() || err[i].cols != static_cast<std::size_t>(q.state_dim)) {
            throw std::runtime_error("correct_block: corrector output shape " + shape_str(err[i].rows, err[i].cols) +
                                     " does not match the query " +
                                     shape_str(q.columns(), static_cast<std::size_t>(q.state_dim)));
        }
        r.predicted_err = std::move(err[i]);
        for (auto& v : r.predicted_err.row(0)) v = 0.0;
        r.corrected = r.coarse;
        for (std::size_t j = 0; j < r.corrected.data.size(); ++j) r.corrected.data[j] += r.predicted_err.data[j];
        r.times = q.times;
        r.demos_used = demos.size();
        out.push_back(std::move(r));
    }
    return out;
}

inline CorrectionResult correct_block(Corrector& corrector, const std::vector<Demo>& demos, const Demo& query,
                                      const std::optional<Matrix>& fine = std::nullopt) {
    CorrectionResult r = std::move(correct_blocks(corrector, demos, {query}).front());
    detail::attach_reference(r, fine);
    return r;
}

/// A long coarse trajectory to be corrected block by block.
struct RolloutInput {
    std::string system;
    std::vector<double> params;
    Matrix coarse;     // (alpha N + 1) x dim
    Matrix agg_noise;  // (alpha N) x noise_dim
    double coarse_dt = 0.0;
    std::vector<int> noise_channels;
    std::optional<Matrix> fine;  // at coarse time stamps

    static RolloutInput from_pair(const TrajectoryPair& p, const SdeSystem& s, const ParamVector& params,
                                  bool with_fine = true) {
        RolloutInput in;
        in.system = std::string(s.name());
        in.params = params.values;
        in.coarse = p.coarse;
        in.agg_noise = p.agg_noise;
        in.coarse_dt = p.coarse_dt();
        in.noise_channels = s.demo_noise_channels;
        if (with_fine) in.fine = p.fine_at_coarse();
        return in;
    }
};

/// Block-wise correction of many trajectories sharing one demo set. Block b
/// covers coarse indices [bN, min((b+1)N, end)] with local times. Its coarse
/// values are shifted by the corrected-minus-coarse offset at the block's
/// first index, and that first column is set to the previous block's last
/// corrected value, so consecutive blocks join exactly.
inline std::vector<CorrectionResult> rollout_many(Corrector& corrector, const std::vector<RolloutInput>& inputs,
                                                  const std::vector<Demo>& demos, std::size_t block) {
    if (block == 0) throw std::invalid_argument("rollout: block length must be positive");
    std::vector<CorrectionResult> res(inputs.size());
    std::size_t max_blocks = 0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const auto& in = inputs[t];
        if (in.coarse.rows < 2) throw std::invalid_argument("rollout: coarse path needs at least two time stamps");
        if (in.agg_noise.rows + 1 != in.coarse.rows) throw std::invalid_argument("rollout: noise length mismatch");
        if (in.coarse.cols > static_cast<std::size_t>(kMaxDims)) throw std::invalid_argument("rollout: dim > 3");
        auto& r = res[t];
        r.coarse = in.coarse;
        r.corrected = Matrix(in.coarse.rows, in.coarse.cols);
        r.predicted_err = Matrix(in.coarse.rows, in.coarse.cols);
        for (std::size_t d = 0; d < in.coarse.cols; ++d) r.corrected(0, d) = in.coarse(0, d);
        r.times.resize(in.coarse.rows);
        for (std::size_t n = 0; n < in.coarse.rows; ++n) r.times[n] = static_cast<double>(n) * in.coarse_dt;
        r.demos_used = demos.size();
        max_blocks = std::max(max_blocks, (in.coarse.rows - 1 + block - 1) / block);
    }
    for (std::size_t b = 0; b < max_blocks; ++b) {
        std::vector<Demo> queries;
        std::vector<BlockContext> ctx;
        std::vector<std::size_t> owner;
        for (std::size_t t = 0; t < inputs.size(); ++t) {
            const auto& in = inputs[t];
            const std::size_t s = b * block;
            if (s + 1 >= in.coarse.rows) continue;
            const std::size_t e = std::min(s + block, in.coarse.rows - 1);
            const std::size_t dim = in.coarse.cols;
            std::vector<double> shift(dim);
            for (std::size_t d = 0; d < dim; ++d) shift[d] = res[t].corrected(s, d) - in.coarse(s, d);
            res[t].shifts.push_back(shift);
            Demo q;
            q.system = in.system;
            q.params = in.params;
            q.state_dim = static_cast<int>(dim);
            q.noise_channels = static_cast<int>(in.noise_channels.size());
            q.times.resize(e - s + 1);
            q.noise = Matrix(e - s + 1, kMaxDims);
            q.values = Matrix(e - s + 1, kMaxDims);
            q.err = Matrix(e - s + 1, kMaxDims);
            for (std::size_t d = 0; d < dim; ++d) q.dim_mask[d] = 1.0;
            for (std::size_t n = 0; n <= e - s; ++n) {
                q.times[n] = static_cast<double>(n) * in.coarse_dt;
                for (std::size_t d = 0; d < dim; ++d) {
                    q.values(n, static_cast<int>(d)) =
                        n == 0 ? res[t].corrected(s, d) : in.coarse(s + n, d) + shift[d];
                }
                if (s + n < e) {
                    for (std::size_t c = 0; c < in.noise_channels.size(); ++c) {
                        q.noise(n, static_cast<int>(c)) =
                            in.agg_noise(s + n, static_cast<std::size_t>(in.noise_channels[c]));
                    }
                }
            }
            queries.push_back(std::move(q));
            ctx.push_back({t, s});
            owner.push_back(t);
        }
        std::vector<CorrectionResult> blocks;
        try {
            blocks = correct_blocks(corrector, demos, queries, ctx);
        } catch (const std::exception& ex) {
            throw std::runtime_error("rollout: correction failed in block " + std::to_string(b) + ": " + ex.what());
        }
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& r = res[owner[i]];
            const std::size_t s = ctx[i].start;
            for (std::size_t n = 1; n < blocks[i].corrected.rows; ++n) {
                for (std::size_t d = 0; d < r.corrected.cols; ++d) {
                    r.corrected(s + n, d) = blocks[i].corrected(n, d);
                    r.predicted_err(s + n, d) = blocks[i].predicted_err(n, d);
                }
            }
        }
    }
    for (std::size_t t = 0; t < inputs.size(); ++t) detail::attach_reference(res[t], inputs[t].fine);
    return res;
}

inline CorrectionResult rollout(Corrector& corrector, const RolloutInput& input, const std::vector<Demo>& demos,
                                std::size_t block) {
    return std::move(rollout_many(corrector, {input}, demos, block).front());
}

/// n, t, then per dim: coarse, predicted_err, corrected and fine when known.
inline void write_correction_csv(std::ostream& os, const CorrectionResult& r) {
    const std::size_t dim = r.corrected.cols;
    os << "n,t";
    for (std::size_t d = 1; d <= dim; ++d) {
        os << ",coarse" << d << ",predicted_err" << d << ",corrected" << d;
        if (r.fine) os << ",fine" << d;
    }
    os << '\n';
    os.precision(12);
    for (std::size_t n = 0; n < r.corrected.rows; ++n) {
        os << n << ',' << r.times[n];
        for (std::size_t d = 0; d < dim; ++d) {
            os << ',' << r.coarse(n, d) << ',' << r.predicted_err(n, d) << ',' << r.corrected(n, d);
            if (r.fine) os << ',' << (*r.fine)(n, d);
        }
        os << '\n';
    }
}

}  // namespace fmint

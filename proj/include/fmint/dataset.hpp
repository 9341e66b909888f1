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
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fmint/common.hpp"
#include "fmint/integrate.hpp"
#include "fmint/rng.hpp"
#include "fmint/sde_systems.hpp"

namespace fmint {

inline constexpr int kMaxDims = 3;

// Raw per-token feature layout.
inline constexpr int kFeatTime = 0;
inline constexpr int kFeatNoise = 1;  // 3 columns
inline constexpr int kFeatValue = 4;  // 3 columns
inline constexpr int kFeatMask = 7;   // 3 columns
inline constexpr int kFeatDropped = 10;
inline constexpr int kFeatureDim = 11;

/// Value written into the noise and value features of a dropped column.
inline constexpr double kDroppedSentinel = 0.0;

/// One demo block: per coarse time stamp the aggregated noise, the coarse
/// state and the error, padded to three dimensions.
///
/// Column n carries the increment of the step that leaves t_n; the last
/// column has no outgoing step and carries zero noise.
struct Demo {
    std::string system;
    std::vector<double> params;
    int state_dim = 0;
    int noise_channels = 0;
    std::vector<double> times;  // N + 1
    Matrix noise;               // (N + 1) x 3
    Matrix values;              // (N + 1) x 3
    Matrix err;                 // (N + 1) x 3
    std::array<double, kMaxDims> dim_mask{0.0, 0.0, 0.0};

    std::size_t columns() const { return times.size(); }
    friend bool operator==(const Demo&, const Demo&) = default;
};

/// Builds a demo from a simulated pair. `noise_channels` picks which noise
/// channels appear in the demo (defaults to the system's selection).
inline Demo build_demo(const TrajectoryPair& pair, const SdeSystem& sys, const ParamVector& params,
                       std::optional<std::vector<int>> noise_channels = std::nullopt, double t0 = 0.0) {
    if (pair.state_dim > kMaxDims) {
        throw std::invalid_argument("build_demo: state dimension " + std::to_string(pair.state_dim) +
                                    " exceeds the supported maximum of 3");
    }
    if (pair.rejected) throw std::invalid_argument("build_demo: trajectory was rejected (" + pair.reject_reason + ")");
    const std::size_t cols = pair.coarse.rows;
    if (cols == 0 || pair.err.rows != cols || pair.agg_noise.rows + 1 != cols ||
        pair.coarse.cols != static_cast<std::size_t>(pair.state_dim)) {
        throw std::invalid_argument("build_demo: inconsistent pair arrays");
    }
    const std::vector<int> channels = noise_channels ? *noise_channels : sys.demo_noise_channels;
    if (channels.size() > static_cast<std::size_t>(kMaxDims)) {
        throw std::invalid_argument("build_demo: at most three noise channels fit in a demo");
    }
    Demo d;
    d.system = std::string(sys.name());
    d.params = params.values;
    d.state_dim = pair.state_dim;
    d.noise_channels = static_cast<int>(channels.size());
    d.times.resize(cols);
    d.noise = Matrix(cols, kMaxDims);
    d.values = Matrix(cols, kMaxDims);
    d.err = Matrix(cols, kMaxDims);
    const double h = pair.coarse_dt();
    for (std::size_t n = 0; n < cols; ++n) {
        d.times[n] = t0 + static_cast<double>(n) * h;
        for (int c = 0; c < pair.state_dim; ++c) {
            d.values(n, c) = pair.coarse(n, c);
            d.err(n, c) = pair.err(n, c);
        }
        if (n + 1 < cols) {
            for (std::size_t c = 0; c < channels.size(); ++c) {
                const int ch = channels[c];
                if (ch < 0 || ch >= pair.noise_dim) throw std::invalid_argument("build_demo: bad noise channel");
                d.noise(n, c) = pair.agg_noise(n, static_cast<std::size_t>(ch));
            }
        }
    }
    for (int c = 0; c < pair.state_dim; ++c) d.dim_mask[c] = 1.0;
    return d;
}

/// Query conditions of a demo: identical but with the error block cleared.
inline Demo query_conditions(Demo d) {
    std::fill(d.err.data.begin(), d.err.data.end(), 0.0);
    return d;
}

/// CSV of one demo: n, t, dW.., X.., err.. over the valid dims.
inline void write_demo_csv(std::ostream& os, const Demo& d) {
    os << "n,t";
    for (int c = 0; c < d.noise_channels; ++c) os << ",dW" << c + 1;
    for (int c = 0; c < d.state_dim; ++c) os << ",X" << c + 1;
    for (int c = 0; c < d.state_dim; ++c) os << ",err" << c + 1;
    os << '\n';
    os.precision(12);
    for (std::size_t n = 0; n < d.columns(); ++n) {
        os << n << ',' << d.times[n];
        for (int c = 0; c < d.noise_channels; ++c) os << ',' << d.noise(n, c);
        for (int c = 0; c < d.state_dim; ++c) os << ',' << d.values(n, c);
        for (int c = 0; c < d.state_dim; ++c) os << ',' << d.err(n, c);
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// In-context samples
// ---------------------------------------------------------------------------

enum class TokenCategory : std::uint8_t { prompt, cond, err };

/// Prompt token vectors, one row per token.
using PromptTokens = Matrix;

/// K demos followed by one query, laid out as tokens:
///   [prompt | ex1 cond | ex1 err | ... | ex(K+1) cond | ex(K+1) err].
///
/// `tokens` holds the raw features of the numeric tokens only, in the same
/// order (prompt tokens are vectors in `prompt`). The query's err block is
/// present but never reachable from any scored position.
struct IclSample {
    std::optional<PromptTokens> prompt;
    std::vector<Demo> examples;
    Matrix tokens;                        // numeric tokens x kFeatureDim
    std::vector<TokenCategory> category;  // all tokens, prompt first
    std::vector<int> example_index;       // -1 for prompt tokens
    std::vector<int> column_index;        // time index within the block, -1 for prompt
    std::vector<std::size_t> cond_positions;  // token positions of cond tokens
    std::vector<std::uint8_t> loss_mask;      // per cond position
    std::vector<std::uint8_t> dropped;        // per cond position

    std::size_t prompt_count() const { return prompt ? prompt->rows : 0; }
    std::size_t token_count() const { return category.size(); }
    std::size_t num_examples() const { return examples.size(); }
    std::size_t scored_count() const {
        return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
    }
    bool trainable() const { return scored_count() > 0; }
};

/// Tokens in a layout of K+1 examples with N+1 columns each.
inline std::size_t icl_token_count(std::size_t k_demos, std::size_t n_coarse, std::size_t prompt_tokens) {
    return prompt_tokens + (k_demos + 1) * 2 * (n_coarse + 1);
}

namespace detail {

inline void write_token(Matrix& tokens, std::size_t row, const Demo& d, std::size_t n, bool err_block) {
    auto r = tokens.row(row);
    r[kFeatTime] = d.times[n];
    for (int c = 0; c < kMaxDims; ++c) {
        r[kFeatNoise + c] = d.noise(n, c);
        r[kFeatValue + c] = err_block ? d.err(n, c) : d.values(n, c);
        r[kFeatMask + c] = d.dim_mask[c];
    }
    r[kFeatDropped] = 0.0;
}

}  // namespace detail

/// Lays out demos and query. The loss covers the cond positions of examples
/// 2..K+1, and of example 1 as well when a prompt is attached.
inline IclSample assemble_icl_sample(std::vector<Demo> demos, Demo query,
                                     std::optional<PromptTokens> prompt = std::nullopt) {
    for (const auto& d : demos) {
        if (d.system != query.system || d.params != query.params) {
            throw std::invalid_argument("assemble_icl_sample: demos and query come from different systems or "
                                        "parameters");
        }
        if (d.state_dim != query.state_dim) throw std::invalid_argument("assemble_icl_sample: dimension mismatch");
    }
    IclSample s;
    s.prompt = std::move(prompt);
    s.examples = std::move(demos);
    s.examples.push_back(std::move(query));

    std::size_t numeric = 0;
    for (const auto& d : s.examples) numeric += 2 * d.columns();
    s.tokens = Matrix(numeric, kFeatureDim);
    const std::size_t P = s.prompt_count();
    s.category.assign(P, TokenCategory::prompt);
    s.example_index.assign(P, -1);
    s.column_index.assign(P, -1);

    std::size_t row = 0;
    for (std::size_t e = 0; e < s.examples.size(); ++e) {
        const Demo& d = s.examples[e];
        const bool scored = e >= 1 || s.prompt.has_value();
        for (std::size_t n = 0; n < d.columns(); ++n) {
            detail::write_token(s.tokens, row, d, n, false);
            s.cond_positions.push_back(P + row);
            s.loss_mask.push_back(scored ? 1 : 0);
            s.dropped.push_back(0);
            s.category.push_back(TokenCategory::cond);
            s.example_index.push_back(static_cast<int>(e));
            s.column_index.push_back(static_cast<int>(n));
            ++row;
        }
        for (std::size_t n = 0; n < d.columns(); ++n) {
            detail::write_token(s.tokens, row, d, n, true);
            s.category.push_back(TokenCategory::err);
            s.example_index.push_back(static_cast<int>(e));
            s.column_index.push_back(static_cast<int>(n));
            ++row;
        }
    }
    return s;
}

/// Masks a random subset of cond columns: their noise and value features are
/// replaced by the sentinel, the dropped flag is set, and they leave the loss.
/// The query's first column is never dropped.
inline IclSample apply_timestamp_dropout(IclSample s, double fraction, CounterRng& rng) {
    if (!(fraction >= 0.0 && fraction < 1.0)) {
        throw std::invalid_argument("apply_timestamp_dropout: fraction must be in [0, 1)");
    }
    if (fraction == 0.0) return s;
    const std::size_t P = s.prompt_count();
    const int query = static_cast<int>(s.examples.size()) - 1;
    for (std::size_t i = 0; i < s.cond_positions.size(); ++i) {
        const std::size_t pos = s.cond_positions[i];
        const bool protected_col = s.example_index[pos] == query && s.column_index[pos] == 0;
        const bool drop = rng.uniform() < fraction;
        if (!drop || protected_col) continue;
        auto r = s.tokens.row(pos - P);
        for (int c = 0; c < kMaxDims; ++c) {
            r[kFeatNoise + c] = kDroppedSentinel;
            r[kFeatValue + c] = kDroppedSentinel;
        }
        r[kFeatDropped] = 1.0;
        s.dropped[i] = 1;
        s.loss_mask[i] = 0;
    }
    return s;
}

/// Deterministic stand-in for a language-model text embedding: words are
/// hashed to Gaussian vectors and pooled round-robin into `count` slots, each
/// slot normalized to unit length. Empty text gives zero vectors.
inline PromptTokens embed_prompt_stub(std::string_view text, std::size_t count, std::size_t dim) {
    PromptTokens out(count, dim);
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const auto uc = static_cast<unsigned char>(ch);
        if (std::isalnum(uc) || uc >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(uc)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    if (words.empty() || count == 0) return out;
    for (std::size_t w = 0; w < words.size(); ++w) {
        // Position salt keeps word order visible to the pooled vectors.
        CounterRng rng(derive_key({hash_name(words[w]), w / count}));
        auto slot = out.row(w % count);
        for (double& v : slot) v += rng.normal();
    }
    for (std::size_t r = 0; r < count; ++r) {
        auto slot = out.row(r);
        double norm = 0.0;
        for (double v : slot) norm += v * v;
        if (norm > 0.0) {
            norm = std::sqrt(norm);
            for (double& v : slot) v /= norm;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Affine standardization used to feed the model; inverted for predictions.
struct NormStats {
    double time_scale = 1.0;
    std::array<double, kMaxDims> noise_scale{1.0, 1.0, 1.0};
    std::array<double, kMaxDims> value_mean{0.0, 0.0, 0.0};
    std::array<double, kMaxDims> value_std{1.0, 1.0, 1.0};
    std::array<double, kMaxDims> err_mean{0.0, 0.0, 0.0};
    std::array<double, kMaxDims> err_std{1.0, 1.0, 1.0};

    friend bool operator==(const NormStats&, const NormStats&) = default;
};

inline nlohmann::json to_json(const NormStats& s) {
    return {{"time_scale", s.time_scale}, {"noise_scale", s.noise_scale}, {"value_mean", s.value_mean},
            {"value_std", s.value_std},   {"err_mean", s.err_mean},       {"err_std", s.err_std}};
}

inline NormStats norm_stats_from_json(const nlohmann::json& j) {
    NormStats s;
    s.time_scale = j.at("time_scale").get<double>();
    s.noise_scale = j.at("noise_scale").get<std::array<double, kMaxDims>>();
    s.value_mean = j.at("value_mean").get<std::array<double, kMaxDims>>();
    s.value_std = j.at("value_std").get<std::array<double, kMaxDims>>();
    s.err_mean = j.at("err_mean").get<std::array<double, kMaxDims>>();
    s.err_std = j.at("err_std").get<std::array<double, kMaxDims>>();
    return s;
}

/// Statistics over a set of demos. Dimensions never observed keep (0, 1).
inline NormStats compute_norm_stats(const std::vector<Demo>& demos) {
    NormStats s;
    if (demos.empty()) return s;
    std::array<double, kMaxDims> vs{}, vss{}, es{}, ess{}, ns{}, nss{};
    std::array<double, kMaxDims> vc{}, nc{};
    double tmax = 0.0;
    for (const auto& d : demos) {
        tmax = std::max(tmax, d.times.back() - d.times.front());
        for (std::size_t n = 0; n < d.columns(); ++n) {
            for (int c = 0; c < d.state_dim; ++c) {
                vs[c] += d.values(n, c);
                vss[c] += d.values(n, c) * d.values(n, c);
                es[c] += d.err(n, c);
                ess[c] += d.err(n, c) * d.err(n, c);
                vc[c] += 1.0;
            }
            if (n + 1 < d.columns()) {
                for (int c = 0; c < d.noise_channels; ++c) {
                    ns[c] += d.noise(n, c);
                    nss[c] += d.noise(n, c) * d.noise(n, c);
                    nc[c] += 1.0;
                }
            }
        }
    }
    auto sd = [](double sum, double sq, double cnt) {
        if (cnt < 1.0) return 1.0;
        const double m = sum / cnt;
        const double v = std::max(0.0, sq / cnt - m * m);
        const double r = std::sqrt(v);
        return r > 1e-12 ? r : 1.0;
    };
    s.time_scale = tmax > 0.0 ? tmax : 1.0;
    for (int c = 0; c < kMaxDims; ++c) {
        if (vc[c] > 0.0) {
            s.value_mean[c] = vs[c] / vc[c];
            s.value_std[c] = sd(vs[c], vss[c], vc[c]);
            s.err_mean[c] = es[c] / vc[c];
            s.err_std[c] = sd(es[c], ess[c], vc[c]);
        }
        if (nc[c] > 0.0) s.noise_scale[c] = std::sqrt(nss[c] / nc[c]) > 1e-300 ? std::sqrt(nss[c] / nc[c]) : 1.0;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// One stored trajectory: coarse-resolution arrays plus its seed indices.
struct TrajectoryRecord {
    std::uint32_t param_index = 0;
    std::uint32_t ic_index = 0;
    std::uint32_t noise_index = 0;
    std::vector<double> params;
    TrajectoryPair pair;  // fine path not stored

    friend bool operator==(const TrajectoryRecord& a, const TrajectoryRecord& b) {
        return a.param_index == b.param_index && a.ic_index == b.ic_index && a.noise_index == b.noise_index &&
               a.params == b.params && a.pair.coarse == b.pair.coarse && a.pair.agg_noise == b.pair.agg_noise &&
               a.pair.err == b.pair.err;
    }
};

struct DatasetConfig {
    int n_params = 20;
    int n_ics = 10;
    int n_noises = 40;
    std::uint64_t seed = 0;
    int n_coarse = 0;  // 0: system default
    int workers = 1;
    int max_attempts = 25;
    double blow_up_bound = 1e8;
};

struct Dataset {
    SdeSystem system;
    DatasetConfig config;
    std::vector<TrajectoryRecord> records;
    std::size_t rejected = 0;  // resampled trajectories

    int n_coarse() const { return config.n_coarse > 0 ? config.n_coarse : system.horizon_steps_coarse; }
};

inline ParamVector params_of(const SdeSystem& s, std::span<const double> values) {
    ParamVector p;
    for (std::size_t i = 0; i < s.param_spec.size(); ++i) {
        p.names.push_back(s.param_spec[i].name);
        p.values.push_back(values[i]);
    }
    return p;
}

/// Simulates one (param, ic, noise) triple, resampling the noise index on
/// blow-up. Returns the record and how many attempts were rejected.
inline std::pair<TrajectoryRecord, std::size_t> simulate_record(const SdeSystem& s, const DatasetConfig& cfg,
                                                                std::uint32_t pi, std::uint32_t ii, std::uint32_t ni) {
    const int N = cfg.n_coarse > 0 ? cfg.n_coarse : s.horizon_steps_coarse;
    auto prng = param_stream(cfg.seed, s.hash(), pi);
    const ParamVector p = sample_params(s, prng);
    auto irng = initial_stream(cfg.seed, s.hash(), pi, ii);
    const auto x0 = sample_initial(s, irng);
    SimulationOptions opt;
    opt.keep_fine_path = false;
    opt.blow_up_bound = cfg.blow_up_bound;
    std::size_t rejected = 0;
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        const std::uint64_t noise_index =
            ni + static_cast<std::uint64_t>(attempt) * static_cast<std::uint64_t>(std::max(cfg.n_noises, 1));
        NoiseStream noise({cfg.seed, s.hash(), pi, ii, noise_index}, s.dt_fine, s.noise_dim);
        auto pair = simulate_pair(s, p, x0, noise, N, s.stride_k, opt);
        if (pair.rejected) {
            ++rejected;
            continue;
        }
        TrajectoryRecord rec;
        rec.param_index = pi;
        rec.ic_index = ii;
        rec.noise_index = ni;
        rec.params = p.values;
        rec.pair = std::move(pair);
        return {std::move(rec), rejected};
    }
    throw std::runtime_error("simulate_record: system '" + std::string(s.name()) + "' param " + std::to_string(pi) +
                             " ic " + std::to_string(ii) + " blew up on " + std::to_string(cfg.max_attempts) +
                             " noise draws");
}

/// params x ICs x noise realizations trajectories, ordered by (param, ic,
/// noise). Workers split the index range; output does not depend on the
/// worker count.
inline Dataset generate_dataset(const SdeSystem& s, const DatasetConfig& cfg) {
    validate(s);
    if (cfg.n_params < 0 || cfg.n_ics < 0 || cfg.n_noises < 0) {
        throw std::invalid_argument("generate_dataset: counts must be non-negative");
    }
    Dataset ds;
    ds.system = s;
    ds.config = cfg;
    const std::size_t total = static_cast<std::size_t>(cfg.n_params) * cfg.n_ics * cfg.n_noises;
    ds.records.resize(total);
    std::vector<std::size_t> rejected(total, 0);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
            const auto ni = static_cast<std::uint32_t>(idx % cfg.n_noises);
            const auto ii = static_cast<std::uint32_t>((idx / cfg.n_noises) % cfg.n_ics);
            const auto pi = static_cast<std::uint32_t>(idx / (static_cast<std::size_t>(cfg.n_noises) * cfg.n_ics));
            auto [rec, rej] = simulate_record(s, cfg, pi, ii, ni);
            ds.records[idx] = std::move(rec);
            rejected[idx] = rej;
        }
    };
    const int workers = std::max(1, cfg.workers);
    if (workers == 1 || total < 2) {
        work(0, total);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        const std::size_t chunk = (total + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            const std::size_t b = std::min(total, chunk * w), e = std::min(total, chunk * (w + 1));
            pool.emplace_back([&, b, e, w] {
                try {
                    work(b, e);
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    for (auto r : rejected) ds.rejected += r;
    return ds;
}

inline Demo record_demo(const SdeSystem& s, const TrajectoryRecord& r) {
    return build_demo(r.pair, s, params_of(s, r.params));
}

inline NormStats compute_norm_stats(const SdeSystem& s, const std::vector<TrajectoryRecord>& records) {
    std::vector<Demo> demos;
    demos.reserve(records.size());
    for (const auto& r : records) demos.push_back(record_demo(s, r));
    return compute_norm_stats(demos);
}

// ---------------------------------------------------------------------------
// Shards
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr char kShardMagic[4] = {'F', 'M', 'S', 'D'};

class ShardError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ShardManifest {
    std::uint32_t format_version = kShardVersion;
    SdeSystem system;
    int n_params = 0;
    int n_ics = 0;
    int n_noises = 0;
    int n_coarse = 0;
    std::uint64_t base_seed = 0;
    std::size_t record_count = 0;
    std::size_t rejected = 0;
    std::vector<std::uint64_t> record_offsets;
    std::uint64_t payload_bytes = 0;
    std::uint64_t checksum = 0;
    NormStats stats;
};

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& b, double v) {
    put_u32(b, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline double get_f32(const std::uint8_t* p) { return static_cast<double>(std::bit_cast<float>(get_u32(p))); }

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

inline std::size_t record_bytes(const SdeSystem& s, int N) {
    const std::size_t sd = static_cast<std::size_t>(s.state_dim), nd = static_cast<std::size_t>(s.noise_dim);
    return 4 * (3 + s.param_spec.size() + 2 * (N + 1) * sd + N * nd);
}

}  // namespace detail

inline std::string manifest_path(const std::filesystem::path& shard) { return shard.string() + ".json"; }

inline nlohmann::json to_json(const ShardManifest& m) {
    nlohmann::json j;
    j["format_version"] = m.format_version;
    j["system"] = to_json(m.system);
    j["counts"] = {{"params", m.n_params}, {"ics", m.n_ics}, {"noises", m.n_noises}};
    j["n_coarse"] = m.n_coarse;
    j["stride_k"] = m.system.stride_k;
    j["dt_fine"] = m.system.dt_fine;
    j["seed"] = {{"base_seed", m.base_seed}};
    j["record_count"] = m.record_count;
    j["rejected"] = m.rejected;
    j["record_offsets"] = m.record_offsets;
    j["payload_bytes"] = m.payload_bytes;
    j["checksum_fnv1a64"] = detail::hex64(m.checksum);
    j["norm_stats"] = to_json(m.stats);
    return j;
}

inline ShardManifest manifest_from_json(const nlohmann::json& j) {
    ShardManifest m;
    m.format_version = j.at("format_version").get<std::uint32_t>();
    if (m.format_version != kShardVersion) {
        throw ShardError("shard manifest version " + std::to_string(m.format_version) + " is not supported (expected " +
                         std::to_string(kShardVersion) + ")");
    }
    m.system = system_from_json(j.at("system"));
    m.n_params = j.at("counts").at("params").get<int>();
    m.n_ics = j.at("counts").at("ics").get<int>();
    m.n_noises = j.at("counts").at("noises").get<int>();
    m.n_coarse = j.at("n_coarse").get<int>();
    m.base_seed = j.at("seed").at("base_seed").get<std::uint64_t>();
    m.record_count = j.at("record_count").get<std::size_t>();
    m.rejected = j.at("rejected").get<std::size_t>();
    m.record_offsets = j.at("record_offsets").get<std::vector<std::uint64_t>>();
    m.payload_bytes = j.at("payload_bytes").get<std::uint64_t>();
    m.checksum = std::stoull(j.at("checksum_fnv1a64").get<std::string>(), nullptr, 16);
    m.stats = norm_stats_from_json(j.at("norm_stats"));
    return m;
}

/// Writes the binary shard (magic, version, record count, f32 records) and
/// its JSON manifest sidecar.
inline ShardManifest write_shard(const Dataset& ds, const std::filesystem::path& path) {
    const SdeSystem& s = ds.system;
    const int N = ds.n_coarse();
    ShardManifest m;
    m.system = s;
    m.system.horizon_steps_coarse = N;
    m.n_params = ds.config.n_params;
    m.n_ics = ds.config.n_ics;
    m.n_noises = ds.config.n_noises;
    m.n_coarse = N;
    m.base_seed = ds.config.seed;
    m.record_count = ds.records.size();
    m.rejected = ds.rejected;

    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), std::begin(kShardMagic), std::end(kShardMagic));
    detail::put_u32(buf, kShardVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(ds.records.size()));
    const std::size_t header = buf.size();
    buf.reserve(header + ds.records.size() * detail::record_bytes(s, N));
    for (const auto& r : ds.records) {
        if (r.pair.n_coarse != N || r.params.size() != s.param_spec.size()) {
            throw std::invalid_argument("write_shard: record shape does not match the dataset");
        }
        m.record_offsets.push_back(buf.size());
        detail::put_u32(buf, r.param_index);
        detail::put_u32(buf, r.ic_index);
        detail::put_u32(buf, r.noise_index);
        for (double v : r.params) detail::put_f32(buf, v);
        for (double v : r.pair.coarse.data) detail::put_f32(buf, v);
        for (double v : r.pair.agg_noise.data) detail::put_f32(buf, v);
        for (double v : r.pair.err.data) detail::put_f32(buf, v);
    }
    m.payload_bytes = buf.size() - header;
    m.checksum = fnv1a64(buf.data() + header, m.payload_bytes);

    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw ShardError("cannot open '" + path.string() + "' for writing");
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!os) throw ShardError("failed writing '" + path.string() + "'");
    }
    // Normalization statistics are taken from the stored (f32) values.
    std::vector<TrajectoryRecord> stored;
    stored.reserve(ds.records.size());
    for (const auto& r : ds.records) {
        TrajectoryRecord c = r;
        for (auto* mat : {&c.pair.coarse, &c.pair.agg_noise, &c.pair.err}) {
            for (double& v : mat->data) v = static_cast<double>(static_cast<float>(v));
        }
        stored.push_back(std::move(c));
    }
    m.stats = compute_norm_stats(s, stored);
    std::ofstream js(manifest_path(path), std::ios::trunc);
    if (!js) throw ShardError("cannot open '" + manifest_path(path) + "' for writing");
    js << to_json(m).dump(1) << '\n';
    return m;
}

/// Loads and validates a shard. Records are decoded lazily by index.
class ShardReader {
public:
    explicit ShardReader(const std::filesystem::path& path) : path_(path) {
        std::ifstream js(manifest_path(path));
        if (!js) throw ShardError("missing shard manifest '" + manifest_path(path) + "'");
        nlohmann::json j;
        try {
            js >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ShardError("malformed shard manifest '" + manifest_path(path) + "': " + e.what());
        }
        manifest_ = manifest_from_json(j);
        std::ifstream is(path, std::ios::binary);
        if (!is) throw ShardError("missing shard '" + path.string() + "'");
        bytes_.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
        if (bytes_.size() < 12 || std::memcmp(bytes_.data(), kShardMagic, 4) != 0) {
            throw ShardError("'" + path.string() + "' is not an FMSD shard");
        }
        const std::uint32_t version = detail::get_u32(bytes_.data() + 4);
        if (version != kShardVersion) {
            throw ShardError("shard version " + std::to_string(version) + " is not supported");
        }
        const std::uint32_t count = detail::get_u32(bytes_.data() + 8);
        const std::uint64_t payload = bytes_.size() - 12;
        const std::uint64_t sum = fnv1a64(bytes_.data() + 12, payload);
        if (payload != manifest_.payload_bytes || sum != manifest_.checksum) {
            throw ShardError("checksum mismatch in '" + path.string() + "' (file truncated or modified)");
        }
        if (count != manifest_.record_count || manifest_.record_offsets.size() != count) {
            throw ShardError("record count mismatch between shard and manifest");
        }
        for (std::size_t i = 1; i < manifest_.record_offsets.size(); ++i) {
            if (manifest_.record_offsets[i] <= manifest_.record_offsets[i - 1]) {
                throw ShardError("record offsets are not strictly increasing");
            }
        }
        const std::size_t rb = detail::record_bytes(manifest_.system, manifest_.n_coarse);
        for (auto off : manifest_.record_offsets) {
            if (off + rb > bytes_.size()) throw ShardError("record offset beyond end of shard");
        }
    }

    const ShardManifest& manifest() const { return manifest_; }
    const SdeSystem& system() const { return manifest_.system; }
    std::size_t size() const { return manifest_.record_count; }

    TrajectoryRecord record(std::size_t i) const {
        const SdeSystem& s = manifest_.system;
        const int N = manifest_.n_coarse;
        const std::uint8_t* p = bytes_.data() + manifest_.record_offsets.at(i);
        TrajectoryRecord r;
        r.param_index = detail::get_u32(p);
        r.ic_index = detail::get_u32(p + 4);
        r.noise_index = detail::get_u32(p + 8);
        p += 12;
        for (std::size_t k = 0; k < s.param_spec.size(); ++k, p += 4) r.params.push_back(detail::get_f32(p));
        auto& pr = r.pair;
        pr.state_dim = s.state_dim;
        pr.noise_dim = s.noise_dim;
        pr.dt_fine = s.dt_fine;
        pr.stride_k = s.stride_k;
        pr.n_coarse = N;
        pr.coarse = Matrix(static_cast<std::size_t>(N) + 1, static_cast<std::size_t>(s.state_dim));
        pr.agg_noise = Matrix(static_cast<std::size_t>(N), static_cast<std::size_t>(s.noise_dim));
        pr.err = Matrix(static_cast<std::size_t>(N) + 1, static_cast<std::size_t>(s.state_dim));
        for (auto* mat : {&pr.coarse, &pr.agg_noise, &pr.err}) {
            for (double& v : mat->data) {
                v = detail::get_f32(p);
                p += 4;
            }
        }
        return r;
    }

    std::vector<TrajectoryRecord> records() const {
        std::vector<TrajectoryRecord> out;
        out.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) out.push_back(record(i));
        return out;
    }

    class iterator {
    public:
        using value_type = TrajectoryRecord;
        using difference_type = std::ptrdiff_t;
        iterator(const ShardReader* r, std::size_t i) : r_(r), i_(i) {}
        TrajectoryRecord operator*() const { return r_->record(i_); }
        iterator& operator++() {
            ++i_;
            return *this;
        }
        bool operator==(const iterator& o) const { return i_ == o.i_; }

    private:
        const ShardReader* r_;
        std::size_t i_;
    };
    iterator begin() const { return {this, 0}; }
    iterator end() const { return {this, size()}; }

    /// Back to an in-memory dataset (records as stored, f32 precision).
    Dataset to_dataset() const {
        Dataset ds;
        ds.system = manifest_.system;
        ds.config.n_params = manifest_.n_params;
        ds.config.n_ics = manifest_.n_ics;
        ds.config.n_noises = manifest_.n_noises;
        ds.config.n_coarse = manifest_.n_coarse;
        ds.config.seed = manifest_.base_seed;
        ds.records = records();
        ds.rejected = manifest_.rejected;
        return ds;
    }

private:
    std::filesystem::path path_;
    ShardManifest manifest_;
    std::vector<std::uint8_t> bytes_;
};

}  // namespace fmint

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

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fmint/autodiff.hpp"
#include "fmint/dataset.hpp"

namespace fmint {

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int head_dim = 0;  // 0: d_model / n_heads
    int max_examples = 5;
    int max_prompt_tokens = 8;
    int feature_dim = kFeatureDim;
    int out_dim = kMaxDims;

    int key_dim() const { return head_dim > 0 ? head_dim : d_model / n_heads; }
    int attn_width() const { return key_dim() * n_heads; }
    int positional_rows() const { return 2 * max_examples + 1; }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw std::invalid_argument("ModelConfig: " + msg);
        };
        need(n_layers >= 1, "n_layers must be positive");
        need(n_heads >= 1, "n_heads must be positive");
        need(d_model >= 1, "d_model must be positive");
        need(d_ff >= 1, "d_ff must be positive");
        need(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        need(head_dim >= 0, "head_dim must be non-negative");
        need(max_examples >= 1, "max_examples must be positive");
        need(max_prompt_tokens >= 0, "max_prompt_tokens must be non-negative");
        need(feature_dim == kFeatureDim, "feature_dim must be " + std::to_string(kFeatureDim));
        need(out_dim == kMaxDims, "out_dim must be " + std::to_string(kMaxDims));
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Six layers, eight heads, width 256, FFN 1024. Each head projects to the
/// full model width, which is what the reported parameter total implies.
inline ModelConfig full_scale_config() {
    ModelConfig c;
    c.n_layers = 6;
    c.n_heads = 8;
    c.d_model = 256;
    c.d_ff = 1024;
    c.head_dim = 256;
    c.max_examples = 5;
    c.max_prompt_tokens = 8;
    return c;
}

inline ModelConfig toy_config() { return ModelConfig{}; }

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
            {"d_model", c.d_model},         {"d_ff", c.d_ff},
            {"head_dim", c.head_dim},       {"max_examples", c.max_examples},
            {"max_prompt_tokens", c.max_prompt_tokens}, {"feature_dim", c.feature_dim},
            {"out_dim", c.out_dim}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.max_examples = j.value("max_examples", c.max_examples);
    c.max_prompt_tokens = j.value("max_prompt_tokens", c.max_prompt_tokens);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.out_dim = j.value("out_dim", c.out_dim);
    c.validate();
    return c;
}

/// Name and shape of every trainable tensor, in storage order.
inline std::vector<std::pair<std::string, std::pair<int, int>>> parameter_shapes(const ModelConfig& c) {
    c.validate();
    const int d = c.d_model, a = c.attn_width();
    std::vector<std::pair<std::string, std::pair<int, int>>> s;
    s.push_back({"embed.w", {c.feature_dim, d}});
    s.push_back({"embed.b", {1, d}});
    s.push_back({"pos", {c.positional_rows(), d}});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        s.push_back({p + "ln1.g", {1, d}});
        s.push_back({p + "ln1.b", {1, d}});
        s.push_back({p + "wq", {d, a}});
        s.push_back({p + "bq", {1, a}});
        s.push_back({p + "wk", {d, a}});
        s.push_back({p + "wv", {d, a}});
        s.push_back({p + "bv", {1, a}});
        s.push_back({p + "wo", {a, d}});
        s.push_back({p + "bo", {1, d}});
        s.push_back({p + "ln2.g", {1, d}});
        s.push_back({p + "ln2.b", {1, d}});
        s.push_back({p + "ff1.w", {d, c.d_ff}});
        s.push_back({p + "ff1.b", {1, c.d_ff}});
        s.push_back({p + "ff2.w", {c.d_ff, d}});
        s.push_back({p + "ff2.b", {1, d}});
    }
    s.push_back({"lnf.g", {1, d}});
    s.push_back({"lnf.b", {1, d}});
    s.push_back({"head1.w", {d, d}});
    s.push_back({"head1.b", {1, d}});
    s.push_back({"head2.w", {d, c.out_dim}});
    s.push_back({"head2.b", {1, c.out_dim}});
    return s;
}

/// Closed-form parameter total.
inline std::int64_t param_count(const ModelConfig& c) {
    c.validate();
    const std::int64_t d = c.d_model, a = c.attn_width(), f = c.d_ff, o = c.out_dim;
    const std::int64_t per_layer = 2 * d            // ln1
                                   + 3 * d * a + 2 * a  // q, k, v; keys carry no bias
                                   + a * d + d        // output projection
                                   + 2 * d            // ln2
                                   + d * f + f + f * d + d;
    return (c.feature_dim * d + d) + c.positional_rows() * d + c.n_layers * per_layer + 2 * d + (d * d + d) +
           (d * o + o);
}

template <class T>
struct ModelParams {
    ModelConfig config;
    std::vector<Parameter<T>> tensors;

    Parameter<T>& get(const std::string& name) { return tensors.at(index_of(name)); }
    const Parameter<T>& get(const std::string& name) const { return tensors.at(index_of(name)); }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            if (tensors[i].name == name) return i;
        }
        throw std::out_of_range("no parameter named '" + name + "'");
    }

    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& p : tensors) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : tensors) p.zero_grad();
    }

    std::vector<Parameter<T>*> pointers() {
        std::vector<Parameter<T>*> out;
        for (auto& p : tensors) out.push_back(&p);
        return out;
    }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.config = config;
        for (const auto& p : tensors) out.tensors.emplace_back(p.name, p.value.template cast<U>());
        return out;
    }
};

inline bool is_gain(const std::string& name) { return name.ends_with(".g"); }
inline bool is_bias(const std::string& name) { return name.ends_with(".b") || name.ends_with("bq") ||
                                                      name.ends_with("bv") ||
                                                      name.ends_with("bo"); }

/// Glorot-uniform weights and positional rows, zero biases, unit gains.
template <class T>
ModelParams<T> init_params(const ModelConfig& c, std::uint64_t seed) {
    ModelParams<T> mp;
    mp.config = c;
    CounterRng root(derive_key({seed, hash_name("model-init")}));
    for (const auto& [name, shape] : parameter_shapes(c)) {
        const auto [r, k] = shape;
        Tensor<T> v(r, k);
        if (is_gain(name)) {
            v.setOnes();
        } else if (is_bias(name)) {
            v.setZero();
        } else {
            CounterRng rng = root.split(hash_name(name));
            const double limit = std::sqrt(6.0 / static_cast<double>(r + k));
            for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(rng.uniform(-limit, limit));
        }
        mp.tensors.emplace_back(name, std::move(v));
    }
    return mp;
}

// ---------------------------------------------------------------------------
// Attention mask
// ---------------------------------------------------------------------------

struct AttentionMask {
    std::size_t size = 0;
    std::vector<std::uint8_t> allowed;  // row-major, [query][key]

    bool operator()(std::size_t q, std::size_t k) const { return allowed[q * size + k] != 0; }

    std::size_t keys_of(std::size_t q) const {
        std::size_t n = 0;
        for (std::size_t k = 0; k < size; ++k) n += allowed[q * size + k];
        return n;
    }

    template <class T>
    Tensor<T> additive() const {
        Tensor<T> m(static_cast<Eigen::Index>(size), static_cast<Eigen::Index>(size));
        for (std::size_t i = 0; i < allowed.size(); ++i) {
            m.data()[i] = allowed[i] ? T(0) : static_cast<T>(kMaskSentinel);
        }
        return m;
    }
};

/// Mask rules, for query token q and key token k:
///  (a) prompt tokens see prompt tokens only;
///  (b) other tokens see all prompt tokens and every token of earlier examples;
///  (c) a cond token of example e sees all cond tokens of e, no err token of e;
///  (d) an err token of e sees all cond tokens of e and err tokens of e up to itself.
inline AttentionMask build_attention_mask(const std::vector<TokenCategory>& category,
                                          const std::vector<int>& example_index) {
    if (category.size() != example_index.size()) {
        throw std::invalid_argument("build_attention_mask: category and example index lengths differ");
    }
    const std::size_t T = category.size();
    for (std::size_t i = 0; i < T; ++i) {
        const auto c = category[i];
        if (c != TokenCategory::prompt && c != TokenCategory::cond && c != TokenCategory::err) {
            throw std::invalid_argument("build_attention_mask: unknown token category at position " +
                                        std::to_string(i));
        }
        if (c != TokenCategory::prompt && example_index[i] < 0) {
            throw std::invalid_argument("build_attention_mask: numeric token without example index");
        }
    }
    AttentionMask m;
    m.size = T;
    m.allowed.assign(T * T, 0);
    for (std::size_t q = 0; q < T; ++q) {
        const auto cq = category[q];
        for (std::size_t k = 0; k < T; ++k) {
            const auto ck = category[k];
            bool ok = false;
            if (cq == TokenCategory::prompt) {
                ok = ck == TokenCategory::prompt;
            } else if (ck == TokenCategory::prompt) {
                ok = true;
            } else if (example_index[k] < example_index[q]) {
                ok = true;
            } else if (example_index[k] == example_index[q]) {
                if (ck == TokenCategory::cond) {
                    ok = true;
                } else {
                    ok = cq == TokenCategory::err && k <= q;
                }
            }
            m.allowed[q * T + k] = ok ? 1 : 0;
        }
    }
    return m;
}

/// Row blocks of equal (category, example); each block's key range ends
/// after the last key any of its rows may see.
inline std::vector<ad::AttentionBlock> attention_blocks(const AttentionMask& m, const std::vector<TokenCategory>& category,
                                                    const std::vector<int>& example_index) {
    std::vector<ad::AttentionBlock> out;
    const std::size_t T = m.size;
    for (std::size_t r = 0; r < T;) {
        std::size_t e = r;
        std::size_t key_end = 0;
        while (e < T && category[e] == category[r] && example_index[e] == example_index[r]) {
            for (std::size_t k = T; k > key_end; --k) {
                if (m(e, k - 1)) {
                    key_end = k;
                    break;
                }
            }
            ++e;
        }
        out.push_back({static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(key_end)});
        r = e;
    }
    return out;
}

inline AttentionMask build_attention_mask(const IclSample& s) {
    return build_attention_mask(s.category, s.example_index);
}

// ---------------------------------------------------------------------------
// Encoding and forward pass
// ---------------------------------------------------------------------------

/// Model-ready tensors for one sample, in normalized units.
template <class T>
struct ModelInput {
    Tensor<T> features;  // numeric tokens x 11
    std::optional<Tensor<T>> prompt;
    std::vector<std::size_t> positional;  // per token row of the positional table
    std::shared_ptr<const Tensor<T>> mask;
    std::shared_ptr<const std::vector<ad::AttentionBlock>> blocks;
    std::vector<std::size_t> cond_positions;
    Tensor<T> target;   // cond positions x 3, normalized err
    Tensor<T> weights;  // loss mask x dim mask
    std::size_t scored = 0;
};

/// Normalized features of one raw token. Dropped columns keep the sentinel
/// in their noise and value slots; padded dims stay 0.
template <class T, class Row>
void encode_token(std::span<const double> raw, bool err, const NormStats& st, Row&& f) {
    f.setZero();
    f(kFeatTime) = static_cast<T>(raw[kFeatTime] / st.time_scale);
    const bool dropped = raw[kFeatDropped] != 0.0;
    for (int d = 0; d < kMaxDims; ++d) {
        const bool valid = raw[kFeatMask + d] != 0.0;
        f(kFeatMask + d) = static_cast<T>(raw[kFeatMask + d]);
        if (dropped) continue;
        f(kFeatNoise + d) = static_cast<T>(raw[kFeatNoise + d] / st.noise_scale[d]);
        if (!valid) continue;
        const double v = err ? (raw[kFeatValue + d] - st.err_mean[d]) / st.err_std[d]
                             : (raw[kFeatValue + d] - st.value_mean[d]) / st.value_std[d];
        f(kFeatValue + d) = static_cast<T>(v);
    }
    f(kFeatDropped) = static_cast<T>(raw[kFeatDropped]);
}

template <class T>
ModelInput<T> encode(const IclSample& s, const NormStats& st, const ModelConfig& c) {
    ModelInput<T> in;
    const std::size_t P = s.prompt_count();
    if (P > static_cast<std::size_t>(c.max_prompt_tokens)) {
        throw std::invalid_argument("encode: " + std::to_string(P) + " prompt tokens exceed the configured maximum " +
                                    std::to_string(c.max_prompt_tokens));
    }
    if (s.examples.size() > static_cast<std::size_t>(c.max_examples)) {
        throw std::invalid_argument("encode: " + std::to_string(s.examples.size()) +
                                    " examples exceed the configured maximum " + std::to_string(c.max_examples));
    }
    if (s.prompt) {
        if (s.prompt->cols != static_cast<std::size_t>(c.d_model)) {
            throw std::invalid_argument("encode: prompt width " + std::to_string(s.prompt->cols) +
                                        " does not match d_model " + std::to_string(c.d_model));
        }
        Tensor<T> p(static_cast<Eigen::Index>(P), c.d_model);
        for (std::size_t i = 0; i < s.prompt->data.size(); ++i) p.data()[i] = static_cast<T>(s.prompt->data[i]);
        in.prompt = std::move(p);
    }
    const std::size_t n = s.tokens.rows;
    in.features = Tensor<T>(static_cast<Eigen::Index>(n), kFeatureDim);
    for (std::size_t r = 0; r < n; ++r) {
        const bool err = s.category[P + r] == TokenCategory::err;
        encode_token<T>(s.tokens.row(r), err, st, in.features.row(static_cast<Eigen::Index>(r)));
    }
    in.positional.resize(s.token_count());
    for (std::size_t i = 0; i < s.token_count(); ++i) {
        in.positional[i] = s.category[i] == TokenCategory::prompt
                               ? 0
                               : 1 + 2 * static_cast<std::size_t>(s.example_index[i]) +
                                     (s.category[i] == TokenCategory::err ? 1 : 0);
    }
    const AttentionMask am = build_attention_mask(s);
    in.mask = std::make_shared<const Tensor<T>>(am.additive<T>());
    in.blocks = std::make_shared<const std::vector<ad::AttentionBlock>>(attention_blocks(am, s.category, s.example_index));
    in.cond_positions = s.cond_positions;
    const auto m = static_cast<Eigen::Index>(s.cond_positions.size());
    in.target = Tensor<T>::Zero(m, kMaxDims);
    in.weights = Tensor<T>::Zero(m, kMaxDims);
    for (std::size_t i = 0; i < s.cond_positions.size(); ++i) {
        const std::size_t pos = s.cond_positions[i];
        const Demo& d = s.examples[static_cast<std::size_t>(s.example_index[pos])];
        const auto col = static_cast<std::size_t>(s.column_index[pos]);
        for (int k = 0; k < kMaxDims; ++k) {
            if (d.dim_mask[k] == 0.0) continue;
            in.target(static_cast<Eigen::Index>(i), k) =
                static_cast<T>((d.err(col, k) - st.err_mean[k]) / st.err_std[k]);
            in.weights(static_cast<Eigen::Index>(i), k) = s.loss_mask[i] ? T(1) : T(0);
        }
    }
    in.scored = s.scored_count();
    return in;
}

class NonFiniteActivation : public std::runtime_error {
public:
    NonFiniteActivation(int layer, const std::string& what)
        : std::runtime_error("non-finite activation in layer " + std::to_string(layer) + " (" + what + ")"),
          layer_(layer) {}
    int layer() const { return layer_; }

private:
    int layer_;
};

namespace detail {

template <class T>
void check_finite(Var<T> v, int layer, const char* what) {
    if (!v.value().allFinite()) throw NonFiniteActivation(layer, what);
}

template <class T>
Var<T> linear(Tape<T>& t, Var<T> x, ModelParams<T>& mp, const std::string& w, const std::string& b) {
    return ad::add_bias(ad::matmul(x, t.param(mp.get(w))), t.param(mp.get(b)));
}

}  // namespace detail

/// Normalized error predictions at every cond position, (#cond x 3).
template <class T>
Var<T> forward(Tape<T>& t, ModelParams<T>& mp, const ModelInput<T>& in) {
    const ModelConfig& c = mp.config;
    const std::size_t T_total = in.positional.size();
    if (T_total != static_cast<std::size_t>(in.mask->rows())) {
        throw std::invalid_argument("forward: mask and layout sizes differ");
    }
    Var<T> x = detail::linear(t, t.constant(in.features), mp, "embed.w", "embed.b");
    if (in.prompt) x = ad::concat_rows<T>({t.constant(*in.prompt), x});
    x = ad::add(x, ad::gather_rows(t.param(mp.get("pos")), in.positional));
    detail::check_finite(x, 0, "embedding");
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Var<T> h = ad::layer_norm(x, t.param(mp.get(p + "ln1.g")), t.param(mp.get(p + "ln1.b")));
        Var<T> q = detail::linear(t, h, mp, p + "wq", p + "bq");
        // A key bias only shifts each score row by a constant, which softmax
        // ignores, so keys are unbiased.
        Var<T> k = ad::matmul(h, t.param(mp.get(p + "wk")));
        Var<T> v = detail::linear(t, h, mp, p + "wv", p + "bv");
        Var<T> att = ad::masked_attention(q, k, v, c.n_heads, in.mask, in.blocks);
        x = ad::add(x, detail::linear(t, att, mp, p + "wo", p + "bo"));
        Var<T> h2 = ad::layer_norm(x, t.param(mp.get(p + "ln2.g")), t.param(mp.get(p + "ln2.b")));
        Var<T> ff = detail::linear(t, ad::gelu(detail::linear(t, h2, mp, p + "ff1.w", p + "ff1.b")), mp,
                                   p + "ff2.w", p + "ff2.b");
        x = ad::add(x, ff);
        detail::check_finite(x, l + 1, "block output");
    }
    x = ad::layer_norm(x, t.param(mp.get("lnf.g")), t.param(mp.get("lnf.b")));
    Var<T> sel = ad::gather_rows(x, in.cond_positions);
    Var<T> y = detail::linear(t, ad::gelu(detail::linear(t, sel, mp, "head1.w", "head1.b")), mp, "head2.w",
                              "head2.b");
    detail::check_finite(y, c.n_layers + 1, "head");
    return y;
}

/// Mean over scored positions of the squared error summed over valid dims.
template <class T>
Var<T> msd_loss(Var<T> pred, const Tensor<T>& target, const Tensor<T>& weights, std::size_t scored) {
    if (scored == 0) throw std::invalid_argument("msd_loss: loss mask is empty");
    return ad::weighted_sq_sum(pred, target, weights, static_cast<T>(scored));
}

template <class T>
Var<T> msd_loss(Var<T> pred, const ModelInput<T>& in) {
    return msd_loss(pred, in.target, in.weights, in.scored);
}

/// Mean over scored positions of the unsquared Euclidean distance; reported
/// next to the training loss.
template <class T>
double msd_unsquared(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>& weights) {
    double sum = 0.0;
    std::size_t n = 0;
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
        double sq = 0.0;
        bool any = false;
        for (Eigen::Index d = 0; d < pred.cols(); ++d) {
            if (weights(i, d) == T(0)) continue;
            any = true;
            const double e = static_cast<double>(pred(i, d)) - static_cast<double>(target(i, d));
            sq += e * e;
        }
        if (any) {
            sum += std::sqrt(sq);
            ++n;
        }
    }
    if (n == 0) throw std::invalid_argument("msd_unsquared: loss mask is empty");
    return sum / static_cast<double>(n);
}

/// De-normalized error predictions at every cond position, (#cond x 3).
template <class T>
Matrix predict_err(ModelParams<T>& mp, const IclSample& s, const NormStats& st) {
    const ModelInput<T> in = encode<T>(s, st, mp.config);
    Tape<T> tape;
    const Tensor<T>& y = forward(tape, mp, in).value();
    Matrix out(static_cast<std::size_t>(y.rows()), kMaxDims);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        for (int d = 0; d < kMaxDims; ++d) {
            out(static_cast<std::size_t>(i), static_cast<std::size_t>(d)) =
                static_cast<double>(y(i, d)) * st.err_std[d] + st.err_mean[d];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batched inference
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
Tensor<T> ln_rows(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b) {
    Tensor<T> out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const T mean = x.row(i).mean();
        const T var = (x.row(i).array() - mean).square().mean();
        const T is = T(1) / std::sqrt(var + T(1e-5));
        out.row(i) = ((x.row(i).array() - mean) * is).matrix().cwiseProduct(g.row(0)) + b.row(0);
    }
    return out;
}

template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    Tensor<T> out(x.rows(), w.cols());
    out.noalias() = x * w;
    out.rowwise() += b.row(0);
    return out;
}

template <class T>
void gelu_inplace(Tensor<T>& x) {
    const T r2 = static_cast<T>(1.0 / std::numbers::sqrt2);
    x = (T(0.5) * x.array() * (T(1) + (x.array() * r2).erf())).matrix();
}

template <class T>
void softmax_rows_inplace(Tensor<T>& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const T mx = s.row(i).maxCoeff();
        if (is_masked(mx)) {
            s.row(i).setZero();
            continue;
        }
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
    }
}

}  // namespace detail

/// Per-layer keys and values of the demo (and prompt) tokens. Those tokens
/// never attend to a query, so one prefix serves any number of queries.
template <class T>
struct PrefixCache {
    std::vector<Tensor<T>> keys;
    std::vector<Tensor<T>> values;
    std::size_t query_example = 0;  // example slot the queries occupy
    NormStats stats;
};

/// Runs the demo tokens of `demos` (plus prompt) through the network.
template <class T>
PrefixCache<T> build_prefix(const ModelParams<T>& mp, const std::vector<Demo>& demos,
                            const std::optional<PromptTokens>& prompt, const NormStats& st) {
    const ModelConfig& c = mp.config;
    PrefixCache<T> pc;
    pc.query_example = demos.size();
    pc.stats = st;
    if (demos.size() + 1 > static_cast<std::size_t>(c.max_examples)) {
        throw std::invalid_argument("build_prefix: " + std::to_string(demos.size()) +
                                    " demos plus a query exceed the configured example slots");
    }
    // Reuse the sample builder on the demos alone: the last demo acts as the
    // "query" slot, whose err block is visible only to itself.
    if (demos.empty() && !prompt) {
        pc.keys.assign(static_cast<std::size_t>(c.n_layers), Tensor<T>(0, c.attn_width()));
        pc.values = pc.keys;
        return pc;
    }
    IclSample s;
    if (!demos.empty()) {
        std::vector<Demo> head(demos.begin(), demos.end() - 1);
        s = assemble_icl_sample(std::move(head), demos.back(), prompt);
    } else {
        s.prompt = prompt;
        s.category.assign(prompt->rows, TokenCategory::prompt);
        s.example_index.assign(prompt->rows, -1);
        s.column_index.assign(prompt->rows, -1);
        s.tokens = Matrix(0, kFeatureDim);
    }
    const ModelInput<T> in = encode<T>(s, st, c);
    Tensor<T> x = detail::affine(in.features, mp.get("embed.w").value, mp.get("embed.b").value);
    if (in.prompt) {
        Tensor<T> cat(in.prompt->rows() + x.rows(), x.cols());
        cat << *in.prompt, x;
        x = std::move(cat);
    }
    const auto& pos = mp.get("pos").value;
    for (std::size_t i = 0; i < in.positional.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) += pos.row(static_cast<Eigen::Index>(in.positional[i]));
    }
    const int hd = c.key_dim();
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Tensor<T> h = detail::ln_rows(x, mp.get(p + "ln1.g").value, mp.get(p + "ln1.b").value);
        Tensor<T> q = detail::affine(h, mp.get(p + "wq").value, mp.get(p + "bq").value);
        Tensor<T> k(h.rows(), c.attn_width());
        k.noalias() = h * mp.get(p + "wk").value;
        Tensor<T> v = detail::affine(h, mp.get(p + "wv").value, mp.get(p + "bv").value);
        Tensor<T> att(x.rows(), c.attn_width());
        for (int hh = 0; hh < c.n_heads; ++hh) {
            Tensor<T> sc(x.rows(), x.rows());
            sc.noalias() = q.middleCols(hh * hd, hd) * k.middleCols(hh * hd, hd).transpose();
            sc *= inv_sqrt;
            sc += *in.mask;
            detail::softmax_rows_inplace(sc);
            att.middleCols(hh * hd, hd).noalias() = sc * v.middleCols(hh * hd, hd);
        }
        pc.keys.push_back(std::move(k));
        pc.values.push_back(std::move(v));
        x += detail::affine(att, mp.get(p + "wo").value, mp.get(p + "bo").value);
        Tensor<T> f = detail::affine(detail::ln_rows(x, mp.get(p + "ln2.g").value, mp.get(p + "ln2.b").value),
                                     mp.get(p + "ff1.w").value, mp.get(p + "ff1.b").value);
        detail::gelu_inplace(f);
        x += detail::affine(f, mp.get(p + "ff2.w").value, mp.get(p + "ff2.b").value);
        if (!x.allFinite()) throw NonFiniteActivation(l + 1, "prefix");
    }
    return pc;
}

/// De-normalized error predictions for each query's cond columns, given a
/// prefix built from the same weights. Query err blocks are not used: no
/// cond position can see them.
template <class T>
std::vector<Matrix> predict_queries(const ModelParams<T>& mp, const PrefixCache<T>& pc,
                                    const std::vector<Demo>& queries) {
    const ModelConfig& c = mp.config;
    const NormStats& st = pc.stats;
    std::vector<Eigen::Index> start;
    Eigen::Index rows = 0;
    for (const auto& q : queries) {
        start.push_back(rows);
        rows += static_cast<Eigen::Index>(q.columns());
    }
    Tensor<T> feat(rows, kFeatureDim);
    std::array<double, kFeatureDim> raw{};
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const Demo& d = queries[qi];
        for (std::size_t n = 0; n < d.columns(); ++n) {
            raw.fill(0.0);
            raw[kFeatTime] = d.times[n];
            for (int k = 0; k < kMaxDims; ++k) {
                raw[kFeatNoise + k] = d.noise(n, k);
                raw[kFeatValue + k] = d.values(n, k);
                raw[kFeatMask + k] = d.dim_mask[k];
            }
            encode_token<T>(raw, false, st, feat.row(start[qi] + static_cast<Eigen::Index>(n)));
        }
    }
    Tensor<T> x = detail::affine(feat, mp.get("embed.w").value, mp.get("embed.b").value);
    x.rowwise() += mp.get("pos").value.row(static_cast<Eigen::Index>(1 + 2 * pc.query_example));
    const int hd = c.key_dim();
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const Tensor<T>& pk = pc.keys[static_cast<std::size_t>(l)];
        const Tensor<T>& pv = pc.values[static_cast<std::size_t>(l)];
        const Eigen::Index tp = pk.rows();
        Tensor<T> h = detail::ln_rows(x, mp.get(p + "ln1.g").value, mp.get(p + "ln1.b").value);
        Tensor<T> q = detail::affine(h, mp.get(p + "wq").value, mp.get(p + "bq").value);
        Tensor<T> k(h.rows(), c.attn_width());
        k.noalias() = h * mp.get(p + "wk").value;
        Tensor<T> v = detail::affine(h, mp.get(p + "wv").value, mp.get(p + "bv").value);
        Tensor<T> att(x.rows(), c.attn_width());
        // One query block at a time keeps the score rows cache resident.
        Tensor<T> sp, so;
        for (std::size_t qi = 0; qi < queries.size(); ++qi) {
            const Eigen::Index r0 = start[qi], m = static_cast<Eigen::Index>(queries[qi].columns());
            for (int hh = 0; hh < c.n_heads; ++hh) {
                // Scores against the shared prefix and against the query's
                // own cond block; one softmax over both parts.
                sp.resize(m, tp);
                sp.noalias() = q.block(r0, hh * hd, m, hd) * pk.middleCols(hh * hd, hd).transpose();
                sp *= inv_sqrt;
                so.resize(m, m);
                so.noalias() = q.block(r0, hh * hd, m, hd) * k.block(r0, hh * hd, m, hd).transpose();
                so *= inv_sqrt;
                for (Eigen::Index i = 0; i < m; ++i) {
                    auto prow = sp.row(i);
                    const T mx = std::max(tp > 0 ? prow.maxCoeff() : -std::numeric_limits<T>::infinity(),
                                          so.row(i).maxCoeff());
                    prow = (prow.array() - mx).exp().matrix();
                    so.row(i) = (so.row(i).array() - mx).exp().matrix();
                    const T inv = T(1) / (prow.sum() + so.row(i).sum());
                    prow *= inv;
                    so.row(i) *= inv;
                }
                auto out = att.block(r0, hh * hd, m, hd);
                out.noalias() = so * v.block(r0, hh * hd, m, hd);
                if (tp > 0) out.noalias() += sp * pv.middleCols(hh * hd, hd);
            }
        }
        x += detail::affine(att, mp.get(p + "wo").value, mp.get(p + "bo").value);
        Tensor<T> f = detail::affine(detail::ln_rows(x, mp.get(p + "ln2.g").value, mp.get(p + "ln2.b").value),
                                     mp.get(p + "ff1.w").value, mp.get(p + "ff1.b").value);
        detail::gelu_inplace(f);
        x += detail::affine(f, mp.get(p + "ff2.w").value, mp.get(p + "ff2.b").value);
        if (!x.allFinite()) throw NonFiniteActivation(l + 1, "query");
    }
    x = detail::ln_rows(x, mp.get("lnf.g").value, mp.get("lnf.b").value);
    Tensor<T> y = detail::affine(x, mp.get("head1.w").value, mp.get("head1.b").value);
    detail::gelu_inplace(y);
    y = detail::affine(y, mp.get("head2.w").value, mp.get("head2.b").value);
    std::vector<Matrix> out;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const Demo& d = queries[qi];
        Matrix e(d.columns(), static_cast<std::size_t>(d.state_dim));
        for (std::size_t n = 0; n < d.columns(); ++n) {
            for (int k = 0; k < d.state_dim; ++k) {
                e(n, static_cast<std::size_t>(k)) =
                    static_cast<double>(y(start[qi] + static_cast<Eigen::Index>(n), k)) * st.err_std[k] +
                    st.err_mean[k];
            }
        }
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'F', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Model weights plus whatever the trainer needs to resume. Tensors are
/// stored as f32 in a single blob after a JSON header that lists each
/// tensor's name, shape and offset.
struct Checkpoint {
    ModelConfig config;
    std::map<std::string, NormStats> norm;  // keyed by system name
    nlohmann::json meta = nlohmann::json::object();
    std::vector<Parameter<float>> tensors;  // model weights first, then extras

    const Parameter<float>* find(const std::string& name) const {
        for (const auto& p : tensors) {
            if (p.name == name) return &p;
        }
        return nullptr;
    }

    ModelParams<float> model() const {
        ModelParams<float> mp;
        mp.config = config;
        for (const auto& [name, shape] : parameter_shapes(config)) {
            const auto* p = find(name);
            if (!p) throw std::runtime_error("checkpoint lacks tensor '" + name + "'");
            if (p->value.rows() != shape.first || p->value.cols() != shape.second) {
                throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + shape_of(p->value) +
                                         ", config expects " + shape_str(shape.first, shape.second));
            }
            mp.tensors.emplace_back(name, p->value);
        }
        return mp;
    }

    const NormStats& stats_for(const std::string& system) const {
        auto it = norm.find(system);
        if (it == norm.end()) {
            throw std::runtime_error("checkpoint has no normalization statistics for system '" + system + "'");
        }
        return it->second;
    }
};

template <class T>
Checkpoint make_checkpoint(const ModelParams<T>& mp, std::map<std::string, NormStats> norm) {
    Checkpoint ck;
    ck.config = mp.config;
    ck.norm = std::move(norm);
    for (const auto& p : mp.tensors) ck.tensors.emplace_back(p.name, p.value.template cast<float>());
    return ck;
}

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    nlohmann::json h;
    h["format_version"] = kCheckpointVersion;
    h["config"] = to_json(ck.config);
    h["meta"] = ck.meta;
    nlohmann::json norm = nlohmann::json::object();
    for (const auto& [k, v] : ck.norm) norm[k] = to_json(v);
    h["norm_stats"] = norm;
    nlohmann::json index = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : ck.tensors) {
        index.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(p.value.size()) * 4;
    }
    h["tensors"] = index;
    const std::string header = h.dump();
    std::vector<std::uint8_t> buf(kCheckpointMagic, kCheckpointMagic + 4);
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(header.size()));
    buf.insert(buf.end(), header.begin(), header.end());
    buf.reserve(buf.size() + offset);
    for (const auto& p : ck.tensors) {
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            detail::put_u32(buf, std::bit_cast<std::uint32_t>(p.value.data()[i]));
        }
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot open '" + tmp.string() + "' for writing");
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!os) throw CheckpointError("failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("missing checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw CheckpointError("'" + path.string() + "' is not an FMCK checkpoint");
    }
    const std::uint32_t version = detail::get_u32(bytes.data() + 4);
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported");
    }
    const std::uint32_t hlen = detail::get_u32(bytes.data() + 8);
    if (12 + static_cast<std::size_t>(hlen) > bytes.size()) throw CheckpointError("checkpoint header truncated");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
    }
    Checkpoint ck;
    ck.config = model_config_from_json(h.at("config"));
    ck.meta = h.value("meta", nlohmann::json::object());
    for (const auto& [k, v] : h.at("norm_stats").items()) ck.norm[k] = norm_stats_from_json(v);
    const std::size_t blob = 12 + hlen;
    for (const auto& e : h.at("tensors")) {
        const auto rows = e.at("shape").at(0).get<Eigen::Index>();
        const auto cols = e.at("shape").at(1).get<Eigen::Index>();
        const auto off = e.at("offset").get<std::uint64_t>();
        if (blob + off + static_cast<std::uint64_t>(rows * cols) * 4 > bytes.size()) {
            throw CheckpointError("checkpoint tensor '" + e.at("name").get<std::string>() + "' is truncated");
        }
        Tensor<float> v(rows, cols);
        const std::uint8_t* p = bytes.data() + blob + off;
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = std::bit_cast<float>(detail::get_u32(p + 4 * i));
        ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(v));
    }
    return ck;
}

}  // namespace fmint

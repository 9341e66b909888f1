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

#include <cmath>
#include <memory>
#include <vector>

#include "fmint/autodiff.hpp"

namespace fmint {
namespace {

using Mat = Tensor<double>;

Mat random_mat(CounterRng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
    return m;
}

// Nonlinear scalar reduction with random weights so every output entry
// contributes a distinct gradient.
struct Reducer {
    Mat target, weights;
    Var<double> operator()(Var<double> x) const { return ad::weighted_sq_sum(x, target, weights); }
};

Reducer reducer(CounterRng& rng, Eigen::Index r, Eigen::Index c) {
    return Reducer{random_mat(rng, r, c), random_mat(rng, r, c, 0.5, 1.5)};
}

constexpr double kFdTol = 1e-5;

TEST(Primitives, MatmulIdentity) {
    Tape<double> t;
    CounterRng rng(1);
    const Mat A = random_mat(rng, 3, 4);
    auto out = ad::matmul(t.constant(Mat::Identity(3, 3)), t.constant(A));
    EXPECT_EQ(out.value(), A);
}

TEST(Primitives, SoftmaxOfEqualScoresIsUniform) {
    Tape<double> t;
    auto p = ad::row_softmax_masked(t.constant(Mat::Constant(2, 4, 3.0)));
    for (Eigen::Index i = 0; i < p.value().size(); ++i) EXPECT_DOUBLE_EQ(p.value().data()[i], 0.25);
}

TEST(Primitives, LayerNormOfConstantRowIsBeta) {
    Tape<double> t;
    auto g = t.constant(Mat::Ones(1, 5));
    auto b = t.constant(Mat::Zero(1, 5));
    auto y = ad::layer_norm(t.constant(Mat::Constant(2, 5, 7.0)), g, b);
    EXPECT_EQ(y.value(), Mat::Zero(2, 5));
}

TEST(Primitives, MeanSquareGradient) {
    Tape<double> t;
    auto x = t.leaf(Mat::Constant(1, 1, 3.0));
    auto loss = ad::mean_sq(x, 0.0);
    EXPECT_DOUBLE_EQ(loss.value()(0, 0), 9.0);
    t.backward(loss);
    EXPECT_DOUBLE_EQ(t.grad(x)(0, 0), 6.0);
}

TEST(Primitives, GeluKnownValues) {
    Tape<double> t;
    Mat x(1, 3);
    x << 0.0, 1.0, -1.0;
    auto y = ad::gelu(t.constant(x));
    // x * Phi(x) with Phi the standard normal CDF.
    EXPECT_DOUBLE_EQ(y.value()(0, 0), 0.0);
    EXPECT_NEAR(y.value()(0, 1), 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-14);
    EXPECT_NEAR(y.value()(0, 2), -0.5 * (1.0 - std::erf(1.0 / std::sqrt(2.0))), 1e-14);
}

TEST(Tape, ConstantTakesNoGradient) {
    Tape<double> t;
    auto c = t.constant(Mat::Ones(2, 2));
    auto x = t.leaf(Mat::Ones(2, 2));
    auto loss = ad::mean_sq(ad::add(c, x), 0.0);
    t.backward(loss);
    EXPECT_EQ(t.grad(c).size(), 0);
    EXPECT_EQ(t.grad(x), Mat::Constant(2, 2, 1.0));
}

TEST(Tape, SecondBackwardThrows) {
    Tape<double> t;
    auto x = t.leaf(Mat::Ones(1, 1));
    auto loss = ad::mean_sq(x, 0.0);
    t.backward(loss);
    EXPECT_THROW(t.backward(loss), std::logic_error);
}

TEST(Tape, NonScalarLossThrows) {
    Tape<double> t;
    auto x = t.leaf(Mat::Ones(2, 3));
    try {
        t.backward(x);
        FAIL() << "expected throw";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos) << e.what();
    }
}

TEST(Tape, ParameterGradientsAccumulateUntilZeroed) {
    Parameter<double> p("w", Mat::Constant(1, 1, 2.0));
    p.zero_grad();
    for (int i = 0; i < 2; ++i) {
        Tape<double> t;
        t.backward(ad::mean_sq(t.param(p), 0.0));
    }
    EXPECT_DOUBLE_EQ(p.grad(0, 0), 8.0);
    p.zero_grad();
    EXPECT_DOUBLE_EQ(p.grad(0, 0), 0.0);
}

TEST(Shapes, MismatchMessagesNameBothShapes) {
    Tape<double> t;
    auto a = t.constant(Mat::Ones(2, 3));
    auto b = t.constant(Mat::Ones(2, 3));
    try {
        ad::matmul(a, b);
        FAIL() << "expected throw";
    } catch (const std::invalid_argument& e) {
        EXPECT_EQ(std::string(e.what()), "matmul: shape mismatch [2x3] vs [2x3]");
    }
    EXPECT_THROW(ad::add(a, t.constant(Mat::Ones(3, 2))), std::invalid_argument);
    EXPECT_THROW(ad::add_bias(a, t.constant(Mat::Ones(1, 2))), std::invalid_argument);
    EXPECT_THROW(ad::slice_cols(a, 2, 2), std::out_of_range);
    EXPECT_THROW(ad::gather_rows(a, {0, 2}), std::out_of_range);
    EXPECT_THROW(ad::concat_rows(std::vector<Var<double>>{a, t.constant(Mat::Ones(1, 2))}), std::invalid_argument);
    EXPECT_THROW(ad::mean_sq(t.constant(Mat(0, 0)), 0.0), std::invalid_argument);
    Tape<double> other;
    EXPECT_THROW(ad::add(a, other.constant(Mat::Ones(2, 3))), std::invalid_argument);
}

// Finite-difference checks, one per primitive, repeated at 20 random points.
class FdCheck : public ::testing::TestWithParam<int> {};

TEST_P(FdCheck, AllPrimitives) {
    CounterRng rng(derive_key({0xADULL, static_cast<std::uint64_t>(GetParam())}));
    Parameter<double> A("A", random_mat(rng, 3, 4));
    Parameter<double> B("B", random_mat(rng, 4, 5));
    Parameter<double> C("C", random_mat(rng, 5, 4));
    Parameter<double> D("D", random_mat(rng, 3, 4));
    Parameter<double> bias("bias", random_mat(rng, 1, 4));
    Parameter<double> gamma("gamma", random_mat(rng, 1, 4, 0.5, 1.5));
    Parameter<double> beta("beta", random_mat(rng, 1, 4));
    const Reducer r34 = reducer(rng, 3, 4), r35 = reducer(rng, 3, 5), r33 = reducer(rng, 3, 3);
    const Reducer r38 = reducer(rng, 3, 8), r64 = reducer(rng, 6, 4), r32 = reducer(rng, 3, 2);
    auto mask = std::make_shared<const Mat>([&] {
        Mat m = Mat::Zero(3, 4);
        m(0, 2) = kMaskSentinel;
        m(1, 0) = kMaskSentinel;
        m(2, 3) = -0.5;
        return m;
    }());

    EXPECT_LT(grad_check([&](Tape<double>& t) { return r35(ad::matmul(t.param(A), t.param(B))); }, {&A, &B}), kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r35(ad::matmul_nt(t.param(A), t.param(C))); }, {&A, &C}),
              kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r34(ad::add(t.param(A), t.param(D))); }, {&A, &D}), kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r34(ad::add_bias(t.param(A), t.param(bias))); }, {&A, &bias}),
              kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r34(ad::scale(t.param(A), -1.7)); }, {&A}), kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r34(ad::row_softmax_masked(t.param(A), mask)); }, {&A}),
              kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r34(ad::row_softmax_masked(t.param(A))); }, {&A}), kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) {
                  return r34(ad::layer_norm(t.param(A), t.param(gamma), t.param(beta)));
              },
              {&A, &gamma, &beta}),
              kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r34(ad::gelu(t.param(A))); }, {&A}), kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r64(ad::gather_rows(t.param(A), {2, 0, 2, 1, 1, 2})); }, {&A}),
              kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r64(ad::concat_rows<double>({t.param(A), t.param(D)})); },
                         {&A, &D}),
              kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r38(ad::concat_cols<double>({t.param(A), t.param(D)})); },
                         {&A, &D}),
              kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r32(ad::slice_cols(t.param(A), 1, 2)); }, {&A}), kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return ad::mean_sq(t.param(A), r34.target); }, {&A}), kFdTol);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r33(ad::matmul_nt(t.param(A), t.param(A))); }, {&A}), kFdTol);
}

INSTANTIATE_TEST_SUITE_P(Points, FdCheck, ::testing::Range(0, 20));

TEST(GradCheck, LinearMapIsExact) {
    CounterRng rng(5);
    Parameter<double> W("W", random_mat(rng, 4, 3));
    Parameter<double> b("b", random_mat(rng, 1, 3));
    const Mat x = random_mat(rng, 6, 4);
    const Reducer r = reducer(rng, 6, 3);
    const double err = grad_check(
        [&](Tape<double>& t) { return r(ad::add_bias(ad::matmul(t.constant(x), t.param(W)), t.param(b))); }, {&W, &b});
    EXPECT_LT(err, 1e-9);
}

TEST(MaskedSoftmax, MaskedEntryGetsExactlyZero) {
    Tape<double> t;
    CounterRng rng(6);
    auto mask = std::make_shared<const Mat>([] {
        Mat m = Mat::Zero(2, 3);
        m(0, 1) = kMaskSentinel;
        return m;
    }());
    auto x = t.leaf(random_mat(rng, 2, 3, -2.0, 2.0));
    auto p = ad::row_softmax_masked(x, mask);
    EXPECT_EQ(p.value()(0, 1), 0.0);
    EXPECT_NEAR(p.value().row(0).sum(), 1.0, 1e-15);
    t.backward(ad::weighted_sq_sum(p, random_mat(rng, 2, 3), random_mat(rng, 2, 3, 0.5, 1.5)));
    EXPECT_EQ(t.grad(x)(0, 1), 0.0);
    EXPECT_NE(t.grad(x)(0, 0), 0.0);
}

TEST(MaskedSoftmax, FullyMaskedRowIsZero) {
    Tape<double> t;
    auto mask = std::make_shared<const Mat>(Mat::Constant(1, 3, kMaskSentinel));
    auto p = ad::row_softmax_masked(t.constant(Mat::Ones(1, 3)), mask);
    EXPECT_EQ(p.value(), Mat::Zero(1, 3));
}

// Block-structured attention against the composition of primitives.
TEST(MaskedAttention, MatchesComposedPrimitives) {
    CounterRng rng(7);
    const Eigen::Index T = 7, heads = 2, hd = 3;
    Mat m = Mat::Zero(T, T);
    // Rows 0-2 see keys 0-2, rows 3-4 see keys 0-4 except 1, rows 5-6 see keys 0-1 and 5-6.
    for (Eigen::Index i = 0; i < 3; ++i)
        for (Eigen::Index j = 3; j < T; ++j) m(i, j) = kMaskSentinel;
    for (Eigen::Index i = 3; i < 5; ++i) {
        m(i, 1) = kMaskSentinel;
        m(i, 5) = m(i, 6) = kMaskSentinel;
    }
    for (Eigen::Index i = 5; i < T; ++i)
        for (Eigen::Index j = 2; j < 5; ++j) m(i, j) = kMaskSentinel;
    auto mask = std::make_shared<const Mat>(m);
    auto blocks = std::make_shared<const std::vector<ad::AttentionBlock>>(
        std::vector<ad::AttentionBlock>{{0, 3, 3}, {3, 5, 5}, {5, 7, 7}});
    Parameter<double> Q("Q", random_mat(rng, T, heads * hd));
    Parameter<double> K("K", random_mat(rng, T, heads * hd));
    Parameter<double> V("V", random_mat(rng, T, heads * hd));
    const Reducer r = reducer(rng, T, heads * hd);

    auto composed = [&](Tape<double>& t) {
        std::vector<Var<double>> outs;
        auto q = t.param(Q), k = t.param(K), v = t.param(V);
        for (Eigen::Index h = 0; h < heads; ++h) {
            auto s = ad::scale(ad::matmul_nt(ad::slice_cols(q, h * hd, hd), ad::slice_cols(k, h * hd, hd)),
                               1.0 / std::sqrt(static_cast<double>(hd)));
            outs.push_back(ad::matmul(ad::row_softmax_masked(s, mask), ad::slice_cols(v, h * hd, hd)));
        }
        return ad::concat_cols(outs);
    };
    auto fused = [&](Tape<double>& t) {
        return ad::masked_attention(t.param(Q), t.param(K), t.param(V), static_cast<int>(heads), mask, blocks);
    };

    for (auto* p : {&Q, &K, &V}) p->zero_grad();
    Tape<double> t1;
    auto y1 = composed(t1);
    t1.backward(r(y1));
    const Mat gq = Q.grad, gk = K.grad, gv = V.grad;
    for (auto* p : {&Q, &K, &V}) p->zero_grad();
    Tape<double> t2;
    auto y2 = fused(t2);
    t2.backward(r(y2));
    EXPECT_LT((y1.value() - y2.value()).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((gq - Q.grad).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_LT((gk - K.grad).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_LT((gv - V.grad).cwiseAbs().maxCoeff(), 1e-13);
    EXPECT_LT(grad_check([&](Tape<double>& t) { return r(fused(t)); }, {&Q, &K, &V}), 1e-6);
}

// A pre-norm transformer block built from primitives, checked end to end.
TEST(GradCheck, TransformerBlockD16) {
    CounterRng rng(8);
    const Eigen::Index T = 6, d = 16, heads = 2, ff = 32;
    auto init = [&](const char* n, Eigen::Index r, Eigen::Index c, double s) {
        return Parameter<double>(n, random_mat(rng, r, c, -s, s));
    };
    Parameter<double> g1 = init("g1", 1, d, 1.0), b1 = init("b1", 1, d, 0.1);
    Parameter<double> wq = init("wq", d, d, 0.4), wk = init("wk", d, d, 0.4), wv = init("wv", d, d, 0.4);
    Parameter<double> wo = init("wo", d, d, 0.4), bo = init("bo", 1, d, 0.1);
    Parameter<double> g2 = init("g2", 1, d, 1.0), b2 = init("b2", 1, d, 0.1);
    Parameter<double> w1 = init("w1", d, ff, 0.3), c1 = init("c1", 1, ff, 0.1);
    Parameter<double> w2 = init("w2", ff, d, 0.3), c2 = init("c2", 1, d, 0.1);
    const Mat x = random_mat(rng, T, d);
    Mat m = Mat::Zero(T, T);
    for (Eigen::Index i = 0; i < T; ++i)
        for (Eigen::Index j = i + 1; j < T; ++j) m(i, j) = kMaskSentinel;
    auto mask = std::make_shared<const Mat>(m);
    const Reducer r = reducer(rng, T, d);
    auto f = [&](Tape<double>& t) {
        auto h = t.constant(x);
        auto n1 = ad::layer_norm(h, t.param(g1), t.param(b1));
        std::vector<Var<double>> outs;
        auto q = ad::matmul(n1, t.param(wq)), k = ad::matmul(n1, t.param(wk)), v = ad::matmul(n1, t.param(wv));
        const Eigen::Index hd = d / heads;
        for (Eigen::Index hh = 0; hh < heads; ++hh) {
            auto s = ad::scale(ad::matmul_nt(ad::slice_cols(q, hh * hd, hd), ad::slice_cols(k, hh * hd, hd)),
                               1.0 / std::sqrt(static_cast<double>(hd)));
            outs.push_back(ad::matmul(ad::row_softmax_masked(s, mask), ad::slice_cols(v, hh * hd, hd)));
        }
        h = ad::add(h, ad::add_bias(ad::matmul(ad::concat_cols(outs), t.param(wo)), t.param(bo)));
        auto n2 = ad::layer_norm(h, t.param(g2), t.param(b2));
        auto u = ad::gelu(ad::add_bias(ad::matmul(n2, t.param(w1)), t.param(c1)));
        h = ad::add(h, ad::add_bias(ad::matmul(u, t.param(w2)), t.param(c2)));
        return r(h);
    };
    EXPECT_LT(grad_check(f, {&g1, &b1, &wq, &wk, &wv, &wo, &bo, &g2, &b2, &w1, &c1, &w2, &c2}), 1e-4);
}

}  // namespace
}  // namespace fmint

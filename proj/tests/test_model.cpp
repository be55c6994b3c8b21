#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <vector>

#include "fedrlvr/fedrlvr.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fedrlvr;

namespace {

const ModelDims kSmall{8, 3, 3, 4};

}  // namespace

TEST(LoraLinear, ZeroBIsBase) {
    auto base = std::make_shared<const Matrix>(Matrix::Random(6, 5));
    const auto l = LoraLinear::with_zero_b(base, Matrix::Random(2, 5), 4.0);
    EXPECT_EQ(effective_weight(l), *base);
}

TEST(LoraLinear, EffectiveWeightAddsScaledProduct) {
    auto base = std::make_shared<const Matrix>(Matrix::Zero(3, 4));
    Matrix a(1, 4);
    a << 1, 2, 3, 4;
    Matrix b(3, 1);
    b << 1, 0, -1;
    const LoraLinear l(base, {a, b}, 0.5);
    Matrix expected(3, 4);
    expected << 0.5, 1, 1.5, 2, 0, 0, 0, 0, -0.5, -1, -1.5, -2;
    EXPECT_EQ(effective_weight(l), expected);
}

TEST(LoraLinear, RejectsBadRankAndShapes) {
    auto base = std::make_shared<const Matrix>(Matrix::Zero(4, 6));
    EXPECT_THROW(LoraLinear(base, {Matrix::Zero(4, 6), Matrix::Zero(4, 4)}, 1.0), std::invalid_argument);  // r = min
    EXPECT_THROW(LoraLinear(base, {Matrix::Zero(0, 6), Matrix::Zero(4, 0)}, 1.0), std::invalid_argument);
    EXPECT_THROW(LoraLinear(base, {Matrix::Zero(2, 5), Matrix::Zero(4, 2)}, 1.0), std::invalid_argument);
    EXPECT_THROW(LoraLinear(nullptr, {Matrix::Zero(2, 6), Matrix::Zero(4, 2)}, 1.0), std::invalid_argument);
    LoraLinear ok(base, {Matrix::Zero(2, 6), Matrix::Zero(4, 2)}, 1.0);
    EXPECT_THROW(ok.set_factors({Matrix::Zero(3, 6), Matrix::Zero(4, 3)}), std::invalid_argument);
}

TEST(Init, FactorsAndFrozenParts) {
    Rng rng = make_stream(1, StreamRole::test);
    const ModelDims dims;
    const PolicyParams p = init_policy(dims, {4, 8.0}, rng);
    EXPECT_EQ(p.layer(0).scale(), 2.0);
    for (std::size_t i = 0; i < PolicyParams::kLayers; ++i) {
        const auto& f = p.layer(i).factors();
        EXPECT_EQ(f.b.squaredNorm(), 0.0);
        const double bound = 1.0 / std::sqrt(static_cast<double>(p.layer(i).cols()));
        EXPECT_LE(f.a.cwiseAbs().maxCoeff(), bound);
        EXPECT_GT(f.a.cwiseAbs().maxCoeff(), 0.5 * bound);
    }
    EXPECT_EQ(p.embeddings().row(p.specials().pad).squaredNorm(), 0.0);
}

TEST(Init, ZeroUpdateMatchesBaseLogits) {
    Rng rng = make_stream(2, StreamRole::test);
    const PolicyParams p = fixtures::random_policy(kSmall, 2, rng);
    const PolicyParams ref = p.with_zero_update();
    EXPECT_TRUE(ref.shares_frozen(p));
    const std::vector<TokenId> window{1, 2, 3};
    const Vector base = p.layer(1).base() * (p.layer(0).base() * DensePolicy(p).input(window)).array().tanh().matrix();
    EXPECT_TRUE(forward_logits(ref, window).isApprox(base, 1e-14));
}

TEST(Init, CopiesShareFrozenTensors) {
    Rng rng = make_stream(3, StreamRole::test);
    const PolicyParams p = init_policy(kSmall, {2, 4.0}, rng);
    PolicyParams q = p;
    EXPECT_TRUE(q.shares_frozen(p));
    LoraFactors f = q.factors();
    f.layers[0].b.setOnes();
    q.set_factors(f);
    EXPECT_EQ(p.factors().layers[0].b.squaredNorm(), 0.0);
}

TEST(Context, LeftPadsWithBos) {
    const std::vector<TokenId> prompt{1, 2};
    const std::vector<TokenId> prefix{3};
    std::vector<TokenId> w(5);
    build_context(prompt, prefix, 9, w);
    EXPECT_EQ(w, (std::vector<TokenId>{9, 9, 1, 2, 3}));
    std::vector<TokenId> w2(2);
    build_context(prompt, prefix, 9, w2);
    EXPECT_EQ(w2, (std::vector<TokenId>{2, 3}));
}

TEST(Forward, MatchesNaiveOracle) {
    Rng rng = make_stream(4, StreamRole::test);
    for (int trial = 0; trial < 10; ++trial) {
        const PolicyParams p = fixtures::random_policy(kSmall, 2, rng);
        const oracle::NaiveModel naive(p);
        const std::vector<TokenId> prompt{0, 4, 2, 1};
        const std::vector<TokenId> resp{3, 1, 6};
        const auto lib = token_logprobs(p, prompt, resp, 0.7);
        const auto ref = naive.response_logprobs(prompt, resp, 0.7);
        for (std::size_t t = 0; t < resp.size(); ++t) EXPECT_NEAR(lib[t], ref[t], 1e-12);
    }
}

TEST(Forward, LogSoftmaxNormalizes) {
    Vector z(4);
    z << 1000.0, 999.0, -5.0, 0.0;
    for (double temp : {0.1, 0.7, 1.0, 3.0}) {
        const Vector lp = log_softmax(z, temp);
        EXPECT_NEAR(lp.array().exp().sum(), 1.0, 1e-12);
        EXPECT_TRUE(lp.allFinite());
    }
}

TEST(Sampling, DeterministicAndConsistentLogprobs) {
    Rng init = make_stream(5, StreamRole::test);
    const PolicyParams p = fixtures::random_policy(kSmall, 2, init);
    const std::vector<TokenId> prompt{1, 0, 2, 3};
    Rng r1 = make_stream(7, StreamRole::client, 0, 1);
    Rng r2 = make_stream(7, StreamRole::client, 0, 1);
    const auto a = sample_responses(p, prompt, 8, 0.7, 4, r1, 1, 42);
    const auto b = sample_responses(p, prompt, 8, 0.7, 4, r2, 1, 42);
    ASSERT_EQ(a.size(), 8u);
    const auto eos = p.specials().eos;
    for (std::size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].tokens, b[k].tokens);
        EXPECT_EQ(a[k].behavior_logprobs, b[k].behavior_logprobs);
        EXPECT_EQ(a[k].generator, 1);
        EXPECT_EQ(a[k].slot, k);
        EXPECT_EQ(a[k].prompt_ref, 42u);
        ASSERT_GE(a[k].tokens.size(), 1u);
        ASSERT_LE(a[k].tokens.size(), 4u);
        for (std::size_t t = 0; t + 1 < a[k].tokens.size(); ++t) EXPECT_NE(a[k].tokens[t], eos);
        const auto lp = token_logprobs(p, prompt, a[k].tokens, 0.7);
        for (std::size_t t = 0; t < lp.size(); ++t) EXPECT_NEAR(lp[t], a[k].behavior_logprobs[t], 1e-12);
    }
}

TEST(Sampling, FrequenciesFollowTheDistribution) {
    Rng init = make_stream(6, StreamRole::test);
    const PolicyParams p = fixtures::random_policy(kSmall, 2, init);
    const std::vector<TokenId> prompt{1, 0, 2, 3};
    std::vector<TokenId> window(3);
    build_context(prompt, {}, p.specials().bos, window);
    const Vector probs = log_softmax(forward_logits(p, window), 1.0).array().exp();
    Rng rng = make_stream(6, StreamRole::test, 1);
    const int n = 20000;
    const auto rs = sample_responses(p, prompt, n, 1.0, 1, rng);
    std::vector<double> freq(static_cast<std::size_t>(kSmall.vocab), 0.0);
    for (const auto& r : rs) freq[r.tokens[0]] += 1.0 / n;
    for (int v = 0; v < kSmall.vocab; ++v) {
        const double sd = std::sqrt(probs[v] * (1 - probs[v]) / n);
        EXPECT_NEAR(freq[static_cast<std::size_t>(v)], probs[v], 5 * sd + 1e-9);
    }
}

TEST(Sampling, RejectsEmptyGroup) {
    Rng rng = make_stream(7, StreamRole::test);
    const PolicyParams p = init_policy(kSmall, {2, 4.0}, rng);
    const std::vector<TokenId> prompt{1, 0, 2, 3};
    EXPECT_THROW(sample_responses(p, prompt, 0, 0.7, 4, rng), std::invalid_argument);
}

TEST(ChainRule, FactorGradientsMatchFiniteDifferences) {
    // f(A, B) = <G, W + s B A> for a fixed G has dA = s B^T G, dB = s G A^T.
    Rng rng = make_stream(8, StreamRole::test);
    const PolicyParams p = fixtures::random_policy(kSmall, 2, rng);
    DenseWeights g{Matrix::Random(p.layer(0).rows(), p.layer(0).cols()),
                   Matrix::Random(p.layer(1).rows(), p.layer(1).cols())};
    const Gradients got = chain_to_factors(p, g);
    auto f = [&](const PolicyParams& q) {
        return (effective_weight(q.layer(0)).cwiseProduct(g.hidden)).sum() +
               (effective_weight(q.layer(1)).cwiseProduct(g.head)).sum();
    };
    const double h = 1e-6;
    const LoraFactors base = p.factors();
    for (std::size_t l = 0; l < 2; ++l) {
        for (Eigen::Index i = 0; i < base.layers[l].a.rows(); ++i) {
            for (Eigen::Index j = 0; j < base.layers[l].a.cols(); ++j) {
                PolicyParams plus = p, minus = p;
                LoraFactors fp = base, fm = base;
                fp.layers[l].a(i, j) += h;
                fm.layers[l].a(i, j) -= h;
                plus.set_factors(fp);
                minus.set_factors(fm);
                EXPECT_NEAR((f(plus) - f(minus)) / (2 * h), got.layers[l].a(i, j), 1e-6);
            }
        }
        for (Eigen::Index i = 0; i < base.layers[l].b.rows(); ++i) {
            for (Eigen::Index j = 0; j < base.layers[l].b.cols(); ++j) {
                PolicyParams plus = p, minus = p;
                LoraFactors fp = base, fm = base;
                fp.layers[l].b(i, j) += h;
                fm.layers[l].b(i, j) -= h;
                plus.set_factors(fp);
                minus.set_factors(fm);
                EXPECT_NEAR((f(plus) - f(minus)) / (2 * h), got.layers[l].b(i, j), 1e-6);
            }
        }
    }
}

TEST(LoraFactors, Arithmetic) {
    LoraFactors f{{{Matrix::Ones(2, 3), Matrix::Ones(4, 2)}}};
    EXPECT_EQ(f.value_count(), 14u);
    EXPECT_EQ(f.squared_norm(), 14.0);
    LoraFactors g = f;
    g *= 2.0;
    g += f;
    EXPECT_EQ(g.squared_norm(), 9.0 * 14.0);
    EXPECT_TRUE(LoraFactors::zeros_like(f).same_shape(f));
    EXPECT_FALSE(f == g);
}

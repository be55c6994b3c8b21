#pragma once

// Random small problems shared by unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fedrlvr/fedrlvr.hpp"
#include "oracles.hpp"

namespace fixtures {

using namespace fedrlvr;

// Policy with random B so both factor gradients are non-trivial.
inline PolicyParams random_policy(const ModelDims& dims, int rank, Rng& rng, double b_scale = 0.3) {
    PolicyParams p = init_policy(dims, InitOptions{rank, 2.0 * rank}, rng);
    std::normal_distribution<double> n(0.0, b_scale);
    LoraFactors f = p.factors();
    for (auto& l : f.layers) l.b = Matrix::NullaryExpr(l.b.rows(), l.b.cols(), [&] { return n(rng); });
    p.set_factors(f);
    return p;
}

inline std::vector<double> random_rewards(int k, Rng& rng) {
    std::vector<double> r(static_cast<std::size_t>(k));
    do {
        for (auto& x : r) x = static_cast<double>(uniform_index(rng, 2));
    } while (std::all_of(r.begin(), r.end(), [&](double x) { return x == r.front(); }));
    return r;
}

struct GradInstance {
    PolicyParams params;
    std::vector<oracle::Group> groups;
    GrpoOptions opt;
};

// Instance with V=8, C=3, h=4, r=2, K=4. Old log-probs are offset from the
// current ones so some tokens fall in the clipped region; offsets are kept
// away from the clip boundaries so finite differences never straddle a kink.
inline GradInstance grad_instance(Rng& rng, int prompts = 2) {
    const ModelDims dims{8, 3, 3, 4};
    const int K = 4;
    GradInstance inst{random_policy(dims, 2, rng), {}, {}};
    inst.opt = {0.2, 0.25, 0.05, 0.7};
    const oracle::NaiveModel model(inst.params);
    const auto sp = special_tokens(dims.vocab);
    std::uniform_real_distribution<double> offset(-0.5, 0.5);
    for (int p = 0; p < prompts; ++p) {
        oracle::Group g;
        for (int i = 0; i < 4; ++i) g.prompt.push_back(static_cast<TokenId>(uniform_index(rng, sp.bos)));
        for (int k = 0; k < K; ++k) {
            std::vector<TokenId> resp;
            const auto len = 1 + uniform_index(rng, 3);
            for (std::size_t t = 0; t < len; ++t) resp.push_back(static_cast<TokenId>(uniform_index(rng, sp.bos)));
            if (uniform_index(rng, 2) == 0) resp.back() = sp.eos;
            const auto lp = model.response_logprobs(g.prompt, resp, inst.opt.temperature);
            std::vector<double> old;
            for (double x : lp) {
                double o = 0.0;
                for (;;) {
                    o = x + offset(rng);
                    const double ratio = std::exp(x - o);
                    if (std::abs(ratio - (1.0 - inst.opt.eps_low)) > 1e-3 &&
                        std::abs(ratio - (1.0 + inst.opt.eps_high)) > 1e-3) {
                        break;
                    }
                }
                old.push_back(o);
            }
            g.responses.push_back(resp);
            g.old_lp.push_back(old);
        }
        g.rewards = random_rewards(K, rng);
        inst.groups.push_back(std::move(g));
    }
    return inst;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t entries = 0;
};

// Max relative error between analytic factor gradients and central finite
// differences of the naive objective. The denominator is floored at 1e-6 so
// entries whose true gradient is zero compare on absolute error.
inline GradCheck check_gradients(const GradInstance& inst, double h = 1e-5) {
    const auto groups = oracle::to_rollout(inst.groups);
    std::vector<GroupLogprobs> old;
    for (const auto& g : inst.groups) old.push_back(g.old_lp);
    const PolicyParams ref = inst.params.with_zero_update();
    const BackwardResult res = grpo_backward(inst.params, groups, old, inst.opt, &ref);

    auto f = [&](const PolicyParams& p) {
        return oracle::objective(p, inst.groups, inst.opt.eps_low, inst.opt.eps_high, inst.opt.kl_coef,
                                 inst.opt.temperature);
    };
    GradCheck out;
    const LoraFactors base = inst.params.factors();
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
        for (int which = 0; which < 2; ++which) {
            const Matrix& m = which == 0 ? base.layers[l].a : base.layers[l].b;
            const Matrix& g = which == 0 ? res.grads.layers[l].a : res.grads.layers[l].b;
            for (Eigen::Index i = 0; i < m.rows(); ++i) {
                for (Eigen::Index j = 0; j < m.cols(); ++j) {
                    PolicyParams plus = inst.params;
                    PolicyParams minus = inst.params;
                    LoraFactors fp = base;
                    LoraFactors fm = base;
                    (which == 0 ? fp.layers[l].a : fp.layers[l].b)(i, j) += h;
                    (which == 0 ? fm.layers[l].a : fm.layers[l].b)(i, j) -= h;
                    plus.set_factors(fp);
                    minus.set_factors(fm);
                    const double fd = (f(plus) - f(minus)) / (2.0 * h);
                    const double an = g(i, j);
                    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
                    out.max_rel_error = std::max(out.max_rel_error, rel);
                    ++out.entries;
                }
            }
        }
    }
    return out;
}

// Candidates for keep/rand tests: `n_clients` groups of K with random rewards.
inline std::vector<std::vector<Candidate>> random_candidates(int n_clients, int K, Rng& rng, double p_correct) {
    std::vector<std::vector<Candidate>> out(static_cast<std::size_t>(n_clients));
    for (int c = 0; c < n_clients; ++c) {
        for (int k = 0; k < K; ++k) {
            Candidate cand;
            cand.response.generator = c;
            cand.response.slot = static_cast<std::uint32_t>(k);
            cand.response.tokens = {static_cast<TokenId>(c), static_cast<TokenId>(k)};
            cand.reward = uniform01(rng) < p_correct ? 1 : 0;
            out[static_cast<std::size_t>(c)].push_back(cand);
        }
    }
    return out;
}

}  // namespace fixtures

#include <gtest/gtest.h>

#include <map>
#include <set>
#include <vector>

#include "fedrlvr/fedrlvr.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace fedrlvr;

namespace {

const ModelDims kDims{16, 4, 6, 8};

std::vector<ClientState> make_clients(int n, std::uint64_t seed, std::size_t shard = 8) {
    Rng rng = make_stream(seed, StreamRole::model);
    const PolicyParams p = init_policy(kDims, {2, 4.0}, rng);
    Rng crng = make_stream(seed, StreamRole::corpus);
    const auto corpus = gen_corpus(2, shard * static_cast<std::size_t>(n), crng);
    std::vector<ClientState> out;
    for (int c = 0; c < n; ++c) {
        std::vector<TaskInstance> s(corpus.begin() + static_cast<long>(shard) * c,
                                    corpus.begin() + static_cast<long>(shard) * (c + 1));
        out.emplace_back(c, p, OptimizerOptions{}, std::move(s));
        out.back().rng = make_stream(seed, StreamRole::client, 0, static_cast<std::uint64_t>(c));
    }
    return out;
}

StepConfig small_step() {
    StepConfig cfg;
    cfg.group_size = 4;
    cfg.batch_size = 3;
    cfg.max_len = 3;
    return cfg;
}

double max_abs_diff(const LoraFactors& a, const LoraFactors& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        m = std::max(m, (a.layers[i].a - b.layers[i].a).cwiseAbs().maxCoeff());
        m = std::max(m, (a.layers[i].b - b.layers[i].b).cwiseAbs().maxCoeff());
    }
    return m;
}

}  // namespace

TEST(Schedule, PublicStepsAreMultiplesOfTauSwap) {
    std::vector<int> pub;
    for (int t = 1; t <= 8; ++t) {
        if (is_public_step(t, 2)) pub.push_back(t);
    }
    EXPECT_EQ(pub, (std::vector<int>{2, 4, 6, 8}));
    EXPECT_FALSE(is_public_step(4, 0));
    static_assert(is_public_step(3, 3) && !is_public_step(2, 3));
}

TEST(PublicBatch, DeterministicAndSized) {
    Rng rng = make_stream(1, StreamRole::corpus);
    const auto pub = gen_corpus(2, 20, rng);
    const auto a = select_public_batch(pub, 5, 9, 2, 4);
    const auto b = select_public_batch(pub, 5, 9, 2, 4);
    ASSERT_EQ(a.size(), 5u);
    std::set<std::size_t> ids;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].id, b[i].id);
        ids.insert(a[i].id);
    }
    EXPECT_EQ(ids.size(), 5u);
    EXPECT_THROW(select_public_batch(pub, 21, 9, 2, 4), std::invalid_argument);
}

TEST(RandRule, UniformSlotFrequency) {
    Rng rng = make_stream(2, StreamRole::test);
    const auto per_client = fixtures::random_candidates(4, 8, rng, 0.5);
    std::vector<Candidate> pool;
    for (const auto& g : per_client) pool.insert(pool.end(), g.begin(), g.end());
    std::map<std::pair<int, std::uint32_t>, int> hits;
    const int draws = 10000;
    Rng server = make_stream(2, StreamRole::server);
    for (int d = 0; d < draws; ++d) {
        const auto out = rand_aggregate(pool, 8, server);
        ASSERT_EQ(out.size(), 8u);
        std::set<std::pair<int, std::uint32_t>> distinct;
        for (const auto& c : out) {
            distinct.insert({c.response.generator, c.response.slot});
            ++hits[{c.response.generator, c.response.slot}];
        }
        EXPECT_EQ(distinct.size(), 8u);
    }
    ASSERT_EQ(hits.size(), 32u);
    for (const auto& [slot, n] : hits) EXPECT_NEAR(static_cast<double>(n) / draws, 0.25, 0.02);
}

TEST(KeepRule, MatchesOracleOnRandomInstances) {
    Rng rng = make_stream(3, StreamRole::test);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(uniform_index(rng, 4));
        const int K = 2 + static_cast<int>(uniform_index(rng, 9));
        const double p = uniform01(rng);
        const auto groups = fixtures::random_candidates(n, K, rng, p);
        std::vector<Candidate> donors;
        for (int c = 1; c < n; ++c) donors.insert(donors.end(), groups[static_cast<std::size_t>(c)].begin(), groups[static_cast<std::size_t>(c)].end());
        const auto res = keep_aggregate(groups[0], donors, K, rng);
        const auto check = oracle::check_keep(groups[0], donors, K, res);
        ASSERT_TRUE(check.ok) << "trial " << trial << ": " << check.why;
    }
}

TEST(KeepRule, Examples) {
    Rng rng = make_stream(4, StreamRole::test);
    auto groups = fixtures::random_candidates(2, 8, rng, 0.0);
    // own: 1 correct of 8; donors: 5 correct -> M = 4 - 1 = 3
    groups[0][2].reward = 1;
    for (int k = 0; k < 5; ++k) groups[1][static_cast<std::size_t>(k)].reward = 1;
    auto res = keep_aggregate(groups[0], groups[1], 8, rng);
    EXPECT_EQ(res.replaced, 3);
    // donors with only 2 correct -> M = 2
    for (int k = 2; k < 5; ++k) groups[1][static_cast<std::size_t>(k)].reward = 0;
    res = keep_aggregate(groups[0], groups[1], 8, rng);
    EXPECT_EQ(res.replaced, 2);
    // own already at half -> untouched
    for (int k = 0; k < 4; ++k) groups[0][static_cast<std::size_t>(k)].reward = 1;
    res = keep_aggregate(groups[0], groups[1], 8, rng);
    EXPECT_EQ(res.replaced, 0);
    // no correct donors -> untouched
    auto none = fixtures::random_candidates(2, 8, rng, 0.0);
    res = keep_aggregate(none[0], none[1], 8, rng);
    EXPECT_EQ(res.replaced, 0);
    EXPECT_THROW(keep_aggregate(none[0], none[1], 7, rng), std::invalid_argument);
}

TEST(Exchange, RandGivesEveryClientTheSameGroups) {
    auto clients = make_clients(3, 5);
    Rng crng = make_stream(5, StreamRole::corpus, 1);
    const auto pub = gen_corpus(2, 10, crng);
    Rng server = make_stream(5, StreamRole::server);
    const auto ex = exchange_public(std::span<ClientState>(clients), pub, 4, Aggregation::rand, small_step(), server);
    ASSERT_EQ(ex.prompts.size(), 4u);
    for (std::size_t p = 0; p < 4; ++p) {
        for (std::size_t c = 1; c < 3; ++c) {
            ASSERT_EQ(ex.assembled[c][p].size(), ex.assembled[0][p].size());
            for (std::size_t k = 0; k < ex.assembled[c][p].size(); ++k) {
                EXPECT_EQ(ex.assembled[c][p][k].response.tokens, ex.assembled[0][p][k].response.tokens);
                EXPECT_EQ(ex.assembled[c][p][k].response.generator, ex.assembled[0][p][k].response.generator);
            }
        }
    }
    std::size_t up = 0, down = 0;
    for (std::size_t p = 0; p < 4; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
            for (const auto& cand : ex.per_client[c][p]) up += cand.response.tokens.size();
            for (const auto& cand : ex.assembled[c][p]) down += cand.response.tokens.size();
        }
    }
    EXPECT_EQ(ex.uplink_tokens, up);
    EXPECT_EQ(ex.downlink_tokens, down);
}

TEST(Exchange, KeepRespectsTheRuleAndThreadCount) {
    auto a = make_clients(4, 6);
    auto b = make_clients(4, 6);
    Rng crng = make_stream(6, StreamRole::corpus, 1);
    const auto pub = gen_corpus(2, 10, crng);
    Rng s1 = make_stream(6, StreamRole::server);
    Rng s2 = make_stream(6, StreamRole::server);
    const auto ex1 = exchange_public(std::span<ClientState>(a), pub, 5, Aggregation::keep, small_step(), s1, 1);
    const auto ex2 = exchange_public(std::span<ClientState>(b), pub, 5, Aggregation::keep, small_step(), s2, 4);
    for (std::size_t c = 0; c < 4; ++c) {
        for (std::size_t p = 0; p < 5; ++p) {
            std::vector<Candidate> donors;
            for (std::size_t o = 0; o < 4; ++o) {
                if (o != c) donors.insert(donors.end(), ex1.per_client[o][p].begin(), ex1.per_client[o][p].end());
            }
            const KeepResult kr{ex1.assembled[c][p], ex1.replaced[c][p]};
            const auto check = oracle::check_keep(ex1.per_client[c][p], donors, 4, kr);
            EXPECT_TRUE(check.ok) << check.why;
            ASSERT_EQ(ex1.assembled[c][p].size(), ex2.assembled[c][p].size());
            for (std::size_t k = 0; k < 4; ++k) {
                EXPECT_EQ(ex1.assembled[c][p][k].response.tokens, ex2.assembled[c][p][k].response.tokens);
            }
        }
    }
    EXPECT_EQ(ex1.downlink_tokens, ex2.downlink_tokens);
}

TEST(PublicStep, RewardMismatchIsAnError) {
    auto clients = make_clients(2, 7);
    Rng crng = make_stream(7, StreamRole::corpus, 1);
    const auto pub = gen_corpus(2, 6, crng);
    Rng server = make_stream(7, StreamRole::server);
    auto ex = exchange_public(std::span<ClientState>(clients), pub, 2, Aggregation::keep, small_step(), server);
    ex.assembled[0][1][0].reward = 1 - ex.assembled[0][1][0].reward;
    EXPECT_THROW(public_grpo_step(clients[0], ex.prompts, ex.assembled[0], ex.replaced[0], small_step()),
                 std::runtime_error);
}

TEST(PublicStep, NoReplacementEqualsOnPolicyStep) {
    // A public step whose assembled groups are the client's own fresh samples
    // (M = 0) must be the same update as an on-policy GRPO step on those groups.
    for (auto mode : {DonorLogprobMode::local, DonorLogprobMode::donor}) {
        auto a = make_clients(1, 8);
        auto b = make_clients(1, 8);
        const StepConfig cfg = small_step();
        Rng crng = make_stream(8, StreamRole::corpus, 1);
        const auto prompts = gen_corpus(2, 3, crng);

        const DensePolicy pol(a[0].params);
        auto groups = rollout(pol, prompts, cfg, a[0].rng, a[0].id);
        std::vector<GroupLogprobs> old;
        std::vector<std::vector<Candidate>> assembled;
        for (auto& g : groups) {
            attach_advantages(g);
            old.push_back(behavior_logprobs(g));
            std::vector<Candidate> cs;
            for (std::size_t k = 0; k < g.responses.size(); ++k) cs.push_back({g.responses[k], static_cast<int>(g.rewards[k])});
            assembled.push_back(cs);
        }
        grpo_update(a[0], groups, old, cfg);
        const std::vector<int> replaced(prompts.size(), 0);
        const auto stats = public_grpo_step(b[0], prompts, assembled, replaced, cfg, mode);
        EXPECT_EQ(stats.mean_alpha, 0.0);
        EXPECT_TRUE(stats.is_public);
        if (mode == DonorLogprobMode::donor) {
            EXPECT_TRUE(a[0].params.factors() == b[0].params.factors());
        } else {
            EXPECT_LT(max_abs_diff(a[0].params.factors(), b[0].params.factors()), 1e-12);
        }
    }
}

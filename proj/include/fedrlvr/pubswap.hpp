#pragma once

// Public-data steps. Every tau_swap-th local step, all clients answer the same
// server-chosen public prompts; the per-prompt response groups are then
// assembled across clients (rand or keep rule) and each client runs a GRPO
// update on its assembled groups.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedrlvr/client.hpp"
#include "fedrlvr/grpo.hpp"
#include "fedrlvr/parallel.hpp"
#include "fedrlvr/rng.hpp"
#include "fedrlvr/tasks.hpp"

namespace fedrlvr {

enum class Aggregation { rand, keep };
enum class DonorLogprobMode { local, donor };

struct Candidate {
    Response response;
    int reward = 0;
};

/// Local step t (1-based) is public iff t is a multiple of tau_swap; tau_swap = 0 disables.
constexpr bool is_public_step(int t, int tau_swap) { return tau_swap > 0 && t % tau_swap == 0; }

/// b_tilde prompts drawn without replacement from the server stream.
inline std::vector<TaskInstance> select_public_batch(std::span<const TaskInstance> public_set, std::size_t b_tilde,
                                                     Rng& server_rng) {
    if (b_tilde > public_set.size()) {
        throw std::invalid_argument("select_public_batch: b_tilde " + std::to_string(b_tilde) + " exceeds public set size " +
                                    std::to_string(public_set.size()));
    }
    std::vector<TaskInstance> out;
    for (std::size_t i : sample_without_replacement(server_rng, public_set.size(), b_tilde)) out.push_back(public_set[i]);
    return out;
}

inline std::vector<TaskInstance> select_public_batch(std::span<const TaskInstance> public_set, std::size_t b_tilde,
                                                     std::uint64_t seed, std::uint64_t round, std::uint64_t step) {
    Rng rng = make_stream(seed, StreamRole::server, round, 0, step);
    return select_public_batch(public_set, b_tilde, rng);
}

/// K responses drawn uniformly without replacement from the N*K pool. The same
/// ordered K-set goes to every client.
inline std::vector<Candidate> rand_aggregate(std::span<const Candidate> pool, int group_size, Rng& server_rng) {
    std::vector<Candidate> out;
    for (std::size_t i : sample_without_replacement(server_rng, pool.size(), static_cast<std::size_t>(group_size))) {
        out.push_back(pool[i]);
    }
    return out;
}

struct KeepResult {
    std::vector<Candidate> group;
    int replaced = 0;  // M
};

/// Keep rule. With c own correct responses and half = floor(K/2): if c >= half
/// the own group is used as is. Otherwise M = min(half - c, #correct donors) own
/// incorrect responses, chosen uniformly, are overwritten in place by M correct
/// donor responses chosen uniformly without replacement.
inline KeepResult keep_aggregate(std::span<const Candidate> own, std::span<const Candidate> donors, int group_size,
                                 Rng& client_rng) {
    if (own.size() != static_cast<std::size_t>(group_size)) {
        throw std::invalid_argument("keep_aggregate: expected " + std::to_string(group_size) + " own responses");
    }
    KeepResult res{std::vector<Candidate>(own.begin(), own.end()), 0};
    const int half = group_size / 2;
    std::vector<std::size_t> own_wrong;
    int correct = 0;
    for (std::size_t k = 0; k < own.size(); ++k) {
        if (own[k].reward == 1) {
            ++correct;
        } else {
            own_wrong.push_back(k);
        }
    }
    if (correct >= half) return res;

    const int own_generator = own.empty() ? Response::kSelf : own.front().response.generator;
    std::vector<std::size_t> donor_right;
    for (std::size_t j = 0; j < donors.size(); ++j) {
        const bool foreign = own_generator == Response::kSelf || donors[j].response.generator != own_generator;
        if (donors[j].reward == 1 && foreign) donor_right.push_back(j);
    }
    const auto m = std::min(static_cast<std::size_t>(half - correct), donor_right.size());
    if (m == 0) return res;
    const auto slots = sample_without_replacement(client_rng, own_wrong.size(), m);
    const auto picks = sample_without_replacement(client_rng, donor_right.size(), m);
    for (std::size_t i = 0; i < m; ++i) res.group[own_wrong[slots[i]]] = donors[donor_right[picks[i]]];
    res.replaced = static_cast<int>(m);
    return res;
}

/// GRPO update on assembled public groups. Rewards are re-verified locally.
/// Old log-probabilities come from the client's current policy (local mode) or
/// from each response's recorded behavior log-probabilities (donor mode).
template <class Verifier = ExactMatchVerifier>
StepStats public_grpo_step(ClientState& client, std::span<const TaskInstance> prompts,
                           std::span<const std::vector<Candidate>> assembled, std::span<const int> replaced,
                           const StepConfig& cfg, DonorLogprobMode mode = DonorLogprobMode::local,
                           Verifier verifier = {}) {
    if (assembled.size() != prompts.size()) throw std::invalid_argument("public_grpo_step: group/prompt count mismatch");
    const DensePolicy current(client.params);
    std::vector<RolloutGroup> groups;
    std::vector<GroupLogprobs> old;
    double alpha_sum = 0.0;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        if (assembled[p].size() != static_cast<std::size_t>(cfg.group_size)) {
            throw std::invalid_argument("public_grpo_step: assembled group " + std::to_string(p) + " has " +
                                        std::to_string(assembled[p].size()) + " responses");
        }
        RolloutGroup g;
        g.prompt = prompts[p].prompt;
        g.is_public = true;
        for (const auto& c : assembled[p]) {
            const int local = verifier(g.prompt, c.response.tokens);
            if (local != c.reward) {
                throw std::runtime_error("public_grpo_step: reward mismatch for a response from client " +
                                         std::to_string(c.response.generator));
            }
            g.responses.push_back(c.response);
            g.rewards.push_back(static_cast<double>(local));
        }
        attach_advantages(g);
        old.push_back(mode == DonorLogprobMode::local ? recompute_logprobs(current, g, cfg.grpo.temperature)
                                                      : behavior_logprobs(g));
        if (!replaced.empty()) alpha_sum += static_cast<double>(replaced[p]) / cfg.group_size;
        groups.push_back(std::move(g));
    }
    StepStats stats;
    stats.is_public = true;
    stats.mean_reward = mean_reward(groups);
    stats.mean_alpha = prompts.empty() ? 0.0 : alpha_sum / static_cast<double>(prompts.size());
    const BackwardResult last = grpo_update(client, groups, old, cfg);
    stats.objective = last.objective;
    stats.clip_fraction = last.clip_fraction;
    ++client.step_in_round;
    return stats;
}

/// Everything exchanged during one public step.
struct PublicExchange {
    std::vector<TaskInstance> prompts;
    std::vector<std::vector<std::vector<Candidate>>> per_client;  // [client][prompt][k]
    std::vector<std::vector<std::vector<Candidate>>> assembled;   // [client][prompt][k]
    std::vector<std::vector<int>> replaced;                       // [client][prompt]
    std::size_t uplink_tokens = 0;
    std::size_t downlink_tokens = 0;
};

/// Generation and assembly for one public step. `server_rng` drives prompt
/// selection and the rand rule; each client's own stream drives its sampling
/// and its keep choices.
template <class Verifier = ExactMatchVerifier>
PublicExchange exchange_public(std::span<ClientState> clients, std::span<const TaskInstance> public_set,
                               std::size_t b_tilde, Aggregation rule, const StepConfig& cfg, Rng& server_rng,
                               int threads = 1, Verifier verifier = {}) {
    PublicExchange ex;
    ex.prompts = select_public_batch(public_set, b_tilde, server_rng);
    const std::size_t n = clients.size();
    const std::size_t b = ex.prompts.size();
    ex.per_client.resize(n);
    parallel_for(n, threads, [&](std::size_t c) {
        const DensePolicy policy(clients[c].params);
        const auto groups = rollout(policy, ex.prompts, cfg, clients[c].rng, clients[c].id, verifier);
        for (const auto& g : groups) {
            std::vector<Candidate> cands;
            for (std::size_t k = 0; k < g.responses.size(); ++k) {
                cands.push_back({g.responses[k], static_cast<int>(g.rewards[k])});
            }
            ex.per_client[c].push_back(std::move(cands));
        }
    });
    auto tokens_of = [](std::span<const Candidate> cs) {
        std::size_t t = 0;
        for (const auto& c : cs) t += c.response.tokens.size();
        return t;
    };
    for (const auto& pc : ex.per_client) {
        for (const auto& g : pc) ex.uplink_tokens += tokens_of(g);
    }

    ex.assembled.assign(n, std::vector<std::vector<Candidate>>(b));
    ex.replaced.assign(n, std::vector<int>(b, 0));
    if (rule == Aggregation::rand) {
        for (std::size_t p = 0; p < b; ++p) {
            std::vector<Candidate> pool;
            for (std::size_t c = 0; c < n; ++c) pool.insert(pool.end(), ex.per_client[c][p].begin(), ex.per_client[c][p].end());
            const auto shared = rand_aggregate(pool, cfg.group_size, server_rng);
            for (std::size_t c = 0; c < n; ++c) {
                ex.assembled[c][p] = shared;
                int foreign = 0;
                for (const auto& s : shared) foreign += s.response.generator != clients[c].id;
                ex.replaced[c][p] = foreign;
                ex.downlink_tokens += tokens_of(shared);
            }
        }
    } else {
        // Keep choices depend only on each client's own stream.
        parallel_for(n, threads, [&](std::size_t c) {
            for (std::size_t p = 0; p < b; ++p) {
                std::vector<Candidate> donors;
                for (std::size_t o = 0; o < n; ++o) {
                    if (o != c) donors.insert(donors.end(), ex.per_client[o][p].begin(), ex.per_client[o][p].end());
                }
                KeepResult kr = keep_aggregate(ex.per_client[c][p], donors, cfg.group_size, clients[c].rng);
                ex.assembled[c][p] = std::move(kr.group);
                ex.replaced[c][p] = kr.replaced;
            }
        });
        // Downlink: the correct donor candidates for every prompt a client could not fill on its own.
        for (std::size_t c = 0; c < n; ++c) {
            for (std::size_t p = 0; p < b; ++p) {
                int own_correct = 0;
                for (const auto& cand : ex.per_client[c][p]) own_correct += cand.reward;
                if (own_correct >= cfg.group_size / 2) continue;
                for (std::size_t o = 0; o < n; ++o) {
                    if (o == c) continue;
                    for (const auto& cand : ex.per_client[o][p]) {
                        if (cand.reward == 1) ex.downlink_tokens += cand.response.tokens.size();
                    }
                }
            }
        }
    }
    return ex;
}

}  // namespace fedrlvr

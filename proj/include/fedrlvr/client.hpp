#pragma once

// Client-side training: private GRPO steps and the shared update loop that
// public steps reuse.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedrlvr/grpo.hpp"
#include "fedrlvr/model.hpp"
#include "fedrlvr/optimizer.hpp"
#include "fedrlvr/rng.hpp"
#include "fedrlvr/tasks.hpp"

namespace fedrlvr {

struct StepConfig {
    int group_size = 8;
    int batch_size = 8;
    int max_len = 4;
    int n_grad_epochs = 2;
    GrpoOptions grpo;
    double prox_mu = 0.0;  // > 0 adds the FedProx pull toward the round-start factors
};

struct ClientState {
    int id = 0;
    PolicyParams params;
    OptimizerState optimizer;
    std::vector<TaskInstance> shard;
    Rng rng;
    int step_in_round = 0;
    LoraFactors round_start;  // factors received at the last broadcast

    ClientState(int client_id, PolicyParams p, OptimizerOptions opt, std::vector<TaskInstance> data)
        : id(client_id), params(std::move(p)), shard(std::move(data)), round_start(params.factors()) {
        optimizer.options = opt;
        optimizer.reset(round_start);
    }
};

struct StepStats {
    double mean_reward = 0.0;
    double objective = 0.0;
    double clip_fraction = 0.0;
    double mean_alpha = 0.0;  // public steps only
    bool is_public = false;
};

/// -mu * (F - F_round_start) for every factor: the ascent direction of
/// -(mu/2) * ||F - F_start||^2 applied to each LoRA matrix.
inline Gradients fedprox_gradient(const LoraFactors& current, const LoraFactors& round_start, double mu) {
    if (!current.same_shape(round_start)) throw std::invalid_argument("fedprox_gradient: shape mismatch");
    Gradients g = LoraFactors::zeros_like(current);
    if (mu == 0.0) return g;
    for (std::size_t i = 0; i < current.layers.size(); ++i) {
        g.layers[i].a = -mu * (current.layers[i].a - round_start.layers[i].a);
        g.layers[i].b = -mu * (current.layers[i].b - round_start.layers[i].b);
    }
    return g;
}

/// n_grad_epochs ascent iterations against fixed old log-probabilities.
/// Returns the backward result of the last iteration (objective before its update).
inline BackwardResult grpo_update(ClientState& client, std::span<const RolloutGroup> groups,
                                  std::span<const GroupLogprobs> old_lps, const StepConfig& cfg) {
    BackwardResult last;
    std::optional<PolicyParams> ref;
    if (cfg.grpo.kl_coef != 0.0) ref.emplace(client.params.with_zero_update());
    for (int e = 0; e < cfg.n_grad_epochs; ++e) {
        last = grpo_backward(client.params, groups, old_lps, cfg.grpo, ref ? &*ref : nullptr);
        Gradients g = last.grads;
        if (cfg.prox_mu > 0.0) g += fedprox_gradient(client.params.factors(), client.round_start, cfg.prox_mu);
        optimizer_step(client.optimizer, client.params, std::move(g));
    }
    return last;
}

inline double mean_reward(std::span<const RolloutGroup> groups) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& g : groups) {
        for (double r : g.rewards) s += r;
        n += g.rewards.size();
    }
    return n ? s / static_cast<double>(n) : 0.0;
}

/// Samples K responses per prompt from the current policy and scores them.
template <class Verifier = ExactMatchVerifier>
std::vector<RolloutGroup> rollout(const DensePolicy& policy, std::span<const TaskInstance> prompts,
                                  const StepConfig& cfg, Rng& rng, int generator, Verifier verifier = {}) {
    std::vector<RolloutGroup> groups;
    groups.reserve(prompts.size());
    for (const auto& inst : prompts) {
        RolloutGroup g;
        g.prompt = inst.prompt;
        g.responses = sample_responses(policy, inst.prompt, cfg.group_size, cfg.grpo.temperature, cfg.max_len, rng,
                                       generator, inst.id);
        for (const auto& r : g.responses) g.rewards.push_back(static_cast<double>(verifier(g.prompt, r.tokens)));
        groups.push_back(std::move(g));
    }
    return groups;
}

/// One private GRPO step: draw b prompts from the shard, sample K responses
/// each from the current policy (theta_old), then run n_grad_epochs updates.
template <class Verifier = ExactMatchVerifier>
StepStats local_grpo_step(ClientState& client, const StepConfig& cfg, Verifier verifier = {}) {
    if (cfg.batch_size < 1 || client.shard.empty()) throw std::invalid_argument("local_grpo_step: empty batch");
    const auto b = static_cast<std::size_t>(cfg.batch_size);
    if (b > client.shard.size()) throw std::invalid_argument("local_grpo_step: batch larger than shard");
    std::vector<TaskInstance> batch;
    for (std::size_t i : sample_without_replacement(client.rng, client.shard.size(), b)) batch.push_back(client.shard[i]);

    const DensePolicy theta_old(client.params);
    std::vector<RolloutGroup> groups = rollout(theta_old, batch, cfg, client.rng, client.id, verifier);
    std::vector<GroupLogprobs> old;
    for (auto& g : groups) {
        attach_advantages(g);
        old.push_back(behavior_logprobs(g));
    }
    StepStats stats;
    stats.mean_reward = mean_reward(groups);
    const BackwardResult last = grpo_update(client, groups, old, cfg);
    stats.objective = last.objective;
    stats.clip_fraction = last.clip_fraction;
    ++client.step_in_round;
    return stats;
}

}  // namespace fedrlvr

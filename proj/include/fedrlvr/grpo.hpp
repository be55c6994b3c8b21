#pragma once

// Group-relative advantages, the clipped surrogate objective and its gradient
// with respect to the LoRA factors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedrlvr/model.hpp"

namespace fedrlvr {

/// Per-response, per-token log-probabilities for one group.
using GroupLogprobs = std::vector<std::vector<double>>;

struct RolloutGroup {
    std::vector<TokenId> prompt;
    std::vector<Response> responses;
    std::vector<double> rewards;
    std::vector<double> advantages;  // empty until compute_advantages
    bool is_public = false;
};

struct GrpoOptions {
    double eps_low = 0.2;
    double eps_high = 0.25;
    double kl_coef = 1e-4;
    double temperature = 0.7;
};

/// A_k = (r_k - mean) / std with the population std. Groups whose std is below
/// 1e-8 get exactly zero advantages.
inline std::vector<double> compute_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) throw std::invalid_argument("compute_advantages: group size must be at least 2");
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    std::vector<double> adv(rewards.size(), 0.0);
    if (sd < 1e-8) return adv;
    for (std::size_t k = 0; k < rewards.size(); ++k) adv[k] = (rewards[k] - mean) / sd;
    return adv;
}

inline void attach_advantages(RolloutGroup& group) { group.advantages = compute_advantages(group.rewards); }

struct ClippedTerm {
    double value;       // min(rho*A, clip(rho)*A)
    double dvalue_dlp;  // derivative w.r.t. the new log-probability
    bool clipped;
};

inline ClippedTerm clipped_term(double new_lp, double old_lp, double advantage, double eps_low, double eps_high) {
    const double ratio = std::exp(new_lp - old_lp);
    const double unclipped = ratio * advantage;
    const double clipped = std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high) * advantage;
    if (clipped < unclipped) return {clipped, 0.0, true};
    return {unclipped, unclipped, false};
}

/// Clipped surrogate for one group: token mean within each response, then mean over responses.
inline double group_surrogate(std::span<const std::vector<double>> new_lp, std::span<const std::vector<double>> old_lp,
                              std::span<const double> advantages, double eps_low, double eps_high) {
    if (new_lp.size() != old_lp.size() || new_lp.size() != advantages.size()) {
        throw std::invalid_argument("group_surrogate: response count mismatch");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < new_lp.size(); ++k) {
        if (new_lp[k].size() != old_lp[k].size()) throw std::invalid_argument("group_surrogate: token count mismatch");
        double s = 0.0;
        for (std::size_t t = 0; t < new_lp[k].size(); ++t) {
            s += clipped_term(new_lp[k][t], old_lp[k][t], advantages[k], eps_low, eps_high).value;
        }
        if (!new_lp[k].empty()) total += s / static_cast<double>(new_lp[k].size());
    }
    return total / static_cast<double>(new_lp.size());
}

/// Objective to maximize, averaged over the groups (prompts) of a batch.
inline double grpo_loss(std::span<const GroupLogprobs> new_lp, std::span<const GroupLogprobs> old_lp,
                        std::span<const std::vector<double>> advantages, double eps_low, double eps_high) {
    if (new_lp.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t g = 0; g < new_lp.size(); ++g) {
        total += group_surrogate(new_lp[g], old_lp[g], advantages[g], eps_low, eps_high);
    }
    return total / static_cast<double>(new_lp.size());
}

/// k3 estimator exp(d) - d - 1 with d = lp_ref - lp_new; nonnegative.
inline double kl_term(double new_lp, double ref_lp) {
    const double d = ref_lp - new_lp;
    return std::exp(d) - d - 1.0;
}

struct BackwardResult {
    Gradients grads;
    double objective = 0.0;  // surrogate - kl_coef * kl
    double surrogate = 0.0;
    double kl = 0.0;
    double clip_fraction = 0.0;
    std::size_t tokens = 0;
};

/// Gradient (ascent direction) of
///   J = mean_prompts mean_k (1/|y_k|) sum_t min(rho A, clip(rho) A)  -  kl_coef * KL
/// with respect to every LoRA factor. `ref` is required when kl_coef > 0.
inline BackwardResult grpo_backward(const PolicyParams& params, std::span<const RolloutGroup> groups,
                                    std::span<const GroupLogprobs> old_logprobs, const GrpoOptions& opt,
                                    const PolicyParams* ref = nullptr, bool want_grads = true) {
    if (old_logprobs.size() != groups.size()) {
        throw std::invalid_argument("grpo_backward: " + std::to_string(old_logprobs.size()) +
                                    " old log-prob groups for " + std::to_string(groups.size()) + " rollout groups");
    }
    const bool use_kl = opt.kl_coef != 0.0;
    if (use_kl && ref == nullptr) throw std::invalid_argument("grpo_backward: kl_coef > 0 requires reference params");

    const DensePolicy policy(params);
    const DensePolicy* ref_policy = nullptr;
    std::optional<DensePolicy> ref_storage;
    if (use_kl) ref_policy = &ref_storage.emplace(*ref);

    const auto bos = params.specials().bos;
    std::vector<TokenId> window(static_cast<std::size_t>(params.dims().context));
    DenseWeights dense = policy.zero_grads();
    BackwardResult res;
    std::size_t clipped = 0;
    const double prompt_w = groups.empty() ? 0.0 : 1.0 / static_cast<double>(groups.size());

    for (std::size_t g = 0; g < groups.size(); ++g) {
        const RolloutGroup& group = groups[g];
        const GroupLogprobs& old = old_logprobs[g];
        if (group.advantages.size() != group.responses.size()) {
            throw std::invalid_argument("grpo_backward: group " + std::to_string(g) + " has no advantages attached");
        }
        if (old.size() != group.responses.size()) {
            throw std::invalid_argument("grpo_backward: group " + std::to_string(g) + " old log-prob count mismatch");
        }
        const double resp_w = prompt_w / static_cast<double>(group.responses.size());
        for (std::size_t k = 0; k < group.responses.size(); ++k) {
            const auto& tokens = group.responses[k].tokens;
            if (old[k].size() != tokens.size()) {
                throw std::invalid_argument("grpo_backward: group " + std::to_string(g) + " response " +
                                            std::to_string(k) + " has " + std::to_string(old[k].size()) +
                                            " old log-probs for " + std::to_string(tokens.size()) + " tokens");
            }
            if (tokens.empty()) continue;
            const double tok_w = resp_w / static_cast<double>(tokens.size());
            const double adv = group.advantages[k];
            for (std::size_t t = 0; t < tokens.size(); ++t) {
                build_context(group.prompt, std::span<const TokenId>(tokens).first(t), bos, window);
                // First pass for the value: the weight depends on the current log-prob.
                const Vector lp = log_softmax(policy.logits(window), opt.temperature);
                const double new_lp = lp[tokens[t]];
                const ClippedTerm term = clipped_term(new_lp, old[k][t], adv, opt.eps_low, opt.eps_high);
                double weight = term.dvalue_dlp;
                res.surrogate += tok_w * term.value;
                if (term.clipped) ++clipped;
                if (use_kl) {
                    const Vector ref_lp = log_softmax(ref_policy->logits(window), opt.temperature);
                    const double d = ref_lp[tokens[t]] - new_lp;
                    res.kl += tok_w * kl_term(new_lp, ref_lp[tokens[t]]);
                    weight -= opt.kl_coef * (1.0 - std::exp(d));
                }
                ++res.tokens;
                if (want_grads && weight != 0.0) {
                    policy.accumulate_logprob_grad(window, tokens[t], opt.temperature, tok_w * weight, dense);
                }
            }
        }
    }
    res.objective = res.surrogate - opt.kl_coef * res.kl;
    res.clip_fraction = res.tokens ? static_cast<double>(clipped) / static_cast<double>(res.tokens) : 0.0;
    res.grads = want_grads ? chain_to_factors(params, dense) : Gradients::zeros_like(params.factors());
    return res;
}

/// Objective value only.
inline double grpo_objective(const PolicyParams& params, std::span<const RolloutGroup> groups,
                             std::span<const GroupLogprobs> old_logprobs, const GrpoOptions& opt,
                             const PolicyParams* ref = nullptr) {
    return grpo_backward(params, groups, old_logprobs, opt, ref, false).objective;
}

inline GroupLogprobs behavior_logprobs(const RolloutGroup& group) {
    GroupLogprobs out;
    for (const auto& r : group.responses) out.push_back(r.behavior_logprobs);
    return out;
}

inline GroupLogprobs recompute_logprobs(const DensePolicy& policy, const RolloutGroup& group, double temperature) {
    GroupLogprobs out;
    for (const auto& r : group.responses) out.push_back(token_logprobs(policy, group.prompt, r.tokens, temperature));
    return out;
}

}  // namespace fedrlvr

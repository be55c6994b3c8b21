#pragma once

// Server side of a run: broadcast, tau local steps per client, FedIT
// aggregation of the LoRA factors and communication accounting.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedrlvr/client.hpp"
#include "fedrlvr/metrics.hpp"
#include "fedrlvr/model.hpp"
#include "fedrlvr/parallel.hpp"
#include "fedrlvr/pubswap.hpp"
#include "fedrlvr/rng.hpp"

namespace fedrlvr {

enum class Method { fedavg_grpo, fedprox_grpo, fedavg_pubswap_rand, fedavg_pubswap_keep };

constexpr bool uses_pubswap(Method m) { return m == Method::fedavg_pubswap_rand || m == Method::fedavg_pubswap_keep; }

/// Real values (LoRA, dense baseline) per client and token ids (public steps)
/// moved in one round.
struct CommEntry {
    std::size_t lora_up = 0;    // per client
    std::size_t lora_down = 0;  // per client
    std::size_t dense_up = 0;   // per client, full-weight baseline
    std::size_t dense_down = 0;
    std::size_t public_tokens = 0;  // all clients, up + down

    [[nodiscard]] std::size_t lora_round_trip() const { return lora_up + lora_down; }
    [[nodiscard]] std::size_t dense_round_trip() const { return dense_up + dense_down; }
};

struct CommLedger {
    std::vector<CommEntry> rounds;
    std::vector<std::size_t> clients;  // participating clients per round

    void record(const CommEntry& e, std::size_t n_clients) {
        rounds.push_back(e);
        clients.push_back(n_clients);
    }

    [[nodiscard]] std::size_t cumulative_values() const {
        std::size_t total = 0;
        for (std::size_t i = 0; i < rounds.size(); ++i) {
            total += clients[i] * rounds[i].lora_round_trip() + rounds[i].public_tokens;
        }
        return total;
    }
};

/// Per-client cost of one round: r(m+d) values per layer per direction for the
/// factors versus m*d for dense weights. Public payload counts only for PubSwap methods.
inline CommEntry comm_cost_round(std::span<const std::pair<int, int>> layer_dims, int rank, Method method,
                                 std::size_t public_payload_tokens) {
    if (rank < 1) throw std::invalid_argument("comm_cost_round: rank must be >= 1");
    CommEntry e;
    for (const auto& [m, d] : layer_dims) {
        const auto lora = static_cast<std::size_t>(rank) * static_cast<std::size_t>(m + d);
        const auto dense = static_cast<std::size_t>(m) * static_cast<std::size_t>(d);
        e.lora_up += lora;
        e.lora_down += lora;
        e.dense_up += dense;
        e.dense_down += dense;
    }
    e.public_tokens = uses_pubswap(method) ? public_payload_tokens : 0;
    return e;
}

struct GlobalState {
    LoraFactors factors;
    int round = 0;
    std::vector<TaskInstance> public_set;
    std::vector<TaskInstance> test_set;
    LoraFactors round_start;
    CommLedger ledger;
};

/// Overwrites every client's factors with the global ones and zeroes optimizer state.
inline void broadcast(GlobalState& global, std::span<ClientState> clients) {
    global.round_start = global.factors;
    for (auto& c : clients) {
        if (!c.params.factors().same_shape(global.factors)) {
            throw std::invalid_argument("broadcast: factor shapes do not match client " + std::to_string(c.id));
        }
        c.params.set_factors(global.factors);
        c.round_start = global.factors;
        c.optimizer.reset(global.factors);
        c.step_in_round = 0;
    }
}

/// FedIT: A and B are averaged separately. Written as first + mean(x_i - first)
/// so identical inputs come back bit-exact.
inline LoraFactors aggregate_fedit(std::span<const LoraFactors> client_factors) {
    if (client_factors.empty()) throw std::invalid_argument("aggregate_fedit: no client factors");
    const LoraFactors& first = client_factors.front();
    LoraFactors delta = LoraFactors::zeros_like(first);
    for (std::size_t n = 1; n < client_factors.size(); ++n) {
        if (!client_factors[n].same_shape(first)) throw std::invalid_argument("aggregate_fedit: inconsistent shapes");
        for (std::size_t i = 0; i < first.layers.size(); ++i) {
            delta.layers[i].a += client_factors[n].layers[i].a - first.layers[i].a;
            delta.layers[i].b += client_factors[n].layers[i].b - first.layers[i].b;
        }
    }
    const auto count = static_cast<double>(client_factors.size());
    LoraFactors out = first;
    for (std::size_t i = 0; i < first.layers.size(); ++i) {
        out.layers[i].a += delta.layers[i].a / count;
        out.layers[i].b += delta.layers[i].b / count;
    }
    return out;
}

struct RoundConfig {
    Method method = Method::fedavg_grpo;
    int tau = 4;
    int tau_swap = 2;
    std::size_t b_tilde = 8;
    double mu = 0.0;
    StepConfig step;
    DonorLogprobMode donor_mode = DonorLogprobMode::local;
    std::uint64_t seed = 0;
    int threads = 1;
    bool record_wall_time = false;

    void validate() const {
        if (tau < 1) throw std::invalid_argument("tau must be >= 1");
        if (uses_pubswap(method) && (tau_swap < 2 || tau_swap >= tau)) {
            throw std::invalid_argument("tau_swap must be in [2, tau) for PubSwap methods");
        }
    }
};

struct RoundResult {
    std::vector<MetricsRecord> records;  // (step, client) rows in step-major order
    Drift end_drift;                     // before aggregation
    CommEntry comm;
    double mean_alpha = 0.0;
    bool any_public = false;
    bool finite = true;
};

/// One communication round of `steps` local steps (tau, or fewer for a final
/// partial round). Updates `global` in place.
template <class Verifier = ExactMatchVerifier>
RoundResult run_round(GlobalState& global, std::span<ClientState> clients, const RoundConfig& cfg, int steps,
                      Verifier verifier = {}) {
    cfg.validate();
    if (clients.empty()) throw std::invalid_argument("run_round: no clients");
    const int round = global.round;
    broadcast(global, clients);
    for (auto& c : clients) {
        c.rng = make_stream(cfg.seed, StreamRole::client, static_cast<std::uint64_t>(round),
                            static_cast<std::uint64_t>(c.id));
    }

    StepConfig step_cfg = cfg.step;
    step_cfg.prox_mu = cfg.method == Method::fedprox_grpo ? cfg.mu : 0.0;
    const bool pubswap = uses_pubswap(cfg.method);
    const Aggregation rule = cfg.method == Method::fedavg_pubswap_rand ? Aggregation::rand : Aggregation::keep;

    RoundResult res;
    std::size_t public_tokens = 0;
    double alpha_sum = 0.0;
    std::size_t alpha_count = 0;
    const std::size_t n = clients.size();

    for (int t = 1; t <= steps; ++t) {
        std::vector<StepStats> stats(n);
        std::vector<double> wall(n, 0.0);
        const bool is_public = pubswap && is_public_step(t, cfg.tau_swap);
        if (is_public) {
            Rng server = make_stream(cfg.seed, StreamRole::server, static_cast<std::uint64_t>(round), 0,
                                     static_cast<std::uint64_t>(t));
            PublicExchange ex =
                exchange_public(clients, global.public_set, cfg.b_tilde, rule, step_cfg, server, cfg.threads, verifier);
            public_tokens += ex.uplink_tokens + ex.downlink_tokens;
            parallel_for(n, cfg.threads, [&](std::size_t c) {
                const auto t0 = std::chrono::steady_clock::now();
                stats[c] = public_grpo_step(clients[c], ex.prompts, ex.assembled[c], ex.replaced[c], step_cfg,
                                            cfg.donor_mode, verifier);
                wall[c] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            });
        } else {
            parallel_for(n, cfg.threads, [&](std::size_t c) {
                const auto t0 = std::chrono::steady_clock::now();
                stats[c] = local_grpo_step(clients[c], step_cfg, verifier);
                wall[c] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            });
        }
        for (std::size_t c = 0; c < n; ++c) {
            MetricsRecord r;
            r.round = round;
            r.local_step = t;
            r.client_id = clients[c].id;
            r.mean_reward = stats[c].mean_reward;
            r.surrogate_loss = stats[c].objective;
            r.clip_fraction = stats[c].clip_fraction;
            if (stats[c].is_public) {
                r.mean_alpha = stats[c].mean_alpha;
                alpha_sum += stats[c].mean_alpha;
                ++alpha_count;
            }
            if (cfg.record_wall_time) r.wall_time_ms = wall[c];
            if (!std::isfinite(stats[c].objective)) res.finite = false;
            res.records.push_back(r);
        }
    }

    if (n >= 2) {
        std::vector<const PolicyParams*> ptrs;
        for (const auto& c : clients) ptrs.push_back(&c.params);
        res.end_drift = mean_pairwise_drift(ptrs);
    }
    std::vector<LoraFactors> collected;
    collected.reserve(n);
    for (const auto& c : clients) collected.push_back(c.params.factors());
    global.factors = aggregate_fedit(collected);

    const int rank = static_cast<int>(clients.front().params.layer(0).rank());
    res.comm = comm_cost_round(clients.front().params.layer_dims(), rank, cfg.method, public_tokens);
    global.ledger.record(res.comm, n);
    res.any_public = alpha_count > 0;
    res.mean_alpha = alpha_count ? alpha_sum / static_cast<double>(alpha_count) : 0.0;
    ++global.round;
    return res;
}

}  // namespace fedrlvr

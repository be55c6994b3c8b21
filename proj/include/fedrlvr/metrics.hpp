#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "fedrlvr/model.hpp"
#include "fedrlvr/tasks.hpp"

namespace fedrlvr {

struct Drift {
    double factors = 0.0;    // || concat(A_a - A_b, B_a - B_b) ||
    double effective = 0.0;  // || concat(s (B_a A_a - B_b A_b)) ||
};

inline Drift pairwise_drift(const PolicyParams& a, const PolicyParams& b) {
    if (!(a.dims() == b.dims())) throw std::invalid_argument("pairwise_drift: architecture mismatch");
    double fsq = 0.0;
    double esq = 0.0;
    for (std::size_t i = 0; i < PolicyParams::kLayers; ++i) {
        const auto& la = a.layer(i);
        const auto& lb = b.layer(i);
        if (la.rank() != lb.rank() || la.scale() != lb.scale()) {
            throw std::invalid_argument("pairwise_drift: LoRA rank or scale mismatch in layer " + std::to_string(i));
        }
        fsq += (la.factors().a - lb.factors().a).squaredNorm() + (la.factors().b - lb.factors().b).squaredNorm();
        esq += (la.scale() * (la.factors().b * la.factors().a - lb.factors().b * lb.factors().a)).squaredNorm();
    }
    return {std::sqrt(fsq), std::sqrt(esq)};
}

/// Mean of both drift measures over all unordered client pairs.
inline Drift mean_pairwise_drift(std::span<const PolicyParams* const> params) {
    if (params.size() < 2) throw std::invalid_argument("mean_pairwise_drift: need at least two clients");
    Drift sum;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = i + 1; j < params.size(); ++j) {
            const Drift d = pairwise_drift(*params[i], *params[j]);
            sum.factors += d.factors;
            sum.effective += d.effective;
            ++pairs;
        }
    }
    sum.factors /= static_cast<double>(pairs);
    sum.effective /= static_cast<double>(pairs);
    return sum;
}

/// Mean over test prompts of the mean reward of `samples_per_prompt` samples.
template <class Verifier = ExactMatchVerifier>
double pass_at_1(const PolicyParams& params, std::span<const TaskInstance> test_set, int samples_per_prompt,
                 double temperature, int max_len, Rng& rng, Verifier verifier = {}) {
    if (test_set.empty()) throw std::invalid_argument("pass_at_1: empty test set");
    if (samples_per_prompt < 1) throw std::invalid_argument("pass_at_1: samples_per_prompt must be >= 1");
    const DensePolicy policy(params);
    double total = 0.0;
    for (const auto& inst : test_set) {
        const auto responses = sample_responses(policy, inst.prompt, samples_per_prompt, temperature, max_len, rng);
        double hits = 0.0;
        for (const auto& r : responses) hits += static_cast<double>(verifier(inst.prompt, r.tokens));
        total += hits / static_cast<double>(samples_per_prompt);
    }
    return total / static_cast<double>(test_set.size());
}

struct MetricsRecord {
    static constexpr int kServer = -1;

    int round = 0;
    int local_step = 0;
    int client_id = kServer;
    std::optional<double> mean_reward;
    std::optional<double> surrogate_loss;
    std::optional<double> clip_fraction;
    std::optional<double> drift_factors;
    std::optional<double> drift_effective;
    std::optional<double> pass_at_1;
    std::optional<double> comm_values_cum;
    std::optional<double> mean_alpha;
    std::optional<double> wall_time_ms;

    [[nodiscard]] bool all_finite() const {
        for (const auto* f : {&mean_reward, &surrogate_loss, &clip_fraction, &drift_factors, &drift_effective,
                              &pass_at_1, &comm_values_cum, &mean_alpha, &wall_time_ms}) {
            if (*f && !std::isfinite(**f)) return false;
        }
        return true;
    }
};

inline constexpr const char* kMetricsHeader =
    "round,local_step,client_id,mean_reward,loss,clip_fraction,drift_factors,drift_effective,pass_at_1,"
    "comm_values_cum,mean_alpha,wall_time_ms";

inline std::string to_csv_row(const MetricsRecord& r) {
    auto cell = [](const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); };
    const std::string client = r.client_id == MetricsRecord::kServer ? "server" : std::to_string(r.client_id);
    return fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}", r.round, r.local_step, client, cell(r.mean_reward),
                       cell(r.surrogate_loss), cell(r.clip_fraction), cell(r.drift_factors), cell(r.drift_effective),
                       cell(r.pass_at_1), cell(r.comm_values_cum), cell(r.mean_alpha), cell(r.wall_time_ms));
}

inline void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> records) {
    os << kMetricsHeader << '\n';
    for (const auto& r : records) os << to_csv_row(r) << '\n';
}

}  // namespace fedrlvr

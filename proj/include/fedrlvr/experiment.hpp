#pragma once

// End-to-end experiment: build the frozen base policy and the federated split
// from a config, run all rounds, and write metrics and final factors.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedrlvr/client.hpp"
#include "fedrlvr/config.hpp"
#include "fedrlvr/factors_io.hpp"
#include "fedrlvr/federation.hpp"
#include "fedrlvr/metrics.hpp"
#include "fedrlvr/model.hpp"
#include "fedrlvr/rng.hpp"
#include "fedrlvr/tasks.hpp"

namespace fedrlvr {

/// Supervised warm-up of the dense base weights on answer *format* only: the
/// target is a uniformly random residue for the prompt's modulus followed by
/// EOS. Gives the frozen backbone a prior over well-formed answers without
/// teaching the arithmetic.
inline DenseWeights pretrain_format(const Matrix& embeddings, DenseWeights w, const ModelDims& dims, int topics,
                                    int steps, int batch, double lr, Rng& rng) {
    const auto eos = special_tokens(dims.vocab).eos;
    const auto bos = special_tokens(dims.vocab).bos;
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    DenseWeights m{Matrix::Zero(w.hidden.rows(), w.hidden.cols()), Matrix::Zero(w.head.rows(), w.head.cols())};
    DenseWeights v = m;
    std::vector<TokenId> window(static_cast<std::size_t>(dims.context));
    for (int s = 1; s <= steps; ++s) {
        const DensePolicy policy(embeddings, w, dims);
        DenseWeights g = policy.zero_grads();
        const double weight = 1.0 / (2.0 * batch);
        for (int i = 0; i < batch; ++i) {
            const int topic = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(topics)));
            const auto mod = static_cast<std::size_t>(kTopicTable[static_cast<std::size_t>(topic)].modulus);
            const TaskInstance inst =
                make_instance(topic, static_cast<int>(uniform_index(rng, mod)), static_cast<int>(uniform_index(rng, mod)));
            const std::vector<TokenId> target{static_cast<TokenId>(uniform_index(rng, mod)), eos};
            for (std::size_t t = 0; t < target.size(); ++t) {
                build_context(inst.prompt, std::span<const TokenId>(target).first(t), bos, window);
                policy.accumulate_logprob_grad(window, target[t], 1.0, weight, g);
            }
        }
        const double bc1 = 1.0 - std::pow(beta1, s);
        const double bc2 = 1.0 - std::pow(beta2, s);
        auto adam = [&](Matrix& p, const Matrix& grad, Matrix& mm, Matrix& vv) {
            mm = beta1 * mm + (1.0 - beta1) * grad;
            vv = beta2 * vv + (1.0 - beta2) * grad.cwiseProduct(grad);
            p.array() += lr * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + eps);
        };
        adam(w.hidden, g.hidden, m.hidden, v.hidden);
        adam(w.head, g.head, m.head, v.head);
    }
    return w;
}

/// Initial global policy: random frozen parts, format warm-up, then LoRA
/// factors with B = 0. Identical for every run with the same seed and dims.
inline PolicyParams build_initial_policy(const RunConfig& cfg) {
    const ModelDims dims = cfg.model.dims();
    Rng rng = make_stream(cfg.global_seed, StreamRole::model);
    Matrix emb;
    DenseWeights base = init_base_weights(dims, rng, emb);
    if (cfg.model.pretrain_steps > 0) {
        Rng pre = make_stream(cfg.global_seed, StreamRole::pretrain);
        base = pretrain_format(emb, std::move(base), dims, cfg.task.topics, cfg.model.pretrain_steps,
                               cfg.model.pretrain_batch, cfg.model.pretrain_lr, pre);
    }
    return make_policy(dims, std::move(emb), std::move(base), InitOptions{cfg.lora_rank, cfg.lora_alpha}, rng);
}

inline std::vector<TaskInstance> build_corpus(const RunConfig& cfg) {
    Rng rng = make_stream(cfg.global_seed, StreamRole::corpus);
    return gen_corpus(cfg.task.topics, cfg.task.corpus_size, rng);
}

inline FederatedSplit build_split(const RunConfig& cfg) {
    const auto corpus = build_corpus(cfg);
    Rng rng = make_stream(cfg.global_seed, StreamRole::partition);
    return dirichlet_partition(corpus, cfg.n_clients, cfg.task.dirichlet_alpha, cfg.task.shard_size,
                               cfg.task.public_size, cfg.task.test_size, rng);
}

/// pass@1 of `params` on the test set with the evaluation stream of `round`.
inline double evaluate_round(const PolicyParams& params, std::span<const TaskInstance> test_set, const RunConfig& cfg,
                             int round) {
    Rng rng = make_stream(cfg.global_seed, StreamRole::eval, static_cast<std::uint64_t>(round));
    return pass_at_1(params, test_set, cfg.samples_per_prompt_eval, cfg.temperature_eval, cfg.max_len, rng,
                     ExactMatchVerifier{cfg.model.vocab});
}

struct RunOutcome {
    int exit_code = 0;
    std::string error;
    std::vector<MetricsRecord> records;
    LoraFactors final_factors;
    std::vector<double> round_drift;         // mean pairwise effective drift at the end of each round
    std::vector<double> round_drift_factors;
    std::optional<double> final_pass_at_1;
    double base_pass_at_1 = 0.0;
};

struct RunOptions {
    bool record_wall_time = false;
    bool evaluate_base = false;
};

/// Runs all rounds in memory. exit_code 3 signals numerical divergence; the
/// records gathered up to that point are kept.
inline RunOutcome run_experiment(const RunConfig& cfg, const RunOptions& opts = {}) {
    RunOutcome out;
    const PolicyParams initial = build_initial_policy(cfg);
    FederatedSplit split = build_split(cfg);
    if (opts.evaluate_base) out.base_pass_at_1 = evaluate_round(initial, split.test_set, cfg, -1);

    std::vector<ClientState> clients;
    for (int i = 0; i < cfg.n_clients; ++i) {
        clients.emplace_back(i, initial, cfg.optimizer_options(), std::move(split.shards[static_cast<std::size_t>(i)]));
    }
    GlobalState global;
    global.factors = initial.factors();
    global.public_set = std::move(split.public_set);
    global.test_set = std::move(split.test_set);

    RoundConfig rc = cfg.round_config();
    rc.record_wall_time = opts.record_wall_time;
    const ExactMatchVerifier verifier{cfg.model.vocab};
    PolicyParams global_params = initial;

    const int rounds = cfg.rounds();
    for (int r = 0; r < rounds; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        RoundResult rr;
        try {
            rr = run_round(global, std::span<ClientState>(clients), rc, cfg.steps_in_round(r), verifier);
        } catch (const std::domain_error& e) {
            out.exit_code = 3;
            out.error = e.what();
            break;
        }
        out.records.insert(out.records.end(), rr.records.begin(), rr.records.end());

        MetricsRecord server;
        server.round = r;
        server.local_step = cfg.steps_in_round(r);
        server.drift_factors = rr.end_drift.factors;
        server.drift_effective = rr.end_drift.effective;
        server.comm_values_cum = static_cast<double>(global.ledger.cumulative_values());
        if (rr.any_public) server.mean_alpha = rr.mean_alpha;
        global_params.set_factors(global.factors);
        const bool last = r == rounds - 1;
        if (last || (cfg.eval_every_rounds > 0 && (r + 1) % cfg.eval_every_rounds == 0)) {
            server.pass_at_1 = evaluate_round(global_params, global.test_set, cfg, r);
            if (last) out.final_pass_at_1 = server.pass_at_1;
        }
        if (opts.record_wall_time) {
            server.wall_time_ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        }
        out.records.push_back(server);
        out.round_drift.push_back(rr.end_drift.effective);
        out.round_drift_factors.push_back(rr.end_drift.factors);
        if (!rr.finite || !std::isfinite(global.factors.squared_norm())) {
            out.exit_code = 3;
            out.error = "non-finite objective or factors in round " + std::to_string(r);
            break;
        }
    }
    out.final_factors = global.factors;
    return out;
}

/// Writes metrics.csv, final_factors.bin and config_resolved.json into `dir`.
inline void write_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const RunOutcome& out) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream csv(dir / "metrics.csv", std::ios::binary);
        if (!csv) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
        write_metrics_csv(csv, out.records);
    }
    write_factors((dir / "final_factors.bin").string(), out.final_factors);
    std::ofstream js(dir / "config_resolved.json", std::ios::binary);
    js << config_to_json(cfg).dump(2) << '\n';
}

}  // namespace fedrlvr

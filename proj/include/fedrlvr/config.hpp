#pragma once

// Experiment configuration: a single JSON document, strict about keys.
// Nested objects ("model", "task") are addressed with dotted keys in overrides.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedrlvr/federation.hpp"
#include "fedrlvr/model.hpp"
#include "fedrlvr/optimizer.hpp"
#include "fedrlvr/pubswap.hpp"
#include "fedrlvr/tasks.hpp"

namespace fedrlvr {

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(key.empty() ? what : "config key '" + key + "': " + what), key_(std::move(key)) {}
    [[nodiscard]] const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct ModelConfig {
    int vocab = 16;
    int d_emb = 16;
    int context = 6;
    int hidden = 64;
    int pretrain_steps = 300;
    int pretrain_batch = 32;
    double pretrain_lr = 1e-2;

    [[nodiscard]] ModelDims dims() const { return {vocab, d_emb, context, hidden}; }
    bool operator==(const ModelConfig&) const = default;
};

struct TaskConfig {
    int topics = 4;
    std::size_t corpus_size = 200;
    std::size_t shard_size = 40;
    std::size_t public_size = 30;
    std::size_t test_size = 10;
    double dirichlet_alpha = 0.3;
    bool operator==(const TaskConfig&) const = default;
};

struct RunConfig {
    Method method = Method::fedavg_grpo;
    int n_clients = 4;
    int tau = 4;
    int tau_swap = 2;
    int total_grpo_steps = 360;
    int K = 8;
    int batch_size = 8;
    int b_tilde = 0;  // 0 resolves to batch_size
    double eps_low = 0.2;
    double eps_high = 0.25;
    double kl_coef = 1e-4;
    double mu = 0.01;
    double lr = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adamw;
    double weight_decay = 0.01;
    double grad_clip_norm = 1.0;
    int n_grad_epochs = 2;
    int lora_rank = 4;
    double lora_alpha = 8.0;
    ModelConfig model;
    TaskConfig task;
    double temperature_rollout = 0.7;
    double temperature_eval = 0.7;
    int max_len = 4;
    int samples_per_prompt_eval = 16;
    int eval_every_rounds = 1;
    std::uint64_t global_seed = 0;
    DonorLogprobMode donor_logprob_mode = DonorLogprobMode::local;
    std::string output_dir = "out";
    int threads = 1;

    bool operator==(const RunConfig&) const = default;

    [[nodiscard]] int rounds() const { return (total_grpo_steps + tau - 1) / tau; }
    [[nodiscard]] int steps_in_round(int round) const { return std::min(tau, total_grpo_steps - round * tau); }

    [[nodiscard]] StepConfig step_config() const {
        StepConfig s;
        s.group_size = K;
        s.batch_size = batch_size;
        s.max_len = max_len;
        s.n_grad_epochs = n_grad_epochs;
        s.grpo = {eps_low, eps_high, kl_coef, temperature_rollout};
        return s;
    }

    [[nodiscard]] OptimizerOptions optimizer_options() const {
        OptimizerOptions o;
        o.kind = optimizer;
        o.lr = lr;
        o.weight_decay = weight_decay;
        o.grad_clip_norm = grad_clip_norm;
        return o;
    }

    [[nodiscard]] RoundConfig round_config() const {
        RoundConfig r;
        r.method = method;
        r.tau = tau;
        r.tau_swap = uses_pubswap(method) ? tau_swap : 0;
        r.b_tilde = static_cast<std::size_t>(b_tilde);
        r.mu = mu;
        r.step = step_config();
        r.donor_mode = donor_logprob_mode;
        r.seed = global_seed;
        r.threads = threads;
        return r;
    }
};

namespace detail {

template <class E>
struct EnumNames;

template <>
struct EnumNames<Method> {
    static constexpr std::pair<Method, std::string_view> table[] = {
        {Method::fedavg_grpo, "fedavg_grpo"},
        {Method::fedprox_grpo, "fedprox_grpo"},
        {Method::fedavg_pubswap_rand, "fedavg_pubswap_rand"},
        {Method::fedavg_pubswap_keep, "fedavg_pubswap_keep"},
    };
};

template <>
struct EnumNames<OptimizerKind> {
    static constexpr std::pair<OptimizerKind, std::string_view> table[] = {
        {OptimizerKind::adamw, "adamw"},
        {OptimizerKind::sgd, "sgd"},
    };
};

template <>
struct EnumNames<DonorLogprobMode> {
    static constexpr std::pair<DonorLogprobMode, std::string_view> table[] = {
        {DonorLogprobMode::local, "local"},
        {DonorLogprobMode::donor, "donor"},
    };
};

template <class E>
std::string enum_name(E v) {
    for (const auto& [e, name] : EnumNames<E>::table) {
        if (e == v) return std::string(name);
    }
    return "?";
}

template <class E>
E enum_from(const std::string& key, const nlohmann::json& j) {
    if (!j.is_string()) throw ConfigError(key, "expected a string");
    const auto s = j.get<std::string>();
    std::string options;
    for (const auto& [e, name] : EnumNames<E>::table) {
        if (name == s) return e;
        options += options.empty() ? "" : "|";
        options += name;
    }
    throw ConfigError(key, "unknown value '" + s + "' (expected " + options + ")");
}

template <class T>
nlohmann::json to_value(const T& v) {
    if constexpr (std::is_enum_v<T>) {
        return enum_name(v);
    } else {
        return v;
    }
}

template <class T>
void from_value(const std::string& key, const nlohmann::json& j, T& out) {
    if constexpr (std::is_enum_v<T>) {
        out = enum_from<T>(key, j);
    } else if constexpr (std::is_same_v<T, std::string>) {
        if (!j.is_string()) throw ConfigError(key, "expected a string");
        out = j.get<std::string>();
    } else if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) throw ConfigError(key, "expected a boolean");
        out = j.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
        if (!j.is_number_integer()) throw ConfigError(key, "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
            if (j.is_number_unsigned()) {
                out = j.get<T>();
            } else if (j.get<std::int64_t>() < 0) {
                throw ConfigError(key, "expected a non-negative integer");
            } else {
                out = static_cast<T>(j.get<std::int64_t>());
            }
        } else {
            out = j.get<T>();
        }
    } else {
        if (!j.is_number()) throw ConfigError(key, "expected a number");
        out = j.get<T>();
    }
}

/// Calls f(dotted_key, member) for every configurable field.
template <class Config, class F>
void visit_fields(Config& c, F&& f) {
    f("method", c.method);
    f("n_clients", c.n_clients);
    f("tau", c.tau);
    f("tau_swap", c.tau_swap);
    f("total_grpo_steps", c.total_grpo_steps);
    f("K", c.K);
    f("batch_size", c.batch_size);
    f("b_tilde", c.b_tilde);
    f("eps_low", c.eps_low);
    f("eps_high", c.eps_high);
    f("kl_coef", c.kl_coef);
    f("mu", c.mu);
    f("lr", c.lr);
    f("optimizer", c.optimizer);
    f("weight_decay", c.weight_decay);
    f("grad_clip_norm", c.grad_clip_norm);
    f("n_grad_epochs", c.n_grad_epochs);
    f("lora_rank", c.lora_rank);
    f("lora_alpha", c.lora_alpha);
    f("model.V", c.model.vocab);
    f("model.d_emb", c.model.d_emb);
    f("model.C", c.model.context);
    f("model.h", c.model.hidden);
    f("model.pretrain_steps", c.model.pretrain_steps);
    f("model.pretrain_batch", c.model.pretrain_batch);
    f("model.pretrain_lr", c.model.pretrain_lr);
    f("task.T", c.task.topics);
    f("task.corpus_size", c.task.corpus_size);
    f("task.shard_size", c.task.shard_size);
    f("task.public_size", c.task.public_size);
    f("task.test_size", c.task.test_size);
    f("task.dirichlet_alpha", c.task.dirichlet_alpha);
    f("temperature_rollout", c.temperature_rollout);
    f("temperature_eval", c.temperature_eval);
    f("max_len", c.max_len);
    f("samples_per_prompt_eval", c.samples_per_prompt_eval);
    f("eval_every_rounds", c.eval_every_rounds);
    f("global_seed", c.global_seed);
    f("donor_logprob_mode", c.donor_logprob_mode);
    f("output_dir", c.output_dir);
    f("threads", c.threads);
}

inline void flatten(const nlohmann::json& j, const std::string& prefix, std::map<std::string, nlohmann::json>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it.value().is_object() && (key == "model" || key == "task")) {
            flatten(it.value(), key, out);
        } else {
            out[key] = it.value();
        }
    }
}

}  // namespace detail

inline void validate(RunConfig& c) {
    auto require = [](bool ok, const char* key, const std::string& msg) {
        if (!ok) throw ConfigError(key, msg);
    };
    require(c.n_clients >= 1, "n_clients", "must be >= 1");
    require(c.tau >= 1, "tau", "must be >= 1");
    if (uses_pubswap(c.method)) {
        require(c.tau_swap >= 2 && c.tau_swap < c.tau, "tau_swap", "must be in [2, tau) for PubSwap methods");
    }
    require(c.total_grpo_steps >= 1, "total_grpo_steps", "must be >= 1");
    require(c.K >= 2, "K", "group size must be >= 2");
    require(c.batch_size >= 1, "batch_size", "must be >= 1");
    require(c.b_tilde >= 0, "b_tilde", "must be >= 0");
    if (c.b_tilde == 0) c.b_tilde = c.batch_size;
    require(c.eps_low > 0.0 && c.eps_low < 1.0, "eps_low", "must be in (0, 1)");
    require(c.eps_high > 0.0 && c.eps_high < 1.0, "eps_high", "must be in (0, 1)");
    require(c.kl_coef >= 0.0, "kl_coef", "must be >= 0");
    require(c.mu >= 0.0, "mu", "must be >= 0");
    require(c.lr > 0.0, "lr", "must be > 0");
    require(c.weight_decay >= 0.0, "weight_decay", "must be >= 0");
    require(c.n_grad_epochs >= 0, "n_grad_epochs", "must be >= 0");
    require(c.lora_alpha > 0.0, "lora_alpha", "must be > 0");
    require(c.model.vocab >= tok::min_task_vocab, "model.V", "must be >= 16 to hold digits, operators and specials");
    require(c.model.d_emb >= 1, "model.d_emb", "must be >= 1");
    require(c.model.context >= 1, "model.C", "must be >= 1");
    require(c.model.hidden >= 2, "model.h", "must be >= 2");
    require(c.model.pretrain_steps >= 0, "model.pretrain_steps", "must be >= 0");
    require(c.model.pretrain_batch >= 1, "model.pretrain_batch", "must be >= 1");
    require(c.model.pretrain_lr > 0.0, "model.pretrain_lr", "must be > 0");
    const int min_dim = std::min({c.model.hidden, c.model.vocab, c.model.context * c.model.d_emb});
    require(c.lora_rank >= 1 && c.lora_rank < min_dim, "lora_rank", "must be in [1, min layer dim)");
    require(c.task.topics >= 1 && c.task.topics <= static_cast<int>(kTopicTable.size()), "task.T",
            "must be in [1, " + std::to_string(kTopicTable.size()) + "]");
    require(c.task.dirichlet_alpha > 0.0, "task.dirichlet_alpha", "must be > 0");
    require(c.task.shard_size >= static_cast<std::size_t>(c.batch_size), "task.shard_size",
            "must be >= batch_size");
    require(c.task.test_size >= 1, "task.test_size", "must be >= 1");
    if (uses_pubswap(c.method)) {
        require(static_cast<std::size_t>(c.b_tilde) <= c.task.public_size, "b_tilde", "exceeds task.public_size");
    }
    const std::size_t need =
        static_cast<std::size_t>(c.n_clients) * c.task.shard_size + c.task.public_size + c.task.test_size;
    require(c.task.corpus_size >= need, "task.corpus_size",
            "must be >= n_clients*shard_size + public_size + test_size = " + std::to_string(need));
    require(c.task.corpus_size >= static_cast<std::size_t>(c.task.topics), "task.corpus_size", "must be >= task.T");
    require(c.temperature_rollout > 0.0, "temperature_rollout", "must be > 0");
    require(c.temperature_eval > 0.0, "temperature_eval", "must be > 0");
    require(c.max_len >= 2, "max_len", "must be >= 2");
    require(c.samples_per_prompt_eval >= 1, "samples_per_prompt_eval", "must be >= 1");
    require(c.eval_every_rounds >= 0, "eval_every_rounds", "must be >= 0");
    require(c.threads >= 1, "threads", "must be >= 1");
}

/// Parses an override value as JSON, falling back to a bare string.
inline nlohmann::json parse_override_value(const std::string& text) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        return text;
    }
}

/// Builds a validated config from a JSON document plus "key=value" overrides.
inline RunConfig config_from_json(const nlohmann::json& doc, const std::vector<std::string>& overrides = {}) {
    if (!doc.is_object()) throw ConfigError("", "config document must be a JSON object");
    std::map<std::string, nlohmann::json> flat;
    detail::flatten(doc, "", flat);

    RunConfig probe;
    std::map<std::string, bool> known;
    detail::visit_fields(probe, [&](const char* key, auto&) { known[key] = true; });
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError(ov, "override must have the form key=value");
        const std::string key = ov.substr(0, eq);
        if (!known.count(key)) throw ConfigError(key, "unknown key");
        flat[key] = parse_override_value(ov.substr(eq + 1));
    }

    RunConfig c;
    detail::visit_fields(c, [&](const char* key, auto& member) {
        auto it = flat.find(key);
        if (it == flat.end()) return;
        detail::from_value(key, it->second, member);
        flat.erase(it);
    });
    if (!flat.empty()) throw ConfigError(flat.begin()->first, "unknown key");
    validate(c);
    return c;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file '" + path + "'");
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("", "malformed JSON in '" + path + "': " + e.what());
    }
    return config_from_json(doc, overrides);
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    RunConfig c = cfg;
    nlohmann::json doc = nlohmann::json::object();
    detail::visit_fields(c, [&](const char* key, auto& member) {
        const std::string k = key;
        const auto dot = k.find('.');
        if (dot == std::string::npos) {
            doc[k] = detail::to_value(member);
        } else {
            doc[k.substr(0, dot)][k.substr(dot + 1)] = detail::to_value(member);
        }
    });
    return doc;
}

}  // namespace fedrlvr

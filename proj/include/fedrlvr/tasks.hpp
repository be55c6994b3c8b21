#pragma once

// Synthetic verifiable-reward tasks: modular arithmetic, one (operator, modulus)
// pair per topic. Prompt = [a, op, b, m], canonical answer = [(a op b) mod m].

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "fedrlvr/model.hpp"
#include "fedrlvr/rng.hpp"

namespace fedrlvr {

namespace tok {
constexpr TokenId add = 10;
constexpr TokenId sub = 11;
constexpr TokenId mul = 12;
constexpr int min_task_vocab = 16;
}  // namespace tok

struct Topic {
    TokenId op;
    int modulus;
};

inline constexpr std::array<Topic, 12> kTopicTable{{
    {tok::add, 6}, {tok::mul, 7}, {tok::sub, 8}, {tok::add, 9},
    {tok::mul, 6}, {tok::sub, 7}, {tok::add, 8}, {tok::mul, 9},
    {tok::sub, 6}, {tok::add, 7}, {tok::mul, 8}, {tok::sub, 9},
}};

struct TaskInstance {
    std::size_t id = 0;  // position in the generating corpus
    int topic = 0;
    std::vector<TokenId> prompt;
    std::vector<TokenId> answer;
};

/// Evaluates a well-formed prompt; returns -1 for anything else.
inline int evaluate_prompt(std::span<const TokenId> prompt) {
    if (prompt.size() != 4) return -1;
    const int a = prompt[0], b = prompt[2], m = prompt[3];
    const TokenId op = prompt[1];
    if (a > 9 || b > 9 || m < 2 || m > 9) return -1;
    switch (op) {
        case tok::add: return (a + b) % m;
        case tok::sub: return ((a - b) % m + m) % m;
        case tok::mul: return (a * b) % m;
        default: return -1;
    }
}

inline TaskInstance make_instance(int topic, int a, int b, std::size_t id = 0) {
    const Topic& t = kTopicTable.at(static_cast<std::size_t>(topic));
    TaskInstance inst;
    inst.id = id;
    inst.topic = topic;
    inst.prompt = {static_cast<TokenId>(a), t.op, static_cast<TokenId>(b), static_cast<TokenId>(t.modulus)};
    inst.answer = {static_cast<TokenId>(evaluate_prompt(inst.prompt))};
    return inst;
}

/// Exact-match reward: 1 iff the response, with trailing PAD removed, is the
/// canonical answer followed by EOS.
inline int verify(std::span<const TokenId> prompt, std::span<const TokenId> response,
                  int vocab = tok::min_task_vocab) {
    const auto sp = special_tokens(vocab);
    std::size_t n = response.size();
    while (n > 0 && response[n - 1] == sp.pad) --n;
    if (n == 0 || response[n - 1] != sp.eos) return 0;
    const int value = evaluate_prompt(prompt);
    if (value < 0) return 0;
    return (n == 2 && response[0] == static_cast<TokenId>(value)) ? 1 : 0;
}

struct ExactMatchVerifier {
    int vocab = tok::min_task_vocab;
    int operator()(std::span<const TokenId> prompt, std::span<const TokenId> response) const {
        return verify(prompt, response, vocab);
    }
};

/// `total` instances over topics 0..T-1, topic counts balanced within one,
/// operands uniform in [0, modulus), returned in shuffled order.
inline std::vector<TaskInstance> gen_corpus(int topics, std::size_t total, Rng& rng) {
    if (topics < 1 || topics > static_cast<int>(kTopicTable.size())) {
        throw std::invalid_argument("gen_corpus: topic count must be in [1, " + std::to_string(kTopicTable.size()) + "]");
    }
    if (total < static_cast<std::size_t>(topics)) {
        throw std::invalid_argument("gen_corpus: total " + std::to_string(total) + " is smaller than topic count " +
                                    std::to_string(topics));
    }
    const auto t_count = static_cast<std::size_t>(topics);
    std::vector<int> topic_of(total);
    for (std::size_t i = 0; i < total; ++i) topic_of[i] = static_cast<int>(i % t_count);
    std::shuffle(topic_of.begin(), topic_of.end(), rng);

    std::vector<TaskInstance> out;
    out.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        const int m = kTopicTable[static_cast<std::size_t>(topic_of[i])].modulus;
        const int a = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(m)));
        const int b = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(m)));
        out.push_back(make_instance(topic_of[i], a, b, i));
    }
    return out;
}

struct FederatedSplit {
    std::vector<std::vector<TaskInstance>> shards;
    std::vector<TaskInstance> public_set;
    std::vector<TaskInstance> test_set;
    std::vector<std::vector<double>> topic_proportions;  // N x T realized fractions
};

inline int topic_count(std::span<const TaskInstance> corpus) {
    int t = 0;
    for (const auto& inst : corpus) t = std::max(t, inst.topic + 1);
    return t;
}

inline std::vector<double> dirichlet_sample(double alpha, std::size_t dim, Rng& rng) {
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> p(dim);
    double sum = 0.0;
    for (auto& x : p) {
        x = gamma(rng);
        sum += x;
    }
    if (!(sum > 0.0)) {
        // every draw underflowed; all mass on one coordinate
        std::fill(p.begin(), p.end(), 0.0);
        p[uniform_index(rng, dim)] = 1.0;
        return p;
    }
    for (auto& x : p) x /= sum;
    return p;
}

/// Largest-remainder rounding of fractions * total to integers summing to total.
inline std::vector<std::size_t> apportion(std::span<const double> fractions, std::size_t total) {
    std::vector<std::size_t> counts(fractions.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        const double exact = fractions[i] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        rem.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    for (std::size_t j = 0; assigned < total && j < rem.size(); ++j, ++assigned) ++counts[rem[j].second];
    return counts;
}

/// Heterogeneous split into N equal shards plus public and test sets.
///
/// Public and test sets are drawn uniformly from the whole corpus first so they
/// follow the global topic mixture. Each client then gets a topic mixture from
/// Dirichlet(alpha * 1_T), turned into integer quotas; instances are handed out
/// topic by topic to the client with the largest unmet quota, and whatever
/// capacity is left is filled from the leftovers. With one client the quotas
/// follow the corpus mixture instead of a Dirichlet draw.
inline FederatedSplit dirichlet_partition(std::span<const TaskInstance> corpus, int n_clients, double alpha,
                                          std::size_t shard_size, std::size_t pub_size, std::size_t test_size,
                                          Rng& rng) {
    if (n_clients < 1) throw std::invalid_argument("dirichlet_partition: need at least one client");
    if (!(alpha > 0.0)) throw std::invalid_argument("dirichlet_partition: alpha must be positive");
    const auto n = static_cast<std::size_t>(n_clients);
    const std::size_t required = n * shard_size + pub_size + test_size;
    if (required > corpus.size()) {
        throw std::invalid_argument("dirichlet_partition: corpus has " + std::to_string(corpus.size()) +
                                    " instances, need " + std::to_string(n) + "*" + std::to_string(shard_size) +
                                    " + " + std::to_string(pub_size) + " + " + std::to_string(test_size) + " = " +
                                    std::to_string(required));
    }
    const auto topics = static_cast<std::size_t>(topic_count(corpus));

    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    FederatedSplit split;
    std::size_t pos = 0;
    for (; pos < pub_size; ++pos) split.public_set.push_back(corpus[order[pos]]);
    for (; pos < pub_size + test_size; ++pos) split.test_set.push_back(corpus[order[pos]]);

    std::vector<std::vector<std::size_t>> pool(topics);
    for (; pos < order.size(); ++pos) pool[static_cast<std::size_t>(corpus[order[pos]].topic)].push_back(order[pos]);

    std::vector<std::vector<std::size_t>> quota(n);
    if (n == 1) {
        std::vector<double> frac(topics, 0.0);
        for (const auto& inst : corpus) frac[static_cast<std::size_t>(inst.topic)] += 1.0;
        for (auto& f : frac) f /= static_cast<double>(corpus.size());
        quota[0] = apportion(frac, shard_size);
    } else {
        for (std::size_t c = 0; c < n; ++c) quota[c] = apportion(dirichlet_sample(alpha, topics, rng), shard_size);
    }

    std::vector<std::vector<std::size_t>> assigned(n);
    std::vector<std::vector<std::size_t>> got(n, std::vector<std::size_t>(topics, 0));
    std::vector<std::size_t> leftovers;
    for (std::size_t t = 0; t < topics; ++t) {
        for (std::size_t idx : pool[t]) {
            std::size_t best = n;
            std::ptrdiff_t best_unmet = 0;
            for (std::size_t c = 0; c < n; ++c) {
                if (assigned[c].size() >= shard_size) continue;
                const auto unmet = static_cast<std::ptrdiff_t>(quota[c][t]) - static_cast<std::ptrdiff_t>(got[c][t]);
                if (unmet > best_unmet) {
                    best_unmet = unmet;
                    best = c;
                }
            }
            if (best == n) {
                leftovers.push_back(idx);
            } else {
                assigned[best].push_back(idx);
                ++got[best][t];
            }
        }
    }
    std::shuffle(leftovers.begin(), leftovers.end(), rng);
    std::size_t li = 0;
    while (true) {
        std::size_t best = n;
        std::size_t best_room = 0;
        for (std::size_t c = 0; c < n; ++c) {
            const std::size_t room = shard_size - assigned[c].size();
            if (room > best_room) {
                best_room = room;
                best = c;
            }
        }
        if (best == n) break;
        assigned[best].push_back(leftovers.at(li++));
    }

    split.shards.resize(n);
    split.topic_proportions.assign(n, std::vector<double>(topics, 0.0));
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t idx : assigned[c]) {
            split.shards[c].push_back(corpus[idx]);
            split.topic_proportions[c][static_cast<std::size_t>(corpus[idx].topic)] += 1.0;
        }
        if (shard_size > 0) {
            for (auto& f : split.topic_proportions[c]) f /= static_cast<double>(shard_size);
        }
    }
    return split;
}

/// Mean total-variation distance between client topic distributions.
inline double mean_pairwise_tv(const FederatedSplit& split) {
    const auto& p = split.topic_proportions;
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t j = i + 1; j < p.size(); ++j) {
            double tv = 0.0;
            for (std::size_t t = 0; t < p[i].size(); ++t) tv += std::abs(p[i][t] - p[j][t]);
            sum += 0.5 * tv;
            ++pairs;
        }
    }
    return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

// Line format: topic_id<TAB>prompt ids (comma-separated)<TAB>answer ids (comma-separated)

inline void write_instances(std::ostream& os, std::span<const TaskInstance> instances) {
    auto join = [&os](const std::vector<TokenId>& ids) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) os << ',';
            os << ids[i];
        }
    };
    for (const auto& inst : instances) {
        os << inst.topic << '\t';
        join(inst.prompt);
        os << '\t';
        join(inst.answer);
        os << '\n';
    }
}

inline std::vector<TaskInstance> read_instances(std::istream& is) {
    auto parse_ids = [](const std::string& field, std::size_t line_no) {
        std::vector<TokenId> ids;
        std::stringstream ss(field);
        std::string item;
        while (std::getline(ss, item, ',')) {
            unsigned v = 0;
            const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
            if (ec != std::errc{} || end != item.data() + item.size() || v > 0xFFFF) {
                throw std::runtime_error("line " + std::to_string(line_no) + ": bad token id '" + item + "'");
            }
            ids.push_back(static_cast<TokenId>(v));
        }
        return ids;
    };
    std::vector<TaskInstance> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string topic, prompt, answer;
        if (!std::getline(ss, topic, '\t') || !std::getline(ss, prompt, '\t') || !std::getline(ss, answer)) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": expected three tab-separated fields");
        }
        TaskInstance inst;
        inst.id = out.size();
        const auto [end, ec] = std::from_chars(topic.data(), topic.data() + topic.size(), inst.topic);
        if (ec != std::errc{} || end != topic.data() + topic.size()) {
            throw std::runtime_error("line " + std::to_string(line_no) + ": bad topic '" + topic + "'");
        }
        inst.prompt = parse_ids(prompt, line_no);
        inst.answer = parse_ids(answer, line_no);
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace fedrlvr

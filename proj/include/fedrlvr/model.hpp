#pragma once

// Toy autoregressive policy: a fixed window of token embeddings feeds one tanh
// hidden layer and an output head. Both linear maps are frozen base matrices
// plus trainable low-rank (LoRA) factors; all learning happens in the factors.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedrlvr/rng.hpp"

namespace fedrlvr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using TokenId = std::uint16_t;

/// Reserved ids occupy the top of the vocabulary.
struct SpecialTokens {
    TokenId bos;
    TokenId eos;
    TokenId pad;
};

constexpr SpecialTokens special_tokens(int vocab) {
    return {static_cast<TokenId>(vocab - 3), static_cast<TokenId>(vocab - 2), static_cast<TokenId>(vocab - 1)};
}

struct ModelDims {
    int vocab = 16;
    int d_emb = 16;
    int context = 6;
    int hidden = 64;

    [[nodiscard]] int input_width() const { return context * d_emb; }
    bool operator==(const ModelDims&) const = default;
};

/// Trainable part of one LoRA layer.
struct FactorPair {
    Matrix a;  // r x d
    Matrix b;  // m x r
};

/// Per-layer (A, B) pairs. Also used for gradients and optimizer moments, which
/// share the factor shapes.
struct LoraFactors {
    std::vector<FactorPair> layers;

    [[nodiscard]] static LoraFactors zeros_like(const LoraFactors& other) {
        LoraFactors out;
        out.layers.reserve(other.layers.size());
        for (const auto& p : other.layers) {
            out.layers.push_back({Matrix::Zero(p.a.rows(), p.a.cols()), Matrix::Zero(p.b.rows(), p.b.cols())});
        }
        return out;
    }

    [[nodiscard]] bool same_shape(const LoraFactors& other) const {
        if (layers.size() != other.layers.size()) return false;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& x = layers[i];
            const auto& y = other.layers[i];
            if (x.a.rows() != y.a.rows() || x.a.cols() != y.a.cols() || x.b.rows() != y.b.rows() ||
                x.b.cols() != y.b.cols()) {
                return false;
            }
        }
        return true;
    }

    [[nodiscard]] double squared_norm() const {
        double s = 0.0;
        for (const auto& p : layers) s += p.a.squaredNorm() + p.b.squaredNorm();
        return s;
    }

    [[nodiscard]] std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& p : layers) n += static_cast<std::size_t>(p.a.size() + p.b.size());
        return n;
    }

    LoraFactors& operator+=(const LoraFactors& other) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].a += other.layers[i].a;
            layers[i].b += other.layers[i].b;
        }
        return *this;
    }

    LoraFactors& operator*=(double s) {
        for (auto& p : layers) {
            p.a *= s;
            p.b *= s;
        }
        return *this;
    }

    bool operator==(const LoraFactors& other) const {
        if (!same_shape(other)) return false;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].a != other.layers[i].a || layers[i].b != other.layers[i].b) return false;
        }
        return true;
    }
};

using Gradients = LoraFactors;

/// Frozen m x d base plus trainable rank-r update scale * B * A.
class LoraLinear {
public:
    LoraLinear(std::shared_ptr<const Matrix> base, FactorPair factors, double scale)
        : base_(std::move(base)), factors_(std::move(factors)), scale_(scale) {
        if (!base_) throw std::invalid_argument("LoraLinear: null base matrix");
        const auto m = base_->rows();
        const auto d = base_->cols();
        const auto r = factors_.a.rows();
        if (r < 1 || r >= std::min(m, d)) {
            throw std::invalid_argument("LoraLinear: rank " + std::to_string(r) + " must be in [1, min(m,d))");
        }
        if (factors_.a.cols() != d || factors_.b.rows() != m || factors_.b.cols() != r) {
            throw std::invalid_argument("LoraLinear: factor shapes do not match base " + std::to_string(m) + "x" +
                                        std::to_string(d));
        }
    }

    /// Standard initialization: B = 0 so the layer starts at its base weights.
    static LoraLinear with_zero_b(std::shared_ptr<const Matrix> base, Matrix a, double scale) {
        const auto m = base ? base->rows() : 0;
        const auto r = a.rows();
        return LoraLinear(std::move(base), FactorPair{std::move(a), Matrix::Zero(m, r)}, scale);
    }

    [[nodiscard]] const Matrix& base() const { return *base_; }
    [[nodiscard]] const std::shared_ptr<const Matrix>& shared_base() const { return base_; }
    [[nodiscard]] const FactorPair& factors() const { return factors_; }
    /// Element-wise mutation only; shapes are fixed at construction.
    [[nodiscard]] FactorPair& factors() { return factors_; }
    [[nodiscard]] double scale() const { return scale_; }
    [[nodiscard]] Eigen::Index rank() const { return factors_.a.rows(); }
    [[nodiscard]] Eigen::Index rows() const { return base_->rows(); }
    [[nodiscard]] Eigen::Index cols() const { return base_->cols(); }

    void set_factors(const FactorPair& f) {
        if (f.a.rows() != factors_.a.rows() || f.a.cols() != factors_.a.cols() || f.b.rows() != factors_.b.rows() ||
            f.b.cols() != factors_.b.cols()) {
            throw std::invalid_argument("LoraLinear::set_factors: shape mismatch");
        }
        factors_ = f;
    }

private:
    std::shared_ptr<const Matrix> base_;
    FactorPair factors_;
    double scale_;
};

inline Matrix effective_weight(const LoraLinear& layer) {
    return layer.base() + layer.scale() * (layer.factors().b * layer.factors().a);
}

/// Frozen embeddings + two LoRA layers. Copies share the frozen matrices.
class PolicyParams {
public:
    static constexpr std::size_t kLayers = 2;

    PolicyParams(ModelDims dims, std::shared_ptr<const Matrix> embeddings, LoraLinear hidden, LoraLinear head)
        : dims_(dims), embeddings_(std::move(embeddings)), layers_{std::move(hidden), std::move(head)} {
        if (!embeddings_ || embeddings_->rows() != dims_.vocab || embeddings_->cols() != dims_.d_emb) {
            throw std::invalid_argument("PolicyParams: embeddings must be vocab x d_emb");
        }
        if (layers_[0].rows() != dims_.hidden || layers_[0].cols() != dims_.input_width()) {
            throw std::invalid_argument("PolicyParams: hidden layer must be hidden x (context*d_emb)");
        }
        if (layers_[1].rows() != dims_.vocab || layers_[1].cols() != dims_.hidden) {
            throw std::invalid_argument("PolicyParams: head must be vocab x hidden");
        }
    }

    [[nodiscard]] const ModelDims& dims() const { return dims_; }
    [[nodiscard]] const Matrix& embeddings() const { return *embeddings_; }
    [[nodiscard]] const LoraLinear& layer(std::size_t i) const { return layers_.at(i); }
    [[nodiscard]] LoraLinear& layer(std::size_t i) { return layers_.at(i); }
    [[nodiscard]] SpecialTokens specials() const { return special_tokens(dims_.vocab); }

    [[nodiscard]] LoraFactors factors() const {
        LoraFactors f;
        for (const auto& l : layers_) f.layers.push_back(l.factors());
        return f;
    }

    void set_factors(const LoraFactors& f) {
        if (f.layers.size() != kLayers) throw std::invalid_argument("PolicyParams::set_factors: layer count mismatch");
        for (std::size_t i = 0; i < kLayers; ++i) layers_[i].set_factors(f.layers[i]);
    }

    /// (m, d) of every LoRA layer, in order.
    [[nodiscard]] std::vector<std::pair<int, int>> layer_dims() const {
        std::vector<std::pair<int, int>> out;
        for (const auto& l : layers_) out.emplace_back(static_cast<int>(l.rows()), static_cast<int>(l.cols()));
        return out;
    }

    /// True when both parameter sets point at the same frozen tensors.
    [[nodiscard]] bool shares_frozen(const PolicyParams& other) const {
        return embeddings_ == other.embeddings_ && layers_[0].shared_base() == other.layers_[0].shared_base() &&
               layers_[1].shared_base() == other.layers_[1].shared_base();
    }

    /// Same frozen parts, factors replaced by B = 0 (the reference policy).
    [[nodiscard]] PolicyParams with_zero_update() const {
        PolicyParams p = *this;
        for (auto& l : p.layers_) l.factors().b.setZero();
        return p;
    }

private:
    ModelDims dims_;
    std::shared_ptr<const Matrix> embeddings_;
    std::array<LoraLinear, kLayers> layers_;
};

struct Response {
    static constexpr int kSelf = -1;

    std::vector<TokenId> tokens;
    std::vector<double> behavior_logprobs;
    int generator = kSelf;       // client id that sampled it
    std::uint32_t slot = 0;      // index within the generator's K-group
    std::size_t prompt_ref = 0;  // id of the prompt it answers
};

struct DenseWeights {
    Matrix hidden;
    Matrix head;
};

/// Fills `window` with the last C tokens of prompt ++ prefix, left-padded with BOS.
inline void build_context(std::span<const TokenId> prompt, std::span<const TokenId> prefix, TokenId bos,
                          std::span<TokenId> window) {
    const std::size_t c = window.size();
    const std::size_t total = prompt.size() + prefix.size();
    for (std::size_t i = 0; i < c; ++i) {
        // position in the virtual sequence, counted from the window start
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(total) - static_cast<std::ptrdiff_t>(c) +
                                   static_cast<std::ptrdiff_t>(i);
        if (pos < 0) {
            window[i] = bos;
        } else if (static_cast<std::size_t>(pos) < prompt.size()) {
            window[i] = prompt[static_cast<std::size_t>(pos)];
        } else {
            window[i] = prefix[static_cast<std::size_t>(pos) - prompt.size()];
        }
    }
}

inline Vector log_softmax(const Vector& logits, double temperature) {
    Vector z = logits / temperature;
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    return z.array() - lse;
}

/// Dense evaluator built once per parameter snapshot; effective weights are
/// materialized so per-token cost is two mat-vecs.
class DensePolicy {
public:
    DensePolicy(const Matrix& embeddings, DenseWeights weights, ModelDims dims)
        : embeddings_(&embeddings), w_(std::move(weights)), dims_(dims) {}

    explicit DensePolicy(const PolicyParams& p)
        : DensePolicy(p.embeddings(), DenseWeights{effective_weight(p.layer(0)), effective_weight(p.layer(1))},
                      p.dims()) {}

    [[nodiscard]] const ModelDims& dims() const { return dims_; }
    [[nodiscard]] const DenseWeights& weights() const { return w_; }

    [[nodiscard]] Vector input(std::span<const TokenId> window) const {
        Vector x(dims_.input_width());
        for (std::size_t i = 0; i < window.size(); ++i) {
            x.segment(static_cast<Eigen::Index>(i) * dims_.d_emb, dims_.d_emb) = embeddings_->row(window[i]).transpose();
        }
        return x;
    }

    [[nodiscard]] Vector logits(std::span<const TokenId> window) const {
        return w_.head * (w_.hidden * input(window)).array().tanh().matrix();
    }

    /// Adds weight * d log softmax(logits/T)[token] / d(W_hidden, W_head) into `grads`.
    /// Returns the log-probability.
    double accumulate_logprob_grad(std::span<const TokenId> window, TokenId token, double temperature, double weight,
                                   DenseWeights& grads) const {
        const Vector x = input(window);
        const Vector h = (w_.hidden * x).array().tanh().matrix();
        const Vector lp = log_softmax(w_.head * h, temperature);
        if (weight != 0.0) {
            Vector g_logits = -lp.array().exp();
            g_logits[token] += 1.0;
            g_logits *= weight / temperature;
            grads.head.noalias() += g_logits * h.transpose();
            const Vector g_z = ((w_.head.transpose() * g_logits).array() * (1.0 - h.array().square())).matrix();
            grads.hidden.noalias() += g_z * x.transpose();
        }
        return lp[token];
    }

    [[nodiscard]] DenseWeights zero_grads() const {
        return {Matrix::Zero(w_.hidden.rows(), w_.hidden.cols()), Matrix::Zero(w_.head.rows(), w_.head.cols())};
    }

private:
    const Matrix* embeddings_;
    DenseWeights w_;
    ModelDims dims_;
};

/// Untempered next-token logits for a C-token window.
inline Vector forward_logits(const PolicyParams& params, std::span<const TokenId> window) {
    return DensePolicy(params).logits(window);
}

/// Per-token log-probabilities of `response` under the tempered distribution.
inline std::vector<double> token_logprobs(const DensePolicy& policy, std::span<const TokenId> prompt,
                                          std::span<const TokenId> response, double temperature) {
    const auto bos = special_tokens(policy.dims().vocab).bos;
    std::vector<TokenId> window(static_cast<std::size_t>(policy.dims().context));
    std::vector<double> out;
    out.reserve(response.size());
    for (std::size_t t = 0; t < response.size(); ++t) {
        build_context(prompt, response.first(t), bos, window);
        out.push_back(log_softmax(policy.logits(window), temperature)[response[t]]);
    }
    return out;
}

inline std::vector<double> token_logprobs(const PolicyParams& params, std::span<const TokenId> prompt,
                                          std::span<const TokenId> response, double temperature) {
    return token_logprobs(DensePolicy(params), prompt, response, temperature);
}

/// Samples K responses token by token until EOS or max_len.
inline std::vector<Response> sample_responses(const DensePolicy& policy, std::span<const TokenId> prompt, int group_size,
                                              double temperature, int max_len, Rng& rng, int generator = Response::kSelf,
                                              std::size_t prompt_ref = 0) {
    if (group_size < 1) throw std::invalid_argument("sample_responses: group size must be positive");
    if (!(temperature > 0.0)) throw std::invalid_argument("sample_responses: temperature must be > 0");
    const auto specials = special_tokens(policy.dims().vocab);
    std::vector<TokenId> window(static_cast<std::size_t>(policy.dims().context));
    std::vector<Response> out(static_cast<std::size_t>(group_size));
    for (std::size_t k = 0; k < out.size(); ++k) {
        Response& r = out[k];
        r.generator = generator;
        r.slot = static_cast<std::uint32_t>(k);
        r.prompt_ref = prompt_ref;
        while (static_cast<int>(r.tokens.size()) < max_len) {
            build_context(prompt, r.tokens, specials.bos, window);
            const Vector lp = log_softmax(policy.logits(window), temperature);
            const double u = uniform01(rng);
            double cum = 0.0;
            Eigen::Index pick = lp.size() - 1;
            for (Eigen::Index v = 0; v < lp.size(); ++v) {
                cum += std::exp(lp[v]);
                if (u < cum) {
                    pick = v;
                    break;
                }
            }
            // Guard against the rounding tail landing on a zero-probability token.
            while (pick > 0 && std::exp(lp[pick]) == 0.0) --pick;
            r.tokens.push_back(static_cast<TokenId>(pick));
            r.behavior_logprobs.push_back(lp[pick]);
            if (r.tokens.back() == specials.eos) break;
        }
    }
    return out;
}

inline std::vector<Response> sample_responses(const PolicyParams& params, std::span<const TokenId> prompt,
                                              int group_size, double temperature, int max_len, Rng& rng,
                                              int generator = Response::kSelf, std::size_t prompt_ref = 0) {
    return sample_responses(DensePolicy(params), prompt, group_size, temperature, max_len, rng, generator, prompt_ref);
}

/// Maps dense effective-weight gradients onto the LoRA factors:
/// dA = s * B^T dW, dB = s * dW * A^T.
inline Gradients chain_to_factors(const PolicyParams& params, const DenseWeights& dense) {
    Gradients g;
    const std::array<const Matrix*, 2> dw{&dense.hidden, &dense.head};
    for (std::size_t i = 0; i < PolicyParams::kLayers; ++i) {
        const auto& layer = params.layer(i);
        const auto& f = layer.factors();
        g.layers.push_back({layer.scale() * (f.b.transpose() * *dw[i]), layer.scale() * (*dw[i] * f.a.transpose())});
    }
    return g;
}

struct InitOptions {
    int lora_rank = 4;
    double lora_alpha = 8.0;
};

/// Random frozen embeddings and base weights, A ~ U[-1/sqrt(d_in), 1/sqrt(d_in)], B = 0.
/// The PAD embedding row is zero.
inline DenseWeights init_base_weights(const ModelDims& dims, Rng& rng, Matrix& embeddings) {
    std::normal_distribution<double> normal(0.0, 1.0);
    embeddings = Matrix::NullaryExpr(dims.vocab, dims.d_emb, [&] { return normal(rng); });
    embeddings.row(special_tokens(dims.vocab).pad).setZero();
    const double s1 = 1.0 / std::sqrt(static_cast<double>(dims.input_width()));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
    DenseWeights w;
    w.hidden = Matrix::NullaryExpr(dims.hidden, dims.input_width(), [&] { return s1 * normal(rng); });
    w.head = Matrix::NullaryExpr(dims.vocab, dims.hidden, [&] { return s2 * normal(rng); });
    return w;
}

inline PolicyParams make_policy(const ModelDims& dims, Matrix embeddings, DenseWeights base, const InitOptions& lora,
                                Rng& rng) {
    const double scale = lora.lora_alpha / lora.lora_rank;
    auto make_a = [&](Eigen::Index d_in) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
        return Matrix(Matrix::NullaryExpr(lora.lora_rank, d_in, [&] { return bound * (2.0 * uniform01(rng) - 1.0); }));
    };
    Matrix a1 = make_a(dims.input_width());
    Matrix a2 = make_a(dims.hidden);
    auto emb = std::make_shared<const Matrix>(std::move(embeddings));
    auto hidden = LoraLinear::with_zero_b(std::make_shared<const Matrix>(std::move(base.hidden)), std::move(a1), scale);
    auto head = LoraLinear::with_zero_b(std::make_shared<const Matrix>(std::move(base.head)), std::move(a2), scale);
    return PolicyParams(dims, std::move(emb), std::move(hidden), std::move(head));
}

/// Random policy with untrained base weights.
inline PolicyParams init_policy(const ModelDims& dims, const InitOptions& lora, Rng& rng) {
    Matrix emb;
    DenseWeights base = init_base_weights(dims, rng, emb);
    return make_policy(dims, std::move(emb), std::move(base), lora, rng);
}

}  // namespace fedrlvr

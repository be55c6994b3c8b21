#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "fedrlvr/model.hpp"

namespace fedrlvr {

enum class OptimizerKind { adamw, sgd };

struct OptimizerOptions {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double grad_clip_norm = 1.0;  // <= 0 disables clipping
};

/// AdamW moments for the LoRA factors. Reset to zero at every broadcast.
struct OptimizerState {
    OptimizerOptions options;
    LoraFactors first_moment;
    LoraFactors second_moment;
    long step = 0;

    void reset(const LoraFactors& shape) {
        first_moment = LoraFactors::zeros_like(shape);
        second_moment = LoraFactors::zeros_like(shape);
        step = 0;
    }

    [[nodiscard]] bool is_zero() const {
        return step == 0 && first_moment.squared_norm() == 0.0 && second_moment.squared_norm() == 0.0;
    }
};

inline void check_finite(const Gradients& grads) {
    for (std::size_t i = 0; i < grads.layers.size(); ++i) {
        if (!grads.layers[i].a.allFinite()) {
            throw std::domain_error("non-finite gradient in layer " + std::to_string(i) + " factor A");
        }
        if (!grads.layers[i].b.allFinite()) {
            throw std::domain_error("non-finite gradient in layer " + std::to_string(i) + " factor B");
        }
    }
}

/// Rescales `grads` in place so its global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(Gradients& grads, double max_norm) {
    const double norm = std::sqrt(grads.squared_norm());
    if (max_norm > 0.0 && norm > max_norm) grads *= max_norm / norm;
    return norm;
}

/// One ascent step on the LoRA factors of `params`. Weight decay is decoupled
/// and touches only the factors; frozen matrices are never written.
inline void optimizer_step(OptimizerState& state, PolicyParams& params, Gradients grads) {
    check_finite(grads);
    const auto& opt = state.options;
    clip_global_norm(grads, opt.grad_clip_norm);
    if (state.first_moment.layers.empty()) state.reset(params.factors());
    if (!grads.same_shape(params.factors()) || !state.first_moment.same_shape(params.factors()) ||
        !state.second_moment.same_shape(params.factors())) {
        throw std::invalid_argument("optimizer_step: gradient or state shape does not match the parameters");
    }
    ++state.step;

    const double decay = 1.0 - opt.lr * opt.weight_decay;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));

    auto update = [&](Matrix& w, const Matrix& g, Matrix& m, Matrix& v) {
        if (opt.weight_decay != 0.0) w *= decay;
        if (opt.kind == OptimizerKind::sgd) {
            w.noalias() += opt.lr * g;
            return;
        }
        m = opt.beta1 * m + (1.0 - opt.beta1) * g;
        v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
        w.array() += opt.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt.eps);
    };

    for (std::size_t i = 0; i < PolicyParams::kLayers; ++i) {
        auto& f = params.layer(i).factors();
        update(f.a, grads.layers[i].a, state.first_moment.layers[i].a, state.second_moment.layers[i].a);
        update(f.b, grads.layers[i].b, state.first_moment.layers[i].b, state.second_moment.layers[i].b);
    }
}

}  // namespace fedrlvr

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "blockgrad/errors.hpp"
#include "blockgrad/model.hpp"
#include "blockgrad/tensor.hpp"

namespace blockgrad {

struct AdamConfig {
    double eta = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Eq-style processed gradients come in two flavors: standard Adam with
    // bias correction (default), or the literal M/sqrt(V+eps) form.
    bool bias_correction = true;
};

/// Adam moments held only for the currently selected layers. Keys are
/// registry indices; everything else carries no state at all, which is what
/// makes the optimizer-state scalar count 2 * sum(count(l) for l in S).
template <typename S>
class AdamState {
public:
    AdamState() = default;
    explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }

    /// Discards all moments and re-seeds zeroed state for exactly new_s.
    /// There is deliberately no carry-over for layers present in both sets.
    void reset(const LayerRegistry<S>& registry, const std::vector<int>& new_s) {
        slots_.assign(registry.size(), Slot{});
        for (int idx : new_s) {
            if (idx < 0 || idx >= static_cast<int>(registry.size())) {
                throw StateError("reset_states: layer index " + std::to_string(idx) +
                                 " outside registry");
            }
            Slot& s = slots_[static_cast<std::size_t>(idx)];
            s.present = true;
            s.m.assign(registry[static_cast<std::size_t>(idx)].count, S(0));
            s.v.assign(registry[static_cast<std::size_t>(idx)].count, S(0));
            s.step = 0;
        }
    }

    bool holds(int layer_idx) const {
        return layer_idx >= 0 && layer_idx < static_cast<int>(slots_.size()) &&
               slots_[static_cast<std::size_t>(layer_idx)].present;
    }

    long step_of(int layer_idx) const { return slots_.at(static_cast<std::size_t>(layer_idx)).step; }

    /// M/V scalars currently held.
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const Slot& s : slots_) n += s.m.size() + s.v.size();
        return n;
    }

    /// One Adam moment update for a selected layer; returns the processed
    /// gradient G~. Raw: M = b1*M + (1-b1)*G, V = b2*V + (1-b2)*G^2, then
    /// either Mhat/(sqrt(Vhat)+eps) with hat = bias correction, or the
    /// literal M/sqrt(V+eps) when correction is disabled.
    std::vector<S> step_layer(int layer_idx, std::span<const S> grad) {
        if (!holds(layer_idx)) {
            throw StateError("adam_step_layer: layer index " + std::to_string(layer_idx) +
                             " is not in the selected set (optimizer/selection desync)");
        }
        Slot& s = slots_[static_cast<std::size_t>(layer_idx)];
        if (grad.size() != s.m.size()) {
            throw ShapeError("adam_step_layer: gradient size " + std::to_string(grad.size()) +
                             " vs state size " + std::to_string(s.m.size()));
        }
        s.step += 1;
        const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
        const S eps = static_cast<S>(cfg_.eps);
        std::vector<S> out(grad.size());
        if (cfg_.bias_correction) {
            const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(s.step)));
            const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(s.step)));
            for (std::size_t i = 0; i < grad.size(); ++i) {
                const S gi = grad[i];
                s.m[i] = b1 * s.m[i] + (S(1) - b1) * gi;
                s.v[i] = b2 * s.v[i] + (S(1) - b2) * gi * gi;
                const S mhat = s.m[i] / c1;
                const S vhat = s.v[i] / c2;
                out[i] = mhat / (std::sqrt(vhat) + eps);
            }
        } else {
            for (std::size_t i = 0; i < grad.size(); ++i) {
                const S gi = grad[i];
                s.m[i] = b1 * s.m[i] + (S(1) - b1) * gi;
                s.v[i] = b2 * s.v[i] + (S(1) - b2) * gi * gi;
                out[i] = s.m[i] / std::sqrt(s.v[i] + eps);
            }
        }
        return out;
    }

private:
    struct Slot {
        bool present = false;
        std::vector<S> m, v;
        long step = 0;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
};

/// W -= eta * (mask ⊙ gtilde). Masked-out entries are left bit-identical.
template <typename S>
void masked_update(Tensor<S>& weights, std::span<const S> gtilde,
                   std::span<const std::uint8_t> mask, double eta) {
    if (gtilde.size() != weights.size() || mask.size() != weights.size()) {
        throw ShapeError("masked_update: size mismatch (w " + std::to_string(weights.size()) +
                         ", g " + std::to_string(gtilde.size()) + ", mask " +
                         std::to_string(mask.size()) + ")");
    }
    auto w = weights.data();
    const S lr = static_cast<S>(eta);
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (mask[i]) w[i] -= lr * gtilde[i];
    }
}

}  // namespace blockgrad

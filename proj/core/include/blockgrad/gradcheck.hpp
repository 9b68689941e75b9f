#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "blockgrad/errors.hpp"
#include "blockgrad/tensor.hpp"

namespace blockgrad {

/// Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per element.
/// Perturbs x in place and restores it; f must be a pure function of x.
template <typename S>
Tensor<S> finite_diff_grad(const std::function<S(const Tensor<S>&)>& f, Tensor<S> x, S h) {
    if (!(h > S(0))) throw ContractError("finite_diff_grad: h must be positive");
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const S saved = xd[i];
        xd[i] = saved + h;
        const S fp = f(x);
        xd[i] = saved - h;
        const S fm = f(x);
        xd[i] = saved;
        out.data()[i] = (fp - fm) / (S(2) * h);
    }
    return out;
}

/// Worst per-element relative error between two gradient vectors. Elements
/// where both magnitudes are below `floor` compare on absolute error against
/// the floor instead, so near-zero components do not dominate.
template <typename A, typename B>
double max_rel_err(std::span<const A> got, std::span<const B> want, double floor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double a = static_cast<double>(got[i]);
        const double b = static_cast<double>(want[i]);
        const double denom = std::max({std::abs(a), std::abs(b), floor});
        worst = std::max(worst, std::abs(a - b) / denom);
    }
    return worst;
}

/// ||got - want||_2 / ||want||_2 (0/0 counts as 0).
template <typename A, typename B>
double norm_rel_err(std::span<const A> got, std::span<const B> want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double a = static_cast<double>(got[i]);
        const double b = static_cast<double>(want[i]);
        num += (a - b) * (a - b);
        den += b * b;
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::sqrt(num);
    return std::sqrt(num / den);
}

}  // namespace blockgrad

#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "blockgrad/errors.hpp"

namespace blockgrad {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename S>
class Graph;

/// Dense row-major tensor handle with value-shared storage. Copies alias the
/// same buffer; the tape holds copies of its operands, which keeps forward
/// values alive for the backward pass. The grad buffer is allocated lazily
/// and only for tensors that request it (requires_grad leaves), which is how
/// the trainer avoids materializing gradients for frozen layers.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        check_shape(shape);
        Tensor t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = std::move(shape);
        t.st_->data.assign(shape_numel(t.st_->shape), S(0));
        return t;
    }

    static Tensor full(Shape shape, S v) {
        Tensor t = zeros(std::move(shape));
        for (S& x : t.st_->data) x = v;
        return t;
    }

    static Tensor from(Shape shape, std::vector<S> values) {
        check_shape(shape);
        if (values.size() != shape_numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.st_ = std::make_shared<Storage>();
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(values);
        return t;
    }

    static Tensor scalar(S v) { return from({1}, {v}); }

    bool valid() const { return st_ != nullptr; }
    const Shape& shape() const { return st_->shape; }
    int rank() const { return static_cast<int>(st_->shape.size()); }
    int dim(int i) const { return st_->shape[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return st_->data.size(); }

    std::span<S> data() { return st_->data; }
    std::span<const S> data() const { return st_->data; }

    bool requires_grad() const { return st_->requires_grad; }
    void set_requires_grad(bool v) { st_->requires_grad = v; }

    bool has_grad() const { return !st_->grad.empty(); }
    void ensure_grad() {
        if (st_->grad.empty()) st_->grad.assign(st_->data.size(), S(0));
    }
    std::span<S> grad() {
        ensure_grad();
        return st_->grad;
    }
    std::span<const S> grad() const { return st_->grad; }
    void zero_grad() {
        for (S& g : st_->grad) g = S(0);
    }
    void drop_grad() {
        st_->grad.clear();
        st_->grad.shrink_to_fit();
    }

    S item() const {
        if (size() != 1) {
            throw ContractError("item() on tensor of size " + std::to_string(size()));
        }
        return st_->data[0];
    }

    S at(int i) const { return st_->data[static_cast<std::size_t>(i)]; }
    S at(int i, int j) const {
        return st_->data[static_cast<std::size_t>(i) * dim(1) + j];
    }

    /// Producing tape node, or -1 for leaves.
    int node() const { return node_; }

    /// Storage identity; stable across handle copies.
    const void* id() const { return st_.get(); }

private:
    struct Storage {
        Shape shape;
        std::vector<S> data;
        std::vector<S> grad;
        bool requires_grad = false;
    };

    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("empty shape");
        for (int d : shape) {
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        }
    }

    std::shared_ptr<Storage> st_;
    int node_ = -1;

    friend class Graph<S>;
};

template <typename S>
S norm2(std::span<const S> v) {
    double acc = 0.0;
    for (S x : v) acc += static_cast<double>(x) * static_cast<double>(x);
    return static_cast<S>(std::sqrt(acc));
}

namespace detail {

template <typename S>
inline S gelu_tanh(S x) {
    const S k = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    const S a = static_cast<S>(0.044715);
    const S u = k * (x + a * x * x * x);
    return S(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
inline S gelu_tanh_grad(S x) {
    const S k = static_cast<S>(std::sqrt(2.0 / std::numbers::pi));
    const S a = static_cast<S>(0.044715);
    const S u = k * (x + a * x * x * x);
    const S t = std::tanh(u);
    const S du = k * (S(1) + S(3) * a * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

}  // namespace detail

/// Dynamic tape: records one operation node per op call, in topological
/// order by construction. backward() walks the tape once in reverse,
/// accumulating into leaf grads for leaves with requires_grad set at call
/// time. Subgraphs that cannot reach such a leaf are skipped entirely, so
/// their gradients are never computed or stored. Single-threaded.
template <typename S>
class Graph {
public:
    /// a[m×k] · b[k×n] -> [m×n]
    Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
            throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
        const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
        Tensor<S> out = Tensor<S>::zeros({m, n});
        const S* ap = a.data().data();
        const S* bp = b.data().data();
        S* cp = out.data().data();
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                const S aip = ap[i * k + p];
                if (aip == S(0)) continue;
                const S* brow = bp + p * n;
                S* crow = cp + i * n;
                for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
        }
        return record(Op::MatMul, {a, b}, std::move(out));
    }

    Tensor<S> transpose(const Tensor<S>& x) {
        if (x.rank() != 2) throw ShapeError("transpose expects rank-2, got " + shape_str(x.shape()));
        const int r = x.dim(0), c = x.dim(1);
        Tensor<S> out = Tensor<S>::zeros({c, r});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.data()[j * r + i] = x.data()[i * c + j];
        return record(Op::Transpose, {x}, std::move(out));
    }

    /// Elementwise sum; the second operand may be a rank-1 bias broadcast
    /// over the last axis.
    Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
        if (a.shape() == b.shape()) {
            Tensor<S> out = Tensor<S>::zeros(a.shape());
            for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
            return record(Op::Add, {a, b}, std::move(out));
        }
        check_bias_broadcast(a, b, "add");
        const int d = b.dim(0);
        Tensor<S> out = Tensor<S>::zeros(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] + b.data()[i % static_cast<std::size_t>(d)];
        return record(Op::AddBias, {a, b}, std::move(out));
    }

    /// Elementwise product; same broadcast rule as add.
    Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
        if (a.shape() == b.shape()) {
            Tensor<S> out = Tensor<S>::zeros(a.shape());
            for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
            return record(Op::Mul, {a, b}, std::move(out));
        }
        check_bias_broadcast(a, b, "mul");
        const int d = b.dim(0);
        Tensor<S> out = Tensor<S>::zeros(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i)
            out.data()[i] = a.data()[i] * b.data()[i % static_cast<std::size_t>(d)];
        return record(Op::MulBias, {a, b}, std::move(out));
    }

    Tensor<S> scale(const Tensor<S>& x, double c) {
        Tensor<S> out = Tensor<S>::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
            out.data()[i] = x.data()[i] * static_cast<S>(c);
        Tensor<S> r = record(Op::ScaleC, {x}, std::move(out));
        nodes_.back().farg = c;
        return r;
    }

    Tensor<S> relu(const Tensor<S>& x) {
        Tensor<S> out = Tensor<S>::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
            out.data()[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
        return record(Op::Relu, {x}, std::move(out));
    }

    /// tanh-approximation GELU.
    Tensor<S> gelu(const Tensor<S>& x) {
        Tensor<S> out = Tensor<S>::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
            out.data()[i] = detail::gelu_tanh(x.data()[i]);
        return record(Op::Gelu, {x}, std::move(out));
    }

    /// Row normalization over the last axis to zero mean / unit variance
    /// (population variance, eps 1e-5 inside the square root), then affine.
    Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
        const int d = x.dim(x.rank() - 1);
        if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != d || bias.dim(0) != d) {
            throw ShapeError("layer_norm affine shape mismatch: x " + shape_str(x.shape()) +
                             ", gain " + shape_str(gain.shape()) + ", bias " +
                             shape_str(bias.shape()));
        }
        const std::size_t rows = x.size() / static_cast<std::size_t>(d);
        Tensor<S> out = Tensor<S>::zeros(x.shape());
        std::vector<S> mean(rows), rstd(rows);
        const S eps = static_cast<S>(kLayerNormEps);
        for (std::size_t r = 0; r < rows; ++r) {
            const S* xr = x.data().data() + r * static_cast<std::size_t>(d);
            S mu = S(0);
            for (int c = 0; c < d; ++c) mu += xr[c];
            mu /= static_cast<S>(d);
            S var = S(0);
            for (int c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
            var /= static_cast<S>(d);
            const S rs = S(1) / std::sqrt(var + eps);
            mean[r] = mu;
            rstd[r] = rs;
            S* yr = out.data().data() + r * static_cast<std::size_t>(d);
            for (int c = 0; c < d; ++c)
                yr[c] = (xr[c] - mu) * rs * gain.data()[static_cast<std::size_t>(c)] +
                        bias.data()[static_cast<std::size_t>(c)];
        }
        Tensor<S> r = record(Op::LayerNorm, {x, gain, bias}, std::move(out));
        nodes_.back().saved.push_back(std::move(mean));
        nodes_.back().saved.push_back(std::move(rstd));
        return r;
    }

    /// Row softmax of a square score matrix with a causal mask: row t
    /// attends to columns 0..t, later columns are exactly zero.
    Tensor<S> causal_softmax(const Tensor<S>& scores) {
        if (scores.rank() != 2 || scores.dim(0) != scores.dim(1)) {
            throw ShapeError("causal_softmax expects a square matrix, got " +
                             shape_str(scores.shape()));
        }
        const int t_len = scores.dim(0);
        Tensor<S> out = Tensor<S>::zeros(scores.shape());
        for (int t = 0; t < t_len; ++t) {
            const S* sr = scores.data().data() + static_cast<std::size_t>(t) * t_len;
            S* pr = out.data().data() + static_cast<std::size_t>(t) * t_len;
            S mx = sr[0];
            for (int j = 1; j <= t; ++j) mx = std::max(mx, sr[j]);
            S z = S(0);
            for (int j = 0; j <= t; ++j) {
                pr[j] = std::exp(sr[j] - mx);
                z += pr[j];
            }
            for (int j = 0; j <= t; ++j) pr[j] /= z;
        }
        return record(Op::CausalSoftmax, {scores}, std::move(out));
    }

    /// Mean negative log-likelihood over rows; targets index columns.
    Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets) {
        if (logits.rank() != 2) {
            throw ShapeError("softmax_cross_entropy expects rank-2 logits, got " +
                             shape_str(logits.shape()));
        }
        const int b = logits.dim(0), c = logits.dim(1);
        if (static_cast<int>(targets.size()) != b) {
            throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(b) + " rows");
        }
        for (int t : targets) {
            if (t < 0 || t >= c) {
                throw IndexError("target " + std::to_string(t) + " out of range [0, " +
                                 std::to_string(c) + ")");
            }
        }
        std::vector<S> probs(static_cast<std::size_t>(b) * c);
        double loss = 0.0;
        for (int i = 0; i < b; ++i) {
            const S* lr = logits.data().data() + static_cast<std::size_t>(i) * c;
            S* pr = probs.data() + static_cast<std::size_t>(i) * c;
            S mx = lr[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, lr[j]);
            double z = 0.0;
            for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(lr[j] - mx));
            const double logz = std::log(z);
            loss -= static_cast<double>(lr[targets[static_cast<std::size_t>(i)]] - mx) - logz;
            for (int j = 0; j < c; ++j)
                pr[j] = static_cast<S>(std::exp(static_cast<double>(lr[j] - mx)) / z);
        }
        Tensor<S> out = Tensor<S>::scalar(static_cast<S>(loss / b));
        Tensor<S> r = record(Op::SoftmaxCE, {logits}, std::move(out));
        nodes_.back().iargs = targets;
        nodes_.back().saved.push_back(std::move(probs));
        return r;
    }

    /// Row gather: out[i] = table[ids[i]]. Backward scatter-adds.
    Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
        if (table.rank() != 2) {
            throw ShapeError("embedding table must be rank-2, got " + shape_str(table.shape()));
        }
        const int v = table.dim(0), d = table.dim(1);
        for (int id : ids) {
            if (id < 0 || id >= v) {
                throw IndexError("token id " + std::to_string(id) + " out of range [0, " +
                                 std::to_string(v) + ")");
            }
        }
        Tensor<S> out = Tensor<S>::zeros({static_cast<int>(ids.size()), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const S* src = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
            S* dst = out.data().data() + i * static_cast<std::size_t>(d);
            for (int c = 0; c < d; ++c) dst[c] = src[c];
        }
        Tensor<S> r = record(Op::Embedding, {table}, std::move(out));
        nodes_.back().iargs = ids;
        return r;
    }

    Tensor<S> slice_cols(const Tensor<S>& x, int start, int len) {
        if (x.rank() != 2 || start < 0 || len <= 0 || start + len > x.dim(1)) {
            throw ShapeError("slice_cols [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of " + shape_str(x.shape()));
        }
        const int r = x.dim(0), c = x.dim(1);
        Tensor<S> out = Tensor<S>::zeros({r, len});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < len; ++j)
                out.data()[static_cast<std::size_t>(i) * len + j] =
                    x.data()[static_cast<std::size_t>(i) * c + start + j];
        Tensor<S> rec = record(Op::SliceCols, {x}, std::move(out));
        nodes_.back().iargs = {start, len};
        return rec;
    }

    Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
            throw ShapeError("concat_cols row mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
        }
        const int r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
        Tensor<S> out = Tensor<S>::zeros({r, ca + cb});
        for (int i = 0; i < r; ++i) {
            S* dst = out.data().data() + static_cast<std::size_t>(i) * (ca + cb);
            const S* pa = a.data().data() + static_cast<std::size_t>(i) * ca;
            const S* pb = b.data().data() + static_cast<std::size_t>(i) * cb;
            for (int j = 0; j < ca; ++j) dst[j] = pa[j];
            for (int j = 0; j < cb; ++j) dst[ca + j] = pb[j];
        }
        return record(Op::ConcatCols, {a, b}, std::move(out));
    }

    /// Full reduction to a scalar.
    Tensor<S> sum(const Tensor<S>& x) {
        double acc = 0.0;
        for (S v : x.data()) acc += static_cast<double>(v);
        return record(Op::Sum, {x}, Tensor<S>::scalar(static_cast<S>(acc)));
    }

    /// Reverse pass from a scalar loss. Accumulates into the grad buffers of
    /// leaves whose requires_grad flag is set at this call; everything else
    /// is pruned. May be called again (with different leaf flags) while the
    /// tape is alive; leaf grads accumulate across calls.
    void backward(const Tensor<S>& loss) {
        if (!loss.valid() || loss.size() != 1) {
            throw ContractError("backward requires a scalar loss");
        }
        if (loss.node() < 0) {
            if (loss.requires_grad()) {
                Tensor<S> l = loss;
                l.grad()[0] += S(1);
            }
            return;
        }
        const std::size_t n = nodes_.size();
        std::vector<char> reach(n, 0), active(n, 0);

        std::vector<int> stack = {loss.node()};
        reach[static_cast<std::size_t>(loss.node())] = 1;
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            for (const Tensor<S>& in : nodes_[static_cast<std::size_t>(id)].in) {
                const int pid = in.node();
                if (pid >= 0 && !reach[static_cast<std::size_t>(pid)]) {
                    reach[static_cast<std::size_t>(pid)] = 1;
                    stack.push_back(pid);
                }
            }
        }
        for (std::size_t i = 0; i <= static_cast<std::size_t>(loss.node()); ++i) {
            for (const Tensor<S>& in : nodes_[i].in) {
                const int pid = in.node();
                const bool live_in =
                    pid >= 0 ? active[static_cast<std::size_t>(pid)] != 0 : in.requires_grad();
                if (live_in) {
                    active[i] = 1;
                    break;
                }
            }
        }

        std::vector<std::vector<S>> ngrad(n);
        auto live = [&](int id) {
            return reach[static_cast<std::size_t>(id)] && active[static_cast<std::size_t>(id)];
        };
        if (!live(loss.node())) return;
        ngrad[static_cast<std::size_t>(loss.node())].assign(1, S(1));

        // Returns the accumulation target for an operand, or nullptr when the
        // operand needs no gradient.
        auto sink = [&](Tensor<S>& in) -> S* {
            if (in.node() >= 0) {
                if (!live(in.node())) return nullptr;
                auto& g = ngrad[static_cast<std::size_t>(in.node())];
                if (g.empty()) g.assign(in.size(), S(0));
                return g.data();
            }
            if (!in.requires_grad()) return nullptr;
            return in.grad().data();
        };

        for (int id = loss.node(); id >= 0; --id) {
            Node& nd = nodes_[static_cast<std::size_t>(id)];
            if (!live(id) || ngrad[static_cast<std::size_t>(id)].empty()) continue;
            const S* g = ngrad[static_cast<std::size_t>(id)].data();
            backward_node(nd, g, sink);
            ngrad[static_cast<std::size_t>(id)].clear();
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t node_count() const { return nodes_.size(); }

    static constexpr double kLayerNormEps = 1e-5;

private:
    enum class Op {
        MatMul,
        Transpose,
        Add,
        AddBias,
        Mul,
        MulBias,
        ScaleC,
        Relu,
        Gelu,
        LayerNorm,
        CausalSoftmax,
        SoftmaxCE,
        Embedding,
        SliceCols,
        ConcatCols,
        Sum,
    };

    struct Node {
        Op op;
        std::vector<Tensor<S>> in;
        Tensor<S> out;
        std::vector<int> iargs;
        double farg = 0.0;
        std::vector<std::vector<S>> saved;
    };

    static void check_bias_broadcast(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
        if (b.rank() != 1 || a.dim(a.rank() - 1) != b.dim(0)) {
            throw ShapeError(std::string(op) + " broadcast mismatch: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
        }
    }

    Tensor<S> record(Op op, std::vector<Tensor<S>> in, Tensor<S> out) {
        out.node_ = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{op, std::move(in), out, {}, 0.0, {}});
        return out;
    }

    template <typename Sink>
    void backward_node(Node& nd, const S* g, Sink&& sink) {
        switch (nd.op) {
            case Op::MatMul: {
                const Tensor<S>&a = nd.in[0], &b = nd.in[1];
                const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
                if (S* da = sink(nd.in[0])) {
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < k; ++p) {
                            S acc = S(0);
                            const S* gr = g + static_cast<std::size_t>(i) * n;
                            const S* br = b.data().data() + static_cast<std::size_t>(p) * n;
                            for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
                            da[static_cast<std::size_t>(i) * k + p] += acc;
                        }
                }
                if (S* db = sink(nd.in[1])) {
                    for (int i = 0; i < m; ++i) {
                        const S* ar = a.data().data() + static_cast<std::size_t>(i) * k;
                        const S* gr = g + static_cast<std::size_t>(i) * n;
                        for (int p = 0; p < k; ++p) {
                            const S aip = ar[p];
                            if (aip == S(0)) continue;
                            S* dbr = db + static_cast<std::size_t>(p) * n;
                            for (int j = 0; j < n; ++j) dbr[j] += aip * gr[j];
                        }
                    }
                }
                break;
            }
            case Op::Transpose: {
                const int r = nd.in[0].dim(0), c = nd.in[0].dim(1);
                if (S* dx = sink(nd.in[0])) {
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j)
                            dx[static_cast<std::size_t>(i) * c + j] +=
                                g[static_cast<std::size_t>(j) * r + i];
                }
                break;
            }
            case Op::Add: {
                const std::size_t n = nd.out.size();
                if (S* da = sink(nd.in[0]))
                    for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
                if (S* db = sink(nd.in[1]))
                    for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
                break;
            }
            case Op::AddBias: {
                const std::size_t n = nd.out.size();
                const std::size_t d = nd.in[1].size();
                if (S* da = sink(nd.in[0]))
                    for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
                if (S* db = sink(nd.in[1]))
                    for (std::size_t i = 0; i < n; ++i) db[i % d] += g[i];
                break;
            }
            case Op::Mul: {
                const std::size_t n = nd.out.size();
                const S* a = nd.in[0].data().data();
                const S* b = nd.in[1].data().data();
                if (S* da = sink(nd.in[0]))
                    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * b[i];
                if (S* db = sink(nd.in[1]))
                    for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * a[i];
                break;
            }
            case Op::MulBias: {
                const std::size_t n = nd.out.size();
                const std::size_t d = nd.in[1].size();
                const S* a = nd.in[0].data().data();
                const S* b = nd.in[1].data().data();
                if (S* da = sink(nd.in[0]))
                    for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * b[i % d];
                if (S* db = sink(nd.in[1]))
                    for (std::size_t i = 0; i < n; ++i) db[i % d] += g[i] * a[i];
                break;
            }
            case Op::ScaleC: {
                const S c = static_cast<S>(nd.farg);
                if (S* dx = sink(nd.in[0]))
                    for (std::size_t i = 0; i < nd.out.size(); ++i) dx[i] += c * g[i];
                break;
            }
            case Op::Relu: {
                const S* x = nd.in[0].data().data();
                if (S* dx = sink(nd.in[0]))
                    for (std::size_t i = 0; i < nd.out.size(); ++i)
                        if (x[i] > S(0)) dx[i] += g[i];
                break;
            }
            case Op::Gelu: {
                const S* x = nd.in[0].data().data();
                if (S* dx = sink(nd.in[0]))
                    for (std::size_t i = 0; i < nd.out.size(); ++i)
                        dx[i] += g[i] * detail::gelu_tanh_grad(x[i]);
                break;
            }
            case Op::LayerNorm: {
                const Tensor<S>& x = nd.in[0];
                const Tensor<S>& gain = nd.in[1];
                const int d = x.dim(x.rank() - 1);
                const std::size_t rows = x.size() / static_cast<std::size_t>(d);
                const std::vector<S>& mean = nd.saved[0];
                const std::vector<S>& rstd = nd.saved[1];
                S* dx = sink(nd.in[0]);
                S* dg = sink(nd.in[1]);
                S* db = sink(nd.in[2]);
                std::vector<S> xhat(static_cast<std::size_t>(d));
                for (std::size_t r = 0; r < rows; ++r) {
                    const S* xr = x.data().data() + r * static_cast<std::size_t>(d);
                    const S* gr = g + r * static_cast<std::size_t>(d);
                    for (int c = 0; c < d; ++c)
                        xhat[static_cast<std::size_t>(c)] = (xr[c] - mean[r]) * rstd[r];
                    if (dg)
                        for (int c = 0; c < d; ++c)
                            dg[c] += gr[c] * xhat[static_cast<std::size_t>(c)];
                    if (db)
                        for (int c = 0; c < d; ++c) db[c] += gr[c];
                    if (dx) {
                        S m1 = S(0), m2 = S(0);
                        for (int c = 0; c < d; ++c) {
                            const S dxh = gr[c] * gain.data()[static_cast<std::size_t>(c)];
                            m1 += dxh;
                            m2 += dxh * xhat[static_cast<std::size_t>(c)];
                        }
                        m1 /= static_cast<S>(d);
                        m2 /= static_cast<S>(d);
                        S* dxr = dx + r * static_cast<std::size_t>(d);
                        for (int c = 0; c < d; ++c) {
                            const S dxh = gr[c] * gain.data()[static_cast<std::size_t>(c)];
                            dxr[c] += rstd[r] * (dxh - m1 - xhat[static_cast<std::size_t>(c)] * m2);
                        }
                    }
                }
                break;
            }
            case Op::CausalSoftmax: {
                const int t_len = nd.out.dim(0);
                const S* p = nd.out.data().data();
                if (S* ds = sink(nd.in[0])) {
                    for (int t = 0; t < t_len; ++t) {
                        const S* pr = p + static_cast<std::size_t>(t) * t_len;
                        const S* gr = g + static_cast<std::size_t>(t) * t_len;
                        S dot = S(0);
                        for (int j = 0; j <= t; ++j) dot += gr[j] * pr[j];
                        S* dr = ds + static_cast<std::size_t>(t) * t_len;
                        for (int j = 0; j <= t; ++j) dr[j] += pr[j] * (gr[j] - dot);
                    }
                }
                break;
            }
            case Op::SoftmaxCE: {
                const int b = nd.in[0].dim(0), c = nd.in[0].dim(1);
                const std::vector<S>& probs = nd.saved[0];
                const S gs = g[0] / static_cast<S>(b);
                if (S* dl = sink(nd.in[0])) {
                    for (int i = 0; i < b; ++i) {
                        const S* pr = probs.data() + static_cast<std::size_t>(i) * c;
                        S* dr = dl + static_cast<std::size_t>(i) * c;
                        const int y = nd.iargs[static_cast<std::size_t>(i)];
                        for (int j = 0; j < c; ++j)
                            dr[j] += gs * (pr[j] - (j == y ? S(1) : S(0)));
                    }
                }
                break;
            }
            case Op::Embedding: {
                const int d = nd.in[0].dim(1);
                if (S* dt = sink(nd.in[0])) {
                    for (std::size_t i = 0; i < nd.iargs.size(); ++i) {
                        S* dst = dt + static_cast<std::size_t>(nd.iargs[i]) * d;
                        const S* gr = g + i * static_cast<std::size_t>(d);
                        for (int c = 0; c < d; ++c) dst[c] += gr[c];
                    }
                }
                break;
            }
            case Op::SliceCols: {
                const int c = nd.in[0].dim(1);
                const int start = nd.iargs[0], len = nd.iargs[1];
                const int r = nd.in[0].dim(0);
                if (S* dx = sink(nd.in[0])) {
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < len; ++j)
                            dx[static_cast<std::size_t>(i) * c + start + j] +=
                                g[static_cast<std::size_t>(i) * len + j];
                }
                break;
            }
            case Op::ConcatCols: {
                const int r = nd.in[0].dim(0);
                const int ca = nd.in[0].dim(1), cb = nd.in[1].dim(1);
                if (S* da = sink(nd.in[0])) {
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < ca; ++j)
                            da[static_cast<std::size_t>(i) * ca + j] +=
                                g[static_cast<std::size_t>(i) * (ca + cb) + j];
                }
                if (S* db = sink(nd.in[1])) {
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < cb; ++j)
                            db[static_cast<std::size_t>(i) * cb + j] +=
                                g[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
                }
                break;
            }
            case Op::Sum: {
                if (S* dx = sink(nd.in[0]))
                    for (std::size_t i = 0; i < nd.in[0].size(); ++i) dx[i] += g[0];
                break;
            }
        }
    }

    std::vector<Node> nodes_;
};

}  // namespace blockgrad

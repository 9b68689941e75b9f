#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "blockgrad/errors.hpp"
#include "blockgrad/rng.hpp"
#include "blockgrad/tensor.hpp"

namespace blockgrad {

enum class ModelKind { Mlp, TinyTransformer };

struct ModelConfig {
    ModelKind kind = ModelKind::Mlp;

    // mlp
    int input_dim = 8;
    int output_dim = 3;
    std::vector<int> hidden = {16};

    // tiny transformer
    int vocab = 32;
    int embed_dim = 16;
    int blocks = 2;
    int heads = 2;
    int ffn_dim = 32;
    int context = 16;
    bool tied_head = false;

    std::uint64_t seed = 1;
};

/// One selectable block: a named parameter tensor. The registry order is the
/// construction order and is stable for the lifetime of the model.
template <typename S>
struct LayerEntry {
    std::string name;
    Tensor<S> tensor;
    std::size_t count = 0;
};

template <typename S>
using LayerRegistry = std::vector<LayerEntry<S>>;

/// A training batch. Classification tasks fill features/labels; language
/// model tasks fill token windows of length context+1 (input plus shifted
/// target).
template <typename S>
struct Batch {
    Tensor<S> features;
    std::vector<int> labels;
    std::vector<std::vector<int>> tokens;
};

template <typename S>
struct LossResult {
    Tensor<S> loss;
    double phi = 0.0;
};

template <typename S>
class Model {
public:
    static Model build_mlp(const ModelConfig& cfg) {
        if (cfg.hidden.empty()) throw ConfigError("mlp needs at least one hidden layer");
        if (cfg.input_dim <= 0 || cfg.output_dim <= 0) {
            throw ConfigError("mlp input/output dims must be positive");
        }
        for (int w : cfg.hidden) {
            if (w <= 0) throw ConfigError("mlp hidden width must be positive");
        }
        Model m;
        m.cfg_ = cfg;
        m.cfg_.kind = ModelKind::Mlp;
        Rng rng(cfg.seed);
        std::vector<int> dims;
        dims.push_back(cfg.input_dim);
        for (int w : cfg.hidden) dims.push_back(w);
        dims.push_back(cfg.output_dim);
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            const int fan_in = dims[i], fan_out = dims[i + 1];
            const double sigma = std::sqrt(2.0 / fan_in);
            m.push_layer("fc" + std::to_string(i) + ".weight",
                         gaussian(rng, {fan_in, fan_out}, sigma));
            m.push_layer("fc" + std::to_string(i) + ".bias", Tensor<S>::zeros({fan_out}));
        }
        return m;
    }

    static Model build_tiny_transformer(const ModelConfig& cfg) {
        if (cfg.vocab < 2) throw ConfigError("transformer vocab must be >= 2");
        if (cfg.context < 2) throw ConfigError("transformer context must be >= 2");
        if (cfg.blocks <= 0 || cfg.embed_dim <= 0 || cfg.ffn_dim <= 0 || cfg.heads <= 0) {
            throw ConfigError("transformer dimensions must be positive");
        }
        if (cfg.embed_dim % cfg.heads != 0) {
            throw ConfigError("embed dim " + std::to_string(cfg.embed_dim) +
                              " not divisible by head count " + std::to_string(cfg.heads));
        }
        Model m;
        m.cfg_ = cfg;
        m.cfg_.kind = ModelKind::TinyTransformer;
        Rng rng(cfg.seed);
        const int d = cfg.embed_dim;
        m.push_layer("embed", gaussian(rng, {cfg.vocab, d}, kTransformerInitStd));
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string p = "block" + std::to_string(b) + ".";
            m.push_layer(p + "wq", gaussian(rng, {d, d}, kTransformerInitStd));
            m.push_layer(p + "wk", gaussian(rng, {d, d}, kTransformerInitStd));
            m.push_layer(p + "wv", gaussian(rng, {d, d}, kTransformerInitStd));
            m.push_layer(p + "wo", gaussian(rng, {d, d}, kTransformerInitStd));
            m.push_layer(p + "ffn.w1", gaussian(rng, {d, cfg.ffn_dim}, kTransformerInitStd));
            m.push_layer(p + "ffn.w2", gaussian(rng, {cfg.ffn_dim, d}, kTransformerInitStd));
            m.push_layer(p + "ln1.gain", Tensor<S>::full({d}, S(1)));
            m.push_layer(p + "ln1.bias", Tensor<S>::zeros({d}));
            m.push_layer(p + "ln2.gain", Tensor<S>::full({d}, S(1)));
            m.push_layer(p + "ln2.bias", Tensor<S>::zeros({d}));
        }
        if (!cfg.tied_head) {
            m.push_layer("head", gaussian(rng, {d, cfg.vocab}, kTransformerInitStd));
        }
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    ModelKind kind() const { return cfg_.kind; }

    /// Ordered view of the named parameter layers (the block registry).
    const LayerRegistry<S>& layers() const { return registry_; }
    LayerRegistry<S>& layers() { return registry_; }

    std::size_t layer_count() const { return registry_.size(); }

    /// Total trainable parameter count n.
    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& e : registry_) n += e.count;
        return n;
    }

    int layer_index(const std::string& name) const {
        for (std::size_t i = 0; i < registry_.size(); ++i) {
            if (registry_[i].name == name) return static_cast<int>(i);
        }
        return -1;
    }

    /// Graph-attached batch loss plus its detached value.
    LossResult<S> forward_loss(Graph<S>& g, const Batch<S>& batch) const {
        Tensor<S> loss;
        if (cfg_.kind == ModelKind::Mlp) {
            if (!batch.features.valid() || batch.features.rank() != 2 ||
                batch.features.dim(1) != cfg_.input_dim) {
                throw ShapeError("mlp batch features must be [b x " +
                                 std::to_string(cfg_.input_dim) + "]");
            }
            Tensor<S> logits = mlp_logits(g, batch.features);
            loss = g.softmax_cross_entropy(logits, batch.labels);
        } else {
            if (batch.tokens.empty()) throw ShapeError("lm batch has no token windows");
            const double inv_b = 1.0 / static_cast<double>(batch.tokens.size());
            for (const auto& window : batch.tokens) {
                if (static_cast<int>(window.size()) < 2) {
                    throw ShapeError("lm window needs at least 2 tokens");
                }
                Tensor<S> l = lm_window_loss(g, window);
                loss = loss.valid() ? g.add(loss, g.scale(l, inv_b)) : g.scale(l, inv_b);
            }
        }
        return {loss, static_cast<double>(loss.item())};
    }

    /// Classification logits (MLP only); used for accuracy evaluation.
    Tensor<S> mlp_logits(Graph<S>& g, const Tensor<S>& x) const {
        Tensor<S> h = x;
        const std::size_t n_fc = registry_.size() / 2;
        for (std::size_t i = 0; i < n_fc; ++i) {
            h = g.add(g.matmul(h, registry_[2 * i].tensor), registry_[2 * i + 1].tensor);
            if (i + 1 < n_fc) h = g.relu(h);
        }
        return h;
    }

    /// Next-token logits for one window's inputs (LM only).
    Tensor<S> lm_logits(Graph<S>& g, const std::vector<int>& inputs) const {
        const int d = cfg_.embed_dim;
        const int dh = d / cfg_.heads;
        const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
        Tensor<S> x = g.embedding(layer("embed"), inputs);
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string p = "block" + std::to_string(b) + ".";
            Tensor<S> h = g.layer_norm(x, layer(p + "ln1.gain"), layer(p + "ln1.bias"));
            Tensor<S> q = g.matmul(h, layer(p + "wq"));
            Tensor<S> k = g.matmul(h, layer(p + "wk"));
            Tensor<S> v = g.matmul(h, layer(p + "wv"));
            Tensor<S> ctx;
            for (int hh = 0; hh < cfg_.heads; ++hh) {
                Tensor<S> qh = cfg_.heads == 1 ? q : g.slice_cols(q, hh * dh, dh);
                Tensor<S> kh = cfg_.heads == 1 ? k : g.slice_cols(k, hh * dh, dh);
                Tensor<S> vh = cfg_.heads == 1 ? v : g.slice_cols(v, hh * dh, dh);
                Tensor<S> scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_dh);
                Tensor<S> probs = g.causal_softmax(scores);
                Tensor<S> ctx_h = g.matmul(probs, vh);
                ctx = ctx.valid() ? g.concat_cols(ctx, ctx_h) : ctx_h;
            }
            x = g.add(x, g.matmul(ctx, layer(p + "wo")));
            Tensor<S> h2 = g.layer_norm(x, layer(p + "ln2.gain"), layer(p + "ln2.bias"));
            Tensor<S> f = g.matmul(g.gelu(g.matmul(h2, layer(p + "ffn.w1"))), layer(p + "ffn.w2"));
            x = g.add(x, f);
        }
        if (cfg_.tied_head) {
            return g.matmul(x, g.transpose(layer("embed")));
        }
        return g.matmul(x, layer("head"));
    }

    static constexpr double kTransformerInitStd = 0.08;

private:
    Tensor<S> lm_window_loss(Graph<S>& g, const std::vector<int>& window) const {
        std::vector<int> inputs(window.begin(), window.end() - 1);
        std::vector<int> targets(window.begin() + 1, window.end());
        Tensor<S> logits = lm_logits(g, inputs);
        return g.softmax_cross_entropy(logits, targets);
    }

    const Tensor<S>& layer(const std::string& name) const {
        const int i = layer_index(name);
        if (i < 0) throw StateError("unknown layer " + name);
        return registry_[static_cast<std::size_t>(i)].tensor;
    }

    void push_layer(std::string name, Tensor<S> t) {
        const std::size_t count = t.size();
        registry_.push_back(LayerEntry<S>{std::move(name), std::move(t), count});
    }

    static Tensor<S> gaussian(Rng& rng, Shape shape, double sigma) {
        Tensor<S> t = Tensor<S>::zeros(std::move(shape));
        for (S& v : t.data()) v = static_cast<S>(rng.normal(0.0, sigma));
        return t;
    }

    ModelConfig cfg_;
    LayerRegistry<S> registry_;
};

template <typename S>
Model<S> build_mlp(const ModelConfig& cfg) {
    return Model<S>::build_mlp(cfg);
}

template <typename S>
Model<S> build_tiny_transformer(const ModelConfig& cfg) {
    return Model<S>::build_tiny_transformer(cfg);
}

/// Argmax class predictions for a classification input batch.
template <typename S>
std::vector<int> predict_classes(const Model<S>& model, const Tensor<S>& x) {
    Graph<S> g;
    Tensor<S> logits = model.mlp_logits(g, x);
    const int b = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
        int best = 0;
        for (int j = 1; j < c; ++j) {
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

}  // namespace blockgrad

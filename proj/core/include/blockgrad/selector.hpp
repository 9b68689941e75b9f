#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "blockgrad/errors.hpp"
#include "blockgrad/model.hpp"
#include "blockgrad/rng.hpp"

namespace blockgrad {

enum class PolicyKind {
    BlockLlm,     // descending norm / (f + smoothing)
    NormOnly,     // descending norm, visit frequency ignored
    SubOpt,       // ascending norm / (f + smoothing): deliberately bad
    Magnitude,    // entry-level top-k by |W|
    RandomBlock,  // uniformly random layer subset meeting n_s
    CyclicBlock,  // registry walked in order
    Full,         // every layer, every entry
};

inline const char* policy_name(PolicyKind p) {
    switch (p) {
        case PolicyKind::BlockLlm: return "blockllm";
        case PolicyKind::NormOnly: return "norm-only";
        case PolicyKind::SubOpt: return "subopt";
        case PolicyKind::Magnitude: return "magnitude";
        case PolicyKind::RandomBlock: return "random-block";
        case PolicyKind::CyclicBlock: return "cyclic-block";
        case PolicyKind::Full: return "full";
    }
    return "?";
}

inline PolicyKind parse_policy(const std::string& s) {
    if (s == "blockllm") return PolicyKind::BlockLlm;
    if (s == "norm-only") return PolicyKind::NormOnly;
    if (s == "subopt") return PolicyKind::SubOpt;
    if (s == "magnitude") return PolicyKind::Magnitude;
    if (s == "random-block") return PolicyKind::RandomBlock;
    if (s == "cyclic-block") return PolicyKind::CyclicBlock;
    if (s == "full") return PolicyKind::Full;
    throw ConfigError("unknown policy '" + s + "'");
}

enum class TrimMode { ExactTrim, PaperPercentile };

inline const char* trim_name(TrimMode t) {
    return t == TrimMode::ExactTrim ? "exact-trim" : "paper-percentile";
}

inline TrimMode parse_trim(const std::string& s) {
    if (s == "exact-trim") return TrimMode::ExactTrim;
    if (s == "paper-percentile") return TrimMode::PaperPercentile;
    throw ConfigError("unknown trim mode '" + s + "'");
}

struct SelectorConfig {
    double s = 0.5;       // sparsity in [0, 1)
    int m = 50;           // patience
    int p = 2;            // probe layers per step
    TrimMode trim = TrimMode::ExactTrim;
    double freq_smoothing = 0.01;
    PolicyKind policy = PolicyKind::BlockLlm;
    std::uint64_t seed = 1;
};

/// n_s = ceil((1-s) * n), computed as n - floor(s*n) with a nudge so clean
/// fractions (0.7 * 20) do not fall on the wrong side of the boundary.
inline std::size_t sparsity_target(double s, std::size_t n) {
    if (s < 0.0 || s >= 1.0) throw ConfigError("sparsity must be in [0, 1)");
    const auto kept = static_cast<std::size_t>(std::floor(s * static_cast<double>(n) + 1e-9));
    const std::size_t n_s = n - std::min(kept, n);
    if (n_s < 1) throw ConfigError("sparsity target n_s must be >= 1");
    return n_s;
}

/// Bounded loss ring; capacity is the patience window m.
class LossHistory {
public:
    explicit LossHistory(std::size_t capacity) : cap_(capacity == 0 ? 1 : capacity) {}

    void record(double phi) {
        buf_.push_back(phi);
        while (buf_.size() > cap_) buf_.pop_front();
    }
    void clear() { buf_.clear(); }
    std::size_t size() const { return buf_.size(); }
    std::size_t capacity() const { return cap_; }

    double mean_last(std::size_t k) const {
        const std::size_t take = std::min(k, buf_.size());
        double acc = 0.0;
        for (std::size_t i = buf_.size() - take; i < buf_.size(); ++i) acc += buf_[i];
        return take ? acc / static_cast<double>(take) : 0.0;
    }

    std::vector<double> values() const { return {buf_.begin(), buf_.end()}; }

private:
    std::deque<double> buf_;
    std::size_t cap_;
};

/// Patience trigger: reselect at step 0, or once the history holds at least
/// m losses and the current loss fails to beat their mean. H holds losses
/// recorded since the last reselection, excluding the current one.
inline bool should_reselect(const LossHistory& h, double phi, int m, long t) {
    if (t == 0) return true;
    if (h.size() < static_cast<std::size_t>(m)) return false;
    return phi >= h.mean_last(static_cast<std::size_t>(m));
}

/// f_l = visits[l] / max(T, 1).
inline std::vector<double> visit_frequency(const std::vector<long>& visits, long total_events) {
    std::vector<double> f(visits.size());
    const double denom = static_cast<double>(std::max<long>(total_events, 1));
    for (std::size_t i = 0; i < visits.size(); ++i) f[i] = static_cast<double>(visits[i]) / denom;
    return f;
}

/// Ascending nearest-rank quantile: the smallest value with at least
/// ceil(q*k) values at or below it.
inline double nearest_rank_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw ContractError("quantile of empty set");
    q = std::clamp(q, 0.0, 1.0);
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<std::size_t>(
        std::ceil(q * static_cast<double>(values.size()) - 1e-12));
    const std::size_t idx = rank == 0 ? 0 : rank - 1;
    return values[std::min(idx, values.size() - 1)];
}

/// Exact-trim: keep the n_s largest magnitudes across the selected layers.
/// Ties break by (registry index, flat index) so runs are reproducible.
/// `sel` holds registry indices; `mags[i]` the per-entry magnitude source of
/// sel[i]. Returned masks are indexed like `sel` and total exactly n_s ones
/// (or everything, when fewer than n_s entries exist).
template <typename S>
std::vector<std::vector<std::uint8_t>> build_masks_exact_trim(
    const std::vector<int>& sel, const std::vector<std::span<const S>>& mags, std::size_t n_s) {
    std::size_t total = 0;
    for (const auto& m : mags) total += m.size();
    std::vector<std::vector<std::uint8_t>> masks(sel.size());
    for (std::size_t i = 0; i < sel.size(); ++i) masks[i].assign(mags[i].size(), 0);
    if (total <= n_s) {
        for (auto& m : masks) std::fill(m.begin(), m.end(), 1);
        return masks;
    }
    struct EntryRef {
        double mag;
        int layer;
        std::size_t pos;  // position in sel
        std::size_t flat;
    };
    std::vector<EntryRef> entries;
    entries.reserve(total);
    for (std::size_t i = 0; i < sel.size(); ++i) {
        for (std::size_t j = 0; j < mags[i].size(); ++j) {
            entries.push_back({std::abs(static_cast<double>(mags[i][j])), sel[i], i, j});
        }
    }
    std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(n_s),
                     entries.end(), [](const EntryRef& a, const EntryRef& b) {
                         return std::tie(b.mag, a.layer, a.flat) < std::tie(a.mag, b.layer, b.flat);
                     });
    for (std::size_t k = 0; k < n_s; ++k) masks[entries[k].pos][entries[k].flat] = 1;
    return masks;
}

/// Paper-literal trim: per selected layer, tau is the (1 - zeta) ascending
/// nearest-rank quantile of the magnitudes and entries with |g| >= tau stay.
/// zeta <= 0 means no overshoot, so everything stays. This generally keeps
/// more than n_s entries; exact-trim exists for that reason.
template <typename S>
std::vector<std::vector<std::uint8_t>> build_masks_percentile(
    const std::vector<int>& sel, const std::vector<std::span<const S>>& mags, double zeta) {
    std::vector<std::vector<std::uint8_t>> masks(sel.size());
    for (std::size_t i = 0; i < sel.size(); ++i) {
        masks[i].assign(mags[i].size(), 1);
        if (zeta <= 0.0 || mags[i].empty()) continue;
        std::vector<double> abs_vals(mags[i].size());
        for (std::size_t j = 0; j < mags[i].size(); ++j)
            abs_vals[j] = std::abs(static_cast<double>(mags[i][j]));
        const double tau = nearest_rank_quantile(abs_vals, 1.0 - zeta);
        for (std::size_t j = 0; j < mags[i].size(); ++j)
            masks[i][j] = abs_vals[j] >= tau ? 1 : 0;
    }
    return masks;
}

/// One reselection event, as logged to the selection trace.
struct SelectionEvent {
    long step = 0;
    PolicyKind policy = PolicyKind::BlockLlm;
    std::size_t n_s = 0;
    std::size_t sigma_p = 0;
    double zeta = 0.0;
    std::vector<std::pair<std::string, double>> ranked;  // selected layers with scores
};

/// All block-selection state for one run: the selected set S, per-layer
/// masks, visit counters, the probe-norm table and the loss history.
template <typename S>
class Selector {
public:
    struct NormEntry {
        double norm = 0.0;
        long step_observed = -1;
    };

    Selector(SelectorConfig cfg, const LayerRegistry<S>& registry)
        : cfg_(cfg),
          rng_(cfg.seed),
          history_(static_cast<std::size_t>(std::max(cfg.m, 1))),
          norm_table_(registry.size()),
          visit_counts_(registry.size(), 0),
          masks_(registry.size()) {
        if (registry.empty()) throw ConfigError("select_param: empty layer registry");
        if (cfg_.m <= 0) throw ConfigError("patience m must be positive");
        if (cfg_.p < 0) throw ConfigError("probe count p must be non-negative");
        std::size_t n = 0;
        for (const auto& e : registry) n += e.count;
        total_params_ = n;
        n_s_ = cfg_.policy == PolicyKind::Full ? n : sparsity_target(cfg_.s, n);
    }

    const SelectorConfig& config() const { return cfg_; }
    std::size_t target_params() const { return n_s_; }
    long total_events() const { return total_events_; }
    const std::vector<long>& visit_counts() const { return visit_counts_; }
    const std::vector<NormEntry>& norm_table() const { return norm_table_; }
    LossHistory& history() { return history_; }
    const LossHistory& history() const { return history_; }

    const std::vector<int>& selected() const { return selected_; }
    bool is_selected(int layer_idx) const {
        return std::find(selected_.begin(), selected_.end(), layer_idx) != selected_.end();
    }

    std::span<const std::uint8_t> mask(int layer_idx) const {
        const auto& m = masks_[static_cast<std::size_t>(layer_idx)];
        if (m.empty()) throw StateError("mask requested for unselected layer");
        return m;
    }

    /// Total ones across the current masks (the selected parameter count).
    std::size_t mask_ones_total() const {
        std::size_t c = 0;
        for (int idx : selected_) {
            for (std::uint8_t b : masks_[static_cast<std::size_t>(idx)]) c += b;
        }
        return c;
    }

    void observe_norm(int layer_idx, double norm, long step) {
        auto& e = norm_table_[static_cast<std::size_t>(layer_idx)];
        e.norm = norm;
        e.step_observed = step;
    }

    bool check_reselect(double phi, long t) const {
        return blockgrad::should_reselect(history_, phi, cfg_.m, t);
    }

    /// Uniform sample of cfg.p layers outside the current selection; the
    /// whole complement when fewer remain.
    std::vector<int> sample_probes(const LayerRegistry<S>& registry) {
        std::vector<int> pool;
        pool.reserve(registry.size());
        for (std::size_t i = 0; i < registry.size(); ++i) {
            if (!is_selected(static_cast<int>(i))) pool.push_back(static_cast<int>(i));
        }
        return rng_.sample_without_replacement(std::move(pool),
                                               static_cast<std::size_t>(cfg_.p));
    }

    /// Algorithm 2: rank layers by the policy score, greedily take the
    /// minimal prefix reaching n_s parameters, then trim with per-entry
    /// masks. `mags(layer_idx)` supplies the per-entry magnitude source for
    /// any layer the policy needs (gradients, or weights for the magnitude
    /// policy). Updates visit counters and the event total.
    template <typename MagFn>
    SelectionEvent select(const LayerRegistry<S>& registry, long step, MagFn&& mags) {
        SelectionEvent ev;
        ev.step = step;
        ev.policy = cfg_.policy;
        ev.n_s = n_s_;

        selected_.clear();
        for (auto& m : masks_) m.clear();
        std::vector<double> scores(registry.size(), 0.0);

        switch (cfg_.policy) {
            case PolicyKind::Full: {
                for (std::size_t i = 0; i < registry.size(); ++i)
                    selected_.push_back(static_cast<int>(i));
                break;
            }
            case PolicyKind::RandomBlock: {
                std::vector<int> order(registry.size());
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
                rng_.shuffle(order);
                greedy_prefix(registry, order, scores);
                break;
            }
            case PolicyKind::CyclicBlock: {
                std::vector<int> order;
                for (std::size_t i = 0; i < registry.size(); ++i) {
                    order.push_back(static_cast<int>((cursor_ + i) % registry.size()));
                }
                greedy_prefix(registry, order, scores);
                cursor_ = (static_cast<std::size_t>(selected_.back()) + 1) % registry.size();
                break;
            }
            case PolicyKind::Magnitude: {
                select_magnitude(registry, mags);
                break;
            }
            default: {  // BlockLlm, NormOnly, SubOpt
                const std::vector<double> f = visit_frequency(visit_counts_, total_events_);
                for (std::size_t i = 0; i < registry.size(); ++i) {
                    const double norm = norm_table_[i].norm;
                    scores[i] = cfg_.policy == PolicyKind::NormOnly
                                    ? norm
                                    : norm / (f[i] + cfg_.freq_smoothing);
                }
                std::vector<int> order(registry.size());
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
                const bool ascending = cfg_.policy == PolicyKind::SubOpt;
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    const double sa = scores[static_cast<std::size_t>(a)];
                    const double sb = scores[static_cast<std::size_t>(b)];
                    if (sa != sb) return ascending ? sa < sb : sa > sb;
                    return a < b;  // ties by registry order
                });
                greedy_prefix(registry, order, scores);
                break;
            }
        }

        std::size_t sigma_p = 0;
        for (int idx : selected_) sigma_p += registry[static_cast<std::size_t>(idx)].count;
        ev.sigma_p = sigma_p;
        ev.zeta = n_s_ ? (static_cast<double>(sigma_p) - static_cast<double>(n_s_)) /
                             static_cast<double>(n_s_)
                       : 0.0;

        if (cfg_.policy != PolicyKind::Magnitude) {
            build_masks(registry, ev.zeta, mags);
        }

        for (int idx : selected_) {
            visit_counts_[static_cast<std::size_t>(idx)] += 1;
            ev.ranked.emplace_back(registry[static_cast<std::size_t>(idx)].name,
                                   scores[static_cast<std::size_t>(idx)]);
        }
        total_events_ += 1;
        return ev;
    }

private:
    void greedy_prefix(const LayerRegistry<S>& registry, const std::vector<int>& order,
                       const std::vector<double>&) {
        std::size_t acc = 0;
        for (int idx : order) {
            selected_.push_back(idx);
            acc += registry[static_cast<std::size_t>(idx)].count;
            if (acc >= n_s_) break;
        }
    }

    template <typename MagFn>
    void build_masks(const LayerRegistry<S>& registry, double zeta, MagFn&& mags) {
        std::vector<std::vector<std::uint8_t>> built;
        if (cfg_.policy == PolicyKind::Full) {
            built.resize(selected_.size());
            for (std::size_t i = 0; i < selected_.size(); ++i)
                built[i].assign(registry[static_cast<std::size_t>(selected_[i])].count, 1);
        } else {
            // The magnitude source is requested only now, with the selected
            // set final; a caller can materialize missing gradients for all
            // of selected() in one pass on the first request.
            std::vector<std::span<const S>> sel_mags;
            sel_mags.reserve(selected_.size());
            for (int idx : selected_) sel_mags.push_back(mags(idx));
            built = cfg_.trim == TrimMode::ExactTrim
                        ? build_masks_exact_trim(selected_, sel_mags, n_s_)
                        : build_masks_percentile(selected_, sel_mags, zeta);
        }
        for (std::size_t i = 0; i < selected_.size(); ++i) {
            masks_[static_cast<std::size_t>(selected_[i])] = std::move(built[i]);
        }
    }

    /// Entry-level Top_k |W|: keeps the n_s largest weight magnitudes in the
    /// whole model; S is every layer holding at least one kept entry. The
    /// greedy layer prefix is bypassed because this policy is defined on
    /// entries, not layers.
    template <typename MagFn>
    void select_magnitude(const LayerRegistry<S>& registry, MagFn&& mags) {
        std::vector<int> all(registry.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        std::vector<std::span<const S>> sources;
        sources.reserve(all.size());
        for (int idx : all) sources.push_back(mags(idx));
        auto built = build_masks_exact_trim(all, sources, n_s_);
        for (std::size_t i = 0; i < registry.size(); ++i) {
            bool any = false;
            for (std::uint8_t b : built[i]) {
                if (b) {
                    any = true;
                    break;
                }
            }
            if (any) {
                selected_.push_back(static_cast<int>(i));
                masks_[i] = std::move(built[i]);
            }
        }
    }

    SelectorConfig cfg_;
    Rng rng_;
    LossHistory history_;
    std::vector<NormEntry> norm_table_;
    std::vector<long> visit_counts_;
    std::vector<std::vector<std::uint8_t>> masks_;
    std::vector<int> selected_;
    std::size_t total_params_ = 0;
    std::size_t n_s_ = 0;
    long total_events_ = 0;
    std::size_t cursor_ = 0;
};

}  // namespace blockgrad

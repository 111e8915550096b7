#pragma once

// Bidirectional nearest-neighbour merging with hidden-state protection.
//
// Reduced tokens are chosen purely by position (outermost first) and folded into
// the nearest retained token on their side of the class token. The folded token is
// chosen so that, under the cached decay and gain parameters, the hidden state at
// the merge target matches the state the unreduced sequence would have produced.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stmssm/csv.hpp"
#include "stmssm/ssm_core.hpp"
#include "stmssm/tensor.hpp"
#include "stmssm/vim_stack.hpp"

namespace stmssm {

/// Retained positions q_0 < ... < q_{K-1} of a pre-merge sequence of `length` tokens.
/// gaps[k] (k < K) counts reduced tokens immediately before q_k, gaps[K] the
/// trailing ones, so sum(gaps) + K == length.
struct RetainedIndexSet {
    std::size_t length = 0;
    std::vector<std::size_t> q;
    std::vector<std::size_t> gaps;

    std::size_t size() const { return q.size(); }
    std::size_t gap_before(std::size_t k) const { return gaps.at(k); }
    std::size_t gap_after(std::size_t k) const { return gaps.at(k + 1); }
    /// Previous retained position, or -1 (as a signed value) before the first.
    std::ptrdiff_t previous(std::size_t k) const {
        return k == 0 ? -1 : static_cast<std::ptrdiff_t>(q[k - 1]);
    }
    std::ptrdiff_t next(std::size_t k) const {
        return k + 1 == q.size() ? static_cast<std::ptrdiff_t>(length)
                                 : static_cast<std::ptrdiff_t>(q[k + 1]);
    }

    static RetainedIndexSet from_retained(std::size_t length, std::vector<std::size_t> retained) {
        RetainedIndexSet r;
        r.length = length;
        r.q = std::move(retained);
        r.gaps.resize(r.q.size() + 1);
        std::size_t prev_end = 0;
        for (std::size_t k = 0; k < r.q.size(); ++k) {
            require(r.q[k] < length, "retained index out of range");
            require(k == 0 || r.q[k - 1] < r.q[k], "retained indices must be strictly increasing");
            r.gaps[k] = r.q[k] - prev_end;
            prev_end = r.q[k] + 1;
        }
        r.gaps.back() = length - prev_end;
        return r;
    }

    static RetainedIndexSet from_reduced(std::size_t length, std::vector<std::size_t> reduced) {
        std::sort(reduced.begin(), reduced.end());
        require(std::adjacent_find(reduced.begin(), reduced.end()) == reduced.end(),
                "reduced indices must be distinct");
        std::vector<std::size_t> keep;
        keep.reserve(length);
        std::size_t r = 0;
        for (std::size_t i = 0; i < length; ++i) {
            if (r < reduced.size() && reduced[r] == i) {
                ++r;
                continue;
            }
            keep.push_back(i);
        }
        require(r == reduced.size(), "reduced index out of range");
        return from_retained(length, std::move(keep));
    }

    std::optional<std::size_t> position_of(std::size_t pre_merge) const {
        auto it = std::lower_bound(q.begin(), q.end(), pre_merge);
        if (it == q.end() || *it != pre_merge) return std::nullopt;
        return static_cast<std::size_t>(it - q.begin());
    }
};

enum class MergeMode { one_side, both_sides, baseline_tome };
enum class ParamSource { previous_layer_cache, current_projection };
enum class SelectionRule { outermost_first };
/// Where the gain at the merge target (the denominator of the compensation) comes from.
enum class TargetGain { source, current_layer };
enum class CompensationSolve { least_squares, channel_mean_ratio };

inline const char* to_string(MergeMode m) {
    switch (m) {
        case MergeMode::one_side: return "one_side";
        case MergeMode::both_sides: return "both_sides";
        case MergeMode::baseline_tome: return "baseline";
    }
    return "?";
}

inline MergeMode parse_merge_mode(const std::string& s) {
    if (s == "one_side") return MergeMode::one_side;
    if (s == "both_sides") return MergeMode::both_sides;
    if (s == "baseline" || s == "baseline_tome") return MergeMode::baseline_tome;
    throw InvalidInput("unknown merge mode '" + s + "'");
}

inline ParamSource parse_param_source(const std::string& s) {
    if (s == "previous_layer_cache") return ParamSource::previous_layer_cache;
    if (s == "current_projection") return ParamSource::current_projection;
    throw InvalidInput("unknown param source '" + s + "'");
}

inline const char* to_string(ParamSource s) {
    return s == ParamSource::previous_layer_cache ? "previous_layer_cache" : "current_projection";
}

/// Tokens removed at one layer: `left` on the pre-class side, `right` after it.
/// For the similarity baseline only the total is meaningful.
struct LayerReduction {
    std::size_t left = 0;
    std::size_t right = 0;
    std::size_t total() const { return left + right; }
    bool operator==(const LayerReduction&) const = default;
};

struct MergePlan {
    MergeMode mode = MergeMode::both_sides;
    SelectionRule selection = SelectionRule::outermost_first;
    ParamSource source = ParamSource::previous_layer_cache;
    std::vector<LayerReduction> layers;

    std::size_t depth() const { return layers.size(); }
    std::size_t total() const {
        std::size_t s = 0;
        for (const auto& l : layers) s += l.total();
        return s;
    }
    LayerReduction at(std::size_t layer) const {
        return layer < layers.size() ? layers[layer] : LayerReduction{};
    }
    bool empty() const { return total() == 0; }
};

struct ScheduleOptions {
    std::size_t start_layer = 1;  // first layer that merges; 1 guarantees a previous-layer cache
    ParamSource source = ParamSource::previous_layer_cache;
};

namespace detail {
inline std::vector<std::size_t> spread(std::size_t total, std::size_t slots) {
    std::vector<std::size_t> out(slots, slots ? total / slots : 0);
    for (std::size_t i = 0; i < (slots ? total % slots : 0); ++i) ++out[i];
    return out;
}
}  // namespace detail

/// Spread round(L0 * rate) reductions as evenly as possible over the merging layers,
/// earlier layers taking the remainder. both_sides splits the total between the two
/// sides (left takes the odd token); one_side and the baseline put everything in `left`.
inline MergePlan plan_schedule(std::size_t initial_length, std::size_t cls_index, double rate,
                               std::size_t depth, MergeMode mode, const ScheduleOptions& opts = {}) {
    require(rate >= 0.0 && rate < 1.0, "plan_schedule: rate must lie in [0, 1)");
    require(cls_index < initial_length, "plan_schedule: class index out of range");
    MergePlan plan;
    plan.mode = mode;
    plan.source = opts.source;
    plan.layers.assign(depth, LayerReduction{});
    const auto total = static_cast<std::size_t>(std::llround(static_cast<double>(initial_length) * rate));
    if (total == 0) return plan;
    require(opts.start_layer < depth, "plan_schedule: no layer available for merging");
    const std::size_t slots = depth - opts.start_layer;
    const std::size_t left_cap = cls_index;
    const std::size_t right_cap = initial_length - 1 - cls_index;

    std::size_t left_total = total;
    std::size_t right_total = 0;
    if (mode == MergeMode::both_sides) {
        left_total = (total + 1) / 2;
        right_total = total / 2;
    }
    if (mode == MergeMode::baseline_tome) {
        require(total < initial_length, "plan_schedule: baseline cannot remove every token");
    } else {
        require(left_total <= left_cap && right_total <= right_cap,
                "plan_schedule: reduction exceeds the tokens available beside the class token");
    }
    const auto l = detail::spread(left_total, slots);
    const auto r = detail::spread(right_total, slots);
    for (std::size_t i = 0; i < slots; ++i) plan.layers[opts.start_layer + i] = {l[i], r[i]};
    return plan;
}

/// Sequence length entering each layer after that layer's merge.
inline std::vector<std::size_t> planned_lengths(const MergePlan& plan, std::size_t initial_length) {
    std::vector<std::size_t> out;
    out.reserve(plan.depth());
    std::size_t len = initial_length;
    for (const auto& l : plan.layers) {
        require(l.total() < len, "plan removes every token");
        len -= l.total();
        out.push_back(len);
    }
    return out;
}

struct ReducedSelection {
    std::vector<std::size_t> left;   // outermost first
    std::vector<std::size_t> right;  // outermost first
};

inline ReducedSelection select_reduced(std::size_t seq_len, std::size_t cls_index,
                                       std::size_t left_count, std::size_t right_count) {
    require(cls_index < seq_len, "select_reduced: class index out of range");
    require(left_count <= cls_index, "select_reduced: count exceeds the pre-class side");
    require(right_count <= seq_len - 1 - cls_index, "select_reduced: count exceeds the post-class side");
    ReducedSelection sel;
    for (std::size_t i = 0; i < left_count; ++i) sel.left.push_back(i);
    for (std::size_t i = 0; i < right_count; ++i) sel.right.push_back(seq_len - 1 - i);
    return sel;
}

inline ReducedSelection select_reduced(std::size_t seq_len, std::size_t cls_index,
                                       std::size_t count_per_direction, MergeMode mode) {
    require(mode != MergeMode::baseline_tome, "select_reduced: positional selection only");
    return select_reduced(seq_len, cls_index, count_per_direction,
                          mode == MergeMode::both_sides ? count_per_direction : 0);
}

struct MergeOptions {
    CompensationSolve solve = CompensationSolve::least_squares;
    TargetGain target_gain = TargetGain::source;
    /// Rows of the target gain whose squared norm is at or below this are degenerate.
    double eps_div = 1e-12;
};

template <typename T = double>
struct MergeOutcome {
    Vec<T> token;
    Mat<T> compensation;  // T[d, n]: decayed contribution of the reduced tokens at the target
    double residual = 0.0;  // || b_bar_target * (x* - x_target) - T ||_F
    std::size_t degenerate_rows = 0;
    std::size_t target = 0;
    std::vector<std::size_t> reduced;  // pre-merge positions, nearest to target last
};

namespace detail {

/// Fold `reduced` (a contiguous run ending next to `target` in scan order) into the token at `target`.
template <typename T>
MergeOutcome<T> fold_into_target(std::span<const Vec<T>> tokens, std::size_t target,
                                 std::vector<std::size_t> reduced,
                                 std::span<const DiscretizedStep<T>> src, Direction dir,
                                 const MergeOptions& opts, const Mat<T>* target_b_bar) {
    require(src.size() == tokens.size(), "merge: parameter source does not cover the sequence");
    require(target < tokens.size(), "merge: target out of range");
    const Mat<T>& gain = target_b_bar ? *target_b_bar : src[target].b_bar;
    const Eigen::Index dm = gain.rows();
    const Eigen::Index ds = gain.cols();
    require(tokens[target].size() == dm, "merge: token length != parameter rows");

    MergeOutcome<T> out;
    out.target = target;
    out.reduced = reduced;
    out.token = tokens[target];
    // accumulated state of the reduced run, then one decay step into the target
    Mat<T> g = Mat<T>::Zero(dm, ds);
    for (std::size_t p : reduced) {
        require(src[p].a_bar.rows() == dm && src[p].a_bar.cols() == ds, "merge: parameter shape mismatch");
        g = (src[p].a_bar.array() * g.array() + src[p].b_bar.array().colwise() * tokens[p].array()).matrix();
    }
    out.compensation = (src[target].a_bar.array() * g.array()).matrix();
    (void)dir;

    double residual_sq = 0.0;
    for (Eigen::Index d = 0; d < dm; ++d) {
        const auto row = gain.row(d);
        const auto comp = out.compensation.row(d);
        const double den = static_cast<double>(row.squaredNorm());
        T shift = T(0);
        if (den <= opts.eps_div) {
            ++out.degenerate_rows;
        } else if (opts.solve == CompensationSolve::least_squares) {
            shift = static_cast<T>(static_cast<double>(row.dot(comp)) / den);
        } else {
            double acc = 0.0;
            int used = 0;
            for (Eigen::Index n = 0; n < ds; ++n) {
                if (std::abs(static_cast<double>(row(n))) <= std::sqrt(opts.eps_div)) continue;
                acc += static_cast<double>(comp(n)) / static_cast<double>(row(n));
                ++used;
            }
            shift = used ? static_cast<T>(acc / used) : T(0);
        }
        out.token(d) += shift;
        residual_sq += static_cast<double>((row * shift - comp).squaredNorm());
    }
    out.residual = std::sqrt(residual_sq);
    return out;
}

}  // namespace detail

/// Fold the reduced tokens between q_{k-1} and q_k into x_{q_k} (forward direction).
/// `src` holds the forward-direction discretized parameters of every pre-merge position.
template <typename T>
MergeOutcome<T> merge_fwd(std::span<const Vec<T>> tokens, const RetainedIndexSet& retained,
                          std::size_t k, std::span<const DiscretizedStep<T>> src,
                          const MergeOptions& opts = {}, const Mat<T>* target_b_bar = nullptr) {
    require(retained.length == tokens.size(), "merge_fwd: retained set built for another length");
    require(k < retained.size(), "merge_fwd: retained index out of range");
    const std::size_t target = retained.q[k];
    std::vector<std::size_t> reduced;
    for (auto p = retained.previous(k) + 1; p < static_cast<std::ptrdiff_t>(target); ++p)
        reduced.push_back(static_cast<std::size_t>(p));
    return detail::fold_into_target(tokens, target, std::move(reduced), src, Direction::forward, opts,
                                    target_b_bar);
}

/// Mirror of merge_fwd: folds the reduced tokens between q_k and q_{k+1} into x_{q_k}
/// using backward-direction parameters.
template <typename T>
MergeOutcome<T> merge_bwd(std::span<const Vec<T>> tokens, const RetainedIndexSet& retained,
                          std::size_t k, std::span<const DiscretizedStep<T>> src,
                          const MergeOptions& opts = {}, const Mat<T>* target_b_bar = nullptr) {
    require(retained.length == tokens.size(), "merge_bwd: retained set built for another length");
    require(k < retained.size(), "merge_bwd: retained index out of range");
    const std::size_t target = retained.q[k];
    std::vector<std::size_t> reduced;
    for (auto p = retained.next(k) - 1; p > static_cast<std::ptrdiff_t>(target); --p)
        reduced.push_back(static_cast<std::size_t>(p));
    return detail::fold_into_target(tokens, target, std::move(reduced), src, Direction::backward, opts,
                                    target_b_bar);
}

struct MergeRecord {
    std::size_t layer = 0;
    Direction direction = Direction::forward;
    std::vector<std::size_t> reduced;  // original indices
    std::size_t target = 0;            // original index
    double residual = 0.0;
    std::size_t degenerate_rows = 0;
    Mat<double> compensation;

    bool operator==(const MergeRecord& o) const {
        return layer == o.layer && direction == o.direction && reduced == o.reduced &&
               target == o.target && residual == o.residual;
    }
};

template <typename T = double>
struct MergeApplication {
    TokenSequence<T> seq;
    std::vector<MergeRecord> records;
    RetainedIndexSet retained;
};

/// Reduce `seq` per one layer of a positional plan. `src` must cover every position of
/// `seq`; `current` (optional) supplies current-layer gains at the merge targets when
/// opts.target_gain == TargetGain::current_layer.
template <typename T>
MergeApplication<T> apply_merge(const TokenSequence<T>& seq, const LayerReduction& reduction,
                                MergeMode mode, const LayerCache<T>& src, const MergeOptions& opts = {},
                                const LayerCache<T>* current = nullptr) {
    seq.validate();
    require(mode != MergeMode::baseline_tome, "apply_merge: use the similarity baseline for this mode");
    require(mode == MergeMode::both_sides || reduction.right == 0,
            "apply_merge: one_side plans cannot reduce the post-class side");
    MergeApplication<T> out;
    if (reduction.total() == 0) {
        out.seq = seq;
        out.retained = RetainedIndexSet::from_retained(seq.size(), [&] {
            std::vector<std::size_t> all(seq.size());
            std::iota(all.begin(), all.end(), std::size_t{0});
            return all;
        }());
        return out;
    }
    require(src.size() == seq.size() && src.fwd.size() == seq.size() && src.bwd.size() == seq.size(),
            "apply_merge: parameter cache does not cover the sequence");
    require(src.origin == seq.origin, "apply_merge: parameter cache is for different positions");
    if (opts.target_gain == TargetGain::current_layer)
        require(current && current->origin == seq.origin, "apply_merge: current-layer gains missing");

    const ReducedSelection sel = select_reduced(seq.size(), seq.cls_index, reduction.left, reduction.right);
    std::vector<std::size_t> reduced = sel.left;
    reduced.insert(reduced.end(), sel.right.begin(), sel.right.end());
    for (std::size_t r : reduced) require(r != seq.cls_index, "apply_merge: the class token cannot be reduced");
    out.retained = RetainedIndexSet::from_reduced(seq.size(), reduced);
    const RetainedIndexSet& ret = out.retained;
    const std::size_t cls_k = *ret.position_of(seq.cls_index);

    std::vector<Vec<T>> merged;
    merged.reserve(ret.size());
    for (std::size_t k = 0; k < ret.size(); ++k) merged.push_back(seq.tokens[ret.q[k]]);

    auto record = [&](const MergeOutcome<T>& m, Direction dir) {
        MergeRecord r;
        r.layer = seq.layer_index;
        r.direction = dir;
        for (std::size_t p : m.reduced) r.reduced.push_back(seq.origin[p]);
        std::sort(r.reduced.begin(), r.reduced.end());
        r.target = seq.origin[m.target];
        r.residual = m.residual;
        r.degenerate_rows = m.degenerate_rows;
        r.compensation = m.compensation.template cast<double>();
        out.records.push_back(std::move(r));
    };

    for (std::size_t k = 0; k <= cls_k; ++k) {
        if (ret.gap_before(k) == 0) continue;
        const Mat<T>* gain = current ? &current->fwd[ret.q[k]].b_bar : nullptr;
        auto m = merge_fwd<T>(seq.tokens, ret, k, src.fwd, opts,
                              opts.target_gain == TargetGain::current_layer ? gain : nullptr);
        merged[k] += m.token - seq.tokens[ret.q[k]];
        record(m, Direction::forward);
    }
    for (std::size_t k = cls_k; k < ret.size(); ++k) {
        if (ret.gap_after(k) == 0) continue;
        const Mat<T>* gain = current ? &current->bwd[ret.q[k]].b_bar : nullptr;
        auto m = merge_bwd<T>(seq.tokens, ret, k, src.bwd, opts,
                              opts.target_gain == TargetGain::current_layer ? gain : nullptr);
        merged[k] += m.token - seq.tokens[ret.q[k]];
        record(m, Direction::backward);
    }

    out.seq.tokens = std::move(merged);
    out.seq.cls_index = cls_k;
    out.seq.layer_index = seq.layer_index;
    out.seq.origin.reserve(ret.size());
    for (std::size_t p : ret.q) out.seq.origin.push_back(seq.origin[p]);
    return out;
}

// ---------------------------------------------------------------------------
// Merge record text format: one CSV line per record,
//   layer,direction,reduced,target,residual
// with reduced original indices joined by ';'.

inline std::string merge_records_header() { return "layer,direction,reduced,target,residual"; }

inline std::string format_merge_record(const MergeRecord& r) {
    std::ostringstream os;
    os << r.layer << ',' << to_string(r.direction) << ',';
    for (std::size_t i = 0; i < r.reduced.size(); ++i) os << (i ? ";" : "") << r.reduced[i];
    os << ',' << r.target << ',' << format_double(r.residual);
    return os.str();
}

inline MergeRecord parse_merge_record(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    require(fields.size() == 5, "merge record: expected 5 fields in '" + line + "'");
    MergeRecord r;
    try {
        r.layer = std::stoul(fields[0]);
        require(fields[1] == "fwd" || fields[1] == "bwd", "merge record: bad direction '" + fields[1] + "'");
        r.direction = fields[1] == "fwd" ? Direction::forward : Direction::backward;
        std::stringstream rs(fields[2]);
        std::string idx;
        while (std::getline(rs, idx, ';'))
            if (!idx.empty()) r.reduced.push_back(std::stoul(idx));
        r.target = std::stoul(fields[3]);
        r.residual = std::stod(fields[4]);
    } catch (const std::logic_error& e) {
        if (dynamic_cast<const InvalidInput*>(&e)) throw;
        throw InvalidInput("merge record: malformed field in '" + line + "'");
    }
    return r;
}

}  // namespace stmssm

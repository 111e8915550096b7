#pragma once

// Seeded invariant suites shared by the `verify` command and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "stmssm/loss_analysis.hpp"
#include "stmssm/random.hpp"
#include "stmssm/ssm_core.hpp"
#include "stmssm/token_merge.hpp"

namespace stmssm {

struct SuiteResult {
    std::string name;
    std::string invariant;
    std::size_t instances = 0;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct ScanInstance {
    SelectiveProjections<double> proj;
    std::vector<Vec<double>> x;
    std::vector<DiscretizedStep<double>> steps;
    Direction dir = Direction::forward;
};

struct InstanceShape {
    std::size_t max_d_model = 8;
    std::size_t max_d_state = 16;
    std::size_t min_length = 1;
    std::size_t max_length = 64;
    std::size_t fixed_d_state = 0;  // nonzero pins d_state
    std::size_t fixed_d_model = 0;  // nonzero pins d_model
};

inline ScanInstance random_instance(std::uint64_t seed, const InstanceShape& shape = {},
                                    const ProjectionInit& init = {}) {
    Rng rng(seed);
    ScanInstance inst;
    const auto dm = static_cast<Eigen::Index>(
        shape.fixed_d_model ? shape.fixed_d_model : rng.uniform_int(1, static_cast<int>(shape.max_d_model)));
    const auto ds = static_cast<Eigen::Index>(
        shape.fixed_d_state ? shape.fixed_d_state : rng.uniform_int(1, static_cast<int>(shape.max_d_state)));
    const auto len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(shape.min_length), static_cast<int>(shape.max_length)));
    inst.dir = rng.uniform_int(0, 1) ? Direction::backward : Direction::forward;
    inst.proj = make_projections<double>(dm, ds, derive_seed(seed, 1), init);
    for (std::size_t t = 0; t < len; ++t) inst.x.push_back(rng.normal_vector<double>(dm, 1.0));
    inst.steps = compute_steps<double>(inst.x, inst.proj);
    return inst;
}

namespace detail {

inline double max_abs_diff(const Mat<double>& a, const Mat<double>& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

/// A contiguous block of `count` positions feeding `target` in scan order.
inline std::vector<std::size_t> block_before(std::size_t target, std::size_t count, Direction dir) {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i <= count; ++i) out.push_back(dir == Direction::forward ? target - i : target + i);
    std::sort(out.begin(), out.end());
    return out;
}

/// Merged tokens for one direction: every reduced run is folded into the retained
/// token that follows it in scan order.
inline std::vector<Vec<double>> fold_all(const std::vector<Vec<double>>& x, const RetainedIndexSet& ret,
                                         std::span<const DiscretizedStep<double>> src, Direction dir,
                                         const MergeOptions& opts = {}) {
    std::vector<Vec<double>> merged;
    for (std::size_t k = 0; k < ret.size(); ++k) {
        const bool has_run = dir == Direction::forward ? ret.gap_before(k) > 0 : ret.gap_after(k) > 0;
        if (!has_run) {
            merged.push_back(x[ret.q[k]]);
            continue;
        }
        merged.push_back(dir == Direction::forward ? merge_fwd<double>(x, ret, k, src, opts).token
                                                   : merge_bwd<double>(x, ret, k, src, opts).token);
    }
    return merged;
}

template <typename V>
std::vector<V> gather(const std::vector<V>& v, const std::vector<std::size_t>& idx) {
    std::vector<V> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(v[i]);
    return out;
}

}  // namespace detail

/// Recurrent scan against the explicit closed-form sum.
inline SuiteResult suite_scan(std::size_t instances, double tol, std::uint64_t seed) {
    SuiteResult r{"scan", "recurrent scan == closed form", instances, 0.0, tol, false};
    for (std::size_t i = 0; i < instances; ++i) {
        const auto inst = random_instance(derive_seed(seed, 1000 + i));
        const auto rec = scan_recurrent<double>(inst.steps, inst.x, inst.dir);
        const auto ref = scan_closed_form<double>(inst.steps, inst.x, inst.dir);
        for (std::size_t t = 0; t < inst.x.size(); ++t) {
            r.max_error = std::max(r.max_error, detail::max_abs_diff(rec.states[t], ref.states[t]));
            r.max_error = std::max(r.max_error, (rec.outputs[t] - ref.outputs[t]).cwiseAbs().maxCoeff());
        }
    }
    r.passed = r.max_error < tol;
    return r;
}

/// Outputs rebuilt as sum_j alpha[d, i, j] x_j[d] against the recurrence.
inline SuiteResult suite_attention(std::size_t instances, double tol, std::uint64_t seed) {
    SuiteResult r{"attention", "hidden attention reproduces scan outputs", instances, 0.0, tol, false};
    for (std::size_t i = 0; i < instances; ++i) {
        const auto inst = random_instance(derive_seed(seed, 2000 + i));
        const auto rec = scan_recurrent<double>(inst.steps, inst.x, inst.dir);
        const auto att = hidden_attention<double>(inst.steps, inst.dir, true);
        const std::size_t len = inst.x.size();
        for (std::size_t t = 0; t < len; ++t) {
            for (Eigen::Index d = 0; d < inst.proj.d_model; ++d) {
                double y = 0.0;
                for (std::size_t j = 0; j < len; ++j)
                    y += att.per_channel[static_cast<std::size_t>(d)](static_cast<Eigen::Index>(t),
                                                                     static_cast<Eigen::Index>(j)) *
                         inst.x[j](d);
                r.max_error = std::max(r.max_error, std::abs(y - rec.outputs[t](d)));
            }
        }
    }
    r.passed = r.max_error < tol;
    return r;
}

/// d_state = 1 with the true parameters: a gap-aware scan over merged tokens reproduces
/// the unmerged states at every retained position.
inline SuiteResult suite_exactness(std::size_t instances, double tol, std::uint64_t seed) {
    SuiteResult r{"exactness", "merged states == unmerged states (d_state = 1)", instances, 0.0, tol, false};
    InstanceShape shape;
    shape.fixed_d_state = 1;
    shape.min_length = 4;
    for (std::size_t i = 0; i < instances; ++i) {
        const std::uint64_t s = derive_seed(seed, 3000 + i);
        const auto inst = random_instance(s, shape);
        const std::size_t len = inst.x.size();
        Rng rng(derive_seed(s, 7));
        // the position last in scan order always survives so every run has a target
        const std::size_t anchor = inst.dir == Direction::forward ? len - 1 : 0;
        std::vector<std::size_t> reduced;
        for (std::size_t p = 0; p < len; ++p)
            if (p != anchor && rng.uniform() < 0.35) reduced.push_back(p);
        const auto ret = RetainedIndexSet::from_reduced(len, reduced);
        const auto merged = detail::fold_all(inst.x, ret, inst.steps, inst.dir);
        const auto gaps = gap_products_for<double>(inst.steps, ret.q, inst.dir);
        const auto steps_ret = detail::gather(inst.steps, ret.q);
        const auto h = gap_aware_scan<double>(steps_ret, merged, gaps, inst.dir);
        const auto full = scan_recurrent<double>(inst.steps, inst.x, inst.dir);
        for (std::size_t k = 0; k < ret.size(); ++k) {
            const double ref = full.states[ret.q[k]].norm();
            const double err = (h.states[k] - full.states[ret.q[k]]).norm() / std::max(ref, 1e-300);
            r.max_error = std::max(r.max_error, err);
        }
    }
    r.passed = r.max_error < tol;
    return r;
}

struct SingleMergeCase {
    ScanInstance inst;
    std::size_t target = 0;
    std::vector<std::size_t> reduced;
    std::vector<Vec<double>> x_merged;         // merged sequence tokens
    std::vector<std::size_t> origin;            // original index per merged position
    std::vector<DiscretizedStep<double>> steps_merged;
    HiddenTrajectory<double> full;
    HiddenTrajectory<double> merged;
};

/// One merge of a short block into its neighbour, with the compensation drawn from a
/// different parameter set (a stand-in for a previous layer's cache) so that the merge
/// leaves a nonzero loss. The merged run recomputes its own parameters.
inline SingleMergeCase single_merge_case(std::uint64_t seed, const InstanceShape& shape = {},
                                         const ProjectionInit& init = {}) {
    SingleMergeCase c;
    InstanceShape sh = shape;
    sh.min_length = std::max<std::size_t>(sh.min_length, 8);
    c.inst = random_instance(seed, sh, init);
    const std::size_t len = c.inst.x.size();
    Rng rng(derive_seed(seed, 11));
    const auto count = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const Direction dir = c.inst.dir;
    c.target = dir == Direction::forward
                   ? static_cast<std::size_t>(rng.uniform_int(static_cast<int>(count), static_cast<int>(len / 2)))
                   : static_cast<std::size_t>(rng.uniform_int(static_cast<int>(len / 2), static_cast<int>(len - 1 - count)));
    c.reduced = detail::block_before(c.target, count, dir);
    const auto src_proj = make_projections<double>(c.inst.proj.d_model, c.inst.proj.d_state, derive_seed(seed, 12), init);
    const auto src = compute_steps<double>(c.inst.x, src_proj);
    const auto ret = RetainedIndexSet::from_reduced(len, c.reduced);
    c.x_merged = detail::fold_all(c.inst.x, ret, src, dir);
    c.origin = ret.q;
    c.steps_merged = compute_steps<double>(c.x_merged, c.inst.proj);
    c.full = scan_recurrent<double>(c.inst.steps, c.inst.x, dir);
    c.merged = scan_recurrent<double>(c.steps_merged, c.x_merged, dir);
    return c;
}

/// Downstream of a single merge the loss evolves as L_{t+1} = a_bar_{t+1} * L_t.
inline SuiteResult suite_fading(std::size_t instances, double tol, std::uint64_t seed) {
    SuiteResult r{"fading", "downstream loss ratio == a_bar elementwise", instances, 0.0, tol, true};
    FadingOptions fo;
    fo.rel_tol = tol;
    for (std::size_t i = 0; i < instances; ++i) {
        const auto c = single_merge_case(derive_seed(seed, 4000 + i));
        const AlignedTrajectory<double> merged{&c.merged, c.origin};
        const auto rep = verify_fading<double>(c.full, merged, c.inst.steps, c.target, fo);
        r.max_error = std::max(r.max_error, rep.max_violation);
        if (!rep.passed) r.passed = false;
    }
    r.passed = r.passed && r.max_error < tol;
    return r;
}

/// final = merging + sum of propagated removal losses, with the merging loss measured
/// independently as (pure-deletion state - merged state).
inline SuiteResult suite_decomposition(std::size_t instances, double tol, std::uint64_t seed) {
    SuiteResult r{"decomposition", "final == merging + propagated removal", instances, 0.0, tol, false};
    for (std::size_t i = 0; i < instances; ++i) {
        const std::uint64_t s = derive_seed(seed, 5000 + i);
        InstanceShape shape;
        shape.min_length = 8;
        const auto inst = random_instance(s, shape);
        const std::size_t len = inst.x.size();
        const Direction dir = inst.dir;
        Rng rng(derive_seed(s, 21));
        const auto count = static_cast<std::size_t>(rng.uniform_int(1, 3));
        const std::size_t target =
            dir == Direction::forward
                ? static_cast<std::size_t>(rng.uniform_int(static_cast<int>(count), static_cast<int>(len - 1)))
                : static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(len - 1 - count)));
        const auto reduced = detail::block_before(target, count, dir);
        const auto ret = RetainedIndexSet::from_reduced(len, reduced);
        const auto src_proj = make_projections<double>(inst.proj.d_model, inst.proj.d_state, derive_seed(s, 22));
        const auto src = compute_steps<double>(inst.x, src_proj);

        const auto merged_x = detail::fold_all(inst.x, ret, src, dir);
        const auto kept_x = detail::gather(inst.x, ret.q);
        const auto steps_ret = detail::gather(inst.steps, ret.q);
        const auto gaps = gap_products_for<double>(inst.steps, ret.q, dir);
        const auto full = scan_recurrent<double>(inst.steps, inst.x, dir);
        const auto h_merged = gap_aware_scan<double>(steps_ret, merged_x, gaps, dir);
        const auto h_deleted = gap_aware_scan<double>(steps_ret, kept_x, gaps, dir);

        std::vector<Mat<double>> removal;
        std::vector<HiddenTrajectory<double>> single_runs;
        std::vector<std::vector<std::size_t>> single_origins;
        for (std::size_t p : reduced) {
            const auto one = RetainedIndexSet::from_reduced(len, {p});
            const auto g1 = gap_products_for<double>(inst.steps, one.q, dir);
            single_runs.push_back(gap_aware_scan<double>(detail::gather(inst.steps, one.q),
                                                         detail::gather(inst.x, one.q), g1, dir));
            single_origins.push_back(one.q);
        }
        for (std::size_t j = 0; j < reduced.size(); ++j) {
            const AlignedTrajectory<double> aligned{&single_runs[j], single_origins[j]};
            removal.push_back(removal_loss<double>(full, aligned, inst.steps, reduced[j]));
        }
        // every retained position downstream of the merge carries the decomposition
        for (std::size_t k = 0; k < ret.size(); ++k) {
            const std::size_t t = ret.q[k];
            if (dir == Direction::forward ? t < target : t > target) continue;
            std::vector<Mat<double>> props;
            for (std::size_t p : reduced) props.push_back(decay_product<double>(inst.steps, p, t, dir));
            const Mat<double> final = full.states[t] - h_merged.states[k];
            const Mat<double> merging = h_deleted.states[k] - h_merged.states[k];
            Mat<double> rebuilt = merging;
            for (std::size_t j = 0; j < removal.size(); ++j)
                rebuilt += (props[j].array() * removal[j].array()).matrix();
            r.max_error = std::max(r.max_error, detail::max_abs_diff(rebuilt, final));
            const Mat<double> via_definition = merging_loss<double>(final, removal, props);
            r.max_error = std::max(r.max_error, detail::max_abs_diff(via_definition, merging));
        }
    }
    r.passed = r.max_error < tol;
    return r;
}

struct DecayFitExperiment {
    DecayFit fit;
    std::vector<double> norms;
    std::size_t distances = 0;
};

/// Loss norm against distance downstream of a merge in a constant-timescale layer.
inline DecayFitExperiment constant_delta_decay(std::uint64_t seed, std::size_t d_model = 8, std::size_t d_state = 4,
                                               std::size_t length = 48, double delta_bias = -2.0) {
    ProjectionInit init;
    init.delta_weight_scale = 0.0;
    init.delta_bias = delta_bias;
    InstanceShape shape;
    shape.fixed_d_model = d_model;
    shape.fixed_d_state = d_state;
    shape.min_length = length;
    shape.max_length = length;
    auto c = single_merge_case(seed, shape, init);
    // measure forward from the merge point regardless of the drawn direction
    DecayFitExperiment e;
    const Direction dir = c.inst.dir;
    const AlignedTrajectory<double> merged{&c.merged, c.origin};
    if (dir == Direction::forward) {
        for (std::size_t p = c.target; p < c.full.size(); ++p)
            e.norms.push_back((c.full.states[p] - merged.state(*merged.find(p))).norm());
    } else {
        for (std::size_t p = c.target + 1; p-- > 0;)
            e.norms.push_back((c.full.states[p] - merged.state(*merged.find(p))).norm());
    }
    e.fit = cls_decay_fit(e.norms);
    e.distances = e.fit.points;
    return e;
}

}  // namespace stmssm

#pragma once

// Hidden-state perturbation measures for merged runs: removal, final and merging
// losses, the downstream fading check, the distance-decay fit, heatmap exports and
// layer-wise loss curves.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "stmssm/csv.hpp"
#include "stmssm/forward_stack.hpp"
#include "stmssm/ssm_core.hpp"
#include "stmssm/tensor.hpp"

namespace stmssm {

inline constexpr double kEpsRatio = 1e-12;

/// A trajectory together with the original index of each of its positions.
template <typename T = double>
struct AlignedTrajectory {
    const HiddenTrajectory<T>* traj = nullptr;
    std::span<const std::size_t> origin;

    std::optional<std::size_t> find(std::size_t original) const {
        auto it = std::lower_bound(origin.begin(), origin.end(), original);
        if (it == origin.end() || *it != original) return std::nullopt;
        return static_cast<std::size_t>(it - origin.begin());
    }
    const Mat<T>& state(std::size_t pos) const { return traj->states.at(pos); }
};

/// Elementwise product of a_bar over the positions strictly after `from` up to and
/// including `to`, in scan order for `dir`. An empty range gives ones.
template <typename T>
Mat<T> decay_product(std::span<const DiscretizedStep<T>> steps, std::size_t from, std::size_t to,
                     Direction dir) {
    require(from < steps.size() && to < steps.size(), "decay_product: position out of range");
    Mat<T> p = Mat<T>::Ones(steps[to].a_bar.rows(), steps[to].a_bar.cols());
    if (dir == Direction::forward) {
        require(from <= to, "decay_product: forward range runs backwards");
        for (std::size_t k = from + 1; k <= to; ++k) p = (p.array() * steps[k].a_bar.array()).matrix();
    } else {
        require(to <= from, "decay_product: backward range runs forwards");
        for (std::size_t k = to; k < from; ++k) p = (p.array() * steps[k].a_bar.array()).matrix();
    }
    return p;
}

/// Gap products for a gap-aware scan of `retained` positions (pre-merge indices) in `dir`.
template <typename T>
std::vector<Mat<T>> gap_products_for(std::span<const DiscretizedStep<T>> steps,
                                     std::span<const std::size_t> retained, Direction dir) {
    std::vector<Mat<T>> out(retained.size());
    for (std::size_t k = 0; k < retained.size(); ++k) {
        const std::size_t q = retained[k];
        Mat<T> p = Mat<T>::Ones(steps[q].a_bar.rows(), steps[q].a_bar.cols());
        if (dir == Direction::forward) {
            const std::size_t lo = k == 0 ? 0 : retained[k - 1] + 1;
            for (std::size_t j = lo; j <= q; ++j) p = (p.array() * steps[j].a_bar.array()).matrix();
        } else {
            const std::size_t hi = k + 1 == retained.size() ? steps.size() - 1 : retained[k + 1] - 1;
            for (std::size_t j = q; j <= hi; ++j) p = (p.array() * steps[j].a_bar.array()).matrix();
        }
        out[k] = std::move(p);
    }
    return out;
}

/// h_full - h_removed at an original position. `h_full` covers every position with the
/// identity origin. A position absent from the reduced run is compared against the
/// state of the last surviving position before it in scan order, decayed by the full
/// run's a_bar up to the position (zero when nothing survives before it).
template <typename T>
Mat<T> removal_loss(const HiddenTrajectory<T>& h_full, const AlignedTrajectory<T>& h_removed,
                    std::span<const DiscretizedStep<T>> steps_full, std::size_t pos) {
    require(pos < h_full.size(), "removal_loss: position outside the full run");
    require(steps_full.size() == h_full.size(), "removal_loss: steps do not cover the full run");
    if (auto k = h_removed.find(pos)) return h_full.states[pos] - h_removed.state(*k);

    const Direction dir = h_full.direction;
    std::optional<std::size_t> survivor;
    if (dir == Direction::forward) {
        for (std::size_t s = pos; s-- > 0;)
            if (h_removed.find(s)) { survivor = s; break; }
    } else {
        for (std::size_t s = pos + 1; s < h_full.size(); ++s)
            if (h_removed.find(s)) { survivor = s; break; }
    }
    if (!survivor) return h_full.states[pos];
    const Mat<T> decay = decay_product(steps_full, *survivor, pos, dir);
    return h_full.states[pos] - (decay.array() * h_removed.state(*h_removed.find(*survivor)).array()).matrix();
}

template <typename T>
Mat<T> state_difference(const AlignedTrajectory<T>& a, const AlignedTrajectory<T>& b, std::size_t original) {
    auto ia = a.find(original);
    auto ib = b.find(original);
    require(ia && ib, "state_difference: position " + std::to_string(original) + " is not present in both runs");
    return a.state(*ia) - b.state(*ib);
}

template <typename T = double>
struct FinalLoss {
    Mat<T> fwd;
    Mat<T> bwd;
    Mat<T> total;  // summed over directions
};

template <typename T>
FinalLoss<T> final_loss(const AlignedTrajectory<T>& full_fwd, const AlignedTrajectory<T>& full_bwd,
                        const AlignedTrajectory<T>& merged_fwd, const AlignedTrajectory<T>& merged_bwd,
                        std::size_t original) {
    FinalLoss<T> f;
    f.fwd = state_difference(full_fwd, merged_fwd, original);
    f.bwd = state_difference(full_bwd, merged_bwd, original);
    f.total = f.fwd + f.bwd;
    return f;
}

/// Final loss minus the removal losses carried to the merge target by the homogeneous
/// part of the scan (elementwise decay products).
template <typename T>
Mat<T> merging_loss(const Mat<T>& final, std::span<const Mat<T>> removal_losses,
                    std::span<const Mat<T>> gap_products) {
    require(removal_losses.size() == gap_products.size(),
            "merging_loss: one propagation product per removal loss");
    Mat<T> out = final;
    for (std::size_t i = 0; i < removal_losses.size(); ++i)
        out -= (gap_products[i].array() * removal_losses[i].array()).matrix();
    return out;
}

struct FadingOptions {
    double rel_tol = 1e-9;
    double eps_ratio = kEpsRatio;
    /// Elements whose loss is below this fraction of the hidden-state magnitude are
    /// dominated by rounding in the subtraction and are not used for ratios.
    double conditioning = 1e-6;
};

struct FadingReport {
    std::vector<double> norms;         // ||L|| at distance 0, 1, ... downstream of the merge point
    std::vector<double> norm_ratios;   // ||L_{t+1}|| / ||L_t|| where significant
    std::vector<double> max_decay;     // max(a_bar_{t+1}) per step
    double max_violation = 0.0;        // max relative |L_{t+1} - a_bar_{t+1} L_t| / |a_bar_{t+1} L_t|
    std::size_t checked = 0;           // elementwise ratios checked
    std::size_t significant_steps = 0; // steps where the loss norm is above the noise floor
    bool norms_strictly_decreasing = true;
    bool bound_holds = true;           // ||L_{t+1}|| <= max(a_bar_{t+1}) ||L_t||
    bool passed = true;
};

/// Check L_{t+1} = a_bar_{t+1} * L_t elementwise downstream of a single merge at
/// `merge_pos` (original index). The merged run must be missing only a contiguous
/// block of positions immediately upstream of the merge point.
template <typename T>
FadingReport verify_fading(const HiddenTrajectory<T>& h_full, const AlignedTrajectory<T>& h_merged,
                           std::span<const DiscretizedStep<T>> steps, std::size_t merge_pos,
                           const FadingOptions& opts = {}) {
    const Direction dir = h_full.direction;
    const std::size_t len = h_full.size();
    require(steps.size() == len, "verify_fading: steps do not cover the full run");
    require(merge_pos < len && h_merged.find(merge_pos), "verify_fading: merge point missing from merged run");
    // single-merge precondition
    std::vector<std::size_t> missing;
    for (std::size_t p = 0; p < len; ++p)
        if (!h_merged.find(p)) missing.push_back(p);
    for (std::size_t i = 0; i < missing.size(); ++i) {
        const std::size_t expected = dir == Direction::forward ? merge_pos - missing.size() + i
                                                               : merge_pos + 1 + i;
        require(missing[i] == expected,
                "verify_fading: more than one merge event (reduced positions are not a single "
                "block adjacent to the merge point)");
    }

    FadingReport rep;
    auto loss_at = [&](std::size_t p) { return Mat<T>(h_full.states[p] - h_merged.state(*h_merged.find(p))); };
    auto magnitude = [&](std::size_t p) {
        return Mat<T>(h_full.states[p].cwiseAbs().cwiseMax(h_merged.state(*h_merged.find(p)).cwiseAbs()));
    };
    std::vector<std::size_t> order;
    if (dir == Direction::forward) {
        for (std::size_t p = merge_pos; p < len; ++p) order.push_back(p);
    } else {
        for (std::size_t p = merge_pos + 1; p-- > 0;) order.push_back(p);
    }
    Mat<T> cur = loss_at(order[0]);
    rep.norms.push_back(static_cast<double>(cur.norm()));
    for (std::size_t i = 1; i < order.size(); ++i) {
        const std::size_t p0 = order[i - 1];
        const std::size_t p1 = order[i];
        Mat<T> next = loss_at(p1);
        const Mat<T>& a = steps[p1].a_bar;
        const Mat<T> mag = magnitude(p0).cwiseMax(magnitude(p1));
        const Mat<T> predicted = (a.array() * cur.array()).matrix();
        bool step_significant = false;
        double floor_sq = 0.0;
        for (Eigen::Index d = 0; d < a.rows(); ++d) {
            for (Eigen::Index n = 0; n < a.cols(); ++n) {
                const double floor = std::max(opts.eps_ratio, opts.conditioning * static_cast<double>(mag(d, n)));
                floor_sq += floor * floor;
                const double lt = std::abs(static_cast<double>(cur(d, n)));
                const double ln = std::abs(static_cast<double>(next(d, n)));
                if (std::min(lt, ln) <= floor) continue;
                const double rel = std::abs(static_cast<double>(next(d, n) - predicted(d, n))) /
                                   std::abs(static_cast<double>(predicted(d, n)));
                rep.max_violation = std::max(rep.max_violation, rel);
                ++rep.checked;
                step_significant = true;
            }
        }
        const double n0 = static_cast<double>(cur.norm());
        const double n1 = static_cast<double>(next.norm());
        rep.norms.push_back(n1);
        rep.max_decay.push_back(static_cast<double>(a.maxCoeff()));
        const double noise = std::sqrt(floor_sq);
        if (step_significant && n0 > noise && n1 > noise) {
            ++rep.significant_steps;
            rep.norm_ratios.push_back(n1 / n0);
            if (!(n1 < n0)) rep.norms_strictly_decreasing = false;
            if (n1 > rep.max_decay.back() * n0 * (1.0 + opts.rel_tol)) rep.bound_holds = false;
        }
        cur = std::move(next);
    }
    rep.passed = rep.max_violation < opts.rel_tol && rep.bound_holds;
    return rep;
}

struct DecayFit {
    bool ok = false;  // false when fewer than 3 usable points
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    double a_bar_estimate = 0.0;
    std::size_t points = 0;
};

/// Least-squares line through (distance, log norm) over points with norm > eps_ratio.
inline DecayFit cls_decay_fit(std::span<const double> distances, std::span<const double> norms,
                              double eps_ratio = kEpsRatio) {
    require(distances.size() == norms.size(), "cls_decay_fit: distances and norms differ in length");
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < norms.size(); ++i)
        if (norms[i] > eps_ratio && std::isfinite(norms[i])) {
            xs.push_back(distances[i]);
            ys.push_back(std::log(norms[i]));
        }
    DecayFit fit;
    fit.points = xs.size();
    if (xs.size() < 3) return fit;
    const double n = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    if (sxx == 0.0) return fit;
    fit.ok = true;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r_squared = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
    fit.a_bar_estimate = std::exp(fit.slope);
    return fit;
}

inline DecayFit cls_decay_fit(std::span<const double> norms_by_distance, double eps_ratio = kEpsRatio) {
    std::vector<double> d(norms_by_distance.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(i);
    return cls_decay_fit(d, norms_by_distance, eps_ratio);
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Per patch position: channel mean of ||h[d, :]||, summed over the given trajectories,
/// with the class token dropped and the rest laid out row-major on the patch grid.
template <typename T>
Mat<double> hidden_norm_grid(std::span<const HiddenTrajectory<T>* const> trajectories, std::size_t cls_index,
                             std::size_t grid_h, std::size_t grid_w) {
    require(!trajectories.empty(), "hidden_norm_grid: no trajectories");
    const std::size_t len = trajectories.front()->size();
    require(len == grid_h * grid_w + 1 && cls_index < len, "hidden_norm_grid: length does not match grid");
    Mat<double> grid = Mat<double>::Zero(static_cast<Eigen::Index>(grid_h), static_cast<Eigen::Index>(grid_w));
    for (const auto* tr : trajectories) {
        require(tr->size() == len, "hidden_norm_grid: trajectories differ in length");
        std::size_t cell = 0;
        for (std::size_t p = 0; p < len; ++p) {
            if (p == cls_index) continue;
            const Mat<T>& h = tr->states[p];
            double v = 0.0;
            for (Eigen::Index d = 0; d < h.rows(); ++d) v += static_cast<double>(h.row(d).norm());
            grid(static_cast<Eigen::Index>(cell / grid_w), static_cast<Eigen::Index>(cell % grid_w)) +=
                v / static_cast<double>(h.rows());
            ++cell;
        }
    }
    return grid;
}

inline void export_heatmap(const Mat<double>& grid, const std::filesystem::path& path) {
    write_file_atomic(path, matrix_to_csv(grid, "c"));
}

template <typename T>
void export_heatmap(const AttentionMatrix<T>& att, const std::filesystem::path& path) {
    write_file_atomic(path, matrix_to_csv(att.alpha, "j"));
}

// ---------------------------------------------------------------------------
// Layer-wise loss curves

struct LossCurveRow {
    std::size_t layer = 0;
    std::size_t position = 0;  // original index
    std::string direction;     // fwd | bwd | sum
    std::string method;        // stm | baseline
    double loss_norm = 0.0;
};

struct LossCurve {
    std::vector<LossCurveRow> rows;
    std::size_t cls_position = 0;

    std::string to_csv() const {
        std::ostringstream os;
        os << "layer,position,direction,method,loss_norm\n";
        for (const auto& r : rows)
            os << r.layer << ',' << r.position << ',' << r.direction << ',' << r.method << ','
               << format_double(r.loss_norm) << '\n';
        return os.str();
    }

    /// Class-token loss norm per layer for one method and direction.
    std::vector<double> cls_column(const std::string& method, const std::string& direction = "sum") const {
        std::vector<double> out;
        for (const auto& r : rows)
            if (r.method == method && r.direction == direction && r.position == cls_position)
                out.push_back(r.loss_norm);
        return out;
    }
};

namespace detail {
template <typename T>
void append_curve(LossCurve& curve, const std::vector<LayerTrace<T>>& full, const std::vector<LayerTrace<T>>& merged,
                  const std::string& method) {
    for (std::size_t l = 0; l < merged.size(); ++l) {
        const LayerTrace<T>& f = full[l];
        const LayerTrace<T>& m = merged[l];
        AlignedTrajectory<T> ff{&f.fwd, f.origin}, fb{&f.bwd, f.origin};
        AlignedTrajectory<T> mf{&m.fwd, m.origin}, mb{&m.bwd, m.origin};
        for (std::size_t p : m.origin) {
            const FinalLoss<T> fl = final_loss(ff, fb, mf, mb, p);
            curve.rows.push_back({l, p, "fwd", method, static_cast<double>(fl.fwd.norm())});
            curve.rows.push_back({l, p, "bwd", method, static_cast<double>(fl.bwd.norm())});
            curve.rows.push_back({l, p, "sum", method, static_cast<double>(fl.total.norm())});
        }
    }
}
}  // namespace detail

/// Per layer and retained position, the final-loss norm of the merged run against the
/// unmerged run, for the positional plan ("stm") and the similarity baseline ("baseline").
template <typename T>
LossCurve layerwise_loss_curve(const VimModel<T>& model, const TokenSequence<T>& input, const MergePlan& plan_stm,
                               const MergePlan& plan_baseline, const MergeOptions& merge_opts = {}) {
    require(plan_stm.mode != MergeMode::baseline_tome, "layerwise_loss_curve: first plan must be positional");
    require(plan_baseline.mode == MergeMode::baseline_tome, "layerwise_loss_curve: second plan must be the baseline");
    const std::size_t depth = std::max(plan_stm.depth(), plan_baseline.depth());
    for (std::size_t l = 0; l < depth; ++l)
        require(plan_stm.at(l).total() == plan_baseline.at(l).total(),
                "layerwise_loss_curve: plans differ in per-layer reduction counts");
    StackOptions opts;
    opts.record_trajectories = true;
    opts.merge = merge_opts;
    MergePlan none;
    none.layers.assign(model.layers.size(), LayerReduction{});
    const auto full = forward_stack(input, model, none, opts);
    const auto stm = forward_stack(input, model, plan_stm, opts);
    const auto base = forward_stack(input, model, plan_baseline, opts);
    LossCurve curve;
    curve.cls_position = input.cls_origin();
    detail::append_curve(curve, full.traces, stm.traces, "stm");
    detail::append_curve(curve, full.traces, base.traces, "baseline");
    return curve;
}

}  // namespace stmssm

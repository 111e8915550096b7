#pragma once

// Selective state-space machinery: input-dependent projections, zero-order-hold
// discretization, and the scan variants that every other module is checked against.
//
// State matrices are diagonal, so a (d_model x d_state) block holds one decay
// coefficient per (channel, state) pair and every product of decays is elementwise.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stmssm/random.hpp"
#include "stmssm/tensor.hpp"

namespace stmssm {

template <typename T = double>
struct SelectiveProjections {
    Eigen::Index d_model = 0;
    Eigen::Index d_state = 0;
    Mat<T> a;           // d_model x d_state, continuous decay, strictly negative
    Mat<T> w_b;         // d_state x d_model
    Mat<T> w_c;         // d_state x d_model
    Mat<T> w_delta;     // d_model x d_model
    Vec<T> bias_delta;  // d_model

    void validate(double eps_a) const {
        require(d_model > 0 && d_state > 0, "projections: empty dimensions");
        require(a.rows() == d_model && a.cols() == d_state, "projections: a has wrong shape");
        require(w_b.rows() == d_state && w_b.cols() == d_model, "projections: w_b has wrong shape");
        require(w_c.rows() == d_state && w_c.cols() == d_model, "projections: w_c has wrong shape");
        require(w_delta.rows() == d_model && w_delta.cols() == d_model,
                "projections: w_delta has wrong shape");
        require(bias_delta.size() == d_model, "projections: bias_delta has wrong length");
        for (Eigen::Index d = 0; d < d_model; ++d)
            for (Eigen::Index n = 0; n < d_state; ++n) {
                const double v = static_cast<double>(a(d, n));
                require(std::isfinite(v) && v <= -eps_a,
                        "projections: decay coefficient a must be finite and <= -eps_a");
            }
    }
};

struct ProjectionInit {
    double a_scale = 1.0;             // a[d, n] = -(n + 1) * a_scale
    double eps_a = 1e-6;
    double weight_scale = 1.0;        // B and C maps ~ N(0, weight_scale^2 / d_model)
    double delta_weight_scale = 1.0;  // 0 makes the timescale input-independent
    double delta_bias = 0.0;
};

template <typename T = double>
SelectiveProjections<T> make_projections(Eigen::Index d_model, Eigen::Index d_state,
                                         std::uint64_t seed, const ProjectionInit& init = {}) {
    require(d_model > 0 && d_state > 0, "make_projections: dimensions must be positive");
    require(init.a_scale > 0.0, "make_projections: a_scale must be positive");
    Rng rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    SelectiveProjections<T> p;
    p.d_model = d_model;
    p.d_state = d_state;
    p.a.resize(d_model, d_state);
    for (Eigen::Index d = 0; d < d_model; ++d)
        for (Eigen::Index n = 0; n < d_state; ++n)
            p.a(d, n) = static_cast<T>(-static_cast<double>(n + 1) * init.a_scale);
    p.w_b = rng.normal_matrix<T>(d_state, d_model, init.weight_scale * s);
    p.w_c = rng.normal_matrix<T>(d_state, d_model, init.weight_scale * s);
    p.w_delta = rng.normal_matrix<T>(d_model, d_model, init.delta_weight_scale * s);
    p.bias_delta = Vec<T>::Constant(d_model, static_cast<T>(init.delta_bias));
    p.validate(init.eps_a * 0.5);
    return p;
}

template <typename T>
T softplus(T z) {
    return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

template <typename T = double>
struct Selection {
    Vec<T> b;      // d_state
    Vec<T> c;      // d_state
    Vec<T> delta;  // d_model, strictly positive
};

template <typename T>
Selection<T> project_selective(const Vec<T>& x, const SelectiveProjections<T>& proj) {
    require(x.size() == proj.d_model, "project_selective: token length != d_model");
    Selection<T> s;
    s.b = proj.w_b * x;
    s.c = proj.w_c * x;
    s.delta = (proj.w_delta * x + proj.bias_delta).unaryExpr([](T z) { return softplus(z); });
    return s;
}

struct ZohOptions {
    double tau_taylor = 1e-4;  // |delta * a| below this uses the series for (e^z - 1) / z
    int series_order = 4;
};

/// (e^z - 1) / z, the factor that turns delta * b into b_bar.
template <typename T>
T zoh_gain(T z, const ZohOptions& opts = {}) {
    if (std::abs(static_cast<double>(z)) < opts.tau_taylor) {
        // sum_{k=0}^{order} z^k / (k + 1)!
        T term = T(1);
        T sum = T(1);
        for (int k = 1; k <= opts.series_order; ++k) {
            term *= z / static_cast<T>(k + 1);
            sum += term;
        }
        return sum;
    }
    return std::expm1(z) / z;
}

template <typename T = double>
struct DiscretizedStep {
    Mat<T> a_bar;  // d_model x d_state, entries in (0, 1) for a < 0
    Mat<T> b_bar;  // d_model x d_state
    Vec<T> c;      // d_state
    Vec<T> delta;  // d_model
};

template <typename T>
struct ZohPair {
    Mat<T> a_bar;
    Mat<T> b_bar;
};

template <typename T>
ZohPair<T> discretize_zoh(const Mat<T>& a, const Vec<T>& b, const Vec<T>& delta,
                          const ZohOptions& opts = {}) {
    require(a.cols() == b.size(), "discretize_zoh: b length != d_state");
    require(a.rows() == delta.size(), "discretize_zoh: delta length != d_model");
    ZohPair<T> out{Mat<T>(a.rows(), a.cols()), Mat<T>(a.rows(), a.cols())};
    for (Eigen::Index d = 0; d < a.rows(); ++d) {
        require(delta(d) > T(0), "discretize_zoh: delta must be strictly positive");
        for (Eigen::Index n = 0; n < a.cols(); ++n) {
            const T z = delta(d) * a(d, n);
            if (std::abs(static_cast<double>(z)) < opts.tau_taylor) {
                out.a_bar(d, n) = std::exp(z);
                out.b_bar(d, n) = delta(d) * zoh_gain(z, opts) * b(n);
            } else {
                const T em1 = std::expm1(z);
                out.a_bar(d, n) = em1 + T(1);
                out.b_bar(d, n) = delta(d) * (em1 / z) * b(n);
            }
        }
    }
    return out;
}

template <typename T>
DiscretizedStep<T> make_step(const Vec<T>& x, const SelectiveProjections<T>& proj,
                             const ZohOptions& opts = {}) {
    Selection<T> sel = project_selective(x, proj);
    ZohPair<T> zoh = discretize_zoh(proj.a, sel.b, sel.delta, opts);
    return {std::move(zoh.a_bar), std::move(zoh.b_bar), std::move(sel.c), std::move(sel.delta)};
}

template <typename T>
std::vector<DiscretizedStep<T>> compute_steps(std::span<const Vec<T>> tokens,
                                              const SelectiveProjections<T>& proj,
                                              const ZohOptions& opts = {}) {
    std::vector<DiscretizedStep<T>> steps;
    steps.reserve(tokens.size());
    for (const auto& x : tokens) steps.push_back(make_step(x, proj, opts));
    return steps;
}

template <typename T = double>
struct HiddenTrajectory {
    std::vector<Mat<T>> states;   // h_t per position, original index order
    std::vector<Vec<T>> outputs;  // y_t per position
    Direction direction = Direction::forward;

    std::size_t size() const { return states.size(); }
};

namespace detail {

template <typename T>
void check_scan_inputs(std::span<const DiscretizedStep<T>> steps, std::span<const Vec<T>> x,
                       const char* who) {
    require(steps.size() == x.size(), std::string(who) + ": steps length != sequence length");
    for (std::size_t t = 0; t < x.size(); ++t) {
        require(steps[t].b_bar.rows() == x[t].size() && steps[t].a_bar.rows() == x[t].size(),
                std::string(who) + ": step shape does not match token length");
        require(steps[t].c.size() == steps[t].b_bar.cols(),
                std::string(who) + ": c length != d_state");
    }
}

/// Visit positions in traversal order for the given direction.
template <typename F>
void for_each_in_order(std::size_t len, Direction dir, F&& f) {
    if (dir == Direction::forward) {
        for (std::size_t t = 0; t < len; ++t) f(t);
    } else {
        for (std::size_t t = len; t-- > 0;) f(t);
    }
}

template <typename T>
Vec<T> read_out(const Mat<T>& h, const Vec<T>& c) {
    return h * c;
}

}  // namespace detail

/// h_t = a_bar_t * h_{t-1} + b_bar_t * x_t from h_0 = 0, y_t = C_t h_t.
/// Backward scans traverse positions in reverse but return states in original order.
template <typename T>
HiddenTrajectory<T> scan_recurrent(std::span<const DiscretizedStep<T>> steps,
                                   std::span<const Vec<T>> x, Direction dir) {
    detail::check_scan_inputs(steps, x, "scan_recurrent");
    HiddenTrajectory<T> traj;
    traj.direction = dir;
    traj.states.resize(x.size());
    traj.outputs.resize(x.size());
    if (x.empty()) return traj;
    Mat<T> h = Mat<T>::Zero(steps[0].a_bar.rows(), steps[0].a_bar.cols());
    detail::for_each_in_order(x.size(), dir, [&](std::size_t t) {
        const auto& s = steps[t];
        h = (s.a_bar.array() * h.array() + s.b_bar.array().colwise() * x[t].array()).matrix();
        traj.states[t] = h;
        traj.outputs[t] = detail::read_out(h, s.c);
    });
    return traj;
}

/// Explicit sum over all earlier inputs with their accumulated decay. Quadratic in
/// the sequence length; this is the reference the recurrence is checked against.
template <typename T>
HiddenTrajectory<T> scan_closed_form(std::span<const DiscretizedStep<T>> steps,
                                     std::span<const Vec<T>> x, Direction dir) {
    detail::check_scan_inputs(steps, x, "scan_closed_form");
    const std::size_t len = x.size();
    HiddenTrajectory<T> traj;
    traj.direction = dir;
    traj.states.resize(len);
    traj.outputs.resize(len);
    for (std::size_t t = 0; t < len; ++t) {
        const Eigen::Index dm = steps[t].a_bar.rows();
        const Eigen::Index ds = steps[t].a_bar.cols();
        Mat<T> h = Mat<T>::Zero(dm, ds);
        // contributions ordered from the nearest source outwards so the decay product
        // can be extended one factor per source
        Mat<T> decay = Mat<T>::Ones(dm, ds);
        auto accumulate = [&](std::size_t j) {
            for (Eigen::Index d = 0; d < dm; ++d)
                for (Eigen::Index n = 0; n < ds; ++n)
                    h(d, n) += decay(d, n) * steps[j].b_bar(d, n) * x[j](d);
            for (Eigen::Index d = 0; d < dm; ++d)
                for (Eigen::Index n = 0; n < ds; ++n) decay(d, n) *= steps[j].a_bar(d, n);
        };
        if (dir == Direction::forward) {
            for (std::size_t j = t + 1; j-- > 0;) accumulate(j);
        } else {
            for (std::size_t j = t; j < len; ++j) accumulate(j);
        }
        traj.states[t] = h;
        traj.outputs[t] = detail::read_out(h, steps[t].c);
    }
    return traj;
}

template <typename T = double>
struct AttentionMatrix {
    Mat<T> alpha;                   // L x L, channel mean
    std::vector<Mat<T>> per_channel;  // optional, one L x L matrix per channel
    Direction direction = Direction::forward;
};

/// alpha[d, i, j] = sum_n c_i[n] * prod_{k between j and i, excluding j} a_bar_k[d, n] * b_bar_j[d, n]
/// for sources j on the causal side of i, zero otherwise.
template <typename T>
AttentionMatrix<T> hidden_attention(std::span<const DiscretizedStep<T>> steps, Direction dir,
                                    bool keep_per_channel = false) {
    const auto len = static_cast<Eigen::Index>(steps.size());
    AttentionMatrix<T> att;
    att.direction = dir;
    att.alpha = Mat<T>::Zero(len, len);
    if (len == 0) return att;
    const Eigen::Index dm = steps[0].a_bar.rows();
    const Eigen::Index ds = steps[0].a_bar.cols();
    for (const auto& s : steps)
        require(s.a_bar.rows() == dm && s.a_bar.cols() == ds && s.c.size() == ds,
                "hidden_attention: inconsistent step shapes");
    if (keep_per_channel) att.per_channel.assign(dm, Mat<T>::Zero(len, len));

    for (Eigen::Index j = 0; j < len; ++j) {
        Mat<T> decay = Mat<T>::Ones(dm, ds);
        const Eigen::Index step = dir == Direction::forward ? 1 : -1;
        for (Eigen::Index i = j; i >= 0 && i < len; i += step) {
            if (i != j) decay = (decay.array() * steps[i].a_bar.array()).matrix();
            T mean = T(0);
            for (Eigen::Index d = 0; d < dm; ++d) {
                T v = T(0);
                for (Eigen::Index n = 0; n < ds; ++n)
                    v += steps[i].c(n) * decay(d, n) * steps[j].b_bar(d, n);
                if (keep_per_channel) att.per_channel[d](i, j) = v;
                mean += v;
            }
            att.alpha(i, j) = mean / static_cast<T>(dm);
        }
    }
    return att;
}

/// Scan over retained positions only. gap_products[k] is the elementwise product of
/// a_bar over every pre-merge position between the previous retained position
/// (exclusive) and retained position k (inclusive), taken from a reference parameter
/// set; it replaces the single-step decay so that removed positions still contribute
/// their forgetting. `steps` supplies b_bar and C at each retained position.
template <typename T>
HiddenTrajectory<T> gap_aware_scan(std::span<const DiscretizedStep<T>> steps,
                                   std::span<const Vec<T>> x_merged,
                                   std::span<const Mat<T>> gap_products,
                                   Direction dir = Direction::forward) {
    detail::check_scan_inputs(steps, x_merged, "gap_aware_scan");
    require(gap_products.size() == x_merged.size(),
            "gap_aware_scan: gap_products length != retained count");
    HiddenTrajectory<T> traj;
    traj.direction = dir;
    traj.states.resize(x_merged.size());
    traj.outputs.resize(x_merged.size());
    if (x_merged.empty()) return traj;
    Mat<T> h = Mat<T>::Zero(steps[0].b_bar.rows(), steps[0].b_bar.cols());
    detail::for_each_in_order(x_merged.size(), dir, [&](std::size_t k) {
        require(gap_products[k].rows() == h.rows() && gap_products[k].cols() == h.cols(),
                "gap_aware_scan: gap product shape mismatch");
        h = (gap_products[k].array() * h.array() +
             steps[k].b_bar.array().colwise() * x_merged[k].array())
                .matrix();
        traj.states[k] = h;
        traj.outputs[k] = detail::read_out(h, steps[k].c);
    });
    return traj;
}

}  // namespace stmssm

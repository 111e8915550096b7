#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <vector>

#include "stmssm/forward_stack.hpp"
#include "stmssm/loss_analysis.hpp"
#include "stmssm/token_merge.hpp"

using namespace stmssm;

namespace {

DiscretizedStep<double> fixed_step(double a_bar, double b_bar, Eigen::Index dm = 1, Eigen::Index ds = 1) {
    DiscretizedStep<double> s;
    s.a_bar = Mat<double>::Constant(dm, ds, a_bar);
    s.b_bar = Mat<double>::Constant(dm, ds, b_bar);
    s.c = Vec<double>::Ones(ds);
    s.delta = Vec<double>::Ones(dm);
    return s;
}

Vec<double> scalar(double v) { return Vec<double>::Constant(1, v); }

struct RandomCase {
    std::vector<Vec<double>> x;
    std::vector<DiscretizedStep<double>> steps;
};

RandomCase random_case(std::size_t len, Eigen::Index dm, Eigen::Index ds, std::uint64_t seed) {
    Rng rng(seed);
    RandomCase c;
    for (std::size_t i = 0; i < len; ++i) c.x.push_back(rng.normal_vector<double>(dm, 1.0));
    c.steps = compute_steps<double>(c.x, make_projections<double>(dm, ds, derive_seed(seed, 1)));
    return c;
}

}  // namespace

TEST(RetainedIndexSet, GapsAndConservation) {
    const auto r = RetainedIndexSet::from_reduced(9, {0, 1, 7, 8});
    EXPECT_EQ(r.q, (std::vector<std::size_t>{2, 3, 4, 5, 6}));
    EXPECT_EQ(r.gaps, (std::vector<std::size_t>{2, 0, 0, 0, 0, 2}));
    EXPECT_EQ(std::accumulate(r.gaps.begin(), r.gaps.end(), std::size_t{0}) + r.size(), r.length);
    EXPECT_EQ(r.position_of(4), std::optional<std::size_t>(2));
    EXPECT_FALSE(r.position_of(1).has_value());
    EXPECT_THROW(RetainedIndexSet::from_retained(5, {2, 1}), InvalidInput);
    EXPECT_THROW(RetainedIndexSet::from_reduced(5, {5}), InvalidInput);
    EXPECT_THROW(RetainedIndexSet::from_reduced(5, {1, 1}), InvalidInput);
}

TEST(PlanSchedule, ZeroRateIsEmpty) {
    const auto p = plan_schedule(65, 32, 0.0, 8, MergeMode::both_sides);
    EXPECT_EQ(p.total(), 0u);
    EXPECT_EQ(p.depth(), 8u);
}

TEST(PlanSchedule, ViMTinyTwentyPercent) {
    const auto p = plan_schedule(197, 98, 0.2, 24, MergeMode::both_sides);
    std::size_t left = 0, right = 0;
    for (const auto& l : p.layers) {
        left += l.left;
        right += l.right;
    }
    EXPECT_EQ(left + right, 39u);
    EXPECT_EQ(left, 20u);
    EXPECT_EQ(right, 19u);
    EXPECT_EQ(p.layers[0].total(), 0u);
    std::size_t lo = 100, hi = 0;
    for (std::size_t l = 1; l < 24; ++l) {
        lo = std::min(lo, p.layers[l].left);
        hi = std::max(hi, p.layers[l].left);
    }
    EXPECT_LE(hi - lo, 1u);
    EXPECT_EQ(planned_lengths(p, 197).back(), 158u);
}

TEST(PlanSchedule, SmallOneSide) {
    const auto p = plan_schedule(5, 2, 0.4, 3, MergeMode::one_side);
    EXPECT_EQ(p.total(), 2u);
    for (const auto& l : p.layers) EXPECT_EQ(l.right, 0u);
}

TEST(PlanSchedule, RejectsBadRatesAndInfeasiblePlans) {
    EXPECT_THROW(plan_schedule(10, 5, 1.0, 4, MergeMode::both_sides), InvalidInput);
    EXPECT_THROW(plan_schedule(10, 5, -0.1, 4, MergeMode::both_sides), InvalidInput);
    EXPECT_THROW(plan_schedule(9, 4, 0.9, 4, MergeMode::one_side), InvalidInput);
    ScheduleOptions so;
    so.start_layer = 4;
    EXPECT_THROW(plan_schedule(10, 5, 0.2, 4, MergeMode::both_sides, so), InvalidInput);
}

TEST(PlanSchedule, ConservationOverRandomPlans) {
    Rng rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        const auto len = static_cast<std::size_t>(rng.uniform_int(3, 200));
        const std::size_t cls = middle_cls_index(len - 1);
        const double rate = rng.uniform(0.0, 0.45);
        const auto depth = static_cast<std::size_t>(rng.uniform_int(2, 24));
        for (MergeMode mode : {MergeMode::one_side, MergeMode::both_sides, MergeMode::baseline_tome}) {
            MergePlan p;
            try {
                p = plan_schedule(len, cls, rate, depth, mode);
            } catch (const InvalidInput&) {
                continue;
            }
            const auto expected = static_cast<std::size_t>(std::llround(static_cast<double>(len) * rate));
            EXPECT_EQ(p.total(), expected);
            EXPECT_EQ(planned_lengths(p, len).back(), len - expected);
        }
    }
}

TEST(SelectReduced, OutermostFirst) {
    auto s = select_reduced(9, 4, 2, MergeMode::both_sides);
    EXPECT_EQ(s.left, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(s.right, (std::vector<std::size_t>{8, 7}));
    s = select_reduced(9, 4, 2, MergeMode::one_side);
    EXPECT_EQ(s.left, (std::vector<std::size_t>{0, 1}));
    EXPECT_TRUE(s.right.empty());
    s = select_reduced(9, 4, 0, MergeMode::both_sides);
    EXPECT_TRUE(s.left.empty() && s.right.empty());
    EXPECT_THROW(select_reduced(9, 4, 5, MergeMode::both_sides), InvalidInput);
}

TEST(MergeFwd, UnitFactorsAddTokens) {
    const std::vector<Vec<double>> x{scalar(0.7), scalar(-1.3), scalar(2.0)};
    const std::vector<DiscretizedStep<double>> s(3, fixed_step(1.0, 0.5));
    const auto ret = RetainedIndexSet::from_reduced(3, {0});
    const auto m = merge_fwd<double>(x, ret, 0, s);
    EXPECT_NEAR(m.token(0), 0.7 + (-1.3), 1e-15);
    EXPECT_NEAR(m.residual, 0.0, 1e-15);
    EXPECT_EQ(m.reduced, std::vector<std::size_t>{0});
    EXPECT_EQ(m.target, 1u);
}

TEST(MergeFwd, TotalForgettingAtTargetKillsCompensation) {
    const std::vector<Vec<double>> x{scalar(0.7), scalar(-1.3)};
    std::vector<DiscretizedStep<double>> s{fixed_step(0.5, 0.5), fixed_step(0.0, 0.5)};
    const auto ret = RetainedIndexSet::from_reduced(2, {0});
    const auto m = merge_fwd<double>(x, ret, 0, s);
    EXPECT_EQ(m.token(0), -1.3);
}

TEST(MergeFwd, NoGapIsIdentity) {
    const auto c = random_case(6, 3, 4, 5);
    const auto ret = RetainedIndexSet::from_reduced(6, {0});
    const auto m = merge_fwd<double>(c.x, ret, 1, c.steps);
    EXPECT_EQ(m.token, c.x[2]);
    EXPECT_TRUE(m.reduced.empty());
}

TEST(MergeFwd, ExactnessWithScalarStateOnLengthFour) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto c = random_case(4, 3, 1, derive_seed(11, seed));
        const auto ret = RetainedIndexSet::from_reduced(4, {0, 1});
        const auto m = merge_fwd<double>(c.x, ret, 0, c.steps);
        std::vector<Vec<double>> xm{m.token, c.x[3]};
        std::vector<DiscretizedStep<double>> sm{c.steps[2], c.steps[3]};
        const auto gaps = gap_products_for<double>(c.steps, ret.q, Direction::forward);
        const auto g = gap_aware_scan<double>(sm, xm, gaps, Direction::forward);
        const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
        for (std::size_t k = 0; k < 2; ++k) {
            const auto& ref = full.states[ret.q[k]];
            EXPECT_LT((g.states[k] - ref).norm() / ref.norm(), 1e-9);
        }
    }
}

TEST(MergeFwd, DegenerateRowFallsBackToTarget) {
    const std::vector<Vec<double>> x{Vec<double>::Constant(2, 1.0), Vec<double>::Constant(2, 3.0)};
    auto s0 = fixed_step(0.5, 0.5, 2, 2);
    auto s1 = fixed_step(0.5, 0.5, 2, 2);
    s1.b_bar.row(1).setZero();
    const std::vector<DiscretizedStep<double>> s{s0, s1};
    const auto ret = RetainedIndexSet::from_reduced(2, {0});
    const auto m = merge_fwd<double>(x, ret, 0, s);
    EXPECT_EQ(m.degenerate_rows, 1u);
    EXPECT_EQ(m.token(1), 3.0);
    EXPECT_NE(m.token(0), 3.0);
}

TEST(MergeFwd, LeastSquaresNeverWorseThanChannelMeanRatio) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto c = random_case(8, 4, 6, derive_seed(21, seed));
        const auto ret = RetainedIndexSet::from_reduced(8, {0, 1, 2});
        MergeOptions ls, cm;
        cm.solve = CompensationSolve::channel_mean_ratio;
        const auto a = merge_fwd<double>(c.x, ret, 0, c.steps, ls);
        const auto b = merge_fwd<double>(c.x, ret, 0, c.steps, cm);
        EXPECT_LE(a.residual, b.residual * (1 + 1e-12) + 1e-15);
    }
}

TEST(MergeFwd, ProportionalRowsAreSolvedExactly) {
    Rng rng(31);
    for (int rep = 0; rep < 50; ++rep) {
        const Eigen::Index dm = 3, ds = 5;
        // the reduced token's b_bar is a per-row multiple of the target's, so the
        // compensation is proportional to the target gain row by row
        DiscretizedStep<double> t = fixed_step(0.0, 0.0, dm, ds);
        t.a_bar = Mat<double>::Constant(dm, ds, rng.uniform(0.2, 0.9));
        t.b_bar = rng.normal_matrix<double>(dm, ds, 1.0);
        DiscretizedStep<double> r = t;
        for (Eigen::Index d = 0; d < dm; ++d) r.b_bar.row(d) *= rng.uniform(0.5, 2.0);
        const std::vector<DiscretizedStep<double>> s{r, t};
        const std::vector<Vec<double>> x{rng.normal_vector<double>(dm, 1.0), rng.normal_vector<double>(dm, 1.0)};
        const auto m = merge_fwd<double>(x, RetainedIndexSet::from_reduced(2, {0}), 0, s);
        EXPECT_LT(m.residual, 1e-9);
    }
}

TEST(MergeBwd, NoGapIsIdentity) {
    const auto c = random_case(5, 2, 3, 41);
    const auto ret = RetainedIndexSet::from_reduced(5, {4});
    const auto m = merge_bwd<double>(c.x, ret, 1, c.steps);
    EXPECT_EQ(m.token, c.x[1]);
}

TEST(MergeBwd, ReversalConjugatesForwardMerge) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto c = random_case(9, 3, 4, derive_seed(51, seed));
        const auto ret = RetainedIndexSet::from_reduced(9, {6, 7, 8});
        const auto b = merge_bwd<double>(c.x, ret, *ret.position_of(5), c.steps);
        auto xr = c.x;
        auto sr = c.steps;
        std::reverse(xr.begin(), xr.end());
        std::reverse(sr.begin(), sr.end());
        const auto rr = RetainedIndexSet::from_reduced(9, {0, 1, 2});
        const auto f = merge_fwd<double>(xr, rr, *rr.position_of(3), sr);
        EXPECT_EQ(b.token, f.token);
        EXPECT_EQ(b.residual, f.residual);
    }
}

TEST(MergeBwd, PalindromicInstanceMirrorsForward) {
    const auto c = random_case(3, 2, 3, 62);
    std::vector<Vec<double>> x{c.x[0], c.x[1], c.x[0]};
    std::vector<DiscretizedStep<double>> s{c.steps[0], c.steps[1], c.steps[0]};
    const auto ret = RetainedIndexSet::from_reduced(3, {0, 2});
    const auto f = merge_fwd<double>(x, ret, 0, s);
    const auto b = merge_bwd<double>(x, ret, 0, s);
    EXPECT_EQ(f.token, b.token);
}

TEST(ApplyMerge, ZeroCountIsIdentity) {
    const auto c = random_case(7, 3, 2, 71);
    const auto seq = TokenSequence<double>::from_tokens(c.x, 3);
    LayerCache<double> cache;
    const auto out = apply_merge(seq, LayerReduction{}, MergeMode::both_sides, cache);
    EXPECT_EQ(out.seq.tokens, seq.tokens);
    EXPECT_EQ(out.seq.origin, seq.origin);
}

TEST(ApplyMerge, BothSidesShiftsClassIndex) {
    const auto c = random_case(9, 3, 2, 72);
    const auto seq = TokenSequence<double>::from_tokens(c.x, 4);
    LayerCache<double> cache;
    cache.origin = seq.origin;
    cache.fwd = c.steps;
    cache.bwd = c.steps;
    const auto out = apply_merge(seq, LayerReduction{2, 2}, MergeMode::both_sides, cache);
    EXPECT_EQ(out.seq.size(), 5u);
    EXPECT_EQ(out.seq.cls_index, 2u);
    EXPECT_EQ(out.seq.origin, (std::vector<std::size_t>{2, 3, 4, 5, 6}));
    ASSERT_EQ(out.records.size(), 2u);
    EXPECT_EQ(out.records[0].reduced, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(out.records[0].target, 2u);
    EXPECT_EQ(out.records[1].reduced, (std::vector<std::size_t>{7, 8}));
    EXPECT_EQ(out.records[1].target, 6u);
    EXPECT_EQ(out.seq.tokens[2], seq.tokens[4]);
}

TEST(ApplyMerge, RejectsOneSidePlanOnPostClassSideAndStaleCache) {
    const auto c = random_case(9, 3, 2, 73);
    const auto seq = TokenSequence<double>::from_tokens(c.x, 4);
    LayerCache<double> cache;
    cache.origin = seq.origin;
    cache.fwd = c.steps;
    cache.bwd = c.steps;
    EXPECT_THROW(apply_merge(seq, LayerReduction{1, 1}, MergeMode::one_side, cache), InvalidInput);
    cache.origin[0] = 100;
    EXPECT_THROW(apply_merge(seq, LayerReduction{1, 1}, MergeMode::both_sides, cache), InvalidInput);
    EXPECT_THROW(apply_merge(seq, LayerReduction{5, 0}, MergeMode::both_sides, cache), InvalidInput);
}

TEST(ApplyMerge, MultiLayerBookkeepingMatchesSimulation) {
    Rng rng(81);
    for (int rep = 0; rep < 30; ++rep) {
        const auto len = static_cast<std::size_t>(rng.uniform_int(5, 40));
        const std::size_t cls = middle_cls_index(len - 1);
        auto seq = TokenSequence<double>::from_tokens(random_case(len, 2, 2, 90 + rep).x, cls);
        const auto proj = make_projections<double>(2, 2, 7);
        // independent simulation: a plain list of original indices
        std::vector<std::size_t> sim(len);
        std::iota(sim.begin(), sim.end(), std::size_t{0});
        std::size_t sim_cls = cls;
        for (int layer = 0; layer < 4; ++layer) {
            const std::size_t left = std::min<std::size_t>(static_cast<std::size_t>(rng.uniform_int(0, 2)), sim_cls);
            const std::size_t right =
                std::min<std::size_t>(static_cast<std::size_t>(rng.uniform_int(0, 2)), sim.size() - 1 - sim_cls);
            LayerCache<double> cache;
            cache.origin = seq.origin;
            cache.fwd = compute_steps<double>(seq.tokens, proj);
            cache.bwd = cache.fwd;
            seq = apply_merge(seq, LayerReduction{left, right}, MergeMode::both_sides, cache).seq;
            sim.erase(sim.end() - static_cast<std::ptrdiff_t>(right), sim.end());
            sim.erase(sim.begin(), sim.begin() + static_cast<std::ptrdiff_t>(left));
            sim_cls -= left;
            EXPECT_EQ(seq.origin, sim);
            EXPECT_EQ(seq.cls_index, sim_cls);
            EXPECT_EQ(seq.cls_origin(), cls);
        }
    }
}

TEST(MergeRecords, TextRoundTrip) {
    MergeRecord r;
    r.layer = 3;
    r.direction = Direction::backward;
    r.reduced = {60, 61, 64};
    r.target = 59;
    r.residual = 0.125;
    const auto line = format_merge_record(r);
    EXPECT_EQ(line, "3,bwd,60;61;64,59,0.125");
    EXPECT_EQ(parse_merge_record(line), r);
    EXPECT_THROW(parse_merge_record("3,sideways,1,2,0.5"), InvalidInput);
    EXPECT_THROW(parse_merge_record("3,fwd,1,2"), InvalidInput);
    EXPECT_THROW(parse_merge_record("x,fwd,1,2,0.5"), InvalidInput);
}

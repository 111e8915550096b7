#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <vector>

#include "stmssm/loss_analysis.hpp"
#include "stmssm/verify_suites.hpp"
#include "support/oracles.hpp"

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

struct Case {
    std::vector<Vec<double>> x;
    std::vector<DiscretizedStep<double>> steps;
};

Case random_case(std::size_t len, Eigen::Index dm, Eigen::Index ds, std::uint64_t seed) {
    Rng rng(seed);
    Case c;
    for (std::size_t i = 0; i < len; ++i) c.x.push_back(rng.normal_vector<double>(dm, 1.0));
    c.steps = compute_steps<double>(c.x, make_projections<double>(dm, ds, derive_seed(seed, 1)));
    return c;
}

template <typename V>
std::vector<V> without(const std::vector<V>& v, std::size_t skip) {
    std::vector<V> out;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (i != skip) out.push_back(v[i]);
    return out;
}

std::vector<std::size_t> iota_without(std::size_t len, std::size_t skip) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < len; ++i)
        if (i != skip) out.push_back(i);
    return out;
}

double max_abs(const Mat<double>& m) { return m.cwiseAbs().maxCoeff(); }

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(RemovalLoss, NullTokenWithUnitDecayCostsNothing) {
    std::vector<DiscretizedStep<double>> s(5, fixed_step(1.0, 0.7));
    std::vector<Vec<double>> x{Vec<double>::Constant(1, 1.0), Vec<double>::Constant(1, 2.0),
                               Vec<double>::Zero(1), Vec<double>::Constant(1, -1.0), Vec<double>::Constant(1, 0.5)};
    const auto full = scan_recurrent<double>(s, x, Direction::forward);
    const auto removed = scan_recurrent<double>(without(s, 2), without(x, 2), Direction::forward);
    const auto origin = iota_without(5, 2);
    const AlignedTrajectory<double> al{&removed, origin};
    for (std::size_t p = 0; p < 5; ++p) EXPECT_EQ(max_abs(removal_loss<double>(full, al, s, p)), 0.0);
}

TEST(RemovalLoss, RemovingLastTokenLeavesEarlierStates) {
    const auto c = random_case(6, 3, 2, 1);
    const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
    const auto removed = scan_recurrent<double>(without(c.steps, 5), without(c.x, 5), Direction::forward);
    const auto origin = iota_without(6, 5);
    const AlignedTrajectory<double> al{&removed, origin};
    for (std::size_t p = 0; p < 5; ++p) EXPECT_EQ(max_abs(removal_loss<double>(full, al, c.steps, p)), 0.0);
}

TEST(RemovalLoss, PhysicalDeletionMatchesTermDeletionOracle) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto c = random_case(10, 3, 3, derive_seed(2, seed));
        const std::size_t j = 1 + seed % 8;
        for (Direction dir : {Direction::forward, Direction::backward}) {
            const auto full = scan_recurrent<double>(c.steps, c.x, dir);
            const auto removed = scan_recurrent<double>(without(c.steps, j), without(c.x, j), dir);
            const auto origin = iota_without(10, j);
            const AlignedTrajectory<double> al{&removed, origin};
            for (std::size_t t = 0; t < 10; ++t) {
                if (t == j) continue;
                const Mat<double> expected = oracle::state(c.steps, c.x, t, dir) - oracle::state(c.steps, c.x, t, dir, j);
                EXPECT_LT(max_abs(removal_loss<double>(full, al, c.steps, t) - expected), 1e-10);
            }
            // at the removed position the survivor is decayed by a_bar there, leaving its own term
            const Mat<double> own = (c.steps[j].b_bar.array().colwise() * c.x[j].array()).matrix();
            EXPECT_LT(max_abs(removal_loss<double>(full, al, c.steps, j) - own), 1e-10);
        }
    }
}

TEST(RemovalLoss, GapAwareDeletionKeepsDecayAndMatchesOracle) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto c = random_case(9, 2, 4, derive_seed(3, seed));
        const std::size_t j = 2 + seed % 5;
        const auto origin = iota_without(9, j);
        const auto gaps = gap_products_for<double>(c.steps, origin, Direction::forward);
        std::vector<DiscretizedStep<double>> sr;
        std::vector<Vec<double>> xr;
        for (std::size_t q : origin) {
            sr.push_back(c.steps[q]);
            xr.push_back(c.x[q]);
        }
        const auto removed = gap_aware_scan<double>(sr, xr, gaps, Direction::forward);
        const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
        auto x0 = c.x;
        x0[j].setZero();
        const AlignedTrajectory<double> al{&removed, origin};
        for (std::size_t t = j + 1; t < 9; ++t) {
            const Mat<double> expected = oracle::state(c.steps, c.x, t, Direction::forward) -
                                         oracle::state(c.steps, x0, t, Direction::forward);
            EXPECT_LT(max_abs(removal_loss<double>(full, al, c.steps, t) - expected), 1e-10);
        }
    }
}

TEST(RemovalLoss, UnmappedPositionRejected) {
    const auto c = random_case(4, 2, 2, 4);
    const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
    const std::vector<std::size_t> origin{0, 1, 2, 3};
    const AlignedTrajectory<double> al{&full, origin};
    EXPECT_THROW(removal_loss<double>(full, al, c.steps, 7), InvalidInput);
    const AlignedTrajectory<double> a{&full, {}};
    EXPECT_THROW(state_difference(a, a, 1), InvalidInput);
}

TEST(FinalLoss, NoMergeIsZero) {
    const auto c = random_case(7, 3, 2, 5);
    const auto f = scan_recurrent<double>(c.steps, c.x, Direction::forward);
    const auto b = scan_recurrent<double>(c.steps, c.x, Direction::backward);
    std::vector<std::size_t> origin(7);
    std::iota(origin.begin(), origin.end(), std::size_t{0});
    const AlignedTrajectory<double> af{&f, origin}, ab{&b, origin};
    for (std::size_t p = 0; p < 7; ++p) {
        const auto fl = final_loss(af, ab, af, ab, p);
        EXPECT_EQ(max_abs(fl.total), 0.0);
    }
}

TEST(FinalLoss, ExactnessConfigurationVanishes) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = random_case(10, 3, 1, derive_seed(6, seed));
        const auto ret = RetainedIndexSet::from_reduced(10, {3, 4});
        const auto m = merge_fwd<double>(c.x, ret, *ret.position_of(5), c.steps);
        std::vector<Vec<double>> xm;
        std::vector<DiscretizedStep<double>> sm;
        for (std::size_t q : ret.q) {
            xm.push_back(q == 5 ? m.token : c.x[q]);
            sm.push_back(c.steps[q]);
        }
        const auto gaps = gap_products_for<double>(c.steps, ret.q, Direction::forward);
        const auto merged = gap_aware_scan<double>(sm, xm, gaps, Direction::forward);
        const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
        for (std::size_t k = 0; k < ret.size(); ++k) {
            const Mat<double>& ref = full.states[ret.q[k]];
            EXPECT_LT((ref - merged.states[k]).norm() / ref.norm(), 1e-9);
        }
        // the compensation cancels the carried removal losses exactly
        const Mat<double> final = full.states[5] - merged.states[*ret.position_of(5)];
        std::vector<Mat<double>> removal, props;
        for (std::size_t p : {3, 4}) {
            removal.push_back((c.steps[p].b_bar.array().colwise() * c.x[p].array()).matrix());
            props.push_back(decay_product<double>(c.steps, p, 5, Direction::forward));
        }
        Mat<double> carried = Mat<double>::Zero(3, 1);
        for (std::size_t i = 0; i < 2; ++i) carried += (props[i].array() * removal[i].array()).matrix();
        const Mat<double> ml = merging_loss<double>(final, removal, props);
        EXPECT_LT(max_abs(ml + carried), 1e-9 * std::max(1.0, max_abs(carried)));
    }
}

TEST(MergingLoss, PureDeletionIsZero) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = random_case(12, 3, 4, derive_seed(7, seed));
        const std::vector<std::size_t> reduced{4, 5, 6};
        const auto ret = RetainedIndexSet::from_reduced(12, reduced);
        std::vector<Vec<double>> xr;
        std::vector<DiscretizedStep<double>> sr;
        for (std::size_t q : ret.q) {
            xr.push_back(c.x[q]);
            sr.push_back(c.steps[q]);
        }
        const auto gaps = gap_products_for<double>(c.steps, ret.q, Direction::forward);
        const auto deleted = gap_aware_scan<double>(sr, xr, gaps, Direction::forward);
        const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
        std::vector<Mat<double>> removal, props;
        for (std::size_t p : reduced) {
            removal.push_back((c.steps[p].b_bar.array().colwise() * c.x[p].array()).matrix());
            props.push_back(decay_product<double>(c.steps, p, 7, Direction::forward));
        }
        const Mat<double> final = full.states[7] - deleted.states[*ret.position_of(7)];
        EXPECT_LT(max_abs(merging_loss<double>(final, removal, props)), 1e-12);
    }
}

TEST(MergingLoss, RejectsMismatchedLists) {
    const std::vector<Mat<double>> one{Mat<double>::Ones(2, 2)};
    const std::vector<Mat<double>> none;
    EXPECT_THROW(merging_loss<double>(Mat<double>::Ones(2, 2), one, none), InvalidInput);
}

TEST(LossDecomposition, ClosesOnRandomInstances) {
    const auto r = suite_decomposition(100, 1e-10, 17);
    EXPECT_TRUE(r.passed) << r.max_error;
}

TEST(DecayProduct, EmptyRangeIsOnesAndDirectionChecked) {
    const auto c = random_case(5, 2, 3, 8);
    EXPECT_EQ(decay_product<double>(c.steps, 2, 2, Direction::forward), Mat<double>::Ones(2, 3));
    const Mat<double> f = decay_product<double>(c.steps, 1, 3, Direction::forward);
    EXPECT_LT(max_abs(f - Mat<double>((c.steps[2].a_bar.array() * c.steps[3].a_bar.array()).matrix())), 1e-15);
    const Mat<double> b = decay_product<double>(c.steps, 3, 1, Direction::backward);
    EXPECT_LT(max_abs(b - Mat<double>((c.steps[1].a_bar.array() * c.steps[2].a_bar.array()).matrix())), 1e-15);
    EXPECT_THROW(decay_product<double>(c.steps, 3, 1, Direction::forward), InvalidInput);
}

TEST(VerifyFading, ScalarGeometricExample) {
    const std::size_t len = 6;
    std::vector<DiscretizedStep<double>> s(len, fixed_step(0.9, 1.0));
    HiddenTrajectory<double> full, merged;
    Rng rng(9);
    for (std::size_t t = 0; t < len; ++t) full.states.push_back(Mat<double>::Constant(1, 1, 5.0 + rng.uniform()));
    // position 0 was merged into 1, leaving a unit loss there that fades downstream
    for (std::size_t t = 1; t < len; ++t)
        merged.states.push_back(Mat<double>::Constant(1, 1, full.states[t](0, 0) - std::pow(0.9, double(t - 1))));
    const std::vector<std::size_t> origin{1, 2, 3, 4, 5};
    const auto rep = verify_fading<double>(full, {&merged, origin}, s, 1);
    ASSERT_GE(rep.norms.size(), 4u);
    EXPECT_NEAR(rep.norms[0], 1.0, 1e-14);
    EXPECT_NEAR(rep.norms[1], 0.9, 1e-14);
    EXPECT_NEAR(rep.norms[2], 0.81, 1e-14);
    EXPECT_NEAR(rep.norms[3], 0.729, 1e-14);
    EXPECT_TRUE(rep.passed);
    EXPECT_TRUE(rep.norms_strictly_decreasing);
}

TEST(VerifyFading, ZeroLossAtMergePointStaysZero) {
    const auto c = random_case(8, 2, 2, 10);
    const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
    HiddenTrajectory<double> merged;
    for (std::size_t t = 2; t < 8; ++t) merged.states.push_back(full.states[t]);
    const std::vector<std::size_t> origin{2, 3, 4, 5, 6, 7};
    const auto rep = verify_fading<double>(full, {&merged, origin}, c.steps, 2);
    for (double n : rep.norms) EXPECT_EQ(n, 0.0);
    EXPECT_EQ(rep.checked, 0u);
    EXPECT_TRUE(rep.passed);
}

TEST(VerifyFading, RandomSelectiveInstancesAreExact) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto c = single_merge_case(derive_seed(11, seed));
        const auto rep = verify_fading<double>(c.full, {&c.merged, c.origin}, c.inst.steps, c.target);
        EXPECT_LT(rep.max_violation, 1e-9);
        EXPECT_TRUE(rep.passed);
        EXPECT_TRUE(rep.norms_strictly_decreasing);
        EXPECT_TRUE(rep.bound_holds);
        EXPECT_GT(rep.checked, 0u);
    }
}

TEST(VerifyFading, RejectsMultipleMerges) {
    const auto c = random_case(10, 2, 2, 12);
    const auto full = scan_recurrent<double>(c.steps, c.x, Direction::forward);
    HiddenTrajectory<double> merged;
    const std::vector<std::size_t> origin{1, 3, 4, 5, 6, 7, 8, 9};
    for (std::size_t p : origin) merged.states.push_back(full.states[p]);
    EXPECT_THROW(verify_fading<double>(full, {&merged, origin}, c.steps, 3), InvalidInput);
}

TEST(DecayFit, ExactGeometricSeries) {
    const std::vector<double> norms{1.0, 0.5, 0.25, 0.125};
    const auto fit = cls_decay_fit(norms);
    ASSERT_TRUE(fit.ok);
    EXPECT_NEAR(fit.slope, std::log(0.5), 1e-14);
    EXPECT_NEAR(fit.r_squared, 1.0, 1e-14);
    EXPECT_NEAR(fit.a_bar_estimate, 0.5, 1e-14);
    EXPECT_EQ(fit.points, 4u);
}

TEST(DecayFit, TooFewPointsIsFlaggedNotThrown) {
    const std::vector<double> norms{1.0, 0.0, 1e-20, 0.5};
    const auto fit = cls_decay_fit(norms);
    EXPECT_FALSE(fit.ok);
    EXPECT_EQ(fit.points, 2u);
}

TEST(DecayFit, ConstantTimescaleIsLogLinear) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto e = constant_delta_decay(seed, 8, 4, 48, -1.0);
        ASSERT_TRUE(e.fit.ok);
        EXPECT_GE(e.fit.points, 6u);
        EXPECT_GT(e.fit.r_squared, 0.99);
        EXPECT_LT(e.fit.slope, 0.0);
    }
}

TEST(Heatmap, ZeroImageIsSpatiallyConstant) {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.layer.d_model = 8;
    cfg.layer.d_state = 4;
    cfg.embed.pos_scale = 0.0;
    cfg.embed.cls_scale = 0.0;
    const auto model = make_model<double>(cfg, 3);
    StackOptions so;
    so.record_trajectories = true;
    const auto res = forward_stack(model.embed(Image(16, 16, 1)), model, MergePlan{}, so);
    const std::vector<const HiddenTrajectory<double>*> both{&res.traces[0].fwd, &res.traces[0].bwd};
    const Mat<double> grid = hidden_norm_grid<double>(both, res.traces[0].cls_index, 4, 4);
    EXPECT_EQ(grid.maxCoeff(), grid.minCoeff());
}

TEST(Heatmap, BrightPatchDominates) {
    ModelConfig cfg;
    cfg.depth = 1;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.layer.d_model = 8;
    cfg.layer.d_state = 4;
    cfg.embed.pos_scale = 0.0;
    cfg.embed.cls_scale = 0.0;
    const auto model = make_model<double>(cfg, 4);
    for (std::size_t cell : {0u, 5u, 9u, 15u}) {
        Image img(16, 16, 1);
        const std::size_t py = cell / 4, px = cell % 4;
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) img.at(py * 4 + y, px * 4 + x) = 3.0;
        StackOptions so;
        so.record_trajectories = true;
        const auto res = forward_stack(model.embed(img), model, MergePlan{}, so);
        const std::vector<const HiddenTrajectory<double>*> both{&res.traces[0].fwd, &res.traces[0].bwd};
        const Mat<double> grid = hidden_norm_grid<double>(both, res.traces[0].cls_index, 4, 4);
        Eigen::Index r, c;
        grid.maxCoeff(&r, &c);
        EXPECT_EQ(static_cast<std::size_t>(r), py);
        EXPECT_EQ(static_cast<std::size_t>(c), px);
    }
}

TEST(Heatmap, AttentionExportIsTriangular) {
    const auto c = random_case(6, 3, 2, 13);
    const auto dir = std::filesystem::temp_directory_path() / "stmssm_heatmap_test";
    std::filesystem::create_directories(dir);
    export_heatmap(hidden_attention<double>(c.steps, Direction::forward), dir / "fwd.csv");
    std::istringstream in(slurp(dir / "fwd.csv"));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "j0,j1,j2,j3,j4,j5");
    for (std::size_t i = 0; std::getline(in, line); ++i) {
        std::istringstream row(line);
        std::string cell;
        for (std::size_t j = 0; std::getline(row, cell, ','); ++j) {
            if (j > i) {
                EXPECT_EQ(std::stod(cell), 0.0);
            }
        }
    }
    std::filesystem::remove_all(dir);
}

TEST(Heatmap, UnwritablePathIsIoError) {
    const auto file = std::filesystem::temp_directory_path() / "stmssm_not_a_dir";
    { std::ofstream(file) << "x"; }
    EXPECT_THROW(export_heatmap(Mat<double>(Mat<double>::Ones(2, 2)), file / "grid.csv"), IoError);
    std::filesystem::remove(file);
}

namespace {

ModelConfig curve_model(std::size_t depth) {
    ModelConfig cfg;
    cfg.depth = depth;
    cfg.image_size = 16;
    cfg.patch_size = 4;
    cfg.layer.d_model = 16;
    cfg.layer.d_state = 4;
    return cfg;
}

Image noise_image(std::uint64_t seed) {
    Rng rng(seed);
    Image img(16, 16, 1);
    for (auto& v : img.pixels) v = rng.normal();
    return img;
}

}  // namespace

TEST(LossCurve, ZeroReductionIsAllZero) {
    const auto model = make_model<double>(curve_model(3), 21);
    const auto input = model.embed(noise_image(22));
    const auto stm = plan_schedule(17, input.cls_index, 0.0, 3, MergeMode::both_sides);
    const auto base = plan_schedule(17, input.cls_index, 0.0, 3, MergeMode::baseline_tome);
    const auto curve = layerwise_loss_curve(model, input, stm, base);
    ASSERT_EQ(curve.rows.size(), 2u * 3u * 17u * 3u);
    for (const auto& r : curve.rows) EXPECT_EQ(r.loss_norm, 0.0);
}

TEST(LossCurve, RejectsUnequalPlans) {
    const auto model = make_model<double>(curve_model(3), 21);
    const auto input = model.embed(noise_image(22));
    const auto stm = plan_schedule(17, input.cls_index, 0.2, 3, MergeMode::both_sides);
    const auto base = plan_schedule(17, input.cls_index, 0.4, 3, MergeMode::baseline_tome);
    EXPECT_THROW(layerwise_loss_curve(model, input, stm, base), InvalidInput);
    EXPECT_THROW(layerwise_loss_curve(model, input, stm, stm), InvalidInput);
}

TEST(LossCurve, SingleMergeMatchesFadingProduct) {
    const auto model = make_model<double>(curve_model(2), 31);
    const auto input = model.embed(noise_image(32));
    MergePlan stm;
    stm.mode = MergeMode::one_side;
    stm.layers = {{0, 0}, {1, 0}};
    MergePlan base = stm;
    base.mode = MergeMode::baseline_tome;
    const auto curve = layerwise_loss_curve(model, input, stm, base);

    StackOptions so;
    so.record_trajectories = true;
    so.record_caches = true;
    MergePlan none;
    none.layers.assign(2, LayerReduction{});
    const auto full = forward_stack(input, model, none, so);
    const auto merged = forward_stack(input, model, stm, so);
    const auto& tm = merged.traces[1];
    const auto rep = verify_fading<double>(full.traces[1].fwd, {&tm.fwd, tm.origin}, full.caches[1].fwd, 1);
    EXPECT_TRUE(rep.passed);
    std::vector<double> from_curve;
    for (const auto& r : curve.rows)
        if (r.layer == 1 && r.method == "stm" && r.direction == "fwd") from_curve.push_back(r.loss_norm);
    ASSERT_EQ(from_curve.size(), rep.norms.size());
    for (std::size_t i = 0; i < from_curve.size(); ++i) EXPECT_EQ(from_curve[i], rep.norms[i]);
}

TEST(LossCurve, CsvSchema) {
    LossCurve c;
    c.rows.push_back({2, 7, "sum", "stm", 0.1});
    EXPECT_EQ(c.to_csv(), "layer,position,direction,method,loss_norm\n2,7,sum,stm,0.10000000000000001\n");
    c.cls_position = 7;
    EXPECT_EQ(c.cls_column("stm"), std::vector<double>{0.1});
    EXPECT_TRUE(c.cls_column("baseline").empty());
}

TEST(LossCurve, StmBelowBaselineAtClassToken) {
    auto cfg = curve_model(8);
    cfg.image_size = 32;
    const auto model = make_model<double>(cfg, 41);
    Rng rng(42);
    Image img(32, 32, 1);
    for (auto& v : img.pixels) v = rng.normal();
    const auto input = model.embed(img);
    const auto stm = plan_schedule(65, input.cls_index, 0.2, 8, MergeMode::both_sides);
    const auto base = plan_schedule(65, input.cls_index, 0.2, 8, MergeMode::baseline_tome);
    const auto curve = layerwise_loss_curve(model, input, stm, base);
    EXPECT_LT(curve.cls_column("stm").back(), curve.cls_column("baseline").back());
}

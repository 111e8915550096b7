#pragma once

// Subcommand implementations. Exit codes: 0 success, 1 a verification suite failed,
// 2 invalid configuration or input, 3 output could not be written.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "stmssm/csv.hpp"
#include "stmssm/flops.hpp"
#include "stmssm/forward_stack.hpp"
#include "stmssm/loss_analysis.hpp"
#include "stmssm/probe_bench.hpp"
#include "stmssm/random.hpp"
#include "stmssm/run_config.hpp"
#include "stmssm/verify_suites.hpp"

namespace stmssm {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitBadInput = 2;
inline constexpr int kExitIo = 3;

namespace seed_stream {
inline constexpr std::uint64_t verify = 5;
}

/// Creates the output directory and checks that a file can be written into it.
inline std::filesystem::path prepare_output_dir(const std::string& dir) {
    const std::filesystem::path p(dir);
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec || !std::filesystem::is_directory(p)) throw IoError("cannot create output directory '" + dir + "'");
    const auto probe = p / ".stmssm_write_probe";
    write_file_atomic(probe, "");
    std::filesystem::remove(probe, ec);
    return p;
}

inline std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

inline int cmd_verify(const RunConfig& cfg, std::ostream& os) {
    const auto dir = prepare_output_dir(cfg.out);
    const std::uint64_t seed = derive_seed(cfg.seed, seed_stream::verify);
    const std::size_t n = cfg.verify_instances;
    std::vector<SuiteResult> results{
        suite_scan(n, cfg.tol(cfg.tol_scan), seed),
        suite_attention(n, cfg.tol(cfg.tol_attention), seed),
        suite_exactness(n, cfg.tol(cfg.tol_exactness), seed),
        suite_fading(n, cfg.tol(cfg.tol_fading), seed),
        suite_decomposition(n, cfg.tol(cfg.tol_decomposition), seed),
    };
    std::ostringstream csv;
    csv << "suite,instances,max_error,tolerance,status\n";
    bool all = true;
    os << "suite          instances  max_error   tolerance   status\n";
    for (const auto& r : results) {
        all = all && r.passed;
        char line[160];
        std::snprintf(line, sizeof line, "%-14s %9zu  %-10s  %-10s  %s\n", r.name.c_str(), r.instances,
                      sci(r.max_error).c_str(), sci(r.tolerance).c_str(), r.passed ? "PASS" : "FAIL");
        os << line;
        csv << r.name << ',' << r.instances << ',' << format_double(r.max_error) << ',' << format_double(r.tolerance)
            << ',' << (r.passed ? "pass" : "fail") << '\n';
    }
    write_file_atomic(dir / "verify.csv", csv.str());
    for (const auto& r : results)
        if (!r.passed) os << "FAILED: " << r.name << ": " << r.invariant << '\n';
    return all ? kExitOk : kExitFailed;
}

inline Image seeded_input(const RunConfig& cfg) {
    DatasetConfig dc;
    dc.seed = derive_seed(cfg.seed, seed_stream::input);
    dc.n_per_class = 1;
    dc.classes = 2;
    dc.height = cfg.image_size;
    dc.width = cfg.image_size;
    dc.channels = cfg.channels;
    dc.noise = cfg.noise;
    dc.jitter = cfg.jitter;
    dc.extent = cfg.extent;
    dc.test_fraction = 0.0;
    return gen_dataset(dc).images.front();
}

inline int cmd_loss_curves(const RunConfig& cfg, std::ostream& os) {
    if (cfg.mode == MergeMode::baseline_tome)
        throw ConfigError("loss-curves: mode must be one_side or both_sides (the baseline is always included)");
    const auto dir = prepare_output_dir(cfg.out);
    const ModelConfig mc = cfg.model_config();
    const auto model = make_model<double>(mc, derive_seed(cfg.seed, seed_stream::model));
    const auto input = model.embed(seeded_input(cfg));
    const std::size_t cls = input.cls_index;
    const auto plan = plan_schedule(input.size(), cls, cfg.rate, mc.depth, cfg.mode, cfg.schedule_options());
    const auto base = plan_schedule(input.size(), cls, cfg.rate, mc.depth, MergeMode::baseline_tome, cfg.schedule_options());
    const LossCurve curve = layerwise_loss_curve(model, input, plan, base, cfg.merge_options());

    StackOptions so;
    so.merge = cfg.merge_options();
    const auto run = forward_stack(input, model, plan, so);
    std::ostringstream rec;
    rec << merge_records_header() << '\n';
    for (const auto& r : run.records) rec << format_merge_record(r) << '\n';

    write_file_atomic(dir / "loss_curves.csv", curve.to_csv());
    write_file_atomic(dir / "merge_records.csv", rec.str());
    const auto stm = curve.cls_column("stm");
    const auto tome = curve.cls_column("baseline");
    os << "layer  stm_cls_loss  baseline_cls_loss\n";
    for (std::size_t l = 0; l < stm.size(); ++l) os << l << "  " << sci(stm[l]) << "  " << sci(tome[l]) << '\n';
    os << "wrote " << (dir / "loss_curves.csv").string() << " and " << (dir / "merge_records.csv").string() << '\n';
    return kExitOk;
}

inline int cmd_heatmap(const RunConfig& cfg, std::ostream& os) {
    const auto dir = prepare_output_dir(cfg.out);
    const ModelConfig mc = cfg.model_config();
    if (cfg.heatmap_layer >= mc.depth) throw ConfigError("config: heatmap_layer must be below depth");
    const auto model = make_model<double>(mc, derive_seed(cfg.seed, seed_stream::model));
    const auto input = model.embed(seeded_input(cfg));
    StackOptions so;
    so.record_trajectories = true;
    so.record_caches = true;
    MergePlan none;
    none.layers.assign(mc.depth, LayerReduction{});
    const auto run = forward_stack(input, model, none, so);
    const auto& trace = run.traces[cfg.heatmap_layer];
    const auto& cache = run.caches[cfg.heatmap_layer];
    const std::size_t grid = mc.image_size / mc.patch_size;
    const std::vector<const HiddenTrajectory<double>*> both{&trace.fwd, &trace.bwd};
    export_heatmap(hidden_norm_grid<double>(both, trace.cls_index, grid, grid), dir / "hidden_norms.csv");
    export_heatmap(hidden_attention<double>(cache.fwd, Direction::forward), dir / "attention_fwd.csv");
    export_heatmap(hidden_attention<double>(cache.bwd, Direction::backward), dir / "attention_bwd.csv");
    os << "layer " << cfg.heatmap_layer << ": wrote hidden_norms.csv, attention_fwd.csv, attention_bwd.csv to "
       << dir.string() << '\n';
    return kExitOk;
}

inline FlopsDims flops_dims_for(const RunConfig& cfg) {
    if (cfg.preset == "toy")
        return toy_dims(cfg.depth, cfg.d_model, cfg.d_state, cfg.image_size, cfg.patch_size, cfg.channels,
                        cfg.conv_width);
    try {
        return vim_preset(cfg.preset);
    } catch (const InvalidInput& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

inline int cmd_flops(const RunConfig& cfg, std::ostream& os) {
    const auto dir = prepare_output_dir(cfg.out);
    const FlopsDims dims = flops_dims_for(cfg);
    const FlopsModel base = flops_estimate(dims, MergePlan{});
    os << "preset " << dims.name << ": depth " << dims.depth << ", d_model " << dims.d_model << ", d_state "
       << dims.d_state << ", tokens " << dims.num_tokens() << '\n';
    for (const auto& [name, v] : base.components) os << "  " << name << ": " << fixed(v * 1e-9, 4) << " G\n";
    os << "  total: " << fixed(base.gflops(), 4) << " GFLOPs\n";

    std::ostringstream csv;
    csv << "preset,mode,rate,gflops,reduction\n";
    csv << dims.name << ",none,0," << format_double(base.gflops()) << ",0\n";
    os << "mode        rate  gflops   reduction\n";
    const std::size_t cls = middle_cls_index(dims.num_patches);
    for (MergeMode mode : cfg.modes) {
        for (double rate : cfg.rates) {
            MergePlan plan;
            try {
                plan = plan_schedule(dims.num_tokens(), cls, rate, dims.depth, mode, cfg.schedule_options());
            } catch (const InvalidInput& e) {
                os << to_string(mode) << ' ' << rate << ": skipped (" << e.what() << ")\n";
                continue;
            }
            const FlopsModel m = flops_estimate(dims, plan);
            const double red = 1.0 - m.total / base.total;
            char line[128];
            std::snprintf(line, sizeof line, "%-10s  %.2f  %.4f  %.2f%%\n", to_string(mode), rate, m.gflops(),
                          100.0 * red);
            os << line;
            csv << dims.name << ',' << to_string(mode) << ',' << format_double(rate) << ','
                << format_double(m.gflops()) << ',' << format_double(red) << '\n';
        }
    }
    write_file_atomic(dir / "flops.csv", csv.str());
    return kExitOk;
}

inline DatasetConfig bench_dataset_config(const RunConfig& cfg) {
    DatasetConfig dc;
    dc.seed = derive_seed(cfg.seed, seed_stream::data);
    dc.n_per_class = cfg.n_per_class;
    dc.classes = cfg.classes;
    dc.height = cfg.image_size;
    dc.width = cfg.image_size;
    dc.channels = cfg.channels;
    dc.noise = cfg.noise;
    dc.jitter = cfg.jitter;
    dc.extent = cfg.extent;
    dc.test_fraction = cfg.test_fraction;
    return dc;
}

inline BenchConfig bench_config(const RunConfig& cfg) {
    BenchConfig bc;
    bc.model = cfg.model_config();
    bc.lambda = cfg.lambda;
    bc.source = cfg.param_source;
    bc.start_layer = cfg.start_layer;
    bc.merge = cfg.merge_options();
    return bc;
}

inline std::vector<std::uint64_t> bench_model_seeds(const RunConfig& cfg) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < cfg.bench_seeds; ++i)
        seeds.push_back(derive_seed(derive_seed(cfg.seed, seed_stream::model), i));
    return seeds;
}

inline int cmd_bench(const RunConfig& cfg, std::ostream& os) {
    const auto dir = prepare_output_dir(cfg.out);
    const auto ds = gen_dataset(bench_dataset_config(cfg));
    const auto rows = run_ablation<double>(bench_model_seeds(cfg), ds, cfg.modes, cfg.rates, bench_config(cfg));
    write_file_atomic(dir / "bench.csv", ablation_csv(rows));
    for (const auto& r : rows)
        if (r.skipped) os << "skipped " << r.mode << " at rate " << r.rate << ": " << r.note << '\n';
    os << "mode        rate  mean_acc_drop\n";
    for (MergeMode mode : cfg.modes)
        for (double rate : cfg.rates) {
            const double d = mean_drop(rows, to_string(mode), rate);
            if (d != d) continue;
            char line[96];
            std::snprintf(line, sizeof line, "%-10s  %.2f  %+.4f\n", to_string(mode), rate, d);
            os << line;
        }
    os << "wrote " << (dir / "bench.csv").string() << '\n';
    return kExitOk;
}

}  // namespace stmssm

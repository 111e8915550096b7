#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "stmssm/commands.hpp"

int main(int argc, char** argv) {
    using namespace stmssm;
    CLI::App app{"Token merging for bidirectional selective state-space encoders"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> preset;
    std::optional<std::string> rates;
    std::optional<std::string> mode;
    app.add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "global seed");
    app.add_option("--out", out, "output directory");
    app.add_option("--preset", preset, "FLOPs preset")->check(CLI::IsMember({"vim-ti", "vim-s", "vim-b", "toy"}));
    app.add_option("--rates", rates, "comma-separated merge rates");
    app.add_option("--mode", mode, "merge mode")->check(CLI::IsMember({"one_side", "both_sides", "baseline"}));

    auto* verify = app.add_subcommand("verify", "run the invariant suites");
    auto* loss = app.add_subcommand("loss-curves", "layer-wise hidden-state loss curves");
    auto* heat = app.add_subcommand("heatmap", "hidden-state norm grid and attention matrices");
    auto* flops = app.add_subcommand("flops", "analytic FLOPs model");
    auto* bench = app.add_subcommand("bench", "probe accuracy ablation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitBadInput;
    }

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (out) cfg.out = *out;
        if (preset) cfg.preset = *preset;
        if (rates) cfg.rates = parse_rates(*rates);
        if (mode) {
            cfg.mode = parse_merge_mode(*mode);
            cfg.modes = {cfg.mode};
        }
        if (rates && loss->parsed()) cfg.rate = cfg.rates.front();
        cfg.validate();

        if (verify->parsed()) return cmd_verify(cfg, std::cout);
        if (loss->parsed()) return cmd_loss_curves(cfg, std::cout);
        if (heat->parsed()) return cmd_heatmap(cfg, std::cout);
        if (flops->parsed()) return cmd_flops(cfg, std::cout);
        if (bench->parsed()) return cmd_bench(cfg, std::cout);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitIo;
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitBadInput;
    }
    return kExitBadInput;
}

#pragma once

// Run configuration: `key = value` lines, `#` starts a comment, unknown keys rejected.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stmssm/csv.hpp"
#include "stmssm/tensor.hpp"
#include "stmssm/token_merge.hpp"
#include "stmssm/vim_stack.hpp"

namespace stmssm {

class ConfigError : public InvalidInput {
public:
    using InvalidInput::InvalidInput;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "out";

    // toy model
    std::size_t depth = 8;
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 1;
    std::size_t d_model = 64;
    std::size_t d_state = 8;
    double a_scale = 1.0;
    double delta_bias = 0.0;
    double delta_weight_scale = 1.0;
    std::size_t conv_width = 0;

    // merge plan
    double rate = 0.2;
    MergeMode mode = MergeMode::both_sides;
    ParamSource param_source = ParamSource::previous_layer_cache;
    std::string selection_rule = "outermost_first";
    std::size_t start_layer = 1;
    TargetGain target_gain = TargetGain::source;
    CompensationSolve compensation = CompensationSolve::least_squares;
    double eps_div = 1e-12;

    // verification suites
    std::size_t verify_instances = 100;
    std::optional<double> tolerance;  // overrides every suite tolerance when set
    double tol_scan = 1e-10;
    double tol_attention = 1e-8;
    double tol_exactness = 1e-9;
    double tol_fading = 1e-9;
    double tol_decomposition = 1e-10;

    // heatmap
    std::size_t heatmap_layer = 0;

    // flops
    std::string preset = "vim-ti";

    // bench
    std::size_t bench_seeds = 5;
    std::size_t n_per_class = 60;
    std::size_t classes = 4;
    double noise = 0.2;
    int jitter = 3;
    double extent = 0.4;
    double test_fraction = 0.5;
    double lambda = 1e-2;
    std::vector<double> rates{0.15, 0.2, 0.3, 0.4};
    std::vector<MergeMode> modes{MergeMode::one_side, MergeMode::both_sides, MergeMode::baseline_tome};

    double tol(double suite_default) const { return tolerance ? *tolerance : suite_default; }

    ModelConfig model_config() const {
        ModelConfig m;
        m.depth = depth;
        m.image_size = image_size;
        m.patch_size = patch_size;
        m.channels = channels;
        m.layer.d_model = static_cast<Eigen::Index>(d_model);
        m.layer.d_state = static_cast<Eigen::Index>(d_state);
        m.layer.projection.a_scale = a_scale;
        m.layer.projection.delta_bias = delta_bias;
        m.layer.projection.delta_weight_scale = delta_weight_scale;
        m.layer.conv_width = conv_width;
        return m;
    }

    MergeOptions merge_options() const {
        MergeOptions o;
        o.solve = compensation;
        o.target_gain = target_gain;
        o.eps_div = eps_div;
        return o;
    }

    ScheduleOptions schedule_options() const { return {start_layer, param_source}; }

    void validate() const {
        auto check = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError("config: " + msg);
        };
        check(depth > 0 && d_model > 0 && d_state > 0 && channels > 0, "model dimensions must be positive");
        check(patch_size > 0 && image_size % patch_size == 0, "image_size must be divisible by patch_size");
        check(rate >= 0.0 && rate < 1.0, "rate must lie in [0, 1)");
        check(a_scale > 0.0, "a_scale must be positive");
        check(lambda > 0.0, "lambda must be positive");
        check(classes >= 2 && classes <= 8, "classes must lie in [2, 8]");
        check(noise >= 0.0 && extent > 0.0 && extent <= 1.0, "noise must be non-negative and extent in (0, 1]");
        check(test_fraction >= 0.0 && test_fraction < 1.0, "test_fraction must lie in [0, 1)");
        check(bench_seeds > 0 && verify_instances > 0, "bench_seeds and verify_instances must be positive");
        check(selection_rule == "outermost_first", "selection_rule must be outermost_first");
        for (double r : rates) check(r >= 0.0 && r < 1.0, "rates must lie in [0, 1)");
        check(!modes.empty(), "modes must not be empty");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <typename V>
V parse_number(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        V v{};
        if constexpr (std::is_same_v<V, double>) {
            v = std::stod(value, &used);
        } else if constexpr (std::is_same_v<V, int>) {
            v = std::stoi(value, &used);
        } else {
            if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
            v = static_cast<V>(std::stoull(value, &used));
        }
        if (used != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad value '" + value + "' for key '" + key + "'");
    }
}

}  // namespace detail

inline std::vector<double> parse_rates(const std::string& s) {
    std::vector<double> out;
    for (const auto& item : detail::split_list(s)) out.push_back(detail::parse_number<double>("rates", item));
    if (out.empty()) throw ConfigError("config: empty rate list");
    return out;
}

inline std::vector<MergeMode> parse_modes(const std::string& s) {
    std::vector<MergeMode> out;
    for (const auto& item : detail::split_list(s)) {
        try {
            out.push_back(parse_merge_mode(item));
        } catch (const InvalidInput& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
    return out;
}

/// Applies one `key = value` assignment; throws ConfigError naming the key on failure.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_number;
    using Setter = std::function<void(const std::string&)>;
    auto sz = [&](std::size_t& f) -> Setter { return [&f, key](const std::string& v) { f = parse_number<std::size_t>(key, v); }; };
    auto dbl = [&](double& f) -> Setter { return [&f, key](const std::string& v) { f = parse_number<double>(key, v); }; };
    const std::map<std::string, Setter> setters{
        {"seed", [&](const std::string& v) { c.seed = parse_number<std::uint64_t>(key, v); }},
        {"out", [&](const std::string& v) { c.out = v; }},
        {"depth", sz(c.depth)},
        {"image_size", sz(c.image_size)},
        {"patch_size", sz(c.patch_size)},
        {"channels", sz(c.channels)},
        {"d_model", sz(c.d_model)},
        {"d_state", sz(c.d_state)},
        {"a_scale", dbl(c.a_scale)},
        {"delta_bias", dbl(c.delta_bias)},
        {"delta_weight_scale", dbl(c.delta_weight_scale)},
        {"conv_width", sz(c.conv_width)},
        {"rate", dbl(c.rate)},
        {"mode", [&](const std::string& v) {
             auto m = parse_modes(v);
             if (m.size() != 1) throw ConfigError("config: key 'mode' takes exactly one mode");
             c.mode = m.front();
         }},
        {"param_source", [&](const std::string& v) {
             try {
                 c.param_source = parse_param_source(v);
             } catch (const InvalidInput& e) {
                 throw ConfigError(std::string("config: ") + e.what());
             }
         }},
        {"selection_rule", [&](const std::string& v) { c.selection_rule = v; }},
        {"start_layer", sz(c.start_layer)},
        {"target_gain", [&](const std::string& v) {
             if (v == "source") c.target_gain = TargetGain::source;
             else if (v == "current_layer") c.target_gain = TargetGain::current_layer;
             else throw ConfigError("config: bad value '" + v + "' for key 'target_gain'");
         }},
        {"compensation", [&](const std::string& v) {
             if (v == "least_squares") c.compensation = CompensationSolve::least_squares;
             else if (v == "channel_mean_ratio") c.compensation = CompensationSolve::channel_mean_ratio;
             else throw ConfigError("config: bad value '" + v + "' for key 'compensation'");
         }},
        {"eps_div", dbl(c.eps_div)},
        {"verify_instances", sz(c.verify_instances)},
        {"tolerance", [&](const std::string& v) { c.tolerance = parse_number<double>(key, v); }},
        {"tol_scan", dbl(c.tol_scan)},
        {"tol_attention", dbl(c.tol_attention)},
        {"tol_exactness", dbl(c.tol_exactness)},
        {"tol_fading", dbl(c.tol_fading)},
        {"tol_decomposition", dbl(c.tol_decomposition)},
        {"heatmap_layer", sz(c.heatmap_layer)},
        {"preset", [&](const std::string& v) { c.preset = v; }},
        {"bench_seeds", sz(c.bench_seeds)},
        {"n_per_class", sz(c.n_per_class)},
        {"classes", sz(c.classes)},
        {"noise", dbl(c.noise)},
        {"jitter", [&](const std::string& v) { c.jitter = parse_number<int>(key, v); }},
        {"extent", dbl(c.extent)},
        {"test_fraction", dbl(c.test_fraction)},
        {"lambda", dbl(c.lambda)},
        {"rates", [&](const std::string& v) { c.rates = parse_rates(v); }},
        {"modes", [&](const std::string& v) { c.modes = parse_modes(v); }},
    };
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(value);
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: line " + std::to_string(lineno) + ": missing key");
        set_config_value(base, key, value);
    }
    base.validate();
    return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const IoError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return parse_config(text);
}

}  // namespace stmssm

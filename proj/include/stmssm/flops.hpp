#pragma once

// Analytic cost model for a bidirectional ViM-style encoder.
//
// Counting conventions: a multiply-add counts as `flops_per_mac` FLOPs (1 by default,
// the convention under which the published ViM FLOPs figures are quoted);
// normalizations and elementwise nonlinearities cost 1 FLOP per element; there is no
// softmax. The exponential in the discretization counts as a nonlinearity.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "stmssm/tensor.hpp"
#include "stmssm/token_merge.hpp"

namespace stmssm {

struct FlopsDims {
    std::string name = "custom";
    std::size_t depth = 24;
    std::size_t d_model = 192;
    std::size_t d_state = 16;
    std::size_t expansion = 2;
    std::size_t dt_rank = 0;        // 0: ceil(d_model / 16); ignored when full_delta_map
    bool full_delta_map = false;    // timescale map is a full (inner x inner) matrix
    bool input_projection = true;   // x/z input projection; otherwise only a gate map
    std::size_t conv_width = 4;
    std::size_t patch_size = 16;
    std::size_t channels = 3;
    std::size_t num_patches = 196;
    double flops_per_mac = 1.0;

    std::size_t inner() const { return expansion * d_model; }
    std::size_t rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
    std::size_t num_tokens() const { return num_patches + 1; }
};

inline FlopsDims vim_preset(const std::string& name) {
    FlopsDims d;
    d.name = name;
    if (name == "vim-ti") {
        d.d_model = 192;
    } else if (name == "vim-s") {
        d.d_model = 384;
    } else if (name == "vim-b") {
        d.d_model = 768;
    } else {
        throw InvalidInput("unknown FLOPs preset '" + name + "'");
    }
    return d;
}

/// Dimensions matching the toy encoder built by make_model.
inline FlopsDims toy_dims(std::size_t depth, std::size_t d_model, std::size_t d_state, std::size_t image_size,
                          std::size_t patch_size, std::size_t channels, std::size_t conv_width = 0) {
    FlopsDims d;
    d.name = "toy";
    d.depth = depth;
    d.d_model = d_model;
    d.d_state = d_state;
    d.expansion = 1;
    d.full_delta_map = true;
    d.input_projection = false;
    d.conv_width = conv_width;
    d.patch_size = patch_size;
    d.channels = channels;
    d.num_patches = (image_size / patch_size) * (image_size / patch_size);
    return d;
}

struct FlopsModel {
    FlopsDims dims;
    std::vector<std::size_t> lengths;        // tokens processed per layer
    std::map<std::string, double> components;  // FLOPs per component, summed over layers
    std::vector<double> per_layer;           // FLOPs per layer (merge overhead included)
    double total = 0.0;                      // FLOPs

    double gflops() const { return total * 1e-9; }
    double component_gflops(const std::string& name) const {
        auto it = components.find(name);
        return it == components.end() ? 0.0 : it->second * 1e-9;
    }
};

/// `reductions[l]` (optional) describes the merge performed before layer l; its
/// overhead is added for positional merges and for the similarity baseline.
inline FlopsModel flops_estimate(const FlopsDims& dims, const std::vector<std::size_t>& lengths,
                                 const std::vector<LayerReduction>& reductions = {},
                                 MergeMode mode = MergeMode::both_sides) {
    require(dims.depth > 0 && dims.d_model > 0 && dims.d_state > 0 && dims.expansion > 0,
            "flops_estimate: dimensions must be positive");
    require(lengths.size() == dims.depth, "flops_estimate: one length per layer required");
    const double mac = dims.flops_per_mac;
    const double d = static_cast<double>(dims.d_model);
    const double e = static_cast<double>(dims.inner());
    const double n = static_cast<double>(dims.d_state);
    const double r = static_cast<double>(dims.rank());

    FlopsModel m;
    m.dims = dims;
    m.lengths = lengths;
    auto add = [&](const std::string& k, double v) {
        m.components[k] += v;
        m.total += v;
        return v;
    };
    const double patch_dim = static_cast<double>(dims.patch_size * dims.patch_size * dims.channels);
    add("patch_embed", mac * static_cast<double>(dims.num_patches) * patch_dim * d);

    for (std::size_t l = 0; l < dims.depth; ++l) {
        const double len = static_cast<double>(lengths[l]);
        double layer = 0.0;
        layer += add("in_gate_proj", mac * len * d * (dims.input_projection ? 2.0 * e : e));
        layer += add("out_proj", mac * len * e * d);
        layer += add("norm_act", len * (d + e));  // layer norm + gate activation
        for (int dir = 0; dir < 2; ++dir) {
            if (dims.conv_width) layer += add("conv", mac * len * e * static_cast<double>(dims.conv_width));
            const double delta_map = dims.full_delta_map ? e * e : 2.0 * e * r;
            layer += add("selective_proj", mac * len * (e * 2.0 * n + delta_map) + len * e);
            layer += add("discretize", len * e * n);
            layer += add("scan", mac * len * 3.0 * e * n);
        }
        if (l < reductions.size() && reductions[l].total() > 0) {
            const double pre_len = len + static_cast<double>(reductions[l].total());
            if (mode == MergeMode::baseline_tome) {
                // cosine similarities between the two halves plus one mean per pair
                const double half = pre_len / 2.0;
                layer += add("merge", mac * (half * half * d + pre_len * d) +
                                          static_cast<double>(reductions[l].total()) * d);
            } else {
                // per reduced token: one accumulation step over (channel, state); per
                // target: one decay step and the per-channel least-squares solve
                const double reduced = static_cast<double>(reductions[l].total());
                const double targets = (reductions[l].left ? 1.0 : 0.0) + (reductions[l].right ? 1.0 : 0.0);
                layer += add("merge", mac * (reduced * 2.0 * e * n + targets * 3.0 * e * n) + targets * e);
            }
        }
        m.per_layer.push_back(layer);
    }
    return m;
}

inline FlopsModel flops_estimate(const FlopsDims& dims, const MergePlan& plan) {
    std::vector<std::size_t> lengths(dims.depth, dims.num_tokens());
    std::vector<LayerReduction> red(dims.depth);
    if (!plan.layers.empty()) {
        require(plan.depth() == dims.depth, "flops_estimate: plan depth differs from model depth");
        lengths = planned_lengths(plan, dims.num_tokens());
        red = plan.layers;
    }
    return flops_estimate(dims, lengths, red, plan.mode);
}

}  // namespace stmssm

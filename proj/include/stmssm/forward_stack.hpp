#pragma once

#include <span>
#include <vector>

#include "stmssm/token_merge.hpp"
#include "stmssm/tome_baseline.hpp"
#include "stmssm/vim_stack.hpp"

namespace stmssm {

struct StackOptions {
    bool record_trajectories = false;
    bool record_caches = false;  // the previous layer's cache is always kept internally
    MergeOptions merge;
};

template <typename T = double>
struct LayerTrace {
    std::vector<std::size_t> origin;  // positions that entered the layer
    std::size_t cls_index = 0;
    HiddenTrajectory<T> fwd;
    HiddenTrajectory<T> bwd;
};

template <typename T = double>
struct StackResult {
    Vec<T> cls_feature;
    TokenSequence<T> final_seq;
    std::vector<std::size_t> lengths;  // sequence length processed by each layer
    std::vector<LayerTrace<T>> traces;
    std::vector<LayerCache<T>> caches;
    std::vector<MergeRecord> records;
};

/// Run every layer, applying the plan's merge for layer l to the layer's input first.
/// Positional plans draw parameters from the previous layer's cache, or from a
/// projection of the pre-merge sequence under the current layer when no cache exists
/// yet (or when the plan asks for it).
template <typename T>
StackResult<T> forward_stack(const TokenSequence<T>& seq0, std::span<const VimLayerParams<T>> layers,
                             const MergePlan& plan, const LayerConfig& cfg,
                             const StackOptions& opts = {}) {
    seq0.validate();
    require(plan.depth() <= layers.size(), "forward_stack: plan is deeper than the stack");
    StackResult<T> res;
    TokenSequence<T> seq = seq0;
    std::optional<LayerCache<T>> prev_cache;
    const std::size_t cls_origin = seq0.cls_origin();

    for (std::size_t l = 0; l < layers.size(); ++l) {
        seq.layer_index = l;
        const LayerReduction red = plan.at(l);
        if (red.total() > 0) {
            if (plan.mode == MergeMode::baseline_tome) {
                auto m = baseline_tome_merge(seq, red.total());
                seq = std::move(m.seq);
                for (auto& r : m.records) res.records.push_back(std::move(r));
            } else {
                require(red.left <= seq.cls_index && red.right < seq.size() - seq.cls_index,
                        "forward_stack: plan would reduce the class token");
                std::optional<LayerCache<T>> current;
                if (plan.source == ParamSource::current_projection || !prev_cache ||
                    opts.merge.target_gain == TargetGain::current_layer)
                    current = project_cache(seq, layers[l], cfg);
                const LayerCache<T>& src =
                    (plan.source == ParamSource::previous_layer_cache && prev_cache) ? *prev_cache : *current;
                auto m = apply_merge(seq, red, plan.mode, src, opts.merge, current ? &*current : nullptr);
                seq = std::move(m.seq);
                for (auto& r : m.records) res.records.push_back(std::move(r));
            }
            require(seq.cls_origin() == cls_origin, "forward_stack: class token identity changed");
        }
        res.lengths.push_back(seq.size());
        LayerOutput<T> out = forward_layer(seq, layers[l], cfg);
        if (opts.record_trajectories)
            res.traces.push_back({seq.origin, seq.cls_index, std::move(out.fwd), std::move(out.bwd)});
        if (opts.record_caches) res.caches.push_back(out.cache);
        prev_cache = std::move(out.cache);
        seq = std::move(out.seq);
    }
    res.cls_feature = seq.tokens[seq.cls_index];
    res.final_seq = std::move(seq);
    return res;
}

template <typename T>
StackResult<T> forward_stack(const TokenSequence<T>& seq0, const VimModel<T>& model, const MergePlan& plan,
                             const StackOptions& opts = {}) {
    return forward_stack<T>(seq0, std::span<const VimLayerParams<T>>(model.layers), plan, model.config.layer,
                            opts);
}

}  // namespace stmssm

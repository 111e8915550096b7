#pragma once

// Similarity-driven pair merging used as the comparison baseline.
//
// Non-class tokens are split alternately into two sets; `count` disjoint cross-set
// pairs with the largest total cosine similarity are selected and each pair is
// replaced by its mean at the earlier of the two positions.

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "stmssm/tensor.hpp"
#include "stmssm/token_merge.hpp"
#include "stmssm/vim_stack.hpp"

namespace stmssm {

template <typename T>
double cosine_similarity(const Vec<T>& a, const Vec<T>& b) {
    const double na = static_cast<double>(a.norm());
    const double nb = static_cast<double>(b.norm());
    if (na == 0.0 || nb == 0.0) return 0.0;
    return static_cast<double>(a.dot(b)) / (na * nb);
}

/// Maximum-weight matching with exactly `count` edges between the rows and columns of
/// `weight`, by successive shortest augmenting paths on the min-cost-flow network.
/// Each augmentation keeps the matching optimal for its cardinality.
inline std::vector<std::pair<std::size_t, std::size_t>> best_k_matching(const Mat<double>& weight,
                                                                        std::size_t count) {
    const auto na = static_cast<std::size_t>(weight.rows());
    const auto nb = static_cast<std::size_t>(weight.cols());
    require(count <= std::min(na, nb), "best_k_matching: count exceeds the smaller side");

    struct Edge {
        std::size_t to;
        int cap;
        double cost;
        std::size_t rev;
    };
    const std::size_t source = 0;
    const std::size_t sink = na + nb + 1;
    std::vector<std::vector<Edge>> g(na + nb + 2);
    auto add_edge = [&](std::size_t u, std::size_t v, double cost) {
        g[u].push_back({v, 1, cost, g[v].size()});
        g[v].push_back({u, 0, -cost, g[u].size() - 1});
    };
    for (std::size_t i = 0; i < na; ++i) add_edge(source, 1 + i, 0.0);
    for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j) add_edge(1 + i, 1 + na + j, -weight(i, j));
    for (std::size_t j = 0; j < nb; ++j) add_edge(1 + na + j, sink, 0.0);

    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t round = 0; round < count; ++round) {
        // Bellman-Ford: the residual graph carries negative costs
        std::vector<double> dist(g.size(), inf);
        std::vector<std::pair<std::size_t, std::size_t>> via(g.size(), {0, 0});
        dist[source] = 0.0;
        for (std::size_t iter = 0; iter + 1 < g.size(); ++iter) {
            bool changed = false;
            for (std::size_t u = 0; u < g.size(); ++u) {
                if (dist[u] == inf) continue;
                for (std::size_t e = 0; e < g[u].size(); ++e) {
                    const Edge& ed = g[u][e];
                    if (ed.cap > 0 && dist[u] + ed.cost < dist[ed.to] - 1e-15) {
                        dist[ed.to] = dist[u] + ed.cost;
                        via[ed.to] = {u, e};
                        changed = true;
                    }
                }
            }
            if (!changed) break;
        }
        require(dist[sink] < inf, "best_k_matching: no augmenting path");
        for (std::size_t v = sink; v != source;) {
            auto [u, e] = via[v];
            g[u][e].cap -= 1;
            g[v][g[u][e].rev].cap += 1;
            v = u;
        }
    }

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < na; ++i)
        for (const Edge& e : g[1 + i])
            if (e.to > na && e.to <= na + nb && e.cap == 0) pairs.emplace_back(i, e.to - 1 - na);
    return pairs;
}

template <typename T = double>
struct TomeOutcome {
    TokenSequence<T> seq;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (earlier, later) pre-merge positions
    double total_similarity = 0.0;
    std::vector<MergeRecord> records;
};

template <typename T>
TomeOutcome<T> baseline_tome_merge(const TokenSequence<T>& seq, std::size_t count) {
    seq.validate();
    TomeOutcome<T> out;
    if (count == 0) {
        out.seq = seq;
        return out;
    }
    std::vector<std::size_t> set_a, set_b;
    for (std::size_t i = 0, rank = 0; i < seq.size(); ++i) {
        if (i == seq.cls_index) continue;
        (rank++ % 2 == 0 ? set_a : set_b).push_back(i);
    }
    require(count <= std::min(set_a.size(), set_b.size()),
            "baseline_tome_merge: count exceeds the available token pairs");

    Mat<double> sim(static_cast<Eigen::Index>(set_a.size()), static_cast<Eigen::Index>(set_b.size()));
    for (std::size_t i = 0; i < set_a.size(); ++i)
        for (std::size_t j = 0; j < set_b.size(); ++j)
            sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                cosine_similarity(seq.tokens[set_a[i]], seq.tokens[set_b[j]]);

    std::vector<char> removed(seq.size(), 0);
    std::vector<Vec<T>> tokens = seq.tokens;
    for (auto [i, j] : best_k_matching(sim, count)) {
        const std::size_t a = set_a[i];
        const std::size_t b = set_b[j];
        const std::size_t lo = std::min(a, b);
        const std::size_t hi = std::max(a, b);
        tokens[lo] = (seq.tokens[a] + seq.tokens[b]) / static_cast<T>(2);
        removed[hi] = 1;
        out.pairs.emplace_back(lo, hi);
        out.total_similarity += sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        MergeRecord r;
        r.layer = seq.layer_index;
        r.reduced = {seq.origin[hi]};
        r.target = seq.origin[lo];
        out.records.push_back(std::move(r));
    }
    std::sort(out.pairs.begin(), out.pairs.end());

    out.seq.layer_index = seq.layer_index;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (removed[i]) continue;
        if (i == seq.cls_index) out.seq.cls_index = out.seq.tokens.size();
        out.seq.tokens.push_back(std::move(tokens[i]));
        out.seq.origin.push_back(seq.origin[i]);
    }
    return out;
}

}  // namespace stmssm

#pragma once

// Toy Vision-Mamba encoder: patch embedding with a middle class token and
// bidirectional selective-SSM layers that record their discretized parameters.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "stmssm/random.hpp"
#include "stmssm/ssm_core.hpp"
#include "stmssm/tensor.hpp"

namespace stmssm {

template <typename T = double>
struct TokenSequence {
    std::vector<Vec<T>> tokens;
    std::size_t cls_index = 0;
    std::size_t layer_index = 0;
    std::vector<std::size_t> origin;  // original (layer-0) index of every position

    std::size_t size() const { return tokens.size(); }
    Eigen::Index d_model() const { return tokens.empty() ? 0 : tokens.front().size(); }
    std::size_t cls_origin() const { return origin.at(cls_index); }

    void validate() const {
        require(!tokens.empty(), "token sequence is empty");
        require(cls_index < tokens.size(), "class token index out of range");
        require(origin.size() == tokens.size(), "origin map length != sequence length");
        for (std::size_t i = 1; i < origin.size(); ++i)
            require(origin[i - 1] < origin[i], "origin map must be strictly increasing");
        for (const auto& t : tokens) require(t.size() == tokens.front().size(), "ragged tokens");
    }

    /// Fresh layer-0 sequence with the identity origin map.
    static TokenSequence from_tokens(std::vector<Vec<T>> tokens, std::size_t cls_index) {
        TokenSequence s;
        s.tokens = std::move(tokens);
        s.cls_index = cls_index;
        s.origin.resize(s.tokens.size());
        std::iota(s.origin.begin(), s.origin.end(), std::size_t{0});
        s.validate();
        return s;
    }
};

/// Discretized parameters recorded by one layer for every position it consumed.
template <typename T = double>
struct LayerCache {
    std::size_t layer = 0;
    std::vector<std::size_t> origin;
    std::vector<DiscretizedStep<T>> fwd;
    std::vector<DiscretizedStep<T>> bwd;

    const std::vector<DiscretizedStep<T>>& steps(Direction dir) const {
        return dir == Direction::forward ? fwd : bwd;
    }
    std::size_t size() const { return origin.size(); }

    /// Position of an original index in this cache.
    std::optional<std::size_t> find(std::size_t original) const {
        auto it = std::lower_bound(origin.begin(), origin.end(), original);
        if (it == origin.end() || *it != original) return std::nullopt;
        return static_cast<std::size_t>(it - origin.begin());
    }
};

// ---------------------------------------------------------------------------
// Patch embedding

struct EmbedConfig {
    double weight_scale = 1.0;
    double pos_scale = 1.0;  // 0 disables the positional offsets
    double cls_scale = 1.0;  // 0 makes the class token vector zero
};

template <typename T = double>
struct PatchEmbedding {
    std::size_t patch_size = 0;
    std::size_t channels = 0;
    Mat<T> weight;             // d_model x patch_dim
    Vec<T> cls_token;          // d_model
    std::vector<Vec<T>> pos;   // one offset per sequence position (patches + class token)

    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t num_tokens() const { return pos.size(); }
};

template <typename T = double>
PatchEmbedding<T> make_patch_embedding(std::size_t patch_size, std::size_t channels,
                                       std::size_t num_patches, Eigen::Index d_model,
                                       std::uint64_t seed, const EmbedConfig& cfg = {}) {
    require(patch_size > 0 && channels > 0 && num_patches > 0 && d_model > 0,
            "make_patch_embedding: dimensions must be positive");
    Rng rng(seed);
    PatchEmbedding<T> e;
    e.patch_size = patch_size;
    e.channels = channels;
    const auto pd = static_cast<Eigen::Index>(e.patch_dim());
    e.weight = rng.normal_matrix<T>(d_model, pd, cfg.weight_scale / std::sqrt(static_cast<double>(pd)));
    e.cls_token = rng.normal_vector<T>(d_model, cfg.cls_scale);
    e.pos.reserve(num_patches + 1);
    for (std::size_t i = 0; i < num_patches + 1; ++i)
        e.pos.push_back(rng.normal_vector<T>(d_model, 0.1 * cfg.pos_scale));
    return e;
}

/// Index at which the class token is inserted among `num_patches` patch tokens.
constexpr std::size_t middle_cls_index(std::size_t num_patches) { return (num_patches + 1) / 2; }

template <typename T>
TokenSequence<T> embed_patches(const Image& image, const PatchEmbedding<T>& emb) {
    const std::size_t p = emb.patch_size;
    require(p > 0 && image.height % p == 0 && image.width % p == 0,
            "embed_patches: image dimensions must be divisible by the patch size");
    require(image.channels == emb.channels, "embed_patches: channel count mismatch");
    require(image.pixels.size() == image.height * image.width * image.channels,
            "embed_patches: pixel buffer has wrong size");
    const std::size_t gh = image.height / p;
    const std::size_t gw = image.width / p;
    const std::size_t num_patches = gh * gw;
    require(emb.num_tokens() == num_patches + 1,
            "embed_patches: embedding was built for a different patch count");
    const std::size_t cls = middle_cls_index(num_patches);

    std::vector<Vec<T>> tokens;
    tokens.reserve(num_patches + 1);
    Vec<T> flat(static_cast<Eigen::Index>(emb.patch_dim()));
    for (std::size_t py = 0; py < gh; ++py) {
        for (std::size_t px = 0; px < gw; ++px) {
            if (tokens.size() == cls) tokens.push_back(emb.cls_token);
            Eigen::Index f = 0;
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t c = 0; c < image.channels; ++c)
                        flat(f++) = static_cast<T>(image.at(py * p + y, px * p + x, c));
            tokens.push_back(emb.weight * flat);
        }
    }
    if (tokens.size() == cls) tokens.push_back(emb.cls_token);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] += emb.pos[i];
    return TokenSequence<T>::from_tokens(std::move(tokens), cls);
}

template <typename T = double>
TokenSequence<T> embed_patches(const Image& image, std::size_t patch_size, Eigen::Index d_model,
                               std::uint64_t seed, const EmbedConfig& cfg = {}) {
    require(patch_size > 0 && image.height % patch_size == 0 && image.width % patch_size == 0,
            "embed_patches: image dimensions must be divisible by the patch size");
    const std::size_t num_patches = (image.height / patch_size) * (image.width / patch_size);
    return embed_patches(image, make_patch_embedding<T>(patch_size, image.channels, num_patches,
                                                        d_model, seed, cfg));
}

// ---------------------------------------------------------------------------
// Bidirectional layer

struct LayerConfig {
    Eigen::Index d_model = 64;
    Eigen::Index d_state = 8;
    ProjectionInit projection;
    ZohOptions zoh;
    double gate_scale = 1.0;
    double out_scale = 1.0;
    std::size_t conv_width = 0;  // 0 disables the depthwise causal convolution
    double norm_eps = 1e-5;
};

template <typename T = double>
struct VimLayerParams {
    SelectiveProjections<T> proj_fwd;
    SelectiveProjections<T> proj_bwd;
    Mat<T> w_gate;  // d_model x d_model
    Vec<T> b_gate;
    Mat<T> w_out;   // d_model x d_model
    Vec<T> norm_scale;
    Vec<T> norm_offset;
    Mat<T> conv_fwd;  // d_model x conv_width, empty when disabled
    Mat<T> conv_bwd;

    const SelectiveProjections<T>& projections(Direction dir) const {
        return dir == Direction::forward ? proj_fwd : proj_bwd;
    }
};

template <typename T = double>
VimLayerParams<T> make_layer_params(const LayerConfig& cfg, std::uint64_t seed) {
    const Eigen::Index dm = cfg.d_model;
    const double s = 1.0 / std::sqrt(static_cast<double>(dm));
    VimLayerParams<T> p;
    p.proj_fwd = make_projections<T>(dm, cfg.d_state, derive_seed(seed, 1), cfg.projection);
    p.proj_bwd = make_projections<T>(dm, cfg.d_state, derive_seed(seed, 2), cfg.projection);
    Rng rng(derive_seed(seed, 3));
    p.w_gate = rng.normal_matrix<T>(dm, dm, cfg.gate_scale * s);
    p.b_gate = Vec<T>::Zero(dm);
    p.w_out = rng.normal_matrix<T>(dm, dm, cfg.out_scale * s);
    p.norm_scale = Vec<T>::Ones(dm);
    p.norm_offset = Vec<T>::Zero(dm);
    if (cfg.conv_width > 0) {
        const auto w = static_cast<Eigen::Index>(cfg.conv_width);
        Rng crng(derive_seed(seed, 5));
        p.conv_fwd = crng.normal_matrix<T>(dm, w, 1.0 / std::sqrt(static_cast<double>(w)));
        p.conv_bwd = crng.normal_matrix<T>(dm, w, 1.0 / std::sqrt(static_cast<double>(w)));
    }
    return p;
}

template <typename T>
Vec<T> layer_norm(const Vec<T>& z, const Vec<T>& scale, const Vec<T>& offset, double eps) {
    const T mean = z.mean();
    const Vec<T> centered = z.array() - mean;
    const T var = centered.squaredNorm() / static_cast<T>(z.size());
    return (centered.array() / std::sqrt(var + static_cast<T>(eps)) * scale.array() + offset.array())
        .matrix();
}

template <typename T>
T sigmoid(T z) {
    return T(1) / (T(1) + std::exp(-z));
}

/// Depthwise convolution over positions; the window looks backwards for the forward
/// direction and forwards for the backward direction.
template <typename T>
std::vector<Vec<T>> causal_conv(std::span<const Vec<T>> x, const Mat<T>& kernel, Direction dir) {
    std::vector<Vec<T>> out(x.size());
    const auto len = static_cast<std::ptrdiff_t>(x.size());
    for (std::ptrdiff_t t = 0; t < len; ++t) {
        Vec<T> acc = Vec<T>::Zero(x[t].size());
        for (Eigen::Index k = 0; k < kernel.cols(); ++k) {
            const std::ptrdiff_t src = dir == Direction::forward ? t - k : t + k;
            if (src < 0 || src >= len) continue;
            acc.array() += kernel.col(k).array() * x[static_cast<std::size_t>(src)].array();
        }
        out[static_cast<std::size_t>(t)] = std::move(acc);
    }
    return out;
}

template <typename T = double>
struct LayerOutput {
    TokenSequence<T> seq;
    LayerCache<T> cache;
    HiddenTrajectory<T> fwd;
    HiddenTrajectory<T> bwd;
};

/// Discretized parameters of `seq` under a layer's projections, without scanning.
template <typename T>
LayerCache<T> project_cache(const TokenSequence<T>& seq, const VimLayerParams<T>& params,
                            const LayerConfig& cfg) {
    LayerCache<T> cache;
    cache.layer = seq.layer_index;
    cache.origin = seq.origin;
    for (Direction dir : {Direction::forward, Direction::backward}) {
        std::span<const Vec<T>> input = seq.tokens;
        std::vector<Vec<T>> conv;
        if (cfg.conv_width > 0) {
            conv = causal_conv<T>(seq.tokens, dir == Direction::forward ? params.conv_fwd
                                                                        : params.conv_bwd, dir);
            input = conv;
        }
        auto steps = compute_steps(input, params.projections(dir), cfg.zoh);
        (dir == Direction::forward ? cache.fwd : cache.bwd) = std::move(steps);
    }
    return cache;
}

/// One bidirectional block: both directional scans are summed, gated by
/// sigmoid(W_g x), mapped by W_o, added to the input and layer-normalized.
template <typename T>
LayerOutput<T> forward_layer(const TokenSequence<T>& seq, const VimLayerParams<T>& params,
                             const LayerConfig& cfg) {
    seq.validate();
    require(seq.d_model() == params.proj_fwd.d_model, "forward_layer: token length != d_model");
    LayerOutput<T> out;
    std::array<std::vector<Vec<T>>, 2> ssm_in;
    for (Direction dir : {Direction::forward, Direction::backward}) {
        auto& in = ssm_in[dir == Direction::forward ? 0 : 1];
        if (cfg.conv_width > 0)
            in = causal_conv<T>(seq.tokens,
                                dir == Direction::forward ? params.conv_fwd : params.conv_bwd, dir);
    }
    out.cache.layer = seq.layer_index;
    out.cache.origin = seq.origin;
    auto input_for = [&](Direction dir) -> std::span<const Vec<T>> {
        const auto& in = ssm_in[dir == Direction::forward ? 0 : 1];
        return cfg.conv_width > 0 ? std::span<const Vec<T>>(in) : std::span<const Vec<T>>(seq.tokens);
    };
    out.cache.fwd = compute_steps(input_for(Direction::forward), params.proj_fwd, cfg.zoh);
    out.cache.bwd = compute_steps(input_for(Direction::backward), params.proj_bwd, cfg.zoh);
    out.fwd = scan_recurrent<T>(out.cache.fwd, input_for(Direction::forward), Direction::forward);
    out.bwd = scan_recurrent<T>(out.cache.bwd, input_for(Direction::backward), Direction::backward);

    out.seq.cls_index = seq.cls_index;
    out.seq.layer_index = seq.layer_index + 1;
    out.seq.origin = seq.origin;
    out.seq.tokens.reserve(seq.size());
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const Vec<T>& x = seq.tokens[t];
        const Vec<T> gate = (params.w_gate * x + params.b_gate).unaryExpr([](T z) { return sigmoid(z); });
        const Vec<T> mixed = (out.fwd.outputs[t] + out.bwd.outputs[t]).cwiseProduct(gate);
        const Vec<T> z = x + params.w_out * mixed;
        out.seq.tokens.push_back(layer_norm(z, params.norm_scale, params.norm_offset, cfg.norm_eps));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
    std::size_t depth = 8;
    std::size_t image_size = 32;
    std::size_t patch_size = 4;
    std::size_t channels = 1;
    LayerConfig layer;
    EmbedConfig embed;

    std::size_t num_patches() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    std::size_t num_tokens() const { return num_patches() + 1; }
};

template <typename T = double>
struct VimModel {
    ModelConfig config;
    PatchEmbedding<T> embedding;
    std::vector<VimLayerParams<T>> layers;

    TokenSequence<T> embed(const Image& image) const { return embed_patches(image, embedding); }
};

template <typename T = double>
VimModel<T> make_model(const ModelConfig& cfg, std::uint64_t seed) {
    require(cfg.depth > 0, "make_model: depth must be positive");
    require(cfg.patch_size > 0 && cfg.image_size % cfg.patch_size == 0,
            "make_model: image size must be divisible by the patch size");
    VimModel<T> m;
    m.config = cfg;
    m.embedding = make_patch_embedding<T>(cfg.patch_size, cfg.channels, cfg.num_patches(),
                                          cfg.layer.d_model, derive_seed(seed, 0), cfg.embed);
    m.layers.reserve(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l)
        m.layers.push_back(make_layer_params<T>(cfg.layer, derive_seed(seed, 100 + l)));
    return m;
}

}  // namespace stmssm

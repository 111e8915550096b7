#pragma once

#include <cstdint>
#include <random>

#include "stmssm/tensor.hpp"

namespace stmssm {

/// splitmix64 finalizer; used to derive independent per-purpose seeds from one global seed.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Counter-based derivation: the same (seed, stream) pair always yields the same child seed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(seed ^ mix_seed(stream + 0x51ED27ULL));
}

namespace seed_stream {
inline constexpr std::uint64_t model = 1;
inline constexpr std::uint64_t data = 2;
inline constexpr std::uint64_t plan = 3;
inline constexpr std::uint64_t input = 4;
}  // namespace seed_stream

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    int uniform_int(int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(engine_);
    }

    template <typename T>
    Mat<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev) {
        Mat<T> m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<T>(normal(0.0, stddev));
        return m;
    }

    template <typename T>
    Vec<T> normal_vector(Eigen::Index n, double stddev) {
        Vec<T> v(n);
        for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<T>(normal(0.0, stddev));
        return v;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace stmssm

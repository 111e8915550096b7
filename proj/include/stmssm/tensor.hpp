#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace stmssm {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Row-major so that per-channel rows of a (d_model x d_state) block are contiguous.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Direction { forward, backward };

inline const char* to_string(Direction dir) {
    return dir == Direction::forward ? "fwd" : "bwd";
}

/// Thrown for shape mismatches, infeasible plans and other rejected inputs.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidInput(what);
}

/// H x W x C image, stored row-major with channels innermost.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c)
        : height(h), width(w), channels(c), pixels(h * w * c, 0.0) {}

    double& at(std::size_t y, std::size_t x, std::size_t ch = 0) {
        return pixels[(y * width + x) * channels + ch];
    }
    double at(std::size_t y, std::size_t x, std::size_t ch = 0) const {
        return pixels[(y * width + x) * channels + ch];
    }
    bool operator==(const Image&) const = default;
};

}  // namespace stmssm

#pragma once

// Plain-text numeric output: '.' decimal separator, 17 significant digits,
// files replaced atomically (temp file + rename).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stmssm/tensor.hpp"

namespace stmssm {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
        os << contents;
        if (!os.flush()) throw IoError("write to '" + tmp.string() + "' failed");
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw IoError("cannot move output into place at '" + path.string() + "'");
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Header row "c0,c1,..." followed by one line per matrix row.
template <typename Derived>
std::string matrix_to_csv(const Eigen::MatrixBase<Derived>& m, const std::string& prefix = "c") {
    std::ostringstream os;
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "," : "") << prefix << j;
    os << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            os << (j ? "," : "") << format_double(static_cast<double>(m(i, j)));
        os << '\n';
    }
    return os.str();
}

}  // namespace stmssm

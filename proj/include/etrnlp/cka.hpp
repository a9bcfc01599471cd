#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace etrnlp {

// Rows are gradient snapshots (one per sampling step), columns are flattened
// parameter coordinates of one layer for one task.
struct GradSampleMatrix {
    int task = -1;
    std::string layer;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    void add_row(const std::vector<double>& row) {
        if (rows == 0) {
            cols = row.size();
        } else if (row.size() != cols) {
            throw std::invalid_argument("grad sample matrix: inconsistent row width");
        }
        data.insert(data.end(), row.begin(), row.end());
        ++rows;
    }

    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Linear CKA between two sample matrices with a shared row count. Columns are
// mean-centered; the score is ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F),
// evaluated through the row-space Gram matrices (exact identity), and 0 by
// convention when either centered matrix vanishes.
inline double linear_cka(const GradSampleMatrix& x, const GradSampleMatrix& y) {
    if (x.rows != y.rows || x.rows < 2) {
        throw std::invalid_argument("linear_cka: row counts must match and be >= 2");
    }
    const std::size_t n = x.rows;
    auto gram_centered = [n](const GradSampleMatrix& m) {
        std::vector<double> centered(m.data);
        for (std::size_t c = 0; c < m.cols; ++c) {
            double mu = 0.0;
            for (std::size_t r = 0; r < m.rows; ++r) mu += centered[r * m.cols + c];
            mu /= static_cast<double>(m.rows);
            for (std::size_t r = 0; r < m.rows; ++r) centered[r * m.cols + c] -= mu;
        }
        std::vector<double> gram(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < m.cols; ++c) {
                    s += centered[i * m.cols + c] * centered[j * m.cols + c];
                }
                gram[i * n + j] = s;
                gram[j * n + i] = s;
            }
        }
        return gram;
    };
    const auto kx = gram_centered(x);
    const auto ky = gram_centered(y);
    double cross = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < kx.size(); ++i) {
        cross += kx[i] * ky[i];
        nx += kx[i] * kx[i];
        ny += ky[i] * ky[i];
    }
    if (nx == 0.0 || ny == 0.0) return 0.0;
    return cross / (std::sqrt(nx) * std::sqrt(ny));
}

// Symmetric T x T task-pair similarity matrix for one layer; unit diagonal.
struct CkaMatrix {
    std::string layer;
    std::size_t tasks = 0;
    std::vector<double> values;  // row-major T x T

    double at(std::size_t i, std::size_t j) const { return values[i * tasks + j]; }
};

inline CkaMatrix cka_matrix_from_samples(const std::string& layer,
                                         const std::vector<GradSampleMatrix>& per_task) {
    CkaMatrix m;
    m.layer = layer;
    m.tasks = per_task.size();
    m.values.assign(m.tasks * m.tasks, 1.0);
    for (std::size_t i = 0; i < m.tasks; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            const double v = linear_cka(per_task[i], per_task[j]);
            m.values[i * m.tasks + j] = v;
            m.values[j * m.tasks + i] = v;
        }
    }
    return m;
}

inline std::string cka_matrix_csv(const CkaMatrix& m) {
    std::ostringstream os;
    os << "task";
    for (std::size_t j = 0; j < m.tasks; ++j) os << ",t" << j;
    os << "\n";
    for (std::size_t i = 0; i < m.tasks; ++i) {
        os << "t" << i;
        for (std::size_t j = 0; j < m.tasks; ++j) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), ",%.6f", m.at(i, j));
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

// Terminal heatmap: one shaded cell per task pair plus the numeric value.
inline std::string cka_heatmap_text(const CkaMatrix& m) {
    static constexpr char kShades[] = " .:-=+*#%@";
    std::ostringstream os;
    os << "layer " << m.layer << " (" << m.tasks << " tasks)\n";
    for (std::size_t i = 0; i < m.tasks; ++i) {
        for (std::size_t j = 0; j < m.tasks; ++j) {
            const double v = std::min(1.0, std::max(0.0, m.at(i, j)));
            const int idx = static_cast<int>(v * 9.0 + 0.5);
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%c%5.2f ", kShades[idx], m.at(i, j));
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace etrnlp

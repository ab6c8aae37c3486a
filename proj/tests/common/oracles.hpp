#ifndef C2VAE_TEST_ORACLES_HPP
#define C2VAE_TEST_ORACLES_HPP

// Reference computations in plain double arithmetic, written independently of
// the library code paths they check.

#include "c2vae/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix zeros(std::size_t r, std::size_t c)
{
    return Matrix(r, std::vector<double>(c, 0.0));
}

/// Gaussian elimination with partial pivoting; solves M x = b.
inline std::vector<double> dense_solve(Matrix m, std::vector<double> b)
{
    const auto n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(m[r][col]) > std::abs(m[pivot][col])) {
                pivot = r;
            }
        }
        std::swap(m[col], m[pivot]);
        std::swap(b[col], b[pivot]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = m[r][col] / m[col][col];
            for (std::size_t c = col; c < n; ++c) {
                m[r][c] -= f * m[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) {
            s -= m[i][c] * x[c];
        }
        x[i] = s / m[i][i];
    }
    return x;
}

/// w = (I − Aᵀ)⁻¹ ε column by column; eps is n × d.
inline Matrix scm_dense(const Matrix& a, const Matrix& eps)
{
    const auto n = a.size();
    const auto d = eps.front().size();
    Matrix sys = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            sys[i][j] = (i == j ? 1.0 : 0.0) - a[j][i];
        }
    }
    Matrix w = zeros(n, d);
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<double> rhs(n);
        for (std::size_t i = 0; i < n; ++i) {
            rhs[i] = eps[i][k];
        }
        const auto x = dense_solve(sys, rhs);
        for (std::size_t i = 0; i < n; ++i) {
            w[i][k] = x[i];
        }
    }
    return w;
}

/// do-intervention by graph surgery: incoming weights of assigned nodes are
/// removed and their noise replaced by the assigned value, then a dense solve.
inline Matrix intervene_dense(Matrix a, Matrix eps, const std::map<std::size_t, std::vector<double>>& assign)
{
    for (const auto& [j, value] : assign) {
        for (auto& row : a) {
            row[j] = 0.0;
        }
        for (std::size_t k = 0; k < eps[j].size(); ++k) {
            eps[j][k] = value.size() == 1 ? value[0] : value[k];
        }
    }
    return scm_dense(a, eps);
}

/// Parents of each node read straight off the thresholded matrix; roots have none.
inline std::vector<bool> roots_by_parent_sets(const Matrix& a, double tau)
{
    const auto n = a.size();
    std::vector<bool> roots(n, true);
    for (std::size_t j = 0; j < n; ++j) {
        std::set<std::size_t> parents;
        for (std::size_t i = 0; i < n; ++i) {
            if (i != j && std::abs(a[i][j]) >= tau) {
                parents.insert(i);
            }
        }
        roots[j] = parents.empty();
    }
    return roots;
}

/// Random weighted DAG over a random node order, with extra sub-threshold entries.
inline Matrix random_dag(std::size_t n, c2vae::Rng& rng, double density, double tau = 0.1)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    Matrix a = zeros(n, n);
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t q = p + 1; q < n; ++q) {
            const auto from = order[p];
            const auto to = order[q];
            if (rng.uniform() < density) {
                const double mag = rng.uniform(0.2, 1.5);
                a[from][to] = rng.uniform() < 0.5 ? -mag : mag;
            } else if (rng.uniform() < 0.3) {
                a[from][to] = rng.uniform(-0.5, 0.5) * tau;  // below threshold
            }
        }
    }
    return a;
}

/// Truncated Taylor series of exp(M), no scaling.
inline Matrix expm_series(const Matrix& m, int terms = 30)
{
    const auto n = m.size();
    Matrix sum = zeros(n, n);
    Matrix term = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        sum[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for (int k = 1; k < terms; ++k) {
        Matrix next = zeros(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                for (std::size_t l = 0; l < n; ++l) {
                    next[i][j] += term[i][l] * m[l][j];
                }
                next[i][j] /= k;
            }
        }
        term = next;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                sum[i][j] += term[i][j];
            }
        }
    }
    return sum;
}

inline double dag_h(const Matrix& a, int terms = 30)
{
    auto sq = a;
    for (auto& row : sq) {
        for (auto& v : row) {
            v *= v;
        }
    }
    const auto e = expm_series(sq, terms);
    double tr = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        tr += e[i][i];
    }
    return tr - static_cast<double>(a.size());
}

/// SHD from edge sets: insertions, deletions, and reversals counted once.
inline int shd_by_edge_sets(const std::set<std::pair<int, int>>& learned, const std::set<std::pair<int, int>>& truth)
{
    int reversals = 0;
    std::set<std::pair<int, int>> reversed_truth;
    for (const auto& e : learned) {
        const std::pair<int, int> rev{e.second, e.first};
        if (!truth.count(e) && truth.count(rev) && !learned.count(rev)) {
            ++reversals;
            reversed_truth.insert(rev);
        }
    }
    int insertions = 0;
    for (const auto& e : learned) {
        if (!truth.count(e) && !reversed_truth.count({e.second, e.first})) {
            ++insertions;
        }
    }
    int deletions = 0;
    for (const auto& e : truth) {
        if (!learned.count(e) && !reversed_truth.count(e)) {
            ++deletions;
        }
    }
    return insertions + deletions + reversals;
}

} // namespace oracle

#endif

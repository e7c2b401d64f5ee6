#include "nafi/lap.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace nafi {
namespace {

struct HungarianResult {
    std::vector<int> row_of_col;
    Eigen::VectorXd col_potential;
    Eigen::VectorXd row_potential;
};

// Shortest augmenting path Hungarian method, O(cols^2 * rows). Columns are
// inserted one at a time; rows play the role of jobs. Potentials satisfy
// col_potential[j] + row_potential[r] <= cost(r, j), tight on matched edges,
// and row_potential is zero on unmatched rows.
HungarianResult hungarian(const Eigen::Ref<const Eigen::MatrixXd>& cost) {
    const int n = static_cast<int>(cost.cols());
    const int m = static_cast<int>(cost.rows());
    constexpr double inf = std::numeric_limits<double>::infinity();

    // 1-based with a virtual row 0, as in the textbook formulation.
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    std::vector<char> used(m + 1);

    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    HungarianResult out;
    out.row_of_col.assign(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] != 0) out.row_of_col[p[j] - 1] = j - 1;
    out.col_potential.resize(n);
    for (int i = 0; i < n; ++i) out.col_potential[i] = u[i + 1];
    out.row_potential.resize(m);
    for (int j = 0; j < m; ++j) out.row_potential[j] = v[j + 1];
    return out;
}

void validate(const Eigen::Ref<const Eigen::MatrixXd>& cost) {
    if (cost.rows() < cost.cols())
        throw std::invalid_argument("solve_lap: need rows >= cols");
    if (!cost.allFinite()) throw std::invalid_argument("solve_lap: non-finite cost entry");
}

double total_of(const Eigen::Ref<const Eigen::MatrixXd>& cost, const std::vector<int>& rows) {
    double total = 0.0;
    for (std::size_t j = 0; j < rows.size(); ++j) total += cost(rows[j], static_cast<Eigen::Index>(j));
    return total;
}

// Optimal completion for columns [first_col, cols) using only rows not in
// `taken`. Returns false if infeasible.
bool solve_suffix(const Eigen::Ref<const Eigen::MatrixXd>& cost, int first_col,
                  const std::vector<char>& taken, std::vector<int>& rows_out, double& total) {
    const int n = static_cast<int>(cost.cols()) - first_col;
    std::vector<int> free_rows;
    for (int r = 0; r < cost.rows(); ++r)
        if (!taken[r]) free_rows.push_back(r);
    if (static_cast<int>(free_rows.size()) < n) return false;
    rows_out.assign(n, -1);
    total = 0.0;
    if (n == 0) return true;
    Eigen::MatrixXd sub(free_rows.size(), n);
    for (std::size_t a = 0; a < free_rows.size(); ++a)
        sub.row(static_cast<Eigen::Index>(a)) = cost.row(free_rows[a]).tail(n);
    const auto h = hungarian(sub);
    for (int j = 0; j < n; ++j) {
        rows_out[j] = free_rows[h.row_of_col[j]];
        total += sub(h.row_of_col[j], j);
    }
    return true;
}

} // namespace

LapSolution solve_lap_any(const Eigen::Ref<const Eigen::MatrixXd>& cost) {
    validate(cost);
    LapSolution out;
    if (cost.cols() == 0) return out;
    out.row_of_col = hungarian(cost).row_of_col;
    out.total_cost = total_of(cost, out.row_of_col);
    return out;
}

LapSolution solve_lap(const Eigen::Ref<const Eigen::MatrixXd>& cost, double tie_tolerance) {
    validate(cost);
    LapSolution out;
    const int n = static_cast<int>(cost.cols());
    const int m = static_cast<int>(cost.rows());
    if (n == 0) return out;

    const auto base = hungarian(cost);
    std::vector<int> best = base.row_of_col;
    const double optimum = total_of(cost, best);
    const double tol = tie_tolerance * (1.0 + cost.cwiseAbs().maxCoeff()) * std::max(1, n);

    // Greedy lexicographic refinement. Only edges that are tight under the
    // optimal potentials can appear in an optimal solution, so candidates are
    // filtered by reduced cost before paying for a re-solve.
    std::vector<char> taken(m, 0);
    double prefix_cost = 0.0;
    for (int j = 0; j < n; ++j) {
        for (int r = 0; r < best[j]; ++r) {
            if (taken[r]) continue;
            const double reduced = cost(r, j) - base.col_potential[j] - base.row_potential[r];
            if (reduced > tol) continue;
            taken[r] = 1;
            std::vector<int> rest;
            double rest_cost = 0.0;
            const bool ok = solve_suffix(cost, j + 1, taken, rest, rest_cost);
            taken[r] = 0;
            if (ok && prefix_cost + cost(r, j) + rest_cost <= optimum + tol) {
                best[j] = r;
                for (int k = j + 1; k < n; ++k) best[k] = rest[k - j - 1];
                break;
            }
        }
        taken[best[j]] = 1;
        prefix_cost += cost(best[j], j);
    }

    out.row_of_col = std::move(best);
    out.total_cost = total_of(cost, out.row_of_col);
    return out;
}

} // namespace nafi

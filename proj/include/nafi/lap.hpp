#pragma once

#include <Eigen/Dense>

#include <vector>

namespace nafi {

struct LapSolution {
    /// row_of_col[j] is the row assigned to column j.
    std::vector<int> row_of_col;
    double total_cost = 0.0;
};

/// Rectangular linear sum assignment (rows >= cols): every column gets a
/// distinct row and the summed cost is minimal. Among optimal solutions the
/// lexicographically smallest row_of_col is returned; entries whose totals
/// differ by at most tie_tolerance * (1 + max|cost|) count as ties.
LapSolution solve_lap(const Eigen::Ref<const Eigen::MatrixXd>& cost,
                      double tie_tolerance = 1e-10);

/// Hungarian pass without tie refinement. Exposed for tests and callers that
/// do not need deterministic tie-breaking.
LapSolution solve_lap_any(const Eigen::Ref<const Eigen::MatrixXd>& cost);

} // namespace nafi

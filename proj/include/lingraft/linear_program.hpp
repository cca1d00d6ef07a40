#pragma once

#include "lingraft/network.hpp"

namespace lingraft {

struct LpResult {
  enum class Status { Optimal, Infeasible, Unbounded };
  Status status = Status::Infeasible;
  Vector x;
  double value = 0.0;
};

// minimise c.x  subject to  A x <= b,  x >= 0.
// Dense two-phase tableau simplex with Bland's rule; meant for the small
// problems that appear at fully-linear branch-and-bound leaves.
LpResult solve_lp(const Vector& c, const Matrix& a, const Vector& b);

}  // namespace lingraft

#include "lingraft/linear_program.hpp"

#include <cmath>
#include <limits>
#include <vector>

#include "lingraft/errors.hpp"

namespace lingraft {

namespace {

constexpr double kPivotTol = 1e-11;
constexpr double kCostTol = 1e-10;

class Tableau {
 public:
  Tableau(const Matrix& a, const Vector& b) : m_(a.rows()), n_(a.cols()) {
    artificial_rows_ = 0;
    for (Eigen::Index i = 0; i < m_; ++i) artificial_rows_ += b[i] < 0.0 ? 1 : 0;
    cols_ = n_ + m_ + artificial_rows_;
    t_ = Matrix::Zero(m_, cols_ + 1);
    basis_.resize(static_cast<std::size_t>(m_));
    Eigen::Index next_art = n_ + m_;
    for (Eigen::Index i = 0; i < m_; ++i) {
      const double sign = b[i] < 0.0 ? -1.0 : 1.0;
      t_.row(i).head(n_) = sign * a.row(i);
      t_(i, n_ + i) = sign;
      t_(i, cols_) = sign * b[i];
      if (b[i] < 0.0) {
        t_(i, next_art) = 1.0;
        basis_[i] = next_art++;
      } else {
        basis_[i] = n_ + i;
      }
    }
  }

  // Minimises cost . vars over the current basis; columns >= `allowed` never enter.
  bool optimise(const Vector& cost, Eigen::Index allowed) {
    Vector reduced = cost;
    for (Eigen::Index i = 0; i < m_; ++i) {
      const double cb = cost[basis_[i]];
      if (cb != 0.0) reduced -= cb * t_.row(i).head(cols_).transpose();
    }
    for (;;) {
      Eigen::Index enter = -1;
      for (Eigen::Index j = 0; j < allowed; ++j) {
        if (reduced[j] < -kCostTol) {
          enter = j;
          break;
        }
      }
      if (enter < 0) return true;
      Eigen::Index leave = -1;
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < m_; ++i) {
        const double p = t_(i, enter);
        if (p <= kPivotTol) continue;
        const double ratio = t_(i, cols_) / p;
        if (ratio < best - 1e-14 || (std::abs(ratio - best) <= 1e-14 && leave >= 0 && basis_[i] < basis_[leave])) {
          best = ratio;
          leave = i;
        }
      }
      if (leave < 0) return false;
      pivot(leave, enter);
      const double rc = reduced[enter];
      reduced -= rc * t_.row(leave).head(cols_).transpose();
    }
  }

  void pivot(Eigen::Index row, Eigen::Index col) {
    t_.row(row) /= t_(row, col);
    for (Eigen::Index i = 0; i < m_; ++i) {
      if (i == row) continue;
      const double f = t_(i, col);
      if (f != 0.0) t_.row(i) -= f * t_.row(row);
    }
    basis_[row] = col;
  }

  double objective(const Vector& cost) const {
    double v = 0.0;
    for (Eigen::Index i = 0; i < m_; ++i) v += cost[basis_[i]] * t_(i, cols_);
    return v;
  }

  // Pivots zero-level artificials out of the basis where possible.
  void expel_artificials() {
    const Eigen::Index first_art = n_ + m_;
    for (Eigen::Index i = 0; i < m_; ++i) {
      if (basis_[i] < first_art) continue;
      for (Eigen::Index j = 0; j < first_art; ++j) {
        if (std::abs(t_(i, j)) > 1e-9) {
          pivot(i, j);
          break;
        }
      }
    }
  }

  Vector solution() const {
    Vector x = Vector::Zero(n_);
    for (Eigen::Index i = 0; i < m_; ++i)
      if (basis_[i] < n_) x[basis_[i]] = t_(i, cols_);
    return x;
  }

  Eigen::Index cols() const { return cols_; }
  Eigen::Index structural_and_slack() const { return n_ + m_; }
  Eigen::Index artificial_count() const { return artificial_rows_; }

 private:
  Eigen::Index m_;
  Eigen::Index n_;
  Eigen::Index cols_ = 0;
  Eigen::Index artificial_rows_ = 0;
  Matrix t_;
  std::vector<Eigen::Index> basis_;
};

}  // namespace

LpResult solve_lp(const Vector& c, const Matrix& a, const Vector& b) {
  if (a.cols() != c.size() || a.rows() != b.size()) throw StructuralError("LP dimensions do not agree");
  Tableau tab(a, b);
  LpResult out;

  if (tab.artificial_count() > 0) {
    Vector phase1 = Vector::Zero(tab.cols());
    phase1.tail(tab.artificial_count()).setOnes();
    tab.optimise(phase1, tab.cols());
    const double scale = 1.0 + b.cwiseAbs().maxCoeff();
    if (tab.objective(phase1) > 1e-9 * scale) {
      out.status = LpResult::Status::Infeasible;
      return out;
    }
    tab.expel_artificials();
  }

  Vector cost = Vector::Zero(tab.cols());
  cost.head(c.size()) = c;
  if (!tab.optimise(cost, tab.structural_and_slack())) {
    out.status = LpResult::Status::Unbounded;
    return out;
  }
  out.status = LpResult::Status::Optimal;
  out.x = tab.solution();
  out.value = c.dot(out.x);
  return out;
}

}  // namespace lingraft

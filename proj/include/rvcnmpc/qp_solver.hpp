#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace rvcnmpc {

/// Convex QP
///
///   minimize   1/2 x' H x + g' x + sum_i 1/2 w_i s_i^2
///   subject to lower <= x <= upper
///              C_i x + s_i >= d_i,  s_i >= 0   (soft rows, w_i > 0)
///              C_i x       >= d_i              (hard rows, w_i = 0)
///
/// Slack variables of soft rows are part of the problem but need not be
/// stacked by the caller.
struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd g;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  Eigen::MatrixXd C;
  Eigen::VectorXd d;
  Eigen::VectorXd soft;

  QpProblem() = default;
  QpProblem(int n, int m) { resize(n, m); }

  void resize(int n, int m) {
    H = Eigen::MatrixXd::Zero(n, n);
    g = Eigen::VectorXd::Zero(n);
    lower = Eigen::VectorXd::Constant(n, -std::numeric_limits<double>::infinity());
    upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    C = Eigen::MatrixXd::Zero(m, n);
    d = Eigen::VectorXd::Zero(m);
    soft = Eigen::VectorXd::Zero(m);
  }

  int num_variables() const { return static_cast<int>(g.size()); }
  int num_rows() const { return static_cast<int>(d.size()); }
  int num_slacks() const { return static_cast<int>((soft.array() > 0.0).count()); }

  /// Scalar inequalities: finite bounds, rows and slack sign constraints.
  int inequality_count() const {
    int count = static_cast<int>(lower.array().isFinite().count() + upper.array().isFinite().count());
    return count + num_rows() + num_slacks();
  }

  void validate() const {
    const auto n = g.size();
    if (H.rows() != n || H.cols() != n || lower.size() != n || upper.size() != n || C.cols() != n ||
        C.rows() != d.size() || soft.size() != d.size())
      throw std::invalid_argument("qp: inconsistent dimensions");
    if ((lower.array() > upper.array()).any()) throw std::invalid_argument("qp: lower > upper");
    if ((soft.array() < 0.0).any()) throw std::invalid_argument("qp: negative soft weight");
  }
};

struct QpSettings {
  int max_iterations = 2000;
  double feasibility_tol = 1e-9;
  double min_eigenvalue = 1e-8;
};

struct QpSolution {
  Eigen::VectorXd x;
  Eigen::VectorXd slack;       // per row, zero for hard rows
  Eigen::VectorXd row_dual;    // per row
  Eigen::VectorXd lower_dual;  // per variable
  Eigen::VectorXd upper_dual;  // per variable
  double objective = 0.0;
  double kkt_residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  bool infeasible = false;
  std::vector<int> active_set;  // constraint ids, see DualActiveSetSolver
};

struct KktResiduals {
  double stationarity = 0.0;
  double primal = 0.0;
  double dual = 0.0;
  double complementarity = 0.0;
  double max() const { return std::max({stationarity, primal, dual, complementarity}); }
};

/// KKT residuals of a candidate primal/dual pair (slack sign multipliers are
/// recovered from the slack stationarity condition).
inline KktResiduals kkt_residuals(const QpProblem& qp, const QpSolution& sol) {
  KktResiduals r;
  const Eigen::VectorXd grad = qp.H * sol.x + qp.g - qp.C.transpose() * sol.row_dual - sol.lower_dual + sol.upper_dual;
  r.stationarity = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
  for (int i = 0; i < qp.num_rows(); ++i) {
    const double lam = sol.row_dual(i);
    const double s = qp.soft(i) > 0.0 ? sol.slack(i) : 0.0;
    const double res = qp.C.row(i).dot(sol.x) + s - qp.d(i);
    r.primal = std::max(r.primal, -res);
    r.dual = std::max(r.dual, -lam);
    r.complementarity = std::max(r.complementarity, std::abs(lam * res));
    if (qp.soft(i) > 0.0) {
      const double mu = qp.soft(i) * s - lam;  // multiplier of s >= 0
      r.primal = std::max(r.primal, -s);
      r.dual = std::max(r.dual, -mu);
      r.complementarity = std::max(r.complementarity, std::abs(mu * s));
    }
  }
  for (int j = 0; j < qp.num_variables(); ++j) {
    r.dual = std::max({r.dual, -sol.lower_dual(j), -sol.upper_dual(j)});
    if (std::isfinite(qp.lower(j))) {
      const double res = sol.x(j) - qp.lower(j);
      r.primal = std::max(r.primal, -res);
      r.complementarity = std::max(r.complementarity, std::abs(sol.lower_dual(j) * res));
    }
    if (std::isfinite(qp.upper(j))) {
      const double res = qp.upper(j) - sol.x(j);
      r.primal = std::max(r.primal, -res);
      r.complementarity = std::max(r.complementarity, std::abs(sol.upper_dual(j) * res));
    }
  }
  return r;
}

/// Goldfarb-Idnani dual active-set method.
///
/// Slack variables are appended to the working space lazily, the first time
/// their soft row enters the active set, so the dense factors only grow with
/// the number of soft rows that ever become binding.
///
/// Constraint ids: [0, m) rows; [m, m+n) lower bounds; [m+n, m+2n) upper
/// bounds; [m+2n, 2m+2n) slack sign constraints of soft rows.
class DualActiveSetSolver {
 public:
  explicit DualActiveSetSolver(QpSettings settings = {}) : settings_(settings) {}

  QpSolution solve(const QpProblem& qp, const std::vector<int>* warm_active = nullptr) {
    qp.validate();
    qp_ = &qp;
    n_ = qp.num_variables();
    m_ = qp.num_rows();
    setup();
    QpSolution sol;
    sol.converged = run(warm_active, sol.iterations, sol.infeasible);
    extract(sol);
    return sol;
  }

 private:
  enum class Kind { kRow, kLower, kUpper, kSlackSign };

  Kind kind(int id) const {
    if (id < m_) return Kind::kRow;
    if (id < m_ + n_) return Kind::kLower;
    if (id < m_ + 2 * n_) return Kind::kUpper;
    return Kind::kSlackSign;
  }

  void setup() {
    const int cap = n_ + static_cast<int>((qp_->soft.array() > 0.0).count());
    J_.setZero(cap, cap);
    R_.setZero(cap, cap);
    y_.setZero(cap);
    dim_ = n_;
    slack_index_.assign(static_cast<std::size_t>(m_), -1);
    slack_row_.clear();
    active_.clear();
    u_.clear();
    active_flag_.assign(static_cast<std::size_t>(2 * m_ + 2 * n_), 0);
    row_values_.resize(m_);

    Eigen::MatrixXd H = qp_->H;
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    double reg = settings_.min_eigenvalue;
    while (llt.info() != Eigen::Success) {
      H = qp_->H;
      H.diagonal().array() += reg;
      llt.compute(H);
      reg *= 10.0;
      if (reg > 1e6) throw std::invalid_argument("qp: Hessian is not positive definite");
    }
    // J = L^{-T}; J J' = H^{-1}.
    const Eigen::MatrixXd Linv = llt.matrixL().solve(Eigen::MatrixXd::Identity(n_, n_));
    J_.topLeftCorner(n_, n_) = Linv.transpose();
    y_.head(n_) = -llt.solve(qp_->g);
    r_norm_ = 1.0;
  }

  // Constraint value c(y) - rhs, and its normal in the working space.
  double value(int id) const {
    switch (kind(id)) {
      case Kind::kRow: {
        double v = qp_->C.row(id).dot(y_.head(n_)) - qp_->d(id);
        const int s = slack_index_[static_cast<std::size_t>(id)];
        if (s >= 0) v += y_(s);
        return v;
      }
      case Kind::kLower: return y_(id - m_) - qp_->lower(id - m_);
      case Kind::kUpper: return qp_->upper(id - m_ - n_) - y_(id - m_ - n_);
      case Kind::kSlackSign: {
        const int s = slack_index_[static_cast<std::size_t>(id - m_ - 2 * n_)];
        return s >= 0 ? y_(s) : 0.0;
      }
    }
    return 0.0;
  }

  void normal(int id, Eigen::VectorXd& np) const {
    np.setZero(dim_);
    switch (kind(id)) {
      case Kind::kRow: {
        np.head(n_) = qp_->C.row(id).transpose();
        const int s = slack_index_[static_cast<std::size_t>(id)];
        if (s >= 0) np(s) = 1.0;
        break;
      }
      case Kind::kLower: np(id - m_) = 1.0; break;
      case Kind::kUpper: np(id - m_ - n_) = -1.0; break;
      case Kind::kSlackSign: {
        const int s = slack_index_[static_cast<std::size_t>(id - m_ - 2 * n_)];
        if (s >= 0) np(s) = 1.0;
        break;
      }
    }
  }

  double scale(int id) const {
    if (kind(id) == Kind::kRow) return std::max(1.0, std::abs(qp_->d(id)));
    return 1.0;
  }

  int most_violated(const std::vector<int>* warm) {
    const double tol = settings_.feasibility_tol;
    if (warm) {
      for (const int id : *warm) {
        if (id < 0 || id >= 2 * m_ + 2 * n_ || active_flag_[static_cast<std::size_t>(id)]) continue;
        if (kind(id) == Kind::kLower && !std::isfinite(qp_->lower(id - m_))) continue;
        if (kind(id) == Kind::kUpper && !std::isfinite(qp_->upper(id - m_ - n_))) continue;
        if (value(id) < -tol * scale(id)) return id;
      }
    }
    int best = -1;
    double worst = 0.0;
    row_values_.noalias() = qp_->C * y_.head(n_);
    for (int i = 0; i < m_; ++i) {
      if (active_flag_[static_cast<std::size_t>(i)]) continue;
      double v = row_values_(i) - qp_->d(i);
      const int s = slack_index_[static_cast<std::size_t>(i)];
      if (s >= 0) v += y_(s);
      v /= scale(i);
      if (v < -tol && v < worst) {
        worst = v;
        best = i;
      }
    }
    for (int j = 0; j < n_; ++j) {
      const double lo = y_(j) - qp_->lower(j);
      if (lo < -tol && lo < worst && !active_flag_[static_cast<std::size_t>(m_ + j)]) {
        worst = lo;
        best = m_ + j;
      }
      const double hi = qp_->upper(j) - y_(j);
      if (hi < -tol && hi < worst && !active_flag_[static_cast<std::size_t>(m_ + n_ + j)]) {
        worst = hi;
        best = m_ + n_ + j;
      }
    }
    for (std::size_t k = 0; k < slack_row_.size(); ++k) {
      const int id = m_ + 2 * n_ + slack_row_[k];
      const double v = y_(n_ + static_cast<int>(k));
      if (v < -tol && v < worst && !active_flag_[static_cast<std::size_t>(id)]) {
        worst = v;
        best = id;
      }
    }
    return best;
  }

  void activate_slack(int row) {
    if (kind(row) != Kind::kRow || qp_->soft(row) <= 0.0) return;
    if (slack_index_[static_cast<std::size_t>(row)] >= 0) return;
    const int idx = dim_++;
    slack_index_[static_cast<std::size_t>(row)] = idx;
    slack_row_.push_back(row);
    J_.row(idx).head(dim_).setZero();
    J_.col(idx).head(dim_).setZero();
    J_(idx, idx) = 1.0 / std::sqrt(qp_->soft(row));
    y_(idx) = 0.0;
  }

  // Givens rotation zeroing b against a; returns (c, s, h).
  static void givens(double a, double b, double& c, double& s, double& h) {
    h = std::hypot(a, b);
    c = a / h;
    s = b / h;
  }

  bool add_constraint(Eigen::VectorXd& dvec) {
    const int q = static_cast<int>(active_.size());
    for (int j = dim_ - 1; j >= q + 1; --j) {
      double c, s, h;
      if (dvec(j) == 0.0) continue;
      givens(dvec(j - 1), dvec(j), c, s, h);
      dvec(j - 1) = h;
      dvec(j) = 0.0;
      for (int k = 0; k < dim_; ++k) {
        const double t1 = J_(k, j - 1), t2 = J_(k, j);
        J_(k, j - 1) = c * t1 + s * t2;
        J_(k, j) = -s * t1 + c * t2;
      }
    }
    for (int i = 0; i <= q; ++i) R_(i, q) = dvec(i);
    if (std::abs(dvec(q)) <= std::numeric_limits<double>::epsilon() * r_norm_) return false;
    r_norm_ = std::max(r_norm_, std::abs(dvec(q)));
    return true;
  }

  void drop_constraint(int pos) {
    const int q = static_cast<int>(active_.size());
    active_flag_[static_cast<std::size_t>(active_[static_cast<std::size_t>(pos)])] = 0;
    active_.erase(active_.begin() + pos);
    u_.erase(u_.begin() + pos);
    for (int j = pos; j < q - 1; ++j) R_.col(j).head(q) = R_.col(j + 1).head(q);
    R_.col(q - 1).head(q).setZero();
    // Restore triangularity of R with Givens rotations on rows j, j+1,
    // mirrored on the columns of J.
    for (int j = pos; j < q - 1; ++j) {
      const double a = R_(j, j), b = R_(j + 1, j);
      if (b == 0.0) continue;
      double c, s, h;
      givens(a, b, c, s, h);
      R_(j, j) = h;
      R_(j + 1, j) = 0.0;
      for (int k = j + 1; k < q - 1; ++k) {
        const double t1 = R_(j, k), t2 = R_(j + 1, k);
        R_(j, k) = c * t1 + s * t2;
        R_(j + 1, k) = -s * t1 + c * t2;
      }
      for (int k = 0; k < dim_; ++k) {
        const double t1 = J_(k, j), t2 = J_(k, j + 1);
        J_(k, j) = c * t1 + s * t2;
        J_(k, j + 1) = -s * t1 + c * t2;
      }
    }
  }

  bool run(const std::vector<int>* warm, int& iterations, bool& infeasible) {
    Eigen::VectorXd np, dvec, z, r;
    iterations = 0;
    infeasible = false;
    while (true) {
      const int p = most_violated(warm);
      if (p < 0) return true;
      if (kind(p) == Kind::kRow) activate_slack(p);
      double u_plus = 0.0;
      double s_p = value(p);
      normal(p, np);

      while (true) {
        if (++iterations > settings_.max_iterations) return false;
        const int q = static_cast<int>(active_.size());
        dvec = J_.topLeftCorner(dim_, dim_).transpose() * np;
        z = J_.block(0, q, dim_, dim_ - q) * dvec.segment(q, dim_ - q);
        r.resize(q);
        for (int i = q - 1; i >= 0; --i) {
          double sum = dvec(i);
          for (int j = i + 1; j < q; ++j) sum -= R_(i, j) * r(j);
          r(i) = sum / R_(i, i);
        }

        // Dual step bound from active multipliers.
        double t1 = std::numeric_limits<double>::infinity();
        int drop = -1;
        for (int i = 0; i < q; ++i) {
          if (r(i) > 0.0) {
            const double ratio = u_[static_cast<std::size_t>(i)] / r(i);
            if (ratio < t1) {
              t1 = ratio;
              drop = i;
            }
          }
        }
        double t2 = std::numeric_limits<double>::infinity();
        const double zn = z.dot(np);
        if (z.norm() > 1e-14 && zn > 0.0) t2 = -s_p / zn;

        const double t = std::min(t1, t2);
        if (!std::isfinite(t)) {
          infeasible = true;
          return false;
        }
        if (!std::isfinite(t2)) {
          for (int i = 0; i < q; ++i) u_[static_cast<std::size_t>(i)] -= t * r(i);
          u_plus += t;
          drop_constraint(drop);
          continue;
        }
        y_.head(dim_) += t * z;
        for (int i = 0; i < q; ++i) u_[static_cast<std::size_t>(i)] -= t * r(i);
        u_plus += t;
        if (t == t2) {
          if (!add_constraint(dvec)) {
            infeasible = true;
            return false;
          }
          active_.push_back(p);
          active_flag_[static_cast<std::size_t>(p)] = 1;
          u_.push_back(u_plus);
          break;
        }
        drop_constraint(drop);
        s_p = value(p);
        normal(p, np);
      }
    }
  }

  void extract(QpSolution& sol) const {
    sol.x = y_.head(n_);
    sol.slack = Eigen::VectorXd::Zero(m_);
    for (std::size_t k = 0; k < slack_row_.size(); ++k)
      sol.slack(slack_row_[k]) = std::max(0.0, y_(n_ + static_cast<int>(k)));
    sol.row_dual = Eigen::VectorXd::Zero(m_);
    sol.lower_dual = Eigen::VectorXd::Zero(n_);
    sol.upper_dual = Eigen::VectorXd::Zero(n_);
    for (std::size_t i = 0; i < active_.size(); ++i) {
      const int id = active_[i];
      const double lam = u_[i];
      switch (kind(id)) {
        case Kind::kRow: sol.row_dual(id) = lam; break;
        case Kind::kLower: sol.lower_dual(id - m_) = lam; break;
        case Kind::kUpper: sol.upper_dual(id - m_ - n_) = lam; break;
        case Kind::kSlackSign: break;
      }
    }
    sol.active_set = active_;
    sol.objective = 0.5 * sol.x.dot(qp_->H * sol.x) + qp_->g.dot(sol.x) +
                    0.5 * (qp_->soft.array() * sol.slack.array().square()).sum();
    sol.kkt_residual = kkt_residuals(*qp_, sol).max();
  }

  QpSettings settings_;
  const QpProblem* qp_ = nullptr;
  int n_ = 0;
  int m_ = 0;
  int dim_ = 0;
  Eigen::MatrixXd J_;
  Eigen::MatrixXd R_;
  Eigen::VectorXd y_;
  double r_norm_ = 1.0;
  std::vector<int> active_;
  std::vector<double> u_;
  std::vector<int> slack_index_;
  std::vector<int> slack_row_;
  std::vector<char> active_flag_;
  Eigen::VectorXd row_values_;
};

inline QpSolution solve_qp(const QpProblem& qp, const std::vector<int>* warm_active = nullptr,
                           QpSettings settings = {}) {
  DualActiveSetSolver solver(settings);
  return solver.solve(qp, warm_active);
}

}  // namespace rvcnmpc

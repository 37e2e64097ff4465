#pragma once

// Convex subproblem solver: linear and convex-quadratic (diagonal Hessian)
// objectives over linear constraints, with exact primal and dual solutions.
//
// The reference backend is a dense Mehrotra predictor-corrector interior
// point method solved through the normal equations.  All duals follow one
// convention: a binding upper bound yields a nonnegative multiplier equal to
// the objective's marginal decrease per unit of relaxation of that bound;
// binding lower bounds are symmetric.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "m2m/common.hpp"

namespace m2m::qp {

struct Variable {
    std::string name;
    double lb = -kInfinity;
    double ub = kInfinity;
    double cost = 0.0;  // linear objective coefficient
    double quad = 0.0;  // objective contributes 0.5 * quad * x^2, quad >= 0
};

struct LinearTerm {
    int var = -1;
    double coef = 0.0;
};

struct Row {
    std::string name;
    double lb = -kInfinity;
    double ub = kInfinity;
    std::vector<LinearTerm> terms;

    bool is_equality() const { return lb == ub; }
};

class ConvexProgram {
public:
    int add_variable(std::string name, double lb, double ub, double cost, double quad = 0.0) {
        vars_.push_back(Variable{std::move(name), lb, ub, cost, quad});
        return static_cast<int>(vars_.size()) - 1;
    }

    int add_row(std::string name, double lb, double ub, std::vector<LinearTerm> terms) {
        rows_.push_back(Row{std::move(name), lb, ub, std::move(terms)});
        return static_cast<int>(rows_.size()) - 1;
    }

    int add_equality(std::string name, double rhs, std::vector<LinearTerm> terms) {
        return add_row(std::move(name), rhs, rhs, std::move(terms));
    }

    void add_objective_constant(double c) { objective_constant_ += c; }
    double objective_constant() const { return objective_constant_; }

    void set_cost(int var, double cost) { vars_.at(var).cost = cost; }
    void set_quad(int var, double quad) { vars_.at(var).quad = quad; }
    void set_bounds(int var, double lb, double ub) {
        vars_.at(var).lb = lb;
        vars_.at(var).ub = ub;
    }

    int num_variables() const { return static_cast<int>(vars_.size()); }
    int num_rows() const { return static_cast<int>(rows_.size()); }
    const Variable& variable(int j) const { return vars_.at(j); }
    const Row& row(int i) const { return rows_.at(i); }
    const std::vector<Variable>& variables() const { return vars_; }
    const std::vector<Row>& rows() const { return rows_; }

    /// Throws InvalidArgument when the program is malformed (crossed bounds,
    /// indefinite quadratic, out-of-range indices, non-finite coefficients).
    void validate() const {
        for (int j = 0; j < num_variables(); ++j) {
            const auto& v = vars_[j];
            if (std::isnan(v.lb) || std::isnan(v.ub) || !std::isfinite(v.cost))
                throw InvalidArgument("variable '" + v.name + "': non-finite bound or cost");
            if (v.lb > v.ub)
                throw InvalidArgument("variable '" + v.name + "': lower bound exceeds upper bound");
            if (v.quad < 0.0 || !std::isfinite(v.quad))
                throw InvalidArgument("variable '" + v.name + "': quadratic term must be >= 0");
        }
        for (int i = 0; i < num_rows(); ++i) {
            const auto& r = rows_[i];
            if (std::isnan(r.lb) || std::isnan(r.ub))
                throw InvalidArgument("row '" + r.name + "': NaN bound");
            if (r.lb > r.ub)
                throw InvalidArgument("row '" + r.name + "': lower bound exceeds upper bound");
            if (!std::isfinite(r.lb) && !std::isfinite(r.ub))
                throw InvalidArgument("row '" + r.name + "': both sides unbounded");
            for (const auto& t : r.terms) {
                if (t.var < 0 || t.var >= num_variables())
                    throw InvalidArgument("row '" + r.name + "': variable index out of range");
                if (!std::isfinite(t.coef))
                    throw InvalidArgument("row '" + r.name + "': non-finite coefficient");
            }
        }
    }

    /// Debug dump in the LP text interchange format (CPLEX-style).
    std::string to_lp_text() const;

private:
    std::vector<Variable> vars_;
    std::vector<Row> rows_;
    double objective_constant_ = 0.0;
};

enum class SolveStatus { optimal, infeasible, unbounded, numerical_failure };

inline const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::optimal: return "optimal";
        case SolveStatus::infeasible: return "infeasible";
        case SolveStatus::unbounded: return "unbounded";
        case SolveStatus::numerical_failure: return "numerical_failure";
    }
    return "?";
}

struct SolveResult {
    SolveStatus status = SolveStatus::numerical_failure;
    Eigen::VectorXd x;            // primal values per variable
    Eigen::VectorXd row_dual_lo;  // >= 0, binding lower side of a row
    Eigen::VectorXd row_dual_up;  // >= 0, binding upper side of a row
    Eigen::VectorXd var_dual_lo;  // >= 0, binding variable lower bound
    Eigen::VectorXd var_dual_up;  // >= 0, binding variable upper bound
    double objective = 0.0;
    double dual_objective = 0.0;
    int iterations = 0;
    double primal_residual = kInfinity;  // max per-row relative violation
    double dual_residual = kInfinity;
    double gap = kInfinity;  // relative complementarity gap
    std::string message;

    double row_dual_signed(int i) const { return row_dual_up(i) - row_dual_lo(i); }
    double row_activity(const ConvexProgram& p, int i) const {
        double a = 0.0;
        for (const auto& t : p.row(i).terms) a += t.coef * x(t.var);
        return a;
    }
};

struct SolverOptions {
    double tol_primal = 1e-9;
    double tol_dual = 1e-9;
    double tol_gap = 1e-9;
    int max_iterations = 200;
};

namespace detail {

struct Presolved {
    // Variables kept for the interior point stage.
    std::vector<int> keep;             // kept variable -> original index
    std::vector<int> orig_to_kept;     // original -> kept index or -1
    Eigen::VectorXd fixed_value;       // per original variable, NaN if kept
    double objective_shift = 0.0;
    bool unbounded = false;
    bool infeasible = false;
    std::string message;
};

// Substitutes variables fixed by their bounds and variables that appear in no
// row (those are optimized independently; an unbounded improving direction on
// such a column proves the program unbounded).
inline Presolved presolve(const ConvexProgram& p) {
    const int n = p.num_variables();
    Presolved ps;
    ps.fixed_value = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::quiet_NaN());
    ps.orig_to_kept.assign(n, -1);

    std::vector<char> in_row(n, 0);
    for (int i = 0; i < p.num_rows(); ++i)
        for (const auto& t : p.row(i).terms)
            if (t.coef != 0.0) in_row[t.var] = 1;

    for (int j = 0; j < n; ++j) {
        const auto& v = p.variable(j);
        const double width = v.ub - v.lb;
        if (std::isfinite(width) && width <= 1e-14 * std::max(1.0, std::abs(v.lb))) {
            ps.fixed_value(j) = v.lb;
            continue;
        }
        if (!in_row[j]) {
            double val;
            if (v.quad > 0.0) {
                val = std::clamp(-v.cost / v.quad, v.lb, v.ub);
            } else if (v.cost > 0.0) {
                val = v.lb;
            } else if (v.cost < 0.0) {
                val = v.ub;
            } else {
                val = std::clamp(0.0, v.lb, v.ub);
            }
            if (!std::isfinite(val)) {
                ps.unbounded = true;
                ps.message = "variable '" + v.name + "' is unbounded in the improving direction";
                return ps;
            }
            ps.fixed_value(j) = val;
            continue;
        }
        ps.orig_to_kept[j] = static_cast<int>(ps.keep.size());
        ps.keep.push_back(j);
    }
    for (int j = 0; j < n; ++j) {
        if (std::isnan(ps.fixed_value(j))) continue;
        const auto& v = p.variable(j);
        const double val = ps.fixed_value(j);
        ps.objective_shift += v.cost * val + 0.5 * v.quad * val * val;
    }
    return ps;
}

}  // namespace detail

/// Solves the program.  Infeasible and unbounded programs are reported as
/// statuses; only malformed input throws.
SolveResult solve(const ConvexProgram& prog, const SolverOptions& options = {});

namespace detail {

// Interior point method on:  min 0.5 z'Qz + c'z  s.t.  A z = b,  zl <= z <= zu
// where z stacks kept structural variables and one slack per inequality row.
class InteriorPoint {
public:
    InteriorPoint(const ConvexProgram& p, const Presolved& ps, const SolverOptions& opt)
        : prog_(p), ps_(ps), opt_(opt) {
        build();
    }

    SolveResult run();

private:
    const ConvexProgram& prog_;
    const Presolved& ps_;
    SolverOptions opt_;

    int nk_ = 0;   // kept structural variables
    int mi_ = 0;   // inequality rows (slacked)
    int me_ = 0;   // equality rows
    int N_ = 0;    // nk + mi
    int M_ = 0;    // me + mi
    std::vector<int> row_of_con_;   // constraint k -> original row index
    std::vector<int> slack_of_row_; // original row -> slack z-index or -1

    Eigen::MatrixXd A_;  // M x N
    Eigen::VectorXd b_, c_, q_, zl_, zu_;
    double obj_const_ = 0.0;

    bool empty_row_infeasible_ = false;
    std::string empty_row_message_;

    void build() {
        nk_ = static_cast<int>(ps_.keep.size());
        std::vector<int> ineq_rows, eq_rows;
        for (int i = 0; i < prog_.num_rows(); ++i) {
            // Shift row bounds by contributions of presolved variables.
            double shift = 0.0;
            bool any_kept = false;
            for (const auto& t : prog_.row(i).terms) {
                if (ps_.orig_to_kept[t.var] >= 0) {
                    if (t.coef != 0.0) any_kept = true;
                } else {
                    shift += t.coef * ps_.fixed_value(t.var);
                }
            }
            const double lb = prog_.row(i).lb - shift;
            const double ub = prog_.row(i).ub - shift;
            if (!any_kept) {
                const double tol = 1e-9 * (1.0 + finite_abs_or_zero(lb) + finite_abs_or_zero(ub));
                if (0.0 < lb - tol || 0.0 > ub + tol) {
                    empty_row_infeasible_ = true;
                    empty_row_message_ =
                        "row '" + prog_.row(i).name + "' is constant and violates its bounds";
                }
                continue;
            }
            if (prog_.row(i).is_equality())
                eq_rows.push_back(i);
            else
                ineq_rows.push_back(i);
        }
        me_ = static_cast<int>(eq_rows.size());
        mi_ = static_cast<int>(ineq_rows.size());
        N_ = nk_ + mi_;
        M_ = me_ + mi_;
        row_of_con_.clear();
        slack_of_row_.assign(prog_.num_rows(), -1);

        A_ = Eigen::MatrixXd::Zero(M_, N_);
        b_ = Eigen::VectorXd::Zero(M_);
        c_ = Eigen::VectorXd::Zero(N_);
        q_ = Eigen::VectorXd::Zero(N_);
        zl_ = Eigen::VectorXd::Constant(N_, -kInfinity);
        zu_ = Eigen::VectorXd::Constant(N_, kInfinity);
        obj_const_ = prog_.objective_constant() + ps_.objective_shift;

        for (int k = 0; k < nk_; ++k) {
            const auto& v = prog_.variable(ps_.keep[k]);
            c_(k) = v.cost;
            q_(k) = v.quad;
            zl_(k) = v.lb;
            zu_(k) = v.ub;
        }
        int con = 0;
        auto fill_row = [&](int i, double rhs_shift_lb, double rhs_shift_ub, bool eq) {
            for (const auto& t : prog_.row(i).terms) {
                const int k = ps_.orig_to_kept[t.var];
                if (k >= 0)
                    A_(con, k) += t.coef;
            }
            double shift = 0.0;
            for (const auto& t : prog_.row(i).terms)
                if (ps_.orig_to_kept[t.var] < 0) shift += t.coef * ps_.fixed_value(t.var);
            if (eq) {
                b_(con) = prog_.row(i).lb - shift;
            } else {
                const int s = nk_ + (con - me_);
                A_(con, s) = -1.0;
                b_(con) = 0.0;
                zl_(s) = prog_.row(i).lb - shift;
                zu_(s) = prog_.row(i).ub - shift;
                slack_of_row_[i] = s;
            }
            (void)rhs_shift_lb;
            (void)rhs_shift_ub;
            row_of_con_.push_back(i);
            ++con;
        };
        for (int i : eq_rows) fill_row(i, 0, 0, true);
        for (int i : ineq_rows) fill_row(i, 0, 0, false);
    }

    double primal_objective(const Eigen::VectorXd& z) const {
        return 0.5 * z.dot(q_.cwiseProduct(z)) + c_.dot(z) + obj_const_;
    }
};

inline SolveResult InteriorPoint::run() {
    SolveResult res;
    res.x = Eigen::VectorXd::Zero(prog_.num_variables());
    res.row_dual_lo = Eigen::VectorXd::Zero(prog_.num_rows());
    res.row_dual_up = Eigen::VectorXd::Zero(prog_.num_rows());
    res.var_dual_lo = Eigen::VectorXd::Zero(prog_.num_variables());
    res.var_dual_up = Eigen::VectorXd::Zero(prog_.num_variables());

    if (empty_row_infeasible_) {
        res.status = SolveStatus::infeasible;
        res.message = empty_row_message_;
        return res;
    }

    const int N = N_, M = M_;
    Eigen::VectorXd z(N), y = Eigen::VectorXd::Zero(M);
    Eigen::VectorXd mul = Eigen::VectorXd::Zero(N), muu = Eigen::VectorXd::Zero(N);
    std::vector<char> has_lb(N), has_ub(N);
    int nb = 0;
    for (int j = 0; j < N; ++j) {
        has_lb[j] = std::isfinite(zl_(j));
        has_ub[j] = std::isfinite(zu_(j));
        nb += has_lb[j] + has_ub[j];
    }

    // Mehrotra-style starting point: least-squares primal and dual, shifted
    // strictly inside the bounds.  A mid-box start misbehaves badly when some
    // boxes are orders of magnitude wider than the data scale.
    if (M > 0 && N > 0) {
        Eigen::MatrixXd AAt(M, M);
        AAt.setZero();
        AAt.selfadjointView<Eigen::Lower>().rankUpdate(A_);
        AAt.diagonal().array() += 1e-10 * (1.0 + AAt.diagonal().maxCoeff());
        Eigen::LLT<Eigen::MatrixXd> llt0(AAt.selfadjointView<Eigen::Lower>());
        if (llt0.info() == Eigen::Success) {
            z = A_.transpose() * llt0.solve(b_);
            y = llt0.solve(A_ * c_);
        } else {
            z.setZero();
        }
    } else {
        z.setZero();
    }
    Eigen::VectorXd rc = c_ + q_.cwiseProduct(z) - A_.transpose() * y;
    const double shift_p = 1.0 + (N ? 1e-3 * z.cwiseAbs().maxCoeff() : 0.0);
    const double shift_d = 1.0 + 0.01 * (N ? c_.cwiseAbs().maxCoeff() : 0.0);
    for (int j = 0; j < N; ++j) {
        if (has_lb[j] && has_ub[j]) {
            const double margin = std::min(0.25 * (zu_(j) - zl_(j)), shift_p);
            z(j) = std::clamp(z(j), zl_(j) + margin, zu_(j) - margin);
        } else if (has_lb[j]) {
            z(j) = std::max(z(j), zl_(j) + shift_p);
        } else if (has_ub[j]) {
            z(j) = std::min(z(j), zu_(j) - shift_p);
        }
        if (has_lb[j]) mul(j) = std::max(rc(j), 0.0) + shift_d;
        if (has_ub[j]) muu(j) = std::max(-rc(j), 0.0) + shift_d;
    }

    const double bound_scale = [&] {
        double s = 1.0;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j]) s = std::max(s, std::abs(zl_(j)));
            if (has_ub[j]) s = std::max(s, std::abs(zu_(j)));
        }
        return s;
    }();

    Eigen::MatrixXd S(M, M);
    Eigen::VectorXd wl(N), wu(N), theta(N), hinv(N), rd(N), rp(M);
    const double tau = 0.9995;
    double best_rp = kInfinity, best_rd = kInfinity;
    int stall = 0;
    double last_mu = kInfinity;

    auto compute_duals_out = [&](SolveResult& out) {
        for (int k = 0; k < nk_; ++k) {
            const int j = ps_.keep[k];
            out.x(j) = z(k);
            out.var_dual_lo(j) = has_lb[k] ? mul(k) : 0.0;
            out.var_dual_up(j) = has_ub[k] ? muu(k) : 0.0;
        }
        for (int j = 0; j < prog_.num_variables(); ++j)
            if (ps_.orig_to_kept[j] < 0) out.x(j) = ps_.fixed_value(j);
        // Internal multiplier y of row i satisfies y = dual_lo - dual_up: a
        // positive y means the lower side supports the optimum.
        for (int con = 0; con < M; ++con) {
            const int i = row_of_con_[con];
            if (con < me_) {
                out.row_dual_lo(i) = std::max(y(con), 0.0);
                out.row_dual_up(i) = std::max(-y(con), 0.0);
            } else {
                const int s = slack_of_row_[i];
                out.row_dual_lo(i) = has_lb[s] ? mul(s) : 0.0;
                out.row_dual_up(i) = has_ub[s] ? muu(s) : 0.0;
            }
        }
        // Reduced costs of substituted variables, from stationarity.
        for (int j = 0; j < prog_.num_variables(); ++j) {
            if (ps_.orig_to_kept[j] >= 0) continue;
            double r = prog_.variable(j).cost + prog_.variable(j).quad * out.x(j);
            for (int i = 0; i < prog_.num_rows(); ++i)
                for (const auto& t : prog_.row(i).terms)
                    if (t.var == j) r += t.coef * (out.row_dual_up(i) - out.row_dual_lo(i));
            out.var_dual_lo(j) = std::max(r, 0.0);
            out.var_dual_up(j) = std::max(-r, 0.0);
        }
    };

    auto residuals = [&](double& rp_rel, double& rd_rel, double& gap_rel, double& comp) {
        rp = A_ * z - b_;
        rp_rel = 0.0;
        for (int i = 0; i < M; ++i)
            rp_rel = std::max(rp_rel, std::abs(rp(i)) / (1.0 + std::abs(b_(i))));
        rd = q_.cwiseProduct(z) + c_ - A_.transpose() * y;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j]) rd(j) -= mul(j);
            if (has_ub[j]) rd(j) += muu(j);
        }
        const double cs = 1.0 + c_.cwiseAbs().maxCoeff() + (q_.cwiseProduct(z)).cwiseAbs().maxCoeff();
        rd_rel = rd.cwiseAbs().maxCoeff() / cs;
        comp = 0.0;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j]) comp += (z(j) - zl_(j)) * mul(j);
            if (has_ub[j]) comp += (zu_(j) - z(j)) * muu(j);
        }
        gap_rel = comp / (1.0 + std::abs(primal_objective(z)));
    };

    if (N == 0) {
        res.status = SolveStatus::optimal;
        res.objective = obj_const_;
        res.dual_objective = obj_const_;
        res.primal_residual = res.dual_residual = res.gap = 0.0;
        compute_duals_out(res);
        return res;
    }

    for (int iter = 0; iter <= opt_.max_iterations; ++iter) {
        if (!z.allFinite() || !y.allFinite() || !mul.allFinite() || !muu.allFinite()) {
            res.status = SolveStatus::numerical_failure;
            res.message = "iterates became non-finite";
            break;
        }
        double rp_rel, rd_rel, gap_rel, comp;
        residuals(rp_rel, rd_rel, gap_rel, comp);
        res.iterations = iter;
        res.primal_residual = rp_rel;
        res.dual_residual = rd_rel;
        res.gap = gap_rel;
#ifdef M2M_IPM_TRACE
        fprintf(stderr, "ipm it=%d rp=%.3e rd=%.3e gap=%.3e comp=%.3e zmax=%.3e ymax=%.3e\n",
                iter, rp_rel, rd_rel, gap_rel, comp, z.cwiseAbs().maxCoeff(),
                M ? y.cwiseAbs().maxCoeff() : 0.0);
#endif

        if (rp_rel <= opt_.tol_primal && rd_rel <= opt_.tol_dual && gap_rel <= opt_.tol_gap) {
            res.status = SolveStatus::optimal;
            break;
        }
        // Graceful acceptance when progress stalls within contract tolerances.
        const double mu_now = nb ? comp / nb : 0.0;
        if (mu_now > 0.45 * last_mu && rp_rel < best_rp * 1.5 && rd_rel < best_rd * 1.5)
            ++stall;
        else
            stall = 0;
        last_mu = mu_now;
        best_rp = std::min(best_rp, rp_rel);
        best_rd = std::min(best_rd, rd_rel);
        if (stall >= 10 || iter == opt_.max_iterations) {
            if (rp_rel <= 1e-6 && rd_rel <= 1e-6 && gap_rel <= 1e-6) {
                res.status = SolveStatus::optimal;
            } else {
                res.status = SolveStatus::numerical_failure;
                res.message = "no progress; residuals primal=" + std::to_string(rp_rel) +
                              " dual=" + std::to_string(rd_rel) + " gap=" + std::to_string(gap_rel);
            }
            break;
        }
        // Divergence heuristics.
        if (z.cwiseAbs().maxCoeff() > 1e11 * bound_scale && rd_rel < 1e-4) {
            res.status = SolveStatus::unbounded;
            res.message = "iterates diverge along an improving ray";
            break;
        }
        const double dual_norm = std::max(y.cwiseAbs().maxCoeff(),
                                          std::max(mul.maxCoeff(), muu.maxCoeff()));
        if (iter > 20 && rp_rel > 1e-6 && dual_norm > 1e9 * (1.0 + c_.cwiseAbs().maxCoeff())) {
            res.status = SolveStatus::infeasible;
            res.message = "dual iterates diverge; primal residual cannot be reduced";
            break;
        }

        for (int j = 0; j < N; ++j) {
            // Floor the barrier distances: denormal gaps turn the scaling
            // matrix into infinities and poison the direction solve.
            const double floor_l = 1e-13 * (1.0 + finite_abs_or_zero(zl_(j)));
            const double floor_u = 1e-13 * (1.0 + finite_abs_or_zero(zu_(j)));
            wl(j) = has_lb[j] ? std::max(z(j) - zl_(j), floor_l) : 1.0;
            wu(j) = has_ub[j] ? std::max(zu_(j) - z(j), floor_u) : 1.0;
            theta(j) = (has_lb[j] ? mul(j) / wl(j) : 0.0) + (has_ub[j] ? muu(j) / wu(j) : 0.0);
        }
        const double mu_bar = nb ? comp / nb : 0.0;
        const double reg_p = 1e-11 * (1.0 + q_.maxCoeff());
        // Free columns get a proximal term proportional to the barrier
        // parameter: large enough early to keep steps sane, vanishing at the
        // solution so the final iterate is exact.
        const double free_reg = 1e-2 * std::min(1.0, mu_bar) + 1e-10;
        for (int j = 0; j < N; ++j) {
            double h = q_(j) + theta(j) + reg_p;
            if (!has_lb[j] && !has_ub[j]) h += free_reg;
            if (h < 1e-10) h = 1e-10;
            hinv(j) = 1.0 / h;
        }

        Eigen::MatrixXd B = A_ * hinv.cwiseSqrt().asDiagonal();
        S.setZero();
        S.selfadjointView<Eigen::Lower>().rankUpdate(B);
        double reg_d = 1e-11;
        Eigen::LLT<Eigen::MatrixXd> llt;
        for (int attempt = 0; attempt < 5; ++attempt) {
            Eigen::MatrixXd Sreg = S;
            Sreg.diagonal().array() += reg_d;
            llt.compute(Sreg.selfadjointView<Eigen::Lower>());
            if (llt.info() == Eigen::Success) break;
            reg_d *= 100.0;
        }
        if (llt.info() != Eigen::Success) {
            res.status = SolveStatus::numerical_failure;
            res.message = "normal equations factorization failed";
            break;
        }

        auto kkt_solve = [&](const Eigen::VectorXd& h, const Eigen::VectorXd& g,
                             Eigen::VectorXd& dz, Eigen::VectorXd& dy) {
            dy = llt.solve(g - A_ * hinv.cwiseProduct(h));
            dz = hinv.cwiseProduct(h + A_.transpose() * dy);
            // One step of iterative refinement on the augmented system.
            Eigen::VectorXd e1 = h - (dz.cwiseQuotient(hinv)) + A_.transpose() * dy;
            Eigen::VectorXd e2 = g - A_ * dz;
            Eigen::VectorXd cy = llt.solve(e2 - A_ * hinv.cwiseProduct(e1));
            Eigen::VectorXd cz = hinv.cwiseProduct(e1 + A_.transpose() * cy);
            dz += cz;
            dy += cy;
        };

        // Affine scaling direction.
        Eigen::VectorXd h_aff = -(q_.cwiseProduct(z) + c_) + A_.transpose() * y;
        Eigen::VectorXd dz_aff(N), dy_aff(M);
        kkt_solve(h_aff, -rp, dz_aff, dy_aff);
        if (!dz_aff.allFinite() || !dy_aff.allFinite()) {
            res.status = SolveStatus::numerical_failure;
            res.message = "direction solve became non-finite";
            break;
        }
        Eigen::VectorXd dmul_aff(N), dmuu_aff(N);
        for (int j = 0; j < N; ++j) {
            dmul_aff(j) = has_lb[j] ? -mul(j) - mul(j) / wl(j) * dz_aff(j) : 0.0;
            dmuu_aff(j) = has_ub[j] ? -muu(j) + muu(j) / wu(j) * dz_aff(j) : 0.0;
        }
        double ap = 1.0, ad = 1.0;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j] && dz_aff(j) < 0) ap = std::min(ap, -wl(j) / dz_aff(j));
            if (has_ub[j] && dz_aff(j) > 0) ap = std::min(ap, wu(j) / dz_aff(j));
            if (has_lb[j] && dmul_aff(j) < 0) ad = std::min(ad, -mul(j) / dmul_aff(j));
            if (has_ub[j] && dmuu_aff(j) < 0) ad = std::min(ad, -muu(j) / dmuu_aff(j));
        }
        double comp_aff = 0.0;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j]) comp_aff += (wl(j) + ap * dz_aff(j)) * (mul(j) + ad * dmul_aff(j));
            if (has_ub[j]) comp_aff += (wu(j) - ap * dz_aff(j)) * (muu(j) + ad * dmuu_aff(j));
        }
        const double mu_aff = nb ? comp_aff / nb : 0.0;
        const double sigma = mu_bar > 0 ? std::pow(mu_aff / mu_bar, 3.0) : 0.0;

        // Combined predictor-corrector direction.
        Eigen::VectorXd h_cor = h_aff;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j]) h_cor(j) += (sigma * mu_bar - dz_aff(j) * dmul_aff(j)) / wl(j);
            if (has_ub[j]) h_cor(j) -= (sigma * mu_bar + dz_aff(j) * dmuu_aff(j)) / wu(j);
        }
        Eigen::VectorXd dz(N), dy(M);
        kkt_solve(h_cor, -rp, dz, dy);
        Eigen::VectorXd dmul(N), dmuu(N);
        for (int j = 0; j < N; ++j) {
            dmul(j) = has_lb[j]
                          ? (sigma * mu_bar - dz_aff(j) * dmul_aff(j)) / wl(j) - mul(j) -
                                mul(j) / wl(j) * dz(j)
                          : 0.0;
            dmuu(j) = has_ub[j]
                          ? (sigma * mu_bar + dz_aff(j) * dmuu_aff(j)) / wu(j) - muu(j) +
                                muu(j) / wu(j) * dz(j)
                          : 0.0;
        }
        ap = 1.0;
        ad = 1.0;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j] && dz(j) < 0) ap = std::min(ap, -wl(j) / dz(j));
            if (has_ub[j] && dz(j) > 0) ap = std::min(ap, wu(j) / dz(j));
            if (has_lb[j] && dmul(j) < 0) ad = std::min(ad, -mul(j) / dmul(j));
            if (has_ub[j] && dmuu(j) < 0) ad = std::min(ad, -muu(j) / dmuu(j));
        }
        ap = std::min(1.0, tau * ap);
        ad = std::min(1.0, tau * ad);
#ifdef M2M_IPM_TRACE
        fprintf(stderr, "    step ap=%.3e ad=%.3e sigma=%.3e mu=%.3e\n", ap, ad, sigma, mu_bar);
#endif
        z += ap * dz;
        y += ad * dy;
        for (int j = 0; j < N; ++j) {
            if (has_lb[j]) mul(j) = std::max(mul(j) + ad * dmul(j), 1e-300);
            if (has_ub[j]) muu(j) = std::max(muu(j) + ad * dmuu(j), 1e-300);
        }
    }

    res.objective = primal_objective(z);
    // Wolfe dual objective at the final iterate.
    double dual_obj = b_.dot(y) - 0.5 * z.dot(q_.cwiseProduct(z)) + obj_const_;
    for (int j = 0; j < N; ++j) {
        if (has_lb[j]) dual_obj += zl_(j) * mul(j);
        if (has_ub[j]) dual_obj -= zu_(j) * muu(j);
    }
    res.dual_objective = dual_obj;
    compute_duals_out(res);
    return res;
}

// Elastic feasibility program: minimize total constraint violation.
inline double elastic_violation(const ConvexProgram& p, const SolverOptions& opt) {
    ConvexProgram e;
    for (int j = 0; j < p.num_variables(); ++j) {
        const auto& v = p.variable(j);
        e.add_variable(v.name, v.lb, v.ub, 0.0, 0.0);
    }
    for (int i = 0; i < p.num_rows(); ++i) {
        const auto& r = p.row(i);
        auto terms = r.terms;
        const int tp = e.add_variable("elastic_plus_" + std::to_string(i), 0.0, kInfinity, 1.0);
        const int tm = e.add_variable("elastic_minus_" + std::to_string(i), 0.0, kInfinity, 1.0);
        terms.push_back({tp, 1.0});
        terms.push_back({tm, -1.0});
        e.add_row(r.name, r.lb, r.ub, std::move(terms));
    }
    SolverOptions o = opt;
    o.tol_primal = o.tol_dual = o.tol_gap = 1e-9;
    Presolved ps = presolve(e);
    InteriorPoint ipm(e, ps, o);
    SolveResult r = ipm.run();
    if (r.status != SolveStatus::optimal) return kInfinity;
    return r.objective;
}

}  // namespace detail

inline SolveResult solve(const ConvexProgram& prog, const SolverOptions& options) {
    prog.validate();
    detail::Presolved ps = detail::presolve(prog);
    SolveResult res;
    if (ps.unbounded) {
        res.status = SolveStatus::unbounded;
        res.message = ps.message;
        res.x = Eigen::VectorXd::Zero(prog.num_variables());
        res.row_dual_lo = Eigen::VectorXd::Zero(prog.num_rows());
        res.row_dual_up = Eigen::VectorXd::Zero(prog.num_rows());
        res.var_dual_lo = Eigen::VectorXd::Zero(prog.num_variables());
        res.var_dual_up = Eigen::VectorXd::Zero(prog.num_variables());
        return res;
    }
    detail::InteriorPoint ipm(prog, ps, options);
    res = ipm.run();
    if (res.status == SolveStatus::numerical_failure || res.status == SolveStatus::infeasible) {
        // Certify infeasibility through the elastic program before reporting it.
        const double viol = detail::elastic_violation(prog, options);
        double scale = 1.0;
        for (int i = 0; i < prog.num_rows(); ++i)
            scale = std::max({scale, finite_abs_or_zero(prog.row(i).lb),
                              finite_abs_or_zero(prog.row(i).ub)});
        if (std::isfinite(viol) && viol > 1e-7 * scale) {
            res.status = SolveStatus::infeasible;
            res.message = "infeasible; minimum total constraint violation " + std::to_string(viol);
        } else if (res.status == SolveStatus::infeasible) {
            // The heuristic fired but the elastic program found a feasible point.
            res.status = SolveStatus::numerical_failure;
            res.message = "suspected infeasibility not confirmed by elastic program";
        }
    }
    return res;
}

inline std::string ConvexProgram::to_lp_text() const {
    std::ostringstream os;
    os.setf(std::ios::fmtflags(0), std::ios::floatfield);
    os.precision(17);
    auto vname = [&](int j) {
        return vars_[j].name.empty() ? "x" + std::to_string(j) : vars_[j].name;
    };
    os << "Minimize\n obj:";
    bool first = true;
    for (int j = 0; j < num_variables(); ++j) {
        if (vars_[j].cost != 0.0) {
            os << (vars_[j].cost < 0 || first ? " " : " + ");
            if (vars_[j].cost < 0) os << "- ";
            os << std::abs(vars_[j].cost) << " " << vname(j);
            first = false;
        }
    }
    bool any_quad = false;
    for (int j = 0; j < num_variables(); ++j) any_quad |= vars_[j].quad != 0.0;
    if (any_quad) {
        os << " + [";
        bool fq = true;
        for (int j = 0; j < num_variables(); ++j) {
            if (vars_[j].quad != 0.0) {
                if (!fq) os << " + ";
                os << vars_[j].quad << " " << vname(j) << " ^ 2";
                fq = false;
            }
        }
        os << " ] / 2";
    }
    os << "\nSubject To\n";
    for (int i = 0; i < num_rows(); ++i) {
        const auto& r = rows_[i];
        auto write_terms = [&] {
            bool f = true;
            for (const auto& t : r.terms) {
                os << (t.coef < 0 ? " - " : (f ? " " : " + ")) << std::abs(t.coef) << " "
                   << vname(t.var);
                f = false;
            }
        };
        const std::string nm = r.name.empty() ? "c" + std::to_string(i) : r.name;
        if (r.is_equality()) {
            os << " " << nm << ":";
            write_terms();
            os << " = " << r.lb << "\n";
        } else {
            if (std::isfinite(r.ub)) {
                os << " " << nm << "_u:";
                write_terms();
                os << " <= " << r.ub << "\n";
            }
            if (std::isfinite(r.lb)) {
                os << " " << nm << "_l:";
                write_terms();
                os << " >= " << r.lb << "\n";
            }
        }
    }
    os << "Bounds\n";
    for (int j = 0; j < num_variables(); ++j) {
        const auto& v = vars_[j];
        if (!std::isfinite(v.lb) && !std::isfinite(v.ub))
            os << " " << vname(j) << " free\n";
        else if (std::isfinite(v.lb) && std::isfinite(v.ub))
            os << " " << v.lb << " <= " << vname(j) << " <= " << v.ub << "\n";
        else if (std::isfinite(v.lb))
            os << " " << vname(j) << " >= " << v.lb << "\n";
        else
            os << " " << vname(j) << " <= " << v.ub << "\n";
    }
    os << "End\n";
    return os.str();
}

}  // namespace m2m::qp

#pragma once

#include <evi/geometry.hpp>

#include <Eigen/Cholesky>

#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace evi {

struct RobustLoss {
  enum Kind { kNone, kHuber };
  Kind kind = kNone;
  double scale = 1.0;
};

// Returns (rho(s), rho'(s)) for the squared residual norm s. The IRLS weight
// applied during assembly is rho'.
inline std::pair<double, double> robust_weight(const RobustLoss& loss, double s) {
  if (s < 0.0) throw std::invalid_argument("robust_weight: negative squared norm");
  if (loss.kind == RobustLoss::kNone) return {s, 1.0};
  if (loss.scale <= 0.0) throw std::invalid_argument("robust_weight: huber scale must be positive");
  const double c = loss.scale;
  if (s <= c * c) return {s, 1.0};
  const double root = std::sqrt(s);
  return {2.0 * c * root - c * c, c / root};
}

enum class BlockKind { kEuclidean, kUnitQuaternion };

struct SolveOptions {
  int max_iters = 50;
  double grad_tol = 1e-8;
  double step_tol = 1e-10;
  double initial_damping = 1e-12;
  double max_step = 0.0;  // steps beyond this local norm are clamped, 0 = unlimited
  bool verbose = false;
};

enum class Termination {
  kGradientTolerance,
  kStepTolerance,
  kMaxIterations,
  kAllFixed,
  kNoProgress,
};

struct SolveReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;       // accepted steps
  int rejected_steps = 0;
  Termination termination = Termination::kMaxIterations;
  std::vector<double> cost_history;

  const char* termination_name() const {
    switch (termination) {
      case Termination::kGradientTolerance: return "gradient_tolerance";
      case Termination::kStepTolerance: return "step_tolerance";
      case Termination::kMaxIterations: return "max_iterations";
      case Termination::kAllFixed: return "all_fixed";
      case Termination::kNoProgress: return "no_progress";
    }
    return "unknown";
  }
};

struct JacobianCheckReport {
  bool ok = true;
  double max_rel_error = 0.0;
  std::string worst_block;
};

/// Dense nonlinear least-squares problem over mixed Euclidean and unit
/// quaternion blocks. Quaternions are stored as (x, y, z, w) coefficients and
/// perturbed on the right by 3-dim axis-angle increments.
class Problem {
 public:
  // residual callback: fills *residual (residual_dim) and, when jacobians is
  // non-null, one residual_dim x local_dim matrix per referenced block.
  using ResidualFn = std::function<void(const std::vector<Eigen::VectorXd>& params,
                                        Eigen::VectorXd* residual,
                                        std::vector<Eigen::MatrixXd>* jacobians)>;

  int add_parameter_block(const Eigen::VectorXd& value, BlockKind kind = BlockKind::kEuclidean,
                          bool fixed = false) {
    if (kind == BlockKind::kUnitQuaternion && value.size() != 4)
      throw std::invalid_argument("problem: quaternion blocks must have dimension 4");
    if (value.size() == 0) throw std::invalid_argument("problem: empty parameter block");
    ParameterBlock b;
    b.kind = kind;
    b.value = kind == BlockKind::kUnitQuaternion ? canonical(value) : value;
    b.fixed = fixed;
    blocks_.push_back(std::move(b));
    return static_cast<int>(blocks_.size()) - 1;
  }

  void add_residual_block(std::string name, std::vector<int> params, int residual_dim,
                          ResidualFn fn, RobustLoss loss = {}) {
    for (int id : params)
      if (id < 0 || id >= static_cast<int>(blocks_.size()))
        throw std::invalid_argument("problem: residual references unknown block");
    if (residual_dim <= 0) throw std::invalid_argument("problem: non-positive residual dimension");
    if (loss.kind == RobustLoss::kHuber && loss.scale <= 0.0)
      throw std::invalid_argument("problem: huber scale must be positive");
    residuals_.push_back({std::move(name), std::move(params), residual_dim, std::move(fn), loss});
  }

  void set_fixed(int id, bool fixed) { blocks_.at(id).fixed = fixed; }
  bool is_fixed(int id) const { return blocks_.at(id).fixed; }
  const Eigen::VectorXd& value(int id) const { return blocks_.at(id).value; }
  void set_value(int id, const Eigen::VectorXd& v) {
    ParameterBlock& b = blocks_.at(id);
    if (v.size() != b.value.size()) throw std::invalid_argument("problem: dimension mismatch");
    b.value = b.kind == BlockKind::kUnitQuaternion ? canonical(v) : v;
  }

  int num_parameter_blocks() const { return static_cast<int>(blocks_.size()); }
  int num_residual_blocks() const { return static_cast<int>(residuals_.size()); }

  int local_dim(int id) const {
    return blocks_.at(id).kind == BlockKind::kUnitQuaternion ? 3
                                                             : static_cast<int>(blocks_[id].value.size());
  }

  double cost() const {
    double c = 0.0;
    evaluate(values(), &c, nullptr, nullptr, nullptr);
    return c;
  }

  // Gauss-Newton approximation J^T W J over the free local dimensions, robust
  // weights included, at the current values.
  Eigen::MatrixXd hessian() const {
    Offsets off = free_offsets();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(off.total, off.total);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(off.total);
    double c = 0.0;
    evaluate(values(), &c, &h, &g, &off);
    return h;
  }

  friend SolveReport solve(Problem& p, const SolveOptions& opts);
  friend JacobianCheckReport verify_jacobians(const Problem& p, double step, double tol);

 private:
  struct ParameterBlock {
    BlockKind kind;
    Eigen::VectorXd value;
    bool fixed;
  };
  struct ResidualBlock {
    std::string name;
    std::vector<int> params;
    int dim;
    ResidualFn fn;
    RobustLoss loss;
  };
  struct Offsets {
    std::vector<int> of_block;  // -1 for fixed
    int total = 0;
  };

  static Eigen::VectorXd canonical(const Eigen::VectorXd& q4) {
    Rotation r(Quat(q4(3), q4(0), q4(1), q4(2)));
    return r.quat().coeffs();
  }

  static Eigen::VectorXd plus(const ParameterBlock& b, const Eigen::VectorXd& delta) {
    if (b.kind == BlockKind::kEuclidean) return b.value + delta;
    const Rotation r(Quat(b.value(3), b.value(0), b.value(1), b.value(2)));
    return (r * Rotation::from_axis_angle(Vec3(delta))).quat().coeffs();
  }

  std::vector<Eigen::VectorXd> values() const {
    std::vector<Eigen::VectorXd> v;
    v.reserve(blocks_.size());
    for (const ParameterBlock& b : blocks_) v.push_back(b.value);
    return v;
  }

  Offsets free_offsets() const {
    Offsets off;
    off.of_block.assign(blocks_.size(), -1);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      if (blocks_[i].fixed) continue;
      off.of_block[i] = off.total;
      off.total += local_dim(static_cast<int>(i));
    }
    return off;
  }

  // Single pass over all residual blocks; h/g/offsets may be null for a
  // cost-only evaluation.
  void evaluate(const std::vector<Eigen::VectorXd>& vals, double* cost, Eigen::MatrixXd* h,
                Eigen::VectorXd* g, const Offsets* off) const {
    std::vector<Eigen::VectorXd> args;
    Eigen::VectorXd r;
    std::vector<Eigen::MatrixXd> jacs;
    for (const ResidualBlock& rb : residuals_) {
      args.clear();
      for (int id : rb.params) args.push_back(vals[id]);
      r.resize(rb.dim);
      std::vector<Eigen::MatrixXd>* jac_ptr = nullptr;
      if (h) {
        jacs.assign(rb.params.size(), Eigen::MatrixXd());
        jac_ptr = &jacs;
      }
      rb.fn(args, &r, jac_ptr);
      if (!r.allFinite())
        throw std::runtime_error("solver: non-finite residual in block '" + rb.name + "'");
      const auto [rho, w] = robust_weight(rb.loss, r.squaredNorm());
      *cost += 0.5 * rho;
      if (!h) continue;
      for (size_t a = 0; a < rb.params.size(); ++a) {
        const int ia = rb.params[a];
        if (off->of_block[ia] < 0) continue;
        const Eigen::MatrixXd& ja = jacs[a];
        if (!ja.allFinite())
          throw std::runtime_error("solver: non-finite Jacobian in block '" + rb.name + "'");
        g->segment(off->of_block[ia], local_dim(ia)).noalias() += w * ja.transpose() * r;
        for (size_t b = 0; b < rb.params.size(); ++b) {
          const int ib = rb.params[b];
          if (off->of_block[ib] < 0) continue;
          h->block(off->of_block[ia], off->of_block[ib], local_dim(ia), local_dim(ib))
              .noalias() += w * ja.transpose() * jacs[b];
        }
      }
    }
  }

  std::vector<ParameterBlock> blocks_;
  std::vector<ResidualBlock> residuals_;
};

// Levenberg-Marquardt with gain-ratio damping and an optional trust-region
// style cap on the local step norm.
inline SolveReport solve(Problem& p, const SolveOptions& opts = {}) {
  SolveReport report;
  Problem::Offsets off = p.free_offsets();
  report.initial_cost = p.cost();
  report.final_cost = report.initial_cost;
  report.cost_history.push_back(report.initial_cost);
  if (off.total == 0) {
    report.termination = Termination::kAllFixed;
    return report;
  }

  std::vector<Eigen::VectorXd> vals = p.values();
  Eigen::MatrixXd h(off.total, off.total);
  Eigen::VectorXd g(off.total);
  double cost = 0.0;
  auto full_eval = [&](const std::vector<Eigen::VectorXd>& v, double* c, Eigen::MatrixXd* hh,
                       Eigen::VectorXd* gg) {
    *c = 0.0;
    if (hh) {
      hh->setZero();
      gg->setZero();
    }
    p.evaluate(v, c, hh, gg, &off);
  };
  full_eval(vals, &cost, &h, &g);

  double lambda = opts.initial_damping;
  double nu = 2.0;
  report.termination = Termination::kMaxIterations;
  while (report.iterations < opts.max_iters) {
    if (g.norm() < opts.grad_tol) {
      report.termination = Termination::kGradientTolerance;
      break;
    }
    bool accepted = false;
    int attempts = 0;
    while (!accepted) {
      Eigen::MatrixXd damped = h;
      const Eigen::VectorXd scale = h.diagonal().cwiseMax(1e-12);
      damped.diagonal() += lambda * scale;
      const Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
      Eigen::VectorXd delta;
      bool solvable = ldlt.info() == Eigen::Success;
      if (solvable) {
        delta = ldlt.solve(-g);
        solvable = delta.allFinite();
        if (solvable && opts.max_step > 0.0 && delta.norm() > opts.max_step)
          delta *= opts.max_step / delta.norm();
      }
      double trial_cost = 0.0;
      std::vector<Eigen::VectorXd> trial;
      if (solvable) {
        trial = vals;
        for (size_t i = 0; i < trial.size(); ++i) {
          if (off.of_block[i] < 0) continue;
          Problem::ParameterBlock b = p.blocks_[i];
          b.value = vals[i];
          trial[i] = Problem::plus(b, delta.segment(off.of_block[i], p.local_dim((int)i)));
        }
        p.evaluate(trial, &trial_cost, nullptr, nullptr, nullptr);
      }
      if (solvable && trial_cost <= cost) {
        // gain-ratio damping update (Nielsen): sharp drops after good
        // quadratic agreement, quick recovery after rejection bursts; the
        // model decrease is evaluated exactly so capped steps rate fairly
        const double predicted = -(g.dot(delta) + 0.5 * delta.dot(h * delta));
        const double rho = predicted > 0.0 ? (cost - trial_cost) / predicted : 1.0;
        lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
        nu = 2.0;
        vals = std::move(trial);
        cost = trial_cost;
        accepted = true;
        ++report.iterations;
        report.cost_history.push_back(cost);
        if (opts.verbose)
          std::fprintf(stderr, "iter %3d  cost %.9e  damping %.3e\n", report.iterations, cost,
                       lambda);
        if (delta.norm() < opts.step_tol) {
          report.termination = Termination::kStepTolerance;
          goto done;
        }
      } else {
        lambda *= nu;
        nu *= 2.0;
        ++report.rejected_steps;
        if (++attempts > 40) {
          report.termination = Termination::kNoProgress;
          goto done;
        }
      }
    }
    full_eval(vals, &cost, &h, &g);
  }
done:
  for (size_t i = 0; i < vals.size(); ++i) p.blocks_[i].value = vals[i];
  report.final_cost = cost;
  return report;
}

// Central finite-difference check of every registered analytic Jacobian.
inline JacobianCheckReport verify_jacobians(const Problem& p, double step = 1e-6,
                                            double tol = 1e-4) {
  JacobianCheckReport report;
  const std::vector<Eigen::VectorXd> vals = p.values();
  for (const Problem::ResidualBlock& rb : p.residuals_) {
    std::vector<Eigen::VectorXd> args;
    for (int id : rb.params) args.push_back(vals[id]);
    Eigen::VectorXd r(rb.dim);
    std::vector<Eigen::MatrixXd> jacs(rb.params.size());
    rb.fn(args, &r, &jacs);
    for (size_t a = 0; a < rb.params.size(); ++a) {
      const int id = rb.params[a];
      const int ld = p.local_dim(id);
      Eigen::MatrixXd fd(rb.dim, ld);
      for (int k = 0; k < ld; ++k) {
        Eigen::VectorXd delta = Eigen::VectorXd::Zero(ld);
        delta(k) = step;
        std::vector<Eigen::VectorXd> pos = args, neg = args;
        pos[a] = Problem::plus(p.blocks_[id], delta);
        neg[a] = Problem::plus(p.blocks_[id], -delta);
        Eigen::VectorXd rp(rb.dim), rm(rb.dim);
        rb.fn(pos, &rp, nullptr);
        rb.fn(neg, &rm, nullptr);
        fd.col(k) = (rp - rm) / (2.0 * step);
      }
      const double rel = (fd - jacs[a]).norm() / std::max(1.0, jacs[a].norm());
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_block = rb.name;
      }
    }
  }
  report.ok = report.max_rel_error < tol;
  return report;
}

}  // namespace evi

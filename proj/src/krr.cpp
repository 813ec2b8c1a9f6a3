#include "krrst/krr.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "krrst/errors.hpp"

namespace krrst {

using nlohmann::json;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.ptr(), t.dim(0), t.dim(1)); }

Tensor to_tensor(const RowMat& m) {
  Tensor out({m.rows(), m.cols()});
  Eigen::Map<RowMat>(out.ptr(), m.rows(), m.cols()) = m;
  return out;
}

void require_square(std::string_view op, const Tensor& k) {
  if (k.rank() != 2 || k.dim(0) != k.dim(1)) {
    throw DimensionError(std::string(op) + ": expected a square matrix, got " + shape_str(k.shape()));
  }
}

double mean_diag(const Tensor& k) {
  double t = 0.0;
  for (std::int64_t i = 0; i < k.dim(0); ++i) t += k(i, i);
  return t / static_cast<double>(k.dim(0));
}

struct Factored {
  Eigen::LLT<RowMat> llt;
  RowMat solution;
  double jitter = 0.0;
  double residual = 0.0;
};

bool factor_ok(const Eigen::LLT<RowMat>& llt) {
  if (llt.info() != Eigen::Success) return false;
  const RowMat l = llt.matrixL();
  for (Eigen::Index i = 0; i < l.rows(); ++i)
    if (!(l(i, i) > 0.0) || !std::isfinite(l(i, i))) return false;
  return true;
}

// Cholesky with jitter escalation, solve, then iterative refinement until
// the relative residual against the factored matrix meets tolerance.
std::shared_ptr<Factored> factor_and_solve(const Tensor& s, const Tensor& y) {
  require_square("spd_solve", s);
  if (y.rank() != 2 || y.dim(0) != s.dim(0)) {
    throw DimensionError("spd_solve: rhs " + shape_str(y.shape()) + " does not match system " + shape_str(s.shape()));
  }
  if (!s.all_finite() || !y.all_finite()) throw NumericError("spd_solve: non-finite input");
  const auto m = s.dim(0);
  RowMat sm = as_matrix(s);
  auto out = std::make_shared<Factored>();
  out->llt.compute(sm);
  if (!factor_ok(out->llt)) {
    double jitter = 1e-10 * std::max(std::abs(mean_diag(s)), kRidgeFloor);
    bool ok = false;
    for (int attempt = 0; attempt <= kMaxJitterEscalations && !ok; ++attempt, jitter *= 10.0) {
      out->llt.compute(sm + jitter * RowMat::Identity(m, m));
      ok = factor_ok(out->llt);
      if (ok) out->jitter = jitter;
    }
    if (!ok) {
      throw SingularSystemError("spd_solve: Cholesky failed after " + std::to_string(kMaxJitterEscalations) +
                                " jitter escalations (m = " + std::to_string(m) + ")");
    }
    sm.diagonal().array() += out->jitter;
  }
  const ConstMap ym = as_matrix(y);
  const double y_norm = std::max(ym.norm(), 1e-12);
  out->solution = out->llt.solve(ym);
  RowMat r = ym - sm * out->solution;
  out->residual = r.norm() / y_norm;
  for (int step = 0; step < 2 && out->residual > 1e-14; ++step) {
    out->solution += out->llt.solve(r);
    r = ym - sm * out->solution;
    out->residual = r.norm() / y_norm;
  }
  if (!(out->residual < kResidualTolerance)) {
    throw SingularSystemError("spd_solve: relative residual " + std::to_string(out->residual) + " exceeds tolerance");
  }
  return out;
}

}  // namespace

std::string_view ridge_mode_name(RidgeMode mode) {
  return mode == RidgeMode::absolute ? "absolute" : "trace_scaled";
}

RidgeMode parse_ridge_mode(std::string_view name) {
  if (name == "absolute") return RidgeMode::absolute;
  if (name == "trace_scaled") return RidgeMode::trace_scaled;
  throw ConfigError("unknown ridge mode '" + std::string(name) + "'");
}

void RidgeConfig::validate() const {
  if (!std::isfinite(base) || base < 0.0) throw ConfigError("ridge base must be finite and non-negative");
}

double RidgeConfig::resolve(const Tensor& k) const {
  validate();
  require_square("ridge", k);
  const double scale = std::max(mean_diag(k), 0.0);
  const double lambda = mode == RidgeMode::absolute ? base : base * scale;
  return std::max(lambda, kRidgeFloor * std::max(scale, 1.0));
}

json RidgeConfig::to_json() const { return {{"mode", ridge_mode_name(mode)}, {"base", base}}; }

RidgeConfig RidgeConfig::from_json(const json& j) {
  RidgeConfig c;
  if (j.contains("mode")) c.mode = parse_ridge_mode(j.at("mode").get<std::string>());
  c.base = j.value("base", c.base);
  c.validate();
  return c;
}

Tensor kernel_matrix(const Tensor& features) {
  if (features.rank() != 2 || features.dim(0) < 1) {
    throw DimensionError("kernel_matrix: expected m x d features, got " + shape_str(features.shape()));
  }
  if (!features.all_finite()) throw NumericError("kernel_matrix: non-finite features");
  const ConstMap f = as_matrix(features);
  RowMat k = f * f.transpose();
  k.triangularView<Eigen::StrictlyUpper>() = k.transpose();
  return to_tensor(k);
}

Tensor kernel_matrix(const FeatureExtractor& omega, const Tensor& x_s, NormMode mode) {
  return kernel_matrix(omega.features(x_s, mode));
}

KrrSolveResult solve_krr(const Tensor& k, const Tensor& y_s, const RidgeConfig& cfg) {
  require_square("solve_krr", k);
  const double lambda = cfg.resolve(k);
  Tensor s = k;
  for (std::int64_t i = 0; i < s.dim(0); ++i) s(i, i) += lambda;
  const auto f = factor_and_solve(s, y_s);
  KrrSolveResult out;
  out.coefficients = to_tensor(f->solution);
  out.cholesky = to_tensor(RowMat(f->llt.matrixL()));
  out.lambda = lambda;
  out.jitter = f->jitter;
  out.residual = f->residual;
  return out;
}

Tensor krr_predict(const Tensor& f_q, const Tensor& f_s, const Tensor& a) {
  if (f_q.rank() != 2 || f_s.rank() != 2 || a.rank() != 2 || f_q.dim(1) != f_s.dim(1) || a.dim(0) != f_s.dim(0)) {
    throw DimensionError("krr_predict: incompatible shapes " + shape_str(f_q.shape()) + ", " + shape_str(f_s.shape()) +
                         ", " + shape_str(a.shape()));
  }
  RowMat p = as_matrix(f_q) * (as_matrix(f_s).transpose() * as_matrix(a));
  return to_tensor(p);
}

Tensor krr_predict(const FeatureExtractor& omega, const Tensor& x_s, const Tensor& a, const Tensor& x_q,
                   NormMode mode) {
  return krr_predict(omega.features(x_q, mode), omega.features(x_s, mode), a);
}

ad::Var spd_solve(const ad::Var& s, const ad::Var& y, SolveDiagnostics* diag) {
  const auto f = factor_and_solve(s.value(), y.value());
  if (diag != nullptr) {
    diag->jitter = f->jitter;
    diag->residual = f->residual;
  }
  Tensor a = to_tensor(f->solution);
  return s.tape().record("spd_solve", std::move(a), {s, y}, [s, y, f](const Tensor& g, ad::Tape& tape) {
    const RowMat w = f->llt.solve(as_matrix(g));
    if (y.requires_grad()) tape.accumulate(y, to_tensor(w));
    if (s.requires_grad()) {
      const RowMat ws = w * f->solution.transpose();
      const RowMat gs = -0.5 * (ws + ws.transpose());
      tape.accumulate(s, to_tensor(gs));
    }
  });
}

ad::Var ridge_system(const ad::Var& k, const RidgeConfig& cfg, double* lambda_out) {
  const double lambda = cfg.resolve(k.value());
  if (lambda_out != nullptr) *lambda_out = lambda;
  const auto m = static_cast<double>(k.shape()[0]);
  const double traced = cfg.base * std::max(mean_diag(k.value()), 0.0);
  if (cfg.mode == RidgeMode::trace_scaled && traced == lambda) {
    return ad::add_diag(k, ad::scale(ad::trace(k), cfg.base / m));
  }
  return ad::add_diag(k, k.tape().constant(Tensor::scalar(lambda)));
}

ad::Var outer_loss(const ad::Var& f_t, const ad::Var& f_s, const ad::Var& y_s, const Tensor& targets,
                   const RidgeConfig& cfg, SolveDiagnostics* diag) {
  if (f_t.value().rank() != 2 || f_s.value().rank() != 2 || f_t.shape()[1] != f_s.shape()[1]) {
    throw DimensionError("outer_loss: feature shapes " + shape_str(f_t.shape()) + " and " + shape_str(f_s.shape()));
  }
  if (targets.rank() != 2 || targets.dim(0) != f_t.shape()[0] || targets.dim(1) != y_s.shape()[1]) {
    throw DimensionError("outer_loss: targets " + shape_str(targets.shape()) + " do not match batch/Y_s");
  }
  auto& tape = f_s.tape();
  const auto k = ad::matmul(f_s, ad::transpose(f_s));
  SolveDiagnostics local;
  const auto s = ridge_system(k, cfg, &local.lambda);
  const auto a = spd_solve(s, y_s, &local);
  const auto pred = ad::matmul(f_t, ad::matmul(ad::transpose(f_s), a));
  const auto loss = ad::scale(ad::sum_squares(ad::sub(tape.constant(targets), pred)), 0.5);
  if (diag != nullptr) *diag = local;
  return loss;
}

MetaGradResult meta_grad(const FeatureExtractor& omega, const Tensor& x_s, const Tensor& y_s, const Tensor& x_t,
                         const Tensor& targets, const RidgeConfig& cfg) {
  ad::Tape tape;
  const auto bound = omega.bind(tape, false);
  const auto xs = tape.leaf(x_s, true);
  const auto ys = tape.leaf(y_s, true);
  const auto f_s = omega.forward(tape, bound, xs, NormMode::batch_stats);
  const auto f_t = omega.forward(tape, bound, tape.constant(x_t), NormMode::batch_stats);
  MetaGradResult out;
  const auto loss = outer_loss(f_t, f_s, ys, targets, cfg, &out.diag);
  out.loss = loss.value().item();
  tape.backward(loss);
  out.grad_x = tape.grad(xs);
  out.grad_y = tape.grad(ys);
  return out;
}

double outer_loss_value(const FeatureExtractor& omega, const Tensor& x_s, const Tensor& y_s, const Tensor& x_t,
                        const Tensor& targets, const RidgeConfig& cfg) {
  ad::Tape tape;
  const auto bound = omega.bind(tape, false);
  const auto f_s = omega.forward(tape, bound, tape.constant(x_s), NormMode::batch_stats);
  const auto f_t = omega.forward(tape, bound, tape.constant(x_t), NormMode::batch_stats);
  return outer_loss(f_t, f_s, tape.constant(y_s), targets, cfg).value().item();
}

}  // namespace krrst

#ifndef KRRST_KRR_HPP_
#define KRRST_KRR_HPP_

#include <string_view>

#include "json.hpp"
#include "krrst/autodiff.hpp"
#include "krrst/models.hpp"
#include "krrst/tensor.hpp"

namespace krrst {

enum class RidgeMode { absolute, trace_scaled };
std::string_view ridge_mode_name(RidgeMode mode);
RidgeMode parse_ridge_mode(std::string_view name);

// Smallest ridge ever used, relative to max(tr(K)/m, 1). A resolved
// lambda of zero is lifted to this floor.
inline constexpr double kRidgeFloor = 1e-12;
inline constexpr double kResidualTolerance = 1e-8;
inline constexpr int kMaxJitterEscalations = 3;

struct RidgeConfig {
  RidgeMode mode = RidgeMode::trace_scaled;
  double base = 1e-6;

  void validate() const;  // throws ConfigError on negative/non-finite base
  // lambda for a given kernel; always > 0.
  double resolve(const Tensor& k) const;
  nlohmann::json to_json() const;
  static RidgeConfig from_json(const nlohmann::json& j);
};

struct KrrSolveResult {
  Tensor coefficients;   // A: m x d_y
  Tensor cholesky;       // lower factor L of K + (lambda + jitter) I
  double lambda = 0.0;
  double jitter = 0.0;   // extra diagonal added after failed factorizations
  double residual = 0.0; // relative residual against the factored matrix
};

// K = F F^T for feature rows F.
Tensor kernel_matrix(const Tensor& features);
Tensor kernel_matrix(const FeatureExtractor& omega, const Tensor& x_s, NormMode mode);

KrrSolveResult solve_krr(const Tensor& k, const Tensor& y_s, const RidgeConfig& cfg);

// f(X_q) f(X_s)^T A.
Tensor krr_predict(const Tensor& f_q, const Tensor& f_s, const Tensor& a);
Tensor krr_predict(const FeatureExtractor& omega, const Tensor& x_s, const Tensor& a, const Tensor& x_q,
                   NormMode mode);

struct SolveDiagnostics {
  double lambda = 0.0;
  double jitter = 0.0;
  double residual = 0.0;
};

// Differentiable A = S^{-1} Y for symmetric positive definite S. The
// adjoint is analytic: Ybar += S^{-1} Abar, Sbar -= sym(S^{-1} Abar A^T).
ad::Var spd_solve(const ad::Var& s, const ad::Var& y, SolveDiagnostics* diag = nullptr);

// K + lambda I with lambda resolved from cfg; in trace_scaled mode the
// dependence of lambda on tr(K) is kept on the tape.
ad::Var ridge_system(const ad::Var& k, const RidgeConfig& cfg, double* lambda_out = nullptr);

// 0.5 * ||G - F_t F_s^T (K + lambda I)^{-1} Y_s||_F^2 with K = F_s F_s^T.
ad::Var outer_loss(const ad::Var& f_t, const ad::Var& f_s, const ad::Var& y_s, const Tensor& targets,
                   const RidgeConfig& cfg, SolveDiagnostics* diag = nullptr);

struct MetaGradResult {
  double loss = 0.0;
  Tensor grad_x;  // m x d_x
  Tensor grad_y;  // m x d_y
  SolveDiagnostics diag;
};

// Outer loss and its gradients w.r.t. X_s and Y_s with omega held fixed.
// `targets` are g_phi(X_t batch). X_s and X_t are featurized in separate
// batch-statistics passes.
MetaGradResult meta_grad(const FeatureExtractor& omega, const Tensor& x_s, const Tensor& y_s, const Tensor& x_t,
                         const Tensor& targets, const RidgeConfig& cfg);
double outer_loss_value(const FeatureExtractor& omega, const Tensor& x_s, const Tensor& y_s, const Tensor& x_t,
                        const Tensor& targets, const RidgeConfig& cfg);

}  // namespace krrst

#endif  // KRRST_KRR_HPP_

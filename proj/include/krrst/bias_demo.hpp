#ifndef KRRST_BIAS_DEMO_HPP_
#define KRRST_BIAS_DEMO_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "krrst/rng.hpp"
#include "krrst/tensor.hpp"

namespace krrst {

// Quadratic SSL stand-in with a finite augmentation support. For a mask
// xi (applied to the columns of X) and targets c:
//   l_xi(theta, X) = ||(X . xi) P theta - c||^2 + mu ||theta||^2
// Each atom carries one target vector for X_s (length m) and one for X_t
// (length n), so both inner and outer objectives are exact expectations
// over the support.
struct AugmentationAtom {
  std::vector<double> mask;  // d_x entries in {0, 1}
  double p = 0.0;
  std::vector<double> c_s;   // m
  std::vector<double> c_t;   // n
};

struct ToySSLProblem {
  std::int64_t d_theta = 0;
  std::int64_t d_x = 0;
  double mu = 0.0;
  Tensor projection;  // P: d_x x d_theta
  Tensor x_t;         // n x d_x
  std::vector<AugmentationAtom> atoms;

  std::int64_t m() const { return atoms.empty() ? 0 : static_cast<std::int64_t>(atoms.front().c_s.size()); }
  std::int64_t n() const { return x_t.empty() ? 0 : x_t.dim(0); }
  void validate() const;  // throws ContractError

  nlohmann::json to_json(const Tensor& x_s) const;
};

struct ToyInstance {
  ToySSLProblem problem;
  Tensor x_s;
};
// Both check shapes and that every single-atom Hessian is positive definite.
ToyInstance load_toy_instance(const std::filesystem::path& path);  // throws FormatError
ToyInstance toy_from_json(const nlohmann::json& j);

// Minimizer of sum_j w_j l_j for weights w over the support summing to 1
// (probabilities for the exact objective, draw frequencies for the sampled
// one). Throws SingularSystemError if the Hessian is not positive definite.
std::vector<double> inner_solution(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& weights);

// Exact L_SSL(theta; X_t) and its gradient in theta (v).
double outer_objective(const ToySSLProblem& pb, const std::vector<double>& theta);
std::vector<double> outer_theta_grad(const ToySSLProblem& pb, const std::vector<double>& theta);

// d L_SSL(theta(w); X_t) / d X_s through the closed-form inner solution.
Tensor meta_grad_weighted(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& weights);

Tensor exact_meta_grad(const ToySSLProblem& pb, const Tensor& x_s);
std::vector<double> draw_weights(const std::vector<std::int64_t>& draws, std::size_t support);
Tensor sampled_meta_grad_from_draws(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<std::int64_t>& draws);

struct SampledGrad {
  Tensor grad;
  std::vector<std::int64_t> draws;
  std::int64_t resamples = 0;  // draws rejected for a singular sampled Hessian
};
SampledGrad sampled_meta_grad(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r, Rng& rng);

// alpha[k] = d theta_k / d X_s, each m x d_x, at weights w.
std::vector<Tensor> theta_jacobian(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& weights);

struct BiasReport {
  Tensor exact;       // G*
  Tensor mean;        // Monte-Carlo mean of the sampled meta-gradient
  Tensor stderr_;     // per-coordinate standard error of the mean
  Tensor bias;        // mean - exact
  Tensor covariance;  // sum_k cov(v_k, alpha_k) per coordinate
  std::vector<bool> flags;  // |bias| > 3 SE, row-major
  std::int64_t trials = 0;
  std::int64_t r = 0;
  std::uint64_t seed = 0;
  std::int64_t resamples = 0;

  std::int64_t flagged() const;
  double max_abs_bias() const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

BiasReport bias_estimate(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r, std::int64_t trials,
                         std::uint64_t seed);

struct DecompositionCheck {
  Tensor mean_grad;   // G-hat
  Tensor product;     // E[v]^T E[alpha]
  Tensor covariance;  // sum_k cov(v_k, alpha_k)
  Tensor stderr_;
  Tensor residual;    // |G-hat - (product + covariance)|
  std::vector<Tensor> cov_by_direction;  // cov(v_k, alpha_k) for each k
  std::vector<Tensor> cov_stderr_by_direction;
  std::int64_t trials = 0;

  bool within(double k_se) const;  // residual <= k_se * SE everywhere
};

DecompositionCheck covariance_decomposition_check(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r,
                                                  std::int64_t trials, std::uint64_t seed);

// Control: the sampled inner objective's own gradient in theta is unbiased.
struct PlainGradCheck {
  std::vector<double> exact;
  std::vector<double> mean;
  std::vector<double> stderr_;

  bool within(double k_se) const;
};
PlainGradCheck plain_gradient_check(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& theta,
                                    std::int64_t r, std::int64_t trials, std::uint64_t seed);

// Exact E[sampled meta-gradient] for a two-atom support, summing over the
// binomial count of atom 0.
Tensor binomial_expected_meta_grad(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r);

}  // namespace krrst

#endif  // KRRST_BIAS_DEMO_HPP_

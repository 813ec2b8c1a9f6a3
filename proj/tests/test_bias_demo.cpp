#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "krrst/bias_demo.hpp"
#include "krrst/errors.hpp"
#include "oracles.hpp"

using namespace krrst;

namespace {

ToyInstance designed() { return load_toy_instance(std::filesystem::path(KRRST_DATA_DIR) / "designed_instance.json"); }

// A_j = (X . xi_j) P
Tensor design(const Tensor& x, const std::vector<double>& mask, const Tensor& p) {
  Tensor xm = x;
  for (std::int64_t i = 0; i < x.dim(0); ++i)
    for (std::int64_t c = 0; c < x.dim(1); ++c) xm(i, c) *= mask[static_cast<std::size_t>(c)];
  return oracle::matmul(xm, p);
}

struct InnerOracle {
  Tensor h_inv;  // d_theta x d_theta
  Tensor theta;  // d_theta x 1
};

InnerOracle inner_oracle(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& w) {
  Tensor h = Tensor::eye(pb.d_theta);
  for (auto& v : h.data()) v *= pb.mu;
  Tensor b = Tensor::zeros({pb.d_theta, 1});
  for (std::size_t j = 0; j < pb.atoms.size(); ++j) {
    const Tensor a = design(x_s, pb.atoms[j].mask, pb.projection);
    const Tensor ata = oracle::matmul(a.transposed(), a);
    Tensor c({pb.m(), 1}, pb.atoms[j].c_s);
    const Tensor atc = oracle::matmul(a.transposed(), c);
    for (std::int64_t i = 0; i < h.numel(); ++i) h[i] += w[j] * ata[i];
    for (std::int64_t i = 0; i < b.numel(); ++i) b[i] += w[j] * atc[i];
  }
  InnerOracle o;
  o.h_inv = oracle::inverse(h);
  o.theta = oracle::matmul(o.h_inv, b);
  return o;
}

Tensor outer_grad_oracle(const ToySSLProblem& pb, const Tensor& theta) {
  Tensor v = theta;
  for (auto& e : v.data()) e *= 2 * pb.mu;
  for (const auto& at : pb.atoms) {
    const Tensor a = design(pb.x_t, at.mask, pb.projection);
    Tensor r = oracle::matmul(a, theta);
    for (std::int64_t i = 0; i < r.numel(); ++i) r[i] -= at.c_t[static_cast<std::size_t>(i)];
    const Tensor g = oracle::matmul(a.transposed(), r);
    for (std::int64_t i = 0; i < v.numel(); ++i) v[i] += 2 * at.p * g[i];
  }
  return v;
}

// G = sum_j w_j [(c_j - A_j theta)(P u)^T - (A_j u)(P theta)^T] . xi_j with u = H^{-1} v
Tensor meta_grad_oracle(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& w) {
  const auto in = inner_oracle(pb, x_s, w);
  const Tensor u = oracle::matmul(in.h_inv, outer_grad_oracle(pb, in.theta));
  const Tensor pu = oracle::matmul(pb.projection, u), pt = oracle::matmul(pb.projection, in.theta);
  Tensor g = Tensor::zeros(x_s.shape());
  for (std::size_t j = 0; j < pb.atoms.size(); ++j) {
    const Tensor a = design(x_s, pb.atoms[j].mask, pb.projection);
    const Tensor at = oracle::matmul(a, in.theta), au = oracle::matmul(a, u);
    for (std::int64_t i = 0; i < x_s.dim(0); ++i)
      for (std::int64_t c = 0; c < x_s.dim(1); ++c) {
        const double r = pb.atoms[j].c_s[static_cast<std::size_t>(i)] - at[i];
        g(i, c) += w[j] * pb.atoms[j].mask[static_cast<std::size_t>(c)] * (r * pu[c] - au[i] * pt[c]);
      }
  }
  return g;
}

std::vector<double> probs(const ToySSLProblem& pb) {
  std::vector<double> p;
  for (const auto& a : pb.atoms) p.push_back(a.p);
  return p;
}

}  // namespace

TEST_CASE("designed instance loads and validates") {
  const auto inst = designed();
  CHECK(inst.problem.m() == 2);
  CHECK(inst.problem.n() == 3);
  CHECK(inst.problem.atoms.size() == 2);
}

TEST_CASE("malformed instances are format errors") {
  auto j = designed().problem.to_json(designed().x_s);
  auto missing = j;
  missing.erase("mu");
  CHECK_THROWS_AS(toy_from_json(missing), FormatError);
  auto singular = j;
  singular["mu"] = 0.0;
  singular["atoms"][0]["mask"] = {1, 0, 0, 0};
  CHECK_THROWS_AS(toy_from_json(singular), FormatError);
}

TEST_CASE("exact meta-gradient matches the matrix-algebra oracle and finite differences") {
  const auto inst = designed();
  const auto& pb = inst.problem;
  const Tensor g = exact_meta_grad(pb, inst.x_s);
  CHECK(max_abs_diff(g, meta_grad_oracle(pb, inst.x_s, probs(pb))) < 1e-10);
  const Tensor num = oracle::numeric_grad(
      [&](const Tensor& x) { return outer_objective(pb, inner_solution(pb, x, probs(pb))); }, inst.x_s, 1e-5);
  CHECK(max_abs_diff(g, num) < 1e-7);
}

TEST_CASE("theta Jacobian matches the brute-force coordinate oracle") {
  const auto inst = designed();
  const auto& pb = inst.problem;
  const std::vector<double> w{0.5, 0.5};
  const auto alpha = theta_jacobian(pb, inst.x_s, w);
  REQUIRE(alpha.size() == static_cast<std::size_t>(pb.d_theta));
  // d theta / d X_ab = H^{-1} (d b - d H theta), perturbing one coordinate at a time.
  const auto in = inner_oracle(pb, inst.x_s, w);
  for (std::int64_t a = 0; a < pb.m(); ++a)
    for (std::int64_t c = 0; c < pb.d_x; ++c) {
      Tensor rhs = Tensor::zeros({pb.d_theta, 1});
      for (std::size_t j = 0; j < pb.atoms.size(); ++j) {
        const Tensor aj = design(inst.x_s, pb.atoms[j].mask, pb.projection);
        Tensor dx = Tensor::zeros(inst.x_s.shape());
        dx(a, c) = 1.0;
        const Tensor daj = design(dx, pb.atoms[j].mask, pb.projection);
        Tensor cs({pb.m(), 1}, pb.atoms[j].c_s);
        const Tensor db = oracle::matmul(daj.transposed(), cs);
        const Tensor dh_theta = oracle::matmul(daj.transposed(), oracle::matmul(aj, in.theta));
        const Tensor dh_theta2 = oracle::matmul(aj.transposed(), oracle::matmul(daj, in.theta));
        for (std::int64_t k = 0; k < pb.d_theta; ++k) rhs[k] += w[j] * (db[k] - dh_theta[k] - dh_theta2[k]);
      }
      const Tensor d = oracle::matmul(in.h_inv, rhs);
      for (std::int64_t k = 0; k < pb.d_theta; ++k) CHECK(std::abs(alpha[static_cast<std::size_t>(k)](a, c) - d[k]) < 1e-10);
    }
}

TEST_CASE("sampled meta-gradients equal the oracle on every trial") {
  const auto inst = designed();
  Rng rng(0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = sampled_meta_grad(inst.problem, inst.x_s, 2, rng);
    const auto w = draw_weights(s.draws, inst.problem.atoms.size());
    CHECK(max_abs_diff(s.grad, meta_grad_oracle(inst.problem, inst.x_s, w)) < 1e-10);
  }
}

TEST_CASE("a single-atom support makes the sampled gradient exact") {
  auto inst = designed();
  inst.problem.atoms.resize(1);
  inst.problem.atoms[0].p = 1.0;
  Rng rng(1);
  const Tensor exact = exact_meta_grad(inst.problem, inst.x_s);
  for (int trial = 0; trial < 5; ++trial)
    CHECK(max_abs_diff(sampled_meta_grad(inst.problem, inst.x_s, 3, rng).grad, exact) < 1e-10);
}

TEST_CASE("draws in exact proportion reproduce the exact gradient") {
  const auto inst = designed();
  // p = (0.3, 0.7) and r = 10
  const std::vector<std::int64_t> draws{0, 0, 0, 1, 1, 1, 1, 1, 1, 1};
  CHECK(max_abs_diff(sampled_meta_grad_from_draws(inst.problem, inst.x_s, draws), exact_meta_grad(inst.problem, inst.x_s)) <
        1e-10);
}

TEST_CASE("zero targets give a zero meta-gradient") {
  auto inst = designed();
  for (auto& a : inst.problem.atoms) {
    std::fill(a.c_s.begin(), a.c_s.end(), 0.0);
    std::fill(a.c_t.begin(), a.c_t.end(), 0.0);
  }
  CHECK(frobenius_norm(exact_meta_grad(inst.problem, inst.x_s)) == 0.0);
}

TEST_CASE("a constant outer objective leaves no bias to find") {
  auto inst = designed();
  inst.problem.mu = 0.0;
  for (auto& v : inst.problem.x_t.data()) v = 0.0;
  const auto rep = bias_estimate(inst.problem, inst.x_s, 2, 300, 0);
  CHECK(rep.flagged() == 0);
  CHECK(rep.max_abs_bias() == 0.0);
}

TEST_CASE("expected bias shrinks as the sample count grows") {
  const auto inst = designed();
  const Tensor exact = exact_meta_grad(inst.problem, inst.x_s);
  double prev = 1e300;
  for (std::int64_t r : {2, 8, 32, 128}) {
    const double b = max_abs_diff(binomial_expected_meta_grad(inst.problem, inst.x_s, r), exact);
    CHECK(b <= prev);
    prev = b;
  }
  CHECK(prev < 0.02);
}

TEST_CASE("Monte Carlo mean agrees with the binomial expectation") {
  const auto inst = designed();
  const auto rep = bias_estimate(inst.problem, inst.x_s, 2, 4000, 3);
  const Tensor expected = binomial_expected_meta_grad(inst.problem, inst.x_s, 2);
  for (std::int64_t i = 0; i < expected.numel(); ++i) CHECK(std::abs(rep.mean[i] - expected[i]) <= 4.5 * rep.stderr_[i]);
  CHECK(rep.flagged() > 0);
}

TEST_CASE("plain gradient stays unbiased and the covariance decomposition closes") {
  const auto inst = designed();
  const auto plain = plain_gradient_check(inst.problem, inst.x_s, {0.2, -0.1, 0.3}, 2, 2000, 5);
  CHECK(plain.within(3.0));
  const auto dec = covariance_decomposition_check(inst.problem, inst.x_s, 2, 2000, 6);
  CHECK(dec.within(4.0));
}

TEST_CASE("bias report serializes") {
  const auto inst = designed();
  const auto rep = bias_estimate(inst.problem, inst.x_s, 2, 50, 0);
  const auto j = rep.to_json();
  CHECK(j.at("trials").get<std::int64_t>() == 50);
  const auto csv = rep.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + rep.exact.numel());
}

#include "krrst/bias_demo.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>
#include <sstream>

#include "krrst/bundle.hpp"
#include "krrst/errors.hpp"

namespace krrst {

using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd to_eigen(const Tensor& t) {
  MatrixXd m(t.dim(0), t.dim(1));
  for (std::int64_t i = 0; i < t.dim(0); ++i)
    for (std::int64_t j = 0; j < t.dim(1); ++j) m(i, j) = t(i, j);
  return m;
}

Tensor to_tensor(const MatrixXd& m) {
  Tensor t({m.rows(), m.cols()});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t(i, j) = m(i, j);
  return t;
}

VectorXd to_vec(const std::vector<double>& v) { return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())); }
std::vector<double> from_vec(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

// (X . xi) P
MatrixXd masked_design(const MatrixXd& x, const std::vector<double>& mask, const MatrixXd& p) {
  MatrixXd xm = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c) xm.col(c) *= mask[static_cast<std::size_t>(c)];
  return xm * p;
}

// Closed-form inner problem at weights w: H theta = b.
struct InnerSystem {
  std::vector<MatrixXd> a;  // per atom design on X_s
  MatrixXd h;
  VectorXd b;
  Eigen::LLT<MatrixXd> llt;
  VectorXd theta;
};

InnerSystem build_inner(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& w) {
  if (w.size() != pb.atoms.size()) throw ContractError("toy: weight count != support size");
  const MatrixXd x = to_eigen(x_s), p = to_eigen(pb.projection);
  InnerSystem s;
  s.h = pb.mu * MatrixXd::Identity(pb.d_theta, pb.d_theta);
  s.b = VectorXd::Zero(pb.d_theta);
  for (std::size_t j = 0; j < pb.atoms.size(); ++j) {
    s.a.push_back(masked_design(x, pb.atoms[j].mask, p));
    if (w[j] == 0.0) continue;
    s.h += w[j] * s.a[j].transpose() * s.a[j];
    s.b += w[j] * s.a[j].transpose() * to_vec(pb.atoms[j].c_s);
  }
  s.llt.compute(s.h);
  bool ok = s.llt.info() == Eigen::Success;
  if (ok) {
    const MatrixXd l = s.llt.matrixL();
    // Relative pivot floor: a numerically rank-deficient Hessian is singular here.
    const double scale = std::max(s.h.diagonal().cwiseAbs().maxCoeff(), 1e-300);
    for (Eigen::Index i = 0; i < l.rows(); ++i) ok = ok && l(i, i) * l(i, i) > 1e-12 * scale;
  }
  if (!ok) throw SingularSystemError("toy: inner Hessian is not positive definite");
  s.theta = s.llt.solve(s.b);
  return s;
}

VectorXd outer_grad(const ToySSLProblem& pb, const VectorXd& theta) {
  const MatrixXd xt = to_eigen(pb.x_t), p = to_eigen(pb.projection);
  VectorXd g = 2.0 * pb.mu * theta;
  for (const auto& at : pb.atoms) {
    const MatrixXd bm = masked_design(xt, at.mask, p);
    g += 2.0 * at.p * bm.transpose() * (bm * theta - to_vec(at.c_t));
  }
  return g;
}

}  // namespace

void ToySSLProblem::validate() const {
  if (d_theta < 1 || d_x < 1) throw ContractError("toy: dimensions must be positive");
  if (projection.rank() != 2 || projection.dim(0) != d_x || projection.dim(1) != d_theta) {
    throw ContractError("toy: projection must be d_x x d_theta, got " + shape_str(projection.shape()));
  }
  if (x_t.rank() != 2 || x_t.dim(1) != d_x) throw ContractError("toy: x_t must be n x d_x");
  if (atoms.empty()) throw ContractError("toy: empty augmentation support");
  if (mu < 0.0) throw ContractError("toy: mu must be non-negative");
  double total = 0.0;
  for (const auto& a : atoms) {
    if (static_cast<std::int64_t>(a.mask.size()) != d_x) throw ContractError("toy: mask length != d_x");
    for (double v : a.mask)
      if (v != 0.0 && v != 1.0) throw ContractError("toy: mask entries must be 0 or 1");
    if (!(a.p > 0.0)) throw ContractError("toy: atom probabilities must be positive");
    if (static_cast<std::int64_t>(a.c_s.size()) != m()) throw ContractError("toy: c_s lengths differ across atoms");
    if (static_cast<std::int64_t>(a.c_t.size()) != n()) throw ContractError("toy: c_t length != rows of x_t");
    total += a.p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ContractError("toy: atom probabilities must sum to 1");
}

json ToySSLProblem::to_json(const Tensor& x_s) const {
  auto rows = [](const Tensor& t) {
    json out = json::array();
    for (std::int64_t i = 0; i < t.dim(0); ++i) {
      json row = json::array();
      for (std::int64_t j = 0; j < t.dim(1); ++j) row.push_back(t(i, j));
      out.push_back(row);
    }
    return out;
  };
  json atoms_json = json::array();
  for (const auto& a : atoms) atoms_json.push_back({{"mask", a.mask}, {"p", a.p}, {"c_s", a.c_s}, {"c_t", a.c_t}});
  return {{"d_theta", d_theta}, {"d_x", d_x},           {"mu", mu},
          {"projection", rows(projection)}, {"x_s", rows(x_s)}, {"x_t", rows(x_t)},
          {"atoms", atoms_json}};
}

ToyInstance toy_from_json(const json& j) {
  auto matrix = [](const json& rows) {
    std::vector<std::vector<double>> v = rows.get<std::vector<std::vector<double>>>();
    if (v.empty()) throw FormatError("toy instance: empty matrix");
    Tensor t({static_cast<std::int64_t>(v.size()), static_cast<std::int64_t>(v.front().size())});
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i].size() != v.front().size()) throw FormatError("toy instance: ragged matrix");
      for (std::size_t c = 0; c < v[i].size(); ++c) t(static_cast<std::int64_t>(i), static_cast<std::int64_t>(c)) = v[i][c];
    }
    return t;
  };
  ToyInstance inst;
  auto& pb = inst.problem;
  try {
    pb.d_theta = j.at("d_theta").get<std::int64_t>();
    pb.d_x = j.at("d_x").get<std::int64_t>();
    pb.mu = j.at("mu").get<double>();
    pb.projection = matrix(j.at("projection"));
    pb.x_t = matrix(j.at("x_t"));
    inst.x_s = matrix(j.at("x_s"));
    for (const auto& a : j.at("atoms")) {
      pb.atoms.push_back({a.at("mask").get<std::vector<double>>(), a.at("p").get<double>(),
                          a.at("c_s").get<std::vector<double>>(), a.at("c_t").get<std::vector<double>>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("toy instance: ") + e.what());
  }
  try {
    pb.validate();
    if (inst.x_s.dim(1) != pb.d_x || inst.x_s.dim(0) != pb.m()) throw ContractError("toy: x_s must be m x d_x");
    for (std::size_t k = 0; k < pb.atoms.size(); ++k) {
      std::vector<double> w(pb.atoms.size(), 0.0);
      w[k] = 1.0;
      build_inner(pb, inst.x_s, w);
    }
  } catch (const ContractError& e) {
    throw FormatError(std::string("toy instance: ") + e.what());
  } catch (const SingularSystemError& e) {
    throw FormatError(std::string("toy instance: single-atom Hessian not positive definite (") + e.what() + ")");
  }
  return inst;
}

ToyInstance load_toy_instance(const std::filesystem::path& path) { return toy_from_json(read_json(path)); }

std::vector<double> inner_solution(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& weights) {
  return from_vec(build_inner(pb, x_s, weights).theta);
}

double outer_objective(const ToySSLProblem& pb, const std::vector<double>& theta) {
  const MatrixXd xt = to_eigen(pb.x_t), p = to_eigen(pb.projection);
  const VectorXd th = to_vec(theta);
  double l = pb.mu * th.squaredNorm();
  for (const auto& at : pb.atoms) l += at.p * (masked_design(xt, at.mask, p) * th - to_vec(at.c_t)).squaredNorm();
  return l;
}

std::vector<double> outer_theta_grad(const ToySSLProblem& pb, const std::vector<double>& theta) {
  return from_vec(outer_grad(pb, to_vec(theta)));
}

Tensor meta_grad_weighted(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& weights) {
  const auto s = build_inner(pb, x_s, weights);
  const MatrixXd p = to_eigen(pb.projection);
  const VectorXd u = s.llt.solve(outer_grad(pb, s.theta));
  const VectorXd pu = p * u, pt = p * s.theta;
  MatrixXd g = MatrixXd::Zero(x_s.dim(0), x_s.dim(1));
  for (std::size_t j = 0; j < pb.atoms.size(); ++j) {
    if (weights[j] == 0.0) continue;
    const auto& a = s.a[j];
    MatrixXd term = (to_vec(pb.atoms[j].c_s) - a * s.theta) * pu.transpose() - (a * u) * pt.transpose();
    for (Eigen::Index c = 0; c < term.cols(); ++c) term.col(c) *= pb.atoms[j].mask[static_cast<std::size_t>(c)];
    g += weights[j] * term;
  }
  return to_tensor(g);
}

Tensor exact_meta_grad(const ToySSLProblem& pb, const Tensor& x_s) {
  std::vector<double> w;
  for (const auto& a : pb.atoms) w.push_back(a.p);
  try {
    return meta_grad_weighted(pb, x_s, w);
  } catch (const SingularSystemError& e) {
    throw ContractError(std::string("exact_meta_grad: ") + e.what());
  }
}

std::vector<double> draw_weights(const std::vector<std::int64_t>& draws, std::size_t support) {
  if (draws.empty()) throw ContractError("draw_weights: r must be >= 1");
  std::vector<double> w(support, 0.0);
  for (auto d : draws) {
    if (d < 0 || static_cast<std::size_t>(d) >= support) throw ContractError("draw_weights: atom index out of range");
    w[static_cast<std::size_t>(d)] += 1.0;
  }
  for (auto& v : w) v /= static_cast<double>(draws.size());
  return w;
}

Tensor sampled_meta_grad_from_draws(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<std::int64_t>& draws) {
  return meta_grad_weighted(pb, x_s, draw_weights(draws, pb.atoms.size()));
}

namespace {

std::vector<std::int64_t> draw_atoms(const ToySSLProblem& pb, std::int64_t r, Rng& rng) {
  std::vector<std::int64_t> d(static_cast<std::size_t>(r));
  for (auto& v : d) {
    const double u = rng.uniform();
    double acc = 0.0;
    v = static_cast<std::int64_t>(pb.atoms.size()) - 1;
    for (std::size_t j = 0; j < pb.atoms.size(); ++j) {
      acc += pb.atoms[j].p;
      if (u < acc) {
        v = static_cast<std::int64_t>(j);
        break;
      }
    }
  }
  return d;
}

constexpr std::int64_t kMaxResamples = 1000;

}  // namespace

SampledGrad sampled_meta_grad(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r, Rng& rng) {
  if (r < 1) throw ContractError("sampled_meta_grad: r must be >= 1");
  SampledGrad out;
  for (;;) {
    out.draws = draw_atoms(pb, r, rng);
    try {
      out.grad = sampled_meta_grad_from_draws(pb, x_s, out.draws);
      return out;
    } catch (const SingularSystemError&) {
      if (++out.resamples > kMaxResamples) throw;
    }
  }
}

std::vector<Tensor> theta_jacobian(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& weights) {
  const auto s = build_inner(pb, x_s, weights);
  const MatrixXd p = to_eigen(pb.projection);
  const auto m = x_s.dim(0), dx = x_s.dim(1);
  std::vector<Tensor> alpha(static_cast<std::size_t>(pb.d_theta), Tensor({m, dx}));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t c = 0; c < dx; ++c) {
      MatrixXd dh = MatrixXd::Zero(pb.d_theta, pb.d_theta);
      VectorXd db = VectorXd::Zero(pb.d_theta);
      for (std::size_t j = 0; j < pb.atoms.size(); ++j) {
        const double mk = pb.atoms[j].mask[static_cast<std::size_t>(c)];
        if (weights[j] == 0.0 || mk == 0.0) continue;
        // dA has a single non-zero row i equal to P[c, :].
        const VectorXd row = p.row(c).transpose();
        const VectorXd arow = s.a[j].row(i).transpose();
        const MatrixXd outer = row * arow.transpose();
        dh += weights[j] * (outer + outer.transpose());
        db += weights[j] * row * pb.atoms[j].c_s[static_cast<std::size_t>(i)];
      }
      const VectorXd dtheta = s.llt.solve(db - dh * s.theta);
      for (std::int64_t k = 0; k < pb.d_theta; ++k) alpha[static_cast<std::size_t>(k)](i, c) = dtheta(k);
    }
  return alpha;
}

// ---- Monte-Carlo harness --------------------------------------------------------------------

namespace {

struct TrialSet {
  std::vector<Tensor> grads;
  std::vector<std::vector<double>> v;
  std::vector<std::vector<Tensor>> alpha;
  std::int64_t resamples = 0;
};

TrialSet run_trials(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r, std::int64_t trials,
                    std::uint64_t seed, bool with_alpha) {
  if (trials < 2) throw ContractError("bias harness: trials must be >= 2");
  pb.validate();
  Rng master(seed);
  TrialSet t;
  for (std::int64_t k = 0; k < trials; ++k) {
    Rng rng = master.split();
    auto s = sampled_meta_grad(pb, x_s, r, rng);
    t.resamples += s.resamples;
    t.grads.push_back(std::move(s.grad));
    if (with_alpha) {
      const auto w = draw_weights(s.draws, pb.atoms.size());
      t.v.push_back(outer_theta_grad(pb, inner_solution(pb, x_s, w)));
      t.alpha.push_back(theta_jacobian(pb, x_s, w));
    }
  }
  return t;
}

// Mean and standard error of the mean per coordinate.
std::pair<Tensor, Tensor> mean_se(const std::vector<Tensor>& xs) {
  const auto n = static_cast<double>(xs.size());
  Tensor mean(xs.front().shape()), se(xs.front().shape());
  for (const auto& x : xs)
    for (std::int64_t i = 0; i < x.numel(); ++i) mean[i] += x[i] / n;
  for (const auto& x : xs)
    for (std::int64_t i = 0; i < x.numel(); ++i) se[i] += (x[i] - mean[i]) * (x[i] - mean[i]);
  for (std::int64_t i = 0; i < se.numel(); ++i) se[i] = std::sqrt(se[i] / (n - 1.0) / n);
  return {mean, se};
}

struct CovTerms {
  Tensor product;
  Tensor covariance;
  std::vector<Tensor> by_direction;
  std::vector<Tensor> se_by_direction;
};

CovTerms covariance_terms(const TrialSet& t, std::int64_t d_theta) {
  const auto n = static_cast<double>(t.grads.size());
  const Shape shape = t.grads.front().shape();
  CovTerms c{Tensor(shape), Tensor(shape), {}, {}};
  for (std::int64_t k = 0; k < d_theta; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    double v_mean = 0.0;
    Tensor a_mean(shape);
    for (std::size_t s = 0; s < t.v.size(); ++s) {
      v_mean += t.v[s][ku] / n;
      for (std::int64_t i = 0; i < a_mean.numel(); ++i) a_mean[i] += t.alpha[s][ku][i] / n;
    }
    Tensor cov(shape), cov_sq(shape);
    for (std::size_t s = 0; s < t.v.size(); ++s) {
      const double dv = t.v[s][ku] - v_mean;
      for (std::int64_t i = 0; i < cov.numel(); ++i) {
        const double prod = dv * (t.alpha[s][ku][i] - a_mean[i]);
        cov[i] += prod;
        cov_sq[i] += prod * prod;
      }
    }
    Tensor se(shape);
    for (std::int64_t i = 0; i < cov.numel(); ++i) {
      const double mean_prod = cov[i] / n;
      se[i] = std::sqrt(std::max(cov_sq[i] / n - mean_prod * mean_prod, 0.0) / (n - 1.0));
      cov[i] /= (n - 1.0);
      c.product[i] += v_mean * a_mean[i];
      c.covariance[i] += cov[i];
    }
    c.by_direction.push_back(cov);
    c.se_by_direction.push_back(se);
  }
  return c;
}

}  // namespace

std::int64_t BiasReport::flagged() const {
  std::int64_t k = 0;
  for (bool f : flags) k += f;
  return k;
}

double BiasReport::max_abs_bias() const {
  double mx = 0.0;
  for (std::int64_t i = 0; i < bias.numel(); ++i) mx = std::max(mx, std::abs(bias[i]));
  return mx;
}

json BiasReport::to_json() const {
  auto flat = [](const Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  return {{"shape", exact.shape()},
          {"exact", flat(exact)},
          {"mean", flat(mean)},
          {"stderr", flat(stderr_)},
          {"bias", flat(bias)},
          {"covariance", flat(covariance)},
          {"flags", flags},
          {"flagged", flagged()},
          {"max_abs_bias", max_abs_bias()},
          {"trials", trials},
          {"r", r},
          {"seed", seed},
          {"resamples", resamples}};
}

std::string BiasReport::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "row,col,exact,mean,se,bias,flag\n";
  const auto cols = exact.dim(1);
  for (std::int64_t i = 0; i < exact.numel(); ++i) {
    os << i / cols << ',' << i % cols << ',' << exact[i] << ',' << mean[i] << ',' << stderr_[i] << ',' << bias[i]
       << ',' << (flags[static_cast<std::size_t>(i)] ? 1 : 0) << '\n';
  }
  return os.str();
}

BiasReport bias_estimate(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r, std::int64_t trials,
                         std::uint64_t seed) {
  const auto t = run_trials(pb, x_s, r, trials, seed, true);
  BiasReport rep;
  rep.exact = exact_meta_grad(pb, x_s);
  std::tie(rep.mean, rep.stderr_) = mean_se(t.grads);
  rep.bias = Tensor(rep.exact.shape());
  for (std::int64_t i = 0; i < rep.bias.numel(); ++i) {
    rep.bias[i] = rep.mean[i] - rep.exact[i];
    rep.flags.push_back(std::abs(rep.bias[i]) > 3.0 * rep.stderr_[i]);
  }
  rep.covariance = covariance_terms(t, pb.d_theta).covariance;
  rep.trials = trials;
  rep.r = r;
  rep.seed = seed;
  rep.resamples = t.resamples;
  return rep;
}

bool DecompositionCheck::within(double k_se) const {
  for (std::int64_t i = 0; i < residual.numel(); ++i)
    if (residual[i] > k_se * stderr_[i]) return false;
  return true;
}

DecompositionCheck covariance_decomposition_check(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r,
                                                  std::int64_t trials, std::uint64_t seed) {
  const auto t = run_trials(pb, x_s, r, trials, seed, true);
  DecompositionCheck d;
  std::tie(d.mean_grad, d.stderr_) = mean_se(t.grads);
  auto c = covariance_terms(t, pb.d_theta);
  d.product = std::move(c.product);
  d.covariance = std::move(c.covariance);
  d.cov_by_direction = std::move(c.by_direction);
  d.cov_stderr_by_direction = std::move(c.se_by_direction);
  d.residual = Tensor(d.mean_grad.shape());
  for (std::int64_t i = 0; i < d.residual.numel(); ++i) {
    d.residual[i] = std::abs(d.mean_grad[i] - (d.product[i] + d.covariance[i]));
  }
  d.trials = trials;
  return d;
}

bool PlainGradCheck::within(double k_se) const {
  for (std::size_t i = 0; i < exact.size(); ++i)
    if (std::abs(mean[i] - exact[i]) > k_se * stderr_[i]) return false;
  return true;
}

PlainGradCheck plain_gradient_check(const ToySSLProblem& pb, const Tensor& x_s, const std::vector<double>& theta,
                                    std::int64_t r, std::int64_t trials, std::uint64_t seed) {
  if (trials < 2 || r < 1) throw ContractError("plain_gradient_check: trials >= 2 and r >= 1 required");
  pb.validate();
  const MatrixXd x = to_eigen(x_s), p = to_eigen(pb.projection);
  const VectorXd th = to_vec(theta);
  std::vector<VectorXd> atom_grad;
  for (const auto& at : pb.atoms) {
    const MatrixXd a = masked_design(x, at.mask, p);
    atom_grad.push_back(2.0 * a.transpose() * (a * th - to_vec(at.c_s)) + 2.0 * pb.mu * th);
  }
  PlainGradCheck out;
  VectorXd exact = VectorXd::Zero(pb.d_theta);
  for (std::size_t j = 0; j < pb.atoms.size(); ++j) exact += pb.atoms[j].p * atom_grad[j];
  out.exact = from_vec(exact);
  std::vector<Tensor> samples;
  Rng master(seed);
  for (std::int64_t k = 0; k < trials; ++k) {
    Rng rng = master.split();
    const auto w = draw_weights(draw_atoms(pb, r, rng), pb.atoms.size());
    VectorXd g = VectorXd::Zero(pb.d_theta);
    for (std::size_t j = 0; j < w.size(); ++j) g += w[j] * atom_grad[j];
    samples.push_back(Tensor({1, pb.d_theta}, from_vec(g)));
  }
  const auto [mean, se] = mean_se(samples);
  out.mean.assign(mean.data().begin(), mean.data().end());
  out.stderr_.assign(se.data().begin(), se.data().end());
  return out;
}

Tensor binomial_expected_meta_grad(const ToySSLProblem& pb, const Tensor& x_s, std::int64_t r) {
  if (pb.atoms.size() != 2) throw ContractError("binomial expectation needs exactly two atoms");
  if (r < 1) throw ContractError("binomial expectation: r must be >= 1");
  const double p = pb.atoms[0].p;
  Tensor acc(x_s.shape());
  for (std::int64_t k = 0; k <= r; ++k) {
    const double log_pmf = std::lgamma(static_cast<double>(r) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
                           std::lgamma(static_cast<double>(r - k) + 1.0) + static_cast<double>(k) * std::log(p) +
                           static_cast<double>(r - k) * std::log1p(-p);
    const double pmf = std::exp(log_pmf);
    if (pmf < 1e-300) continue;
    const double w0 = static_cast<double>(k) / static_cast<double>(r);
    const Tensor g = meta_grad_weighted(pb, x_s, {w0, 1.0 - w0});
    for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += pmf * g[i];
  }
  return acc;
}

}  // namespace krrst

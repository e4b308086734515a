#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "relfeat/common.hpp"
#include "relfeat/descriptor.hpp"

namespace relfeat {

/// Euclidean projection of v onto {w : ||w||_1 <= radius}. Sort-based soft threshold on |v|.
inline std::vector<double> project_l1_ball(std::span<const double> v, double radius) {
  if (radius < 0.0) throw std::invalid_argument("project_l1_ball: radius must be >= 0");
  std::vector<double> out(v.begin(), v.end());
  double l1 = 0.0;
  for (double x : v) l1 += std::abs(x);
  if (l1 <= radius) return out;
  if (radius == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return out;
  }
  std::vector<double> u(v.size());
  std::transform(v.begin(), v.end(), u.begin(), [](double x) { return std::abs(x); });
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumsum += u[j];
    const double t = (cumsum - radius) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  for (double& x : out) {
    const double mag = std::abs(x) - theta;
    x = mag > 0.0 ? std::copysign(mag, x) : 0.0;
  }
  return out;
}

inline Eigen::VectorXd project_l1_ball(const Eigen::VectorXd& v, double radius) {
  const auto p = project_l1_ball(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())), radius);
  return Eigen::Map<const Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
}

/// Spectral projected gradient settings. Defaults follow common SPG practice.
struct SpgOptions {
  double step_min = 1e-10;
  double step_max = 1e10;
  int memory = 10;                   // nonmonotone line-search window
  double sufficient_decrease = 1e-4;
  double tolerance = 1e-6;           // sup-norm of the projected gradient
  int max_iterations = 500;
  int max_backtracks = 60;
  unsigned threads = 1;
  // Called with (class, iteration, iterate) after every accepted step; used by tests.
  std::function<void(std::size_t, int, const Eigen::VectorXd&)> observer;
};

struct SpgResult {
  Eigen::VectorXd w;
  int iterations = 0;
  double objective = 0.0;
  double pg_norm = 0.0;
};

/// min ||A^T w - y||^2 s.t. ||w||_1 <= mu, with Q = A A^T and b = A y precomputed.
/// Starts at w = 0; every iterate is a convex combination of feasible points.
inline SpgResult spg_l1_least_squares(const Eigen::MatrixXd& Q, const Eigen::VectorXd& b, double yy, double mu,
                                      const SpgOptions& opt, std::size_t cls = 0) {
  const Eigen::Index m = Q.rows();
  auto objective = [&](const Eigen::VectorXd& w, const Eigen::VectorXd& Qw) { return w.dot(Qw) - 2.0 * b.dot(w) + yy; };
  auto pg_norm = [&](const Eigen::VectorXd& w, const Eigen::VectorXd& g) {
    return (project_l1_ball(Eigen::VectorXd(w - g), mu) - w).lpNorm<Eigen::Infinity>();
  };

  SpgResult r;
  r.w = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd Qw = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd g = -2.0 * b;
  double f = objective(r.w, Qw);
  std::deque<double> history{f};
  r.pg_norm = pg_norm(r.w, g);
  double step = r.pg_norm > 0.0 ? std::clamp(1.0 / r.pg_norm, opt.step_min, opt.step_max) : 1.0;

  while (r.pg_norm > opt.tolerance && r.iterations < opt.max_iterations) {
    const Eigen::VectorXd d = project_l1_ball(Eigen::VectorXd(r.w - step * g), mu) - r.w;
    const Eigen::VectorXd Qd = Q * d;
    const double gtd = g.dot(d);
    if (!(gtd < 0.0)) break;  // no descent direction left at working precision
    const double f_ref = *std::max_element(history.begin(), history.end());
    double lambda = 1.0;
    double f_new = 0.0;
    for (int bt = 0;; ++bt) {
      // f(w + lambda d) expanded so Q is applied once per iteration.
      f_new = f + lambda * gtd + lambda * lambda * d.dot(Qd);
      if (f_new <= f_ref + opt.sufficient_decrease * lambda * gtd || bt >= opt.max_backtracks) break;
      const double trial = -0.5 * lambda * lambda * gtd / (f_new - f - lambda * gtd);
      lambda = (trial >= 0.1 && trial <= 0.9 * lambda) ? trial : 0.5 * lambda;
    }
    const Eigen::VectorXd s = lambda * d;
    const Eigen::VectorXd y = 2.0 * lambda * Qd;  // g_new - g
    r.w += s;
    Qw += lambda * Qd;
    g += y;
    f = f_new;
    history.push_back(f);
    if (static_cast<int>(history.size()) > opt.memory) history.pop_front();
    ++r.iterations;
    if (opt.observer) opt.observer(cls, r.iterations, r.w);
    const double sty = s.dot(y);
    step = sty <= 0.0 ? opt.step_max : std::clamp(s.squaredNorm() / sty, opt.step_min, opt.step_max);
    r.pg_norm = pg_norm(r.w, g);
  }
  r.objective = objective(r.w, Qw);
  return r;
}

/// Sparse per-class relevance weights W (m x C) with the L1 budget they were fitted under.
struct RelevanceMatrix {
  using Entry = std::pair<std::size_t, double>;  // (flat descriptor index, weight)

  std::size_t m = 0;
  std::size_t classes = 0;
  double mu = 0.0;
  std::vector<std::vector<Entry>> columns;

  static constexpr double kDropBelow = 1e-12;

  std::size_t nnz(std::size_t j) const { return columns.at(j).size(); }
  double l1(std::size_t j) const {
    double s = 0.0;
    for (const auto& e : columns.at(j)) s += std::abs(e.second);
    return s;
  }
  std::vector<double> dense_column(std::size_t j) const {
    std::vector<double> w(m, 0.0);
    for (const auto& [i, v] : columns.at(j)) w[i] = v;
    return w;
  }
  /// Flat indices that are nonzero in any class, ascending.
  std::vector<std::size_t> support() const {
    std::vector<std::size_t> s;
    for (const auto& col : columns)
      for (const auto& e : col) s.push_back(e.first);
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }
  void set_column(std::size_t j, std::span<const double> w) {
    columns.at(j).clear();
    for (std::size_t i = 0; i < w.size(); ++i)
      if (std::abs(w[i]) >= kDropBelow) columns[j].emplace_back(i, w[i]);
  }

  friend bool operator==(const RelevanceMatrix&, const RelevanceMatrix&) = default;
};

struct SolverReport {
  std::vector<int> iterations;
  std::vector<double> class_objective;
  std::vector<double> pg_norm;
  double objective = 0.0;  // ||X^T W - L^T||_F^2
  double seconds = 0.0;
};

inline void check_finite(const Eigen::MatrixXd& M, const char* what) {
  if (!M.allFinite()) throw NumericError(std::string("solve_mu_lasso: ") + what + " contains non-finite values");
}

/// Matrix-form mu-lasso: per class j, min ||X^T w_j - l_j^T||^2 s.t. ||w_j||_1 <= mu.
inline std::pair<RelevanceMatrix, SolverReport> solve_mu_lasso(const Eigen::MatrixXd& X, const Eigen::MatrixXd& L,
                                                                double mu, const SpgOptions& opt = {}) {
  if (!(mu > 0.0)) throw std::invalid_argument("solve_mu_lasso: mu must be > 0");
  if (X.cols() != L.cols())
    throw std::invalid_argument("solve_mu_lasso: X has " + std::to_string(X.cols()) + " columns but L has " +
                                std::to_string(L.cols()));
  if (X.rows() == 0 || X.cols() == 0 || L.rows() == 0) throw std::invalid_argument("solve_mu_lasso: empty input");
  check_finite(X, "X");
  check_finite(L, "L");
  const auto start = std::chrono::steady_clock::now();
  const Eigen::MatrixXd Q = X * X.transpose();
  const auto classes = static_cast<std::size_t>(L.rows());
  std::vector<SpgResult> results(classes);
  parallel_for(classes, opt.threads, [&](std::size_t j) {
    const Eigen::VectorXd y = L.row(static_cast<Eigen::Index>(j)).transpose();
    results[j] = spg_l1_least_squares(Q, X * y, y.squaredNorm(), mu, opt, j);
  });

  RelevanceMatrix W;
  W.m = static_cast<std::size_t>(X.rows());
  W.classes = classes;
  W.mu = mu;
  W.columns.resize(classes);
  SolverReport rep;
  for (std::size_t j = 0; j < classes; ++j) {
    const auto& r = results[j];
    W.set_column(j, std::span<const double>(r.w.data(), static_cast<std::size_t>(r.w.size())));
    const Eigen::VectorXd resid = X.transpose() * r.w - L.row(static_cast<Eigen::Index>(j)).transpose();
    rep.iterations.push_back(r.iterations);
    rep.class_objective.push_back(resid.squaredNorm());
    rep.pg_norm.push_back(r.pg_norm);
    rep.objective += resid.squaredNorm();
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(W), rep};
}

inline std::pair<RelevanceMatrix, SolverReport> solve_mu_lasso(const DatasetMatrices& mats, double mu,
                                                                const SpgOptions& opt = {}) {
  return solve_mu_lasso(mats.X, mats.L, mu, opt);
}

struct RankedFeature {
  FeatureId feature;
  std::size_t index = 0;
  double weight = 0.0;
};

/// Nonzeros of w_j as features, by |weight| descending, ties by (layer, filter) ascending.
inline std::vector<RankedFeature> relevant_features(const RelevanceMatrix& W, std::size_t j,
                                                    const DescriptorLayout& layout) {
  if (j >= W.classes) throw std::out_of_range("relevant_features: class " + std::to_string(j) + " >= C");
  std::vector<RankedFeature> out;
  for (const auto& [i, w] : W.columns[j]) out.push_back({feature_of_index(layout, i), i, w});
  std::sort(out.begin(), out.end(), [](const RankedFeature& a, const RankedFeature& b) {
    if (std::abs(a.weight) != std::abs(b.weight)) return std::abs(a.weight) > std::abs(b.weight);
    return a.feature < b.feature;
  });
  return out;
}

// ---- W file: "m C mu" then "class flat_index weight" per nonzero --------------------------------

inline void write_relevance(std::ostream& out, const RelevanceMatrix& W) {
  out << W.m << ' ' << W.classes << ' ' << format_double(W.mu) << '\n';
  for (std::size_t j = 0; j < W.classes; ++j)
    for (const auto& [i, w] : W.columns[j]) out << j << ' ' << i << ' ' << format_double(w) << '\n';
}

inline RelevanceMatrix read_relevance(std::istream& in) {
  RelevanceMatrix W;
  if (!(in >> W.m >> W.classes >> W.mu)) throw DataError("W file: bad header (expected 'm C mu')");
  W.columns.resize(W.classes);
  std::size_t j = 0, i = 0;
  double w = 0.0;
  std::size_t line = 1;
  while (in >> j >> i >> w) {
    ++line;
    if (j >= W.classes || i >= W.m)
      throw DataError("W file: entry on line " + std::to_string(line) + " out of range");
    W.columns[j].emplace_back(i, w);
  }
  if (!in.eof()) throw DataError("W file: malformed entry after line " + std::to_string(line));
  for (auto& col : W.columns) std::sort(col.begin(), col.end());
  return W;
}

inline void save_relevance(const RelevanceMatrix& W, const std::filesystem::path& path) {
  std::ostringstream s;
  write_relevance(s, W);
  write_file(path, s.str());
}

inline RelevanceMatrix load_relevance(const std::filesystem::path& path) {
  std::istringstream s(read_file(path));
  return read_relevance(s);
}

}  // namespace relfeat

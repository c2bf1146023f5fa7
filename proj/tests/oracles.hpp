#pragma once

// Reference computations that share no code with the library: used to check
// the library against independent answers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <Eigen/Core>

namespace oracle {

// Smoothed spatial-median objective written out directly.
inline double pseudo_huber(const Eigen::VectorXd& p, const Eigen::MatrixXd& h, double eps) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < h.cols(); ++i) {
    double r2 = 0.0;
    for (Eigen::Index d = 0; d < h.rows(); ++d) r2 += (p(d) - h(d, i)) * (p(d) - h(d, i));
    total += std::sqrt(r2 + eps * eps) - eps;
  }
  return total;
}

inline double data_range(const Eigen::MatrixXd& h) {
  return (h.rowwise().maxCoeff() - h.rowwise().minCoeff()).maxCoeff();
}

// Argmin of the objective on the lattice {lo + i * step} that covers the
// shots' bounding box. D = 1 scans the full lattice; higher D zooms in from a
// coarse lattice (the objective is convex), keeping every evaluated point on
// the fine lattice.
inline Eigen::VectorXd grid_argmin(const Eigen::MatrixXd& h, double eps, double step) {
  const Eigen::Index dim = h.rows();
  const Eigen::VectorXd lo = h.rowwise().minCoeff();
  const Eigen::VectorXd hi = h.rowwise().maxCoeff();
  std::vector<long> n(static_cast<std::size_t>(dim));
  for (Eigen::Index d = 0; d < dim; ++d)
    n[static_cast<std::size_t>(d)] = static_cast<long>(std::ceil((hi(d) - lo(d)) / step));

  auto point = [&](const std::vector<long>& idx) {
    Eigen::VectorXd p(dim);
    for (Eigen::Index d = 0; d < dim; ++d) p(d) = lo(d) + static_cast<double>(idx[static_cast<std::size_t>(d)]) * step;
    return p;
  };

  // Window [first, last] per axis with a stride, in lattice units.
  std::vector<long> first(static_cast<std::size_t>(dim), 0);
  std::vector<long> last = n;
  long stride = dim == 1 ? 1 : std::max(1L, *std::max_element(n.begin(), n.end()) / 40);
  std::vector<long> best(static_cast<std::size_t>(dim), 0);
  while (true) {
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<long> idx = first;
    while (true) {
      const double v = pseudo_huber(point(idx), h, eps);
      if (v < best_val) {
        best_val = v;
        best = idx;
      }
      Eigen::Index d = 0;
      for (; d < dim; ++d) {
        auto& i = idx[static_cast<std::size_t>(d)];
        i += stride;
        if (i <= last[static_cast<std::size_t>(d)]) break;
        i = first[static_cast<std::size_t>(d)];
      }
      if (d == dim) break;
    }
    if (stride == 1) break;
    for (Eigen::Index d = 0; d < dim; ++d) {
      const auto ud = static_cast<std::size_t>(d);
      first[ud] = std::max(0L, best[ud] - 3 * stride);
      last[ud] = std::min(n[ud], best[ud] + 3 * stride);
    }
    stride = std::max(1L, stride / 5);
  }
  return point(best);
}

// Classical Weiszfeld iteration for the unsmoothed geometric median.
inline Eigen::VectorXd weiszfeld(const Eigen::MatrixXd& h, double tol, int max_iter = 100000) {
  Eigen::VectorXd y = h.rowwise().mean();
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd num = Eigen::VectorXd::Zero(h.rows());
    double den = 0.0;
    for (Eigen::Index i = 0; i < h.cols(); ++i) {
      const double dist = (h.col(i) - y).norm();
      if (dist == 0.0) return y;
      num += h.col(i) / dist;
      den += 1.0 / dist;
    }
    const Eigen::VectorXd next = num / den;
    const double moved = (next - y).norm();
    y = next;
    if (moved < tol) break;
  }
  return y;
}

// Central finite-difference gradient of a scalar function of a matrix.
inline Eigen::MatrixXd numeric_gradient(const std::function<double(const Eigen::MatrixXd&)>& f,
                                        Eigen::MatrixXd x, double step) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + step;
    const double up = f(x);
    x.data()[i] = orig - step;
    const double down = f(x);
    x.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// max |a - b| / max(|a|, |b|, floor) over entries.
inline double relative_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a.data()[i]), std::abs(b.data()[i]), floor});
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]) / denom);
  }
  return worst;
}

// max |a - b| over entries, relative to the largest entry of either tensor.
inline double scaled_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double floor = 1e-6) {
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), floor});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace oracle

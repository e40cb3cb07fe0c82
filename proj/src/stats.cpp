#include "pbmrank/stats.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

namespace pbmrank {

double mean(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("mean: empty sample");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double stddev(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

double std_error(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("std_error: empty sample");
  return stddev(xs) / std::sqrt(static_cast<double>(xs.size()));
}

WelchResult welch_greater(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw std::invalid_argument("welch: each sample needs at least two values");
  }
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double va = stddev(a) * stddev(a) / na;
  const double vb = stddev(b) * stddev(b) / nb;
  const double diff = mean(a) - mean(b);
  WelchResult r;
  if (va + vb == 0.0) {
    r.t = diff > 0.0 ? INFINITY : (diff < 0.0 ? -INFINITY : 0.0);
    r.dof = na + nb - 2.0;
    r.p_value = diff > 0.0 ? 0.0 : 1.0;
    return r;
  }
  r.t = diff / std::sqrt(va + vb);
  r.dof = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  boost::math::students_t dist(r.dof);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: size mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
  return a.dot(b) / (na * nb);
}

}  // namespace pbmrank

#pragma once

#include <span>

#include <Eigen/Dense>

namespace pbmrank {

double mean(std::span<const double> xs);
/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double stddev(std::span<const double> xs);
double std_error(std::span<const double> xs);

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  double p_value = 1.0;  // one-sided, H1: mean(a) > mean(b)
};

/// One-sided Welch t-test. Needs at least two values per sample. When both
/// samples have zero variance the p-value is 0 if mean(a) > mean(b), else 1.
WelchResult welch_greater(std::span<const double> a, std::span<const double> b);

/// Cosine of the angle between two vectors; throws on a zero vector.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace pbmrank

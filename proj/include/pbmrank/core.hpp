#pragma once

// Shared domain types for ranking under the position-based click model (PBM):
// action/context vectors, their contextualized combination, position biases,
// slates, per-position feedback and the click-log record.

#include <compare>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace pbmrank {

using Rng = std::mt19937_64;

/// Raised when a vector or matrix does not have the configured shape.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a model's numerical state is no longer usable (non-finite,
/// not positive definite, non-positive variance parameter).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ActionId {
  std::uint64_t value = 0;
  friend auto operator<=>(const ActionId&, const ActionId&) = default;
};

struct ActionVector {
  ActionId id;
  Eigen::VectorXd features;
};

struct ContextVector {
  Eigen::VectorXd features;
};

struct ContextualizedAction {
  ActionId id;
  Eigen::VectorXd features;
};

/// Examination probabilities q, one per slot. Slot 0 is the top position.
class PositionBias {
 public:
  PositionBias() = default;
  explicit PositionBias(std::vector<double> q);

  static PositionBias ones(std::size_t slots);

  std::size_t size() const { return q_.size(); }
  double operator[](std::size_t slot) const { return q_[slot]; }
  const std::vector<double>& values() const { return q_; }

  friend bool operator==(const PositionBias&, const PositionBias&) = default;

 private:
  std::vector<double> q_;
};

/// Fallback examination schedule exp(-(l-1)) for 1-based position l.
PositionBias fallback_bias(std::size_t slots);

/// Ordered list of chosen actions; entries[0] occupies the top position.
struct Slate {
  std::vector<ContextualizedAction> entries;

  std::size_t size() const { return entries.size(); }
  std::vector<ActionId> ids() const;
};

/// Observed censored feedback z[l] = C * Y for each slot of a slate.
struct SlateFeedback {
  std::vector<double> z;

  std::size_t size() const { return z.size(); }
};

struct ClickLogEntry {
  int click = 0;
  ContextVector context;
  ActionVector action;
  int position = 1;  // 1-based
  std::int64_t ts = 0;
  // Groups the entries of one served slate; optional in the line format.
  std::optional<std::string> request_id;
};

/// Builds [action | context | row-major outer(action, context)] and scales it
/// by 1 / ||raw||^2. A zero raw vector stays zero.
class Contextualizer {
 public:
  Contextualizer(std::size_t action_dim, std::size_t context_dim);

  std::size_t action_dim() const { return action_dim_; }
  std::size_t context_dim() const { return context_dim_; }
  std::size_t output_dim() const {
    return action_dim_ + context_dim_ + action_dim_ * context_dim_;
  }

  ContextualizedAction operator()(const ActionVector& action,
                                  const ContextVector& context) const;

 private:
  std::size_t action_dim_;
  std::size_t context_dim_;
};

/// Contextualizes with dimensions taken from the inputs themselves.
ContextualizedAction contextualize(const ActionVector& action,
                                   const ContextVector& context);

/// P(click) = q * relevance under PBM.
double expected_click_probability(double examination, double relevance);

double logistic(double x);

// Click log line format: one JSON object per line with keys click, context,
// action_id, action, position (1-based), ts, and optional request_id.
std::string to_json_line(const ClickLogEntry& entry);
ClickLogEntry parse_click_log_line(std::string_view line);
std::vector<ClickLogEntry> read_click_log(std::istream& in);

}  // namespace pbmrank

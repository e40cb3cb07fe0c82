#pragma once

// Position-bias estimators. Every strategy produces a PositionBias vector q
// with entries in [0,1]:
//
//   fixed   q supplied up front (also used to feed the simulator's true q)
//   ctr     per-position click-through rate normalized by the top position
//   probit  one Bayesian probit regression per position; q_l is the ratio of
//           predicted click probabilities at position l and position 1
//   em      expectation-maximization with relevance taken from the live
//           bandit model; does not pin q_1 to 1
//
// Positions without data report the fallback schedule exp(-(l-1)) and are
// flagged low-confidence.

#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pbmrank/core.hpp"

namespace pbmrank {

/// Raised when the data seen so far cannot determine the requested quantity.
class NotEstimableError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BiasEstimate {
  PositionBias q;
  std::vector<bool> low_confidence;
};

// --- CTR --------------------------------------------------------------------

struct CtrState {
  std::vector<double> click_sum;
  std::vector<std::uint64_t> impressions;

  explicit CtrState(std::size_t slots = 0)
      : click_sum(slots, 0.0), impressions(slots, 0) {}
  std::size_t slots() const { return click_sum.size(); }
  /// Sample mean of clicks at 1-based position; throws when unseen.
  double rate(int position) const;
};

void ctr_record(CtrState& state, int position, double click);
void ctr_update(CtrState& state, std::span<const ClickLogEntry> entries);
/// q_l = min(1, rho_l / rho_1). Throws NotEstimableError when rho_1 is zero
/// or position 1 has no impressions.
BiasEstimate ctr_bias(const CtrState& state);

// --- Probit -----------------------------------------------------------------

struct ProbitConfig {
  double steepness = 1.0;
  double prior_variance = 1.0;
  std::size_t probe_capacity = 256;
};

struct ProbitPositionModel {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  std::uint64_t updates = 0;
};

struct ProbitState {
  std::vector<ProbitPositionModel> positions;
  double steepness = 1.0;

  ProbitState() = default;
  ProbitState(std::size_t slots, std::size_t dim, const ProbitConfig& cfg);
  std::size_t slots() const { return positions.size(); }
  std::size_t dim() const;
};

/// Predictive click probability
///   Phi(mu' x / sqrt(steepness^2 + sum_i sigma_i^2 x_i^2)).
double probit_predict(const ProbitState& state, int position,
                      const Eigen::VectorXd& features);
/// Assumed-density (moment-matching) update of one position's factorized
/// Gaussian belief. A zero feature vector leaves the state unchanged.
void probit_update(ProbitState& state, int position,
                   const Eigen::VectorXd& features, int click);
void probit_update(ProbitState& state, const ClickLogEntry& entry);
/// q_l = clamp(mean_x predict(l, x) / predict(1, x), 0, 1) over the probes.
BiasEstimate probit_bias(const ProbitState& state,
                         std::span<const Eigen::VectorXd> probes);

// --- EM ---------------------------------------------------------------------

enum class RelevanceLink { logistic, identity };
enum class EmInit { harmonic, uniform };
enum class EmAccumulation { cumulative, window };

struct EmConfig {
  std::size_t m_step_every = 100;  // rounds between M-steps
  // The bandit model is linear in relevance, so its score is used as gamma
  // directly; logistic squashes a score of 0 to 0.5 and drags q toward ~0.5.
  RelevanceLink link = RelevanceLink::identity;
  EmAccumulation accumulation = EmAccumulation::window;
  EmInit init = EmInit::harmonic;
  double gamma_clamp = 1e-4;
};

struct EmState {
  std::vector<double> q;
  std::vector<double> numerator;
  std::vector<std::uint64_t> count;

  std::size_t slots() const { return q.size(); }
};

/// P(E=1 | c, gamma, q): 1 for a click, q(1-gamma)/(1-q gamma) otherwise.
double em_e_step(double q, double gamma, int click);
/// Relevance estimate gamma = link(score), clamped to [eps, 1-eps].
double em_gamma(double model_score, RelevanceLink link, double clamp);
/// Adds one record using the q currently held in the state.
void em_accumulate(EmState& state, int position, int click, double gamma);
/// Average of the accumulated E-step terms per position; positions without
/// records keep their current value. Throws when nothing was accumulated.
PositionBias em_m_step(const EmState& state);
/// q_l = 1/(l + eps) with eps ~ U(0, 0.1) (harmonic), or q_l ~ U(0, 1).
EmState em_init(std::size_t slots, Rng& rng, EmInit init = EmInit::harmonic);
EmState em_init_with_epsilon(std::size_t slots, double epsilon);

struct EmRecord {
  int position = 1;
  int click = 0;
  double gamma = 0.5;
};

/// Batch EM over a fixed record set with known relevance: each sweep
/// re-evaluates every record under the current q. Returns q after each sweep.
std::vector<std::vector<double>> em_sweeps(std::span<const EmRecord> records,
                                           std::vector<double> q, int sweeps);

struct JointEmResult {
  std::vector<std::vector<double>> q_trace;  // q after each sweep
  std::vector<double> log_likelihood;        // after each sweep
  std::vector<double> q;
};

/// Standard position-bias EM that also re-estimates one relevance per
/// action id. Used for offline calibration when no model is available.
JointEmResult em_joint(std::span<const ClickLogEntry> entries, std::size_t slots,
                       std::vector<double> q, int sweeps);

// --- Estimator interface ----------------------------------------------------

enum class EstimatorKind { real, fixed, ctr, probit, em };

std::string_view to_string(EstimatorKind kind);
EstimatorKind parse_estimator_kind(std::string_view name);

class BiasEstimator {
 public:
  virtual ~BiasEstimator() = default;

  virtual EstimatorKind kind() const = 0;
  virtual std::size_t slots() const = 0;

  /// One click-log record. `features` is the contextualized action and
  /// `model_score` the live model's a' theta_hat for it.
  virtual void observe(int position, int click, const Eigen::VectorXd& features,
                       double model_score) = 0;
  virtual void end_round() {}

  virtual BiasEstimate estimate() const = 0;
  PositionBias bias() const { return estimate().q; }

  virtual std::unique_ptr<BiasEstimator> clone() const = 0;
  virtual nlohmann::json to_json() const = 0;
};

class FixedBiasEstimator final : public BiasEstimator {
 public:
  FixedBiasEstimator(PositionBias q, EstimatorKind kind = EstimatorKind::fixed);

  EstimatorKind kind() const override { return kind_; }
  std::size_t slots() const override { return q_.size(); }
  void observe(int, int, const Eigen::VectorXd&, double) override {}
  BiasEstimate estimate() const override;
  std::unique_ptr<BiasEstimator> clone() const override;
  nlohmann::json to_json() const override;

 private:
  PositionBias q_;
  EstimatorKind kind_;
};

class CtrEstimator final : public BiasEstimator {
 public:
  explicit CtrEstimator(std::size_t slots) : state_(slots) {}
  explicit CtrEstimator(CtrState state) : state_(std::move(state)) {}

  EstimatorKind kind() const override { return EstimatorKind::ctr; }
  std::size_t slots() const override { return state_.slots(); }
  void observe(int position, int click, const Eigen::VectorXd& features,
               double model_score) override;
  BiasEstimate estimate() const override;
  std::unique_ptr<BiasEstimator> clone() const override;
  nlohmann::json to_json() const override;

  const CtrState& state() const { return state_; }

 private:
  CtrState state_;
};

class ProbitEstimator final : public BiasEstimator {
 public:
  ProbitEstimator(std::size_t slots, std::size_t dim, const ProbitConfig& cfg);
  ProbitEstimator(ProbitState state, std::deque<Eigen::VectorXd> probes,
                  std::size_t probe_capacity);

  EstimatorKind kind() const override { return EstimatorKind::probit; }
  std::size_t slots() const override { return state_.slots(); }
  void observe(int position, int click, const Eigen::VectorXd& features,
               double model_score) override;
  BiasEstimate estimate() const override;
  std::unique_ptr<BiasEstimator> clone() const override;
  nlohmann::json to_json() const override;

  const ProbitState& state() const { return state_; }

 private:
  ProbitState state_;
  std::deque<Eigen::VectorXd> probes_;
  std::size_t probe_capacity_;
};

class EmEstimator final : public BiasEstimator {
 public:
  EmEstimator(std::size_t slots, const EmConfig& cfg, Rng& rng);
  EmEstimator(EmState state, const EmConfig& cfg, std::uint64_t rounds);

  EstimatorKind kind() const override { return EstimatorKind::em; }
  std::size_t slots() const override { return state_.slots(); }
  void observe(int position, int click, const Eigen::VectorXd& features,
               double model_score) override;
  void end_round() override;
  BiasEstimate estimate() const override;
  std::unique_ptr<BiasEstimator> clone() const override;
  nlohmann::json to_json() const override;

  const EmState& state() const { return state_; }
  std::size_t m_steps() const { return m_steps_; }
  void restore_m_steps(std::size_t n) { m_steps_ = n; }

 private:
  EmState state_;
  EmConfig cfg_;
  std::uint64_t rounds_ = 0;
  std::size_t m_steps_ = 0;
};

struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::em;
  std::vector<double> fixed_q;  // for fixed / real
  ProbitConfig probit;
  EmConfig em;
};

std::unique_ptr<BiasEstimator> make_estimator(const EstimatorConfig& cfg,
                                              std::size_t slots, std::size_t dim,
                                              Rng& rng);
std::unique_ptr<BiasEstimator> estimator_from_json(const nlohmann::json& j);

}  // namespace pbmrank

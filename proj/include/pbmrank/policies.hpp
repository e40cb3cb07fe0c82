#pragma once

// Linear ranking policies for the position-based model.
//
// Both learners fold the per-position design matrices into a single ridge
// system weighted by the examination probabilities:
//
//   V = lambda I + sum_t sum_l q_l^2 A_t^l A_t^l'
//   b =            sum_t sum_l q_l   Z_t^l A_t^l
//
// LinUCB scores a' theta_hat + sqrt(f) ||a||_{V^-1}; linear Thompson sampling
// keeps a Normal-Inverse-Gamma posterior over (theta, sigma^2) and scores
// with one posterior draw per round. A slate is built by matching actions in
// score order to slots in examination order. The naive variants are the same
// learners with every q_l fixed to 1.

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pbmrank/core.hpp"

namespace pbmrank {

struct ScoredAction {
  ActionId id;
  double score = 0.0;
};

struct ConfidenceConfig {
  double delta = 0.05;
  double s_bound = 1.0;  // assumed bound on ||theta||
};

// V^-1 is re-derived from V with a dense Cholesky solve this often (rounds).
inline constexpr std::uint64_t kRefactorEvery = 1000;

struct RidgeState {
  Eigen::MatrixXd V;
  Eigen::VectorXd b;
  double lambda = 1.0;
  std::uint64_t t = 0;             // rounds
  std::uint64_t observations = 0;  // rank-one terms folded into V
  Eigen::MatrixXd V_inv;           // maintained by Sherman-Morrison updates
  std::uint64_t rounds_since_refactor = 0;

  static RidgeState prior(std::size_t dim, double lambda);
  std::size_t dim() const { return static_cast<std::size_t>(b.size()); }
};

struct NigPrior {
  double lambda = 1.0;
  double alpha0 = 1.0;
  double beta0 = 1.0;
  // alpha advances by 1/2 per round by default; true makes it 1/2 per
  // observed slot (L/2 per round).
  bool alpha_per_observation = false;
};

struct NIGState {
  Eigen::MatrixXd V;
  Eigen::MatrixXd V_inv;
  Eigen::VectorXd b;
  Eigen::VectorXd theta;  // posterior mean
  double alpha = 1.0;
  double beta = 1.0;
  double eta = 0.0;  // running sum of squared feedback
  std::uint64_t t = 0;
  std::uint64_t observations = 0;
  std::uint64_t rounds_since_refactor = 0;
  NigPrior prior;

  static NIGState from_prior(std::size_t dim, const NigPrior& prior);
  std::size_t dim() const { return static_cast<std::size_t>(b.size()); }
};

/// theta_hat = V^-1 b through a Cholesky solve. Throws NumericalError when V
/// is not positive definite or the state is non-finite.
Eigen::VectorXd ridge_theta(const RidgeState& state);

/// Confidence radius f_{t,delta} =
///   (sqrt(lambda) S + sqrt(2 ln(1/delta) + d ln((d lambda + n) / (d lambda))))^2
/// where n counts the rank-one observations (t * L after t full rounds).
double confidence_radius(const RidgeState& state, const ConfidenceConfig& cfg);

double ucb_score(const RidgeState& state, const ConfidenceConfig& cfg,
                 const ContextualizedAction& a);
/// Same score with an explicit radius f (f = 0 gives the greedy score).
double ucb_score(const RidgeState& state, double radius,
                 const ContextualizedAction& a);

/// Draws sigma^2 ~ InvGamma(alpha, beta), then theta ~ N(theta, sigma^2 V^-1).
Eigen::VectorXd ts_sample(const NIGState& state, Rng& rng);

/// Returns, for each slot 0..L-1, the index into `scored` of the action placed
/// there. Maximizes sum_l q_l score(A^l): actions by score descending (ties by
/// ascending id) are matched with slots by q descending (ties by slot order).
std::vector<std::size_t> select_top_L(std::span<const ScoredAction> scored,
                                      const PositionBias& q, std::size_t L);

double slate_objective(std::span<const ScoredAction> scored,
                       std::span<const std::size_t> assignment,
                       const PositionBias& q);

void update_linucb(RidgeState& state, const PositionBias& q, const Slate& slate,
                   const SlateFeedback& fb);
void update_lints(NIGState& state, const PositionBias& q, const Slate& slate,
                  const SlateFeedback& fb);

enum class PolicyKind { linucb_pbm, lints_pbm, linucb_naive, lints_naive, random };

std::string_view to_string(PolicyKind kind);
PolicyKind parse_policy_kind(std::string_view name);

struct PolicyConfig {
  PolicyKind kind = PolicyKind::linucb_pbm;
  double lambda = 1.0;
  ConfidenceConfig confidence;
  double alpha0 = 1.0;
  double beta0 = 1.0;
  bool alpha_per_observation = false;
};

class Policy {
 public:
  virtual ~Policy() = default;

  virtual PolicyKind kind() const = 0;
  virtual std::size_t dim() const = 0;
  bool bias_aware() const;

  virtual std::vector<ScoredAction> score(
      std::span<const ContextualizedAction> candidates, Rng& rng) const = 0;

  /// Applies one round of feedback. Naive policies substitute q = 1.
  void update(const PositionBias& q, const Slate& slate, const SlateFeedback& fb);

  /// theta_hat for LinUCB, posterior mean for Thompson sampling, zero for
  /// random selection.
  virtual Eigen::VectorXd mean_estimate() const = 0;

  virtual std::uint64_t rounds() const = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;
  virtual nlohmann::json to_json() const = 0;

 protected:
  virtual void apply_update(const PositionBias& q, const Slate& slate,
                            const SlateFeedback& fb) = 0;
};

class LinUcbPolicy final : public Policy {
 public:
  LinUcbPolicy(std::size_t dim, const PolicyConfig& cfg);
  LinUcbPolicy(RidgeState state, const PolicyConfig& cfg);

  PolicyKind kind() const override { return kind_; }
  std::size_t dim() const override { return state_.dim(); }
  std::vector<ScoredAction> score(std::span<const ContextualizedAction> candidates,
                                  Rng& rng) const override;
  Eigen::VectorXd mean_estimate() const override { return theta_; }
  std::uint64_t rounds() const override { return state_.t; }
  std::unique_ptr<Policy> clone() const override;
  nlohmann::json to_json() const override;

  const RidgeState& state() const { return state_; }

 protected:
  void apply_update(const PositionBias& q, const Slate& slate,
                    const SlateFeedback& fb) override;

 private:
  PolicyKind kind_;
  ConfidenceConfig confidence_;
  RidgeState state_;
  Eigen::VectorXd theta_;
};

class LinTsPolicy final : public Policy {
 public:
  LinTsPolicy(std::size_t dim, const PolicyConfig& cfg);
  LinTsPolicy(NIGState state, PolicyKind kind);

  PolicyKind kind() const override { return kind_; }
  std::size_t dim() const override { return state_.dim(); }
  std::vector<ScoredAction> score(std::span<const ContextualizedAction> candidates,
                                  Rng& rng) const override;
  Eigen::VectorXd mean_estimate() const override { return state_.theta; }
  std::uint64_t rounds() const override { return state_.t; }
  std::unique_ptr<Policy> clone() const override;
  nlohmann::json to_json() const override;

  const NIGState& state() const { return state_; }

 protected:
  void apply_update(const PositionBias& q, const Slate& slate,
                    const SlateFeedback& fb) override;

 private:
  PolicyKind kind_;
  NIGState state_;
};

/// Uniformly random scores; the Random Selection baseline.
class RandomPolicy final : public Policy {
 public:
  explicit RandomPolicy(std::size_t dim, std::uint64_t rounds = 0)
      : dim_(dim), t_(rounds) {}

  PolicyKind kind() const override { return PolicyKind::random; }
  std::size_t dim() const override { return dim_; }
  std::vector<ScoredAction> score(std::span<const ContextualizedAction> candidates,
                                  Rng& rng) const override;
  Eigen::VectorXd mean_estimate() const override {
    return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
  }
  std::uint64_t rounds() const override { return t_; }
  std::unique_ptr<Policy> clone() const override;
  nlohmann::json to_json() const override;

 protected:
  void apply_update(const PositionBias&, const Slate&, const SlateFeedback&) override {
    ++t_;
  }

 private:
  std::size_t dim_;
  std::uint64_t t_;
};

std::unique_ptr<Policy> make_policy(const PolicyConfig& cfg, std::size_t dim);

/// Scores every candidate and fills the slate. Naive policies rank with q = 1.
Slate rank_round(const Policy& policy,
                 std::span<const ContextualizedAction> candidates,
                 const PositionBias& q, Rng& rng);

// Policy snapshots are versioned JSON documents. Doubles are written with
// round-trip precision, so a restored policy scores bit-identically.
inline constexpr int kPolicySnapshotVersion = 1;
nlohmann::json policy_to_json(const Policy& policy);
std::unique_ptr<Policy> policy_from_json(const nlohmann::json& j);

}  // namespace pbmrank

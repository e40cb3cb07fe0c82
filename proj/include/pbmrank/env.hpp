#pragma once

// Synthetic ranking environment. A fixed catalog of K sparse action vectors
// and a unit-length hidden weight vector w are drawn once per environment; a
// fresh context is drawn every round. Each candidate's reward is
// clamp(w' a + U[-h, h), 0, 1), optionally thresholded to {0, 1}, and the
// learner only sees it through position censoring.

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "pbmrank/core.hpp"

namespace pbmrank {

enum class RewardKind { real, binary };
enum class BiasSchedule { exp_decay, eps_exp_decay };
enum class PositionIndexing { zero_based, one_based };
enum class Censoring { attenuation, bernoulli };

std::string_view to_string(RewardKind k);
std::string_view to_string(BiasSchedule k);
std::string_view to_string(PositionIndexing k);
std::string_view to_string(Censoring k);
RewardKind parse_reward_kind(std::string_view s);
PositionIndexing parse_position_indexing(std::string_view s);
Censoring parse_censoring(std::string_view s);

struct EnvConfig {
  std::size_t K = 25;
  std::size_t L = 5;
  std::size_t d_a = 5;
  std::size_t d_c = 10;
  RewardKind reward_kind = RewardKind::real;
  double binarize_threshold = 0.5;
  double noise_halfwidth = 0.1;
  BiasSchedule bias_schedule = BiasSchedule::exp_decay;
  double epsilon = 0.0;  // used by eps_exp_decay
  PositionIndexing position_indexing = PositionIndexing::zero_based;
  Censoring censoring = Censoring::attenuation;
  std::uint64_t seed = 0;
  // When set, w and the action catalog come from this seed instead of `seed`,
  // so replicates can share one dataset while contexts and noise still vary.
  std::optional<std::uint64_t> dataset_seed;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  std::size_t dim() const { return d_a + d_c + d_a * d_c; }
};

struct HiddenModel {
  Eigen::VectorXd w;
};

/// Draws w with entries uniform in [0,1) and rescales it to unit length.
HiddenModel make_hidden_model(std::size_t dim, Rng& rng);

/// n entries uniform in [0,1), with every entry strictly below 0.1 set to 0.
Eigen::VectorXd sparse_uniform(std::size_t n, Rng& rng);

/// K action vectors (ids 0..K-1) and one context vector.
std::pair<std::vector<ActionVector>, ContextVector> gen_vectors(const EnvConfig& cfg,
                                                                 Rng& rng);

/// Reward for a given noise draw; deterministic.
double reward_from_noise(const HiddenModel& model, const ContextualizedAction& a,
                         const EnvConfig& cfg, double noise);
double latent_reward(const HiddenModel& model, const ContextualizedAction& a,
                     const EnvConfig& cfg, Rng& rng);
/// Noise-averaged reward for mean relevance m = w' a, in closed form.
double expected_reward(double m, const EnvConfig& cfg);

/// True examination probabilities for the configured schedule and slate size.
PositionBias position_bias_true(const EnvConfig& cfg);

/// Censored feedback for a slate whose slot rewards are `rewards`.
SlateFeedback simulate_feedback(std::span<const double> rewards, const PositionBias& q_true,
                                const EnvConfig& cfg, Rng& rng);

struct RoundData {
  ContextVector context;
  std::vector<ContextualizedAction> candidates;
  std::vector<double> rewards;   // realized reward per candidate, aligned with candidates
  std::vector<double> expected;  // E[reward] over the noise, per candidate
};

class SyntheticEnv {
 public:
  explicit SyntheticEnv(const EnvConfig& cfg);

  const EnvConfig& config() const { return cfg_; }
  const HiddenModel& hidden() const { return hidden_; }
  const std::vector<ActionVector>& actions() const { return actions_; }
  const PositionBias& q_true() const { return q_true_; }
  std::size_t dim() const { return cfg_.dim(); }

  /// Draws the next context and every candidate's reward.
  const RoundData& next_round();
  const RoundData& current() const { return round_; }
  std::uint64_t rounds() const { return t_; }

  /// Reward of each slate entry in the current round.
  std::vector<double> slate_rewards(const Slate& slate) const;
  SlateFeedback feedback(const Slate& slate);

  /// sum_l q_true[l] * E[reward(slate[l])]: expected observed value of a slate.
  double expected_value(const Slate& slate) const;
  /// Best expected value over all slates in the current round, from w and q_true.
  double oracle_value() const;

 private:
  EnvConfig cfg_;
  Contextualizer contextualizer_;
  HiddenModel hidden_;
  std::vector<ActionVector> actions_;
  PositionBias q_true_;
  Rng context_rng_;
  Rng noise_rng_;
  Rng censor_rng_;
  RoundData round_;
  std::uint64_t t_ = 0;
};

/// Independent generator per (seed, stream) pair.
Rng stream_rng(std::uint64_t seed, std::uint64_t stream);

/// Writes the configuration header followed by one row per round; see README
/// for the column layout.
void export_dataset(std::ostream& out, const EnvConfig& cfg, std::uint64_t rounds);

}  // namespace pbmrank

#pragma once

// Experiment runner: one (environment, policy, estimator) triple per
// replicate, driven for T rounds.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pbmrank/bias.hpp"
#include "pbmrank/env.hpp"
#include "pbmrank/policies.hpp"

namespace pbmrank {

struct ExperimentSpec {
  std::string id = "experiment";
  EnvConfig env;
  PolicyConfig policy;
  EstimatorConfig estimator;
  std::uint64_t horizon = 20000;
  std::size_t replicates = 5;
  std::vector<std::uint64_t> seeds;  // one per replicate; empty = seed, seed+1, ...
  std::uint64_t seed = 1;
  // Learner randomness (policy, estimator init, click draws) is derived from
  // the replicate seed and this offset, so two runs can share an environment
  // while differing in their learners.
  std::uint64_t learner_seed = 0;
  std::uint64_t warmup = 500;          // rounds ranked with the fallback schedule
  std::uint64_t bias_refresh = 100;    // rounds between estimator reads
  std::uint64_t trace_every = 100;     // sampling interval of the stored traces

  void validate() const;
  std::uint64_t replicate_seed(std::size_t replicate) const;
};

struct RunResult {
  std::string spec_id;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  PolicyKind policy_kind = PolicyKind::random;
  EstimatorKind estimator_kind = EstimatorKind::real;

  double cumulative_reward = 0.0;
  double cumulative_regret = 0.0;
  std::vector<double> reward_trace;  // observed reward sum_l Z^l, every round
  std::vector<double> regret_trace;  // oracle minus expected slate value, every round

  std::vector<std::uint64_t> q_rounds;          // rounds at which q_hat was sampled
  std::vector<std::vector<double>> q_trace;     // estimator output at those rounds
  std::vector<double> final_q;                  // estimator output after the last round
  std::vector<bool> final_low_confidence;
  std::vector<double> q_true;

  Eigen::VectorXd final_mean;  // policy mean estimate after the last round
  double wall_seconds = 0.0;
};

RunResult run_replicate(const ExperimentSpec& spec, std::size_t replicate);

/// All replicates of one spec. threads = 0 picks the hardware concurrency.
std::vector<RunResult> run_experiment(const ExperimentSpec& spec, unsigned threads = 0);

/// Runs every replicate of every spec on a shared worker pool; results keep
/// spec order and replicate order.
std::vector<std::vector<RunResult>> run_experiments(std::span<const ExperimentSpec> specs,
                                                    unsigned threads = 0);

struct Summary {
  double mean = 0.0;
  double std = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

Summary summarize(std::span<const double> values);
std::vector<double> cumulative_rewards(std::span<const RunResult> runs);

/// |final q_hat - q_true| per position. Throws when the run has no q trace.
std::vector<double> compare_bias_estimates(const RunResult& run, const PositionBias& q_true);

/// Cosine similarity of the final posterior means of two Thompson-sampling runs.
double posterior_similarity(const RunResult& a, const RunResult& b);

}  // namespace pbmrank

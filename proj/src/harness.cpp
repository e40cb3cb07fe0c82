#include "pbmrank/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "pbmrank/stats.hpp"

namespace pbmrank {

namespace {

enum LearnerStream : std::uint64_t {
  kPolicyStream = 16,
  kEstimatorStream = 17,
  kClickStream = 18,
};

std::uint64_t learner_stream(std::uint64_t stream, std::uint64_t learner_seed) {
  return stream + 32 * learner_seed;
}

bool is_thompson(PolicyKind k) {
  return k == PolicyKind::lints_pbm || k == PolicyKind::lints_naive;
}

}  // namespace

void ExperimentSpec::validate() const {
  env.validate();
  if (horizon < 1) throw std::invalid_argument("spec '" + id + "': horizon must be >= 1");
  if (replicates < 1) throw std::invalid_argument("spec '" + id + "': replicates must be >= 1");
  if (!seeds.empty() && seeds.size() != replicates) {
    throw std::invalid_argument("spec '" + id + "': seeds list must have one entry per replicate");
  }
  if (bias_refresh < 1 || trace_every < 1) {
    throw std::invalid_argument("spec '" + id + "': bias_refresh and trace_every must be >= 1");
  }
  if (estimator.kind == EstimatorKind::fixed && estimator.fixed_q.size() != env.L) {
    throw std::invalid_argument("spec '" + id + "': fixed_q needs exactly L entries");
  }
}

std::uint64_t ExperimentSpec::replicate_seed(std::size_t replicate) const {
  return seeds.empty() ? seed + replicate : seeds.at(replicate);
}

RunResult run_replicate(const ExperimentSpec& spec, std::size_t replicate) {
  spec.validate();
  const auto started = std::chrono::steady_clock::now();

  RunResult out;
  out.spec_id = spec.id;
  out.replicate = replicate;
  out.seed = spec.replicate_seed(replicate);
  out.policy_kind = spec.policy.kind;
  out.estimator_kind = spec.estimator.kind;

  EnvConfig env_cfg = spec.env;
  env_cfg.seed = out.seed;
  SyntheticEnv env(env_cfg);
  const std::size_t L = env_cfg.L;
  out.q_true = env.q_true().values();

  Rng policy_rng = stream_rng(out.seed, learner_stream(kPolicyStream, spec.learner_seed));
  Rng estimator_rng = stream_rng(out.seed, learner_stream(kEstimatorStream, spec.learner_seed));
  Rng click_rng = stream_rng(out.seed, learner_stream(kClickStream, spec.learner_seed));
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto policy = make_policy(spec.policy, env.dim());
  EstimatorConfig est_cfg = spec.estimator;
  if (est_cfg.kind == EstimatorKind::real) est_cfg.fixed_q = out.q_true;
  auto estimator = make_estimator(est_cfg, L, env.dim(), estimator_rng);
  const bool oracle_bias = est_cfg.kind == EstimatorKind::real;

  const PositionBias fallback = fallback_bias(L);
  PositionBias live = estimator->bias();

  out.reward_trace.reserve(spec.horizon);
  out.regret_trace.reserve(spec.horizon);

  for (std::uint64_t t = 1; t <= spec.horizon; ++t) {
    const RoundData& rd = env.next_round();
    const PositionBias& q_hat = oracle_bias ? env.q_true() : (t <= spec.warmup ? fallback : live);

    const Slate slate = rank_round(*policy, rd.candidates, q_hat, policy_rng);
    const SlateFeedback fb = env.feedback(slate);

    double reward = 0.0;
    for (double z : fb.z) reward += z;
    out.reward_trace.push_back(reward);
    out.regret_trace.push_back(env.oracle_value() - env.expected_value(slate));

    // The estimator sees binary clicks drawn with probability Z and the
    // model's score before this round's update.
    const Eigen::VectorXd theta = policy->mean_estimate();
    for (std::size_t s = 0; s < slate.size(); ++s) {
      const int click = unif(click_rng) < fb.z[s] ? 1 : 0;
      const auto& features = slate.entries[s].features;
      estimator->observe(static_cast<int>(s) + 1, click, features, theta.dot(features));
    }
    estimator->end_round();

    policy->update(q_hat, slate, fb);

    if (!oracle_bias && t % spec.bias_refresh == 0) live = estimator->bias();
    if (t % spec.trace_every == 0 || t == spec.horizon) {
      out.q_rounds.push_back(t);
      out.q_trace.push_back(estimator->bias().values());
    }
  }

  for (double r : out.reward_trace) out.cumulative_reward += r;
  for (double r : out.regret_trace) out.cumulative_regret += r;
  const BiasEstimate final_est = estimator->estimate();
  out.final_q = final_est.q.values();
  out.final_low_confidence = final_est.low_confidence;
  out.final_mean = policy->mean_estimate();
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

std::vector<std::vector<RunResult>> run_experiments(std::span<const ExperimentSpec> specs,
                                                    unsigned threads) {
  struct Job {
    std::size_t spec;
    std::size_t replicate;
  };
  std::vector<Job> jobs;
  std::vector<std::vector<RunResult>> results(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].validate();
    results[i].resize(specs[i].replicates);
    for (std::size_t r = 0; r < specs[i].replicates; ++r) jobs.push_back({i, r});
  }
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(jobs.size(), 1)));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      try {
        results[jobs[j].spec][jobs[j].replicate] =
            run_replicate(specs[jobs[j].spec], jobs[j].replicate);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

std::vector<RunResult> run_experiment(const ExperimentSpec& spec, unsigned threads) {
  return std::move(run_experiments(std::span(&spec, 1), threads).front());
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = mean(values);
  s.std = stddev(values);
  s.std_error = std_error(values);
  return s;
}

std::vector<double> cumulative_rewards(std::span<const RunResult> runs) {
  std::vector<double> out;
  out.reserve(runs.size());
  for (const auto& r : runs) out.push_back(r.cumulative_reward);
  return out;
}

std::vector<double> compare_bias_estimates(const RunResult& run, const PositionBias& q_true) {
  if (run.q_trace.empty() || run.final_q.empty()) {
    throw std::invalid_argument("compare_bias_estimates: run carries no q trace");
  }
  if (run.final_q.size() != q_true.size()) {
    throw DimensionError("compare_bias_estimates: q lengths differ");
  }
  std::vector<double> err(q_true.size());
  for (std::size_t s = 0; s < err.size(); ++s) err[s] = std::abs(run.final_q[s] - q_true[s]);
  return err;
}

double posterior_similarity(const RunResult& a, const RunResult& b) {
  if (!is_thompson(a.policy_kind) || !is_thompson(b.policy_kind)) {
    throw std::invalid_argument("posterior_similarity: both runs must use Thompson sampling");
  }
  return cosine_similarity(a.final_mean, b.final_mean);
}

}  // namespace pbmrank

#include "pbmrank/env.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

namespace pbmrank {

namespace {

// Stream ids for the independent generators derived from one seed.
enum Stream : std::uint64_t {
  kSetupStream = 1,
  kContextStream = 2,
  kNoiseStream = 3,
  kCensorStream = 4,
};

void write_vector(std::ostream& out, const Eigen::VectorXd& v) {
  char buf[32];
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    out << ' ' << buf;
  }
}

}  // namespace

std::string_view to_string(RewardKind k) { return k == RewardKind::real ? "real" : "binary"; }
std::string_view to_string(BiasSchedule k) {
  return k == BiasSchedule::exp_decay ? "exp_decay" : "eps_exp_decay";
}
std::string_view to_string(PositionIndexing k) {
  return k == PositionIndexing::zero_based ? "zero_based" : "one_based";
}
std::string_view to_string(Censoring k) {
  return k == Censoring::attenuation ? "attenuation" : "bernoulli";
}

RewardKind parse_reward_kind(std::string_view s) {
  if (s == "real" || s == "sinreal") return RewardKind::real;
  if (s == "binary" || s == "bin" || s == "sinbin") return RewardKind::binary;
  throw std::invalid_argument("unknown reward kind '" + std::string(s) + "'");
}

PositionIndexing parse_position_indexing(std::string_view s) {
  if (s == "zero_based") return PositionIndexing::zero_based;
  if (s == "one_based") return PositionIndexing::one_based;
  throw std::invalid_argument("unknown position indexing '" + std::string(s) + "'");
}

Censoring parse_censoring(std::string_view s) {
  if (s == "attenuation") return Censoring::attenuation;
  if (s == "bernoulli") return Censoring::bernoulli;
  throw std::invalid_argument("unknown censoring mode '" + std::string(s) + "'");
}

void EnvConfig::validate() const {
  if (K == 0 || L == 0) throw std::invalid_argument("env: K and L must be positive");
  if (L > K) throw std::invalid_argument("env: L must not exceed K");
  if (d_a == 0 || d_c == 0) throw std::invalid_argument("env: d_a and d_c must be positive");
  if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0)) {
    throw std::invalid_argument("env: binarize threshold must lie in (0,1)");
  }
  if (!(noise_halfwidth >= 0.0)) throw std::invalid_argument("env: noise half-width must be >= 0");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw std::invalid_argument("env: epsilon must lie in [0,1)");
}

Rng stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

HiddenModel make_hidden_model(std::size_t dim, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd w(static_cast<Eigen::Index>(dim));
  do {
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = unif(rng);
  } while (w.squaredNorm() == 0.0);
  w.normalize();
  return {w};
}

Eigen::VectorXd sparse_uniform(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double x = unif(rng);
    v[i] = x < 0.1 ? 0.0 : x;
  }
  return v;
}

std::pair<std::vector<ActionVector>, ContextVector> gen_vectors(const EnvConfig& cfg,
                                                                 Rng& rng) {
  cfg.validate();
  std::vector<ActionVector> actions;
  actions.reserve(cfg.K);
  for (std::size_t k = 0; k < cfg.K; ++k) {
    actions.push_back({ActionId{k}, sparse_uniform(cfg.d_a, rng)});
  }
  return {std::move(actions), ContextVector{sparse_uniform(cfg.d_c, rng)}};
}

double reward_from_noise(const HiddenModel& model, const ContextualizedAction& a,
                         const EnvConfig& cfg, double noise) {
  if (a.features.size() != model.w.size()) {
    throw DimensionError("latent_reward: action dimension " + std::to_string(a.features.size()) +
                         " != model dimension " + std::to_string(model.w.size()));
  }
  const double r = std::clamp(model.w.dot(a.features) + noise, 0.0, 1.0);
  if (cfg.reward_kind == RewardKind::binary) return r >= cfg.binarize_threshold ? 1.0 : 0.0;
  return r;
}

double latent_reward(const HiddenModel& model, const ContextualizedAction& a,
                     const EnvConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> noise(-cfg.noise_halfwidth, cfg.noise_halfwidth);
  return reward_from_noise(model, a, cfg, cfg.noise_halfwidth > 0.0 ? noise(rng) : 0.0);
}

double expected_reward(double m, const EnvConfig& cfg) {
  const double h = cfg.noise_halfwidth;
  if (cfg.reward_kind == RewardKind::binary) {
    if (h == 0.0) return m >= cfg.binarize_threshold ? 1.0 : 0.0;
    return std::clamp((m + h - cfg.binarize_threshold) / (2.0 * h), 0.0, 1.0);
  }
  if (h == 0.0) return std::clamp(m, 0.0, 1.0);
  // Antiderivative of clamp(x, 0, 1).
  const auto F = [](double x) {
    if (x <= 0.0) return 0.0;
    if (x <= 1.0) return 0.5 * x * x;
    return x - 0.5;
  };
  return (F(m + h) - F(m - h)) / (2.0 * h);
}

PositionBias position_bias_true(const EnvConfig& cfg) {
  const double shift = cfg.position_indexing == PositionIndexing::zero_based ? 0.0 : 1.0;
  const double scale = cfg.bias_schedule == BiasSchedule::eps_exp_decay ? 1.0 - cfg.epsilon : 1.0;
  std::vector<double> q(cfg.L);
  for (std::size_t s = 0; s < cfg.L; ++s) q[s] = scale * std::exp(-(static_cast<double>(s) + shift));
  return PositionBias(std::move(q));
}

SlateFeedback simulate_feedback(std::span<const double> rewards, const PositionBias& q_true,
                                const EnvConfig& cfg, Rng& rng) {
  if (rewards.size() > q_true.size()) {
    throw DimensionError("simulate_feedback: slate longer than the bias vector");
  }
  SlateFeedback fb;
  fb.z.resize(rewards.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t s = 0; s < rewards.size(); ++s) {
    if (cfg.censoring == Censoring::attenuation) {
      fb.z[s] = rewards[s] * q_true[s];
    } else {
      fb.z[s] = unif(rng) < q_true[s] ? rewards[s] : 0.0;
    }
  }
  return fb;
}

SyntheticEnv::SyntheticEnv(const EnvConfig& cfg)
    : cfg_(cfg),
      contextualizer_(cfg.d_a, cfg.d_c),
      context_rng_(stream_rng(cfg.seed, kContextStream)),
      noise_rng_(stream_rng(cfg.seed, kNoiseStream)),
      censor_rng_(stream_rng(cfg.seed, kCensorStream)) {
  cfg_.validate();
  Rng setup = stream_rng(cfg.dataset_seed.value_or(cfg.seed), kSetupStream);
  hidden_ = make_hidden_model(cfg_.dim(), setup);
  actions_ = gen_vectors(cfg_, setup).first;
  q_true_ = position_bias_true(cfg_);
}

const RoundData& SyntheticEnv::next_round() {
  round_.context = ContextVector{sparse_uniform(cfg_.d_c, context_rng_)};
  round_.candidates.clear();
  round_.rewards.clear();
  round_.expected.clear();
  std::uniform_real_distribution<double> noise(-cfg_.noise_halfwidth, cfg_.noise_halfwidth);
  for (const auto& a : actions_) {
    round_.candidates.push_back(contextualizer_(a, round_.context));
    // One noise draw per candidate every round keeps the stream independent
    // of which actions the policy picks.
    const double n = cfg_.noise_halfwidth > 0.0 ? noise(noise_rng_) : 0.0;
    round_.rewards.push_back(reward_from_noise(hidden_, round_.candidates.back(), cfg_, n));
    round_.expected.push_back(expected_reward(hidden_.w.dot(round_.candidates.back().features), cfg_));
  }
  ++t_;
  return round_;
}

std::vector<double> SyntheticEnv::slate_rewards(const Slate& slate) const {
  std::vector<double> out;
  out.reserve(slate.size());
  for (const auto& e : slate.entries) {
    if (e.id.value >= round_.rewards.size()) {
      throw std::out_of_range("env: unknown action id " + std::to_string(e.id.value));
    }
    out.push_back(round_.rewards[e.id.value]);
  }
  return out;
}

SlateFeedback SyntheticEnv::feedback(const Slate& slate) {
  const auto rewards = slate_rewards(slate);
  // Fixed number of draws per round regardless of censoring outcome.
  std::vector<double> padded(cfg_.L, 0.0);
  std::copy(rewards.begin(), rewards.end(), padded.begin());
  SlateFeedback fb = simulate_feedback(padded, q_true_, cfg_, censor_rng_);
  fb.z.resize(rewards.size());
  return fb;
}

double SyntheticEnv::expected_value(const Slate& slate) const {
  slate_rewards(slate);  // validates the ids
  double v = 0.0;
  for (std::size_t s = 0; s < slate.size(); ++s) {
    v += q_true_[s] * round_.expected[slate.entries[s].id.value];
  }
  return v;
}

double SyntheticEnv::oracle_value() const {
  std::vector<double> r = round_.expected;
  std::vector<double> q = q_true_.values();
  std::sort(r.begin(), r.end(), std::greater<>());
  std::sort(q.begin(), q.end(), std::greater<>());
  double v = 0.0;
  for (std::size_t s = 0; s < q.size() && s < r.size(); ++s) v += q[s] * r[s];
  return v;
}

void export_dataset(std::ostream& out, const EnvConfig& cfg, std::uint64_t rounds) {
  SyntheticEnv env(cfg);
  out << "# pbmrank-dataset 1\n";
  out << "K " << cfg.K << "\nL " << cfg.L << "\nd_a " << cfg.d_a << "\nd_c " << cfg.d_c << '\n';
  out << "reward " << to_string(cfg.reward_kind) << '\n';
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", cfg.binarize_threshold);
  out << "threshold " << buf << '\n';
  std::snprintf(buf, sizeof buf, "%.17g", cfg.noise_halfwidth);
  out << "noise " << buf << '\n';
  out << "bias " << to_string(cfg.bias_schedule) << '\n';
  std::snprintf(buf, sizeof buf, "%.17g", cfg.epsilon);
  out << "epsilon " << buf << '\n';
  out << "indexing " << to_string(cfg.position_indexing) << '\n';
  out << "censoring " << to_string(cfg.censoring) << '\n';
  out << "seed " << cfg.seed << '\n';
  if (cfg.dataset_seed) out << "dataset_seed " << *cfg.dataset_seed << '\n';
  out << "rounds " << rounds << '\n';
  out << "w";
  write_vector(out, env.hidden().w);
  out << "\nq_true";
  write_vector(out, Eigen::Map<const Eigen::VectorXd>(env.q_true().values().data(),
                                                      static_cast<Eigen::Index>(cfg.L)));
  out << "\n# columns: round context[d_c] actions[K*d_a] rewards[K]\n";
  for (std::uint64_t t = 0; t < rounds; ++t) {
    const RoundData& rd = env.next_round();
    out << t + 1;
    write_vector(out, rd.context.features);
    for (const auto& a : env.actions()) write_vector(out, a.features);
    write_vector(out, Eigen::Map<const Eigen::VectorXd>(rd.rewards.data(),
                                                        static_cast<Eigen::Index>(rd.rewards.size())));
    out << '\n';
  }
}

}  // namespace pbmrank

#include "pbmrank/policies.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace pbmrank {

namespace {

Eigen::MatrixXd identity(std::size_t dim) {
  const auto d = static_cast<Eigen::Index>(dim);
  return Eigen::MatrixXd::Identity(d, d);
}

void check_round_shapes(const PositionBias& q, const Slate& slate,
                        const SlateFeedback& fb, std::size_t dim) {
  if (slate.size() != fb.size() || slate.size() != q.size()) {
    throw DimensionError("update: slate, feedback and bias lengths differ (" +
                         std::to_string(slate.size()) + ", " +
                         std::to_string(fb.size()) + ", " +
                         std::to_string(q.size()) + ")");
  }
  for (const auto& a : slate.entries) {
    if (static_cast<std::size_t>(a.features.size()) != dim) {
      throw DimensionError("update: action dimension " +
                           std::to_string(a.features.size()) + " != model dimension " +
                           std::to_string(dim));
    }
  }
  for (double z : fb.z) {
    if (!std::isfinite(z)) throw std::invalid_argument("update: non-finite feedback");
  }
}

// Folds x x' into V and updates V^-1 with the Sherman-Morrison identity.
void rank_one_update(Eigen::MatrixXd& V, Eigen::MatrixXd& V_inv,
                     const Eigen::VectorXd& x) {
  const Eigen::VectorXd z = V_inv * x;
  const double denom = 1.0 + x.dot(z);
  V_inv.noalias() -= (z / denom) * z.transpose();
  V.noalias() += x * x.transpose();
}

void settle_inverse(const Eigen::MatrixXd& V, Eigen::MatrixXd& V_inv,
                    std::uint64_t& rounds_since_refactor) {
  ++rounds_since_refactor;
  if (rounds_since_refactor >= kRefactorEvery) {
    Eigen::LLT<Eigen::MatrixXd> llt(V);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("refactorization: V is not positive definite");
    }
    V_inv = llt.solve(identity(static_cast<std::size_t>(V.rows())));
    rounds_since_refactor = 0;
  }
  const Eigen::MatrixXd sym = 0.5 * (V_inv + V_inv.transpose());
  V_inv = sym;
}

// Adds the q-weighted observations of one round; returns sum of z^2.
double fold_round(Eigen::MatrixXd& V, Eigen::MatrixXd& V_inv, Eigen::VectorXd& b,
                  const PositionBias& q, const Slate& slate, const SlateFeedback& fb) {
  double sum_sq = 0.0;
  for (std::size_t l = 0; l < slate.size(); ++l) {
    const Eigen::VectorXd& a = slate.entries[l].features;
    const double ql = q[l];
    if (ql > 0.0) {
      rank_one_update(V, V_inv, ql * a);
      b.noalias() += (ql * fb.z[l]) * a;
    }
    sum_sq += fb.z[l] * fb.z[l];
  }
  return sum_sq;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) arr.push_back(m(i, j));
  return arr;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& arr, std::size_t dim,
                                 const char* name) {
  const auto d = static_cast<Eigen::Index>(dim);
  if (!arr.is_array() || arr.size() != dim * dim) {
    throw DimensionError(std::string("policy snapshot: ") + name + " must hold d*d values");
  }
  Eigen::MatrixXd m(d, d);
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = arr[k++].get<double>();
  return m;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& arr, std::size_t dim,
                                 const char* name) {
  if (!arr.is_array() || arr.size() != dim) {
    throw DimensionError(std::string("policy snapshot: ") + name + " must hold d values");
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i) v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  return v;
}

}  // namespace

RidgeState RidgeState::prior(std::size_t dim, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("ridge prior: lambda must be > 0");
  RidgeState s;
  s.V = lambda * identity(dim);
  s.V_inv = identity(dim) / lambda;
  s.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  s.lambda = lambda;
  return s;
}

NIGState NIGState::from_prior(std::size_t dim, const NigPrior& prior) {
  if (!(prior.lambda > 0.0) || !(prior.alpha0 > 0.0) || !(prior.beta0 > 0.0)) {
    throw std::invalid_argument("NIG prior: lambda, alpha0, beta0 must be > 0");
  }
  NIGState s;
  s.V = prior.lambda * identity(dim);
  s.V_inv = identity(dim) / prior.lambda;
  s.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  s.theta = s.b;
  s.alpha = prior.alpha0;
  s.beta = prior.beta0;
  s.prior = prior;
  return s;
}

Eigen::VectorXd ridge_theta(const RidgeState& state) {
  if (!state.V.allFinite() || !state.b.allFinite()) {
    throw NumericalError("ridge_theta: non-finite state");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(state.V);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("ridge_theta: V is not positive definite");
  }
  return llt.solve(state.b);
}

double confidence_radius(const RidgeState& state, const ConfidenceConfig& cfg) {
  if (!(cfg.delta > 0.0 && cfg.delta < 1.0)) {
    throw std::invalid_argument("confidence: delta must lie in (0,1)");
  }
  const double d = static_cast<double>(state.dim());
  const double dl = d * state.lambda;
  const double n = static_cast<double>(state.observations);
  const double root = std::sqrt(state.lambda) * cfg.s_bound +
                      std::sqrt(2.0 * std::log(1.0 / cfg.delta) +
                                d * std::log((dl + n) / dl));
  return root * root;
}

double ucb_score(const RidgeState& state, double radius,
                 const ContextualizedAction& a) {
  if (static_cast<std::size_t>(a.features.size()) != state.dim()) {
    throw DimensionError("ucb_score: action dimension mismatch");
  }
  const Eigen::VectorXd theta = ridge_theta(state);
  const double width = std::max(0.0, a.features.dot(state.V_inv * a.features));
  return a.features.dot(theta) + std::sqrt(radius) * std::sqrt(width);
}

double ucb_score(const RidgeState& state, const ConfidenceConfig& cfg,
                 const ContextualizedAction& a) {
  return ucb_score(state, confidence_radius(state, cfg), a);
}

Eigen::VectorXd ts_sample(const NIGState& state, Rng& rng) {
  if (!(state.beta > 0.0) || !std::isfinite(state.beta)) {
    throw NumericalError("ts_sample: beta must be positive");
  }
  if (!(state.alpha > 0.0)) throw NumericalError("ts_sample: alpha must be positive");
  Eigen::LLT<Eigen::MatrixXd> llt(state.V_inv);
  if (llt.info() != Eigen::Success) {
    throw NumericalError("ts_sample: V^-1 is not positive definite");
  }
  std::gamma_distribution<double> gamma(state.alpha, 1.0);
  const double sigma2 = state.beta / gamma(rng);
  std::normal_distribution<double> normal;
  Eigen::VectorXd z(state.theta.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
  const Eigen::VectorXd noise = llt.matrixL() * z;
  return state.theta + std::sqrt(sigma2) * noise;
}

std::vector<std::size_t> select_top_L(std::span<const ScoredAction> scored,
                                      const PositionBias& q, std::size_t L) {
  if (q.size() != L) {
    throw DimensionError("select_top_L: bias has " + std::to_string(q.size()) +
                         " slots, slate needs " + std::to_string(L));
  }
  if (scored.size() < L) {
    throw std::invalid_argument("select_top_L: fewer candidates (" +
                                std::to_string(scored.size()) + ") than slots (" +
                                std::to_string(L) + ")");
  }
  std::vector<std::size_t> by_score(scored.size());
  std::iota(by_score.begin(), by_score.end(), 0);
  std::partial_sort(by_score.begin(), by_score.begin() + static_cast<std::ptrdiff_t>(L),
                    by_score.end(), [&](std::size_t i, std::size_t j) {
                      if (scored[i].score != scored[j].score)
                        return scored[i].score > scored[j].score;
                      return scored[i].id < scored[j].id;
                    });
  std::vector<std::size_t> by_bias(L);
  std::iota(by_bias.begin(), by_bias.end(), 0);
  std::stable_sort(by_bias.begin(), by_bias.end(),
                   [&](std::size_t i, std::size_t j) { return q[i] > q[j]; });
  std::vector<std::size_t> assignment(L);
  for (std::size_t k = 0; k < L; ++k) assignment[by_bias[k]] = by_score[k];
  return assignment;
}

double slate_objective(std::span<const ScoredAction> scored,
                       std::span<const std::size_t> assignment,
                       const PositionBias& q) {
  double total = 0.0;
  for (std::size_t l = 0; l < assignment.size(); ++l) {
    total += q[l] * scored[assignment[l]].score;
  }
  return total;
}

void update_linucb(RidgeState& state, const PositionBias& q, const Slate& slate,
                   const SlateFeedback& fb) {
  check_round_shapes(q, slate, fb, state.dim());
  fold_round(state.V, state.V_inv, state.b, q, slate, fb);
  state.observations += slate.size();
  ++state.t;
  settle_inverse(state.V, state.V_inv, state.rounds_since_refactor);
}

void update_lints(NIGState& state, const PositionBias& q, const Slate& slate,
                  const SlateFeedback& fb) {
  check_round_shapes(q, slate, fb, state.dim());
  state.eta += fold_round(state.V, state.V_inv, state.b, q, slate, fb);
  state.observations += slate.size();
  ++state.t;
  settle_inverse(state.V, state.V_inv, state.rounds_since_refactor);
  state.theta.noalias() = state.V_inv * state.b;
  const double steps = state.prior.alpha_per_observation
                           ? static_cast<double>(state.observations)
                           : static_cast<double>(state.t);
  state.alpha = state.prior.alpha0 + 0.5 * steps;
  state.beta = state.prior.beta0 + 0.5 * (state.eta - state.theta.dot(state.b));
  if (!(state.beta > 0.0) || !std::isfinite(state.beta)) {
    throw NumericalError("update_lints: beta became non-positive (" +
                         std::to_string(state.beta) + ")");
  }
}

std::string_view to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::linucb_pbm: return "linucb_pbm";
    case PolicyKind::lints_pbm: return "lints_pbm";
    case PolicyKind::linucb_naive: return "linucb_naive";
    case PolicyKind::lints_naive: return "lints_naive";
    case PolicyKind::random: return "random";
  }
  return "unknown";
}

PolicyKind parse_policy_kind(std::string_view name) {
  for (auto k : {PolicyKind::linucb_pbm, PolicyKind::lints_pbm, PolicyKind::linucb_naive,
                 PolicyKind::lints_naive, PolicyKind::random}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown policy '" + std::string(name) + "'");
}

bool Policy::bias_aware() const {
  return kind() == PolicyKind::linucb_pbm || kind() == PolicyKind::lints_pbm;
}

void Policy::update(const PositionBias& q, const Slate& slate, const SlateFeedback& fb) {
  if (bias_aware()) {
    apply_update(q, slate, fb);
  } else {
    apply_update(PositionBias::ones(slate.size()), slate, fb);
  }
}

LinUcbPolicy::LinUcbPolicy(std::size_t dim, const PolicyConfig& cfg)
    : LinUcbPolicy(RidgeState::prior(dim, cfg.lambda), cfg) {}

LinUcbPolicy::LinUcbPolicy(RidgeState state, const PolicyConfig& cfg)
    : kind_(cfg.kind), confidence_(cfg.confidence), state_(std::move(state)) {
  if (kind_ != PolicyKind::linucb_pbm && kind_ != PolicyKind::linucb_naive) {
    throw std::invalid_argument("LinUcbPolicy: kind must be a LinUCB variant");
  }
  theta_ = ridge_theta(state_);
}

std::vector<ScoredAction> LinUcbPolicy::score(
    std::span<const ContextualizedAction> candidates, Rng&) const {
  const double root_f = std::sqrt(confidence_radius(state_, confidence_));
  std::vector<ScoredAction> out;
  out.reserve(candidates.size());
  for (const auto& a : candidates) {
    if (static_cast<std::size_t>(a.features.size()) != dim()) {
      throw DimensionError("LinUCB score: action dimension mismatch");
    }
    const double width = std::max(0.0, a.features.dot(state_.V_inv * a.features));
    out.push_back({a.id, a.features.dot(theta_) + root_f * std::sqrt(width)});
  }
  return out;
}

void LinUcbPolicy::apply_update(const PositionBias& q, const Slate& slate,
                                const SlateFeedback& fb) {
  update_linucb(state_, q, slate, fb);
  theta_ = ridge_theta(state_);
}

std::unique_ptr<Policy> LinUcbPolicy::clone() const {
  return std::make_unique<LinUcbPolicy>(*this);
}

nlohmann::json LinUcbPolicy::to_json() const {
  nlohmann::json j;
  j["format"] = "pbmrank-policy";
  j["version"] = kPolicySnapshotVersion;
  j["kind"] = std::string(to_string(kind_));
  j["d"] = dim();
  j["lambda"] = state_.lambda;
  j["delta"] = confidence_.delta;
  j["s_bound"] = confidence_.s_bound;
  j["t"] = state_.t;
  j["observations"] = state_.observations;
  j["rounds_since_refactor"] = state_.rounds_since_refactor;
  j["V"] = matrix_to_json(state_.V);
  j["V_inv"] = matrix_to_json(state_.V_inv);
  j["b"] = vector_to_json(state_.b);
  j["theta"] = vector_to_json(theta_);
  return j;
}

LinTsPolicy::LinTsPolicy(std::size_t dim, const PolicyConfig& cfg)
    : LinTsPolicy(NIGState::from_prior(dim, NigPrior{cfg.lambda, cfg.alpha0, cfg.beta0,
                                                     cfg.alpha_per_observation}),
                  cfg.kind) {}

LinTsPolicy::LinTsPolicy(NIGState state, PolicyKind kind)
    : kind_(kind), state_(std::move(state)) {
  if (kind_ != PolicyKind::lints_pbm && kind_ != PolicyKind::lints_naive) {
    throw std::invalid_argument("LinTsPolicy: kind must be a Thompson sampling variant");
  }
}

std::vector<ScoredAction> LinTsPolicy::score(
    std::span<const ContextualizedAction> candidates, Rng& rng) const {
  const Eigen::VectorXd sample = ts_sample(state_, rng);
  std::vector<ScoredAction> out;
  out.reserve(candidates.size());
  for (const auto& a : candidates) {
    if (static_cast<std::size_t>(a.features.size()) != dim()) {
      throw DimensionError("LinTS score: action dimension mismatch");
    }
    out.push_back({a.id, a.features.dot(sample)});
  }
  return out;
}

void LinTsPolicy::apply_update(const PositionBias& q, const Slate& slate,
                               const SlateFeedback& fb) {
  update_lints(state_, q, slate, fb);
}

std::unique_ptr<Policy> LinTsPolicy::clone() const {
  return std::make_unique<LinTsPolicy>(*this);
}

nlohmann::json LinTsPolicy::to_json() const {
  nlohmann::json j;
  j["format"] = "pbmrank-policy";
  j["version"] = kPolicySnapshotVersion;
  j["kind"] = std::string(to_string(kind_));
  j["d"] = dim();
  j["lambda"] = state_.prior.lambda;
  j["alpha0"] = state_.prior.alpha0;
  j["beta0"] = state_.prior.beta0;
  j["alpha_per_observation"] = state_.prior.alpha_per_observation;
  j["t"] = state_.t;
  j["observations"] = state_.observations;
  j["rounds_since_refactor"] = state_.rounds_since_refactor;
  j["alpha"] = state_.alpha;
  j["beta"] = state_.beta;
  j["eta"] = state_.eta;
  j["V"] = matrix_to_json(state_.V);
  j["V_inv"] = matrix_to_json(state_.V_inv);
  j["b"] = vector_to_json(state_.b);
  j["theta"] = vector_to_json(state_.theta);
  return j;
}

std::vector<ScoredAction> RandomPolicy::score(
    std::span<const ContextualizedAction> candidates, Rng& rng) const {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<ScoredAction> out;
  out.reserve(candidates.size());
  for (const auto& a : candidates) out.push_back({a.id, unif(rng)});
  return out;
}

std::unique_ptr<Policy> RandomPolicy::clone() const {
  return std::make_unique<RandomPolicy>(*this);
}

nlohmann::json RandomPolicy::to_json() const {
  nlohmann::json j;
  j["format"] = "pbmrank-policy";
  j["version"] = kPolicySnapshotVersion;
  j["kind"] = "random";
  j["d"] = dim_;
  j["t"] = t_;
  return j;
}

std::unique_ptr<Policy> make_policy(const PolicyConfig& cfg, std::size_t dim) {
  switch (cfg.kind) {
    case PolicyKind::linucb_pbm:
    case PolicyKind::linucb_naive:
      return std::make_unique<LinUcbPolicy>(dim, cfg);
    case PolicyKind::lints_pbm:
    case PolicyKind::lints_naive:
      return std::make_unique<LinTsPolicy>(dim, cfg);
    case PolicyKind::random:
      return std::make_unique<RandomPolicy>(dim);
  }
  throw std::invalid_argument("make_policy: unknown kind");
}

Slate rank_round(const Policy& policy, std::span<const ContextualizedAction> candidates,
                 const PositionBias& q, Rng& rng) {
  if (candidates.empty()) throw std::invalid_argument("rank_round: no candidates");
  const std::size_t L = q.size();
  const std::vector<ScoredAction> scored = policy.score(candidates, rng);
  const PositionBias ranking_bias = policy.bias_aware() ? q : PositionBias::ones(L);
  const std::vector<std::size_t> assignment = select_top_L(scored, ranking_bias, L);
  Slate slate;
  slate.entries.reserve(L);
  for (std::size_t idx : assignment) slate.entries.push_back(candidates[idx]);
  return slate;
}

nlohmann::json policy_to_json(const Policy& policy) { return policy.to_json(); }

std::unique_ptr<Policy> policy_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string()) != "pbmrank-policy") {
    throw std::invalid_argument("policy snapshot: unrecognized format");
  }
  const int version = j.at("version").get<int>();
  if (version != kPolicySnapshotVersion) {
    throw std::invalid_argument("policy snapshot: unsupported version " +
                                std::to_string(version));
  }
  const PolicyKind kind = parse_policy_kind(j.at("kind").get<std::string>());
  const auto dim = j.at("d").get<std::size_t>();
  switch (kind) {
    case PolicyKind::linucb_pbm:
    case PolicyKind::linucb_naive: {
      RidgeState s;
      s.lambda = j.at("lambda").get<double>();
      s.t = j.at("t").get<std::uint64_t>();
      s.observations = j.at("observations").get<std::uint64_t>();
      s.rounds_since_refactor = j.at("rounds_since_refactor").get<std::uint64_t>();
      s.V = matrix_from_json(j.at("V"), dim, "V");
      s.V_inv = matrix_from_json(j.at("V_inv"), dim, "V_inv");
      s.b = vector_from_json(j.at("b"), dim, "b");
      PolicyConfig cfg;
      cfg.kind = kind;
      cfg.lambda = s.lambda;
      cfg.confidence = {j.at("delta").get<double>(), j.at("s_bound").get<double>()};
      return std::make_unique<LinUcbPolicy>(std::move(s), cfg);
    }
    case PolicyKind::lints_pbm:
    case PolicyKind::lints_naive: {
      NIGState s;
      s.prior = {j.at("lambda").get<double>(), j.at("alpha0").get<double>(),
                 j.at("beta0").get<double>(), j.at("alpha_per_observation").get<bool>()};
      s.t = j.at("t").get<std::uint64_t>();
      s.observations = j.at("observations").get<std::uint64_t>();
      s.rounds_since_refactor = j.at("rounds_since_refactor").get<std::uint64_t>();
      s.alpha = j.at("alpha").get<double>();
      s.beta = j.at("beta").get<double>();
      s.eta = j.at("eta").get<double>();
      s.V = matrix_from_json(j.at("V"), dim, "V");
      s.V_inv = matrix_from_json(j.at("V_inv"), dim, "V_inv");
      s.b = vector_from_json(j.at("b"), dim, "b");
      s.theta = vector_from_json(j.at("theta"), dim, "theta");
      return std::make_unique<LinTsPolicy>(std::move(s), kind);
    }
    case PolicyKind::random: {
      return std::make_unique<RandomPolicy>(dim, j.at("t").get<std::uint64_t>());
    }
  }
  throw std::invalid_argument("policy snapshot: unknown kind");
}

}  // namespace pbmrank

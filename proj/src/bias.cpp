#include "pbmrank/bias.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>

namespace pbmrank {

namespace {

constexpr double kMinEmBias = 1e-6;

std::size_t slot_of(int position, std::size_t slots, const char* who) {
  if (position < 1 || static_cast<std::size_t>(position) > slots) {
    throw std::out_of_range(std::string(who) + ": position " + std::to_string(position) +
                            " outside [1, " + std::to_string(slots) + "]");
  }
  return static_cast<std::size_t>(position - 1);
}

double normal_pdf(double t) {
  return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi);
}

double normal_cdf(double t) { return 0.5 * std::erfc(-t / std::numbers::sqrt2); }

// v(t) = N(t) / Phi(t); uses the Mills-ratio series deep in the left tail.
double truncation_v(double t) {
  if (t < -8.0) {
    const double x = -t;
    const double x2 = x * x;
    const double mills = (1.0 / x) * (1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2));
    return 1.0 / mills;
  }
  return normal_pdf(t) / normal_cdf(t);
}

double truncation_w(double t) {
  const double v = truncation_v(t);
  return v * (v + t);
}

nlohmann::json to_json_vec(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd from_json_vec(const nlohmann::json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(),
                                           static_cast<Eigen::Index>(values.size()));
}

BiasEstimate fallback_estimate(std::size_t slots) {
  return {fallback_bias(slots), std::vector<bool>(slots, true)};
}

}  // namespace

// --- CTR --------------------------------------------------------------------

double CtrState::rate(int position) const {
  const std::size_t s = slot_of(position, slots(), "ctr");
  if (impressions[s] == 0) {
    throw NotEstimableError("ctr: no impressions at position " + std::to_string(position));
  }
  return click_sum[s] / static_cast<double>(impressions[s]);
}

void ctr_record(CtrState& state, int position, double click) {
  const std::size_t s = slot_of(position, state.slots(), "ctr_record");
  if (!(click >= 0.0 && click <= 1.0)) {
    throw std::invalid_argument("ctr_record: click must lie in [0,1]");
  }
  state.click_sum[s] += click;
  ++state.impressions[s];
}

void ctr_update(CtrState& state, std::span<const ClickLogEntry> entries) {
  for (const auto& e : entries) ctr_record(state, e.position, e.click);
}

BiasEstimate ctr_bias(const CtrState& state) {
  const std::size_t slots = state.slots();
  if (slots == 0) throw std::invalid_argument("ctr_bias: no positions");
  if (state.impressions[0] == 0 || state.click_sum[0] <= 0.0) {
    throw NotEstimableError("ctr_bias: no clicks observed at position 1");
  }
  const double top = state.rate(1);
  const PositionBias fallback = fallback_bias(slots);
  std::vector<double> q(slots);
  std::vector<bool> low(slots, false);
  for (std::size_t s = 0; s < slots; ++s) {
    if (state.impressions[s] == 0) {
      q[s] = fallback[s];
      low[s] = true;
    } else {
      q[s] = std::min(1.0, state.rate(static_cast<int>(s) + 1) / top);
    }
  }
  return {PositionBias(std::move(q)), std::move(low)};
}

// --- Probit -----------------------------------------------------------------

ProbitState::ProbitState(std::size_t slots, std::size_t dim, const ProbitConfig& cfg)
    : steepness(cfg.steepness) {
  if (!(cfg.steepness > 0.0) || !(cfg.prior_variance > 0.0)) {
    throw std::invalid_argument("probit: steepness and prior variance must be > 0");
  }
  const auto d = static_cast<Eigen::Index>(dim);
  positions.assign(slots, ProbitPositionModel{Eigen::VectorXd::Zero(d),
                                              Eigen::VectorXd::Constant(d, cfg.prior_variance),
                                              0});
}

std::size_t ProbitState::dim() const {
  return positions.empty() ? 0 : static_cast<std::size_t>(positions.front().mean.size());
}

double probit_predict(const ProbitState& state, int position,
                      const Eigen::VectorXd& features) {
  const auto& m = state.positions[slot_of(position, state.slots(), "probit_predict")];
  if (features.size() != m.mean.size()) {
    throw DimensionError("probit_predict: feature dimension " +
                         std::to_string(features.size()) + " != " +
                         std::to_string(m.mean.size()));
  }
  const double total = state.steepness * state.steepness +
                       m.variance.dot(features.cwiseAbs2());
  return normal_cdf(m.mean.dot(features) / std::sqrt(total));
}

void probit_update(ProbitState& state, int position, const Eigen::VectorXd& features,
                   int click) {
  if (click != 0 && click != 1) throw std::invalid_argument("probit_update: click must be 0 or 1");
  auto& m = state.positions[slot_of(position, state.slots(), "probit_update")];
  if (features.size() != m.mean.size()) {
    throw DimensionError("probit_update: feature dimension mismatch");
  }
  if (features.isZero(0.0)) return;
  const double y = click == 1 ? 1.0 : -1.0;
  const Eigen::VectorXd x2 = features.cwiseAbs2();
  const double total2 = state.steepness * state.steepness + m.variance.dot(x2);
  const double total = std::sqrt(total2);
  const double t = y * m.mean.dot(features) / total;
  const double v = truncation_v(t);
  const double w = truncation_w(t);
  m.mean += (y * v / total) * m.variance.cwiseProduct(features);
  m.variance = m.variance.cwiseProduct(
      (1.0 - (w / total2) * m.variance.cwiseProduct(x2).array()).matrix());
  ++m.updates;
}

void probit_update(ProbitState& state, const ClickLogEntry& entry) {
  probit_update(state, entry.position, contextualize(entry.action, entry.context).features,
                entry.click);
}

BiasEstimate probit_bias(const ProbitState& state, std::span<const Eigen::VectorXd> probes) {
  if (probes.empty()) throw std::invalid_argument("probit_bias: empty probe set");
  const std::size_t slots = state.slots();
  if (slots == 0 || state.positions[0].updates == 0) {
    throw NotEstimableError("probit_bias: position 1 model has no updates");
  }
  std::vector<double> top(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i) top[i] = probit_predict(state, 1, probes[i]);

  const PositionBias fallback = fallback_bias(slots);
  std::vector<double> q(slots, 1.0);
  std::vector<bool> low(slots, false);
  for (std::size_t s = 1; s < slots; ++s) {
    if (state.positions[s].updates == 0) {
      q[s] = fallback[s];
      low[s] = true;
      continue;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
      sum += probit_predict(state, static_cast<int>(s) + 1, probes[i]) / top[i];
    }
    q[s] = std::clamp(sum / static_cast<double>(probes.size()), 0.0, 1.0);
  }
  return {PositionBias(std::move(q)), std::move(low)};
}

// --- EM ---------------------------------------------------------------------

double em_e_step(double q, double gamma, int click) {
  if (!(q >= 0.0 && q <= 1.0) || !(gamma >= 0.0 && gamma <= 1.0)) {
    throw std::invalid_argument("em_e_step: q and gamma must lie in [0,1]");
  }
  if (click == 1) return 1.0;
  if (click != 0) throw std::invalid_argument("em_e_step: click must be 0 or 1");
  const double denom = 1.0 - q * gamma;
  if (denom <= 0.0) {
    throw NumericalError("em_e_step: q * gamma = 1 with no click is impossible under PBM");
  }
  return q * (1.0 - gamma) / denom;
}

double em_gamma(double model_score, RelevanceLink link, double clamp) {
  const double raw = link == RelevanceLink::logistic ? logistic(model_score) : model_score;
  return std::clamp(raw, clamp, 1.0 - clamp);
}

void em_accumulate(EmState& state, int position, int click, double gamma) {
  const std::size_t s = slot_of(position, state.slots(), "em_accumulate");
  state.numerator[s] += em_e_step(state.q[s], gamma, click);
  ++state.count[s];
}

PositionBias em_m_step(const EmState& state) {
  bool any = false;
  std::vector<double> q = state.q;
  for (std::size_t s = 0; s < state.slots(); ++s) {
    if (state.count[s] == 0) continue;
    any = true;
    q[s] = std::clamp(state.numerator[s] / static_cast<double>(state.count[s]), kMinEmBias, 1.0);
  }
  if (!any) throw NotEstimableError("em_m_step: no accumulated records");
  return PositionBias(std::move(q));
}

EmState em_init_with_epsilon(std::size_t slots, double epsilon) {
  if (slots == 0) throw std::invalid_argument("em_init: need at least one position");
  EmState s;
  s.q.resize(slots);
  for (std::size_t l = 0; l < slots; ++l) s.q[l] = 1.0 / (static_cast<double>(l + 1) + epsilon);
  s.numerator.assign(slots, 0.0);
  s.count.assign(slots, 0);
  return s;
}

EmState em_init(std::size_t slots, Rng& rng, EmInit init) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (init == EmInit::harmonic) {
    double eps = 0.0;
    while (eps == 0.0) eps = 0.1 * unif(rng);
    return em_init_with_epsilon(slots, eps);
  }
  EmState s = em_init_with_epsilon(slots, 0.0);
  for (auto& q : s.q) q = 1.0 - unif(rng);  // (0, 1]
  return s;
}

std::vector<std::vector<double>> em_sweeps(std::span<const EmRecord> records,
                                           std::vector<double> q, int sweeps) {
  std::vector<std::vector<double>> trace;
  for (int it = 0; it < sweeps; ++it) {
    EmState st{q, std::vector<double>(q.size(), 0.0),
               std::vector<std::uint64_t>(q.size(), 0)};
    for (const auto& r : records) em_accumulate(st, r.position, r.click, r.gamma);
    q = em_m_step(st).values();
    trace.push_back(q);
  }
  return trace;
}

JointEmResult em_joint(std::span<const ClickLogEntry> entries, std::size_t slots,
                       std::vector<double> q, int sweeps) {
  if (q.size() != slots) throw DimensionError("em_joint: initial q has wrong length");
  std::map<std::uint64_t, double> gamma;
  for (const auto& e : entries) {
    slot_of(e.position, slots, "em_joint");
    gamma.emplace(e.action.id.value, 0.5);
  }
  JointEmResult out;
  for (int it = 0; it < sweeps; ++it) {
    std::vector<double> q_num(slots, 0.0), q_den(slots, 0.0);
    std::map<std::uint64_t, std::pair<double, double>> g_acc;
    for (const auto& e : entries) {
      const std::size_t s = static_cast<std::size_t>(e.position - 1);
      const double g = gamma[e.action.id.value];
      double p_exam = 1.0, p_rel = 1.0;
      if (e.click == 0) {
        const double denom = 1.0 - q[s] * g;
        p_exam = q[s] * (1.0 - g) / denom;
        p_rel = (1.0 - q[s]) * g / denom;
      }
      q_num[s] += p_exam;
      q_den[s] += 1.0;
      auto& acc = g_acc[e.action.id.value];
      acc.first += p_rel;
      acc.second += 1.0;
    }
    for (std::size_t s = 0; s < slots; ++s) {
      if (q_den[s] > 0.0) q[s] = std::clamp(q_num[s] / q_den[s], kMinEmBias, 1.0);
    }
    for (auto& [id, g] : gamma) {
      const auto& acc = g_acc[id];
      g = std::clamp(acc.first / acc.second, 1e-4, 1.0 - 1e-4);
    }
    double ll = 0.0;
    for (const auto& e : entries) {
      const double p = q[static_cast<std::size_t>(e.position - 1)] * gamma[e.action.id.value];
      ll += e.click == 1 ? std::log(p) : std::log1p(-p);
    }
    out.q_trace.push_back(q);
    out.log_likelihood.push_back(ll);
  }
  out.q = q;
  return out;
}

// --- Estimators -------------------------------------------------------------

std::string_view to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::real: return "real";
    case EstimatorKind::fixed: return "fixed";
    case EstimatorKind::ctr: return "ctr";
    case EstimatorKind::probit: return "probit";
    case EstimatorKind::em: return "em";
  }
  return "unknown";
}

EstimatorKind parse_estimator_kind(std::string_view name) {
  for (auto k : {EstimatorKind::real, EstimatorKind::fixed, EstimatorKind::ctr,
                 EstimatorKind::probit, EstimatorKind::em}) {
    if (to_string(k) == name) return k;
  }
  if (name == "pr") return EstimatorKind::probit;
  throw std::invalid_argument("unknown estimator '" + std::string(name) + "'");
}

FixedBiasEstimator::FixedBiasEstimator(PositionBias q, EstimatorKind kind)
    : q_(std::move(q)), kind_(kind) {}

BiasEstimate FixedBiasEstimator::estimate() const {
  return {q_, std::vector<bool>(q_.size(), false)};
}

std::unique_ptr<BiasEstimator> FixedBiasEstimator::clone() const {
  return std::make_unique<FixedBiasEstimator>(*this);
}

nlohmann::json FixedBiasEstimator::to_json() const {
  return {{"kind", std::string(to_string(kind_))}, {"q", q_.values()}};
}

void CtrEstimator::observe(int position, int click, const Eigen::VectorXd&, double) {
  ctr_record(state_, position, click);
}

BiasEstimate CtrEstimator::estimate() const {
  try {
    return ctr_bias(state_);
  } catch (const NotEstimableError&) {
    return fallback_estimate(slots());
  }
}

std::unique_ptr<BiasEstimator> CtrEstimator::clone() const {
  return std::make_unique<CtrEstimator>(*this);
}

nlohmann::json CtrEstimator::to_json() const {
  return {{"kind", "ctr"}, {"click_sum", state_.click_sum}, {"impressions", state_.impressions}};
}

ProbitEstimator::ProbitEstimator(std::size_t slots, std::size_t dim, const ProbitConfig& cfg)
    : state_(slots, dim, cfg), probe_capacity_(cfg.probe_capacity) {
  if (probe_capacity_ == 0) throw std::invalid_argument("probit: probe capacity must be > 0");
}

ProbitEstimator::ProbitEstimator(ProbitState state, std::deque<Eigen::VectorXd> probes,
                                 std::size_t probe_capacity)
    : state_(std::move(state)), probes_(std::move(probes)), probe_capacity_(probe_capacity) {}

void ProbitEstimator::observe(int position, int click, const Eigen::VectorXd& features,
                              double) {
  probit_update(state_, position, features, click);
  probes_.push_back(features);
  if (probes_.size() > probe_capacity_) probes_.pop_front();
}

BiasEstimate ProbitEstimator::estimate() const {
  if (probes_.empty()) return fallback_estimate(slots());
  try {
    const std::vector<Eigen::VectorXd> probes(probes_.begin(), probes_.end());
    return probit_bias(state_, probes);
  } catch (const NotEstimableError&) {
    return fallback_estimate(slots());
  }
}

std::unique_ptr<BiasEstimator> ProbitEstimator::clone() const {
  return std::make_unique<ProbitEstimator>(*this);
}

nlohmann::json ProbitEstimator::to_json() const {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : state_.positions) {
    models.push_back({{"mean", to_json_vec(m.mean)},
                      {"variance", to_json_vec(m.variance)},
                      {"updates", m.updates}});
  }
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : probes_) probes.push_back(to_json_vec(p));
  return {{"kind", "probit"},
          {"steepness", state_.steepness},
          {"probe_capacity", probe_capacity_},
          {"models", models},
          {"probes", probes}};
}

EmEstimator::EmEstimator(std::size_t slots, const EmConfig& cfg, Rng& rng)
    : state_(em_init(slots, rng, cfg.init)), cfg_(cfg) {
  if (cfg_.m_step_every == 0) throw std::invalid_argument("em: m_step_every must be > 0");
}

EmEstimator::EmEstimator(EmState state, const EmConfig& cfg, std::uint64_t rounds)
    : state_(std::move(state)), cfg_(cfg), rounds_(rounds) {}

void EmEstimator::observe(int position, int click, const Eigen::VectorXd&,
                          double model_score) {
  em_accumulate(state_, position, click, em_gamma(model_score, cfg_.link, cfg_.gamma_clamp));
}

void EmEstimator::end_round() {
  ++rounds_;
  if (rounds_ % cfg_.m_step_every != 0) return;
  bool any = false;
  for (auto c : state_.count) any = any || c > 0;
  if (!any) return;
  state_.q = em_m_step(state_).values();
  ++m_steps_;
  if (cfg_.accumulation == EmAccumulation::window) {
    std::fill(state_.numerator.begin(), state_.numerator.end(), 0.0);
    std::fill(state_.count.begin(), state_.count.end(), 0);
  }
}

BiasEstimate EmEstimator::estimate() const {
  std::vector<bool> low(slots(), m_steps_ == 0);
  if (cfg_.accumulation == EmAccumulation::cumulative) {
    for (std::size_t s = 0; s < slots(); ++s) low[s] = low[s] || state_.count[s] == 0;
  }
  return {PositionBias(state_.q), std::move(low)};
}

std::unique_ptr<BiasEstimator> EmEstimator::clone() const {
  return std::make_unique<EmEstimator>(*this);
}

nlohmann::json EmEstimator::to_json() const {
  return {{"kind", "em"},
          {"q", state_.q},
          {"numerator", state_.numerator},
          {"count", state_.count},
          {"rounds", rounds_},
          {"m_steps", m_steps_},
          {"m_step_every", cfg_.m_step_every},
          {"link", cfg_.link == RelevanceLink::logistic ? "logistic" : "identity"},
          {"accumulation", cfg_.accumulation == EmAccumulation::cumulative ? "cumulative" : "window"},
          {"gamma_clamp", cfg_.gamma_clamp}};
}

std::unique_ptr<BiasEstimator> make_estimator(const EstimatorConfig& cfg, std::size_t slots,
                                              std::size_t dim, Rng& rng) {
  switch (cfg.kind) {
    case EstimatorKind::real:
    case EstimatorKind::fixed: {
      if (cfg.fixed_q.size() != slots) {
        throw DimensionError("fixed estimator: q has " + std::to_string(cfg.fixed_q.size()) +
                             " entries, expected " + std::to_string(slots));
      }
      return std::make_unique<FixedBiasEstimator>(PositionBias(cfg.fixed_q), cfg.kind);
    }
    case EstimatorKind::ctr:
      return std::make_unique<CtrEstimator>(slots);
    case EstimatorKind::probit:
      return std::make_unique<ProbitEstimator>(slots, dim, cfg.probit);
    case EstimatorKind::em:
      return std::make_unique<EmEstimator>(slots, cfg.em, rng);
  }
  throw std::invalid_argument("make_estimator: unknown kind");
}

std::unique_ptr<BiasEstimator> estimator_from_json(const nlohmann::json& j) {
  const EstimatorKind kind = parse_estimator_kind(j.at("kind").get<std::string>());
  switch (kind) {
    case EstimatorKind::real:
    case EstimatorKind::fixed:
      return std::make_unique<FixedBiasEstimator>(
          PositionBias(j.at("q").get<std::vector<double>>()), kind);
    case EstimatorKind::ctr: {
      CtrState s;
      s.click_sum = j.at("click_sum").get<std::vector<double>>();
      s.impressions = j.at("impressions").get<std::vector<std::uint64_t>>();
      if (s.click_sum.size() != s.impressions.size()) {
        throw DimensionError("ctr snapshot: inconsistent lengths");
      }
      return std::make_unique<CtrEstimator>(std::move(s));
    }
    case EstimatorKind::probit: {
      ProbitState s;
      s.steepness = j.at("steepness").get<double>();
      for (const auto& m : j.at("models")) {
        s.positions.push_back({from_json_vec(m.at("mean")), from_json_vec(m.at("variance")),
                               m.at("updates").get<std::uint64_t>()});
      }
      std::deque<Eigen::VectorXd> probes;
      for (const auto& p : j.at("probes")) probes.push_back(from_json_vec(p));
      return std::make_unique<ProbitEstimator>(std::move(s), std::move(probes),
                                               j.at("probe_capacity").get<std::size_t>());
    }
    case EstimatorKind::em: {
      EmState s;
      s.q = j.at("q").get<std::vector<double>>();
      s.numerator = j.at("numerator").get<std::vector<double>>();
      s.count = j.at("count").get<std::vector<std::uint64_t>>();
      if (s.numerator.size() != s.q.size() || s.count.size() != s.q.size()) {
        throw DimensionError("em snapshot: inconsistent lengths");
      }
      EmConfig cfg;
      cfg.m_step_every = j.at("m_step_every").get<std::size_t>();
      cfg.link = j.at("link").get<std::string>() == "logistic" ? RelevanceLink::logistic
                                                              : RelevanceLink::identity;
      cfg.accumulation = j.at("accumulation").get<std::string>() == "cumulative"
                             ? EmAccumulation::cumulative
                             : EmAccumulation::window;
      cfg.gamma_clamp = j.at("gamma_clamp").get<double>();
      auto est = std::make_unique<EmEstimator>(std::move(s), cfg,
                                               j.at("rounds").get<std::uint64_t>());
      est->restore_m_steps(j.at("m_steps").get<std::size_t>());
      return est;
    }
  }
  throw std::invalid_argument("estimator snapshot: unknown kind");
}

}  // namespace pbmrank

#include "pbmrank/core.hpp"

#include <cmath>
#include <string>

#include "json.hpp"

namespace pbmrank {

namespace {

Eigen::VectorXd to_vector(const nlohmann::json& arr, const char* key) {
  if (!arr.is_array()) {
    throw std::invalid_argument(std::string("click log: '") + key +
                                "' must be an array");
  }
  Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  }
  return v;
}

nlohmann::json to_array(const Eigen::VectorXd& v) {
  auto arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

}  // namespace

PositionBias::PositionBias(std::vector<double> q) : q_(std::move(q)) {
  for (double v : q_) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw std::invalid_argument("position bias entries must lie in [0,1]");
    }
  }
}

PositionBias PositionBias::ones(std::size_t slots) {
  return PositionBias(std::vector<double>(slots, 1.0));
}

PositionBias fallback_bias(std::size_t slots) {
  std::vector<double> q(slots);
  for (std::size_t s = 0; s < slots; ++s) q[s] = std::exp(-static_cast<double>(s));
  return PositionBias(std::move(q));
}

std::vector<ActionId> Slate::ids() const {
  std::vector<ActionId> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.id);
  return out;
}

Contextualizer::Contextualizer(std::size_t action_dim, std::size_t context_dim)
    : action_dim_(action_dim), context_dim_(context_dim) {}

ContextualizedAction Contextualizer::operator()(
    const ActionVector& action, const ContextVector& context) const {
  const auto da = static_cast<Eigen::Index>(action_dim_);
  const auto dc = static_cast<Eigen::Index>(context_dim_);
  if (action.features.size() != da || context.features.size() != dc) {
    throw DimensionError("contextualize: expected action dim " +
                         std::to_string(action_dim_) + " and context dim " +
                         std::to_string(context_dim_) + ", got " +
                         std::to_string(action.features.size()) + " and " +
                         std::to_string(context.features.size()));
  }
  if (!action.features.allFinite() || !context.features.allFinite()) {
    throw std::invalid_argument("contextualize: non-finite input");
  }
  ContextualizedAction out{action.id, Eigen::VectorXd(da + dc + da * dc)};
  Eigen::VectorXd& f = out.features;
  f.head(da) = action.features;
  f.segment(da, dc) = context.features;
  Eigen::Index k = da + dc;
  for (Eigen::Index i = 0; i < da; ++i) {
    for (Eigen::Index j = 0; j < dc; ++j) {
      f[k++] = action.features[i] * context.features[j];
    }
  }
  const double sq = f.squaredNorm();
  if (sq > 0.0) f /= sq;
  return out;
}

ContextualizedAction contextualize(const ActionVector& action,
                                   const ContextVector& context) {
  return Contextualizer(static_cast<std::size_t>(action.features.size()),
                        static_cast<std::size_t>(context.features.size()))(
      action, context);
}

double expected_click_probability(double examination, double relevance) {
  if (!(examination >= 0.0 && examination <= 1.0) ||
      !(relevance >= 0.0 && relevance <= 1.0)) {
    throw std::invalid_argument(
        "expected_click_probability: inputs must lie in [0,1]");
  }
  return examination * relevance;
}

double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::string to_json_line(const ClickLogEntry& entry) {
  nlohmann::json j;
  j["click"] = entry.click;
  j["context"] = to_array(entry.context.features);
  j["action_id"] = entry.action.id.value;
  j["action"] = to_array(entry.action.features);
  j["position"] = entry.position;
  j["ts"] = entry.ts;
  if (entry.request_id) j["request_id"] = *entry.request_id;
  return j.dump();
}

ClickLogEntry parse_click_log_line(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("click log: ") + e.what());
  }
  for (const char* key : {"click", "context", "action_id", "action", "position", "ts"}) {
    if (!j.contains(key)) {
      throw std::invalid_argument(std::string("click log: missing key '") + key + "'");
    }
  }
  ClickLogEntry e;
  e.click = j.at("click").get<int>();
  if (e.click != 0 && e.click != 1) {
    throw std::invalid_argument("click log: click must be 0 or 1");
  }
  e.context.features = to_vector(j.at("context"), "context");
  e.action.id = ActionId{j.at("action_id").get<std::uint64_t>()};
  e.action.features = to_vector(j.at("action"), "action");
  e.position = j.at("position").get<int>();
  if (e.position < 1) {
    throw std::invalid_argument("click log: position is 1-based");
  }
  e.ts = j.at("ts").get<std::int64_t>();
  if (j.contains("request_id")) e.request_id = j.at("request_id").get<std::string>();
  return e;
}

std::vector<ClickLogEntry> read_click_log(std::istream& in) {
  std::vector<ClickLogEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_click_log_line(line));
  }
  return out;
}

}  // namespace pbmrank

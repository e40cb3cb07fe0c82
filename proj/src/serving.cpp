#include "pbmrank/serving.hpp"

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "httplib.h"
#include "pbmrank/env.hpp"

namespace pbmrank {

namespace {

std::int64_t system_now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::vector<ActionVector> synthetic_catalog(std::size_t size, std::size_t d_a,
                                            std::uint64_t seed) {
  Rng rng = stream_rng(seed, 99);
  std::vector<ActionVector> out;
  for (std::size_t k = 0; k < size; ++k) out.push_back({ActionId{k}, sparse_uniform(d_a, rng)});
  return out;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw ServiceError("bad_request", std::string(what) + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ServiceError("bad_request", std::string(what) + " must be numeric");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

std::size_t count_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void ServiceConfig::validate() const {
  if (d_a == 0 || d_c == 0) throw std::invalid_argument("service: d_a and d_c must be positive");
  if (max_slots == 0) throw std::invalid_argument("service: max_slots must be positive");
  if (catalog.empty()) throw std::invalid_argument("service: catalog is empty");
  std::set<std::uint64_t> ids;
  for (const auto& a : catalog) {
    if (a.features.size() != static_cast<Eigen::Index>(d_a)) {
      throw DimensionError("service: catalog action " + std::to_string(a.id.value) +
                           " has dimension " + std::to_string(a.features.size()));
    }
    if (!ids.insert(a.id.value).second) {
      throw std::invalid_argument("service: duplicate catalog id " + std::to_string(a.id.value));
    }
  }
  if (estimator.kind == EstimatorKind::real) {
    throw std::invalid_argument("service: the 'real' estimator needs a simulator");
  }
  if (bias_refresh == 0) throw std::invalid_argument("service: bias_refresh must be positive");
}

ServiceConfig service_config_from_json(const nlohmann::json& j) {
  ServiceConfig cfg;
  cfg.host = j.value("host", cfg.host);
  cfg.port = j.value("port", cfg.port);
  if (j.contains("model_path")) cfg.model_path = j.at("model_path").get<std::string>();
  if (j.contains("log_path")) cfg.log_path = j.at("log_path").get<std::string>();
  if (j.contains("policy")) cfg.policy.kind = parse_policy_kind(j.at("policy").get<std::string>());
  if (j.contains("estimator")) {
    cfg.estimator.kind = parse_estimator_kind(j.at("estimator").get<std::string>());
  }
  cfg.policy.lambda = j.value("lambda", cfg.policy.lambda);
  cfg.policy.confidence.delta = j.value("delta", cfg.policy.confidence.delta);
  cfg.policy.alpha0 = j.value("alpha0", cfg.policy.alpha0);
  cfg.policy.beta0 = j.value("beta0", cfg.policy.beta0);
  if (j.contains("fixed_q")) cfg.estimator.fixed_q = j.at("fixed_q").get<std::vector<double>>();
  cfg.d_a = j.value("d_a", cfg.d_a);
  cfg.d_c = j.value("d_c", cfg.d_c);
  cfg.max_slots = j.value("max_slots", cfg.max_slots);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.pending_ttl_ms = j.value("pending_ttl_seconds", cfg.pending_ttl_ms / 1000) * 1000;
  cfg.warmup = j.value("warmup", cfg.warmup);
  cfg.bias_refresh = j.value("bias_refresh", cfg.bias_refresh);
  cfg.snapshot_every = j.value("snapshot_every", cfg.snapshot_every);
  if (j.contains("catalog")) {
    for (const auto& a : j.at("catalog")) {
      cfg.catalog.push_back({ActionId{a.at("id").get<std::uint64_t>()},
                             vector_from_json(a.at("features"), "catalog features")});
    }
  } else {
    cfg.catalog = synthetic_catalog(j.value("catalog_size", std::size_t{50}), cfg.d_a,
                                    j.value("catalog_seed", std::uint64_t{0}));
  }
  return cfg;
}

void apply_env_overrides(ServiceConfig& cfg,
                         const std::function<const char*(const char*)>& getenv_fn) {
  if (const char* v = getenv_fn("PBMRANK_PORT")) cfg.port = std::stoi(v);
  if (const char* v = getenv_fn("PBMRANK_MODEL_PATH")) cfg.model_path = v;
  if (const char* v = getenv_fn("PBMRANK_POLICY")) cfg.policy.kind = parse_policy_kind(v);
  if (const char* v = getenv_fn("PBMRANK_ESTIMATOR")) cfg.estimator.kind = parse_estimator_kind(v);
}

ServiceConfig load_service_config(const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open service config " + path.string());
    j = nlohmann::json::parse(in);
  }
  ServiceConfig cfg = service_config_from_json(j);
  apply_env_overrides(cfg, [](const char* name) { return std::getenv(name); });
  cfg.validate();
  return cfg;
}

// --- RankingService ---------------------------------------------------------

RankingService::RankingService(ServiceConfig cfg, Clock clock)
    : cfg_(std::move(cfg)),
      clock_(std::move(clock)),
      contextualizer_(cfg_.d_a, cfg_.d_c) {
  cfg_.validate();
  for (std::size_t i = 0; i < cfg_.catalog.size(); ++i) catalog_index_[cfg_.catalog[i].id.value] = i;
  Rng est_rng = stream_rng(cfg_.seed, 1);
  estimator_ = make_estimator(cfg_.estimator, cfg_.max_slots, cfg_.dim(), est_rng);
  auto m = std::make_shared<Model>();
  m->policy = make_policy(cfg_.policy, cfg_.dim());
  m->q_hat = cfg_.warmup > 0 ? fallback_bias(cfg_.max_slots) : estimator_->bias();
  model_ = std::move(m);
  log_lines_ = count_lines(cfg_.log_path);
}

std::unique_ptr<RankingService> RankingService::recover(ServiceConfig cfg, Clock clock) {
  auto svc = std::make_unique<RankingService>(std::move(cfg), std::move(clock));
  std::uint64_t from = 0;
  if (std::filesystem::exists(svc->cfg_.model_path)) {
    svc->restore(svc->cfg_.model_path);
    from = svc->log_lines_;
  }
  svc->replay_log(svc->cfg_.log_path, from);
  return svc;
}

std::int64_t RankingService::now() const { return clock_ ? clock_() : system_now_ms(); }

std::shared_ptr<const RankingService::Model> RankingService::model() const {
  std::lock_guard lock(model_mutex_);
  return model_;
}

std::shared_ptr<const Policy> RankingService::policy() const { return model()->policy; }

PositionBias RankingService::ranking_bias() const { return model()->q_hat; }

BiasEstimate RankingService::bias() const {
  std::lock_guard lock(writer_mutex_);
  return estimator_->estimate();
}

std::uint64_t RankingService::feedback_count() const {
  std::lock_guard lock(writer_mutex_);
  return feedback_count_;
}

std::uint64_t RankingService::log_lines() const {
  std::lock_guard lock(writer_mutex_);
  return log_lines_;
}

std::size_t RankingService::pending() const {
  std::lock_guard lock(pending_mutex_);
  return pending_.size();
}

nlohmann::json RankingService::health() const {
  const auto m = model();
  return {{"status", "ok"},
          {"policy", std::string(to_string(m->policy->kind()))},
          {"estimator", std::string(to_string(cfg_.estimator.kind))},
          {"d", cfg_.dim()},
          {"max_slots", cfg_.max_slots},
          {"catalog", cfg_.catalog.size()},
          {"rounds", m->policy->rounds()},
          {"pending", pending()}};
}

void RankingService::expire_pending(std::int64_t t) {
  for (auto it = pending_.begin(); it != pending_.end();) {
    if (t - it->second.created_ms > cfg_.pending_ttl_ms) {
      std::fprintf(stderr, "pbmrank: dropping expired slate %s\n", it->first.c_str());
      it = pending_.erase(it);
    } else {
      ++it;
    }
  }
  for (auto it = consumed_.begin(); it != consumed_.end();) {
    it = t - it->second > cfg_.pending_ttl_ms ? consumed_.erase(it) : std::next(it);
  }
}

RankResponse RankingService::rank(const RankRequest& req) {
  if (req.context.features.size() != static_cast<Eigen::Index>(cfg_.d_c)) {
    throw ServiceError("dimension", "context has dimension " +
                                        std::to_string(req.context.features.size()) +
                                        ", expected " + std::to_string(cfg_.d_c));
  }
  std::vector<const ActionVector*> actions;
  if (req.candidates.empty()) {
    for (const auto& a : cfg_.catalog) actions.push_back(&a);
  } else {
    std::set<std::uint64_t> seen;
    for (const auto& id : req.candidates) {
      const auto it = catalog_index_.find(id.value);
      if (it == catalog_index_.end()) {
        throw ServiceError("unknown_action", "unknown action id " + std::to_string(id.value));
      }
      if (!seen.insert(id.value).second) {
        throw ServiceError("bad_request", "candidate " + std::to_string(id.value) + " listed twice");
      }
      actions.push_back(&cfg_.catalog[it->second]);
    }
  }
  const std::size_t L = req.L == 0 ? std::min(cfg_.max_slots, actions.size()) : req.L;
  if (L > actions.size()) {
    throw ServiceError("slate_too_long", "L = " + std::to_string(L) + " exceeds the " +
                                             std::to_string(actions.size()) + " candidates");
  }
  if (L > cfg_.max_slots) {
    throw ServiceError("slate_too_long", "L = " + std::to_string(L) + " exceeds max_slots " +
                                             std::to_string(cfg_.max_slots));
  }

  std::string id = req.request_id;
  {
    std::lock_guard lock(pending_mutex_);
    if (id.empty()) {
      do {
        id = "r" + std::to_string(next_request_++);
      } while (pending_.count(id) || consumed_.count(id));
    } else if (pending_.count(id) || consumed_.count(id)) {
      throw ServiceError("duplicate_request", "request id '" + id + "' already used");
    }
  }

  std::vector<ContextualizedAction> cands;
  cands.reserve(actions.size());
  for (const auto* a : actions) cands.push_back(contextualizer_(*a, req.context));

  const auto m = model();
  const PositionBias q(std::vector<double>(m->q_hat.values().begin(),
                                           m->q_hat.values().begin() + static_cast<long>(L)));
  Rng rng = stream_rng(cfg_.seed, fnv1a64(id));
  const std::vector<ScoredAction> scored = m->policy->score(cands, rng);
  const auto assignment =
      select_top_L(scored, m->policy->bias_aware() ? q : PositionBias::ones(L), L);

  RankResponse resp;
  resp.request_id = id;
  Pending p;
  p.context = req.context;
  p.created_ms = now();
  for (std::size_t idx : assignment) {
    resp.slate.entries.push_back(cands[idx]);
    resp.scores.push_back(scored[idx].score);
    p.actions.push_back(*actions[idx]);
  }
  p.slate = resp.slate;

  std::lock_guard lock(pending_mutex_);
  expire_pending(p.created_ms);
  if (!pending_.emplace(id, std::move(p)).second) {
    throw ServiceError("duplicate_request", "request id '" + id + "' already used");
  }
  return resp;
}

void RankingService::feedback(const FeedbackEvent& ev) {
  std::lock_guard writer(writer_mutex_);
  Pending p;
  {
    std::lock_guard lock(pending_mutex_);
    expire_pending(now());
    if (consumed_.count(ev.request_id)) {
      throw ServiceError("duplicate_feedback",
                         "feedback for '" + ev.request_id + "' was already applied");
    }
    const auto it = pending_.find(ev.request_id);
    if (it == pending_.end()) {
      throw ServiceError("unknown_request", "no pending slate for '" + ev.request_id + "'");
    }
    if (ev.clicks.size() != it->second.slate.size()) {
      throw ServiceError("position_out_of_range",
                         "expected " + std::to_string(it->second.slate.size()) +
                             " click indicators, got " + std::to_string(ev.clicks.size()));
    }
    for (int c : ev.clicks) {
      if (c != 0 && c != 1) throw ServiceError("bad_request", "clicks must be 0 or 1");
    }
    p = it->second;
  }
  apply_round(p.slate, p.actions, p.context, ev.clicks, ev.request_id, ev.ts.value_or(now()),
              true);
  std::lock_guard lock(pending_mutex_);
  pending_.erase(ev.request_id);
  consumed_[ev.request_id] = now();
}

void RankingService::apply_round(const Slate& slate, const std::vector<ActionVector>& actions,
                                 const ContextVector& context, const std::vector<int>& clicks,
                                 const std::string& request_id, std::int64_t ts,
                                 bool write_log) {
  // Caller holds writer_mutex_.
  if (write_log) {
    std::ofstream log(cfg_.log_path, std::ios::app);
    if (!log) throw std::runtime_error("cannot append to click log " + cfg_.log_path.string());
    for (std::size_t s = 0; s < slate.size(); ++s) {
      ClickLogEntry e{clicks[s], context, actions[s], static_cast<int>(s) + 1, ts, request_id};
      log << to_json_line(e) << '\n';
    }
    log.flush();
    if (!log) throw std::runtime_error("click log write failed");
  }
  log_lines_ += slate.size();

  const auto m = model();
  const std::size_t L = slate.size();
  const PositionBias q(std::vector<double>(m->q_hat.values().begin(),
                                           m->q_hat.values().begin() + static_cast<long>(L)));
  SlateFeedback fb;
  for (int c : clicks) fb.z.push_back(static_cast<double>(c));

  const Eigen::VectorXd theta = m->policy->mean_estimate();
  for (std::size_t s = 0; s < L; ++s) {
    const auto& f = slate.entries[s].features;
    estimator_->observe(static_cast<int>(s) + 1, clicks[s], f, theta.dot(f));
  }
  estimator_->end_round();

  std::unique_ptr<Policy> next = m->policy->clone();
  next->update(q, slate, fb);
  ++feedback_count_;

  auto nm = std::make_shared<Model>();
  nm->policy = std::move(next);
  if (feedback_count_ < cfg_.warmup) {
    nm->q_hat = m->q_hat;
  } else if (feedback_count_ == cfg_.warmup || feedback_count_ % cfg_.bias_refresh == 0) {
    nm->q_hat = estimator_->bias();
  } else {
    nm->q_hat = m->q_hat;
  }
  {
    std::lock_guard lock(model_mutex_);
    model_ = std::move(nm);
  }
  if (write_log && cfg_.snapshot_every > 0 && feedback_count_ % cfg_.snapshot_every == 0) {
    const auto doc = snapshot_json();
    const auto tmp = cfg_.model_path.string() + ".tmp";
    {
      std::ofstream out(tmp);
      out << doc.dump();
    }
    std::filesystem::rename(tmp, cfg_.model_path);
  }
}

nlohmann::json RankingService::snapshot_json() const {
  // Caller holds writer_mutex_ or the service is otherwise quiescent.
  const auto m = model();
  nlohmann::json consumed = nlohmann::json::object();
  {
    std::lock_guard lock(pending_mutex_);
    for (const auto& [id, t] : consumed_) consumed[id] = t;
  }
  nlohmann::json payload = {{"d_a", cfg_.d_a},
                            {"d_c", cfg_.d_c},
                            {"max_slots", cfg_.max_slots},
                            {"seed", cfg_.seed},
                            {"policy", policy_to_json(*m->policy)},
                            {"estimator", estimator_->to_json()},
                            {"q_hat", m->q_hat.values()},
                            {"feedback_count", feedback_count_},
                            {"log_lines", log_lines_},
                            {"next_request", next_request_},
                            {"consumed", consumed}};
  return {{"format", "pbmrank-service"},
          {"version", kServiceSnapshotVersion},
          {"checksum", hex64(fnv1a64(payload.dump()))},
          {"payload", payload}};
}

void RankingService::snapshot() const { snapshot(cfg_.model_path); }

void RankingService::snapshot(const std::filesystem::path& path) const {
  std::lock_guard writer(writer_mutex_);
  const auto doc = snapshot_json();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write snapshot " + tmp);
    out << doc.dump();
    if (!out) throw std::runtime_error("snapshot write failed");
  }
  std::filesystem::rename(tmp, path);
}

void RankingService::restore(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open snapshot " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("corrupt snapshot " + path.string() + ": " + e.what());
  }
  restore_json(doc);
}

void RankingService::restore_json(const nlohmann::json& doc) {
  if (doc.value("format", std::string()) != "pbmrank-service") {
    throw std::runtime_error("snapshot: unrecognized format");
  }
  if (doc.at("version").get<int>() != kServiceSnapshotVersion) {
    throw std::runtime_error("snapshot: unsupported version " +
                             std::to_string(doc.at("version").get<int>()));
  }
  const auto& payload = doc.at("payload");
  if (doc.at("checksum").get<std::string>() != hex64(fnv1a64(payload.dump()))) {
    throw std::runtime_error("snapshot: checksum mismatch (corrupt file)");
  }
  if (payload.at("d_a").get<std::size_t>() != cfg_.d_a ||
      payload.at("d_c").get<std::size_t>() != cfg_.d_c) {
    throw DimensionError("snapshot: model dimensions (" +
                         std::to_string(payload.at("d_a").get<std::size_t>()) + ", " +
                         std::to_string(payload.at("d_c").get<std::size_t>()) +
                         ") do not match configured (" + std::to_string(cfg_.d_a) + ", " +
                         std::to_string(cfg_.d_c) + ")");
  }
  if (payload.at("max_slots").get<std::size_t>() != cfg_.max_slots) {
    throw DimensionError("snapshot: slot count does not match configured max_slots");
  }
  auto policy = policy_from_json(payload.at("policy"));
  if (policy->dim() != cfg_.dim()) throw DimensionError("snapshot: policy dimension mismatch");
  auto estimator = estimator_from_json(payload.at("estimator"));
  if (estimator->slots() != cfg_.max_slots) {
    throw DimensionError("snapshot: estimator slot count mismatch");
  }

  std::lock_guard writer(writer_mutex_);
  estimator_ = std::move(estimator);
  feedback_count_ = payload.at("feedback_count").get<std::uint64_t>();
  log_lines_ = payload.at("log_lines").get<std::uint64_t>();
  auto m = std::make_shared<Model>();
  m->policy = std::move(policy);
  m->q_hat = PositionBias(payload.at("q_hat").get<std::vector<double>>());
  {
    std::lock_guard lock(model_mutex_);
    model_ = std::move(m);
  }
  std::lock_guard lock(pending_mutex_);
  pending_.clear();
  consumed_.clear();
  for (const auto& [id, t] : payload.at("consumed").items()) consumed_[id] = t.get<std::int64_t>();
  next_request_ = payload.at("next_request").get<std::uint64_t>();
}

std::uint64_t RankingService::replay_log(const std::filesystem::path& path,
                                         std::uint64_t from_line) {
  std::lock_guard writer(writer_mutex_);
  std::ifstream in(path);
  if (!in) {
    log_lines_ = from_line;
    return 0;
  }
  std::vector<ClickLogEntry> entries;
  std::string line;
  std::uint64_t n = 0;
  while (std::getline(in, line)) {
    if (n++ < from_line) continue;
    entries.push_back(parse_click_log_line(line));
  }
  log_lines_ = from_line;

  std::uint64_t rounds = 0;
  std::size_t i = 0;
  while (i < entries.size()) {
    std::size_t j = i + 1;
    if (entries[i].request_id) {
      while (j < entries.size() && entries[j].request_id == entries[i].request_id) ++j;
    }
    Slate slate;
    std::vector<ActionVector> actions;
    std::vector<int> clicks;
    for (std::size_t k = i; k < j; ++k) {
      if (entries[k].position != static_cast<int>(k - i) + 1) {
        throw std::runtime_error("click log: positions of one slate must be 1..n in order");
      }
      slate.entries.push_back(contextualizer_(entries[k].action, entries[i].context));
      actions.push_back(entries[k].action);
      clicks.push_back(entries[k].click);
    }
    if (slate.size() > cfg_.max_slots) throw std::runtime_error("click log: slate too long");
    const std::string id = entries[i].request_id.value_or("");
    apply_round(slate, actions, entries[i].context, clicks, id, entries[i].ts, false);
    if (!id.empty()) {
      std::lock_guard lock(pending_mutex_);
      pending_.erase(id);
      consumed_[id] = entries[i].ts;
    }
    ++rounds;
    i = j;
  }
  return rounds;
}

// --- JSON bodies ------------------------------------------------------------

RankRequest rank_request_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ServiceError("bad_request", "body must be a JSON object");
  if (!j.contains("context")) throw ServiceError("bad_request", "missing 'context'");
  RankRequest r;
  if (j.contains("request_id")) r.request_id = j.at("request_id").get<std::string>();
  r.context.features = vector_from_json(j.at("context"), "context");
  if (j.contains("candidates")) {
    for (const auto& id : j.at("candidates")) r.candidates.push_back(ActionId{id.get<std::uint64_t>()});
  }
  if (j.contains("L")) r.L = j.at("L").get<std::size_t>();
  return r;
}

nlohmann::json rank_response_to_json(const RankResponse& r) {
  nlohmann::json slate = nlohmann::json::array();
  for (std::size_t s = 0; s < r.slate.size(); ++s) {
    slate.push_back({{"position", s + 1},
                     {"action_id", r.slate.entries[s].id.value},
                     {"score", r.scores[s]}});
  }
  return {{"request_id", r.request_id}, {"slate", slate}};
}

FeedbackEvent feedback_event_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ServiceError("bad_request", "body must be a JSON object");
  if (!j.contains("request_id") || !j.contains("clicks")) {
    throw ServiceError("bad_request", "feedback needs 'request_id' and 'clicks'");
  }
  FeedbackEvent ev;
  ev.request_id = j.at("request_id").get<std::string>();
  ev.clicks = j.at("clicks").get<std::vector<int>>();
  if (j.contains("ts")) ev.ts = j.at("ts").get<std::int64_t>();
  return ev;
}

// --- HTTP -------------------------------------------------------------------

namespace {

httplib::Server* g_server = nullptr;

void handle_signal(int) {
  if (g_server) g_server->stop();
}

int status_for(const std::string& kind) {
  if (kind == "unknown_request" || kind == "unknown_action") return 404;
  if (kind == "duplicate_feedback" || kind == "duplicate_request") return 409;
  return 400;
}

void send_error(httplib::Response& res, int status, const std::string& kind,
                const std::string& message) {
  res.status = status;
  res.set_content(nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump(),
                  "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const ServiceError& e) {
    send_error(res, status_for(e.kind()), e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, "bad_request", e.what());
  } catch (const DimensionError& e) {
    send_error(res, 400, "dimension", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

}  // namespace

void install_routes(httplib::Server& server, RankingService& svc) {
  server.Post("/rank", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto resp = svc.rank(rank_request_from_json(nlohmann::json::parse(req.body)));
      res.set_content(rank_response_to_json(resp).dump(), "application/json");
    });
  });
  server.Post("/feedback", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      svc.feedback(feedback_event_from_json(nlohmann::json::parse(req.body)));
      res.set_content(nlohmann::json{{"status", "applied"}}.dump(), "application/json");
    });
  });
  server.Get("/health", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { res.set_content(svc.health().dump(), "application/json"); });
  });
  server.Get("/bias", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      const auto est = svc.bias();
      res.set_content(nlohmann::json{{"q", est.q.values()},
                                     {"low_confidence", est.low_confidence},
                                     {"ranking_q", svc.ranking_bias().values()}}
                          .dump(),
                      "application/json");
    });
  });
}

int run_server(const ServiceConfig& cfg) {
  auto svc = RankingService::recover(cfg);
  httplib::Server server;
  install_routes(server, *svc);

  g_server = &server;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::fprintf(stderr, "pbmrank: serving on %s:%d\n", cfg.host.c_str(), cfg.port);
  const bool ok = server.listen(cfg.host, cfg.port);
  g_server = nullptr;
  svc->snapshot();
  if (!ok) throw std::runtime_error("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
  return 0;
}

}  // namespace pbmrank

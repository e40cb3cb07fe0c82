#pragma once

// Online ranking service: a policy + bias estimator behind rank/feedback
// calls, with a JSON-lines click log and checksummed snapshots.
//
// Readers (rank) work on an immutable model snapshot held by shared_ptr; the
// single writer (feedback) builds the next model and swaps the pointer. A
// crashed instance is rebuilt from the last snapshot plus the click-log lines
// written after it.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "pbmrank/bias.hpp"
#include "pbmrank/policies.hpp"

namespace httplib {
class Server;
}

namespace pbmrank {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path model_path = "pbmrank_model.json";
  std::filesystem::path log_path = "pbmrank_clicks.jsonl";

  PolicyConfig policy;
  EstimatorConfig estimator;
  std::size_t d_a = 5;
  std::size_t d_c = 10;
  std::size_t max_slots = 13;  // longest slate; the estimator tracks this many positions
  std::vector<ActionVector> catalog;
  std::uint64_t seed = 0;

  std::int64_t pending_ttl_ms = 3600 * 1000;
  std::uint64_t warmup = 500;        // feedback events ranked with the fallback schedule
  std::uint64_t bias_refresh = 100;  // feedback events between estimator reads
  std::uint64_t snapshot_every = 0;  // automatic snapshot cadence in feedback events; 0 = off

  std::size_t dim() const { return d_a + d_c + d_a * d_c; }
  void validate() const;
};

/// Reads a JSON config file (empty path = defaults) and applies the
/// environment overrides PBMRANK_PORT, PBMRANK_MODEL_PATH, PBMRANK_POLICY and
/// PBMRANK_ESTIMATOR. Without an explicit catalog, `catalog_size` sparse
/// uniform actions are generated from `catalog_seed`.
ServiceConfig load_service_config(const std::filesystem::path& path);
ServiceConfig service_config_from_json(const nlohmann::json& j);
void apply_env_overrides(ServiceConfig& cfg,
                         const std::function<const char*(const char*)>& getenv_fn);

struct RankRequest {
  std::string request_id;  // empty = assigned by the service
  ContextVector context;
  std::vector<ActionId> candidates;  // empty = whole catalog
  std::size_t L = 0;
};

struct RankResponse {
  std::string request_id;
  Slate slate;
  std::vector<double> scores;  // policy score of each slate entry
};

struct FeedbackEvent {
  std::string request_id;
  std::vector<int> clicks;  // one indicator per served position
  std::optional<std::int64_t> ts;
};

/// Rejected requests. `kind` is a stable machine-readable tag.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

inline constexpr int kServiceSnapshotVersion = 1;

std::uint64_t fnv1a64(std::string_view data);

class RankingService {
 public:
  using Clock = std::function<std::int64_t()>;  // milliseconds

  explicit RankingService(ServiceConfig cfg, Clock clock = {});

  /// Restores the model from cfg.model_path and replays click-log lines
  /// written after that snapshot. Starts fresh when no snapshot exists.
  static std::unique_ptr<RankingService> recover(ServiceConfig cfg, Clock clock = {});

  RankResponse rank(const RankRequest& req);
  void feedback(const FeedbackEvent& ev);

  BiasEstimate bias() const;
  PositionBias ranking_bias() const;

  nlohmann::json snapshot_json() const;
  void snapshot() const;  // to cfg.model_path, atomically via rename
  void snapshot(const std::filesystem::path& path) const;
  void restore(const std::filesystem::path& path);
  void restore_json(const nlohmann::json& doc);
  /// Applies log lines [from_line, end) as feedback rounds. Returns the number
  /// of rounds applied.
  std::uint64_t replay_log(const std::filesystem::path& path, std::uint64_t from_line);

  std::shared_ptr<const Policy> policy() const;
  std::uint64_t feedback_count() const;
  std::uint64_t log_lines() const;
  std::size_t pending() const;
  const ServiceConfig& config() const { return cfg_; }
  nlohmann::json health() const;

 private:
  struct Model {
    std::shared_ptr<const Policy> policy;
    PositionBias q_hat;
  };
  struct Pending {
    Slate slate;
    ContextVector context;
    std::vector<ActionVector> actions;
    std::int64_t created_ms;
  };

  std::shared_ptr<const Model> model() const;
  void apply_round(const Slate& slate, const std::vector<ActionVector>& actions,
                   const ContextVector& context, const std::vector<int>& clicks,
                   const std::string& request_id, std::int64_t ts, bool write_log);
  void expire_pending(std::int64_t now);
  std::int64_t now() const;

  ServiceConfig cfg_;
  Clock clock_;
  Contextualizer contextualizer_;
  std::map<std::uint64_t, std::size_t> catalog_index_;

  mutable std::mutex model_mutex_;  // guards the model_ pointer only
  std::shared_ptr<const Model> model_;

  mutable std::mutex writer_mutex_;  // serializes feedback, snapshot, restore
  std::unique_ptr<BiasEstimator> estimator_;
  std::uint64_t feedback_count_ = 0;
  std::uint64_t log_lines_ = 0;

  mutable std::mutex pending_mutex_;
  std::map<std::string, Pending> pending_;
  std::map<std::string, std::int64_t> consumed_;  // request id -> consumption time
  std::uint64_t next_request_ = 0;
};

// JSON bodies of the HTTP interface.
RankRequest rank_request_from_json(const nlohmann::json& j);
nlohmann::json rank_response_to_json(const RankResponse& r);
FeedbackEvent feedback_event_from_json(const nlohmann::json& j);

/// Registers POST /rank, POST /feedback, GET /health and GET /bias.
void install_routes(httplib::Server& server, RankingService& svc);

/// Recovers the service and blocks serving its routes until SIGINT/SIGTERM,
/// then writes a final snapshot.
int run_server(const ServiceConfig& cfg);

}  // namespace pbmrank

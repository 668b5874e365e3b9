#pragma once

#include <cstdint>
#include <filesystem>
#include <list>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "duhiv/annotation.hpp"
#include "duhiv/data.hpp"
#include "duhiv/latent.hpp"
#include "duhiv/model.hpp"

namespace httplib {
class Server;
}

namespace duhiv {

/// Immutable model/dataset pair with the representations derived from it.
struct Snapshot {
  std::shared_ptr<const VaeModel> model;
  std::shared_ptr<const Dataset> data;
  std::vector<Representation> representations;
  std::uint64_t generation = 0;

  static std::shared_ptr<const Snapshot> build(std::shared_ptr<const VaeModel> model,
                                               std::shared_ptr<const Dataset> data, std::uint64_t generation);
};

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct SessionOptions {
  /// Registry file rewritten on every mutation; empty keeps it in memory.
  std::filesystem::path registry_file;
  std::size_t projection_cache_size = 16;
  TsneOptions tsne;
};

/// Shared service state. Readers take a snapshot and work on it without
/// holding a lock; load() swaps the snapshot and drops the caches.
class Session {
 public:
  explicit Session(SessionOptions options = {});

  void load(std::shared_ptr<const VaeModel> model, std::shared_ptr<const Dataset> data);
  /// Throws HttpError(503) when nothing is loaded.
  std::shared_ptr<const Snapshot> snapshot() const;

  struct ProjectionKey {
    std::uint64_t generation;
    std::size_t k;
    double radius;
    std::uint64_t seed;
    bool operator==(const ProjectionKey&) const = default;
  };
  std::shared_ptr<const ProjectionResult> projection(const Snapshot& snap, std::size_t k, double radius,
                                                     std::uint64_t seed);
  std::size_t cached_projections() const;

  // Registry access; every call is serialised.
  std::vector<InsightRecord> list_insights() const;
  InsightRecord get_insight(const std::string& id) const;
  void add_insight(InsightRecord record);
  void update_insight(InsightRecord record);
  void remove_insight(const std::string& id);
  std::vector<Representation> prototypes() const;

 private:
  SessionOptions options_;
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::uint64_t generation_ = 0;

  mutable std::mutex cache_mutex_;
  std::list<std::pair<ProjectionKey, std::shared_ptr<const ProjectionResult>>> cache_;

  mutable std::mutex registry_mutex_;
  std::optional<InsightRegistry> registry_;
};

/// JSON image payload: base64 8-bit grayscale, row-major.
nlohmann::json image_json(const Pgpm& pgpm);
Pgpm image_from_json(const nlohmann::json& j);

/// Request dispatch independent of the transport. Every handler returns a JSON
/// body or throws HttpError.
class Api {
 public:
  explicit Api(Session& session) : session_(session) {}

  nlohmann::json health() const;
  nlohmann::json projection(std::size_t k, double radius, std::uint64_t seed) const;
  nlohmann::json cluster(std::size_t cluster, std::size_t k, double radius, std::uint64_t seed) const;
  nlohmann::json pgpm(const std::string& id) const;
  nlohmann::json representation(const std::string& id) const;
  nlohmann::json reconstruct(const nlohmann::json& body) const;
  nlohmann::json interpolate(const nlohmann::json& body) const;
  nlohmann::json arithmetic(const nlohmann::json& body) const;
  nlohmann::json adjust(const nlohmann::json& body) const;
  nlohmann::json list_insights() const;
  nlohmann::json get_insight(const std::string& id) const;
  nlohmann::json create_insight(const nlohmann::json& body) const;
  nlohmann::json update_insight(const std::string& id, const nlohmann::json& body) const;
  nlohmann::json delete_insight(const std::string& id) const;
  nlohmann::json annotate(const nlohmann::json& body) const;

 private:
  Representation resolve(const Snapshot& snap, const nlohmann::json& ref) const;
  nlohmann::json with_image(const Snapshot& snap, const Representation& r) const;

  Session& session_;
};

/// JSON form of annotation metrics (shared with the CLI).
nlohmann::json metrics_json(const CrossValidationResult& result);
nlohmann::json annotation_run_json(const AnnotationRun& run);
AnnotateParams annotate_params_from_json(const nlohmann::json& j);

/// Binds every /api route onto server.
void register_routes(httplib::Server& server, Api& api);

/// DUHIV_PORT when set and valid, else 8080.
int default_port();

}  // namespace duhiv

#include "duhiv/service.hpp"

#include <httplib.h>

#include <cmath>
#include <cstdlib>

namespace duhiv {

using nlohmann::json;

std::shared_ptr<const Snapshot> Snapshot::build(std::shared_ptr<const VaeModel> model,
                                                std::shared_ptr<const Dataset> data, std::uint64_t generation) {
  if (!model || !data) throw std::invalid_argument("snapshot needs both a model and a dataset");
  if (data->rows != model->image_height() || data->cols != model->image_width()) {
    throw std::invalid_argument("dataset maps are " + std::to_string(data->rows) + "x" + std::to_string(data->cols) +
                                ", model expects " + std::to_string(model->image_height()) + "x" +
                                std::to_string(model->image_width()));
  }
  auto snap = std::make_shared<Snapshot>();
  snap->representations = extract_all(*model, *data);
  snap->model = std::move(model);
  snap->data = std::move(data);
  snap->generation = generation;
  return snap;
}

Session::Session(SessionOptions options) : options_(std::move(options)) {}

void Session::load(std::shared_ptr<const VaeModel> model, std::shared_ptr<const Dataset> data) {
  const std::size_t dim = model ? model->latent_dim() : 0;
  {
    std::lock_guard lock(registry_mutex_);
    if (registry_ && registry_->dim() != dim) {
      throw std::invalid_argument("model latent dimension " + std::to_string(dim) +
                                  " differs from the insight registry's " + std::to_string(registry_->dim()));
    }
  }
  std::uint64_t generation;
  {
    std::lock_guard lock(snapshot_mutex_);
    generation = ++generation_;
  }
  auto snap = Snapshot::build(std::move(model), std::move(data), generation);
  {
    std::lock_guard lock(registry_mutex_);
    if (!registry_) {
      registry_ = options_.registry_file.empty() ? InsightRegistry(dim)
                                                 : InsightRegistry::open(dim, options_.registry_file);
    }
  }
  {
    std::lock_guard lock(snapshot_mutex_);
    snapshot_ = std::move(snap);
  }
  std::lock_guard lock(cache_mutex_);
  cache_.clear();
}

std::shared_ptr<const Snapshot> Session::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  if (!snapshot_) throw HttpError(503, "no model loaded");
  return snapshot_;
}

std::shared_ptr<const ProjectionResult> Session::projection(const Snapshot& snap, std::size_t k, double radius,
                                                            std::uint64_t seed) {
  const ProjectionKey key{snap.generation, k, radius, seed};
  {
    std::lock_guard lock(cache_mutex_);
    for (auto it = cache_.begin(); it != cache_.end(); ++it) {
      if (it->first == key) {
        cache_.splice(cache_.begin(), cache_, it);
        return cache_.front().second;
      }
    }
  }
  ProjectionParams params;
  params.k = k;
  params.radius = radius;
  params.seed = seed;
  params.tsne = options_.tsne;
  auto result = std::make_shared<const ProjectionResult>(project(snap.representations, params));

  std::lock_guard lock(cache_mutex_);
  for (const auto& entry : cache_) {
    if (entry.first == key) return entry.second;
  }
  cache_.emplace_front(key, result);
  while (cache_.size() > options_.projection_cache_size) cache_.pop_back();
  return result;
}

std::size_t Session::cached_projections() const {
  std::lock_guard lock(cache_mutex_);
  return cache_.size();
}

#define DUHIV_REGISTRY_OR_503                                \
  std::lock_guard lock(registry_mutex_);                     \
  if (!registry_) throw HttpError(503, "no model loaded")

std::vector<InsightRecord> Session::list_insights() const {
  DUHIV_REGISTRY_OR_503;
  return registry_->list();
}

InsightRecord Session::get_insight(const std::string& id) const {
  DUHIV_REGISTRY_OR_503;
  return registry_->get(id);
}

void Session::add_insight(InsightRecord record) {
  DUHIV_REGISTRY_OR_503;
  registry_->add(std::move(record));
}

void Session::update_insight(InsightRecord record) {
  DUHIV_REGISTRY_OR_503;
  registry_->update(std::move(record));
}

void Session::remove_insight(const std::string& id) {
  DUHIV_REGISTRY_OR_503;
  registry_->remove(id);
}

std::vector<Representation> Session::prototypes() const {
  DUHIV_REGISTRY_OR_503;
  return registry_->prototypes();
}

#undef DUHIV_REGISTRY_OR_503

// ---------------------------------------------------------------------------

json image_json(const Pgpm& pgpm) {
  return {{"width", pgpm.cols}, {"height", pgpm.rows}, {"encoding", "gray8"},
          {"pixels", base64_encode(quantize(pgpm.grid))}};
}

Pgpm image_from_json(const json& j) {
  Pgpm p;
  p.cols = j.at("width").get<std::size_t>();
  p.rows = j.at("height").get<std::size_t>();
  const auto bytes = base64_decode(j.at("pixels").get<std::string>());
  if (bytes.size() != p.rows * p.cols) throw DecodeError("image payload size does not match width x height");
  for (auto b : bytes) p.grid.push_back(b / 255.0);
  return p;
}

namespace {

const json& field(const json& body, const char* name) {
  if (!body.is_object() || !body.contains(name)) throw HttpError(400, std::string("missing field '") + name + "'");
  return body.at(name);
}

std::size_t sample_index(const Snapshot& snap, const std::string& id) {
  try {
    return snap.data->index_of(id);
  } catch (const std::out_of_range&) {
    throw HttpError(404, "unknown sample id '" + id + "'");
  }
}

json representation_json(const Representation& r) {
  json j = {{"mu", r.mu}, {"sigma", r.sigma}};
  if (!r.source_id.empty()) j["id"] = r.source_id;
  return j;
}

}  // namespace

Representation Api::resolve(const Snapshot& snap, const json& ref) const {
  if (ref.is_string()) return snap.representations[sample_index(snap, ref.get<std::string>())];
  if (!ref.is_object()) throw HttpError(400, "expected a sample id or a representation object");
  if (!ref.contains("mu")) {
    if (ref.contains("insight")) return session_.get_insight(ref.at("insight").get<std::string>()).prototype;
    if (ref.contains("id")) return snap.representations[sample_index(snap, ref.at("id").get<std::string>())];
    throw HttpError(400, "representation needs 'mu' and 'sigma', or an 'id'");
  }
  Representation r;
  r.mu = ref.at("mu").get<std::vector<double>>();
  r.sigma = ref.contains("sigma") ? ref.at("sigma").get<std::vector<double>>() : std::vector<double>(r.mu.size(), 1.0);
  r.validate();
  if (r.dim() != snap.model->latent_dim()) {
    throw HttpError(400, "representation has dimension " + std::to_string(r.dim()) + ", model expects " +
                             std::to_string(snap.model->latent_dim()));
  }
  return r;
}

json Api::with_image(const Snapshot& snap, const Representation& r) const {
  return {{"representation", representation_json(r)}, {"image", image_json(duhiv::reconstruct(*snap.model, r))}};
}

json Api::health() const {
  json j = {{"status", "ok"}, {"model_loaded", false}};
  try {
    const auto snap = session_.snapshot();
    j["model_loaded"] = true;
    j["model"] = snap->model->kind();
    j["latent_dim"] = snap->model->latent_dim();
    j["latent_sizes"] = snap->model->latent_sizes();
    j["samples"] = snap->data->size();
    j["num_labels"] = snap->data->num_labels;
  } catch (const HttpError&) {
  }
  return j;
}

json Api::projection(std::size_t k, double radius, std::uint64_t seed) const {
  const auto snap = session_.snapshot();
  if (k < 1 || k > snap->data->size()) throw HttpError(400, "k must lie in [1, number of samples]");
  const auto proj = session_.projection(*snap, k, radius, seed);
  json points = json::array();
  for (std::size_t i : proj->sampled) {
    const auto& p = proj->points[i];
    points.push_back({{"id", snap->data->samples[p.index].pgpm.id}, {"x", p.x}, {"y", p.y}, {"cluster", p.cluster}});
  }
  return {{"k", proj->k}, {"radius", proj->radius}, {"seed", proj->seed}, {"total", proj->points.size()},
          {"points", points}};
}

json Api::cluster(std::size_t c, std::size_t k, double radius, std::uint64_t seed) const {
  const auto snap = session_.snapshot();
  if (k < 1 || k > snap->data->size()) throw HttpError(400, "k must lie in [1, number of samples]");
  if (c >= k) throw HttpError(404, "cluster " + std::to_string(c) + " does not exist for k = " + std::to_string(k));
  const auto proj = session_.projection(*snap, k, radius, seed);
  json members = json::array();
  std::vector<Representation> rs;
  for (const auto& p : proj->points) {
    if (p.cluster != c) continue;
    members.push_back(snap->data->samples[p.index].pgpm.id);
    rs.push_back(snap->representations[p.index]);
  }
  json out = {{"cluster", c}, {"k", k}, {"seed", seed}, {"members", members}};
  if (!rs.empty()) {
    const Representation avg = average_representation(rs);
    out["representation"] = representation_json(avg);
    out["image"] = image_json(duhiv::reconstruct(*snap->model, avg));
  }
  return out;
}

json Api::pgpm(const std::string& id) const {
  const auto snap = session_.snapshot();
  const auto& s = snap->data->samples[sample_index(*snap, id)];
  return {{"id", s.pgpm.id}, {"dt", s.pgpm.dt}, {"labels", label_string(s.labels)}, {"image", image_json(s.pgpm)}};
}

json Api::representation(const std::string& id) const {
  const auto snap = session_.snapshot();
  return representation_json(snap->representations[sample_index(*snap, id)]);
}

json Api::reconstruct(const json& body) const {
  const auto snap = session_.snapshot();
  const Representation r = resolve(*snap, field(body, "representation"));
  return {{"image", image_json(duhiv::reconstruct(*snap->model, r))}};
}

json Api::interpolate(const json& body) const {
  const auto snap = session_.snapshot();
  const Representation a = resolve(*snap, field(body, "id_a"));
  const Representation b = resolve(*snap, field(body, "id_b"));
  const double t = field(body, "t").get<double>();
  return with_image(*snap, duhiv::interpolate(a, b, t));
}

json Api::arithmetic(const json& body) const {
  const auto snap = session_.snapshot();
  const ArithmeticOp op = arithmetic_op_from_string(field(body, "op").get<std::string>());
  const Representation base = resolve(*snap, field(body, "base"));
  const json& operand = field(body, "operand");
  const Representation r =
      operand.is_number() ? duhiv::arithmetic(op, base, operand.get<double>())
                          : duhiv::arithmetic(op, base, resolve(*snap, operand));
  return with_image(*snap, r);
}

json Api::adjust(const json& body) const {
  const auto snap = session_.snapshot();
  const Representation base = resolve(*snap, field(body, "base"));
  const json& dim = field(body, "dim");
  if (!dim.is_number_integer() || dim.get<std::int64_t>() < 0) throw HttpError(400, "dim must be a non-negative integer");
  return with_image(*snap, adjust_dimension(base, dim.get<std::size_t>(), field(body, "value").get<double>()));
}

namespace {

json insight_json(const InsightRecord& r) {
  json j = {{"id", r.id}, {"name", r.name}, {"description", r.description},
            {"prototype", representation_json(r.prototype)}};
  if (!r.thumbnail.grid.empty()) j["thumbnail"] = image_json(r.thumbnail);
  return j;
}

}  // namespace

json Api::list_insights() const {
  json out = json::array();
  for (const auto& r : session_.list_insights()) out.push_back(insight_json(r));
  return {{"insights", out}};
}

json Api::get_insight(const std::string& id) const { return insight_json(session_.get_insight(id)); }

json Api::create_insight(const json& body) const {
  const auto snap = session_.snapshot();
  InsightRecord record;
  record.id = field(body, "id").get<std::string>();
  record.name = body.value("name", record.id);
  record.description = body.value("description", std::string());
  record.prototype = resolve(*snap, field(body, "prototype"));
  record.prototype.source_id.clear();
  record.thumbnail = duhiv::reconstruct(*snap->model, record.prototype);
  record.thumbnail.id = record.id;
  session_.add_insight(record);
  return insight_json(record);
}

json Api::update_insight(const std::string& id, const json& body) const {
  const auto snap = session_.snapshot();
  InsightRecord record = session_.get_insight(id);
  if (body.contains("id") && body.at("id") != id) throw HttpError(400, "insight id cannot be changed");
  record.name = body.value("name", record.name);
  record.description = body.value("description", record.description);
  if (body.contains("prototype")) {
    record.prototype = resolve(*snap, body.at("prototype"));
    record.prototype.source_id.clear();
    record.thumbnail = duhiv::reconstruct(*snap->model, record.prototype);
    record.thumbnail.id = record.id;
  }
  session_.update_insight(record);
  return insight_json(record);
}

json Api::delete_insight(const std::string& id) const {
  session_.remove_insight(id);
  return {{"deleted", id}};
}

json metrics_json(const CrossValidationResult& r) {
  json per_class = json::array();
  for (const auto& m : r.per_class_ap) per_class.push_back({{"mean", m.mean}, {"std", m.std}});
  json folds = json::array();
  for (const auto& f : r.folds) {
    json aps = json::array();
    for (const auto& ap : f.per_class_ap) aps.push_back(ap ? json(*ap) : json(nullptr));
    folds.push_back({{"per_class_ap", aps}, {"map", f.map}, {"mean_accuracy", f.mean_accuracy}});
  }
  return {{"map", {{"mean", r.map.mean}, {"std", r.map.std}}},
          {"mean_accuracy", {{"mean", r.mean_accuracy.mean}, {"std", r.mean_accuracy.std}}},
          {"per_class_ap", per_class},
          {"folds", folds}};
}

json annotation_run_json(const AnnotationRun& run) {
  json results = json::array();
  std::vector<std::size_t> matches;
  for (const auto& r : run.results) {
    results.push_back(to_json_line(r));
    matches.resize(std::max(matches.size(), r.labels.size()), 0);
    for (std::size_t j = 0; j < r.labels.size(); ++j) matches[j] += r.labels[j];
  }
  json out = {{"results", results}, {"match_counts", matches}, {"random_baseline_map", run.random_baseline_map}};
  out["metrics"] = run.metrics ? metrics_json(*run.metrics) : json(nullptr);
  return out;
}

AnnotateParams annotate_params_from_json(const json& j) {
  AnnotateParams p;
  p.threshold = j.value("threshold", p.threshold);
  p.bandwidth = j.value("bandwidth", p.bandwidth);
  p.knn_k = j.value("k", p.knn_k);
  p.label_fraction = j.value("label_fraction", p.label_fraction);
  p.folds = j.value("folds", p.folds);
  p.seed = j.value("seed", p.seed);
  return p;
}

json Api::annotate(const json& body) const {
  const auto snap = session_.snapshot();
  const json params_json = body.is_object() ? body.value("params", json::object()) : json::object();
  AnnotateParams params = annotate_params_from_json(params_json);
  params.method = annotation_method_from_string(body.value("mode", std::string("unsupervised")));
  std::vector<Representation> prototypes;
  std::string source = "single-label";
  if (params.method == AnnotationMethod::Unsupervised) {
    source = params_json.value("prototypes", std::string("registry"));
    if (source == "registry") {
      prototypes = session_.prototypes();
      if (prototypes.empty()) throw HttpError(400, "the insight registry is empty");
    } else if (source != "single-label") {
      throw HttpError(400, "params.prototypes must be 'registry' or 'single-label'");
    }
  }
  json out = annotation_run_json(run_annotation(*snap->data, snap->representations, params, prototypes));
  out["mode"] = to_string(params.method);
  out["prototypes"] = source;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Handler>
void respond(httplib::Response& res, Handler&& handler) {
  auto fail = [&](int status, const std::string& message) {
    res.status = status;
    res.set_content(json{{"error", message}}.dump(), "application/json");
  };
  try {
    res.set_content(handler().dump(), "application/json");
    res.status = 200;
  } catch (const HttpError& e) {
    fail(e.status(), e.what());
  } catch (const json::exception& e) {
    fail(400, std::string("malformed request: ") + e.what());
  } catch (const DuplicateInsightError& e) {
    fail(409, e.what());
  } catch (const UnknownInsightError& e) {
    fail(404, e.what());
  } catch (const DecodeError& e) {
    fail(400, e.what());
  } catch (const std::invalid_argument& e) {
    fail(400, e.what());
  } catch (const std::exception& e) {
    fail(500, e.what());
  }
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw HttpError(400, std::string("body is not valid JSON: ") + e.what());
  }
}

template <typename T>
T query(const httplib::Request& req, const char* name, T fallback) {
  if (!req.has_param(name)) return fallback;
  const std::string text = req.get_param_value(name);
  try {
    std::size_t used = 0;
    T value;
    if constexpr (std::is_floating_point_v<T>) {
      value = static_cast<T>(std::stod(text, &used));
    } else {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument(text);
      value = static_cast<T>(std::stoull(text, &used));
    }
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw HttpError(400, std::string("query parameter '") + name + "' is not a valid number");
  }
}

}  // namespace

void register_routes(httplib::Server& server, Api& api) {
  using Req = httplib::Request;
  using Res = httplib::Response;
  server.Get("/api/health", [&api](const Req&, Res& res) { respond(res, [&] { return api.health(); }); });
  server.Get("/api/projection", [&api](const Req& req, Res& res) {
    respond(res, [&] {
      return api.projection(query<std::size_t>(req, "k", 6), query<double>(req, "radius", 0.0),
                            query<std::uint64_t>(req, "seed", 0));
    });
  });
  server.Get(R"(/api/cluster/(\d+))", [&api](const Req& req, Res& res) {
    respond(res, [&] {
      return api.cluster(std::stoul(req.matches[1].str()), query<std::size_t>(req, "k", 6),
                         query<double>(req, "radius", 0.0), query<std::uint64_t>(req, "seed", 0));
    });
  });
  server.Get(R"(/api/pgpm/([^/]+))",
             [&api](const Req& req, Res& res) { respond(res, [&] { return api.pgpm(req.matches[1].str()); }); });
  server.Get(R"(/api/representation/([^/]+))", [&api](const Req& req, Res& res) {
    respond(res, [&] { return api.representation(req.matches[1].str()); });
  });
  server.Post("/api/reconstruct",
              [&api](const Req& req, Res& res) { respond(res, [&] { return api.reconstruct(parse_body(req)); }); });
  server.Post("/api/interpolate",
              [&api](const Req& req, Res& res) { respond(res, [&] { return api.interpolate(parse_body(req)); }); });
  server.Post("/api/arithmetic",
              [&api](const Req& req, Res& res) { respond(res, [&] { return api.arithmetic(parse_body(req)); }); });
  server.Post("/api/adjust",
              [&api](const Req& req, Res& res) { respond(res, [&] { return api.adjust(parse_body(req)); }); });
  server.Get("/api/insights", [&api](const Req&, Res& res) { respond(res, [&] { return api.list_insights(); }); });
  server.Post("/api/insights",
              [&api](const Req& req, Res& res) { respond(res, [&] { return api.create_insight(parse_body(req)); }); });
  server.Get(R"(/api/insights/([^/]+))", [&api](const Req& req, Res& res) {
    respond(res, [&] { return api.get_insight(req.matches[1].str()); });
  });
  server.Put(R"(/api/insights/([^/]+))", [&api](const Req& req, Res& res) {
    respond(res, [&] { return api.update_insight(req.matches[1].str(), parse_body(req)); });
  });
  server.Delete(R"(/api/insights/([^/]+))", [&api](const Req& req, Res& res) {
    respond(res, [&] { return api.delete_insight(req.matches[1].str()); });
  });
  server.Post("/api/annotate",
              [&api](const Req& req, Res& res) { respond(res, [&] { return api.annotate(parse_body(req)); }); });
}

int default_port() {
  if (const char* env = std::getenv("DUHIV_PORT")) {
    char* end = nullptr;
    const long port = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && port > 0 && port < 65536) return static_cast<int>(port);
  }
  return 8080;
}

}  // namespace duhiv

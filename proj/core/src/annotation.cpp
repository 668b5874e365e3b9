#include "duhiv/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "duhiv/random.hpp"

namespace duhiv {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const InsightRecord& r) {
  j = {{"id", r.id}, {"name", r.name}, {"description", r.description}, {"prototype", r.prototype}};
  if (!r.thumbnail.grid.empty()) {
    j["thumbnail"] = {{"width", r.thumbnail.cols},
                      {"height", r.thumbnail.rows},
                      {"pixels", base64_encode(quantize(r.thumbnail.grid))}};
  }
}

void from_json(const nlohmann::json& j, InsightRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.name = j.value("name", r.id);
  r.description = j.value("description", std::string());
  r.prototype = j.at("prototype").get<Representation>();
  r.thumbnail = Pgpm{};
  if (j.contains("thumbnail")) {
    const auto& t = j.at("thumbnail");
    r.thumbnail.cols = t.at("width").get<std::size_t>();
    r.thumbnail.rows = t.at("height").get<std::size_t>();
    const auto bytes = base64_decode(t.at("pixels").get<std::string>());
    if (bytes.size() != r.thumbnail.rows * r.thumbnail.cols) throw DecodeError("thumbnail size mismatch");
    r.thumbnail.grid.reserve(bytes.size());
    for (auto b : bytes) r.thumbnail.grid.push_back(b / 255.0);
    r.thumbnail.id = r.id;
  }
}

InsightRegistry::InsightRegistry(std::size_t dim, std::optional<fs::path> backing_file)
    : dim_(dim), backing_file_(std::move(backing_file)) {
  if (dim == 0) throw std::invalid_argument("insight registry: dimension must be >= 1");
}

InsightRegistry InsightRegistry::open(std::size_t dim, const fs::path& backing_file) {
  InsightRegistry registry(dim);
  if (fs::exists(backing_file)) {
    for (auto& record : load_insights(backing_file)) registry.add(std::move(record));
  }
  registry.backing_file_ = backing_file;
  return registry;
}

void InsightRegistry::check(const InsightRecord& record) const {
  if (record.id.empty()) throw std::invalid_argument("insight id must not be empty");
  record.prototype.validate();
  if (record.prototype.dim() != dim_) {
    throw std::invalid_argument("insight '" + record.id + "' has prototype dimension " +
                                std::to_string(record.prototype.dim()) + ", expected " + std::to_string(dim_));
  }
}

void InsightRegistry::add(InsightRecord record) {
  check(record);
  if (contains(record.id)) throw DuplicateInsightError("insight '" + record.id + "' already exists");
  records_.push_back(std::move(record));
  persist();
}

void InsightRegistry::update(InsightRecord record) {
  check(record);
  auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.id == record.id; });
  if (it == records_.end()) throw UnknownInsightError("no insight '" + record.id + "'");
  *it = std::move(record);
  persist();
}

void InsightRegistry::remove(const std::string& id) {
  auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.id == id; });
  if (it == records_.end()) throw UnknownInsightError("no insight '" + id + "'");
  records_.erase(it);
  persist();
}

const InsightRecord& InsightRegistry::get(const std::string& id) const {
  for (const auto& r : records_) {
    if (r.id == id) return r;
  }
  throw UnknownInsightError("no insight '" + id + "'");
}

bool InsightRegistry::contains(const std::string& id) const {
  return std::any_of(records_.begin(), records_.end(), [&](const auto& r) { return r.id == id; });
}

std::vector<Representation> InsightRegistry::prototypes() const {
  std::vector<Representation> out;
  for (const auto& r : records_) out.push_back(r.prototype);
  return out;
}

void InsightRegistry::save(const fs::path& path) const {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    for (const auto& r : records_) out << nlohmann::json(r).dump() << '\n';
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

void InsightRegistry::persist() const {
  if (backing_file_) save(*backing_file_);
}

std::vector<InsightRecord> load_insights(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open " + path.string());
  std::vector<InsightRecord> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<InsightRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw DecodeError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::json to_json_line(const AnnotationResult& r) {
  return {{"id", r.sample_id}, {"scores", r.scores}, {"labels", label_string(r.labels)}};
}

void write_annotations(const fs::path& path, std::span<const AnnotationResult> results) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : results) out << to_json_line(r).dump() << '\n';
}

// ---------------------------------------------------------------------------

namespace {

double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dimension mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  double sq = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) sq += (a[d] - b[d]) * (a[d] - b[d]);
  return std::sqrt(sq);
}

}  // namespace

double median_bandwidth(std::span<const Representation> samples, std::span<const Representation> prototypes) {
  if (samples.empty() || prototypes.empty()) throw std::invalid_argument("median_bandwidth: empty input");
  std::vector<double> d;
  d.reserve(samples.size() * prototypes.size());
  for (const auto& s : samples)
    for (const auto& p : prototypes) d.push_back(euclidean(s.mu, p.mu));
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double median = d[mid];
  if (d.size() % 2 == 0) {
    median = 0.5 * (median + *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return median > 0.0 ? median : 1.0;
}

std::vector<AnnotationResult> unsupervised_annotate(std::span<const Representation> samples,
                                                    std::span<const Representation> prototypes, double bandwidth,
                                                    double threshold) {
  if (prototypes.empty()) throw std::invalid_argument("unsupervised_annotate: the insight registry is empty");
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw std::invalid_argument("unsupervised_annotate: bandwidth must be positive");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("unsupervised_annotate: threshold must lie in (0,1)");
  std::vector<AnnotationResult> out;
  out.reserve(samples.size());
  const double denom = 2.0 * bandwidth * bandwidth;
  for (const auto& s : samples) {
    AnnotationResult r{s.source_id, {}, {}};
    for (const auto& p : prototypes) {
      const double d = euclidean(s.mu, p.mu);
      const double score = std::exp(-d * d / denom);
      r.scores.push_back(score);
      r.labels.push_back(score >= threshold);
    }
    out.push_back(std::move(r));
  }
  return out;
}

KnnPrediction knn_semi_supervised(std::span<const std::vector<double>> labeled, std::span<const LabelVector> labels,
                                  std::span<const std::vector<double>> unlabeled, std::size_t k) {
  if (labeled.empty()) throw std::invalid_argument("knn_semi_supervised: no labelled samples");
  if (labels.size() != labeled.size()) throw std::invalid_argument("knn_semi_supervised: one label vector per sample");
  if (k < 1 || k > labeled.size()) {
    throw std::invalid_argument("knn_semi_supervised: k must lie in [1, " + std::to_string(labeled.size()) + "]");
  }
  const std::size_t num_labels = labels.front().size();
  KnnPrediction out;
  std::vector<std::pair<double, std::size_t>> dist(labeled.size());
  for (const auto& q : unlabeled) {
    for (std::size_t i = 0; i < labeled.size(); ++i) dist[i] = {euclidean(q, labeled[i]), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::vector<double> score(num_labels, 0.0);
    for (std::size_t n = 0; n < k; ++n) {
      const auto& lab = labels[dist[n].second];
      for (std::size_t j = 0; j < num_labels; ++j) score[j] += lab[j];
    }
    LabelVector bits(num_labels);
    for (std::size_t j = 0; j < num_labels; ++j) {
      score[j] /= static_cast<double>(k);
      bits[j] = score[j] >= 0.5;
    }
    out.scores.push_back(std::move(score));
    out.labels.push_back(std::move(bits));
  }
  return out;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> truth) {
  if (scores.size() != truth.size()) throw std::invalid_argument("average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  // extended accumulator, rounded once: small cases come out correctly rounded
  long double sum = 0.0L;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!truth[order[rank]]) continue;
    ++hits;
    sum += static_cast<long double>(hits) / static_cast<long double>(rank + 1);
  }
  if (hits == 0) throw std::invalid_argument("average_precision: no positive samples");
  return static_cast<double>(sum / static_cast<long double>(hits));
}

double mean_average_precision(std::span<const std::optional<double>> per_class) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& ap : per_class) {
    if (!ap) continue;
    sum += *ap;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("mean_average_precision: no class has positive samples");
  return sum / static_cast<double>(count);
}

double mean_accuracy(std::span<const LabelVector> predicted, std::span<const LabelVector> truth) {
  if (predicted.size() != truth.size() || truth.empty()) throw std::invalid_argument("mean_accuracy: size mismatch");
  const std::size_t k = truth.front().size();
  double total = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) correct += (predicted[i].at(j) != 0) == (truth[i].at(j) != 0);
    total += static_cast<double>(correct) / static_cast<double>(truth.size());
  }
  return total / static_cast<double>(k);
}

RankingMetrics ranking_metrics(std::span<const std::vector<double>> scores, std::span<const LabelVector> predicted,
                               std::span<const LabelVector> truth) {
  if (scores.size() != truth.size() || truth.empty()) throw std::invalid_argument("ranking_metrics: size mismatch");
  const std::size_t k = truth.front().size();
  RankingMetrics m;
  std::vector<double> column(truth.size());
  std::vector<std::uint8_t> positives(truth.size());
  for (std::size_t j = 0; j < k; ++j) {
    bool any = false;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      column[i] = scores[i].at(j);
      positives[i] = truth[i].at(j);
      any = any || positives[i];
    }
    m.per_class_ap.push_back(any ? std::optional<double>(average_precision(column, positives)) : std::nullopt);
  }
  m.map = mean_average_precision(m.per_class_ap);
  m.mean_accuracy = mean_accuracy(predicted, truth);
  return m;
}

double random_baseline_map(std::span<const LabelVector> truth, std::uint64_t seed, std::size_t repeats) {
  if (repeats == 0) throw std::invalid_argument("random_baseline_map: repeats must be >= 1");
  Rng rng(seed);
  double total = 0.0;
  std::vector<std::vector<double>> scores(truth.size(), std::vector<double>(truth.front().size()));
  for (std::size_t r = 0; r < repeats; ++r) {
    for (auto& row : scores)
      for (double& s : row) s = rng.uniform();
    std::vector<LabelVector> none(truth.size(), LabelVector(truth.front().size(), 0));
    total += ranking_metrics(scores, none, truth).map;
  }
  return total / static_cast<double>(repeats);
}

AnnotationMethod annotation_method_from_string(const std::string& name) {
  if (name == "unsupervised") return AnnotationMethod::Unsupervised;
  if (name == "knn") return AnnotationMethod::Knn;
  throw std::invalid_argument("unknown annotation mode '" + name + "' (expected unsupervised or knn)");
}

std::string to_string(AnnotationMethod method) {
  return method == AnnotationMethod::Knn ? "knn" : "unsupervised";
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, values.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0};
}

std::vector<Representation> single_label_prototypes(std::span<const Representation> reprs,
                                                    std::span<const LabelVector> labels,
                                                    std::span<const std::size_t> indices, std::size_t num_labels) {
  std::vector<Representation> out;
  for (std::size_t j = 0; j < num_labels; ++j) {
    std::vector<Representation> single, carrying;
    for (std::size_t i : indices) {
      const auto& lab = labels[i];
      if (!lab[j]) continue;
      carrying.push_back(reprs[i]);
      if (std::count(lab.begin(), lab.end(), 1) == 1) single.push_back(reprs[i]);
    }
    if (carrying.empty()) {
      throw std::invalid_argument("no sample carries label " + std::to_string(j) + "; cannot build its prototype");
    }
    out.push_back(average_representation(single.empty() ? carrying : single));
  }
  return out;
}

CrossValidationResult cross_validate(const Dataset& data, std::span<const Representation> reprs,
                                     const CrossValidationOptions& options) {
  if (reprs.size() != data.size()) throw std::invalid_argument("cross_validate: one representation per sample");
  if (!(options.label_fraction > 0.0 && options.label_fraction <= 1.0)) {
    throw std::invalid_argument("cross_validate: label_fraction must lie in (0,1]");
  }
  const auto labels = data.labels();
  const auto fold_of = split_folds(labels, options.folds, options.seed);
  CrossValidationResult result;

  for (std::size_t fold = 0; fold < options.folds; ++fold) {
    const TrainTestSplit split = holdout_split(fold_of, fold);
    std::vector<Representation> test_reprs;
    std::vector<LabelVector> truth;
    for (std::size_t i : split.test) {
      test_reprs.push_back(reprs[i]);
      truth.push_back(labels[i]);
    }

    std::vector<std::vector<double>> scores;
    std::vector<LabelVector> predicted;
    if (options.method == AnnotationMethod::Unsupervised) {
      std::vector<Representation> prototypes = options.prototypes;
      if (prototypes.empty()) prototypes = single_label_prototypes(reprs, labels, split.train, data.num_labels);
      if (prototypes.size() != data.num_labels) {
        throw std::invalid_argument("cross_validate: " + std::to_string(prototypes.size()) + " prototypes for " +
                                    std::to_string(data.num_labels) + " labels");
      }
      const double h = options.bandwidth > 0.0 ? options.bandwidth : median_bandwidth(test_reprs, prototypes);
      for (auto& r : unsupervised_annotate(test_reprs, prototypes, h, options.threshold)) {
        scores.push_back(std::move(r.scores));
        predicted.push_back(std::move(r.labels));
      }
    } else {
      std::vector<std::size_t> pool = split.train;
      const auto count = static_cast<std::size_t>(std::llround(options.label_fraction * static_cast<double>(pool.size())));
      if (count == 0) {
        throw std::invalid_argument("cross_validate: label_fraction " + std::to_string(options.label_fraction) +
                                    " leaves no labelled samples");
      }
      Rng rng(mix_seed(options.seed, fold));
      rng.shuffle(pool);
      pool.resize(count);
      std::sort(pool.begin(), pool.end());
      std::vector<std::vector<double>> labeled;
      std::vector<LabelVector> labeled_bits;
      for (std::size_t i : pool) {
        labeled.push_back(reprs[i].mu);
        labeled_bits.push_back(labels[i]);
      }
      std::vector<std::vector<double>> queries;
      for (const auto& r : test_reprs) queries.push_back(r.mu);
      auto prediction = knn_semi_supervised(labeled, labeled_bits, queries, std::min(options.knn_k, labeled.size()));
      scores = std::move(prediction.scores);
      predicted = std::move(prediction.labels);
    }
    result.folds.push_back(ranking_metrics(scores, predicted, truth));
  }

  std::vector<double> maps, accs;
  for (const auto& f : result.folds) {
    maps.push_back(f.map);
    accs.push_back(f.mean_accuracy);
  }
  result.map = mean_std(maps);
  result.mean_accuracy = mean_std(accs);
  for (std::size_t j = 0; j < data.num_labels; ++j) {
    std::vector<double> aps;
    for (const auto& f : result.folds) {
      if (f.per_class_ap[j]) aps.push_back(*f.per_class_ap[j]);
    }
    result.per_class_ap.push_back(mean_std(aps));
  }
  return result;
}

CrossValidationResult cross_validate(const Dataset& data, const VaeModel& model,
                                     const CrossValidationOptions& options) {
  const auto reprs = extract_all(model, data);
  return cross_validate(data, reprs, options);
}

AnnotationRun run_annotation(const Dataset& data, std::span<const Representation> reprs, const AnnotateParams& params,
                             std::span<const Representation> prototypes) {
  if (reprs.size() != data.size()) throw std::invalid_argument("run_annotation: one representation per sample");
  const auto labels = data.labels();
  AnnotationRun run;
  CrossValidationOptions cv;
  cv.method = params.method;
  cv.folds = params.folds;
  cv.label_fraction = params.label_fraction;
  cv.knn_k = params.knn_k;
  cv.threshold = params.threshold;
  cv.bandwidth = params.bandwidth;
  cv.seed = params.seed;

  if (params.method == AnnotationMethod::Unsupervised) {
    std::vector<Representation> protos(prototypes.begin(), prototypes.end());
    if (protos.empty()) {
      std::vector<std::size_t> all(data.size());
      std::iota(all.begin(), all.end(), 0);
      protos = single_label_prototypes(reprs, labels, all, data.num_labels);
    } else {
      cv.prototypes = protos;
    }
    const double h = params.bandwidth > 0.0 ? params.bandwidth : median_bandwidth(reprs, protos);
    run.results = unsupervised_annotate(reprs, protos, h, params.threshold);
    if (protos.size() == data.num_labels) run.metrics = cross_validate(data, reprs, cv);
  } else {
    std::vector<std::size_t> pool(data.size());
    std::iota(pool.begin(), pool.end(), 0);
    const auto count = static_cast<std::size_t>(std::llround(params.label_fraction * static_cast<double>(pool.size())));
    if (!(params.label_fraction > 0.0 && params.label_fraction <= 1.0) || count == 0) {
      throw std::invalid_argument("run_annotation: label_fraction leaves no labelled samples");
    }
    Rng rng(params.seed);
    rng.shuffle(pool);
    std::vector<std::uint8_t> is_labeled(data.size(), 0);
    for (std::size_t i = 0; i < count; ++i) is_labeled[pool[i]] = 1;
    std::vector<std::vector<double>> labeled, queries;
    std::vector<LabelVector> labeled_bits;
    std::vector<std::size_t> query_index;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (is_labeled[i]) {
        labeled.push_back(reprs[i].mu);
        labeled_bits.push_back(labels[i]);
      } else {
        queries.push_back(reprs[i].mu);
        query_index.push_back(i);
      }
    }
    const auto prediction = knn_semi_supervised(labeled, labeled_bits, queries, std::min(params.knn_k, labeled.size()));
    run.results.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      run.results[i].sample_id = data.samples[i].pgpm.id;
      if (is_labeled[i]) {
        run.results[i].labels = labels[i];
        run.results[i].scores.assign(labels[i].begin(), labels[i].end());
      }
    }
    for (std::size_t q = 0; q < query_index.size(); ++q) {
      run.results[query_index[q]].scores = prediction.scores[q];
      run.results[query_index[q]].labels = prediction.labels[q];
    }
    run.metrics = cross_validate(data, reprs, cv);
  }
  run.random_baseline_map = random_baseline_map(labels, params.seed);
  return run;
}

std::string format_metrics_table(const std::vector<std::string>& class_names,
                                 const std::vector<std::pair<std::string, CrossValidationResult>>& rows) {
  auto cell = [](const MeanStd& m) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << 100.0 * m.mean << "±" << 100.0 * m.std;
    return s.str();
  };
  std::ostringstream out;
  out << "| method |";
  for (const auto& name : class_names) out << ' ' << name << " |";
  out << " mAP | mA |\n|---|";
  for (std::size_t j = 0; j < class_names.size(); ++j) out << "---|";
  out << "---|---|\n";
  for (const auto& [name, r] : rows) {
    out << "| " << name << " |";
    for (const auto& ap : r.per_class_ap) out << ' ' << cell(ap) << " |";
    out << ' ' << cell(r.map) << " | " << cell(r.mean_accuracy) << " |\n";
  }
  return out.str();
}

}  // namespace duhiv

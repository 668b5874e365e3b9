#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "duhiv/data.hpp"
#include "duhiv/latent.hpp"

namespace duhiv {

struct InsightRecord {
  std::string id;
  std::string name;
  std::string description;
  Representation prototype;
  /// Reconstruction of the prototype mean; may be empty.
  Pgpm thumbnail;
};

void to_json(nlohmann::json& j, const InsightRecord& r);
void from_json(const nlohmann::json& j, InsightRecord& r);

class DuplicateInsightError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnknownInsightError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Ordered insight set. When a backing file is set, every mutation rewrites it
/// (one JSON record per line, replaced atomically). Not internally synchronised.
class InsightRegistry {
 public:
  explicit InsightRegistry(std::size_t dim, std::optional<std::filesystem::path> backing_file = std::nullopt);

  /// Reads backing_file if it exists.
  static InsightRegistry open(std::size_t dim, const std::filesystem::path& backing_file);

  void add(InsightRecord record);
  void update(InsightRecord record);
  void remove(const std::string& id);
  const InsightRecord& get(const std::string& id) const;
  bool contains(const std::string& id) const;
  const std::vector<InsightRecord>& list() const { return records_; }
  std::size_t size() const { return records_.size(); }
  std::size_t dim() const { return dim_; }
  std::vector<Representation> prototypes() const;

  void save(const std::filesystem::path& path) const;

 private:
  void check(const InsightRecord& record) const;
  void persist() const;

  std::size_t dim_;
  std::optional<std::filesystem::path> backing_file_;
  std::vector<InsightRecord> records_;
};

/// Reads line-delimited insight records (the registry file format).
std::vector<InsightRecord> load_insights(const std::filesystem::path& path);

struct AnnotationResult {
  std::string sample_id;
  std::vector<double> scores;
  LabelVector labels;
};

nlohmann::json to_json_line(const AnnotationResult& r);
void write_annotations(const std::filesystem::path& path, std::span<const AnnotationResult> results);

/// Median Euclidean distance between sample means and prototype means.
double median_bandwidth(std::span<const Representation> samples, std::span<const Representation> prototypes);

/// s_ij = exp(-d_ij^2 / (2 h^2)) with d_ij the distance between means; bit = s >= tau.
std::vector<AnnotationResult> unsupervised_annotate(std::span<const Representation> samples,
                                                    std::span<const Representation> prototypes, double bandwidth,
                                                    double threshold = 0.5);

struct KnnPrediction {
  std::vector<std::vector<double>> scores;
  std::vector<LabelVector> labels;
};

/// Score = fraction of the k nearest labelled points carrying the label
/// (distance ties go to the lower index); bit = score >= 0.5.
KnnPrediction knn_semi_supervised(std::span<const std::vector<double>> labeled, std::span<const LabelVector> labels,
                                  std::span<const std::vector<double>> unlabeled, std::size_t k);

/// Ranking AP: sort by score descending (ties by index) and average the
/// precision at each positive. Throws std::invalid_argument without positives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> truth);

/// Mean over the classes that have a value. Throws when none has.
double mean_average_precision(std::span<const std::optional<double>> per_class);

struct RankingMetrics {
  /// nullopt for classes without positives.
  std::vector<std::optional<double>> per_class_ap;
  double map = 0.0;
  double mean_accuracy = 0.0;
};

/// scores[i][j] for sample i, class j; predicted bits feed mean accuracy.
RankingMetrics ranking_metrics(std::span<const std::vector<double>> scores, std::span<const LabelVector> predicted,
                               std::span<const LabelVector> truth);

/// Per-label accuracy averaged over labels.
double mean_accuracy(std::span<const LabelVector> predicted, std::span<const LabelVector> truth);

/// mAP of uniformly random scores, averaged over repeats.
double random_baseline_map(std::span<const LabelVector> truth, std::uint64_t seed, std::size_t repeats = 20);

enum class AnnotationMethod { Unsupervised, Knn };
AnnotationMethod annotation_method_from_string(const std::string& name);
std::string to_string(AnnotationMethod method);

struct CrossValidationOptions {
  AnnotationMethod method = AnnotationMethod::Unsupervised;
  std::size_t folds = 5;
  double label_fraction = 1.0;
  std::size_t knn_k = 10;
  double threshold = 0.5;
  /// <= 0 selects median_bandwidth per fold.
  double bandwidth = 0.0;
  std::uint64_t seed = 0;
  /// Fixed prototypes for the unsupervised method (one per label). When
  /// empty, each fold averages its single-label training samples.
  std::vector<Representation> prototypes;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(std::span<const double> values);

struct CrossValidationResult {
  std::vector<RankingMetrics> folds;
  std::vector<MeanStd> per_class_ap;
  MeanStd map;
  MeanStd mean_accuracy;
};

/// Prototype of each label from samples carrying exactly that label; falls
/// back to every sample carrying it when no single-label sample exists.
std::vector<Representation> single_label_prototypes(std::span<const Representation> reprs,
                                                    std::span<const LabelVector> labels,
                                                    std::span<const std::size_t> indices, std::size_t num_labels);

CrossValidationResult cross_validate(const Dataset& data, std::span<const Representation> reprs,
                                     const CrossValidationOptions& options);
CrossValidationResult cross_validate(const Dataset& data, const VaeModel& model,
                                     const CrossValidationOptions& options);

struct AnnotateParams {
  AnnotationMethod method = AnnotationMethod::Unsupervised;
  double threshold = 0.5;
  /// <= 0 selects the median heuristic.
  double bandwidth = 0.0;
  std::size_t knn_k = 10;
  double label_fraction = 1.0;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
};

struct AnnotationRun {
  std::vector<AnnotationResult> results;
  /// Cross-validated metrics; absent when the prototypes do not map one-to-one
  /// onto the dataset labels.
  std::optional<CrossValidationResult> metrics;
  double random_baseline_map = 0.0;
};

/// Shared by the CLI and the HTTP service. Unsupervised: annotates every sample
/// against the given prototypes (single-label averages over the whole set when
/// none are given). KNN: a seeded label_fraction subset is labelled and the
/// remaining samples are predicted.
AnnotationRun run_annotation(const Dataset& data, std::span<const Representation> reprs, const AnnotateParams& params,
                             std::span<const Representation> prototypes = {});

/// "method | name_1 | ... | mAP | mA" with mean±std cells in percent.
std::string format_metrics_table(const std::vector<std::string>& class_names,
                                 const std::vector<std::pair<std::string, CrossValidationResult>>& rows);

}  // namespace duhiv

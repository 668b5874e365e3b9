#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "duhiv/tensor.hpp"

namespace duhiv {

/// Power-grid pixel map: rows are buses (sorted by id), columns are time
/// points, values are normalised voltages in [0,1].
struct Pgpm {
  std::string id;
  std::size_t rows = 0;
  std::size_t cols = 0;
  double dt = 0.01;
  std::vector<double> grid;

  double at(std::size_t bus, std::size_t time) const { return grid[bus * cols + time]; }
};

/// bit j set <=> insight j present.
using LabelVector = std::vector<std::uint8_t>;

std::string label_string(const LabelVector& labels);
LabelVector parse_label_string(const std::string& bits);

struct Sample {
  Pgpm pgpm;
  LabelVector labels;
};

struct Dataset {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t num_labels = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  std::vector<LabelVector> labels() const;
  /// Index of the sample with this id; throws std::out_of_range.
  std::size_t index_of(const std::string& id) const;
};

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Insight primitives

enum class InsightKind { StepSag, StepSurge, Oscillation, Blackout, RampDrift, CorrelatedFlicker };

std::string to_string(InsightKind kind);
InsightKind insight_kind_from_string(const std::string& name);

/// Half-open bus interval [begin, end).
struct Band {
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct PrimitiveParams {
  Band buses;
  std::size_t onset = 0;
  /// Time points covered from onset; clipped at the map edge.
  std::size_t duration = 0;
  double magnitude = 0.0;
  /// Oscillation period in time points.
  double period = 6.0;
  /// Second band of a correlated flicker.
  Band partner;
  std::uint64_t burst_seed = 0;
};

/// Additive rows x cols pattern of one primitive. Zero outside
/// buses x [onset, onset + duration) (and the partner band for flicker).
/// Throws std::invalid_argument for empty or out-of-range bands.
std::vector<double> insight_pattern(InsightKind kind, const PrimitiveParams& params, std::size_t rows,
                                    std::size_t cols);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Sampling ranges for one insight generator. Integer-valued ranges are inclusive.
struct InsightGenerator {
  InsightKind kind = InsightKind::StepSag;
  std::string name;
  double probability = 0.4;
  Range band_start;
  Range band_width;
  Range onset;
  Range duration;
  Range magnitude;
  Range period{4, 8};
  Range partner_start;
};

struct SyntheticSpec {
  std::size_t rows = 32;
  std::size_t cols = 32;
  double dt = 0.01;
  double background_level = 0.7;
  double background_bus_variation = 0.05;
  double background_time_variation = 0.02;
  double noise = 0.02;
  std::uint64_t seed = 0;
  std::vector<InsightGenerator> insights = default_insights();

  static std::vector<InsightGenerator> default_insights();
  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& spec);
void from_json(const nlohmann::json& j, SyntheticSpec& spec);

/// Expected labels per sample given the inclusion probabilities, conditioned on
/// at least one insight being present (generation resamples empty draws).
double expected_label_count(const SyntheticSpec& spec);

/// Pure function of (spec, n): values are quantised to k/255 so the archive
/// round-trip is exact.
Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t n);

// ---------------------------------------------------------------------------
// Archive: <dir>/metadata.jsonl plus <dir>/images/<id>.pgm (binary P5, 8-bit).

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Throws DecodeError on malformed archives or when expected_labels is given
/// and does not match.
Dataset load_dataset(const std::filesystem::path& dir, std::optional<std::size_t> expected_labels = std::nullopt);

void write_pgm(const std::filesystem::path& path, const Pgpm& pgpm);
Pgpm read_pgm(const std::filesystem::path& path);
std::vector<std::uint8_t> quantize(std::span<const double> values);

/// Standard alphabet with '=' padding.
std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws DecodeError on characters outside the alphabet or bad length.
std::vector<std::uint8_t> base64_decode(std::string_view text);

// ---------------------------------------------------------------------------

/// Fold index per sample, stratified by label combination. Sizes differ by at most one.
std::vector<std::size_t> split_folds(const std::vector<LabelVector>& labels, std::size_t folds, std::uint64_t seed);

struct TrainTestSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

TrainTestSplit holdout_split(const std::vector<std::size_t>& fold_of, std::size_t test_fold);

/// [N,1,rows,cols] batch of the selected samples.
Tensor image_batch(const Dataset& dataset, std::span<const std::size_t> indices);
Tensor image_tensor(const Pgpm& pgpm);

}  // namespace duhiv

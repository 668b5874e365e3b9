#pragma once

#include <array>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "duhiv/data.hpp"
#include "duhiv/model.hpp"

namespace duhiv {

/// Diagonal Gaussian posterior of one PGPM, layers concatenated in order.
struct Representation {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::string source_id;

  std::size_t dim() const { return mu.size(); }
  /// Throws std::invalid_argument unless sizes agree and sigma > 0 is finite.
  void validate() const;
};

void to_json(nlohmann::json& j, const Representation& r);
void from_json(const nlohmann::json& j, Representation& r);

Representation extract(const VaeModel& model, const Pgpm& pgpm);
std::vector<Representation> extract_all(const VaeModel& model, const Dataset& data);
std::vector<Representation> representations_from(const GaussianLatent& latent);

const std::vector<double>& mean_vector(const Representation& r);

/// sum_d (mu1_d - mu2_d)^2 + (sigma1_d - sigma2_d)^2.
double w2_squared(const Representation& a, const Representation& b);

/// mu = t*a.mu + (1-t)*b.mu, sigma likewise; t = 1 gives a, t = 0 gives b.
Representation interpolate(const Representation& a, const Representation& b, double t);

enum class ArithmeticOp { Add, Subtract, Scale };
ArithmeticOp arithmetic_op_from_string(const std::string& name);

/// Combines means; sigma is carried over from base. Scale with a representation
/// operand multiplies componentwise.
Representation arithmetic(ArithmeticOp op, const Representation& base, const Representation& operand);
/// Scalar operand: add/subtract shift every mean, scale multiplies.
Representation arithmetic(ArithmeticOp op, const Representation& base, double operand);

Representation adjust_dimension(const Representation& r, std::size_t dim, double value);
Representation average_representation(std::span<const Representation> rs);

/// Dense symmetric n x n matrix.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> data;

  SquareMatrix() = default;
  explicit SquareMatrix(std::size_t size) : n(size), data(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * n + j]; }
};

/// Entries sqrt(w2_squared(rs[i], rs[j])).
SquareMatrix pairwise_w2_matrix(std::span<const Representation> rs);
SquareMatrix pairwise_euclidean_matrix(std::span<const std::vector<double>> points);

using Point2 = std::array<double, 2>;

struct TsneOptions {
  double perplexity = 30.0;
  std::size_t iterations = 500;
  double exaggeration = 12.0;
  std::size_t exaggeration_iterations = 50;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::uint64_t seed = 0;
};

struct TsneResult {
  std::vector<Point2> points;
  /// KL(P || Q) against the unexaggerated affinities at the end of the
  /// exaggeration phase and after the last iteration.
  double kl_after_exaggeration = 0.0;
  double kl_final = 0.0;
};

/// Exact t-SNE on a precomputed distance matrix. Throws std::invalid_argument
/// when perplexity >= n.
TsneResult tsne_project(const SquareMatrix& distances, const TsneOptions& options = {});

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<std::vector<double>> centroids;
  /// Within-cluster sum of squares after each assignment step.
  std::vector<double> wcss_history;
  std::size_t iterations = 0;
  bool converged = false;
};

/// k-means++ seeding followed by Lloyd iterations. Throws when k > n or k == 0.
KMeansResult kmeans(std::span<const std::vector<double>> vectors, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations = 100);

/// Greedy dart throwing in a seeded content-hash order: accepted points are
/// pairwise >= radius apart and every rejected point lies within radius of an
/// accepted one. Returns ascending indices; the accepted coordinates do not
/// depend on input order.
std::vector<std::size_t> blue_noise_sample(std::span<const Point2> points, double radius, std::uint64_t seed);

/// 2% of the bounding-box diagonal (1e-9 floor for degenerate inputs).
double default_blue_noise_radius(std::span<const Point2> points);

/// Decodes r.mu without sampling.
Pgpm reconstruct(const VaeModel& model, const Representation& r);

struct ProjectionParams {
  std::size_t k = 6;
  /// <= 0 selects default_blue_noise_radius.
  double radius = 0.0;
  std::uint64_t seed = 0;
  TsneOptions tsne;
};

struct ProjectedPoint {
  std::size_t index = 0;
  double x = 0.0;
  double y = 0.0;
  std::size_t cluster = 0;
};

struct ProjectionResult {
  /// Every representation, in input order.
  std::vector<ProjectedPoint> points;
  /// Blue-noise subset for display (indices into points).
  std::vector<std::size_t> sampled;
  std::size_t k = 0;
  double radius = 0.0;
  std::uint64_t seed = 0;
};

/// t-SNE over the W2 matrix of all representations, k-means over their mean
/// vectors, blue-noise subsampling of the 2-D layout.
ProjectionResult project(std::span<const Representation> rs, const ProjectionParams& params);

/// Per latent layer: mean reconstruction MSE caused by moving one mean
/// coordinate by delta, averaged over that layer's dimensions and the samples.
std::vector<double> layer_sensitivity(const VaeModel& model, std::span<const Representation> rs, double delta);

}  // namespace duhiv

#include "duhiv/latent.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

#include "duhiv/ops.hpp"
#include "duhiv/random.hpp"

namespace duhiv {

void Representation::validate() const {
  if (mu.empty()) throw std::invalid_argument("representation is empty");
  if (sigma.size() != mu.size()) {
    throw std::invalid_argument("representation has " + std::to_string(mu.size()) + " means but " +
                                std::to_string(sigma.size()) + " standard deviations");
  }
  for (double m : mu) {
    if (!std::isfinite(m)) throw std::invalid_argument("representation mean is not finite");
  }
  for (double s : sigma) {
    if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("representation sigma must be positive and finite");
  }
}

void to_json(nlohmann::json& j, const Representation& r) {
  j = {{"mu", r.mu}, {"sigma", r.sigma}};
  if (!r.source_id.empty()) j["source_id"] = r.source_id;
}

void from_json(const nlohmann::json& j, Representation& r) {
  r.mu = j.at("mu").get<std::vector<double>>();
  r.sigma = j.at("sigma").get<std::vector<double>>();
  r.source_id = j.value("source_id", std::string());
}

namespace {

void check_same_dim(const Representation& a, const Representation& b, const char* what) {
  if (a.dim() != b.dim() || a.sigma.size() != b.sigma.size()) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                                std::to_string(b.dim()) + ")");
  }
}

}  // namespace

std::vector<Representation> representations_from(const GaussianLatent& latent) {
  const std::size_t n = latent.mean.front().dim(0);
  std::vector<Representation> out(n);
  for (std::size_t l = 0; l < latent.layers(); ++l) {
    const std::size_t d = latent.mean[l].dim(1);
    const auto mu = latent.mean[l].values();
    const auto lv = latent.log_variance[l].values();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        out[i].mu.push_back(mu[i * d + j]);
        out[i].sigma.push_back(std::exp(0.5 * lv[i * d + j]));
      }
    }
  }
  return out;
}

Representation extract(const VaeModel& model, const Pgpm& pgpm) {
  NoGradGuard no_grad;
  Representation r = representations_from(model.infer(image_tensor(pgpm))).front();
  r.source_id = pgpm.id;
  return r;
}

std::vector<Representation> extract_all(const VaeModel& model, const Dataset& data) {
  constexpr std::size_t kChunk = 128;
  NoGradGuard no_grad;
  std::vector<Representation> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < data.size(); begin += kChunk) {
    idx.resize(std::min(kChunk, data.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    auto chunk = representations_from(model.infer(image_batch(data, idx)));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      chunk[i].source_id = data.samples[begin + i].pgpm.id;
      out.push_back(std::move(chunk[i]));
    }
  }
  return out;
}

const std::vector<double>& mean_vector(const Representation& r) { return r.mu; }

double w2_squared(const Representation& a, const Representation& b) {
  check_same_dim(a, b, "w2_squared");
  double total = 0.0;
  for (std::size_t d = 0; d < a.dim(); ++d) {
    const double dm = a.mu[d] - b.mu[d];
    const double ds = a.sigma[d] - b.sigma[d];
    total += dm * dm + ds * ds;
  }
  return total;
}

Representation interpolate(const Representation& a, const Representation& b, double t) {
  check_same_dim(a, b, "interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate: t must lie in [0,1]");
  if (t == 1.0) return {a.mu, a.sigma, {}};
  if (t == 0.0) return {b.mu, b.sigma, {}};
  Representation r;
  r.mu.resize(a.dim());
  r.sigma.resize(a.dim());
  for (std::size_t d = 0; d < a.dim(); ++d) {
    r.mu[d] = t * a.mu[d] + (1.0 - t) * b.mu[d];
    r.sigma[d] = t * a.sigma[d] + (1.0 - t) * b.sigma[d];
  }
  return r;
}

ArithmeticOp arithmetic_op_from_string(const std::string& name) {
  if (name == "add") return ArithmeticOp::Add;
  if (name == "subtract" || name == "sub") return ArithmeticOp::Subtract;
  if (name == "scale") return ArithmeticOp::Scale;
  throw std::invalid_argument("unknown arithmetic op '" + name + "' (expected add, subtract or scale)");
}

Representation arithmetic(ArithmeticOp op, const Representation& base, const Representation& operand) {
  check_same_dim(base, operand, "arithmetic");
  Representation r{base.mu, base.sigma, {}};
  for (std::size_t d = 0; d < r.dim(); ++d) {
    switch (op) {
      case ArithmeticOp::Add: r.mu[d] += operand.mu[d]; break;
      case ArithmeticOp::Subtract: r.mu[d] -= operand.mu[d]; break;
      case ArithmeticOp::Scale: r.mu[d] *= operand.mu[d]; break;
    }
  }
  return r;
}

Representation arithmetic(ArithmeticOp op, const Representation& base, double operand) {
  if (!std::isfinite(operand)) throw std::invalid_argument("arithmetic: operand must be finite");
  Representation r{base.mu, base.sigma, {}};
  for (double& m : r.mu) {
    switch (op) {
      case ArithmeticOp::Add: m += operand; break;
      case ArithmeticOp::Subtract: m -= operand; break;
      case ArithmeticOp::Scale: m *= operand; break;
    }
  }
  return r;
}

Representation adjust_dimension(const Representation& r, std::size_t dim, double value) {
  if (dim >= r.dim()) {
    throw std::invalid_argument("adjust_dimension: dimension " + std::to_string(dim) + " outside [0, " +
                                std::to_string(r.dim()) + ")");
  }
  if (!std::isfinite(value)) throw std::invalid_argument("adjust_dimension: value must be finite");
  Representation out{r.mu, r.sigma, {}};
  out.mu[dim] = value;
  return out;
}

Representation average_representation(std::span<const Representation> rs) {
  if (rs.empty()) throw std::invalid_argument("average_representation: empty list");
  Representation out{std::vector<double>(rs.front().dim(), 0.0), std::vector<double>(rs.front().dim(), 0.0), {}};
  for (const auto& r : rs) {
    check_same_dim(out, r, "average_representation");
    for (std::size_t d = 0; d < r.dim(); ++d) {
      out.mu[d] += r.mu[d];
      out.sigma[d] += r.sigma[d];
    }
  }
  const double n = static_cast<double>(rs.size());
  for (std::size_t d = 0; d < out.dim(); ++d) {
    out.mu[d] /= n;
    out.sigma[d] /= n;
  }
  return out;
}

SquareMatrix pairwise_w2_matrix(std::span<const Representation> rs) {
  SquareMatrix m(rs.size());
  for (std::size_t i = 0; i < rs.size(); ++i) {
    for (std::size_t j = i + 1; j < rs.size(); ++j) m(i, j) = m(j, i) = std::sqrt(w2_squared(rs[i], rs[j]));
  }
  return m;
}

SquareMatrix pairwise_euclidean_matrix(std::span<const std::vector<double>> points) {
  SquareMatrix m(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      if (points[i].size() != points[j].size()) throw std::invalid_argument("pairwise distances: dimension mismatch");
      double sq = 0.0;
      for (std::size_t d = 0; d < points[i].size(); ++d) sq += (points[i][d] - points[j][d]) * (points[i][d] - points[j][d]);
      m(i, j) = m(j, i) = std::sqrt(sq);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// t-SNE

namespace {

// Row-conditional affinities matching the target perplexity, symmetrised and normalised.
std::vector<double> joint_affinities(const SquareMatrix& dist, double perplexity) {
  const std::size_t n = dist.n;
  const double target = std::log(perplexity);
  std::vector<double> p(n * n, 0.0);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      d2[j] = dist(i, j) * dist(i, j);
      if (j != i) dmin = std::min(dmin, d2[j]);
    }
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double* row = &p[i * n];
    for (int iter = 0; iter < 200; ++iter) {
      double total = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        row[j] = std::exp(-(d2[j] - dmin) * beta);
        total += row[j];
        weighted += (d2[j] - dmin) * row[j];
      }
      const double entropy = std::log(total) + beta * weighted / total;
      for (std::size_t j = 0; j < n; ++j) row[j] /= total;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  std::vector<double> joint(n * n);
  const double scale = 1.0 / (2.0 * static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      joint[i * n + j] = i == j ? 0.0 : std::max((p[i * n + j] + p[j * n + i]) * scale, 1e-12);
    }
  }
  return joint;
}

double tsne_kl(const std::vector<double>& p, const std::vector<Point2>& y) {
  const std::size_t n = y.size();
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
      z += 1.0 / (1.0 + dx * dx + dy * dy);
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
      const double q = std::max(1.0 / (1.0 + dx * dx + dy * dy) / z, 1e-300);
      const double pij = p[i * n + j];
      kl += pij * std::log(pij / q);
    }
  }
  return kl;
}

}  // namespace

TsneResult tsne_project(const SquareMatrix& distances, const TsneOptions& options) {
  const std::size_t n = distances.n;
  if (n < 2) throw std::invalid_argument("tsne_project: at least two points are required");
  if (!(options.perplexity > 0.0) || options.perplexity >= static_cast<double>(n)) {
    throw std::invalid_argument("tsne_project: perplexity must lie in (0, n)");
  }
  for (double d : distances.data) {
    if (!std::isfinite(d) || d < 0.0) throw std::invalid_argument("tsne_project: distances must be finite and >= 0");
  }
  const std::vector<double> p = joint_affinities(distances, options.perplexity);

  Rng rng(options.seed);
  std::vector<Point2> y(n), update(n, Point2{0, 0}), gains(n, Point2{1, 1}), grad(n);
  for (auto& pt : y) pt = {1e-4 * rng.normal(), 1e-4 * rng.normal()};

  TsneResult result;
  std::vector<double> num(n * n);
  for (std::size_t iter = 0; iter < options.iterations; ++iter) {
    const bool early = iter < options.exaggeration_iterations;
    const double exaggeration = early ? options.exaggeration : 1.0;
    const double momentum = early ? options.initial_momentum : options.final_momentum;

    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[i][0] - y[j][0], dy = y[i][1] - y[j][1];
        const double v = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = v;
        z += 2.0 * v;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = num[i * n + j];
        const double coeff = (exaggeration * p[i * n + j] - v / z) * v;
        gx += coeff * (y[i][0] - y[j][0]);
        gy += coeff * (y[i][1] - y[j][1]);
      }
      grad[i] = {4.0 * gx, 4.0 * gy};
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        double& g = gains[i][c];
        g = (grad[i][c] > 0.0) != (update[i][c] > 0.0) ? g + 0.2 : g * 0.8;
        g = std::max(g, 0.01);
        update[i][c] = momentum * update[i][c] - options.learning_rate * g * grad[i][c];
        y[i][c] += update[i][c];
      }
    }
    Point2 centre{0, 0};
    for (const auto& pt : y) {
      centre[0] += pt[0];
      centre[1] += pt[1];
    }
    for (auto& pt : y) {
      pt[0] -= centre[0] / static_cast<double>(n);
      pt[1] -= centre[1] / static_cast<double>(n);
    }
    if (iter + 1 == options.exaggeration_iterations) result.kl_after_exaggeration = tsne_kl(p, y);
  }
  for (const auto& pt : y) {
    if (!std::isfinite(pt[0]) || !std::isfinite(pt[1])) throw NumericError("tsne_project: embedding diverged");
  }
  result.kl_final = tsne_kl(p, y);
  if (options.exaggeration_iterations == 0 || options.exaggeration_iterations > options.iterations) {
    result.kl_after_exaggeration = result.kl_final;
  }
  result.points = std::move(y);
  return result;
}

// ---------------------------------------------------------------------------
// k-means

namespace {

double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double sq = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) sq += (a[d] - b[d]) * (a[d] - b[d]);
  return sq;
}

}  // namespace

KMeansResult kmeans(std::span<const std::vector<double>> vectors, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations) {
  const std::size_t n = vectors.size();
  if (k == 0) throw std::invalid_argument("kmeans: k must be >= 1");
  if (k > n) throw std::invalid_argument("kmeans: k (" + std::to_string(k) + ") exceeds the number of points (" +
                                         std::to_string(n) + ")");
  const std::size_t dim = vectors.front().size();
  for (const auto& v : vectors) {
    if (v.size() != dim) throw std::invalid_argument("kmeans: vectors have different lengths");
  }

  Rng rng(seed);
  KMeansResult result;
  std::vector<std::size_t> chosen{static_cast<std::size_t>(rng.below(n))};
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = squared_distance(vectors[i], vectors[chosen[0]]);
  while (chosen.size() < k) {
    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (nearest[i] <= 0.0) continue;
        pick = i;
        target -= nearest[i];
        if (target < 0.0) break;
      }
    } else {
      // All remaining points coincide with a centre; take the first unused index.
      for (std::size_t i = 0; i < n && pick == n; ++i) {
        if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) pick = i;
      }
    }
    chosen.push_back(pick);
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], squared_distance(vectors[i], vectors[pick]));
  }
  for (std::size_t c : chosen) result.centroids.push_back(vectors[c]);

  result.assignments.assign(n, k);
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_sq = squared_distance(vectors[i], result.centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double sq = squared_distance(vectors[i], result.centroids[c]);
        if (sq < best_sq) {
          best_sq = sq;
          best = c;
        }
      }
      changed = changed || best != result.assignments[i];
      result.assignments[i] = best;
      wcss += best_sq;
    }
    result.wcss_history.push_back(wcss);
    result.iterations = iter + 1;
    if (!changed) {
      result.converged = true;
      break;
    }
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[result.assignments[i]];
      for (std::size_t d = 0; d < dim; ++d) sums[result.assignments[i]][d] += vectors[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t d = 0; d < dim; ++d) result.centroids[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Blue noise

std::vector<std::size_t> blue_noise_sample(std::span<const Point2> points, double radius, std::uint64_t seed) {
  if (!(radius > 0.0)) throw std::invalid_argument("blue_noise_sample: radius must be positive");
  const std::size_t n = points.size();
  auto bits = [](double v) { return std::bit_cast<std::uint64_t>(v == 0.0 ? 0.0 : v); };
  std::vector<std::pair<std::uint64_t, std::size_t>> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order[i] = {mix_seed(mix_seed(seed, bits(points[i][0])), bits(points[i][1])), i};
  }
  std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    const auto& pa = points[a.second];
    const auto& pb = points[b.second];
    if (pa != pb) return pa < pb;
    return a.second < b.second;
  });
  const double r2 = radius * radius;
  std::vector<std::size_t> accepted;
  for (const auto& [priority, i] : order) {
    bool clear = true;
    for (std::size_t a : accepted) {
      const double dx = points[i][0] - points[a][0], dy = points[i][1] - points[a][1];
      if (dx * dx + dy * dy < r2) {
        clear = false;
        break;
      }
    }
    if (clear) accepted.push_back(i);
  }
  std::sort(accepted.begin(), accepted.end());
  return accepted;
}

double default_blue_noise_radius(std::span<const Point2> points) {
  if (points.empty()) return 1e-9;
  Point2 lo = points.front(), hi = points.front();
  for (const auto& p : points) {
    for (int c = 0; c < 2; ++c) {
      lo[c] = std::min(lo[c], p[c]);
      hi[c] = std::max(hi[c], p[c]);
    }
  }
  return std::max(0.02 * std::hypot(hi[0] - lo[0], hi[1] - lo[1]), 1e-9);
}

// ---------------------------------------------------------------------------

Pgpm reconstruct(const VaeModel& model, const Representation& r) {
  if (r.dim() != model.latent_dim()) {
    throw std::invalid_argument("reconstruct: representation has dimension " + std::to_string(r.dim()) +
                                ", model expects " + std::to_string(model.latent_dim()));
  }
  NoGradGuard no_grad;
  const Tensor image = model.generate(split_latent_row(model, r.mu));
  Pgpm out;
  out.id = r.source_id;
  out.rows = model.image_height();
  out.cols = model.image_width();
  out.grid.assign(image.values().begin(), image.values().end());
  return out;
}

ProjectionResult project(std::span<const Representation> rs, const ProjectionParams& params) {
  if (rs.size() < 2) throw std::invalid_argument("project: at least two representations are required");
  TsneOptions tsne = params.tsne;
  tsne.seed = params.seed;
  // Small sets cannot support the default perplexity.
  tsne.perplexity = std::min(tsne.perplexity, std::max(1.0, (static_cast<double>(rs.size()) - 1.0) / 3.0));
  const TsneResult layout = tsne_project(pairwise_w2_matrix(rs), tsne);

  std::vector<std::vector<double>> means;
  means.reserve(rs.size());
  for (const auto& r : rs) means.push_back(r.mu);
  const KMeansResult clusters = kmeans(means, params.k, params.seed);

  ProjectionResult out;
  out.k = params.k;
  out.seed = params.seed;
  out.radius = params.radius > 0.0 ? params.radius : default_blue_noise_radius(layout.points);
  for (std::size_t i = 0; i < rs.size(); ++i) {
    out.points.push_back({i, layout.points[i][0], layout.points[i][1], clusters.assignments[i]});
  }
  out.sampled = blue_noise_sample(layout.points, out.radius, params.seed);
  return out;
}

std::vector<double> layer_sensitivity(const VaeModel& model, std::span<const Representation> rs, double delta) {
  const auto& sizes = model.latent_sizes();
  std::vector<double> effect(sizes.size(), 0.0);
  for (const auto& r : rs) {
    const Pgpm base = reconstruct(model, r);
    std::size_t offset = 0;
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      for (std::size_t d = offset; d < offset + sizes[l]; ++d) {
        const Pgpm moved = reconstruct(model, adjust_dimension(r, d, r.mu[d] + delta));
        double sq = 0.0;
        for (std::size_t q = 0; q < base.grid.size(); ++q) sq += (moved.grid[q] - base.grid[q]) * (moved.grid[q] - base.grid[q]);
        effect[l] += sq / static_cast<double>(base.grid.size());
      }
      offset += sizes[l];
    }
  }
  for (std::size_t l = 0; l < sizes.size(); ++l) effect[l] /= static_cast<double>(rs.size() * sizes[l]);
  return effect;
}

}  // namespace duhiv

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "duhiv/latent.hpp"
#include "gradcheck.hpp"
#include "latent_checks.hpp"

using namespace duhiv;
using namespace duhiv::testkit;

namespace {

Representation rep(std::vector<double> mu, std::vector<double> sigma) { return {std::move(mu), std::move(sigma), {}}; }

std::vector<Point2> uniform_points(std::size_t n, std::uint64_t seed, double extent = 10.0) {
  Rng rng(seed);
  std::vector<Point2> pts(n);
  for (auto& p : pts) p = {rng.uniform(0.0, extent), rng.uniform(0.0, extent)};
  return pts;
}

std::vector<std::vector<double>> means_of(const std::vector<Representation>& rs) {
  std::vector<std::vector<double>> out;
  for (const auto& r : rs) out.push_back(r.mu);
  return out;
}

double wcss(const std::vector<std::vector<double>>& xs, const KMeansResult& km) {
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    for (std::size_t d = 0; d < xs[i].size(); ++d) {
      const double diff = xs[i][d] - km.centroids[km.assignments[i]][d];
      total += diff * diff;
    }
  return total;
}

}  // namespace

TEST(W2, Examples) {
  EXPECT_EQ(w2_squared(rep({1, 2}, {0.5, 1}), rep({1, 2}, {0.5, 1})), 0.0);
  EXPECT_DOUBLE_EQ(w2_squared(rep({0, 0}, {1, 1}), rep({3, 4}, {1, 1})), 25.0);
  EXPECT_DOUBLE_EQ(w2_squared(rep({0}, {1}), rep({0}, {3})), 4.0);
  EXPECT_DOUBLE_EQ(w2_squared(rep({1, 0}, {1, 2}), rep({0, 0}, {2, 2})), 2.0);
  EXPECT_THROW(w2_squared(rep({0}, {1}), rep({0, 0}, {1, 1})), std::invalid_argument);
}

TEST(W2, DiagonalFormulaMatchesFullMatrixOracle) {
  Rng rng(10);
  for (int t = 0; t < 10; ++t) {
    const std::size_t dim = 2 + rng.below(15);
    const auto a = random_representation(rng, dim), b = random_representation(rng, dim);
    const double fast = w2_squared(a, b), full = w2_squared_full(a, b);
    EXPECT_LE(std::abs(fast - full) / full, 1e-10) << "pair " << t;
  }
}

TEST(W2, FullMatrixOracleAgreesOnKnownNonDiagonalCase) {
  // Commuting covariances: W2^2 = |dm|^2 + sum (sqrt(l1) - sqrt(l2))^2 over shared eigenbasis.
  Eigen::MatrixXd rot(2, 2);
  const double c = std::cos(0.3), s = std::sin(0.3);
  rot << c, -s, s, c;
  const Eigen::MatrixXd s1 = rot * Eigen::Vector2d(4.0, 1.0).asDiagonal() * rot.transpose();
  const Eigen::MatrixXd s2 = rot * Eigen::Vector2d(1.0, 9.0).asDiagonal() * rot.transpose();
  const double got = w2_squared_full(Eigen::Vector2d(1, 0), s1, Eigen::Vector2d(0, 0), s2);
  EXPECT_NEAR(got, 1.0 + 1.0 + 4.0, 1e-12);
}

TEST(W2, SqrtIsAMetricOnRandomTriples) {
  Rng rng(11);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t dim = 1 + rng.below(8);
    const auto a = random_representation(rng, dim), b = random_representation(rng, dim),
               c = random_representation(rng, dim);
    const double ab = std::sqrt(w2_squared(a, b)), ba = std::sqrt(w2_squared(b, a)),
                 bc = std::sqrt(w2_squared(b, c)), ac = std::sqrt(w2_squared(a, c));
    EXPECT_EQ(w2_squared(a, a), 0.0);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-9);
    EXPECT_LE(ac, ab + bc + 1e-9);
  }
}

TEST(W2, PairwiseMatrixIsSymmetricWithZeroDiagonal) {
  Rng rng(12);
  std::vector<Representation> rs;
  for (int i = 0; i < 7; ++i) rs.push_back(random_representation(rng, 4));
  const auto m = pairwise_w2_matrix(rs);
  ASSERT_EQ(m.n, 7u);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_EQ(m(i, j), m(j, i));
      EXPECT_NEAR(m(i, j), std::sqrt(w2_squared(rs[i], rs[j])), 1e-15);
    }
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(m(i, i), 0.0);
  const auto e = pairwise_euclidean_matrix(means_of(rs));
  EXPECT_NEAR(e(0, 1), std::sqrt(w2_squared(rep(rs[0].mu, {1, 1, 1, 1}), rep(rs[1].mu, {1, 1, 1, 1}))), 1e-12);
}

TEST(Interpolate, EndpointsAreExactCopies) {
  Rng rng(13);
  for (int t = 0; t < 50; ++t) {
    const auto a = random_representation(rng, 16), b = random_representation(rng, 16);
    const auto at1 = interpolate(a, b, 1.0), at0 = interpolate(a, b, 0.0);
    for (std::size_t d = 0; d < 16; ++d) {
      EXPECT_EQ(at1.mu[d], a.mu[d]);
      EXPECT_EQ(at1.sigma[d], a.sigma[d]);
      EXPECT_EQ(at0.mu[d], b.mu[d]);
      EXPECT_EQ(at0.sigma[d], b.sigma[d]);
    }
  }
}

TEST(Interpolate, MidpointAndPath) {
  const auto a = rep({2, 0}, {1, 1}), b = rep({0, 4}, {3, 1});
  const auto mid = interpolate(a, b, 0.5);
  EXPECT_EQ(mid.mu, (std::vector<double>{1, 2}));
  EXPECT_EQ(mid.sigma, (std::vector<double>{2, 1}));
  // distance to the endpoints scales linearly with t
  const double total = std::sqrt(w2_squared(a, b));
  for (double t : {0.1, 0.25, 0.9})
    EXPECT_NEAR(std::sqrt(w2_squared(interpolate(a, b, t), b)), t * total, 1e-12);
  EXPECT_THROW(interpolate(a, b, 1.5), std::invalid_argument);
  EXPECT_THROW(interpolate(a, b, -0.1), std::invalid_argument);
  EXPECT_THROW(interpolate(a, b, std::nan("")), std::invalid_argument);
}

TEST(Arithmetic, OperatesOnMeansAndKeepsBaseSigma) {
  const auto base = rep({1, 2}, {0.5, 0.25}), other = rep({3, -1}, {9, 9});
  auto r = arithmetic(ArithmeticOp::Add, base, other);
  EXPECT_EQ(r.mu, (std::vector<double>{4, 1}));
  EXPECT_EQ(r.sigma, base.sigma);
  EXPECT_EQ(arithmetic(ArithmeticOp::Subtract, base, other).mu, (std::vector<double>{-2, 3}));
  EXPECT_EQ(arithmetic(ArithmeticOp::Scale, base, other).mu, (std::vector<double>{3, -2}));
  EXPECT_EQ(arithmetic(ArithmeticOp::Scale, base, 2.0).mu, (std::vector<double>{2, 4}));
  EXPECT_EQ(arithmetic(ArithmeticOp::Add, base, 1.0).mu, (std::vector<double>{2, 3}));
  EXPECT_EQ(arithmetic(ArithmeticOp::Subtract, base, 1.0).mu, (std::vector<double>{0, 1}));
  EXPECT_THROW(arithmetic(ArithmeticOp::Add, base, rep({1}, {1})), std::invalid_argument);
  EXPECT_EQ(arithmetic_op_from_string("sub"), ArithmeticOp::Subtract);
  EXPECT_THROW(arithmetic_op_from_string("divide"), std::invalid_argument);
}

TEST(Arithmetic, AddThenSubtractRestores) {
  Rng rng(14);
  for (int t = 0; t < 100; ++t) {
    const auto a = random_representation(rng, 6), b = random_representation(rng, 6);
    const auto back = arithmetic(ArithmeticOp::Subtract, arithmetic(ArithmeticOp::Add, a, b), b);
    for (std::size_t d = 0; d < 6; ++d) EXPECT_NEAR(back.mu[d], a.mu[d], 1e-12);
  }
}

TEST(Adjust, ChangesOneCoordinate) {
  const auto r = rep({1, 2, 3}, {1, 1, 1});
  const auto out = adjust_dimension(r, 1, -5.0);
  EXPECT_EQ(out.mu, (std::vector<double>{1, -5, 3}));
  EXPECT_EQ(out.sigma, r.sigma);
  EXPECT_THROW(adjust_dimension(r, 3, 0.0), std::invalid_argument);
}

TEST(Average, MeanOfMeansAndSigmas) {
  std::vector<Representation> rs{rep({0, 2}, {1, 3}), rep({2, 4}, {3, 1})};
  const auto avg = average_representation(rs);
  EXPECT_EQ(avg.mu, (std::vector<double>{1, 3}));
  EXPECT_EQ(avg.sigma, (std::vector<double>{2, 2}));
  EXPECT_THROW(average_representation(std::vector<Representation>{}), std::invalid_argument);
}

TEST(Representation, JsonAndValidation) {
  Representation r = rep({1.5, -2}, {0.5, 2});
  r.source_id = "pgpm-000003";
  const nlohmann::json j = r;
  const auto back = j.get<Representation>();
  EXPECT_EQ(back.mu, r.mu);
  EXPECT_EQ(back.sigma, r.sigma);
  EXPECT_EQ(back.source_id, r.source_id);
  EXPECT_THROW(rep({1}, {0}).validate(), std::invalid_argument);
  EXPECT_THROW(rep({1, 2}, {1}).validate(), std::invalid_argument);
}

TEST(Tsne, SeparatesTwoBlobs) {
  const auto blobs = two_blobs(40, 8, 6.0, 3);
  TsneOptions opt;
  opt.perplexity = 15;
  opt.seed = 1;
  const auto out = tsne_project(pairwise_w2_matrix(blobs.reprs), opt);
  ASSERT_EQ(out.points.size(), 80u);
  EXPECT_GE(nearest_centroid_accuracy(out.points, blobs.labels, 2), 0.95);
  EXPECT_LT(out.kl_final, out.kl_after_exaggeration);
  EXPECT_GE(out.kl_final, 0.0);
}

TEST(Tsne, DeterministicUnderSeed) {
  const auto blobs = two_blobs(15, 4, 4.0, 5);
  const auto d = pairwise_w2_matrix(blobs.reprs);
  TsneOptions opt;
  opt.perplexity = 5;
  opt.iterations = 200;
  opt.seed = 9;
  const auto a = tsne_project(d, opt), b = tsne_project(d, opt);
  EXPECT_EQ(a.points, b.points);
  opt.seed = 10;
  EXPECT_NE(tsne_project(d, opt).points, a.points);
}

TEST(Tsne, RejectsPerplexityAtLeastN) {
  const auto blobs = two_blobs(3, 2, 1.0, 1);
  TsneOptions opt;
  opt.perplexity = 6;
  EXPECT_THROW(tsne_project(pairwise_w2_matrix(blobs.reprs), opt), std::invalid_argument);
}

TEST(KMeans, KEqualsNGivesZeroWcss) {
  Rng rng(1);
  std::vector<std::vector<double>> xs(9, std::vector<double>(3));
  for (auto& x : xs)
    for (auto& v : x) v = rng.normal();
  const auto km = kmeans(xs, 9, 4);
  EXPECT_NEAR(km.wcss_history.back(), 0.0, 1e-20);
  EXPECT_EQ(std::set<std::size_t>(km.assignments.begin(), km.assignments.end()).size(), 9u);
}

TEST(KMeans, RecoversSeparatedBlobs) {
  const auto blobs = two_blobs(30, 5, 10.0, 7);
  const auto km = kmeans(means_of(blobs.reprs), 2, 2);
  EXPECT_TRUE(km.converged);
  for (std::size_t i = 0; i < 60; ++i)
    EXPECT_EQ(km.assignments[i] == km.assignments[0], blobs.labels[i] == blobs.labels[0]);
}

TEST(KMeans, WcssIsMonotoneAndResultIsAFixedPoint) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t n = 20 + rng.below(100), dim = 1 + rng.below(6), k = 1 + rng.below(8);
    std::vector<std::vector<double>> xs(n, std::vector<double>(dim));
    for (auto& x : xs)
      for (auto& v : x) v = rng.normal();
    const auto km = kmeans(xs, k, seed);
    for (std::size_t i = 1; i < km.wcss_history.size(); ++i)
      EXPECT_LE(km.wcss_history[i], km.wcss_history[i - 1] * (1 + 1e-12)) << "seed " << seed;
    if (!km.converged) continue;
    EXPECT_NEAR(wcss(xs, km), km.wcss_history.back(), 1e-9 * (1 + km.wcss_history.back()));
    // every point sits with its nearest centroid
    for (std::size_t i = 0; i < n; ++i) {
      auto dist = [&](std::size_t c) {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) s += (xs[i][d] - km.centroids[c][d]) * (xs[i][d] - km.centroids[c][d]);
        return s;
      };
      for (std::size_t c = 0; c < k; ++c) EXPECT_LE(dist(km.assignments[i]), dist(c) + 1e-12);
    }
  }
}

TEST(KMeans, InvalidK) {
  std::vector<std::vector<double>> xs(3, std::vector<double>{1.0});
  EXPECT_THROW(kmeans(xs, 0, 0), std::invalid_argument);
  EXPECT_THROW(kmeans(xs, 4, 0), std::invalid_argument);
}

TEST(BlueNoise, RespectsRadiusAndIsMaximal) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto pts = uniform_points(300, seed);
    const double radius = 0.3 + 0.1 * static_cast<double>(seed % 5);
    const auto chosen = blue_noise_sample(pts, radius, seed);
    EXPECT_TRUE(std::is_sorted(chosen.begin(), chosen.end()));
    EXPECT_GE(min_accepted_distance(pts, chosen), radius);
    EXPECT_EQ(uncovered_points(pts, chosen, radius), 0u);
  }
}

TEST(BlueNoise, IndependentOfInputOrder) {
  const auto pts = uniform_points(200, 3);
  const auto chosen = blue_noise_sample(pts, 0.8, 5);
  std::set<Point2> expected;
  for (auto i : chosen) expected.insert(pts[i]);

  auto shuffled = pts;
  Rng rng(99);
  rng.shuffle(shuffled);
  std::set<Point2> got;
  for (auto i : blue_noise_sample(shuffled, 0.8, 5)) got.insert(shuffled[i]);
  EXPECT_EQ(got, expected);
}

TEST(BlueNoise, CoincidentPointsCollapseToOne) {
  std::vector<Point2> pts(10, Point2{1.0, 1.0});
  EXPECT_EQ(blue_noise_sample(pts, 0.5, 0).size(), 1u);
  EXPECT_THROW(blue_noise_sample(pts, 0.0, 0), std::invalid_argument);
  EXPECT_TRUE(blue_noise_sample(std::vector<Point2>{}, 1.0, 0).empty());
  EXPECT_NEAR(default_blue_noise_radius(std::vector<Point2>{{0, 0}, {3, 4}}), 0.1, 1e-15);
}

TEST(Reconstruct, DecodesTheMean) {
  auto model = build_duhiv(DuhivConfig::tiny());
  Rng rng(1);
  const auto x = random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0);
  Pgpm p{"x", 4, 4, 0.01, std::vector<double>(x.values().begin(), x.values().end())};
  const auto r = extract(*model, p);
  EXPECT_EQ(r.dim(), 4u);
  EXPECT_EQ(r.source_id, "x");
  for (double s : r.sigma) EXPECT_GT(s, 0.0);
  const Pgpm out = reconstruct(*model, r);
  const Tensor direct = model->generate(split_latent_row(*model, r.mu));
  ASSERT_EQ(out.grid.size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(out.grid[i], direct[i]);
  EXPECT_THROW(reconstruct(*model, rep({1}, {1})), std::invalid_argument);
}

TEST(Extract, BatchedMatchesSingle) {
  auto model = build_duhiv(DuhivConfig::tiny());
  Dataset d;
  d.rows = d.cols = 4;
  d.num_labels = 1;
  Rng rng(2);
  for (int i = 0; i < 140; ++i) {
    Pgpm p{"p" + std::to_string(i), 4, 4, 0.01, std::vector<double>(16)};
    for (auto& v : p.grid) v = rng.uniform();
    d.samples.push_back({p, {1}});
  }
  const auto all = extract_all(*model, d);
  ASSERT_EQ(all.size(), 140u);
  for (std::size_t i : {0u, 77u, 139u}) {
    const auto one = extract(*model, d.samples[i].pgpm);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(all[i].mu[k], one.mu[k], 1e-12);
    EXPECT_EQ(all[i].source_id, d.samples[i].pgpm.id);
  }
}

TEST(Project, PipelineShapes) {
  const auto blobs = two_blobs(25, 4, 5.0, 8);
  ProjectionParams params;
  params.k = 3;
  params.seed = 4;
  params.tsne.iterations = 250;
  const auto out = project(blobs.reprs, params);
  ASSERT_EQ(out.points.size(), 50u);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(out.points[i].index, i);
    EXPECT_LT(out.points[i].cluster, 3u);
  }
  EXPECT_GT(out.radius, 0.0);
  EXPECT_FALSE(out.sampled.empty());
  std::vector<Point2> pts;
  for (const auto& p : out.points) pts.push_back({p.x, p.y});
  EXPECT_GE(min_accepted_distance(pts, out.sampled), out.radius);
  const auto again = project(blobs.reprs, params);
  EXPECT_EQ(again.sampled, out.sampled);
  EXPECT_EQ(again.points[7].x, out.points[7].x);
}

TEST(LayerSensitivity, OneValuePerLayer) {
  auto model = build_duhiv(DuhivConfig::tiny());
  Rng rng(3);
  std::vector<Representation> rs{random_representation(rng, 4), random_representation(rng, 4)};
  const auto s = layer_sensitivity(*model, rs, 1.0);
  ASSERT_EQ(s.size(), 2u);
  for (double v : s) EXPECT_GE(v, 0.0);
  const auto zero = layer_sensitivity(*model, rs, 0.0);
  for (double v : zero) EXPECT_EQ(v, 0.0);
}

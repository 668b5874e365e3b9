#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ap_oracle.hpp"
#include "duhiv/annotation.hpp"
#include "latent_checks.hpp"

using namespace duhiv;
using namespace duhiv::testkit;
namespace fs = std::filesystem;

namespace {

Representation rep(std::vector<double> mu, std::string id = {}) {
  std::vector<double> sigma(mu.size(), 1.0);
  return {std::move(mu), std::move(sigma), std::move(id)};
}

InsightRecord record(const std::string& id, std::vector<double> mu) {
  return {id, "name " + id, "desc " + id, rep(std::move(mu)), {}};
}

fs::path fresh_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "duhiv_test_annotation";
  fs::create_directories(dir);
  fs::remove(dir / name);
  return dir / name;
}

// Samples clustered around one of three anchors per label; label j present
// when the sample was drawn near anchor j.
struct Clustered {
  Dataset data;
  std::vector<Representation> reprs;
};

Clustered clustered(std::size_t n, std::uint64_t seed, double noise = 0.3) {
  Clustered c;
  c.data.rows = c.data.cols = 1;
  c.data.num_labels = 3;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = rng.below(3);
    LabelVector bits(3, 0);
    bits[j] = 1;
    std::vector<double> mu(3, 0.0);
    mu[j] = 4.0;
    for (double& m : mu) m += noise * rng.normal();
    const std::string id = "s" + std::to_string(i);
    c.data.samples.push_back({Pgpm{id, 1, 1, 0.01, {0.5}}, bits});
    c.reprs.push_back(rep(mu, id));
  }
  return c;
}

}  // namespace

TEST(Registry, CrudAndErrors) {
  InsightRegistry reg(2);
  reg.add(record("a", {0, 1}));
  reg.add(record("b", {1, 0}));
  EXPECT_EQ(reg.size(), 2u);
  EXPECT_TRUE(reg.contains("a"));
  EXPECT_EQ(reg.get("b").name, "name b");
  EXPECT_THROW(reg.add(record("a", {0, 0})), DuplicateInsightError);
  EXPECT_THROW(reg.add(record("c", {0, 0, 0})), std::invalid_argument);
  EXPECT_THROW(reg.get("zzz"), UnknownInsightError);

  auto changed = record("a", {5, 5});
  changed.description = "edited";
  reg.update(changed);
  EXPECT_EQ(reg.get("a").description, "edited");
  EXPECT_EQ(reg.list().front().id, "a");  // order kept
  EXPECT_THROW(reg.update(record("zzz", {0, 0})), UnknownInsightError);

  reg.remove("a");
  EXPECT_FALSE(reg.contains("a"));
  EXPECT_THROW(reg.remove("a"), UnknownInsightError);
  ASSERT_EQ(reg.prototypes().size(), 1u);
  EXPECT_EQ(reg.prototypes()[0].mu, (std::vector<double>{1, 0}));
}

TEST(Registry, EveryMutationIsPersisted) {
  const auto file = fresh_file("registry.jsonl");
  {
    auto reg = InsightRegistry::open(3, file);
    EXPECT_EQ(reg.size(), 0u);
    reg.add(record("x", {1, 2, 3}));
    reg.add(record("y", {4, 5, 6}));
    EXPECT_EQ(load_insights(file).size(), 2u);
    reg.remove("x");
    EXPECT_EQ(load_insights(file).size(), 1u);
    auto y = record("y", {0, 0, 0});
    y.thumbnail = Pgpm{"", 2, 2, 0.01, {0, 1, 0.2, 1}};
    reg.update(y);
  }
  const auto reopened = InsightRegistry::open(3, file);
  ASSERT_EQ(reopened.size(), 1u);
  const auto& y = reopened.get("y");
  EXPECT_EQ(y.prototype.mu, (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(y.thumbnail.rows, 2u);
  EXPECT_EQ(y.thumbnail.grid[3], 1.0);
  EXPECT_THROW(InsightRegistry::open(4, file), std::invalid_argument);
}

TEST(Registry, CorruptFileIsReported) {
  const auto file = fresh_file("bad.jsonl");
  std::ofstream(file) << "{\"id\": 3}\n";
  EXPECT_THROW(load_insights(file), DecodeError);
}

TEST(Bandwidth, MedianOfSampleToPrototypeDistances) {
  std::vector<Representation> samples{rep({0}), rep({3})};
  std::vector<Representation> protos{rep({1}), rep({10})};
  // distances 1, 10, 2, 7 -> median (2 + 7) / 2
  EXPECT_DOUBLE_EQ(median_bandwidth(samples, protos), 4.5);
  EXPECT_DOUBLE_EQ(median_bandwidth(std::vector{rep({1})}, std::vector{rep({1})}), 1.0);
}

TEST(Unsupervised, ScoresFollowGaussianKernel) {
  std::vector<Representation> samples{rep({0, 0}, "s")};
  std::vector<Representation> protos{rep({0, 0}), rep({3, 4}), rep({1, 0})};
  const auto out = unsupervised_annotate(samples, protos, 5.0, 0.5);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].sample_id, "s");
  EXPECT_DOUBLE_EQ(out[0].scores[0], 1.0);
  EXPECT_DOUBLE_EQ(out[0].scores[1], std::exp(-0.5));
  EXPECT_DOUBLE_EQ(out[0].scores[2], std::exp(-1.0 / 50.0));
  EXPECT_EQ(out[0].labels, (LabelVector{1, 1, 1}));
  EXPECT_EQ(unsupervised_annotate(samples, protos, 5.0, 0.7).front().labels, (LabelVector{1, 0, 1}));
  EXPECT_THROW(unsupervised_annotate(samples, {}, 1.0), std::invalid_argument);
  EXPECT_THROW(unsupervised_annotate(samples, protos, 0.0), std::invalid_argument);
  EXPECT_THROW(unsupervised_annotate(samples, protos, 1.0, 1.0), std::invalid_argument);
}

TEST(Unsupervised, InvariantToJointRescalingWithMedianBandwidth) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<Representation> samples, protos;
    for (int i = 0; i < 15; ++i) samples.push_back(random_representation(rng, 4));
    for (int i = 0; i < 3; ++i) protos.push_back(random_representation(rng, 4));
    const double c = rng.uniform(0.1, 10.0);
    auto scaled = [&](std::vector<Representation> rs) {
      for (auto& r : rs)
        for (auto& m : r.mu) m *= c;
      return rs;
    };
    const auto s2 = scaled(samples), p2 = scaled(protos);
    const auto a = unsupervised_annotate(samples, protos, median_bandwidth(samples, protos));
    const auto b = unsupervised_annotate(s2, p2, median_bandwidth(s2, p2));
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a[i].scores[j], b[i].scores[j], 1e-12);
  }
}

TEST(Knn, VotingExample) {
  const std::vector<std::vector<double>> labeled{{0.0}, {1.0}, {2.0}, {10.0}};
  const std::vector<LabelVector> bits{{1, 0}, {1, 1}, {0, 1}, {0, 1}};
  const std::vector<std::vector<double>> queries{{0.9}, {9.0}};
  const auto p = knn_semi_supervised(labeled, bits, queries, 3);
  EXPECT_DOUBLE_EQ(p.scores[0][0], 2.0 / 3.0);  // neighbours 1, 0, 2
  EXPECT_DOUBLE_EQ(p.scores[0][1], 2.0 / 3.0);
  EXPECT_EQ(p.labels[0], (LabelVector{1, 1}));
  EXPECT_DOUBLE_EQ(p.scores[1][0], 1.0 / 3.0);  // neighbours 10, 2, 1
  EXPECT_DOUBLE_EQ(p.scores[1][1], 1.0);
  EXPECT_EQ(p.labels[1], (LabelVector{0, 1}));
  EXPECT_THROW(knn_semi_supervised(labeled, bits, queries, 5), std::invalid_argument);
  EXPECT_THROW(knn_semi_supervised(labeled, bits, queries, 0), std::invalid_argument);
}

TEST(Knn, DistanceTiesGoToLowerIndex) {
  const std::vector<std::vector<double>> labeled{{-1.0}, {1.0}};
  const std::vector<LabelVector> bits{{1}, {0}};
  const auto p = knn_semi_supervised(labeled, bits, std::vector<std::vector<double>>{{0.0}}, 1);
  EXPECT_EQ(p.scores[0][0], 1.0);
}

TEST(Knn, InvariantToTranslation) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::vector<double>> labeled(30, std::vector<double>(3)), queries(10, std::vector<double>(3));
    std::vector<LabelVector> bits(30);
    for (auto& x : labeled)
      for (auto& v : x) v = rng.normal();
    for (auto& x : queries)
      for (auto& v : x) v = rng.normal();
    for (auto& b : bits) b = {static_cast<std::uint8_t>(rng.below(2)), static_cast<std::uint8_t>(rng.below(2))};
    const std::vector<double> shift{rng.normal(0, 5), rng.normal(0, 5), rng.normal(0, 5)};
    auto moved = [&](auto xs) {
      for (auto& x : xs)
        for (std::size_t d = 0; d < 3; ++d) x[d] += shift[d];
      return xs;
    };
    const auto a = knn_semi_supervised(labeled, bits, queries, 5);
    const auto b = knn_semi_supervised(moved(labeled), bits, moved(queries), 5);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.scores, b.scores);
  }
}

TEST(AveragePrecision, InterleavedExampleIsFiveSixths) {
  const std::vector<double> scores{0.9, 0.8, 0.7};
  const std::vector<std::uint8_t> truth{1, 0, 1};
  EXPECT_EQ(average_precision(scores, truth), 5.0 / 6.0);
}

TEST(AveragePrecision, ExamplesAndErrors) {
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.1, 0.9}, std::vector<std::uint8_t>{0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.1}, std::vector<std::uint8_t>{0, 1}), 0.5);
  // ties keep index order
  EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.5, 0.5}, std::vector<std::uint8_t>{0, 1}), 0.5);
  EXPECT_THROW(average_precision(std::vector<double>{0.5}, std::vector<std::uint8_t>{0}), std::invalid_argument);
  EXPECT_THROW(average_precision(std::vector<double>{0.5}, std::vector<std::uint8_t>{1, 0}), std::invalid_argument);
}

TEST(AveragePrecision, MatchesBruteForceOnAllSmallConfigurations) {
  // weak orderings of n items: the ordered Bell numbers
  const std::size_t fubini[] = {1, 1, 3, 13, 75, 541, 4683};
  for (std::size_t n = 1; n <= 6; ++n) {
    std::size_t mismatches = 0;
    const std::size_t visited = for_each_ap_configuration(n, [&](const auto& scores, const auto& truth) {
      if (std::abs(average_precision(scores, truth) - brute_force_ap(scores, truth)) > 1e-12) ++mismatches;
    });
    EXPECT_EQ(mismatches, 0u) << "n = " << n;
    EXPECT_EQ(visited, fubini[n] * ((std::size_t{1} << n) - 1));
  }
}

TEST(AveragePrecision, InvariantUnderStrictlyIncreasingTransforms) {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> s(n), f(n);
    std::vector<std::uint8_t> truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(rng.uniform(-3, 3) * 4) / 4;  // coarse grid forces ties
      truth[i] = rng.below(2);
      f[i] = std::exp(2 * s[i]) + 7;
    }
    truth[rng.below(n)] = 1;
    EXPECT_EQ(average_precision(s, truth), average_precision(f, truth));
  }
}

TEST(AveragePrecision, PerfectRankingScoresOne) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> s(n);
    std::vector<std::uint8_t> truth(n);
    for (std::size_t i = 0; i < n; ++i) truth[i] = rng.below(2), s[i] = truth[i] + rng.uniform(0, 0.5);
    truth[0] = 1, s[0] = 1.0;
    EXPECT_DOUBLE_EQ(average_precision(s, truth), 1.0);
  }
}

TEST(Map, SkipsClassesWithoutPositives) {
  std::vector<std::optional<double>> per{0.5, std::nullopt, 1.0};
  EXPECT_DOUBLE_EQ(mean_average_precision(per), 0.75);
  std::vector<std::optional<double>> none{std::nullopt};
  EXPECT_THROW(mean_average_precision(none), std::invalid_argument);

  const std::vector<std::vector<double>> scores{{0.9, 0.1}, {0.2, 0.8}, {0.7, 0.3}};
  const std::vector<LabelVector> truth{{1, 0}, {0, 0}, {1, 0}};
  const std::vector<LabelVector> pred{{1, 0}, {0, 1}, {0, 0}};
  const auto m = ranking_metrics(scores, pred, truth);
  EXPECT_DOUBLE_EQ(*m.per_class_ap[0], 1.0);
  EXPECT_FALSE(m.per_class_ap[1].has_value());
  EXPECT_DOUBLE_EQ(m.map, 1.0);
  // label 0: 2/3 correct, label 1: 2/3 correct
  EXPECT_DOUBLE_EQ(m.mean_accuracy, 2.0 / 3.0);
}

TEST(Map, RandomBaselineIsSeededAndNearPrevalence) {
  std::vector<LabelVector> truth;
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) truth.push_back({static_cast<std::uint8_t>(rng.uniform() < 0.3), 1});
  const double a = random_baseline_map(truth, 5), b = random_baseline_map(truth, 5);
  EXPECT_EQ(a, b);
  // classes at prevalence ~0.3 and 1.0
  EXPECT_NEAR(a, (0.3 + 1.0) / 2, 0.03);
}

TEST(MeanStd, SampleStandardDeviation) {
  const std::vector<double> v{1, 2, 3, 4};
  const auto m = mean_std(v);
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.std, std::sqrt(5.0 / 3.0));
  EXPECT_EQ(mean_std(std::vector<double>{7}).std, 0.0);
}

TEST(Prototypes, SingleLabelAverages) {
  std::vector<Representation> rs{rep({0, 0}), rep({2, 0}), rep({4, 4}), rep({0, 6})};
  std::vector<LabelVector> labels{{1, 0}, {1, 0}, {1, 1}, {0, 1}};
  std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto p = single_label_prototypes(rs, labels, idx, 2);
  EXPECT_EQ(p[0].mu, (std::vector<double>{1, 0}));
  EXPECT_EQ(p[1].mu, (std::vector<double>{0, 6}));
  // without single-label carriers, fall back to every carrier
  std::vector<std::size_t> only_mixed{2};
  EXPECT_EQ(single_label_prototypes(rs, labels, only_mixed, 2)[0].mu, (std::vector<double>{4, 4}));
}

TEST(CrossValidation, SeparableDataScoresHighAndRepeats) {
  const auto c = clustered(300, 2);
  CrossValidationOptions opt;
  const auto a = cross_validate(c.data, c.reprs, opt);
  EXPECT_EQ(a.folds.size(), 5u);
  EXPECT_GT(a.map.mean, 0.95);
  const auto b = cross_validate(c.data, c.reprs, opt);
  EXPECT_EQ(a.map.mean, b.map.mean);
  EXPECT_EQ(a.map.std, b.map.std);

  opt.method = AnnotationMethod::Knn;
  opt.label_fraction = 0.1;
  const auto k = cross_validate(c.data, c.reprs, opt);
  EXPECT_GT(k.map.mean, 0.9);
  opt.label_fraction = 0.001;
  EXPECT_THROW(cross_validate(c.data, c.reprs, opt), std::invalid_argument);
}

TEST(CrossValidation, WrongPrototypeCountIsRejected) {
  const auto c = clustered(30, 3);
  CrossValidationOptions opt;
  opt.prototypes = {rep({1, 1, 1})};
  EXPECT_THROW(cross_validate(c.data, c.reprs, opt), std::invalid_argument);
}

TEST(RunAnnotation, UnsupervisedAnnotatesEverySample) {
  const auto c = clustered(60, 4);
  AnnotateParams params;
  const auto run = run_annotation(c.data, c.reprs, params);
  ASSERT_EQ(run.results.size(), 60u);
  EXPECT_EQ(run.results[5].sample_id, "s5");
  ASSERT_TRUE(run.metrics.has_value());
  EXPECT_GT(run.random_baseline_map, 0.0);

  // fewer prototypes than labels: annotate, but no metrics
  std::vector<Representation> two{rep({4, 0, 0}), rep({0, 4, 0})};
  const auto partial = run_annotation(c.data, c.reprs, params, two);
  EXPECT_EQ(partial.results[0].scores.size(), 2u);
  EXPECT_FALSE(partial.metrics.has_value());
}

TEST(RunAnnotation, KnnKeepsLabelledTruth) {
  const auto c = clustered(50, 5);
  AnnotateParams params;
  params.method = AnnotationMethod::Knn;
  params.label_fraction = 0.5;
  params.knn_k = 3;
  const auto run = run_annotation(c.data, c.reprs, params);
  ASSERT_EQ(run.results.size(), 50u);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < 50; ++i) exact += run.results[i].labels == c.data.samples[i].labels;
  EXPECT_GE(exact, 25u);
  EXPECT_TRUE(run.metrics.has_value());
  params.label_fraction = 0.0;
  EXPECT_THROW(run_annotation(c.data, c.reprs, params), std::invalid_argument);
}

TEST(Output, JsonLineAndTable) {
  AnnotationResult r{"pgpm-000001", {0.25, 1.0}, {0, 1}};
  EXPECT_EQ(to_json_line(r).dump(), R"({"id":"pgpm-000001","labels":"01","scores":[0.25,1.0]})");
  CrossValidationResult cv;
  cv.per_class_ap = {{0.5, 0.1}, {0.25, 0.0}};
  cv.map = {0.375, 0.05};
  cv.mean_accuracy = {0.9, 0.01};
  const auto table = format_metrics_table({"a", "b"}, {{"unsupervised", cv}});
  EXPECT_NE(table.find("| method | a | b | mAP | mA |"), std::string::npos);
  EXPECT_NE(table.find("| unsupervised | 50.0±10.0 | 25.0±0.0 | 37.5±5.0 | 90.0±1.0 |"), std::string::npos);
  EXPECT_EQ(annotation_method_from_string("knn"), AnnotationMethod::Knn);
  EXPECT_THROW(annotation_method_from_string("svm"), std::invalid_argument);
}

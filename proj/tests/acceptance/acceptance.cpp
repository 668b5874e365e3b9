// End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit on
// any failure. Criterion 5 trains both desk models from scratch (~20 min on
// one core); 7 and 8 reuse the trained DUHiV.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ap_oracle.hpp"
#include "duhiv/annotation.hpp"
#include "duhiv/data.hpp"
#include "duhiv/latent.hpp"
#include "duhiv/model.hpp"
#include "duhiv/train.hpp"
#include "latent_checks.hpp"
#include "model_check.hpp"
#include "op_cases.hpp"
#include "smoothing.hpp"

namespace fs = std::filesystem;
using namespace duhiv;
using nlohmann::json;

namespace {

constexpr std::size_t kSamples = 2048;
constexpr std::uint64_t kDataSeed = 7;
constexpr std::size_t kFinalEvalSamples = 16;
constexpr std::uint64_t kFinalEvalSeed = 2024;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Shared between criteria 5, 7, 8 and 9.
struct Context {
  fs::path workdir;
  fs::path desk_config;
  std::optional<Dataset> data;
  std::unique_ptr<VaeModel> duhiv;
  TrainConfig train_config;

  const Dataset& dataset() {
    if (!data) {
      SyntheticSpec spec;
      spec.seed = kDataSeed;
      data = generate_synthetic(spec, kSamples);
    }
    return *data;
  }

  json desk() const {
    std::ifstream in(desk_config);
    if (!in) throw std::runtime_error("cannot read " + desk_config.string());
    return json::parse(in);
  }
};

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_op = 0.0, worst_model = 0.0;
  std::string worst_name;
  for (const auto& c : testkit::differentiable_op_cases()) {
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
      Rng rng(mix_seed(trial, 17));
      const double e = testkit::check_gradients(c.loss, c.inputs(rng)).max_rel_error;
      if (e > worst_op) worst_op = e, worst_name = c.name;
    }
  }
  for (std::uint64_t seed = 1; seed <= 3; ++seed)
    worst_model = std::max(worst_model, testkit::tiny_model_gradcheck(seed).max_rel_error);
  const double elapsed = seconds_since(t0);
  return {worst_op <= 1e-4 && worst_model <= 1e-3 && elapsed < 60.0,
          fmt("ops max rel err %.2e (%s), tiny DUHiV %.2e, %.1f s", worst_op, worst_name.c_str(), worst_model,
              elapsed)};
}

Outcome kl_oracle() {
  Rng rng(2024);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    std::vector<double> mu(8), lv(8);
    for (auto& m : mu) m = rng.uniform(-1.5, 1.5);
    for (auto& v : lv) v = rng.uniform(-1.0, 1.0);
    const GaussianLatent q{{Tensor({1, 8}, mu)}, {Tensor({1, 8}, lv)}};
    const double exact = kl_term(q).item();
    const double mc = testkit::kl_monte_carlo(mu, lv, 100000, rng);
    worst = std::max(worst, std::abs(mc - exact) / exact);
  }
  return {worst <= 0.01, fmt("max rel deviation from 1e5-draw Monte-Carlo %.3f%%", 100 * worst)};
}

Outcome w2() {
  Rng rng(10);
  double worst = 0.0;
  for (int t = 0; t < 10; ++t) {
    const std::size_t dim = 1 + rng.below(8);
    const auto a = testkit::random_representation(rng, dim), b = testkit::random_representation(rng, dim);
    const double full = testkit::w2_squared_full(a, b);
    worst = std::max(worst, std::abs(w2_squared(a, b) - full) / full);
  }
  std::size_t violations = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t dim = 1 + rng.below(8);
    const auto a = testkit::random_representation(rng, dim), b = testkit::random_representation(rng, dim),
               c = testkit::random_representation(rng, dim);
    const double ab = std::sqrt(w2_squared(a, b)), ba = std::sqrt(w2_squared(b, a)),
                 bc = std::sqrt(w2_squared(b, c)), ac = std::sqrt(w2_squared(a, c));
    const bool ok = std::sqrt(w2_squared(a, a)) <= 1e-9 && ab >= 0.0 && std::abs(ab - ba) <= 1e-9 &&
                    ac <= ab + bc + 1e-9 && (ab > 1e-9 || a.mu == b.mu);
    violations += !ok;
  }
  return {worst <= 1e-10 && violations == 0,
          fmt("diag vs full-matrix max rel err %.1e, axiom violations %zu/1000", worst, violations)};
}

Outcome interpolation() {
  Rng rng(6);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t dim = 1 + rng.below(16);
    const auto a = testkit::random_representation(rng, dim), b = testkit::random_representation(rng, dim);
    const auto at1 = interpolate(a, b, 1.0), at0 = interpolate(a, b, 0.0);
    for (std::size_t d = 0; d < dim; ++d) {
      worst = std::max({worst, std::abs(at1.mu[d] - a.mu[d]), std::abs(at1.sigma[d] - a.sigma[d]),
                        std::abs(at0.mu[d] - b.mu[d]), std::abs(at0.sigma[d] - b.sigma[d])});
    }
  }
  return {worst <= 1e-12, fmt("max endpoint deviation %.1e over 200 pairs", worst)};
}

double pixel_variance(const Dataset& data) {
  double n = 0.0, mean = 0.0, m2 = 0.0;
  for (const auto& s : data.samples)
    for (double v : s.pgpm.grid) {
      n += 1.0;
      const double d = v - mean;
      mean += d / n;
      m2 += d * (v - mean);
    }
  return m2 / n;
}

std::unique_ptr<VaeModel> train_logged(Context& ctx, const json& description, const std::string& tag,
                                       TrainHistory& history, double& seconds) {
  auto model = build_model(description);
  const fs::path log_path = ctx.workdir / (tag + ".history.csv");
  std::cout << "  training " << tag << " (" << model->parameter_count() << " parameters, "
            << ctx.train_config.epochs << " epochs)" << std::endl;
  TrainCallbacks cb;
  cb.on_epoch = [&](const EpochRecord& r) {
    if (r.epoch % 10 == 9)
      std::cout << fmt("    %s epoch %3zu  eval ELBO %.3f  mse %.5f", tag.c_str(), r.epoch, r.eval_elbo, r.mse)
                << std::endl;
  };
  const auto t0 = std::chrono::steady_clock::now();
  history = train(*model, ctx.dataset(), ctx.train_config, cb);
  seconds = seconds_since(t0);
  history.write_csv(log_path);
  save_checkpoint(*model, ctx.train_config, ctx.workdir / (tag + ".ckpt"));
  return model;
}

Outcome convergence(Context& ctx) {
  const json desk = ctx.desk();
  ctx.train_config = desk.at("train").get<TrainConfig>();
  const json duhiv_desc = desk.at("model");
  const json mlp_desc = describe_model(*build_mlp_hvae(duhiv_desc.at("config").get<DuhivConfig>()));
  const Dataset& data = ctx.dataset();

  TrainHistory dh, mh;
  double d_secs = 0.0, m_secs = 0.0;
  ctx.duhiv = train_logged(ctx, duhiv_desc, "duhiv", dh, d_secs);
  const auto mlp = train_logged(ctx, mlp_desc, "mlp-hvae", mh, m_secs);

  const auto split = default_split(data, ctx.train_config.seed);
  const auto de = evaluate(*ctx.duhiv, data, split.test, kFinalEvalSamples, kFinalEvalSeed);
  const auto me = evaluate(*mlp, data, split.test, kFinalEvalSamples, kFinalEvalSeed);
  const double var = pixel_variance(data);

  const auto windows = testkit::window_means(dh, testkit::kSmoothingWindow);
  std::size_t drops = 0;
  double worst_drop = 0.0;
  for (std::size_t i = 1; i < windows.size(); ++i) {
    if (windows[i] < windows[i - 1]) ++drops, worst_drop = std::max(worst_drop, windows[i - 1] - windows[i]);
  }
  std::cout << "  " << testkit::kSmoothingWindow << "-epoch window means:";
  for (double w : windows) std::cout << fmt(" %.2f", w);
  std::cout << "\n";

  const bool fast = d_secs <= 20 * 60;
  const bool smooth = drops == 0;
  const bool accurate = de.mse <= 0.2 * var;
  const bool ordered = de.elbo > me.elbo;
  std::cout << fmt("  time %.0f s [%s]  smoothed ELBO drops %zu (worst %.3f) [%s]  mse/var %.3f [%s]  "
                   "held-out ELBO DUHiV %.3f vs MLP %.3f [%s]",
                   d_secs, fast ? "ok" : "fail", drops, worst_drop, smooth ? "ok" : "fail", de.mse / var,
                   accurate ? "ok" : "fail", de.elbo, me.elbo, ordered ? "ok" : "fail")
            << "\n";
  return {fast && smooth && accurate && ordered,
          fmt("DUHiV %.0f s, window drops %zu, mse %.4f (%.0f%% of var), ELBO %.2f > MLP %.2f", d_secs, drops,
              de.mse, 100 * de.mse / var, de.elbo, me.elbo)};
}

Outcome ap_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t mismatches = 0, visited = 0;
  double worst = 0.0;
  for (std::size_t n = 1; n <= 8; ++n) {
    visited += testkit::for_each_ap_configuration(n, [&](const auto& scores, const auto& truth) {
      const double d = std::abs(average_precision(scores, truth) - testkit::brute_force_ap(scores, truth));
      worst = std::max(worst, d);
      mismatches += d > 1e-12;
    });
  }
  const std::vector<double> s{0.9, 0.8, 0.7};
  const std::vector<std::uint8_t> t{1, 0, 1};
  const bool exact = average_precision(s, t) == 5.0 / 6.0;
  return {mismatches == 0 && exact,
          fmt("%zu configurations, max |diff| %.1e, AP(1,0,1) %s 5/6, %.0f s", visited, worst,
              exact ? "==" : "!=", seconds_since(t0))};
}

void ensure_model(Context& ctx) {
  if (ctx.duhiv) return;
  convergence(ctx);
}

Outcome unsupervised(Context& ctx) {
  ensure_model(ctx);
  const Dataset& data = ctx.dataset();
  const auto reprs = extract_all(*ctx.duhiv, data);
  CrossValidationOptions opt;
  const auto cv = cross_validate(data, reprs, opt);
  const double baseline = random_baseline_map(data.labels(), 0);
  return {cv.map.mean >= 0.60 && cv.map.mean >= baseline + 0.25,
          fmt("5-fold mAP %.3f ± %.3f, random baseline %.3f", cv.map.mean, cv.map.std, baseline)};
}

Outcome semi_supervised(Context& ctx) {
  ensure_model(ctx);
  const Dataset& data = ctx.dataset();
  const auto reprs = extract_all(*ctx.duhiv, data);
  const std::vector<double> fractions{0.01, 0.1, 0.5, 1.0};
  std::vector<MeanStd> maps;
  for (double f : fractions) {
    CrossValidationOptions opt;
    opt.method = AnnotationMethod::Knn;
    opt.label_fraction = f;
    maps.push_back(cross_validate(data, reprs, opt).map);
  }
  bool trend = true;
  for (std::size_t i = 1; i < maps.size(); ++i)
    trend = trend && maps[i].mean >= maps[i - 1].mean - std::max(maps[i].std, maps[i - 1].std);
  const bool ratio = maps[1].mean >= 0.8 * maps[3].mean;
  return {trend && ratio, fmt("mAP at 1%%/10%%/50%%/100%%: %.3f/%.3f/%.3f/%.3f (std %.3f/%.3f/%.3f/%.3f)",
                              maps[0].mean, maps[1].mean, maps[2].mean, maps[3].mean, maps[0].std, maps[1].std,
                              maps[2].std, maps[3].std)};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::set<fs::path> names;
  for (const auto& e : fs::recursive_directory_iterator(a)) names.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b)) names.insert(fs::relative(e.path(), b));
  for (const auto& n : names) {
    if (fs::is_directory(a / n) || fs::is_directory(b / n)) continue;
    if (!fs::exists(a / n) || !fs::exists(b / n) || read_bytes(a / n) != read_bytes(b / n)) return false;
  }
  return true;
}

Outcome determinism(Context& ctx) {
  SyntheticSpec spec;
  spec.seed = kDataSeed;
  const fs::path da = ctx.workdir / "archive_a", db = ctx.workdir / "archive_b";
  fs::remove_all(da);
  fs::remove_all(db);
  save_dataset(da, generate_synthetic(spec, kSamples));
  save_dataset(db, generate_synthetic(spec, kSamples));
  const bool archives = same_tree(da, db);
  const Dataset reloaded = load_dataset(da);

  // short independent training runs on a slice of the archive
  Dataset small = reloaded;
  small.samples.resize(96);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.warmup_epochs = 2;
  cfg.max_grad_norm = 10.0;
  cfg.seed = 3;
  auto run = [&] {
    auto m = build_duhiv(DuhivConfig{});
    return train(*m, small, cfg).to_csv();
  };
  const bool histories = run() == run();

  ensure_model(ctx);
  std::vector<Representation> reprs = extract_all(*ctx.duhiv, reloaded);
  reprs.resize(300);
  ProjectionParams pp;
  pp.seed = 4;
  const auto p1 = project(reprs, pp), p2 = project(reprs, pp);
  bool projections = p1.sampled == p2.sampled && p1.points.size() == p2.points.size();
  for (std::size_t i = 0; projections && i < p1.points.size(); ++i) {
    projections = p1.points[i].x == p2.points[i].x && p1.points[i].y == p2.points[i].y &&
                  p1.points[i].cluster == p2.points[i].cluster;
  }

  const fs::path ck = ctx.workdir / "roundtrip.ckpt";
  save_checkpoint(*ctx.duhiv, ctx.train_config, ck);
  const auto restored = load_checkpoint(ck);
  const auto split = default_split(reloaded, ctx.train_config.seed);
  const double before = evaluate(*ctx.duhiv, reloaded, split.test, 4, 11).elbo;
  const double after = evaluate(*restored.model, reloaded, split.test, 4, 11).elbo;
  const double diff = std::abs(before - after);

  return {archives && histories && projections && diff <= 1e-9,
          fmt("archives %s, histories %s, projections %s, checkpoint eval |diff| %.1e",
              archives ? "identical" : "DIFFER", histories ? "identical" : "DIFFER",
              projections ? "identical" : "DIFFER", diff)};
}

Outcome projection_pipeline() {
  // blue noise on a t-SNE layout
  const auto blobs = testkit::two_blobs(40, 8, 6.0, 5);
  TsneOptions to;
  to.perplexity = 15;
  to.seed = 1;
  const auto layout = tsne_project(pairwise_w2_matrix(blobs.reprs), to);
  const double acc = testkit::nearest_centroid_accuracy(layout.points, blobs.labels, 2);

  std::size_t radius_violations = 0, uncovered = 0;
  for (double scale : {0.01, 0.05, 0.2}) {
    const double radius = scale * std::sqrt(2.0) * 100.0;
    std::vector<Point2> pts;
    Rng rng(static_cast<std::uint64_t>(scale * 1000));
    for (int i = 0; i < 500; ++i) pts.push_back({rng.uniform(0, 100), rng.uniform(0, 100)});
    const auto accepted = blue_noise_sample(pts, radius, 9);
    radius_violations += testkit::min_accepted_distance(pts, accepted) < radius;
    uncovered += testkit::uncovered_points(pts, accepted, radius);
  }
  const auto accepted = blue_noise_sample(layout.points, default_blue_noise_radius(layout.points), 2);
  radius_violations += testkit::min_accepted_distance(layout.points, accepted) <
                       default_blue_noise_radius(layout.points);

  std::size_t wcss_increases = 0;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    const std::size_t n = 20 + rng.below(200), dim = 1 + rng.below(16), k = 1 + rng.below(10);
    std::vector<std::vector<double>> xs(n, std::vector<double>(dim));
    for (auto& x : xs)
      for (auto& v : x) v = rng.normal();
    const auto km = kmeans(xs, k, seed);
    for (std::size_t i = 1; i < km.wcss_history.size(); ++i)
      wcss_increases += km.wcss_history[i] > km.wcss_history[i - 1] * (1 + 1e-12);
  }
  return {radius_violations == 0 && uncovered == 0 && wcss_increases == 0 && acc >= 0.95,
          fmt("blue-noise radius violations %zu, uncovered %zu; WCSS increases %zu; t-SNE blob accuracy %.3f",
              radius_violations, uncovered, wcss_increases, acc)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DUHiV acceptance suite"};
  Context ctx;
  std::string workdir = "acceptance_work";
  std::string config = DUHIV_DESK_CONFIG;
  std::string checkpoint;
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory for archives, histories and checkpoints");
  app.add_option("--config", config, "Desk training config")->check(CLI::ExistingFile);
  app.add_option("--checkpoint", checkpoint,
                 "Reuse a trained DUHiV for criteria 7-9 instead of training (criterion 5 still trains)")
      ->check(CLI::ExistingFile);
  app.add_option("--only", only, "Run just these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  ctx.workdir = workdir;
  ctx.desk_config = config;
  fs::create_directories(ctx.workdir);
  ctx.train_config = ctx.desk().at("train").get<TrainConfig>();
  if (!checkpoint.empty()) ctx.duhiv = load_checkpoint(checkpoint).model;

  struct Entry {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Entry> criteria{
      {1, "gradient correctness", gradients},
      {2, "KL oracle", kl_oracle},
      {3, "W2 correctness", w2},
      {4, "interpolation endpoints", interpolation},
      {5, "training convergence", [&] { return convergence(ctx); }},
      {6, "AP oracle", ap_oracle},
      {7, "unsupervised annotation", [&] { return unsupervised(ctx); }},
      {8, "semi-supervised trend", [&] { return semi_supervised(ctx); }},
      {9, "determinism and persistence", [&] { return determinism(ctx); }},
      {10, "projection pipeline", projection_pipeline},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

#include "duhiv/data.hpp"

#include <algorithm>
#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "duhiv/random.hpp"

namespace duhiv {

namespace fs = std::filesystem;

std::string label_string(const LabelVector& labels) {
  std::string bits(labels.size(), '0');
  for (std::size_t i = 0; i < labels.size(); ++i) bits[i] = labels[i] ? '1' : '0';
  return bits;
}

LabelVector parse_label_string(const std::string& bits) {
  LabelVector labels(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != '0' && bits[i] != '1') throw DecodeError("label bits must be '0' or '1', got '" + bits + "'");
    labels[i] = bits[i] == '1';
  }
  return labels;
}

std::vector<LabelVector> Dataset::labels() const {
  std::vector<LabelVector> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.labels);
  return out;
}

std::size_t Dataset::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].pgpm.id == id) return i;
  }
  throw std::out_of_range("unknown sample id '" + id + "'");
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

constexpr std::pair<InsightKind, const char*> kKindNames[] = {
    {InsightKind::StepSag, "step_sag"},       {InsightKind::StepSurge, "step_surge"},
    {InsightKind::Oscillation, "oscillation"}, {InsightKind::Blackout, "blackout"},
    {InsightKind::RampDrift, "ramp_drift"},    {InsightKind::CorrelatedFlicker, "correlated_flicker"},
};

void check_band(const Band& band, std::size_t rows, const char* what) {
  if (band.begin >= band.end) throw std::invalid_argument(std::string(what) + ": empty bus band");
  if (band.end > rows) throw std::invalid_argument(std::string(what) + ": bus band exceeds map height");
}

}  // namespace

std::string to_string(InsightKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

InsightKind insight_kind_from_string(const std::string& name) {
  for (const auto& [k, n] : kKindNames) {
    if (name == n) return k;
  }
  throw std::invalid_argument("unknown insight kind '" + name + "'");
}

std::vector<double> insight_pattern(InsightKind kind, const PrimitiveParams& p, std::size_t rows, std::size_t cols) {
  check_band(p.buses, rows, "insight_pattern");
  std::vector<double> pattern(rows * cols, 0.0);
  if (p.onset >= cols) return pattern;
  const std::size_t stop = std::min(cols, p.onset + p.duration);
  auto fill_band = [&](const Band& band, auto value_at) {
    for (std::size_t m = band.begin; m < band.end; ++m)
      for (std::size_t t = p.onset; t < stop; ++t) pattern[m * cols + t] = value_at(t);
  };

  switch (kind) {
    case InsightKind::StepSag:
      fill_band(p.buses, [&](std::size_t) { return -p.magnitude; });
      break;
    case InsightKind::StepSurge:
      fill_band(p.buses, [&](std::size_t) { return p.magnitude; });
      break;
    case InsightKind::Oscillation:
      fill_band(p.buses, [&](std::size_t t) {
        return p.magnitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t - p.onset) / p.period);
      });
      break;
    case InsightKind::Blackout:
      fill_band(p.buses, [&](std::size_t) { return -p.magnitude; });
      break;
    case InsightKind::RampDrift: {
      const double span = static_cast<double>(std::max<std::size_t>(stop - p.onset, 1));
      fill_band(p.buses, [&](std::size_t t) { return p.magnitude * static_cast<double>(t - p.onset + 1) / span; });
      break;
    }
    case InsightKind::CorrelatedFlicker: {
      check_band(p.partner, rows, "insight_pattern");
      Rng rng(p.burst_seed);
      std::vector<double> burst(cols, 0.0);
      for (std::size_t t = p.onset; t < stop; ++t) burst[t] = p.magnitude * rng.normal();
      fill_band(p.buses, [&](std::size_t t) { return burst[t]; });
      fill_band(p.partner, [&](std::size_t t) { return burst[t]; });
      break;
    }
  }
  return pattern;
}

// ---------------------------------------------------------------------------
// Synthetic generation

std::vector<InsightGenerator> SyntheticSpec::default_insights() {
  // Ranges target a 32x32 map; each insight has a home region so that the
  // classes overlap without being interchangeable.
  std::vector<InsightGenerator> g(6);
  g[0] = {InsightKind::StepSag, "step_sag", 0.50, {0, 5}, {5, 8}, {6, 14}, {32, 32}, {0.25, 0.40}, {4, 8}, {0, 0}};
  g[1] = {InsightKind::StepSurge, "step_surge", 0.45, {8, 14}, {5, 8}, {2, 6}, {32, 32}, {0.20, 0.30}, {4, 8}, {0, 0}};
  g[2] = {InsightKind::Oscillation, "oscillation", 0.40, {4, 20}, {4, 6}, {4, 12}, {12, 20}, {0.15, 0.25}, {4, 8}, {0, 0}};
  g[3] = {InsightKind::Blackout, "blackout", 0.40, {18, 24}, {4, 7}, {10, 20}, {6, 12}, {1.0, 1.0}, {4, 8}, {0, 0}};
  g[4] = {InsightKind::RampDrift, "ramp_drift", 0.35, {22, 26}, {5, 6}, {0, 8}, {32, 32}, {0.20, 0.30}, {4, 8}, {0, 0}};
  g[5] = {InsightKind::CorrelatedFlicker, "correlated_flicker", 0.30, {2, 10}, {3, 3}, {8, 20}, {6, 10}, {0.15, 0.25},
          {4, 8}, {18, 26}};
  return g;
}

void SyntheticSpec::validate() const {
  if (rows == 0 || cols == 0) throw std::invalid_argument("synthetic spec: empty map");
  if (insights.size() < 2) throw std::invalid_argument("synthetic spec: at least two insights are required");
  bool any = false;
  for (const auto& g : insights) {
    if (g.probability < 0.0 || g.probability > 1.0) {
      throw std::invalid_argument("synthetic spec: inclusion probability of '" + g.name + "' outside [0,1]");
    }
    if (g.band_width.lo < 1) throw std::invalid_argument("synthetic spec: band width of '" + g.name + "' must be >= 1");
    if (g.band_start.hi + g.band_width.hi > static_cast<double>(rows) ||
        g.partner_start.hi + g.band_width.hi > static_cast<double>(rows)) {
      throw std::invalid_argument("synthetic spec: bands of '" + g.name + "' exceed the map height");
    }
    any = any || g.probability > 0.0;
  }
  if (!any) throw std::invalid_argument("synthetic spec: every inclusion probability is zero");
}

namespace {

void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
void from_json(const nlohmann::json& j, Range& r) {
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
}

nlohmann::json generator_json(const InsightGenerator& g) {
  nlohmann::json j;
  j["kind"] = to_string(g.kind);
  j["name"] = g.name;
  j["probability"] = g.probability;
  to_json(j["band_start"], g.band_start);
  to_json(j["band_width"], g.band_width);
  to_json(j["onset"], g.onset);
  to_json(j["duration"], g.duration);
  to_json(j["magnitude"], g.magnitude);
  to_json(j["period"], g.period);
  to_json(j["partner_start"], g.partner_start);
  return j;
}

InsightGenerator generator_from_json(const nlohmann::json& j) {
  InsightGenerator g;
  g.kind = insight_kind_from_string(j.at("kind").get<std::string>());
  g.name = j.value("name", to_string(g.kind));
  g.probability = j.value("probability", g.probability);
  auto range = [&](const char* key, Range& r) {
    if (j.contains(key)) from_json(j.at(key), r);
  };
  range("band_start", g.band_start);
  range("band_width", g.band_width);
  range("onset", g.onset);
  range("duration", g.duration);
  range("magnitude", g.magnitude);
  range("period", g.period);
  range("partner_start", g.partner_start);
  return g;
}

std::size_t draw_int(Rng& rng, const Range& r) {
  const auto lo = static_cast<std::int64_t>(std::llround(r.lo));
  const auto hi = static_cast<std::int64_t>(std::llround(r.hi));
  return static_cast<std::size_t>(hi <= lo ? lo : rng.integer(lo, hi));
}

double draw_real(Rng& rng, const Range& r) { return r.hi <= r.lo ? r.lo : rng.uniform(r.lo, r.hi); }

}  // namespace

void to_json(nlohmann::json& j, const SyntheticSpec& spec) {
  j = {{"rows", spec.rows},
       {"cols", spec.cols},
       {"dt", spec.dt},
       {"background_level", spec.background_level},
       {"background_bus_variation", spec.background_bus_variation},
       {"background_time_variation", spec.background_time_variation},
       {"noise", spec.noise},
       {"seed", spec.seed}};
  j["insights"] = nlohmann::json::array();
  for (const auto& g : spec.insights) j["insights"].push_back(generator_json(g));
}

void from_json(const nlohmann::json& j, SyntheticSpec& spec) {
  spec.rows = j.value("rows", spec.rows);
  spec.cols = j.value("cols", spec.cols);
  spec.dt = j.value("dt", spec.dt);
  spec.background_level = j.value("background_level", spec.background_level);
  spec.background_bus_variation = j.value("background_bus_variation", spec.background_bus_variation);
  spec.background_time_variation = j.value("background_time_variation", spec.background_time_variation);
  spec.noise = j.value("noise", spec.noise);
  spec.seed = j.value("seed", spec.seed);
  if (j.contains("insights")) {
    spec.insights.clear();
    for (const auto& g : j.at("insights")) spec.insights.push_back(generator_from_json(g));
  }
}

double expected_label_count(const SyntheticSpec& spec) {
  double expected = 0.0;
  double none = 1.0;
  for (const auto& g : spec.insights) {
    expected += g.probability;
    none *= 1.0 - g.probability;
  }
  return expected / (1.0 - none);
}

Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t n) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
  const std::size_t rows = spec.rows, cols = spec.cols, k = spec.insights.size();
  Dataset out{rows, cols, k, {}};
  out.samples.reserve(n);

  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(mix_seed(spec.seed, i));
    LabelVector labels(k, 0);
    do {
      for (std::size_t j = 0; j < k; ++j) labels[j] = rng.uniform() < spec.insights[j].probability;
    } while (std::none_of(labels.begin(), labels.end(), [](std::uint8_t b) { return b; }));

    std::vector<double> grid(rows * cols);
    const double bus_amp = rng.uniform(0.0, spec.background_bus_variation);
    const double bus_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double time_amp = rng.uniform(0.0, spec.background_time_variation);
    const double time_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t m = 0; m < rows; ++m) {
      const double bus_level =
          spec.background_level +
          bus_amp * std::sin(2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(rows) + bus_phase);
      for (std::size_t t = 0; t < cols; ++t) {
        grid[m * cols + t] =
            bus_level +
            time_amp * std::sin(std::numbers::pi * static_cast<double>(t) / static_cast<double>(cols) + time_phase);
      }
    }

    for (std::size_t j = 0; j < k; ++j) {
      if (!labels[j]) continue;
      const auto& g = spec.insights[j];
      PrimitiveParams p;
      const std::size_t width = draw_int(rng, g.band_width);
      const std::size_t start = draw_int(rng, g.band_start);
      p.buses = {start, std::min(rows, start + width)};
      p.onset = draw_int(rng, g.onset);
      p.duration = draw_int(rng, g.duration);
      p.magnitude = draw_real(rng, g.magnitude);
      p.period = draw_real(rng, g.period);
      const std::size_t partner = draw_int(rng, g.partner_start);
      p.partner = {partner, std::min(rows, partner + width)};
      p.burst_seed = rng.next_u64();
      const auto pattern = insight_pattern(g.kind, p, rows, cols);
      for (std::size_t q = 0; q < grid.size(); ++q) grid[q] += pattern[q];
    }

    for (double& v : grid) v = std::clamp(v, 0.0, 1.0);
    for (double& v : grid) v = std::clamp(v + spec.noise * rng.normal(), 0.0, 1.0);
    const auto bytes = quantize(grid);
    for (std::size_t q = 0; q < grid.size(); ++q) grid[q] = bytes[q] / 255.0;

    char id[32];
    std::snprintf(id, sizeof id, "pgpm-%06zu", i);
    out.samples.push_back({Pgpm{id, rows, cols, spec.dt, std::move(grid)}, std::move(labels)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Archive

std::vector<std::uint8_t> quantize(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  using namespace boost::archive::iterators;
  using Encoder = base64_from_binary<transform_width<const std::uint8_t*, 6, 8>>;
  std::string out(Encoder(bytes.data()), Encoder(bytes.data() + bytes.size()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  using namespace boost::archive::iterators;
  using Decoder = transform_width<binary_from_base64<const char*>, 8, 6>;
  if (text.size() % 4 != 0) throw DecodeError("base64 length must be a multiple of 4");
  std::size_t padding = 0;
  while (padding < 2 && padding < text.size() && text[text.size() - 1 - padding] == '=') ++padding;
  const std::string_view body = text.substr(0, text.size() - padding);
  for (char c : body) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '+' && c != '/') {
      throw DecodeError("invalid base64 character");
    }
  }
  std::vector<std::uint8_t> out(Decoder(body.data()), Decoder(body.data() + body.size()));
  out.resize(text.size() / 4 * 3 - padding);
  return out;
}

void write_pgm(const fs::path& path, const Pgpm& pgpm) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << pgpm.cols << ' ' << pgpm.rows << "\n255\n";
  const auto bytes = quantize(pgpm.grid);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

namespace {

std::string next_token(std::istream& in) {
  std::string token;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
      if (!token.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(c);
  }
  return token;
}

std::size_t parse_size(const std::string& token, const fs::path& path) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(token, &used);
    if (used != token.size()) throw std::invalid_argument(token);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DecodeError(path.string() + ": malformed PGM header field '" + token + "'");
  }
}

}  // namespace

Pgpm read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open " + path.string());
  if (next_token(in) != "P5") throw DecodeError(path.string() + ": not a binary PGM (P5) file");
  Pgpm p;
  p.cols = parse_size(next_token(in), path);
  p.rows = parse_size(next_token(in), path);
  const std::size_t maxval = parse_size(next_token(in), path);
  if (maxval != 255) throw DecodeError(path.string() + ": only 8-bit PGM files are supported");
  if (p.rows == 0 || p.cols == 0) throw DecodeError(path.string() + ": empty image");
  std::vector<std::uint8_t> bytes(p.rows * p.cols);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw DecodeError(path.string() + ": truncated pixel data");
  p.grid.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) p.grid[i] = bytes[i] / 255.0;
  return p;
}

void save_dataset(const fs::path& dir, const Dataset& dataset) {
  fs::create_directories(dir / "images");
  std::ofstream meta(dir / "metadata.jsonl", std::ios::binary);
  if (!meta) throw std::runtime_error("cannot write " + (dir / "metadata.jsonl").string());
  nlohmann::json header = {{"format", "pgpm-archive"}, {"version", 1},
                           {"rows", dataset.rows},     {"cols", dataset.cols},
                           {"num_labels", dataset.num_labels}, {"count", dataset.samples.size()}};
  meta << header.dump() << '\n';
  for (const auto& s : dataset.samples) {
    const std::string file = "images/" + s.pgpm.id + ".pgm";
    write_pgm(dir / file, s.pgpm);
    nlohmann::json line = {{"id", s.pgpm.id}, {"file", file}, {"labels", label_string(s.labels)}, {"dt", s.pgpm.dt}};
    meta << line.dump() << '\n';
  }
  if (!meta) throw std::runtime_error("failed writing dataset metadata");
}

Dataset load_dataset(const fs::path& dir, std::optional<std::size_t> expected_labels) {
  std::ifstream meta(dir / "metadata.jsonl", std::ios::binary);
  if (!meta) throw DecodeError("no metadata.jsonl in " + dir.string());
  Dataset out;
  std::string line;
  std::size_t count = 0;
  try {
    if (!std::getline(meta, line)) throw DecodeError("empty metadata file");
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "pgpm-archive") throw DecodeError("metadata header is not a pgpm-archive");
    if (header.value("version", 0) != 1) throw DecodeError("unsupported archive version");
    out.rows = header.at("rows").get<std::size_t>();
    out.cols = header.at("cols").get<std::size_t>();
    out.num_labels = header.at("num_labels").get<std::size_t>();
    count = header.at("count").get<std::size_t>();
    if (expected_labels && *expected_labels != out.num_labels) {
      throw DecodeError("archive has " + std::to_string(out.num_labels) + " labels, expected " +
                        std::to_string(*expected_labels));
    }
    while (std::getline(meta, line)) {
      if (line.empty()) continue;
      const auto entry = nlohmann::json::parse(line);
      Sample s;
      s.pgpm = read_pgm(dir / entry.at("file").get<std::string>());
      s.pgpm.id = entry.at("id").get<std::string>();
      s.pgpm.dt = entry.at("dt").get<double>();
      s.labels = parse_label_string(entry.at("labels").get<std::string>());
      if (s.pgpm.rows != out.rows || s.pgpm.cols != out.cols) {
        throw DecodeError("sample " + s.pgpm.id + " has a different map size than the archive header");
      }
      if (s.labels.size() != out.num_labels) throw DecodeError("sample " + s.pgpm.id + " has the wrong label count");
      out.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("malformed metadata: ") + e.what());
  }
  if (out.samples.size() != count) {
    throw DecodeError("archive header announces " + std::to_string(count) + " samples, found " +
                      std::to_string(out.samples.size()));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> split_folds(const std::vector<LabelVector>& labels, std::size_t folds, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (folds < 2) throw std::invalid_argument("split_folds: folds must be >= 2");
  if (folds > n) throw std::invalid_argument("split_folds: more folds than samples");
  std::map<std::string, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < n; ++i) strata[label_string(labels[i])].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> fold_of(n);
  std::size_t next = 0;
  for (auto& [key, members] : strata) {
    rng.shuffle(members);
    for (std::size_t i : members) fold_of[i] = next++ % folds;
  }
  return fold_of;
}

TrainTestSplit holdout_split(const std::vector<std::size_t>& fold_of, std::size_t test_fold) {
  TrainTestSplit split;
  for (std::size_t i = 0; i < fold_of.size(); ++i) (fold_of[i] == test_fold ? split.test : split.train).push_back(i);
  return split;
}

Tensor image_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  const std::size_t area = dataset.rows * dataset.cols;
  std::vector<double> values(indices.size() * area);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& grid = dataset.samples.at(indices[b]).pgpm.grid;
    std::copy(grid.begin(), grid.end(), values.begin() + b * area);
  }
  return Tensor({indices.size(), 1, dataset.rows, dataset.cols}, std::move(values));
}

Tensor image_tensor(const Pgpm& pgpm) { return Tensor({1, 1, pgpm.rows, pgpm.cols}, pgpm.grid); }

}  // namespace duhiv

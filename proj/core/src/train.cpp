#include "duhiv/train.hpp"

#include <algorithm>
#include <bit>
#include <boost/crc.hpp>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "duhiv/ops.hpp"

namespace duhiv {

namespace {

void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument("train config: " + message);
}

}  // namespace

void TrainConfig::validate() const {
  require(epochs >= 1, "epochs must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(base_lr >= 0.0, "base_lr must be non-negative");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must lie in (0,1]");
  require(decay_every_phase2 >= 1, "decay_every_phase2 must be >= 1");
  require(warmup_epochs <= epochs, "warmup_epochs must not exceed epochs");
  require(mc_samples >= 1, "mc_samples must be >= 1");
  require(eval_mc_samples >= 1, "eval_mc_samples must be >= 1");
  require(max_grad_norm >= 0.0, "max_grad_norm must be non-negative");
}

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.epochs = 1200;
  c.batch_size = 144;
  c.lr_phase1_epochs = 800;
  c.lr_phase2_epochs = 200;
  c.decay_every_phase2 = 10;
  c.warmup_epochs = 300;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"momentum", c.momentum},
       {"lr_phase1_epochs", c.lr_phase1_epochs},
       {"lr_phase2_epochs", c.lr_phase2_epochs},
       {"lr_decay", c.lr_decay},
       {"decay_every_phase2", c.decay_every_phase2},
       {"warmup_epochs", c.warmup_epochs},
       {"seed", c.seed},
       {"mc_samples", c.mc_samples},
       {"eval_every", c.eval_every},
       {"eval_mc_samples", c.eval_mc_samples},
       {"max_grad_norm", c.max_grad_norm}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.lr_phase1_epochs = j.value("lr_phase1_epochs", c.lr_phase1_epochs);
  c.lr_phase2_epochs = j.value("lr_phase2_epochs", c.lr_phase2_epochs);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.decay_every_phase2 = j.value("decay_every_phase2", c.decay_every_phase2);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.seed = j.value("seed", c.seed);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_mc_samples = j.value("eval_mc_samples", c.eval_mc_samples);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
}

double lr_at_epoch(const TrainConfig& cfg, std::size_t e) {
  if (e >= cfg.epochs) {
    throw std::invalid_argument("lr_at_epoch: epoch " + std::to_string(e) + " outside [0, " +
                                std::to_string(cfg.epochs) + ")");
  }
  std::size_t decays = 0;
  if (e >= cfg.lr_phase1_epochs) {
    const std::size_t into = e - cfg.lr_phase1_epochs;
    if (into < cfg.lr_phase2_epochs) {
      decays = into / cfg.decay_every_phase2;
    } else {
      decays = cfg.lr_phase2_epochs / cfg.decay_every_phase2 + (into - cfg.lr_phase2_epochs);
    }
  }
  return cfg.base_lr * std::pow(cfg.lr_decay, static_cast<double>(decays));
}

double beta_at_epoch(const TrainConfig& cfg, std::size_t e) {
  if (e >= cfg.epochs) {
    throw std::invalid_argument("beta_at_epoch: epoch " + std::to_string(e) + " outside [0, " +
                                std::to_string(cfg.epochs) + ")");
  }
  if (cfg.warmup_epochs == 0) return 1.0;
  return std::min(1.0, static_cast<double>(e + 1) / static_cast<double>(cfg.warmup_epochs));
}

void sgd_momentum_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
                       double momentum) {
  if (grads.size() != params.size() || velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_momentum_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

std::string TrainHistory::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "epoch,lr,beta,train_elbo,eval_elbo,mse\n";
  for (const auto& r : epochs) {
    out << r.epoch << ',' << r.lr << ',' << r.beta << ',' << r.train_elbo << ',';
    if (std::isnan(r.eval_elbo)) {
      out << ",\n";
    } else {
      out << r.eval_elbo << ',' << r.mse << '\n';
    }
  }
  return out.str();
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_csv();
}

// ---------------------------------------------------------------------------

Evaluation evaluate(const VaeModel& model, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t samples, std::uint64_t seed) {
  if (indices.empty()) throw std::invalid_argument("evaluate: no samples selected");
  constexpr std::size_t kChunk = 128;
  NoGradGuard no_grad;
  Rng rng(seed);
  Evaluation total;
  double squared_error = 0.0;
  for (std::size_t begin = 0; begin < indices.size(); begin += kChunk) {
    const auto chunk = indices.subspan(begin, std::min(kChunk, indices.size() - begin));
    const Tensor images = image_batch(data, chunk);
    const ElboTerms terms = elbo_terms(model, images, samples, 1.0, rng);
    const double weight = static_cast<double>(chunk.size());
    total.elbo += weight * terms.elbo.item();
    total.reconstruction += weight * terms.reconstruction.item();
    total.kl += weight * terms.kl.item();

    const Tensor recon = model.generate(model.infer(images).mean);
    const auto x = images.values();
    const auto y = recon.values();
    for (std::size_t i = 0; i < x.size(); ++i) squared_error += (x[i] - y[i]) * (x[i] - y[i]);
  }
  const double n = static_cast<double>(indices.size());
  total.elbo /= n;
  total.reconstruction /= n;
  total.kl /= n;
  total.mse = squared_error / (n * static_cast<double>(model.pixels()));
  return total;
}

std::uint64_t eval_seed(const TrainConfig& cfg) { return mix_seed(cfg.seed, 0x65766131); }

TrainTestSplit default_split(const Dataset& data, std::uint64_t seed) {
  return holdout_split(split_folds(data.labels(), 5, seed), 0);
}

namespace {

double clip_gradients(std::vector<NamedParameter>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params) {
      if (!p.value.has_grad()) continue;
      for (double& g : p.value.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

}  // namespace

TrainHistory train(VaeModel& model, const Dataset& data, std::span<const std::size_t> train_indices,
                   std::span<const std::size_t> eval_indices, const TrainConfig& cfg,
                   const TrainCallbacks& callbacks) {
  cfg.validate();
  if (train_indices.empty()) throw std::invalid_argument("train: empty training set");
  if (data.rows != model.image_height() || data.cols != model.image_width()) {
    throw std::invalid_argument("train: dataset maps are " + std::to_string(data.rows) + "x" +
                                std::to_string(data.cols) + ", model expects " +
                                std::to_string(model.image_height()) + "x" + std::to_string(model.image_width()));
  }

  auto& params = model.parameters();
  std::vector<std::vector<double>> velocity;
  velocity.reserve(params.size());
  for (auto& p : params) {
    p.value.set_requires_grad(true);
    velocity.emplace_back(p.value.size(), 0.0);
  }

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_indices.begin(), train_indices.end());
  TrainHistory history;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr_at_epoch(cfg, epoch);
    record.beta = beta_at_epoch(cfg, epoch);
    rng.shuffle(order);

    double elbo_sum = 0.0;
    std::size_t batch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size, ++batch) {
      const std::span<const std::size_t> idx(order.data() + begin, std::min(cfg.batch_size, order.size() - begin));
      double value = 0.0;
      try {
        const Tensor images = image_batch(data, idx);
        model.zero_grad();
        ElboTerms terms = elbo_terms(model, images, cfg.mc_samples, record.beta, rng);
        value = terms.elbo.item();
        backward(ops::mul_scalar(terms.elbo, -1.0));
        const double norm = clip_gradients(params, cfg.max_grad_norm);
        if (!std::isfinite(norm)) throw NumericError("non-finite gradient");
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           ": " + e.what());
      }
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& value_tensor = params[p].value;
        if (!value_tensor.has_grad()) continue;
        sgd_momentum_step(value_tensor.mutable_values(), value_tensor.grad(), velocity[p], record.lr, cfg.momentum);
      }
      elbo_sum += value * static_cast<double>(idx.size());
    }
    record.train_elbo = elbo_sum / static_cast<double>(order.size());

    const bool evaluate_now = cfg.eval_every > 0 && !eval_indices.empty() &&
                              ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
    if (evaluate_now) {
      const Evaluation ev = evaluate(model, data, eval_indices, cfg.eval_mc_samples, eval_seed(cfg));
      record.eval_elbo = ev.elbo;
      record.mse = ev.mse;
    } else {
      record.eval_elbo = std::numeric_limits<double>::quiet_NaN();
      record.mse = std::numeric_limits<double>::quiet_NaN();
    }
    history.epochs.push_back(record);
    if (callbacks.on_epoch) callbacks.on_epoch(record);
    if (evaluate_now && callbacks.on_eval) callbacks.on_eval(record, model);
  }
  model.zero_grad();
  for (auto& p : params) p.value.set_requires_grad(false);
  return history;
}

TrainHistory train(VaeModel& model, const Dataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks) {
  const TrainTestSplit split = default_split(data, cfg.seed);
  return train(model, data, split.train, split.test, cfg, callbacks);
}

// ---------------------------------------------------------------------------
// Checkpoint layout (all integers little-endian):
//   "DUHIVCKP" | u32 version | u64 n + n bytes UTF-8 JSON metadata
//   | u64 tensor count | per tensor: u32 n + name, u32 rank, rank x u64 dims, f64 values
//   | u32 CRC-32 of every preceding byte

namespace {

constexpr char kMagic[8] = {'D', 'U', 'H', 'I', 'V', 'C', 'K', 'P'};

template <typename T>
void put(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DecodeError("checkpoint is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(std::string_view bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

}  // namespace

std::string encode_checkpoint(const VaeModel& model, const TrainConfig& cfg, const nlohmann::json& extra) {
  nlohmann::json meta = {{"model", describe_model(model)}, {"train", cfg}, {"extra", extra}};
  const std::string meta_text = meta.dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  const auto& params = model.parameters();
  put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put<std::uint64_t>(out, d);
    for (double v : p.value.values()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  put<std::uint32_t>(out, crc32(out));
  return out;
}

void save_checkpoint(const VaeModel& model, const TrainConfig& cfg, const std::filesystem::path& path,
                     const nlohmann::json& extra) {
  const std::string bytes = encode_checkpoint(model, cfg, extra);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof kMagic + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DecodeError("not a checkpoint file (bad magic)");
  }
  Reader r(bytes);
  r.take(sizeof kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DecodeError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < sizeof kMagic + 8) throw DecodeError("checkpoint is truncated");
  const std::uint32_t stored_crc = Reader(bytes.substr(bytes.size() - 4)).get<std::uint32_t>();
  if (stored_crc != crc32(bytes.substr(0, bytes.size() - 4))) {
    throw DecodeError("checkpoint checksum mismatch (truncated or corrupt file)");
  }

  Checkpoint ck;
  nlohmann::json meta;
  try {
    const auto meta_size = r.get<std::uint64_t>();
    meta = nlohmann::json::parse(r.take(meta_size));
    ck.model = build_model(meta.at("model"));
    ck.train_config = meta.at("train").get<TrainConfig>();
    ck.extra = meta.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DecodeError(std::string("invalid model description in checkpoint: ") + e.what());
  }

  auto& params = ck.model->parameters();
  const auto count = r.get<std::uint64_t>();
  if (count != params.size()) {
    throw DecodeError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto name_size = r.get<std::uint32_t>();
    const std::string name(r.take(name_size));
    if (name != p.name) throw DecodeError("checkpoint tensor '" + name + "' where '" + p.name + "' was expected");
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != p.value.shape()) {
      throw DecodeError("tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                        shape_str(p.value.shape()));
    }
    auto values = p.value.mutable_values();
    for (double& v : values) v = std::bit_cast<double>(r.get<std::uint64_t>());
  }
  if (r.remaining() != 4) throw DecodeError("trailing bytes after tensor table");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace duhiv

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "duhiv/data.hpp"
#include "duhiv/model.hpp"

namespace duhiv {

/// Learning rate is constant for lr_phase1_epochs, then multiplied by lr_decay
/// every decay_every_phase2 epochs for lr_phase2_epochs, then every epoch.
struct TrainConfig {
  std::size_t epochs = 120;
  std::size_t batch_size = 32;
  double base_lr = 0.005;
  double momentum = 0.9;
  std::size_t lr_phase1_epochs = 80;
  std::size_t lr_phase2_epochs = 20;
  double lr_decay = 0.9;
  std::size_t decay_every_phase2 = 2;
  std::size_t warmup_epochs = 30;
  std::uint64_t seed = 0;
  /// Monte-Carlo samples per training example.
  std::size_t mc_samples = 1;
  /// Held-out evaluation cadence in epochs; 0 disables evaluation.
  std::size_t eval_every = 1;
  std::size_t eval_mc_samples = 1;
  /// Global gradient-norm clip; 0 means off.
  double max_grad_norm = 0.0;

  void validate() const;
  /// 1200 epochs, batch 144, phases 800/200, decay every 10, warm-up 300.
  static TrainConfig full_scale();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Throws std::invalid_argument when e >= epochs.
double lr_at_epoch(const TrainConfig& cfg, std::size_t e);
double beta_at_epoch(const TrainConfig& cfg, std::size_t e);

/// v <- momentum * v + grad; p <- p - lr * v.
void sgd_momentum_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
                       double momentum);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double beta = 0.0;
  double train_elbo = 0.0;
  /// NaN when the epoch was not evaluated.
  double eval_elbo = 0.0;
  double mse = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  /// "epoch,lr,beta,train_elbo,eval_elbo,mse" with full-precision values.
  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct Evaluation {
  double elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  /// Mean squared error of the mean-latent reconstruction, per pixel.
  double mse = 0.0;
};

/// Batch-mean ELBO at beta = 1 with K samples, plus reconstruction MSE.
/// Deterministic in (model, indices, samples, seed).
Evaluation evaluate(const VaeModel& model, const Dataset& data, std::span<const std::size_t> indices,
                    std::size_t samples, std::uint64_t seed);

/// Seed used for held-out evaluation during training.
std::uint64_t eval_seed(const TrainConfig& cfg);

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called after each evaluation; the model is not modified during the call.
  std::function<void(const EpochRecord&, const VaeModel&)> on_eval;
};

/// Maximises the ELBO over train_indices, evaluating on eval_indices.
/// A non-finite loss aborts with a NumericError naming the epoch and batch.
TrainHistory train(VaeModel& model, const Dataset& data, std::span<const std::size_t> train_indices,
                   std::span<const std::size_t> eval_indices, const TrainConfig& cfg,
                   const TrainCallbacks& callbacks = {});

/// Held-out split used by train(model, data, cfg): 5 stratified folds seeded
/// by cfg.seed, fold 0 held out.
TrainTestSplit default_split(const Dataset& data, std::uint64_t seed);

TrainHistory train(VaeModel& model, const Dataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks = {});

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  std::unique_ptr<VaeModel> model;
  TrainConfig train_config;
  /// Free-form document stored alongside (e.g. final evaluation).
  nlohmann::json extra;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const VaeModel& model, const TrainConfig& cfg, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());
std::string encode_checkpoint(const VaeModel& model, const TrainConfig& cfg,
                              const nlohmann::json& extra = nlohmann::json::object());
/// Throws DecodeError on truncation, corruption or version mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint decode_checkpoint(std::string_view bytes);

}  // namespace duhiv

#pragma once

#include <cstdint>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "duhiv/random.hpp"
#include "duhiv/tensor.hpp"

namespace duhiv {

/// Dense block followed by a strided 3x3 transition conv.
struct DenseBlockSpec {
  std::size_t layers = 4;
  std::size_t growth = 8;
  std::size_t transition_channels = 16;
  std::size_t downsample = 2;
};

struct DuhivConfig {
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::vector<std::size_t> latent_sizes{8, 8};
  std::size_t stem_channels = 8;
  std::size_t stem_stride = 2;
  /// One block per latent layer; latent l is read from the output of block l.
  std::vector<DenseBlockSpec> encoder{{4, 8, 16, 2}, {4, 8, 16, 2}};
  std::size_t decoder_channels = 16;
  std::size_t injection_channels = 4;
  double obs_variance = 0.1;
  std::size_t mc_samples = 1;
  std::uint64_t init_seed = 1;

  /// Throws std::invalid_argument when inconsistent.
  void validate() const;
  /// The 4x4, latents [2,2] configuration used for end-to-end gradient checks.
  static DuhivConfig tiny();
};

/// Fully connected hierarchical VAE (DLGM-style) used as the baseline.
struct MlpHvaeConfig {
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::vector<std::size_t> latent_sizes{8, 8};
  /// One deterministic layer per latent layer, ordered from the input upward.
  std::vector<std::size_t> hidden{400, 400};
  double obs_variance = 0.1;
  std::size_t mc_samples = 1;
  std::uint64_t init_seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const DenseBlockSpec& s);
void from_json(const nlohmann::json& j, DenseBlockSpec& s);
void to_json(nlohmann::json& j, const DuhivConfig& c);
void from_json(const nlohmann::json& j, DuhivConfig& c);
void to_json(nlohmann::json& j, const MlpHvaeConfig& c);
void from_json(const nlohmann::json& j, MlpHvaeConfig& c);

/// Per-layer diagonal Gaussian posterior for a batch: mean[l] and
/// log_variance[l] are [N, latent_sizes[l]].
struct GaussianLatent {
  std::vector<Tensor> mean;
  std::vector<Tensor> log_variance;

  std::size_t layers() const { return mean.size(); }
  Tensor stddev(std::size_t layer) const;
};

struct NamedParameter {
  std::string name;
  Tensor value;
};

class VaeModel {
 public:
  virtual ~VaeModel() = default;

  virtual std::string kind() const = 0;
  virtual GaussianLatent infer(const Tensor& images) const = 0;
  virtual Tensor generate(const std::vector<Tensor>& z) const = 0;
  virtual nlohmann::json config_json() const = 0;
  virtual std::unique_ptr<VaeModel> clone() const = 0;

  std::size_t image_height() const { return height_; }
  std::size_t image_width() const { return width_; }
  std::size_t pixels() const { return height_ * width_; }
  const std::vector<std::size_t>& latent_sizes() const { return latent_sizes_; }
  std::size_t latent_dim() const;
  double obs_variance() const { return obs_variance_; }
  std::size_t mc_samples() const { return mc_samples_; }

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();
  /// Copies parameter values by name; shapes must agree.
  void copy_parameters_from(const VaeModel& other);

 protected:
  VaeModel(std::size_t height, std::size_t width, std::vector<std::size_t> latent_sizes, double obs_variance,
           std::size_t mc_samples);
  Tensor& add_parameter(std::string name, Shape shape, double bound, Rng& rng);
  Tensor& add_zero_parameter(std::string name, Shape shape);
  void check_images(const Tensor& images) const;
  void check_latents(const std::vector<Tensor>& z) const;

 private:
  std::size_t height_;
  std::size_t width_;
  std::vector<std::size_t> latent_sizes_;
  double obs_variance_;
  std::size_t mc_samples_;
  std::vector<NamedParameter> params_;
};

/// Dense-block inference network with a U-Net style expanding generative path.
class DuhivModel final : public VaeModel {
 public:
  explicit DuhivModel(DuhivConfig config);

  std::string kind() const override { return "duhiv"; }
  GaussianLatent infer(const Tensor& images) const override;
  Tensor generate(const std::vector<Tensor>& z) const override;
  nlohmann::json config_json() const override { return config_; }
  std::unique_ptr<VaeModel> clone() const override;
  const DuhivConfig& config() const { return config_; }

 private:
  struct ConvLayer {
    Tensor kernel;
    Tensor bias;
    std::size_t stride = 1;
  };
  struct Affine {
    Tensor weight;
    Tensor bias;
  };
  struct Resolution {
    std::size_t height;
    std::size_t width;
  };

  ConvLayer make_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t stride, Rng& rng,
                      bool relu_gain = true);
  Affine make_affine(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool relu_gain = false);

  DuhivConfig config_;
  ConvLayer stem_;
  std::vector<std::vector<ConvLayer>> block_layers_;
  std::vector<ConvLayer> transitions_;
  std::vector<Affine> mean_heads_;
  std::vector<Affine> log_variance_heads_;
  // Resolution and channel count after each block's transition.
  std::vector<Resolution> block_resolution_;
  std::vector<std::size_t> block_channels_;

  Affine top_projection_;
  ConvLayer top_conv_;
  // Stage l (l < L-1) merges z_l after upsampling from block l+1's resolution.
  std::vector<ConvLayer> stage_pre_;
  std::vector<Affine> injections_;
  std::vector<ConvLayer> stage_merge_;
  ConvLayer block1_up_;
  ConvLayer stem_up_;
  ConvLayer output_;
};

class MlpHvaeModel final : public VaeModel {
 public:
  explicit MlpHvaeModel(MlpHvaeConfig config);

  std::string kind() const override { return "mlp-hvae"; }
  GaussianLatent infer(const Tensor& images) const override;
  Tensor generate(const std::vector<Tensor>& z) const override;
  nlohmann::json config_json() const override { return config_; }
  std::unique_ptr<VaeModel> clone() const override;
  const MlpHvaeConfig& config() const { return config_; }

 private:
  struct Affine {
    Tensor weight;
    Tensor bias;
  };
  Affine make_affine(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool relu_gain);

  MlpHvaeConfig config_;
  std::vector<Affine> encoder_;
  std::vector<Affine> mean_heads_;
  std::vector<Affine> log_variance_heads_;
  std::vector<Affine> decoder_;
  std::vector<Affine> injections_;
  Affine output_;
};

std::unique_ptr<VaeModel> build_duhiv(const DuhivConfig& config);
std::unique_ptr<VaeModel> build_mlp_hvae(const MlpHvaeConfig& config);
/// Baseline with the same image size, latent hierarchy and observation model.
std::unique_ptr<VaeModel> build_mlp_hvae(const DuhivConfig& reference, std::vector<std::size_t> hidden = {400, 400});
/// Dispatches on {"kind": ..., "config": {...}}.
std::unique_ptr<VaeModel> build_model(const nlohmann::json& description);
nlohmann::json describe_model(const VaeModel& model);

/// z_l = mean_l + exp(log_variance_l / 2) * eps, eps ~ N(0, I).
std::vector<Tensor> reparameterize(const GaussianLatent& latent, Rng& rng);
std::vector<Tensor> reparameterize(const GaussianLatent& latent, std::uint64_t seed);

/// KL(q(z|x) || N(0,I)) summed over layers, dimensions and batch rows.
Tensor kl_term(const GaussianLatent& latent);

/// Batch-mean ELBO terms, differentiable.
struct ElboTerms {
  Tensor elbo;
  Tensor reconstruction;
  Tensor kl;
};

/// reconstruction = (1/K) sum_k [ -|x - g(z_k)|^2 / (2 s2) - (D/2) log(2 pi s2) ]
/// elbo = reconstruction - beta * kl, all averaged over the batch.
ElboTerms elbo_terms(const VaeModel& model, const Tensor& images, std::size_t samples, double beta, Rng& rng);

struct ElboEstimate {
  double elbo = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
};

ElboEstimate elbo(const VaeModel& model, const Tensor& images, std::size_t samples, double beta, std::uint64_t seed);

/// Splits a row of concatenated per-layer values into [1, d_l] tensors.
std::vector<Tensor> split_latent_row(const VaeModel& model, const std::vector<double>& row);

}  // namespace duhiv

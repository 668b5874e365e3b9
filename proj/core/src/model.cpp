#include "duhiv/model.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "duhiv/ops.hpp"

namespace duhiv {

namespace {

double uniform_bound(std::size_t fan_in, bool relu_gain) {
  return std::sqrt((relu_gain ? 6.0 : 3.0) / static_cast<double>(fan_in));
}

void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

}  // namespace

void DuhivConfig::validate() const {
  require(!latent_sizes.empty(), "duhiv config: at least one latent layer is required");
  require(encoder.size() == latent_sizes.size(), "duhiv config: one encoder block per latent layer is required");
  require(obs_variance > 0.0, "duhiv config: obs_variance must be positive");
  require(mc_samples >= 1, "duhiv config: mc_samples must be >= 1");
  require(stem_channels >= 1 && decoder_channels >= 1 && injection_channels >= 1, "duhiv config: channel counts must be >= 1");
  require(stem_stride >= 1, "duhiv config: stem_stride must be >= 1");
  std::size_t factor = stem_stride;
  for (const auto& block : encoder) {
    require(block.layers >= 1 && block.growth >= 1 && block.transition_channels >= 1,
            "duhiv config: dense blocks need at least one layer, growth and transition channel");
    require(block.downsample >= 1, "duhiv config: downsample factor must be >= 1");
    factor *= block.downsample;
  }
  for (std::size_t size : latent_sizes) require(size >= 1, "duhiv config: latent sizes must be >= 1");
  require(image_height > 0 && image_width > 0 && image_height % factor == 0 && image_width % factor == 0,
          "duhiv config: image size must be divisible by the total downsampling factor " + std::to_string(factor));
}

DuhivConfig DuhivConfig::tiny() {
  DuhivConfig c;
  c.image_height = 4;
  c.image_width = 4;
  c.latent_sizes = {2, 2};
  c.stem_channels = 2;
  c.stem_stride = 1;
  c.encoder = {{2, 2, 3, 2}, {2, 2, 3, 2}};
  c.decoder_channels = 3;
  c.injection_channels = 2;
  return c;
}

void MlpHvaeConfig::validate() const {
  require(!latent_sizes.empty(), "mlp-hvae config: at least one latent layer is required");
  require(hidden.size() == latent_sizes.size(), "mlp-hvae config: one hidden layer per latent layer is required");
  require(obs_variance > 0.0, "mlp-hvae config: obs_variance must be positive");
  require(mc_samples >= 1, "mlp-hvae config: mc_samples must be >= 1");
  require(image_height > 0 && image_width > 0, "mlp-hvae config: empty image");
  for (std::size_t h : hidden) require(h >= 1, "mlp-hvae config: hidden sizes must be >= 1");
  for (std::size_t s : latent_sizes) require(s >= 1, "mlp-hvae config: latent sizes must be >= 1");
}

void to_json(nlohmann::json& j, const DenseBlockSpec& s) {
  j = {{"layers", s.layers}, {"growth", s.growth}, {"transition_channels", s.transition_channels}, {"downsample", s.downsample}};
}

void from_json(const nlohmann::json& j, DenseBlockSpec& s) {
  s.layers = j.value("layers", s.layers);
  s.growth = j.value("growth", s.growth);
  s.transition_channels = j.value("transition_channels", s.transition_channels);
  s.downsample = j.value("downsample", s.downsample);
}

void to_json(nlohmann::json& j, const DuhivConfig& c) {
  j = {{"image_height", c.image_height},         {"image_width", c.image_width},
       {"latent_sizes", c.latent_sizes},         {"stem_channels", c.stem_channels},
       {"stem_stride", c.stem_stride},           {"encoder", c.encoder},
       {"decoder_channels", c.decoder_channels}, {"injection_channels", c.injection_channels},
       {"obs_variance", c.obs_variance},         {"mc_samples", c.mc_samples},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, DuhivConfig& c) {
  c.image_height = j.value("image_height", c.image_height);
  c.image_width = j.value("image_width", c.image_width);
  c.latent_sizes = j.value("latent_sizes", c.latent_sizes);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  c.stem_stride = j.value("stem_stride", c.stem_stride);
  c.encoder = j.value("encoder", c.encoder);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.injection_channels = j.value("injection_channels", c.injection_channels);
  c.obs_variance = j.value("obs_variance", c.obs_variance);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.init_seed = j.value("init_seed", c.init_seed);
}

void to_json(nlohmann::json& j, const MlpHvaeConfig& c) {
  j = {{"image_height", c.image_height}, {"image_width", c.image_width}, {"latent_sizes", c.latent_sizes},
       {"hidden", c.hidden},             {"obs_variance", c.obs_variance}, {"mc_samples", c.mc_samples},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, MlpHvaeConfig& c) {
  c.image_height = j.value("image_height", c.image_height);
  c.image_width = j.value("image_width", c.image_width);
  c.latent_sizes = j.value("latent_sizes", c.latent_sizes);
  c.hidden = j.value("hidden", c.hidden);
  c.obs_variance = j.value("obs_variance", c.obs_variance);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.init_seed = j.value("init_seed", c.init_seed);
}

Tensor GaussianLatent::stddev(std::size_t layer) const {
  return ops::exp(ops::mul_scalar(log_variance.at(layer), 0.5));
}

// ---------------------------------------------------------------------------
// VaeModel

VaeModel::VaeModel(std::size_t height, std::size_t width, std::vector<std::size_t> latent_sizes, double obs_variance,
                   std::size_t mc_samples)
    : height_(height),
      width_(width),
      latent_sizes_(std::move(latent_sizes)),
      obs_variance_(obs_variance),
      mc_samples_(mc_samples) {}

std::size_t VaeModel::latent_dim() const {
  return std::accumulate(latent_sizes_.begin(), latent_sizes_.end(), std::size_t{0});
}

std::size_t VaeModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void VaeModel::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void VaeModel::copy_parameters_from(const VaeModel& other) {
  if (other.params_.size() != params_.size()) throw std::invalid_argument("copy_parameters_from: parameter sets differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = other.params_[i];
    auto& dst = params_[i];
    if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
      throw std::invalid_argument("copy_parameters_from: parameter '" + dst.name + "' differs");
    }
    std::copy(src.value.values().begin(), src.value.values().end(), dst.value.mutable_values().begin());
  }
}

Tensor& VaeModel::add_parameter(std::string name, Shape shape, double bound, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  params_.push_back({std::move(name), Tensor(std::move(shape), std::move(values), true)});
  return params_.back().value;
}

Tensor& VaeModel::add_zero_parameter(std::string name, Shape shape) {
  params_.push_back({std::move(name), Tensor::zeros(std::move(shape), true)});
  return params_.back().value;
}

void VaeModel::check_images(const Tensor& images) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != height_ || s[3] != width_) {
    throw std::invalid_argument("infer: expected images [N,1," + std::to_string(height_) + "," +
                                std::to_string(width_) + "], got " + shape_str(s));
  }
  for (double v : images.values()) {
    if (v < 0.0 || v > 1.0) throw std::invalid_argument("infer: pixel values must lie in [0,1]");
  }
}

void VaeModel::check_latents(const std::vector<Tensor>& z) const {
  if (z.size() != latent_sizes_.size()) {
    throw std::invalid_argument("generate: expected " + std::to_string(latent_sizes_.size()) + " latent layers");
  }
  const std::size_t n = z.front().rank() == 2 ? z.front().dim(0) : 0;
  for (std::size_t l = 0; l < z.size(); ++l) {
    if (z[l].rank() != 2 || z[l].dim(0) != n || z[l].dim(1) != latent_sizes_[l]) {
      throw std::invalid_argument("generate: latent layer " + std::to_string(l) + " must be [N," +
                                  std::to_string(latent_sizes_[l]) + "], got " + shape_str(z[l].shape()));
    }
  }
}

// ---------------------------------------------------------------------------
// DUHiV

DuhivModel::ConvLayer DuhivModel::make_conv(const std::string& name, std::size_t in, std::size_t out,
                                            std::size_t stride, Rng& rng, bool relu_gain) {
  ConvLayer layer;
  layer.kernel = add_parameter(name + ".kernel", {out, in, 3, 3}, uniform_bound(in * 9, relu_gain), rng);
  layer.bias = add_zero_parameter(name + ".bias", {out});
  layer.stride = stride;
  return layer;
}

DuhivModel::Affine DuhivModel::make_affine(const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                                           bool relu_gain) {
  Affine a;
  a.weight = add_parameter(name + ".weight", {in, out}, uniform_bound(in, relu_gain), rng);
  a.bias = add_zero_parameter(name + ".bias", {out});
  return a;
}

DuhivModel::DuhivModel(DuhivConfig config)
    : VaeModel(config.image_height, config.image_width, config.latent_sizes, config.obs_variance, config.mc_samples),
      config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.init_seed);
  const std::size_t levels = config_.latent_sizes.size();

  stem_ = make_conv("encoder.stem", 1, config_.stem_channels, config_.stem_stride, rng);
  Resolution res{config_.image_height / config_.stem_stride, config_.image_width / config_.stem_stride};
  std::size_t channels = config_.stem_channels;
  for (std::size_t b = 0; b < levels; ++b) {
    const auto& spec = config_.encoder[b];
    const std::string prefix = "encoder.block" + std::to_string(b);
    std::vector<ConvLayer> layers;
    for (std::size_t i = 0; i < spec.layers; ++i) {
      layers.push_back(make_conv(prefix + ".layer" + std::to_string(i), channels, spec.growth, 1, rng));
      channels += spec.growth;
    }
    block_layers_.push_back(std::move(layers));
    transitions_.push_back(make_conv(prefix + ".transition", channels, spec.transition_channels, spec.downsample, rng));
    channels = spec.transition_channels;
    res = {res.height / spec.downsample, res.width / spec.downsample};
    block_resolution_.push_back(res);
    block_channels_.push_back(channels);
    const std::size_t flat = channels * res.height * res.width;
    mean_heads_.push_back(make_affine("latent" + std::to_string(b) + ".mean", flat, config_.latent_sizes[b], rng));
    log_variance_heads_.push_back(
        make_affine("latent" + std::to_string(b) + ".log_variance", flat, config_.latent_sizes[b], rng));
  }

  const std::size_t dec = config_.decoder_channels;
  const Resolution top = block_resolution_.back();
  top_projection_ = make_affine("decoder.top", config_.latent_sizes.back(), dec * top.height * top.width, rng, true);
  top_conv_ = make_conv("decoder.top_conv", dec, dec, 1, rng);
  stage_pre_.resize(levels - 1);
  injections_.resize(levels - 1);
  stage_merge_.resize(levels - 1);
  for (std::size_t l = levels - 1; l-- > 0;) {
    const std::string prefix = "decoder.stage" + std::to_string(l);
    const Resolution r = block_resolution_[l];
    stage_pre_[l] = make_conv(prefix + ".up_conv", dec, dec, 1, rng);
    injections_[l] = make_affine(prefix + ".inject", config_.latent_sizes[l],
                                 config_.injection_channels * r.height * r.width, rng, true);
    stage_merge_[l] = make_conv(prefix + ".merge", dec + config_.injection_channels, dec, 1, rng);
  }
  const std::size_t last = std::max<std::size_t>(dec / 2, 1);
  block1_up_ = make_conv("decoder.block0_up", dec, dec, 1, rng);
  stem_up_ = make_conv("decoder.stem_up", dec, last, 1, rng);
  output_ = make_conv("decoder.output", last, 1, 1, rng, false);
}

namespace {

Tensor apply_conv(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride) {
  return ops::add_channel_bias(ops::conv2d(x, kernel, stride, 1), bias);
}

}  // namespace

GaussianLatent DuhivModel::infer(const Tensor& images) const {
  check_images(images);
  const std::size_t n = images.dim(0);
  GaussianLatent out;
  Tensor h = ops::relu(apply_conv(images, stem_.kernel, stem_.bias, stem_.stride));
  for (std::size_t b = 0; b < block_layers_.size(); ++b) {
    for (const ConvLayer& layer : block_layers_[b]) {
      Tensor y = ops::relu(apply_conv(h, layer.kernel, layer.bias, 1));
      h = ops::concat_channels(h, y);
    }
    const ConvLayer& t = transitions_[b];
    h = ops::relu(apply_conv(h, t.kernel, t.bias, t.stride));
    Tensor flat = ops::reshape(h, {n, h.size() / n});
    out.mean.push_back(ops::dense_affine(flat, mean_heads_[b].weight, mean_heads_[b].bias));
    out.log_variance.push_back(ops::dense_affine(flat, log_variance_heads_[b].weight, log_variance_heads_[b].bias));
  }
  return out;
}

Tensor DuhivModel::generate(const std::vector<Tensor>& z) const {
  check_latents(z);
  const std::size_t n = z.front().dim(0);
  const std::size_t levels = z.size();
  const std::size_t dec = config_.decoder_channels;

  const Resolution top = block_resolution_.back();
  Tensor h = ops::dense_affine(z.back(), top_projection_.weight, top_projection_.bias);
  h = ops::relu(ops::reshape(h, {n, dec, top.height, top.width}));
  h = ops::relu(apply_conv(h, top_conv_.kernel, top_conv_.bias, 1));
  for (std::size_t l = levels - 1; l-- > 0;) {
    const Resolution r = block_resolution_[l];
    h = ops::upsample_nearest(h, config_.encoder[l + 1].downsample);
    h = ops::relu(apply_conv(h, stage_pre_[l].kernel, stage_pre_[l].bias, 1));
    Tensor inj = ops::dense_affine(z[l], injections_[l].weight, injections_[l].bias);
    inj = ops::relu(ops::reshape(inj, {n, config_.injection_channels, r.height, r.width}));
    h = ops::concat_channels(h, inj);
    h = ops::relu(apply_conv(h, stage_merge_[l].kernel, stage_merge_[l].bias, 1));
  }
  h = ops::upsample_nearest(h, config_.encoder.front().downsample);
  h = ops::relu(apply_conv(h, block1_up_.kernel, block1_up_.bias, 1));
  h = ops::upsample_nearest(h, config_.stem_stride);
  h = ops::relu(apply_conv(h, stem_up_.kernel, stem_up_.bias, 1));
  return ops::sigmoid(apply_conv(h, output_.kernel, output_.bias, 1));
}

std::unique_ptr<VaeModel> DuhivModel::clone() const {
  auto copy = std::make_unique<DuhivModel>(config_);
  copy->copy_parameters_from(*this);
  return copy;
}

// ---------------------------------------------------------------------------
// MLP hierarchical VAE

MlpHvaeModel::Affine MlpHvaeModel::make_affine(const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                                               bool relu_gain) {
  Affine a;
  a.weight = add_parameter(name + ".weight", {in, out}, uniform_bound(in, relu_gain), rng);
  a.bias = add_zero_parameter(name + ".bias", {out});
  return a;
}

MlpHvaeModel::MlpHvaeModel(MlpHvaeConfig config)
    : VaeModel(config.image_height, config.image_width, config.latent_sizes, config.obs_variance, config.mc_samples),
      config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.init_seed);
  const std::size_t levels = config_.latent_sizes.size();
  std::size_t width = config_.image_height * config_.image_width;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string prefix = "encoder.hidden" + std::to_string(l);
    encoder_.push_back(make_affine(prefix, width, config_.hidden[l], rng, true));
    width = config_.hidden[l];
    mean_heads_.push_back(make_affine("latent" + std::to_string(l) + ".mean", width, config_.latent_sizes[l], rng, false));
    log_variance_heads_.push_back(
        make_affine("latent" + std::to_string(l) + ".log_variance", width, config_.latent_sizes[l], rng, false));
  }
  decoder_.resize(levels);
  injections_.resize(levels);
  decoder_[levels - 1] = make_affine("decoder.top", config_.latent_sizes.back(), config_.hidden.back(), rng, true);
  for (std::size_t l = levels - 1; l-- > 0;) {
    const std::string prefix = "decoder.hidden" + std::to_string(l);
    decoder_[l] = make_affine(prefix, config_.hidden[l + 1], config_.hidden[l], rng, true);
    injections_[l] = make_affine(prefix + ".inject", config_.latent_sizes[l], config_.hidden[l], rng, true);
  }
  output_ = make_affine("decoder.output", config_.hidden.front(), config_.image_height * config_.image_width, rng, false);
}

GaussianLatent MlpHvaeModel::infer(const Tensor& images) const {
  check_images(images);
  const std::size_t n = images.dim(0);
  GaussianLatent out;
  Tensor h = ops::reshape(images, {n, pixels()});
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    h = ops::relu(ops::dense_affine(h, encoder_[l].weight, encoder_[l].bias));
    out.mean.push_back(ops::dense_affine(h, mean_heads_[l].weight, mean_heads_[l].bias));
    out.log_variance.push_back(ops::dense_affine(h, log_variance_heads_[l].weight, log_variance_heads_[l].bias));
  }
  return out;
}

Tensor MlpHvaeModel::generate(const std::vector<Tensor>& z) const {
  check_latents(z);
  const std::size_t n = z.front().dim(0);
  const std::size_t levels = z.size();
  Tensor h = ops::relu(ops::dense_affine(z.back(), decoder_[levels - 1].weight, decoder_[levels - 1].bias));
  for (std::size_t l = levels - 1; l-- > 0;) {
    Tensor up = ops::dense_affine(h, decoder_[l].weight, decoder_[l].bias);
    Tensor inj = ops::dense_affine(z[l], injections_[l].weight, injections_[l].bias);
    h = ops::relu(ops::add(up, inj));
  }
  Tensor out = ops::sigmoid(ops::dense_affine(h, output_.weight, output_.bias));
  return ops::reshape(out, {n, 1, image_height(), image_width()});
}

std::unique_ptr<VaeModel> MlpHvaeModel::clone() const {
  auto copy = std::make_unique<MlpHvaeModel>(config_);
  copy->copy_parameters_from(*this);
  return copy;
}

// ---------------------------------------------------------------------------
// Factories

std::unique_ptr<VaeModel> build_duhiv(const DuhivConfig& config) { return std::make_unique<DuhivModel>(config); }

std::unique_ptr<VaeModel> build_mlp_hvae(const MlpHvaeConfig& config) { return std::make_unique<MlpHvaeModel>(config); }

std::unique_ptr<VaeModel> build_mlp_hvae(const DuhivConfig& reference, std::vector<std::size_t> hidden) {
  MlpHvaeConfig c;
  c.image_height = reference.image_height;
  c.image_width = reference.image_width;
  c.latent_sizes = reference.latent_sizes;
  c.hidden = std::move(hidden);
  c.obs_variance = reference.obs_variance;
  c.mc_samples = reference.mc_samples;
  c.init_seed = reference.init_seed;
  return build_mlp_hvae(c);
}

std::unique_ptr<VaeModel> build_model(const nlohmann::json& description) {
  const std::string kind = description.at("kind").get<std::string>();
  const nlohmann::json& config = description.contains("config") ? description.at("config") : nlohmann::json::object();
  if (kind == "duhiv") return build_duhiv(config.get<DuhivConfig>());
  if (kind == "mlp-hvae") return build_mlp_hvae(config.get<MlpHvaeConfig>());
  throw std::invalid_argument("unknown model kind '" + kind + "'");
}

nlohmann::json describe_model(const VaeModel& model) {
  return {{"kind", model.kind()}, {"config", model.config_json()}};
}

// ---------------------------------------------------------------------------
// Objective

std::vector<Tensor> reparameterize(const GaussianLatent& latent, Rng& rng) {
  std::vector<Tensor> z;
  z.reserve(latent.layers());
  for (std::size_t l = 0; l < latent.layers(); ++l) {
    const Tensor& mean = latent.mean[l];
    std::vector<double> eps(mean.size());
    for (double& e : eps) e = rng.normal();
    Tensor noise(mean.shape(), std::move(eps));
    z.push_back(ops::add(mean, ops::mul(latent.stddev(l), noise)));
  }
  return z;
}

std::vector<Tensor> reparameterize(const GaussianLatent& latent, std::uint64_t seed) {
  Rng rng(seed);
  return reparameterize(latent, rng);
}

Tensor kl_term(const GaussianLatent& latent) {
  Tensor total;
  for (std::size_t l = 0; l < latent.layers(); ++l) {
    const Tensor& lv = latent.log_variance[l];
    // 0.5 * (mu^2 + exp(lv) - lv - 1)
    Tensor inner = ops::sub(ops::add(ops::square(latent.mean[l]), ops::exp(lv)), lv);
    Tensor layer = ops::mul_scalar(ops::add_scalar(inner, -1.0), 0.5);
    Tensor s = ops::sum(layer);
    total = total.defined() ? ops::add(total, s) : s;
  }
  return total;
}

ElboTerms elbo_terms(const VaeModel& model, const Tensor& images, std::size_t samples, double beta, Rng& rng) {
  if (samples < 1) throw std::invalid_argument("elbo: at least one Monte-Carlo sample is required");
  if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("elbo: beta must lie in [0,1]");
  const std::size_t n = images.dim(0);
  const double variance = model.obs_variance();
  const double pixels = static_cast<double>(model.pixels());
  const double inv_n = 1.0 / static_cast<double>(n);

  GaussianLatent latent = model.infer(images);
  Tensor squared_error;
  for (std::size_t k = 0; k < samples; ++k) {
    Tensor recon = model.generate(reparameterize(latent, rng));
    Tensor err = ops::sum(ops::square(ops::sub(images, recon)));
    squared_error = squared_error.defined() ? ops::add(squared_error, err) : err;
  }
  const double normalizer = 0.5 * pixels * std::log(2.0 * std::numbers::pi * variance);
  Tensor reconstruction = ops::add_scalar(
      ops::mul_scalar(squared_error, -inv_n / (2.0 * variance * static_cast<double>(samples))), -normalizer);
  Tensor kl = ops::mul_scalar(kl_term(latent), inv_n);
  Tensor total = ops::sub(reconstruction, ops::mul_scalar(kl, beta));
  return {total, reconstruction, kl};
}

ElboEstimate elbo(const VaeModel& model, const Tensor& images, std::size_t samples, double beta, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed);
  ElboTerms terms = elbo_terms(model, images, samples, beta, rng);
  return {terms.elbo.item(), terms.reconstruction.item(), terms.kl.item()};
}

std::vector<Tensor> split_latent_row(const VaeModel& model, const std::vector<double>& row) {
  if (row.size() != model.latent_dim()) {
    throw std::invalid_argument("latent vector has length " + std::to_string(row.size()) + ", model expects " +
                                std::to_string(model.latent_dim()));
  }
  std::vector<Tensor> z;
  std::size_t offset = 0;
  for (std::size_t size : model.latent_sizes()) {
    z.emplace_back(Shape{1, size}, std::vector<double>(row.begin() + offset, row.begin() + offset + size));
    offset += size;
  }
  return z;
}

}  // namespace duhiv

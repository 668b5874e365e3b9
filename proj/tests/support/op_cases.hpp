#pragma once

#include <functional>
#include <string>
#include <vector>

#include "duhiv/ops.hpp"
#include "gradcheck.hpp"

namespace duhiv::testkit {

struct OpCase {
  std::string name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> loss;
};

/// Reduces an op output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(out, random_tensor(out.shape(), rng)));
}

inline std::vector<OpCase> differentiable_op_cases() {
  using V = std::vector<Tensor>;
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, std::function<V(Rng&)> in, std::function<Tensor(const V&)> op) {
    cases.push_back({std::move(name), std::move(in), [op](const V& x) { return weighted_sum(op(x), 91); }});
  };

  add_case(
      "conv2d", [](Rng& r) { return V{random_tensor({2, 2, 5, 5}, r), random_tensor({3, 2, 3, 3}, r)}; },
      [](const V& x) { return ops::conv2d(x[0], x[1], 1, 0); });
  add_case(
      "conv2d_stride2_pad1", [](Rng& r) { return V{random_tensor({2, 2, 6, 5}, r), random_tensor({3, 2, 3, 3}, r)}; },
      [](const V& x) { return ops::conv2d(x[0], x[1], 2, 1); });
  add_case(
      "add_channel_bias", [](Rng& r) { return V{random_tensor({2, 3, 2, 2}, r), random_tensor({3}, r)}; },
      [](const V& x) { return ops::add_channel_bias(x[0], x[1]); });
  add_case(
      "upsample_nearest", [](Rng& r) { return V{random_tensor({2, 2, 3, 2}, r)}; },
      [](const V& x) { return ops::upsample_nearest(x[0], 2); });
  add_case(
      "concat_channels", [](Rng& r) { return V{random_tensor({2, 2, 2, 2}, r), random_tensor({2, 3, 2, 2}, r)}; },
      [](const V& x) { return ops::concat_channels(x[0], x[1]); });
  add_case(
      "concat_channels_list",
      [](Rng& r) { return V{random_tensor({1, 1, 2, 2}, r), random_tensor({1, 2, 2, 2}, r), random_tensor({1, 1, 2, 2}, r)}; },
      [](const V& x) { return ops::concat_channels(x); });
  add_case(
      "slice_channels", [](Rng& r) { return V{random_tensor({2, 4, 2, 2}, r)}; },
      [](const V& x) { return ops::slice_channels(x[0], 1, 3); });
  add_case(
      "dense_affine",
      [](Rng& r) { return V{random_tensor({3, 4}, r), random_tensor({4, 2}, r), random_tensor({2}, r)}; },
      [](const V& x) { return ops::dense_affine(x[0], x[1], x[2]); });
  add_case(
      "reshape", [](Rng& r) { return V{random_tensor({2, 6}, r)}; },
      [](const V& x) { return ops::reshape(x[0], {2, 3, 2}); });
  add_case(
      "relu", [](Rng& r) { return V{random_signed_tensor({3, 4}, r)}; }, [](const V& x) { return ops::relu(x[0]); });
  add_case(
      "sigmoid", [](Rng& r) { return V{random_tensor({3, 4}, r, -3, 3)}; },
      [](const V& x) { return ops::sigmoid(x[0]); });
  add_case(
      "exp", [](Rng& r) { return V{random_tensor({3, 4}, r)}; }, [](const V& x) { return ops::exp(x[0]); });
  add_case(
      "log", [](Rng& r) { return V{random_tensor({3, 4}, r, 0.2, 2.0)}; }, [](const V& x) { return ops::log(x[0]); });
  add_case(
      "square", [](Rng& r) { return V{random_tensor({3, 4}, r)}; }, [](const V& x) { return ops::square(x[0]); });
  add_case(
      "add", [](Rng& r) { return V{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
      [](const V& x) { return ops::add(x[0], x[1]); });
  add_case(
      "sub", [](Rng& r) { return V{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
      [](const V& x) { return ops::sub(x[0], x[1]); });
  add_case(
      "mul", [](Rng& r) { return V{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
      [](const V& x) { return ops::mul(x[0], x[1]); });
  add_case(
      "mul_scalar", [](Rng& r) { return V{random_tensor({2, 3}, r)}; },
      [](const V& x) { return ops::mul_scalar(x[0], -1.7); });
  add_case(
      "add_scalar", [](Rng& r) { return V{random_tensor({2, 3}, r)}; },
      [](const V& x) { return ops::add_scalar(x[0], 0.3); });
  add_case(
      "sum", [](Rng& r) { return V{random_tensor({2, 3}, r)}; },
      [](const V& x) { return ops::sum(ops::square(x[0])); });
  add_case(
      "mean", [](Rng& r) { return V{random_tensor({2, 3}, r)}; },
      [](const V& x) { return ops::mean(ops::square(x[0])); });
  add_case(
      "sum_per_row", [](Rng& r) { return V{random_tensor({3, 2, 2}, r)}; },
      [](const V& x) { return ops::sum_per_row(x[0]); });
  add_case(
      "conv_relu_sum",
      [](Rng& r) { return V{random_tensor({1, 2, 4, 4}, r), random_tensor({2, 2, 3, 3}, r)}; },
      [](const V& x) { return ops::relu(ops::conv2d(x[0], x[1], 1, 1)); });
  return cases;
}

}  // namespace duhiv::testkit

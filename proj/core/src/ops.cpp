#include "duhiv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>

namespace duhiv::ops {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// Eigen products and reductions only touch Eigen-owned (max-aligned) buffers.
RowMatrix aligned_copy(const double* data, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void add_into(double* dst, const RowMatrix& m) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

[[noreturn]] void shape_error(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, out_h, out_w;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_area() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox*stride + offset - pad lies inside [0, w).
std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t stride, std::size_t offset,
                                                std::size_t pad, std::size_t w) {
  std::size_t lo = 0;
  while (lo < out && lo * stride + offset < pad) ++lo;
  std::size_t hi = lo;
  while (hi < out && hi * stride + offset - pad < w) ++hi;
  return {lo, hi};
}

// Patch matrix of one sample: [C*kh*kw, out_h*out_w].
void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t cols = g.out_area();
  std::fill(col, col + g.patch() * cols, 0.0);
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        const auto [lo, hi] = valid_range(g.out_w, g.stride, kj, g.pad, g.w);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::size_t iy_shifted = oy * g.stride + ki;
          if (iy_shifted < g.pad || iy_shifted - g.pad >= g.h) continue;
          const double* src = plane + (iy_shifted - g.pad) * g.w;
          double* out = row + oy * g.out_w;
          for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = src[ox * g.stride + kj - g.pad];
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t cols = g.out_area();
  for (std::size_t c = 0; c < g.c; ++c) {
    double* plane = dx + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        const auto [lo, hi] = valid_range(g.out_w, g.stride, kj, g.pad, g.w);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::size_t iy_shifted = oy * g.stride + ki;
          if (iy_shifted < g.pad || iy_shifted - g.pad >= g.h) continue;
          double* dst = plane + (iy_shifted - g.pad) * g.w;
          const double* in = row + oy * g.out_w;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kj - g.pad] += in[ox];
        }
      }
    }
  }
}

template <typename F, typename D>
Tensor unary(const char* op, const Tensor& x, F forward, D derivative) {
  std::vector<double> out(x.size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return detail::make_result(op, x.shape(), std::move(out), {x}, [derivative](detail::Node& self) {
    auto& input = *self.inputs[0];
    if (!input.requires_grad) return;
    auto& g = input.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * derivative(input.values[i], self.values[i]);
  });
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  if (input.rank() != 4) shape_error("conv2d", "input must be [N,C,H,W], got " + shape_str(input.shape()));
  if (kernel.rank() != 4) shape_error("conv2d", "kernel must be [F,C,kh,kw], got " + shape_str(kernel.shape()));
  if (stride < 1) shape_error("conv2d", "stride must be >= 1");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                 kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
  if (kernel.dim(1) != g.c) shape_error("conv2d", "kernel channels do not match input channels");
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) shape_error("conv2d", "kernel larger than padded input");
  g.out_h = (g.h + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t in_size = g.c * g.h * g.w;
  const std::size_t out_size = g.f * g.out_area();
  RowMatrix col(g.patch(), g.out_area());
  RowMatrix y(g.f, g.out_area());
  const RowMatrix k = aligned_copy(kernel.values().data(), g.f, g.patch());
  std::vector<double> out(g.n * out_size);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, input.values().data() + n * in_size, col.data());
    y.noalias() = k * col;
    std::copy(y.data(), y.data() + out_size, out.data() + n * out_size);
  }

  return detail::make_result("conv2d", {g.n, g.f, g.out_h, g.out_w}, std::move(out), {input, kernel},
                             [g](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& k = *self.inputs[1];
    const std::size_t in_size = g.c * g.h * g.w;
    const std::size_t out_size = g.f * g.out_area();
    RowMatrix col(g.patch(), g.out_area());
    const RowMatrix kernel = aligned_copy(k.values.data(), g.f, g.patch());
    double* dk = k.requires_grad ? k.ensure_grad().data() : nullptr;
    double* dx = in.requires_grad ? in.ensure_grad().data() : nullptr;
    RowMatrix dk_sum = RowMatrix::Zero(dk ? g.f : 0, dk ? g.patch() : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
      const RowMatrix grad_out = aligned_copy(self.grad.data() + n * out_size, g.f, g.out_area());
      if (dk) {
        im2col(g, in.values.data() + n * in_size, col.data());
        dk_sum.noalias() += grad_out * col.transpose();
      }
      if (dx) {
        col.noalias() = kernel.transpose() * grad_out;
        col2im(g, col.data(), dx + n * in_size);
      }
    }
    if (dk) add_into(dk, dk_sum);
  });
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
  if (input.rank() < 2) shape_error("add_channel_bias", "input needs a channel axis");
  const std::size_t n = input.dim(0), c = input.dim(1);
  if (bias.size() != c) shape_error("add_channel_bias", "bias length does not match channel count");
  const std::size_t inner = input.size() / (n * c);
  std::vector<double> out(input.values().begin(), input.values().end());
  auto b = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < inner; ++j) out[(i * c + ch) * inner + j] += b[ch];
  return detail::make_result("add_channel_bias", input.shape(), std::move(out), {input, bias},
                             [n, c, inner](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& b = *self.inputs[1];
    if (in.requires_grad) {
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (b.requires_grad) {
      auto& g = b.ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < inner; ++j) g[ch] += self.grad[(i * c + ch) * inner + j];
    }
  });
}

Tensor upsample_nearest(const Tensor& input, std::size_t factor) {
  if (factor < 1) shape_error("upsample_nearest", "factor must be >= 1");
  if (input.rank() != 4) shape_error("upsample_nearest", "input must be [N,C,H,W]");
  const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<double> out(planes * oh * ow);
  auto in = input.values();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) out[(p * oh + y) * ow + x] = in[(p * h + y / factor) * w + x / factor];
  return detail::make_result("upsample_nearest", {input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                             [planes, h, w, factor](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    const std::size_t oh = h * factor, ow = w * factor;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) g[(p * h + y / factor) * w + x / factor] += self.grad[(p * oh + y) * ow + x];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) { return concat_channels(std::vector<Tensor>{a, b}); }

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat_channels", "no inputs");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) shape_error("concat_channels", "inputs need a channel axis");
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size() && s[0] == first[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == first[i];
    if (!ok) shape_error("concat_channels", "incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    channels.push_back(s[1]);
    total += s[1];
  }
  const std::size_t n = first[0];
  const std::size_t inner = shape_numel(first) / (first[0] * first[1] == 0 ? 1 : first[0] * first[1]);
  Shape shape = first;
  shape[1] = total;
  std::vector<double> out(n * total * inner);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const double* src = parts[p].values().data() + i * channels[p] * inner;
      std::copy(src, src + channels[p] * inner, out.data() + (i * total + offset) * inner);
      offset += channels[p];
    }
  }
  return detail::make_result("concat_channels", std::move(shape), std::move(out), parts,
                             [n, total, inner, channels](detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < channels.size(); ++p) {
      auto& part = *self.inputs[p];
      if (part.requires_grad) {
        auto& g = part.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const double* src = self.grad.data() + (i * total + offset) * inner;
          double* dst = g.data() + i * channels[p] * inner;
          for (std::size_t j = 0; j < channels[p] * inner; ++j) dst[j] += src[j];
        }
      }
      offset += channels[p];
    }
  });
}

Tensor slice_channels(const Tensor& input, std::size_t begin, std::size_t end) {
  if (input.rank() < 2) shape_error("slice_channels", "input needs a channel axis");
  const std::size_t n = input.dim(0), c = input.dim(1);
  if (begin >= end || end > c) shape_error("slice_channels", "invalid channel range");
  const std::size_t inner = input.size() / (n * c);
  const std::size_t width = end - begin;
  Shape shape = input.shape();
  shape[1] = width;
  std::vector<double> out(n * width * inner);
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = input.values().data() + (i * c + begin) * inner;
    std::copy(src, src + width * inner, out.data() + i * width * inner);
  }
  return detail::make_result("slice_channels", std::move(shape), std::move(out), {input},
                             [n, c, inner, begin, width](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < width * inner; ++j) g[(i * c + begin) * inner + j] += self.grad[i * width * inner + j];
  });
}

Tensor dense_affine(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 2 || weight.rank() != 2) shape_error("dense_affine", "expected input [N,D] and weight [D,E]");
  const std::size_t n = input.dim(0), d = input.dim(1), e = weight.dim(1);
  if (weight.dim(0) != d) {
    shape_error("dense_affine", "input " + shape_str(input.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  }
  if (bias.size() != e) shape_error("dense_affine", "bias length does not match output width");
  const RowMatrix y = aligned_copy(input.values().data(), n, d) * aligned_copy(weight.values().data(), d, e);
  std::vector<double> out(y.data(), y.data() + n * e);
  const auto b_values = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < e; ++j) out[i * e + j] += b_values[j];
  return detail::make_result("dense_affine", {n, e}, std::move(out), {input, weight, bias}, [n, d, e](detail::Node& self) {
    auto& in = *self.inputs[0];
    auto& w = *self.inputs[1];
    auto& b = *self.inputs[2];
    const RowMatrix g = aligned_copy(self.grad.data(), n, e);
    if (in.requires_grad) {
      const RowMatrix dx = g * aligned_copy(w.values.data(), d, e).transpose();
      add_into(in.ensure_grad().data(), dx);
    }
    if (w.requires_grad) {
      const RowMatrix dw = aligned_copy(in.values.data(), n, d).transpose() * g;
      add_into(w.ensure_grad().data(), dw);
    }
    if (b.requires_grad) {
      const RowMatrix db = g.colwise().sum();
      add_into(b.ensure_grad().data(), db);
    }
  });
}

Tensor reshape(const Tensor& input, Shape shape) {
  if (shape_numel(shape) != input.size()) {
    shape_error("reshape", "cannot reshape " + shape_str(input.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(input.values().begin(), input.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {input}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x,
               [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
               [](double, double out) { return out * (1.0 - out); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw NumericError("log: argument must be positive");
  }
  return unary("log", x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Tensor mul_scalar(const Tensor& x, double factor) {
  return unary("mul_scalar", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary("add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = *self.inputs[k];
      if (!in.requires_grad) continue;
      auto& g = in.ensure_grad();
      const double sign = k == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.values[i];
    }
    if (y.requires_grad) {
      auto& g = y.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.values[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return detail::make_result("sum", {}, {total}, {x}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) shape_error("mean", "empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_per_row(const Tensor& x) {
  if (x.rank() < 1 || x.dim(0) == 0) shape_error("sum_per_row", "needs a non-empty leading axis");
  const std::size_t n = x.dim(0), inner = x.size() / n;
  std::vector<double> out(n, 0.0);
  auto in = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i] += in[i * inner + j];
  return detail::make_result("sum_per_row", {n}, std::move(out), {x}, [n, inner](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < inner; ++j) g[i * inner + j] += self.grad[i];
  });
}

}  // namespace duhiv::ops

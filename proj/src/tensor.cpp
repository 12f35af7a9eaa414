#include "comatch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace comatch {

namespace {

size_t shape_product(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0f) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size())
    throw std::invalid_argument("tensor data size does not match shape");
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::string Tensor::shape_str() const {
  std::string s = "[";
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
              Padding padding, bool depthwise) {
  if (input.rank() != 3)
    throw std::invalid_argument("conv2d: input must be [H,W,C]");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  int k, cout;
  if (depthwise) {
    if (kernel.rank() != 3)
      throw std::invalid_argument("conv2d: depthwise kernel must be [k,k,C]");
    if (kernel.dim(0) != kernel.dim(1))
      throw std::invalid_argument("conv2d: kernel must be square");
    if (kernel.dim(2) != cin)
      throw std::invalid_argument("conv2d: kernel channels mismatch input");
    k = kernel.dim(0);
    cout = cin;
  } else {
    if (kernel.rank() != 4)
      throw std::invalid_argument("conv2d: kernel must be [k,k,Cin,Cout]");
    if (kernel.dim(0) != kernel.dim(1))
      throw std::invalid_argument("conv2d: kernel must be square");
    if (kernel.dim(2) != cin)
      throw std::invalid_argument("conv2d: kernel Cin mismatch input");
    k = kernel.dim(0);
    cout = kernel.dim(3);
  }

  int pad = 0;
  if (padding == Padding::kSame) {
    if (k % 2 == 0)
      throw std::invalid_argument("conv2d: same padding requires odd kernel");
    pad = (k - 1) / 2;
  } else if (h < k || w < k) {
    throw std::invalid_argument("conv2d: input smaller than kernel");
  }
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;

  Tensor out({oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int y0 = oy * stride - pad;
      const int x0 = ox * stride - pad;
      if (depthwise) {
        for (int c = 0; c < cin; ++c) {
          double acc = 0.0;
          for (int ky = 0; ky < k; ++ky) {
            const int y = y0 + ky;
            if (y < 0 || y >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int x = x0 + kx;
              if (x < 0 || x >= w) continue;
              acc += static_cast<double>(input.at(y, x, c)) *
                     kernel.at(ky, kx, c);
            }
          }
          out.at(oy, ox, c) = static_cast<float>(acc);
        }
      } else {
        for (int co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (int ky = 0; ky < k; ++ky) {
            const int y = y0 + ky;
            if (y < 0 || y >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int x = x0 + kx;
              if (x < 0 || x >= w) continue;
              for (int ci = 0; ci < cin; ++ci) {
                acc += static_cast<double>(input.at(y, x, ci)) *
                       kernel.at(ky, kx, ci, co);
              }
            }
          }
          out.at(oy, ox, co) = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

Tensor max_pool2d(const Tensor& input, int window) {
  if (input.rank() != 3)
    throw std::invalid_argument("max_pool2d: input must be [H,W,C]");
  if (window < 1) throw std::invalid_argument("max_pool2d: window must be >= 1");
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  if (h % window != 0 || w % window != 0)
    throw std::invalid_argument(
        "max_pool2d: spatial dims must be divisible by window");
  const int oh = h / window, ow = w / window;
  Tensor out({oh, ow, c});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int ch = 0; ch < c; ++ch) {
        float best = -std::numeric_limits<float>::infinity();
        for (int ky = 0; ky < window; ++ky)
          for (int kx = 0; kx < window; ++kx)
            best = std::max(best,
                            input.at(oy * window + ky, ox * window + kx, ch));
        out.at(oy, ox, ch) = best;
      }
  return out;
}

Tensor bilinear_resize(const Tensor& input, int out_h, int out_w) {
  if (input.rank() != 3)
    throw std::invalid_argument("bilinear_resize: input must be [H,W,C]");
  if (out_h < 1 || out_w < 1)
    throw std::invalid_argument("bilinear_resize: output dims must be >= 1");
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  Tensor out({out_h, out_w, c});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    double y0f = std::floor(fy);
    double wy = fy - y0f;
    int y0 = std::clamp(static_cast<int>(y0f), 0, h - 1);
    int y1 = std::clamp(static_cast<int>(y0f) + 1, 0, h - 1);
    if (fy < 0) { y0 = y1 = 0; wy = 0.0; }
    for (int ox = 0; ox < out_w; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      double x0f = std::floor(fx);
      double wx = fx - x0f;
      int x0 = std::clamp(static_cast<int>(x0f), 0, w - 1);
      int x1 = std::clamp(static_cast<int>(x0f) + 1, 0, w - 1);
      if (fx < 0) { x0 = x1 = 0; wx = 0.0; }
      for (int ch = 0; ch < c; ++ch) {
        double v00 = input.at(y0, x0, ch), v01 = input.at(y0, x1, ch);
        double v10 = input.at(y1, x0, ch), v11 = input.at(y1, x1, ch);
        double top = v00 + (v01 - v00) * wx;
        double bot = v10 + (v11 - v10) * wx;
        out.at(oy, ox, ch) = static_cast<float>(top + (bot - top) * wy);
      }
    }
  }
  return out;
}

Tensor softmax(const Tensor& input, int axis) {
  if (axis < 0 || axis >= input.rank())
    throw std::invalid_argument("softmax: axis out of range");
  const auto& shape = input.shape();
  int axis_n = shape[static_cast<size_t>(axis)];
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < input.rank(); ++i)
    inner *= shape[static_cast<size_t>(i)];

  Tensor out(input.shape());
  const float* src = input.data();
  float* dst = out.data();
  for (int o = 0; o < outer; ++o) {
    for (int in = 0; in < inner; ++in) {
      const size_t base = static_cast<size_t>(o) * axis_n * inner + in;
      float mx = -std::numeric_limits<float>::infinity();
      for (int a = 0; a < axis_n; ++a)
        mx = std::max(mx, src[base + static_cast<size_t>(a) * inner]);
      double sum = 0.0;
      for (int a = 0; a < axis_n; ++a) {
        double e = std::exp(static_cast<double>(
            src[base + static_cast<size_t>(a) * inner] - mx));
        dst[base + static_cast<size_t>(a) * inner] = static_cast<float>(e);
        sum += e;
      }
      for (int a = 0; a < axis_n; ++a)
        dst[base + static_cast<size_t>(a) * inner] =
            static_cast<float>(dst[base + static_cast<size_t>(a) * inner] / sum);
    }
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: operands must be rank-2");
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: inner dims mismatch " + a.shape_str() +
                                " x " + b.shape_str());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p)
        acc += static_cast<double>(a.at(i, p)) * b.at(p, j);
      out.at(i, j) = static_cast<float>(acc);
    }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 only");
  Tensor out({a.dim(1), a.dim(0)});
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor out = matmul(x, weight);
  if (!bias.empty()) {
    if (bias.rank() != 1 || bias.dim(0) != out.dim(1))
      throw std::invalid_argument("linear: bias shape mismatch");
    for (int i = 0; i < out.dim(0); ++i)
      for (int j = 0; j < out.dim(1); ++j) out.at(i, j) += bias.at(j);
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (int i = 0; i < x.size(); ++i)
    out.at(i) = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(x.at(i)))));
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (int i = 0; i < x.size(); ++i) out.at(i) = std::max(0.0f, x.at(i));
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: empty tensor");
  const int c = x.dim(x.rank() - 1);
  if (gain.size() != c || bias.size() != c)
    throw std::invalid_argument("layer_norm: gain/bias must match last axis");
  const int rows = x.size() / c;
  Tensor out(x.shape());
  const double eps = 1e-6;
  for (int r = 0; r < rows; ++r) {
    const float* src = x.data() + static_cast<size_t>(r) * c;
    float* dst = out.data() + static_cast<size_t>(r) * c;
    double mean = 0.0;
    for (int i = 0; i < c; ++i) mean += src[i];
    mean /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) {
      double d = src[i] - mean;
      var += d * d;
    }
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < c; ++i)
      dst[i] = static_cast<float>((src[i] - mean) * inv * gain.at(i) +
                                  bias.at(i));
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("add: shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out(a.shape());
  for (int i = 0; i < a.size(); ++i) out.at(i) = a.at(i) + b.at(i);
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("mul: shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  Tensor out(a.shape());
  for (int i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * b.at(i);
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out(a.shape());
  for (int i = 0; i < a.size(); ++i) out.at(i) = a.at(i) * s;
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3)
    throw std::invalid_argument("concat_channels: inputs must be [H,W,C]");
  if (a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1))
    throw std::invalid_argument("concat_channels: spatial dims mismatch");
  const int h = a.dim(0), w = a.dim(1), ca = a.dim(2), cb = b.dim(2);
  Tensor out({h, w, ca + cb});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ca; ++c) out.at(y, x, c) = a.at(y, x, c);
      for (int c = 0; c < cb; ++c) out.at(y, x, ca + c) = b.at(y, x, c);
    }
  return out;
}

}  // namespace comatch

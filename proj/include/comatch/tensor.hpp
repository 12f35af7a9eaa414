#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace comatch {

// Dense row-major float32 tensor. Spatial tensors are [H, W, C]; matrices
// are [rows, cols]. Desk-scale sizes only, so everything is a flat
// std::vector<float> with no views or strides.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor full(std::vector<int> shape, float value);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(data_.size()); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& at(int i) { return data_[static_cast<size_t>(i)]; }
  float at(int i) const { return data_[static_cast<size_t>(i)]; }
  float& at(int i, int j) {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  float at(int i, int j) const {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  float& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  float at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  float& at(int i, int j, int k, int l) {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) *
                     shape_[3] +
                 l];
  }
  float at(int i, int j, int k, int l) const {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) *
                     shape_[3] +
                 l];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

enum class Padding { kSame, kValid };

// input [H,W,Cin]; kernel [k,k,Cin,Cout], or [k,k,C] when depthwise.
// kSame requires odd k and zero-fills (k-1)/2 on each side; output dims
// follow floor((H + 2p - k)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride,
              Padding padding, bool depthwise = false);

// window w, stride w; H and W must be divisible by w.
Tensor max_pool2d(const Tensor& input, int window);

// align-corners-false: output (r, c) samples input at
// ((r + 0.5) * H / out_h - 0.5, (c + 0.5) * W / out_w - 0.5), edge-clamped.
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);

// numerically stabilized by max subtraction along `axis`
Tensor softmax(const Tensor& input, int axis);

Tensor matmul(const Tensor& a, const Tensor& b);   // [M,K] x [K,N]
Tensor transpose(const Tensor& a);                 // [M,N] -> [N,M]

// x [M,K], weight [K,N], bias [N] or empty
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);

// normalizes the last axis per leading index; gain/bias sized like that axis
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);       // elementwise
Tensor mul(const Tensor& a, const Tensor& b);       // elementwise
Tensor scale(const Tensor& a, float s);
Tensor concat_channels(const Tensor& a, const Tensor& b);  // [H,W,Ca]+[H,W,Cb]

}  // namespace comatch

#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "comatch/tensor.hpp"

namespace comatch {

struct ConvLayer {
  Tensor kernel;  // [k,k,Cin,Cout]
  Tensor bias;    // [Cout], zero-initialized
  int stride = 1;
};

// conv-relu-conv plus identity (or strided 1x1 projection) skip, relu after
// the add
struct ResidualBlock {
  ConvLayer conv1, conv2;
  ConvLayer proj;
  bool has_proj = false;
};

// Trimmed ResNet-18 trunk: 3x3 stem at full resolution (width 64), then
// three two-block stages at widths 64/128/256, each opening with stride 2.
struct BackboneParams {
  ConvLayer stem;
  std::array<std::array<ResidualBlock, 2>, 3> stages;
};

struct PyramidFeatures {
  Tensor f2;  // [H/2, W/2,  64]
  Tensor f4;  // [H/4, W/4, 128]
  Tensor f8;  // [H/8, W/8, 256]
};

// He fan-in normal kernels, zero biases; each layer draws from its own
// seed-derived stream.
BackboneParams init_backbone(uint64_t seed);

// image [H,W,1] with H, W divisible by 8
PyramidFeatures extract_features(const Tensor& image,
                                 const BackboneParams& params);

// TSR1 record per tensor plus a JSON manifest listing them
void save_backbone(const BackboneParams& params, const std::string& dir);
BackboneParams load_backbone(const std::string& dir);

// FNV-1a over the raw float32 bytes; used for golden regression values
uint64_t tensor_checksum(const Tensor& t);

}  // namespace comatch

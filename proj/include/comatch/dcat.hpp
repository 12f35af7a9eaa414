#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "comatch/tensor.hpp"

namespace comatch {

struct CovisibilityMap {
  Tensor scores;  // [h,w,1] in (0,1); exactly 1.0 at layer 1
  int layer = 0;
  char view = 'A';
};

struct AttentionParams {
  Tensor wq, wk, wv;  // [d,d]
  Tensor wo;          // [d,d], zero-initialized so an untrained block is identity
};

struct DcatLayerParams {
  // covisibility head: d -> d/2 -> 1, ReLU between, sigmoid output.
  // Layer 1 keeps these empty; its scores are the constant 1.
  Tensor covis_w1, covis_b1, covis_w2, covis_b2;
  Tensor condense_kernel;  // [s,s,d] depthwise, stride s
  Tensor condense_bias;    // [d]
  AttentionParams self_attn, cross_attn;
  // fusion: concat(features, upsampled) -> d, ReLU, -> d; residual add.
  Tensor fuse_w1, fuse_b1, fuse_w2, fuse_b2;
};

// 2x2 rotation frequencies for relative position encoding; half the pairs
// sweep x, half sweep y, geometric spacing.
struct RopeBasis {
  std::vector<std::array<float, 2>> freqs;  // size dh/2
};

struct DcatParams {
  int dim = 256;
  int heads = 8;
  int num_layers = 4;
  int window = 4;  // condensing factor s
  std::vector<DcatLayerParams> layers;
  RopeBasis rope;
};

DcatParams init_dcat(uint64_t seed, int dim = 256, int heads = 8,
                     int num_layers = 4, int window = 4);

// layer is 1-based; layer 1 short-circuits to the constant 1.0
CovisibilityMap predict_covisibility(const Tensor& features,
                                     const DcatLayerParams& lp, int layer);

// strided depthwise conv over covisibility-gated features
Tensor condense_query(const Tensor& features, const Tensor& covis,
                      const Tensor& kernel, const Tensor& bias, int window);

// per-window softmax over covisibility scores weighting the features
Tensor condense_key_value(const Tensor& features, const Tensor& covis,
                          int window);

// covisibility-free reduction: strided depthwise conv / max pooling
std::pair<Tensor, Tensor> baseline_condense(const Tensor& features,
                                            const Tensor& kernel,
                                            const Tensor& bias, int window);

Tensor aggregate_covisibility(const Tensor& covis, int window);  // window max

// q [n,dh], k/v [m,dh]; logits scaled by 1/sqrt(dh)
Tensor vanilla_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// same, with value rows scaled by the key tokens' covisibility c [m];
// rows are deliberately not renormalized
Tensor covis_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& c);

RopeBasis make_rope_basis(int head_dim);

// rotates consecutive feature pairs by freq . position per token;
// positions in reduced-grid cell units
Tensor rope_rotate(const Tensor& features,
                   const std::vector<std::array<float, 2>>& positions,
                   const RopeBasis& basis);

// q^T R(xj - xi) k, the relative-position attention logit
float rope_score(const float* q, const float* k, int head_dim, float dx,
                 float dy, const RopeBasis& basis);

struct DcatBlockOutput {
  Tensor features_a, features_b;
  CovisibilityMap covis_a, covis_b;
};

// one covisibility-guided transformer layer: predict covis, condense both
// streams, RoPE self-attention, cross-attention gated by the other view's
// reduced covis, upsample, fuse with residual
DcatBlockOutput dcat_block(const Tensor& features_a, const Tensor& features_b,
                           const DcatParams& params, int layer);

struct DcatResult {
  Tensor features_a, features_b;
  // per-layer covisibility history for layers 2..L (layer 1 is constant)
  std::vector<CovisibilityMap> covis_a, covis_b;
};

DcatResult run_dcat(const Tensor& features_a, const Tensor& features_b,
                    const DcatParams& params);

}  // namespace comatch

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "comatch/backbone.hpp"
#include "comatch/dcat.hpp"
#include "comatch/tensor.hpp"

namespace comatch {

struct CoarseMatch {
  int a_index = -1;  // row-major cell index in the 1/8 grid of view A
  int b_index = -1;
  float score = 0.0f;
};

// rows of both feature sets are L2-normalized, then scores are
// tau * <fa_i, fb_j>; accepts [h,w,d] or [n,d]
Tensor correlation_matrix(const Tensor& fa, const Tensor& fb, float tau);

// softmax over rows times softmax over columns, elementwise
Tensor dual_softmax(const Tensor& corr);

// mutual-nearest-neighbor cells with score >= threshold; ties broken
// toward the lowest index
std::vector<CoarseMatch> mnn_filter(const Tensor& scores, float threshold);

struct FineParams {
  // progressive decoder to a full-resolution 64-channel map:
  // 1/8 -> 1/4 (concat f4), 1/4 -> 1/2 (concat f2), 1/2 -> 1/1
  ConvLayer dec1;  // [3,3,384,128]
  ConvLayer dec2;  // [3,3,192,64]
  ConvLayer dec3;  // [3,3,64,64]
  AttentionParams consolidate;  // bidirectional patch cross-attention, d=64
  int heads = 4;
  int window = 8;
  float softmax_temp = 10.0f;  // sharpness of the stage-2 3x3 soft-argmax
};

FineParams init_fine(uint64_t seed);

Tensor fuse_fine(const Tensor& coarse, const Tensor& f4, const Tensor& f2,
                 const FineParams& params);

struct PatchPair {
  Tensor a, b;          // [w,w,64]
  int ax0 = 0, ay0 = 0; // patch origin, full-resolution pixels
  int bx0 = 0, by0 = 0;
  CoarseMatch parent;
};

// cuts window x window patches centered on the matched cell anchors and
// runs one bidirectional cross-attention residual between each pair;
// matches whose patch would cross an image border are dropped and counted
std::vector<PatchPair> crop_and_consolidate(const Tensor& fine_a,
                                            const Tensor& fine_b,
                                            const std::vector<CoarseMatch>& matches,
                                            const FineParams& params,
                                            int grid_w_a, int grid_w_b,
                                            int* border_dropped);

struct Stage1Result {
  int ax = 0, ay = 0;  // intra-patch integer positions
  int bx = 0, by = 0;
  float score = 0.0f;
  bool low_confidence = false;  // no mutual max above threshold 0
};

// mutual nearest neighbor over the w^2 x w^2 patch correlation; falls back
// to the patch centers when no pair clears a positive score
Stage1Result stage1_refine(const PatchPair& pair);

// softmax expectation over a 3x3 score patch, offsets in {-1,0,1}^2
std::pair<double, double> soft_argmax3x3(const float scores[9]);

struct FineMatch {
  double xa = 0.0, ya = 0.0;  // subpixel, full-resolution pixel units
  double xb = 0.0, yb = 0.0;
  int s1_xa = 0, s1_ya = 0;   // stage-1 integer positions
  int s1_xb = 0, s1_yb = 0;
  CoarseMatch parent;
  float score = 0.0f;
  bool low_confidence = false;
  bool clamped = false;  // stage-2 window hit an image border
};

// averages the two stage-1 descriptors, correlates against both 3x3
// neighborhoods, and applies the soft-argmax on each side
FineMatch stage2_refine(const Tensor& fine_a, const Tensor& fine_b,
                        const PatchPair& pair, const Stage1Result& s1,
                        float softmax_temp);

}  // namespace comatch

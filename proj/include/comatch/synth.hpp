#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "comatch/geometry.hpp"
#include "comatch/tensor.hpp"

namespace comatch {

enum class TextureKind { kChecker, kValueNoise };

// textured plane in view A's camera frame; rays are z-buffered against the
// whole list, nearest hit wins
struct PlaneSpec {
  Vec3 origin;
  Vec3 u_axis, v_axis;  // orthonormal, in-plane
  Vec3 normal;          // u x v
  bool bounded = false;
  double u_min = 0.0, u_max = 0.0, v_min = 0.0, v_max = 0.0;
  TextureKind texture = TextureKind::kValueNoise;
  uint32_t texture_id = 0;
  double checker_size = 0.15;  // world units per checker square
};

struct PoseRange {
  double max_rotation_deg = 10.0;
  double min_baseline = 0.3;
  double max_baseline = 0.8;
};

struct SceneBundle {
  Tensor image_a, image_b;  // [H,W,1] in [0,1]
  TwoViewGeometry geometry;
  std::vector<PlaneSpec> planes;  // empty when loaded from disk
  bool has_homography = false;
  Mat3 homography;  // pixel A -> pixel B, valid when has_homography
  uint64_t seed = 0;
};

// Single tilted plane seen from two poses; the induced homography is
// recorded. Poses that put the plane behind either camera are regenerated,
// up to 10 attempts before throwing.
SceneBundle make_planar_scene(uint64_t seed, int height, int width,
                              const PoseRange& range, TextureKind texture);

// fronto-parallel plane and a sideways camera shift tuned so view B is
// view A translated by exactly (dx_px, dy_px) pixels
SceneBundle make_shifted_planar_scene(uint64_t seed, int height, int width,
                                      double dx_px, double dy_px);

// two intersecting planes at different depths; the structure is
// non-coplanar, which pose estimation from point matches requires
SceneBundle make_dual_plane_scene(uint64_t seed, int height, int width);

// An unbounded backdrop plus floating square slabs at assorted depths,
// seen from a long fixating baseline. The depth relief conditions
// essential-matrix estimation far better than any near-planar layout.
SceneBundle make_blocks_scene(uint64_t seed, int height, int width);

// background plane plus a floating rectangle placed outside view A's
// frustum but inside view B's, so part of the background is occluded in B
// only
SceneBundle make_occlusion_scene(uint64_t seed, int height, int width);

// consistency audit: warp round-trip within 1e-4 px, homography agreement
// within 1e-6 px where present, depths positive, pixels in [0,1]; throws
// with a description on the first violation. Every generator runs this
// before returning.
void audit_scene(const SceneBundle& scene);

// Unit-norm sinusoidal codes of the 3-D points behind each 1/8 grid anchor;
// both views share one frequency bank, so the same 3-D point gives an
// identical code in either view. Cells without cross-view support receive
// seeded random unit codes instead. Returns [gh,gw,dim] for views A and B.
std::pair<Tensor, Tensor> oracle_features(const SceneBundle& scene, int dim,
                                          double rel_tol = 0.2, int cell = 8);

// Full-resolution variant with gentler frequencies: correlation stays
// smooth within a pixel but falls off within a few, which is what the
// subpixel refinement stages need. Returns [H,W,dim].
std::pair<Tensor, Tensor> oracle_fine_features(const SceneBundle& scene,
                                               int dim);

// scene directory layout: imageA.pgm, imageB.pgm, depthA.tsr, depthB.tsr,
// geometry.json
void write_scene(const SceneBundle& scene, const std::string& dir);
SceneBundle load_scene(const std::string& dir);

// swaps the two views (images, depths, intrinsics, inverted pose)
SceneBundle swapped_scene(const SceneBundle& scene);

}  // namespace comatch

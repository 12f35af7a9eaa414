#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "comatch/tensor.hpp"

namespace comatch {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a.x + b.x, a.y + b.y, a.z + b.z};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a.x - b.x, a.y - b.y, a.z - b.z};
}
inline Vec3 operator*(double s, const Vec3& a) {
  return {s * a.x, s * a.y, s * a.z};
}
double dot(const Vec3& a, const Vec3& b);
Vec3 cross(const Vec3& a, const Vec3& b);
double norm(const Vec3& a);
Vec3 normalized(const Vec3& a);

// row-major 3x3
struct Mat3 {
  std::array<double, 9> m{};

  double& operator()(int r, int c) { return m[static_cast<size_t>(r) * 3 + c]; }
  double operator()(int r, int c) const {
    return m[static_cast<size_t>(r) * 3 + c];
  }
  static Mat3 identity();
};

Mat3 operator*(const Mat3& a, const Mat3& b);
Vec3 operator*(const Mat3& a, const Vec3& v);
Mat3 transposed(const Mat3& a);
Mat3 skew(const Vec3& t);
double det(const Mat3& a);
Mat3 inverse(const Mat3& a);  // throws on singular input

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
};

// camera B pose relative to A: X_B = R * X_A + t
struct RelativePose {
  Mat3 rotation;
  Vec3 translation;
};

// Symmetric eigen-decomposition by cyclic Jacobi sweeps; eigenvalues in
// descending order, eigenvectors as matching columns. Converges when all
// off-diagonals fall below 1e-12 relative to the diagonal scale; capped at
// 100 sweeps.
void jacobi_eigen_sym(const std::vector<double>& a, int n,
                      std::vector<double>& eigenvalues,
                      std::vector<double>& eigenvectors);

// Full 3x3 SVD built on the symmetric Jacobi solver: a = u * diag(sigma) *
// v^T with orthogonal u, v and sigma descending and non-negative. Left
// columns whose singular value is numerically zero are completed
// orthogonally, so their sign is arbitrary.
void svd3(const Mat3& a, Mat3& u, Vec3& sigma, Mat3& v);

Mat3 essential_from_pose(const RelativePose& pose);

// First-order geometric (Sampson) squared distance for normalized image
// points (z=1 implicit). Returns +inf when the gradient denominator
// vanishes (both epipolar line normals zero).
double sampson_distance(const Vec2& pa, const Vec2& pb, const Mat3& e);

// d(sampson)/d(xa, ya, xb, yb), analytic
std::array<double, 4> sampson_gradient(const Vec2& pa, const Vec2& pb,
                                       const Mat3& e);

struct WarpResult {
  Vec2 point;            // pixel coords in view B
  double depth = 0.0;    // projected depth in view B
  bool in_front = false; // depth > 0 in both views
};

// backproject pixel (view A, given depth) -> transform -> project to B
WarpResult warp_point(const Vec2& pixel_a, double depth_a,
                      const CameraIntrinsics& ka, const CameraIntrinsics& kb,
                      const RelativePose& pose);

struct TwoViewGeometry {
  CameraIntrinsics ka, kb;
  RelativePose pose;     // A -> B
  Tensor depth_a;        // [H,W,1], metric depth, 0 = invalid
  Tensor depth_b;
};

// One 0/1 entry per cell of the 1/8 grid of view A (anchors at
// (8c+4, 8r+4)). A cell is covisible when its warped anchor lands inside
// view B in front of the camera and the projected depth agrees with view
// B's depth map within rel_tol (nearest-pixel lookup).
Tensor covisibility_labels(const TwoViewGeometry& geom, int cell,
                           double rel_tol);

// Ground-truth coarse correspondences between the two 1/8 grids: warp each
// covisible A anchor, snap to the nearest B cell, keep at most one A cell
// per B cell (smallest snap distance wins, lower A index on ties).
std::vector<std::pair<int, int>> gt_coarse_matches(const TwoViewGeometry& geom,
                                                   int cell, double rel_tol);

struct RansacResult {
  Mat3 essential;
  std::vector<char> inlier_mask;
  int inlier_count = 0;
  bool ok = false;
  std::string failure;  // set when ok == false
};

// Normalized 8-point inside a Sampson-scored RANSAC loop. Matches are pixel
// coordinates; threshold_px converts to normalized units via the mean focal
// length. Minimal samples with a deficient constraint-matrix null space
// (collinear or single-plane picks) are skipped. Deterministic per seed.
RansacResult estimate_essential_ransac(const std::vector<Vec2>& pts_a,
                                       const std::vector<Vec2>& pts_b,
                                       const CameraIntrinsics& ka,
                                       const CameraIntrinsics& kb,
                                       int iterations, double threshold_px,
                                       uint64_t seed);

struct DecomposeResult {
  RelativePose pose;
  int cheirality_votes = 0;
  bool degenerate = false;  // near-zero parallax, translation unreliable
};

// Standard four-candidate decomposition with a cheirality vote over the
// given normalized correspondences; translation is unit-norm.
DecomposeResult decompose_essential(const Mat3& e,
                                    const std::vector<Vec2>& pts_a_norm,
                                    const std::vector<Vec2>& pts_b_norm);

// Levenberg-damped Gauss-Newton over the 5-DOF pose manifold (rotation
// increment + translation direction), minimizing the summed Sampson
// distance of the given normalized correspondences. Polishes the linear
// eight-point estimate to near the noise floor; a zero-residual input pose
// is a fixed point.
RelativePose refine_pose_sampson(const RelativePose& init,
                                 const std::vector<Vec2>& pts_a_norm,
                                 const std::vector<Vec2>& pts_b_norm,
                                 int max_iterations = 30);

// max(rotation geodesic angle, translation direction angle), degrees.
// Translation direction is compared without sign symmetry; gt translations
// near zero make the direction term undefined and throw.
double pose_error_deg(const RelativePose& estimate, const RelativePose& gt);

// Exact area under the step-function cumulative recall curve, normalized by
// each threshold. Errors may exceed all thresholds; the list must be
// non-empty.
std::vector<double> pose_auc(const std::vector<double>& errors_deg,
                             const std::vector<double>& thresholds_deg);

// DLT homography (>=4 points, Hartley-normalized); used noiselessly and
// inside a 4-point RANSAC.
Mat3 dlt_homography(const std::vector<Vec2>& pts_a,
                    const std::vector<Vec2>& pts_b);

struct HomographyResult {
  Mat3 h;
  std::vector<char> inlier_mask;
  int inlier_count = 0;
  bool ok = false;
  std::string failure;
};

HomographyResult estimate_homography_ransac(const std::vector<Vec2>& pts_a,
                                            const std::vector<Vec2>& pts_b,
                                            int iterations,
                                            double threshold_px,
                                            uint64_t seed);

// mean distance between the four image corners mapped by both homographies
double homography_corner_error(const Mat3& estimate, const Mat3& gt,
                               int width, int height);

Vec2 apply_homography(const Mat3& h, const Vec2& p);

// geometry.json (intrinsics, row-major rotation, translation, TSR1 depth
// refs, optional homography, seed)
void write_geometry_json(const std::string& path, const TwoViewGeometry& geom,
                         const std::string& depth_a_ref,
                         const std::string& depth_b_ref,
                         const Mat3* homography, uint64_t seed);
TwoViewGeometry read_geometry_json(const std::string& path,
                                   bool* has_homography = nullptr,
                                   Mat3* homography = nullptr,
                                   uint64_t* seed = nullptr);

}  // namespace comatch

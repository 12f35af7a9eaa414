#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "comatch/geometry.hpp"
#include "comatch/rng.hpp"
#include "comatch/tensor.hpp"
#include "comatch/tensor_io.hpp"
#include "doctest.h"

using namespace comatch;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

Mat3 rot_axis_angle(Vec3 axis, double deg) {
  axis = normalized(axis);
  double th = deg * kPi / 180.0;
  Mat3 k = skew(axis);
  Mat3 k2 = k * k;
  Mat3 r = Mat3::identity();
  for (size_t i = 0; i < 9; ++i)
    r.m[i] += std::sin(th) * k.m[i] + (1.0 - std::cos(th)) * k2.m[i];
  return r;
}

struct Correspondences {
  std::vector<Vec2> a_norm, b_norm;  // normalized image coordinates
  std::vector<Vec2> a_px, b_px;      // pixel coordinates
};

// random points in a frustum-shaped box, projected into both views
Correspondences project_points(const RelativePose& pose,
                               const CameraIntrinsics& k, int n,
                               uint64_t seed) {
  Correspondences out;
  Rng rng(seed);
  while (static_cast<int>(out.a_norm.size()) < n) {
    Vec3 xa{rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2),
            rng.uniform(2.5, 6.0)};
    Vec3 xb = pose.rotation * xa + pose.translation;
    if (xb.z < 0.2) continue;
    Vec2 pa{xa.x / xa.z, xa.y / xa.z};
    Vec2 pb{xb.x / xb.z, xb.y / xb.z};
    out.a_norm.push_back(pa);
    out.b_norm.push_back(pb);
    out.a_px.push_back({k.fx * pa.x + k.cx, k.fy * pa.y + k.cy});
    out.b_px.push_back({k.fx * pb.x + k.cx, k.fy * pb.y + k.cy});
  }
  return out;
}

double frobenius_gap_up_to_scale(const Mat3& a, const Mat3& b) {
  double na = 0.0, nb = 0.0;
  for (size_t i = 0; i < 9; ++i) {
    na += a.m[i] * a.m[i];
    nb += b.m[i] * b.m[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  double plus = 0.0, minus = 0.0;
  for (size_t i = 0; i < 9; ++i) {
    double da = a.m[i] / na, db = b.m[i] / nb;
    plus += (da - db) * (da - db);
    minus += (da + db) * (da + db);
  }
  return std::sqrt(std::min(plus, minus));
}

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra primitives
// ---------------------------------------------------------------------------

TEST_CASE("skew matrix reproduces the cross product") {
  Vec3 a{0.3, -1.2, 2.0}, b{1.5, 0.4, -0.7};
  Vec3 via_skew = skew(a) * b;
  Vec3 direct = cross(a, b);
  CHECK(via_skew.x == doctest::Approx(direct.x).epsilon(1e-12));
  CHECK(via_skew.y == doctest::Approx(direct.y).epsilon(1e-12));
  CHECK(via_skew.z == doctest::Approx(direct.z).epsilon(1e-12));
}

TEST_CASE("matrix inverse and determinant behave on a known matrix") {
  Mat3 m;
  m(0, 0) = 2.0;
  m(1, 1) = 3.0;
  m(2, 2) = 4.0;
  m(0, 1) = 1.0;
  CHECK(det(m) == doctest::Approx(24.0).epsilon(1e-12));
  Mat3 inv = inverse(m);
  Mat3 prod = inv * m;
  Mat3 eye = Mat3::identity();
  for (size_t i = 0; i < 9; ++i)
    CHECK(prod.m[i] == doctest::Approx(eye.m[i]).epsilon(1e-12));
  Mat3 singular;  // all zeros
  CHECK_THROWS_AS(inverse(singular), std::invalid_argument);
}

TEST_CASE("symmetric eigen-solver recovers a diagonal spectrum in order") {
  std::vector<double> a = {3.0, 0.0, 0.0,   //
                           0.0, -1.0, 0.0,  //
                           0.0, 0.0, 7.0};
  std::vector<double> vals, vecs;
  jacobi_eigen_sym(a, 3, vals, vecs);
  REQUIRE(vals.size() == 3);
  CHECK(vals[0] == doctest::Approx(7.0).epsilon(1e-12));
  CHECK(vals[1] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(vals[2] == doctest::Approx(-1.0).epsilon(1e-12));
  // leading eigenvector is +-e_z
  CHECK(std::abs(vecs[2 * 3 + 0]) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK_THROWS_AS(jacobi_eigen_sym(std::vector<double>(5, 0.0), 2, vals, vecs),
                  std::invalid_argument);
}

TEST_CASE("symmetric eigen-solver satisfies the eigen equation on random "
          "matrices") {
  Rng rng(71);
  const int n = 5;
  std::vector<double> a(static_cast<size_t>(n * n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      double v = rng.uniform(-2.0, 2.0);
      a[static_cast<size_t>(i * n + j)] = v;
      a[static_cast<size_t>(j * n + i)] = v;
    }
  std::vector<double> vals, vecs;
  jacobi_eigen_sym(a, n, vals, vecs);
  for (int k = 0; k + 1 < n; ++k) CHECK(vals[static_cast<size_t>(k)] >=
                                        vals[static_cast<size_t>(k + 1)]);
  for (int k = 0; k < n; ++k) {
    for (int i = 0; i < n; ++i) {
      double av = 0.0;
      for (int j = 0; j < n; ++j)
        av += a[static_cast<size_t>(i * n + j)] *
              vecs[static_cast<size_t>(j * n + k)];
      CHECK(av == doctest::Approx(vals[static_cast<size_t>(k)] *
                                  vecs[static_cast<size_t>(i * n + k)])
                      .epsilon(1e-9)
                      .scale(1.0));
    }
    // orthonormal columns
    for (int k2 = 0; k2 <= k; ++k2) {
      double d = 0.0;
      for (int i = 0; i < n; ++i)
        d += vecs[static_cast<size_t>(i * n + k)] *
             vecs[static_cast<size_t>(i * n + k2)];
      CHECK(d == doctest::Approx(k == k2 ? 1.0 : 0.0).epsilon(1e-10).scale(1.0));
    }
  }
}

TEST_CASE("3x3 SVD reconstructs its input with ordered singular values") {
  Rng rng(73);
  for (int trial = 0; trial < 10; ++trial) {
    Mat3 a;
    for (size_t i = 0; i < 9; ++i) a.m[i] = rng.uniform(-2.0, 2.0);
    Mat3 u, v;
    Vec3 s;
    svd3(a, u, s, v);
    CHECK(s.x >= s.y);
    CHECK(s.y >= s.z);
    CHECK(s.z >= -1e-12);
    // orthogonality
    Mat3 utu = transposed(u) * u;
    Mat3 vtv = transposed(v) * v;
    Mat3 eye = Mat3::identity();
    for (size_t i = 0; i < 9; ++i) {
      CHECK(utu.m[i] == doctest::Approx(eye.m[i]).epsilon(1e-10).scale(1.0));
      CHECK(vtv.m[i] == doctest::Approx(eye.m[i]).epsilon(1e-10).scale(1.0));
    }
    // reconstruction
    Mat3 sd;
    sd(0, 0) = s.x;
    sd(1, 1) = s.y;
    sd(2, 2) = s.z;
    Mat3 rec = u * sd * transposed(v);
    for (size_t i = 0; i < 9; ++i)
      CHECK(rec.m[i] == doctest::Approx(a.m[i]).epsilon(1e-9).scale(1.0));
  }
}

// ---------------------------------------------------------------------------
// essential matrix and epipolar residuals
// ---------------------------------------------------------------------------

TEST_CASE("essential matrix of a pure x-translation") {
  RelativePose pose{Mat3::identity(), {1.0, 0.0, 0.0}};
  Mat3 e = essential_from_pose(pose);
  double want[9] = {0, 0, 0, 0, 0, -1, 0, 1, 0};
  for (size_t i = 0; i < 9; ++i)
    CHECK(e.m[i] == doctest::Approx(want[i]).epsilon(1e-15));
}

TEST_CASE("projected correspondences satisfy the epipolar constraint and the "
          "essential matrix is rank deficient") {
  RelativePose pose{rot_axis_angle({0.2, 1.0, -0.3}, 7.0), {0.4, -0.1, 0.08}};
  Mat3 e = essential_from_pose(pose);
  CHECK(std::abs(det(e)) < 1e-12);
  CameraIntrinsics k{120.0, 120.0, 63.5, 63.5};
  Correspondences c = project_points(pose, k, 40, 2024);
  for (int i = 0; i < 40; ++i) {
    Vec3 pa{c.a_norm[static_cast<size_t>(i)].x,
            c.a_norm[static_cast<size_t>(i)].y, 1.0};
    Vec3 pb{c.b_norm[static_cast<size_t>(i)].x,
            c.b_norm[static_cast<size_t>(i)].y, 1.0};
    CHECK(std::abs(dot(pb, e * pa)) < 1e-12);
    CHECK(sampson_distance(c.a_norm[static_cast<size_t>(i)],
                           c.b_norm[static_cast<size_t>(i)], e) < 1e-20);
  }
}

TEST_CASE("worked first-order epipolar distance: 0.1 normalized offset gives "
          "0.005") {
  RelativePose pose{Mat3::identity(), {1.0, 0.0, 0.0}};
  Mat3 e = essential_from_pose(pose);
  double d = sampson_distance({0.0, 0.0}, {0.0, 0.1}, e);
  CHECK(d == doctest::Approx(0.005).epsilon(1e-9));
}

TEST_CASE("the epipolar distance is invariant to the matrix scale") {
  RelativePose pose{rot_axis_angle({0.0, 1.0, 0.2}, 5.0), {0.7, 0.1, -0.05}};
  Mat3 e = essential_from_pose(pose);
  Mat3 e3 = e;
  for (size_t i = 0; i < 9; ++i) e3.m[i] *= 3.0;
  Vec2 pa{0.12, -0.03}, pb{0.02, 0.18};
  CHECK(sampson_distance(pa, pb, e) ==
        doctest::Approx(sampson_distance(pa, pb, e3)).epsilon(1e-12));
}

TEST_CASE("the epipolar distance is symmetric under swapping views with the "
          "transposed matrix") {
  RelativePose pose{rot_axis_angle({1.0, 0.4, 0.0}, 9.0), {0.3, 0.5, 0.1}};
  Mat3 e = essential_from_pose(pose);
  Rng rng(81);
  for (int i = 0; i < 25; ++i) {
    Vec2 pa{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    Vec2 pb{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    double fwd = sampson_distance(pa, pb, e);
    double rev = sampson_distance(pb, pa, transposed(e));
    CHECK(fwd == doctest::Approx(rev).epsilon(1e-12));
    // gradients mirror the same symmetry: (xa, ya) <-> (xb, yb)
    auto g = sampson_gradient(pa, pb, e);
    auto gr = sampson_gradient(pb, pa, transposed(e));
    CHECK(g[0] == doctest::Approx(gr[2]).epsilon(1e-7).scale(1.0));
    CHECK(g[1] == doctest::Approx(gr[3]).epsilon(1e-7).scale(1.0));
    CHECK(g[2] == doctest::Approx(gr[0]).epsilon(1e-7).scale(1.0));
    CHECK(g[3] == doctest::Approx(gr[1]).epsilon(1e-7).scale(1.0));
  }
}

TEST_CASE("a vanishing epipolar numerator zeroes the gradient") {
  RelativePose pose{rot_axis_angle({0.0, 1.0, 0.0}, 6.0), {0.5, 0.0, 0.1}};
  Mat3 e = essential_from_pose(pose);
  CameraIntrinsics k{100.0, 100.0, 50.0, 50.0};
  Correspondences c = project_points(pose, k, 5, 4040);
  for (int i = 0; i < 5; ++i) {
    auto g = sampson_gradient(c.a_norm[static_cast<size_t>(i)],
                              c.b_norm[static_cast<size_t>(i)], e);
    for (double v : g) CHECK(std::abs(v) < 1e-9);
  }
}

TEST_CASE("finite differences confirm the epipolar distance gradient") {
  RelativePose pose{rot_axis_angle({0.3, 1.0, 0.1}, 8.0), {0.4, 0.2, -0.1}};
  Mat3 e = essential_from_pose(pose);
  Rng rng(91);
  const double h = 1e-6;
  for (int i = 0; i < 10; ++i) {
    Vec2 pa{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    Vec2 pb{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    auto g = sampson_gradient(pa, pb, e);
    auto eval = [&](double dxa, double dya, double dxb, double dyb) {
      return sampson_distance({pa.x + dxa, pa.y + dya},
                              {pb.x + dxb, pb.y + dyb}, e);
    };
    double fd[4] = {
        (eval(h, 0, 0, 0) - eval(-h, 0, 0, 0)) / (2 * h),
        (eval(0, h, 0, 0) - eval(0, -h, 0, 0)) / (2 * h),
        (eval(0, 0, h, 0) - eval(0, 0, -h, 0)) / (2 * h),
        (eval(0, 0, 0, h) - eval(0, 0, 0, -h)) / (2 * h),
    };
    for (int j = 0; j < 4; ++j) {
      double denom = std::max({1e-9, std::abs(fd[j]),
                               std::abs(g[static_cast<size_t>(j)])});
      CHECK(std::abs(fd[j] - g[static_cast<size_t>(j)]) / denom < 1e-4);
    }
  }
}

TEST_CASE("a doubly degenerate epipolar configuration yields infinity and the "
          "gradient refuses it") {
  Mat3 e;  // both line normals vanish at the origin for this matrix
  e(2, 2) = 1.0;
  Vec2 origin{0.0, 0.0};
  CHECK(std::isinf(sampson_distance(origin, origin, e)));
  CHECK_THROWS_AS(sampson_gradient(origin, origin, e), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// warping and grid-level ground truth
// ---------------------------------------------------------------------------

TEST_CASE("warping through the identity pose returns the same pixel") {
  CameraIntrinsics k{100.0, 100.0, 32.0, 32.0};
  WarpResult w = warp_point({10.0, 20.0}, 2.0, k, k,
                            {Mat3::identity(), {0.0, 0.0, 0.0}});
  CHECK(w.in_front);
  CHECK(w.point.x == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(w.point.y == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(w.depth == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("warping under a forward step scales the offset from the principal "
          "point") {
  CameraIntrinsics k{100.0, 100.0, 32.0, 32.0};
  RelativePose pose{Mat3::identity(), {0.0, 0.0, -1.0}};  // camera B 1 closer
  WarpResult w = warp_point({42.0, 32.0}, 2.0, k, k, pose);
  CHECK(w.in_front);
  CHECK(w.depth == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w.point.x == doctest::Approx(52.0).epsilon(1e-12));
  CHECK(w.point.y == doctest::Approx(32.0).epsilon(1e-12));

  RelativePose behind{Mat3::identity(), {0.0, 0.0, -3.0}};
  CHECK_FALSE(warp_point({42.0, 32.0}, 2.0, k, k, behind).in_front);
}

namespace {

TwoViewGeometry flat_geometry(int h, int w, CameraIntrinsics ka,
                              CameraIntrinsics kb) {
  TwoViewGeometry g;
  g.ka = ka;
  g.kb = kb;
  g.pose = {Mat3::identity(), {0.0, 0.0, 0.0}};
  g.depth_a = Tensor::full({h, w, 1}, 1.0f);
  g.depth_b = Tensor::full({h, w, 1}, 1.0f);
  return g;
}

}  // namespace

TEST_CASE("identity geometry marks every cell covisible and matches it to "
          "itself") {
  CameraIntrinsics k{80.0, 80.0, 31.5, 31.5};
  TwoViewGeometry g = flat_geometry(64, 64, k, k);
  Tensor labels = covisibility_labels(g, 8, 0.2);
  REQUIRE(labels.shape() == std::vector<int>{8, 8, 1});
  for (int i = 0; i < labels.size(); ++i) CHECK(labels.at(i) == 1.0f);
  auto matches = gt_coarse_matches(g, 8, 0.2);
  REQUIRE(matches.size() == 64);
  for (int i = 0; i < 64; ++i) {
    CHECK(matches[static_cast<size_t>(i)].first == i);
    CHECK(matches[static_cast<size_t>(i)].second == i);
  }
}

TEST_CASE("a half-frame principal shift marks exactly the out-of-view columns "
          "non-covisible") {
  CameraIntrinsics ka{80.0, 80.0, 31.5, 31.5};
  CameraIntrinsics kb = ka;
  kb.cx -= 32.0;  // view B sees everything 32 px to the left
  TwoViewGeometry g = flat_geometry(64, 64, ka, kb);
  Tensor labels = covisibility_labels(g, 8, 0.2);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      float want = (8 * c + 4 - 32 >= 0) ? 1.0f : 0.0f;
      CHECK(labels.at(r, c, 0) == want);
    }
}

TEST_CASE("a depth disagreement in one quadrant clears its covisibility "
          "labels") {
  CameraIntrinsics k{80.0, 80.0, 31.5, 31.5};
  TwoViewGeometry g = flat_geometry(64, 64, k, k);
  // something much nearer occupies view B's upper-left quadrant
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) g.depth_b.at(y, x, 0) = 0.5f;
  Tensor labels = covisibility_labels(g, 8, 0.2);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      float want = (r <= 3 && c <= 3) ? 0.0f : 1.0f;
      CHECK(labels.at(r, c, 0) == want);
    }
}

TEST_CASE("grid matches under a half-resolution view deduplicate to the "
          "lowest source index") {
  CameraIntrinsics ka{80.0, 80.0, 31.5, 31.5};
  CameraIntrinsics kb{40.0, 40.0, 15.75, 15.75};  // warp halves every pixel
  TwoViewGeometry g = flat_geometry(64, 64, ka, kb);
  auto matches = gt_coarse_matches(g, 8, 0.2);
  // four source cells tie per target cell; the smallest row-major index wins
  REQUIRE(matches.size() == 16);
  for (const auto& [ai, bi] : matches) {
    int bi_r = bi / 8, bi_c = bi % 8;
    CHECK(ai == 16 * bi_r + 2 * bi_c);
    CHECK(bi_r < 4);
    CHECK(bi_c < 4);
  }
}

// ---------------------------------------------------------------------------
// robust estimation
// ---------------------------------------------------------------------------

TEST_CASE("robust eight-point recovery on clean correspondences") {
  RelativePose pose{rot_axis_angle({0.1, 1.0, 0.05}, 6.0), {0.5, 0.12, -0.04}};
  CameraIntrinsics k{150.0, 150.0, 63.5, 63.5};
  Correspondences c = project_points(pose, k, 60, 555);
  RansacResult res = estimate_essential_ransac(c.a_px, c.b_px, k, k, 50, 0.5,
                                               99);
  REQUIRE(res.ok);
  CHECK(res.inlier_count == 60);
  Mat3 e_gt = essential_from_pose(pose);
  CHECK(frobenius_gap_up_to_scale(res.essential, e_gt) < 1e-3);
}

TEST_CASE("robust estimation survives half the matches being wrong") {
  RelativePose pose{rot_axis_angle({0.0, 1.0, 0.15}, 8.0), {0.6, -0.05, 0.1}};
  CameraIntrinsics k{150.0, 150.0, 63.5, 63.5};
  Correspondences c = project_points(pose, k, 50, 777);
  Rng rng(778);
  std::vector<char> truth(100, 1);
  for (int i = 0; i < 50; ++i) {
    // half the set: b-side points drawn uniformly over the image
    c.a_px.push_back({rng.uniform(2.0, 125.0), rng.uniform(2.0, 125.0)});
    c.b_px.push_back({rng.uniform(2.0, 125.0), rng.uniform(2.0, 125.0)});
    truth[static_cast<size_t>(50 + i)] = 0;
  }
  // at 50% contamination a clean 8-point sample appears once in ~256 draws,
  // so the iteration budget has to be comfortably above that
  RansacResult res = estimate_essential_ransac(c.a_px, c.b_px, k, k, 2000, 0.5,
                                               4242);
  REQUIRE(res.ok);
  int wrong = 0;
  for (int i = 0; i < 100; ++i)
    if ((res.inlier_mask[static_cast<size_t>(i)] != 0) !=
        (truth[static_cast<size_t>(i)] != 0))
      ++wrong;
  CHECK(wrong <= 2);  // <= 2% misclassification
  // every genuine correspondence must be kept
  for (int i = 0; i < 50; ++i)
    CHECK(res.inlier_mask[static_cast<size_t>(i)] == 1);
}

TEST_CASE("collinear correspondences are reported as a failure, not a crash") {
  CameraIntrinsics k{100.0, 100.0, 63.5, 63.5};
  std::vector<Vec2> pa, pb;
  for (int i = 0; i < 20; ++i) {
    double x = 10.0 + 5.0 * i;
    pa.push_back({x, 40.0});
    pb.push_back({x + 3.0, 40.0});
  }
  RansacResult res = estimate_essential_ransac(pa, pb, k, k, 100, 0.5, 5);
  CHECK_FALSE(res.ok);
  CHECK_FALSE(res.failure.empty());
}

TEST_CASE("robust estimation validates its inputs") {
  CameraIntrinsics k{100.0, 100.0, 50.0, 50.0};
  std::vector<Vec2> seven(7, Vec2{1.0, 1.0});
  CHECK_THROWS_AS(
      estimate_essential_ransac(seven, seven, k, k, 10, 0.5, 1),
      std::invalid_argument);
  std::vector<Vec2> eight(8, Vec2{1.0, 1.0});
  std::vector<Vec2> nine(9, Vec2{1.0, 1.0});
  CHECK_THROWS_AS(estimate_essential_ransac(eight, nine, k, k, 10, 0.5, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(estimate_essential_ransac(eight, eight, k, k, 0, 0.5, 1),
                  std::invalid_argument);
}

TEST_CASE("robust estimation is deterministic for a fixed seed") {
  RelativePose pose{rot_axis_angle({0.2, 1.0, 0.0}, 5.0), {0.4, 0.1, 0.0}};
  CameraIntrinsics k{150.0, 150.0, 63.5, 63.5};
  Correspondences c = project_points(pose, k, 40, 888);
  RansacResult r1 = estimate_essential_ransac(c.a_px, c.b_px, k, k, 80, 0.5,
                                              31337);
  RansacResult r2 = estimate_essential_ransac(c.a_px, c.b_px, k, k, 80, 0.5,
                                              31337);
  REQUIRE(r1.ok);
  REQUIRE(r2.ok);
  CHECK(r1.inlier_count == r2.inlier_count);
  CHECK(r1.inlier_mask == r2.inlier_mask);
  for (size_t i = 0; i < 9; ++i) CHECK(r1.essential.m[i] == r2.essential.m[i]);
}

// ---------------------------------------------------------------------------
// pose decomposition, refinement, and error metrics
// ---------------------------------------------------------------------------

TEST_CASE("decomposition recovers the true pose from an exact essential "
          "matrix") {
  RelativePose pose{rot_axis_angle({0.3, 1.0, -0.1}, 7.0),
                    normalized({0.8, 0.2, -0.1})};
  Mat3 e = essential_from_pose(pose);
  CameraIntrinsics k{120.0, 120.0, 63.5, 63.5};
  Correspondences c = project_points(pose, k, 30, 10101);
  DecomposeResult d = decompose_essential(e, c.a_norm, c.b_norm);
  CHECK_FALSE(d.degenerate);
  CHECK(d.cheirality_votes == 30);
  CHECK(pose_error_deg(d.pose, pose) < 0.01);

  // the sign of the matrix must not matter
  Mat3 neg = e;
  for (size_t i = 0; i < 9; ++i) neg.m[i] = -neg.m[i];
  DecomposeResult dn = decompose_essential(neg, c.a_norm, c.b_norm);
  CHECK(pose_error_deg(dn.pose, pose) < 0.01);

  CHECK_THROWS_AS(decompose_essential(e, {}, {}), std::invalid_argument);
}

TEST_CASE("pure-rotation correspondences are flagged degenerate") {
  Mat3 r = rot_axis_angle({0.0, 1.0, 0.0}, 5.0);
  std::vector<Vec2> pa, pb;
  Rng rng(2121);
  for (int i = 0; i < 24; ++i) {
    Vec2 a{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    Vec3 d = r * Vec3{a.x, a.y, 1.0};
    pa.push_back(a);
    pb.push_back({d.x / d.z, d.y / d.z});
  }
  // any translation direction is epipolar-consistent with rotation-only data
  Mat3 e = essential_from_pose({r, {1.0, 0.0, 0.0}});
  DecomposeResult d = decompose_essential(e, pa, pb);
  CHECK(d.degenerate);
  // the rotation itself is still identified
  RelativePose rot_only{r, d.pose.translation};
  CHECK(pose_error_deg(d.pose, rot_only) < 0.01);
}

TEST_CASE("pose refinement keeps an exact pose fixed and repairs a perturbed "
          "one") {
  RelativePose gt{rot_axis_angle({0.25, 1.0, 0.1}, 6.0),
                  normalized({0.7, 0.15, -0.08})};
  CameraIntrinsics k{140.0, 140.0, 63.5, 63.5};
  Correspondences c = project_points(gt, k, 80, 30303);

  RelativePose fixed = refine_pose_sampson(gt, c.a_norm, c.b_norm);
  CHECK(pose_error_deg(fixed, gt) < 1e-6);

  RelativePose off = gt;
  off.rotation = rot_axis_angle({1.0, 0.2, 0.0}, 1.0) * gt.rotation;
  off.translation = normalized(rot_axis_angle({0.0, 0.0, 1.0}, 2.0) *
                               gt.translation);
  CHECK(pose_error_deg(off, gt) > 0.9);
  RelativePose polished = refine_pose_sampson(off, c.a_norm, c.b_norm);
  CHECK(pose_error_deg(polished, gt) < 0.01);

  std::vector<Vec2> five(c.a_norm.begin(), c.a_norm.begin() + 4);
  CHECK_THROWS_AS(refine_pose_sampson(gt, five, c.b_norm),
                  std::invalid_argument);
}

TEST_CASE("pose error is the larger of rotation and translation angles") {
  RelativePose gt{Mat3::identity(), {1.0, 0.0, 0.0}};
  RelativePose five_deg{rot_axis_angle({0.0, 0.0, 1.0}, 5.0), {1.0, 0.0, 0.0}};
  CHECK(pose_error_deg(five_deg, gt) == doctest::Approx(5.0).epsilon(1e-6));

  RelativePose flipped{Mat3::identity(), {-1.0, 0.0, 0.0}};
  CHECK(pose_error_deg(flipped, gt) == doctest::Approx(180.0).epsilon(1e-9));

  RelativePose tilted{Mat3::identity(), {0.0, 1.0, 0.0}};
  CHECK(pose_error_deg(tilted, gt) == doctest::Approx(90.0).epsilon(1e-9));

  RelativePose no_translation{Mat3::identity(), {0.0, 0.0, 0.0}};
  CHECK_THROWS_AS(pose_error_deg(gt, no_translation), std::invalid_argument);
}

TEST_CASE("area under the recall curve follows the exact step integral") {
  // a single error at 5 degrees: recall is 0 until 5, then 1
  auto auc = pose_auc({5.0}, {10.0});
  REQUIRE(auc.size() == 1);
  CHECK(auc[0] == doctest::Approx(0.5).epsilon(1e-12));

  auto best = pose_auc({0.0}, {10.0});
  CHECK(best[0] == doctest::Approx(1.0).epsilon(1e-12));

  auto none = pose_auc({20.0}, {10.0});
  CHECK(none[0] == doctest::Approx(0.0).epsilon(1e-12));

  auto mixed = pose_auc({1.0, 3.0, 11.0}, {5.0, 10.0});
  REQUIRE(mixed.size() == 2);
  // recall steps to 1/3 at 1 degree and 2/3 at 3 degrees
  CHECK(mixed[0] == doctest::Approx(2.0 / 5.0).epsilon(1e-12));
  CHECK(mixed[1] == doctest::Approx(8.0 / 15.0).epsilon(1e-12));

  CHECK_THROWS_AS(pose_auc({}, {10.0}), std::invalid_argument);
  CHECK_THROWS_AS(pose_auc({1.0}, {0.0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// homographies
// ---------------------------------------------------------------------------

namespace {

Mat3 example_homography() {
  // mild projective map built from rotation + translation + slight keystone
  Mat3 h = Mat3::identity();
  h(0, 0) = 0.95;
  h(0, 1) = 0.05;
  h(0, 2) = 4.0;
  h(1, 0) = -0.04;
  h(1, 1) = 1.02;
  h(1, 2) = -2.5;
  h(2, 0) = 1e-4;
  h(2, 1) = -8e-5;
  return h;
}

}  // namespace

TEST_CASE("direct linear transform reproduces an exact homography") {
  Mat3 h = example_homography();
  std::vector<Vec2> pa, pb;
  Rng rng(717);
  for (int i = 0; i < 12; ++i) {
    Vec2 p{rng.uniform(5.0, 120.0), rng.uniform(5.0, 120.0)};
    pa.push_back(p);
    pb.push_back(apply_homography(h, p));
  }
  Mat3 est = dlt_homography(pa, pb);
  CHECK(homography_corner_error(est, h, 128, 128) < 1e-6);

  std::vector<Vec2> three(pa.begin(), pa.begin() + 3);
  std::vector<Vec2> three_b(pb.begin(), pb.begin() + 3);
  CHECK_THROWS_AS(dlt_homography(three, three_b), std::invalid_argument);

  std::vector<Vec2> line_a, line_b;
  for (int i = 0; i < 6; ++i) {
    line_a.push_back({10.0 + 7.0 * i, 20.0});
    line_b.push_back({12.0 + 7.0 * i, 25.0});
  }
  CHECK_THROWS_AS(dlt_homography(line_a, line_b), std::invalid_argument);
}

TEST_CASE("a pure two-pixel shift has corner error exactly two") {
  Mat3 shift = Mat3::identity();
  shift(0, 2) = 2.0;
  CHECK(homography_corner_error(shift, Mat3::identity(), 128, 128) ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("robust homography estimation rejects planted outliers") {
  Mat3 h = example_homography();
  std::vector<Vec2> pa, pb;
  Rng rng(919);
  for (int i = 0; i < 40; ++i) {
    Vec2 p{rng.uniform(5.0, 120.0), rng.uniform(5.0, 120.0)};
    pa.push_back(p);
    pb.push_back(apply_homography(h, p));
  }
  for (int i = 0; i < 20; ++i) {
    pa.push_back({rng.uniform(5.0, 120.0), rng.uniform(5.0, 120.0)});
    pb.push_back({rng.uniform(5.0, 120.0), rng.uniform(5.0, 120.0)});
  }
  HomographyResult res = estimate_homography_ransac(pa, pb, 200, 1.0, 27);
  REQUIRE(res.ok);
  CHECK(homography_corner_error(res.h, h, 128, 128) < 0.1);
  for (int i = 0; i < 40; ++i)
    CHECK(res.inlier_mask[static_cast<size_t>(i)] == 1);
  int false_in = 0;
  for (int i = 40; i < 60; ++i)
    if (res.inlier_mask[static_cast<size_t>(i)]) ++false_in;
  CHECK(false_in <= 1);
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

TEST_CASE("two-view geometry JSON round trip preserves every field") {
  fs::path dir = fs::temp_directory_path() / "comatch_geomjson_test";
  fs::create_directories(dir);
  TwoViewGeometry g;
  g.ka = {101.0, 102.0, 63.25, 62.75};
  g.kb = {99.0, 98.5, 64.0, 63.0};
  g.pose = {rot_axis_angle({0.2, 0.9, 0.1}, 11.0), {0.31, -0.12, 0.05}};
  g.depth_a = Tensor::full({16, 16, 1}, 2.5f);
  g.depth_b = Tensor::full({16, 16, 1}, 3.25f);
  g.depth_b.at(3, 4, 0) = 0.0f;
  write_tensor((dir / "depthA.tsr").string(), g.depth_a);
  write_tensor((dir / "depthB.tsr").string(), g.depth_b);
  Mat3 h = example_homography();
  write_geometry_json((dir / "geometry.json").string(), g, "depthA.tsr",
                      "depthB.tsr", &h, 424242);

  bool has_h = false;
  Mat3 h2;
  uint64_t seed = 0;
  TwoViewGeometry r = read_geometry_json((dir / "geometry.json").string(),
                                         &has_h, &h2, &seed);
  CHECK(has_h);
  CHECK(seed == 424242);
  CHECK(r.ka.fx == g.ka.fx);
  CHECK(r.ka.cy == g.ka.cy);
  CHECK(r.kb.fy == g.kb.fy);
  for (size_t i = 0; i < 9; ++i) {
    CHECK(r.pose.rotation.m[i] == g.pose.rotation.m[i]);
    CHECK(h2.m[i] == h.m[i]);
  }
  CHECK(r.pose.translation.y == g.pose.translation.y);
  REQUIRE(r.depth_a.shape() == g.depth_a.shape());
  for (int i = 0; i < r.depth_a.size(); ++i) {
    CHECK(r.depth_a.at(i) == g.depth_a.at(i));
    CHECK(r.depth_b.at(i) == g.depth_b.at(i));
  }

  // without a homography the flag must come back false
  write_geometry_json((dir / "plain.json").string(), g, "depthA.tsr",
                      "depthB.tsr", nullptr, 1);
  bool has_h2 = true;
  read_geometry_json((dir / "plain.json").string(), &has_h2, nullptr, nullptr);
  CHECK_FALSE(has_h2);

  CHECK_THROWS_AS(read_geometry_json((dir / "missing.json").string()),
                  std::runtime_error);
  fs::remove_all(dir);
}

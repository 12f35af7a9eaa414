#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <utility>
#include <vector>

#include "comatch/geometry.hpp"
#include "comatch/matcher.hpp"
#include "comatch/synth.hpp"
#include "comatch/tensor.hpp"
#include "doctest.h"

using namespace comatch;
namespace fs = std::filesystem;

namespace {

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (int i = 0; i < a.size(); ++i)
    if (a.at(i) != b.at(i)) return false;
  return true;
}

double cell_dot(const Tensor& fa, int ia, const Tensor& fb, int ib) {
  const int d = fa.dim(2);
  const int wa = fa.dim(1), wb = fb.dim(1);
  double s = 0.0;
  for (int c = 0; c < d; ++c)
    s += static_cast<double>(fa.at(ia / wa, ia % wa, c)) *
         fb.at(ib / wb, ib % wb, c);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// generator basics
// ---------------------------------------------------------------------------

TEST_CASE("scene generation is bit-deterministic per seed and varies across "
          "seeds") {
  SceneBundle s1 = make_planar_scene(5, 64, 64, PoseRange{},
                                     TextureKind::kValueNoise);
  SceneBundle s2 = make_planar_scene(5, 64, 64, PoseRange{},
                                     TextureKind::kValueNoise);
  CHECK(tensors_equal(s1.image_a, s2.image_a));
  CHECK(tensors_equal(s1.image_b, s2.image_b));
  CHECK(tensors_equal(s1.geometry.depth_a, s2.geometry.depth_a));
  for (size_t i = 0; i < 9; ++i)
    CHECK(s1.geometry.pose.rotation.m[i] == s2.geometry.pose.rotation.m[i]);

  SceneBundle s3 = make_planar_scene(6, 64, 64, PoseRange{},
                                     TextureKind::kValueNoise);
  CHECK_FALSE(tensors_equal(s1.image_a, s3.image_a));
}

TEST_CASE("every generator satisfies its own consistency audit") {
  // audit_scene re-runs warp round-trips, depth positivity, pixel ranges
  CHECK_NOTHROW(audit_scene(make_planar_scene(11, 64, 64, PoseRange{},
                                              TextureKind::kChecker)));
  CHECK_NOTHROW(audit_scene(make_shifted_planar_scene(12, 64, 64, 2.5, 0.5)));
  CHECK_NOTHROW(audit_scene(make_dual_plane_scene(13, 128, 128)));
  CHECK_NOTHROW(audit_scene(make_blocks_scene(14, 128, 128)));
  CHECK_NOTHROW(audit_scene(make_occlusion_scene(15, 128, 128)));
}

TEST_CASE("a zero shift produces two identical views") {
  SceneBundle scene = make_shifted_planar_scene(21, 64, 64, 0.0, 0.0);
  CHECK(tensors_equal(scene.image_a, scene.image_b));
  CHECK(tensors_equal(scene.geometry.depth_a, scene.geometry.depth_b));
}

TEST_CASE("the shifted scene's homography is exactly the requested pixel "
          "translation") {
  SceneBundle scene = make_shifted_planar_scene(22, 64, 64, 2.5, 0.5);
  REQUIRE(scene.has_homography);
  Mat3 want = Mat3::identity();
  want(0, 2) = 2.5;
  want(1, 2) = 0.5;
  CHECK(homography_corner_error(scene.homography, want, 64, 64) < 1e-9);
  // and the depth/pose warp agrees with it
  Vec2 center{31.5, 31.5};
  double depth = scene.geometry.depth_a.at(31, 31, 0);
  WarpResult w = warp_point(center, depth, scene.geometry.ka,
                            scene.geometry.kb, scene.geometry.pose);
  CHECK(w.in_front);
  CHECK(w.point.x == doctest::Approx(34.0).epsilon(1e-4));
  CHECK(w.point.y == doctest::Approx(32.0).epsilon(1e-4));
}

TEST_CASE("pixel values and depths stay inside their contracts") {
  for (SceneBundle scene : {make_dual_plane_scene(31, 128, 128),
                            make_blocks_scene(32, 128, 128)}) {
    int valid = 0;
    for (int i = 0; i < scene.image_a.size(); ++i) {
      CHECK(scene.image_a.at(i) >= 0.0f);
      CHECK(scene.image_a.at(i) <= 1.0f);
      float d = scene.geometry.depth_a.at(i);
      CHECK(d >= 0.0f);
      if (d > 0.0f) ++valid;
    }
    CHECK(valid > scene.image_a.size() * 9 / 10);
    // enough cross-view overlap for supervision to exist
    Tensor labels = covisibility_labels(scene.geometry, 8, 0.2);
    double frac = 0.0;
    for (int i = 0; i < labels.size(); ++i) frac += labels.at(i);
    CHECK(frac / labels.size() >= 0.5);
  }
}

TEST_CASE("the occlusion scene hides a region of view A's background in "
          "view B only") {
  SceneBundle scene = make_occlusion_scene(41, 128, 128);
  Tensor labels = covisibility_labels(scene.geometry, 8, 0.2);
  int zeros = 0, ones = 0;
  for (int i = 0; i < labels.size(); ++i) {
    if (labels.at(i) == 0.0f) ++zeros;
    if (labels.at(i) == 1.0f) ++ones;
  }
  CHECK(zeros + ones == labels.size());  // labels are strictly binary
  CHECK(zeros >= labels.size() / 20);    // the occluder covers real area
  CHECK(zeros <= labels.size() / 2);     // but not the whole frame
  CHECK(ones > 0);
}

// ---------------------------------------------------------------------------
// oracle descriptors
// ---------------------------------------------------------------------------

TEST_CASE("matched grid cells carry identical oracle codes when anchors warp "
          "exactly onto anchors") {
  // an 8 px shift maps each anchor of view A onto the next-column anchor of
  // view B, i.e. the very same 3-D point
  SceneBundle scene = make_shifted_planar_scene(51, 128, 128, 8.0, 0.0);
  auto [fa, fb] = oracle_features(scene, 32);
  REQUIRE(fa.shape() == std::vector<int>{16, 16, 32});
  auto gt = gt_coarse_matches(scene.geometry, 8, 0.2);
  REQUIRE(gt.size() >= 16 * 15u);
  for (const auto& [ia, ib] : gt) {
    CHECK(ib == ia + 1);  // next column, same row
    CHECK(cell_dot(fa, ia, fb, ib) == doctest::Approx(1.0).epsilon(1e-5));
  }
  // codes a full cell apart have visibly lower correlation
  CHECK(cell_dot(fa, 5 * 16 + 5, fb, 5 * 16 + 5) < 0.9);
  // per-cell codes are unit length
  for (int i : {0, 37, 255}) CHECK(cell_dot(fa, i, fa, i) ==
                                    doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("coarse matching on oracle codes recovers the ground truth exactly "
          "when anchors align") {
  // anchors of A map onto anchors of B, so every covisible cell pair shares
  // a 3-D point and carries identical codes: matching is exact
  SceneBundle scene = make_shifted_planar_scene(51, 128, 128, 8.0, 0.0);
  auto [fa, fb] = oracle_features(scene, 32);
  auto gt = gt_coarse_matches(scene.geometry, 8, 0.2);
  Tensor probs = dual_softmax(correlation_matrix(fa, fb, 10.0f));
  auto found = mnn_filter(probs, 0.1f);

  std::set<std::pair<int, int>> gt_set(gt.begin(), gt.end());
  std::set<std::pair<int, int>> found_set;
  for (const CoarseMatch& m : found) found_set.insert({m.a_index, m.b_index});
  CHECK(found_set == gt_set);
}

TEST_CASE("coarse matching on oracle codes stays geometrically consistent "
          "under fractional warps") {
  // warped anchors land between B cells here, so the assignment mass can
  // split across the two nearest columns and recall is only partial; what
  // the construction does guarantee is that everything found is real
  SceneBundle scene = make_planar_scene(42, 128, 128, PoseRange{},
                                        TextureKind::kValueNoise);
  auto [fa, fb] = oracle_features(scene, 64);
  auto gt = gt_coarse_matches(scene.geometry, 8, 0.2);
  const TwoViewGeometry& g = scene.geometry;
  Tensor probs = dual_softmax(correlation_matrix(fa, fb, 10.0f));
  auto found = mnn_filter(probs, 0.1f);

  std::set<std::pair<int, int>> gt_set(gt.begin(), gt.end());
  size_t recovered = 0;
  for (const CoarseMatch& m : found) {
    if (gt_set.count({m.a_index, m.b_index})) ++recovered;
    // each match must warp to within 1.5 cells of its claimed B anchor
    double ax = (m.a_index % 16) * 8 + 4, ay = (m.a_index / 16) * 8 + 4;
    double d = g.depth_a.at(static_cast<int>(ay), static_cast<int>(ax), 0);
    REQUIRE(d > 0.0);
    WarpResult w = warp_point({ax, ay}, d, g.ka, g.kb, g.pose);
    CHECK(w.in_front);
    double bx = (m.b_index % 16) * 8 + 4, by = (m.b_index / 16) * 8 + 4;
    CHECK(std::hypot(w.point.x - bx, w.point.y - by) <= 12.0);
  }
  CHECK(found.size() >= 100);
  CHECK(recovered * 2 >= gt.size());  // at least half of the ground truth
}

TEST_CASE("full-resolution oracle codes decay over a few pixels") {
  SceneBundle scene = make_shifted_planar_scene(61, 64, 64, 0.0, 0.0);
  auto [fa, fb] = oracle_fine_features(scene, 64);
  REQUIRE(fa.shape() == std::vector<int>{64, 64, 64});
  // identical views: the same pixel backs the same 3-D point
  for (int p : {5 * 64 + 5, 30 * 64 + 40}) {
    CHECK(cell_dot(fa, p, fb, p) == doctest::Approx(1.0).epsilon(1e-5));
  }
  // correlation at three pixels' distance has fallen well below one
  double near = cell_dot(fa, 30 * 64 + 40, fb, 30 * 64 + 41);
  double far = cell_dot(fa, 30 * 64 + 40, fb, 30 * 64 + 43);
  CHECK(near > far);
  CHECK(far < 0.9);
}

// ---------------------------------------------------------------------------
// persistence and view swapping
// ---------------------------------------------------------------------------

TEST_CASE("a scene survives the directory round trip") {
  SceneBundle scene = make_planar_scene(71, 64, 64, PoseRange{},
                                        TextureKind::kValueNoise);
  fs::path dir = fs::temp_directory_path() / "comatch_scene_roundtrip";
  fs::remove_all(dir);
  write_scene(scene, dir.string());
  CHECK(fs::exists(dir / "imageA.pgm"));
  CHECK(fs::exists(dir / "imageB.pgm"));
  CHECK(fs::exists(dir / "depthA.tsr"));
  CHECK(fs::exists(dir / "depthB.tsr"));
  CHECK(fs::exists(dir / "geometry.json"));

  SceneBundle loaded = load_scene(dir.string());
  // images pass through one 8-bit quantization
  REQUIRE(loaded.image_a.same_shape(scene.image_a));
  for (int i = 0; i < loaded.image_a.size(); ++i)
    CHECK(std::abs(loaded.image_a.at(i) - scene.image_a.at(i)) <=
          0.5f / 255.0f + 1e-6f);
  // depths and geometry are exact
  CHECK(tensors_equal(loaded.geometry.depth_a, scene.geometry.depth_a));
  CHECK(tensors_equal(loaded.geometry.depth_b, scene.geometry.depth_b));
  for (size_t i = 0; i < 9; ++i)
    CHECK(loaded.geometry.pose.rotation.m[i] ==
          scene.geometry.pose.rotation.m[i]);
  CHECK(loaded.geometry.ka.fx == scene.geometry.ka.fx);
  CHECK(loaded.seed == scene.seed);
  REQUIRE(loaded.has_homography);
  for (size_t i = 0; i < 9; ++i)
    CHECK(loaded.homography.m[i] == scene.homography.m[i]);

  // writing the loaded scene again produces byte-identical images
  fs::path dir2 = fs::temp_directory_path() / "comatch_scene_roundtrip2";
  fs::remove_all(dir2);
  write_scene(loaded, dir2.string());
  SceneBundle twice = load_scene(dir2.string());
  CHECK(tensors_equal(twice.image_a, loaded.image_a));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("swapping the views inverts the pose exactly") {
  SceneBundle scene = make_dual_plane_scene(81, 128, 128);
  SceneBundle sw = swapped_scene(scene);
  CHECK(tensors_equal(sw.image_a, scene.image_b));
  CHECK(tensors_equal(sw.image_b, scene.image_a));
  CHECK(tensors_equal(sw.geometry.depth_a, scene.geometry.depth_b));
  CHECK(sw.geometry.ka.fx == scene.geometry.kb.fx);
  CHECK_NOTHROW(audit_scene(sw));

  // compose pose with swapped pose: must be the identity motion
  Mat3 rr = sw.geometry.pose.rotation * scene.geometry.pose.rotation;
  Mat3 eye = Mat3::identity();
  for (size_t i = 0; i < 9; ++i)
    CHECK(rr.m[i] == doctest::Approx(eye.m[i]).epsilon(1e-12).scale(1.0));
  Vec3 t_round = sw.geometry.pose.rotation * scene.geometry.pose.translation +
                 sw.geometry.pose.translation;
  CHECK(std::abs(t_round.x) < 1e-12);
  CHECK(std::abs(t_round.y) < 1e-12);
  CHECK(std::abs(t_round.z) < 1e-12);

  SceneBundle back = swapped_scene(sw);
  CHECK(tensors_equal(back.image_a, scene.image_a));
  for (size_t i = 0; i < 9; ++i)
    CHECK(back.geometry.pose.rotation.m[i] ==
          doctest::Approx(scene.geometry.pose.rotation.m[i]).epsilon(1e-15));
}

#include "comatch/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "comatch/rng.hpp"
#include "comatch/tensor_io.hpp"

namespace comatch {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

// fixed permutation of 0..63 driving the value-noise lattice hash
constexpr int kPerm[64] = {
    23, 7,  41, 58, 12, 36, 0,  50, 19, 62, 5,  29, 44, 11, 55, 33,
    2,  48, 17, 60, 9,  38, 26, 52, 14, 1,  45, 31, 57, 21, 40, 6,
    63, 27, 10, 49, 35, 16, 54, 3,  42, 24, 59, 8,  30, 51, 13, 37,
    61, 4,  46, 20, 56, 15, 32, 47, 25, 39, 53, 18, 34, 22, 43, 28};

double lattice_value(int i, int j, uint32_t id) {
  int a = kPerm[(i + static_cast<int>(id & 63u)) & 63];
  int b = kPerm[(a + j + static_cast<int>((id >> 6) & 63u)) & 63];
  return static_cast<double>(b) / 63.0;
}

double fade(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(double u, double v, uint32_t id) {
  double iu = std::floor(u), iv = std::floor(v);
  int i = static_cast<int>(iu), j = static_cast<int>(iv);
  double fu = fade(u - iu), fv = fade(v - iv);
  double v00 = lattice_value(i, j, id), v10 = lattice_value(i + 1, j, id);
  double v01 = lattice_value(i, j + 1, id), v11 = lattice_value(i + 1, j + 1, id);
  double top = v00 + (v10 - v00) * fu;
  double bot = v01 + (v11 - v01) * fu;
  return top + (bot - top) * fv;
}

double texture_value(const PlaneSpec& plane, double u, double v) {
  if (plane.texture == TextureKind::kChecker) {
    long long cu = static_cast<long long>(std::floor(u / plane.checker_size));
    long long cv = static_cast<long long>(std::floor(v / plane.checker_size));
    return ((cu + cv) & 1) ? 0.85 : 0.25;
  }
  double total = 0.0, amp_sum = 0.0, amp = 1.0, freq = 6.0;
  for (int octave = 0; octave < 3; ++octave) {
    total += amp * value_noise(u * freq, v * freq,
                               plane.texture_id + static_cast<uint32_t>(octave));
    amp_sum += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return 0.1 + 0.8 * (total / amp_sum);
}

PlaneSpec transform_plane(const PlaneSpec& p, const RelativePose& pose) {
  PlaneSpec out = p;
  out.origin = pose.rotation * p.origin + pose.translation;
  out.u_axis = pose.rotation * p.u_axis;
  out.v_axis = pose.rotation * p.v_axis;
  out.normal = pose.rotation * p.normal;
  return out;
}

// nearest-hit ray cast over the plane list; depth 0 marks a miss
void render_view(const std::vector<PlaneSpec>& planes,
                 const CameraIntrinsics& k, int height, int width,
                 Tensor* image, Tensor* depth, std::vector<int>* plane_id) {
  *image = Tensor({height, width, 1});
  *depth = Tensor({height, width, 1});
  if (plane_id) plane_id->assign(static_cast<size_t>(height) * width, -1);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      Vec3 dir{(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0};
      double best_t = std::numeric_limits<double>::infinity();
      double value = 0.05;
      int hit = -1;
      for (size_t pi = 0; pi < planes.size(); ++pi) {
        const PlaneSpec& p = planes[pi];
        double denom = dot(p.normal, dir);
        if (std::abs(denom) < 1e-12) continue;
        double t = dot(p.normal, p.origin) / denom;
        if (t <= 1e-9 || t >= best_t) continue;
        Vec3 hitp = t * dir;
        Vec3 rel = hitp - p.origin;
        double u = dot(rel, p.u_axis), v = dot(rel, p.v_axis);
        if (p.bounded &&
            (u < p.u_min || u > p.u_max || v < p.v_min || v > p.v_max))
          continue;
        best_t = t;
        value = texture_value(p, u, v);
        hit = static_cast<int>(pi);
      }
      if (hit >= 0) {
        image->at(y, x, 0) = static_cast<float>(value);
        depth->at(y, x, 0) = static_cast<float>(best_t);  // dir.z == 1
        if (plane_id) (*plane_id)[static_cast<size_t>(y) * width + x] = hit;
      } else {
        image->at(y, x, 0) = 0.05f;
      }
    }
  }
}

Mat3 rotation_xyz(double ax, double ay, double az) {
  double cx = std::cos(ax), sx = std::sin(ax);
  double cy = std::cos(ay), sy = std::sin(ay);
  double cz = std::cos(az), sz = std::sin(az);
  Mat3 rx = Mat3::identity(), ry = Mat3::identity(), rz = Mat3::identity();
  rx(1, 1) = cx; rx(1, 2) = -sx; rx(2, 1) = sx; rx(2, 2) = cx;
  ry(0, 0) = cy; ry(0, 2) = sy; ry(2, 0) = -sy; ry(2, 2) = cy;
  rz(0, 0) = cz; rz(0, 1) = -sz; rz(1, 0) = sz; rz(1, 1) = cz;
  return rz * ry * rx;
}

PlaneSpec make_plane(const Vec3& origin, double tilt_x_deg, double tilt_y_deg,
                     TextureKind texture, uint32_t id) {
  Mat3 r = rotation_xyz(tilt_x_deg * kPi / 180.0, tilt_y_deg * kPi / 180.0, 0.0);
  PlaneSpec p;
  p.origin = origin;
  p.u_axis = r * Vec3{1, 0, 0};
  p.v_axis = r * Vec3{0, 1, 0};
  p.normal = cross(p.u_axis, p.v_axis);
  p.texture = texture;
  p.texture_id = id;
  return p;
}

CameraIntrinsics default_intrinsics(int height, int width) {
  double f = 1.25 * std::max(height, width);
  return {f, f, (width - 1) / 2.0, (height - 1) / 2.0};
}

Mat3 intrinsic_matrix(const CameraIntrinsics& k) {
  Mat3 m;
  m(0, 0) = k.fx;
  m(1, 1) = k.fy;
  m(0, 2) = k.cx;
  m(1, 2) = k.cy;
  m(2, 2) = 1.0;
  return m;
}

// pixel homography induced by the plane dot(n, X) = dot(n, origin)
Mat3 plane_homography(const PlaneSpec& plane, const RelativePose& pose,
                      const CameraIntrinsics& ka, const CameraIntrinsics& kb) {
  double d = dot(plane.normal, plane.origin);
  if (std::abs(d) < 1e-12)
    throw std::runtime_error("plane_homography: plane through the origin");
  Mat3 m = pose.rotation;
  for (int i = 0; i < 3; ++i) {
    double ti = (i == 0 ? pose.translation.x
                        : i == 1 ? pose.translation.y : pose.translation.z);
    m(i, 0) += ti * plane.normal.x / d;
    m(i, 1) += ti * plane.normal.y / d;
    m(i, 2) += ti * plane.normal.z / d;
  }
  return intrinsic_matrix(kb) * m * inverse(intrinsic_matrix(ka));
}

RelativePose inverse_pose(const RelativePose& pose) {
  Mat3 rt = transposed(pose.rotation);
  Vec3 t = rt * pose.translation;
  return {rt, {-t.x, -t.y, -t.z}};
}

// analytic nearest-hit depth in double precision, for audits
double exact_depth(const std::vector<PlaneSpec>& planes,
                   const CameraIntrinsics& k, const Vec2& pixel) {
  Vec3 dir{(pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0};
  double best_t = 0.0;
  for (const PlaneSpec& p : planes) {
    double denom = dot(p.normal, dir);
    if (std::abs(denom) < 1e-12) continue;
    double t = dot(p.normal, p.origin) / denom;
    if (t <= 1e-9) continue;
    if (p.bounded) {
      Vec3 rel = t * dir - p.origin;
      double u = dot(rel, p.u_axis), v = dot(rel, p.v_axis);
      if (u < p.u_min || u > p.u_max || v < p.v_min || v > p.v_max) continue;
    }
    if (best_t == 0.0 || t < best_t) best_t = t;
  }
  return best_t;
}

struct SceneValidation {
  bool ok = false;
  double covisible_fraction = 0.0;
};

SceneValidation validate_scene(const SceneBundle& scene) {
  SceneValidation val;
  for (int i = 0; i < scene.geometry.depth_a.size(); ++i)
    if (scene.geometry.depth_a.at(i) <= 0.0f) return val;
  for (int i = 0; i < scene.geometry.depth_b.size(); ++i)
    if (scene.geometry.depth_b.at(i) <= 0.0f) return val;
  Tensor covis = covisibility_labels(scene.geometry, 8, 0.2);
  double frac = 0.0;
  for (int i = 0; i < covis.size(); ++i) frac += covis.at(i);
  val.covisible_fraction = frac / covis.size();
  val.ok = val.covisible_fraction >= 0.5;
  return val;
}

SceneBundle assemble_scene(uint64_t seed, int height, int width,
                           const CameraIntrinsics& k,
                           const std::vector<PlaneSpec>& planes,
                           const RelativePose& pose) {
  SceneBundle scene;
  scene.seed = seed;
  scene.planes = planes;
  scene.geometry.ka = k;
  scene.geometry.kb = k;
  scene.geometry.pose = pose;
  render_view(planes, k, height, width, &scene.image_a,
              &scene.geometry.depth_a, nullptr);
  std::vector<PlaneSpec> planes_b;
  planes_b.reserve(planes.size());
  for (const PlaneSpec& p : planes) planes_b.push_back(transform_plane(p, pose));
  render_view(planes_b, k, height, width, &scene.image_b,
              &scene.geometry.depth_b, nullptr);
  return scene;
}

RelativePose random_pose(Rng& rng, const PoseRange& range) {
  double max_rad = range.max_rotation_deg * kPi / 180.0;
  double ax = rng.uniform(-max_rad, max_rad);
  double ay = rng.uniform(-max_rad, max_rad);
  double az = rng.uniform(-max_rad, max_rad);
  Mat3 r = rotation_xyz(ax, ay, az);
  Vec3 dir{rng.normal(), rng.normal(), 0.4 * rng.normal()};
  double n = norm(dir);
  double baseline = rng.uniform(range.min_baseline, range.max_baseline);
  Vec3 center = n > 1e-12 ? (baseline / n) * dir : Vec3{0, 0, 0};
  Vec3 t = r * center;
  return {r, {-t.x, -t.y, -t.z}};
}

}  // namespace

SceneBundle make_planar_scene(uint64_t seed, int height, int width,
                              const PoseRange& range, TextureKind texture) {
  CameraIntrinsics k = default_intrinsics(height, width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng(mix_seed(seed, 1000 + static_cast<uint64_t>(attempt)));
    double z0 = rng.uniform(3.5, 4.5);
    PlaneSpec bg = make_plane({0, 0, z0}, rng.uniform(-12.0, 12.0),
                              rng.uniform(-12.0, 12.0), texture,
                              static_cast<uint32_t>(seed & 0xfffu));
    RelativePose pose = random_pose(rng, range);
    SceneBundle scene = assemble_scene(seed, height, width, k, {bg}, pose);
    SceneValidation val = validate_scene(scene);
    if (!val.ok) continue;
    scene.has_homography = true;
    scene.homography = plane_homography(bg, pose, k, k);
    audit_scene(scene);
    return scene;
  }
  throw std::runtime_error(
      "make_planar_scene: no valid pose found in 10 attempts");
}

SceneBundle make_shifted_planar_scene(uint64_t seed, int height, int width,
                                      double dx_px, double dy_px) {
  CameraIntrinsics k = default_intrinsics(height, width);
  Rng rng(mix_seed(seed, 2000));
  double z0 = rng.uniform(3.5, 4.5);
  PlaneSpec bg = make_plane({0, 0, z0}, 0.0, 0.0, TextureKind::kValueNoise,
                            static_cast<uint32_t>(seed & 0xfffu));
  Vec3 center{-dx_px * z0 / k.fx, -dy_px * z0 / k.fy, 0.0};
  RelativePose pose{Mat3::identity(), {-center.x, -center.y, -center.z}};
  SceneBundle scene = assemble_scene(seed, height, width, k, {bg}, pose);
  SceneValidation val = validate_scene(scene);
  if (!val.ok)
    throw std::runtime_error("make_shifted_planar_scene: shift too large");
  scene.has_homography = true;
  scene.homography = plane_homography(bg, pose, k, k);
  audit_scene(scene);
  return scene;
}

SceneBundle make_dual_plane_scene(uint64_t seed, int height, int width) {
  CameraIntrinsics k = default_intrinsics(height, width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng(mix_seed(seed, 3000 + static_cast<uint64_t>(attempt)));
    // A convex roof: two faces meeting at a crease that crosses the view.
    // Matches then span genuinely non-coplanar structure, and convexity
    // means neither face can occlude the other from any near-side camera.
    double z0 = rng.uniform(3.2, 4.0);
    Vec3 crease{z0 * rng.uniform(-0.1, 0.1), 0.0, z0};
    PlaneSpec left = make_plane(crease, rng.uniform(-5.0, 5.0),
                                -rng.uniform(14.0, 24.0),
                                TextureKind::kValueNoise,
                                static_cast<uint32_t>(seed & 0xfffu));
    PlaneSpec right =
        make_plane(crease, rng.uniform(-5.0, 5.0), rng.uniform(14.0, 24.0),
                   TextureKind::kValueNoise,
                   static_cast<uint32_t>((seed & 0xfffu) ^ 0x800u));
    RelativePose pose = random_pose(rng, {6.0, 0.45, 0.75});
    SceneBundle scene =
        assemble_scene(seed, height, width, k, {left, right}, pose);
    SceneValidation val = validate_scene(scene);
    if (!val.ok) continue;

    // both faces must carry a real share of view A, otherwise the scene
    // is effectively single-plane and pose recovery is ill-posed
    std::vector<int> ids;
    Tensor img, dep;
    render_view(scene.planes, k, height, width, &img, &dep, &ids);
    double left_frac = 0.0;
    for (int id : ids) left_frac += (id == 0) ? 1.0 : 0.0;
    left_frac /= static_cast<double>(ids.size());
    if (left_frac < 0.25 || left_frac > 0.75) continue;

    audit_scene(scene);
    return scene;
  }
  throw std::runtime_error(
      "make_dual_plane_scene: no valid configuration in 10 attempts");
}

namespace {

// rigid pose for a camera at `center` (view A frame) whose optical axis
// passes through `target`; roll-free for a y-down camera
RelativePose fixating_pose(const Vec3& center, const Vec3& target) {
  Vec3 zb = normalized(target - center);
  Vec3 xb = cross(Vec3{0, 1, 0}, zb);
  xb = norm(xb) < 1e-9 ? Vec3{1, 0, 0} : normalized(xb);
  Vec3 yb = cross(zb, xb);
  Mat3 r;  // rows are B's axes: X_B = R * (X_A - center)
  r(0, 0) = xb.x; r(0, 1) = xb.y; r(0, 2) = xb.z;
  r(1, 0) = yb.x; r(1, 1) = yb.y; r(1, 2) = yb.z;
  r(2, 0) = zb.x; r(2, 1) = zb.y; r(2, 2) = zb.z;
  Vec3 t = r * center;
  return {r, {-t.x, -t.y, -t.z}};
}

}  // namespace

SceneBundle make_blocks_scene(uint64_t seed, int height, int width) {
  CameraIntrinsics k = default_intrinsics(height, width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng(mix_seed(seed, 5000 + static_cast<uint64_t>(attempt)));
    std::vector<PlaneSpec> planes;
    planes.push_back(make_plane({0, 0, rng.uniform(4.8, 5.4)},
                                rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0),
                                TextureKind::kValueNoise,
                                static_cast<uint32_t>(seed & 0xfffu)));
    for (int i = 0; i < 4; ++i) {
      double z = rng.uniform(2.6, 4.2);
      double reach = 0.35 * z;  // keep slab centers inside the shared view
      PlaneSpec slab = make_plane(
          {rng.uniform(-reach, reach), rng.uniform(-reach, reach), z},
          rng.uniform(-12.0, 12.0), rng.uniform(-12.0, 12.0),
          TextureKind::kValueNoise,
          static_cast<uint32_t>((seed & 0xfffu) ^ (0x100u * (i + 1u))));
      double half = rng.uniform(0.3, 0.5);
      slab.bounded = true;
      slab.u_min = slab.v_min = -half;
      slab.u_max = slab.v_max = half;
      planes.push_back(slab);
    }
    // long sideways baseline, camera B re-aimed at the scene middle so the
    // views keep overlapping
    Vec3 center{rng.uniform(0.7, 1.1) * (rng.uniform(0.0, 1.0) < 0.5 ? -1 : 1),
                rng.uniform(-0.25, 0.25), rng.uniform(-0.1, 0.1)};
    Vec3 target{0, 0, rng.uniform(3.8, 4.4)};
    RelativePose pose = fixating_pose(center, target);
    SceneBundle scene = assemble_scene(seed, height, width, k, planes, pose);
    SceneValidation val = validate_scene(scene);
    if (!val.ok) continue;
    audit_scene(scene);
    return scene;
  }
  throw std::runtime_error(
      "make_blocks_scene: no valid configuration in 10 attempts");
}

SceneBundle make_occlusion_scene(uint64_t seed, int height, int width) {
  CameraIntrinsics k = default_intrinsics(height, width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng(mix_seed(seed, 4000 + static_cast<uint64_t>(attempt)));
    PlaneSpec bg = make_plane({0, 0, rng.uniform(3.8, 4.2)},
                              rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0),
                              TextureKind::kValueNoise,
                              static_cast<uint32_t>(seed & 0xfffu));
    // the frustum of view A at z=1.8 spans about +-0.72 laterally; the
    // occluder sits just beyond the right edge so only view B sees it
    PlaneSpec occluder =
        make_plane({rng.uniform(1.05, 1.15), rng.uniform(-0.1, 0.1), 1.8},
                   0.0, 0.0, TextureKind::kChecker,
                   static_cast<uint32_t>((seed >> 8) & 0xfffu));
    occluder.bounded = true;
    occluder.u_min = -0.275;
    occluder.u_max = 0.275;
    occluder.v_min = -0.275;
    occluder.v_max = 0.275;

    Mat3 r = rotation_xyz(rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01),
                          rng.uniform(-0.01, 0.01));
    Vec3 center{0.8 + rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0};
    Vec3 t = r * center;
    RelativePose pose{r, {-t.x, -t.y, -t.z}};

    SceneBundle scene =
        assemble_scene(seed, height, width, k, {bg, occluder}, pose);

    // occluder must be invisible in A and clearly visible in B
    std::vector<int> ids_a, ids_b;
    Tensor img, dep;
    render_view(scene.planes, k, height, width, &img, &dep, &ids_a);
    std::vector<PlaneSpec> planes_b{transform_plane(bg, pose),
                                    transform_plane(occluder, pose)};
    render_view(planes_b, k, height, width, &img, &dep, &ids_b);
    bool occluder_in_a = false;
    int occluder_px_b = 0;
    for (int id : ids_a) occluder_in_a |= (id == 1);
    for (int id : ids_b) occluder_px_b += (id == 1) ? 1 : 0;
    if (occluder_in_a || occluder_px_b < 128) continue;

    // background depth must be positive everywhere in both views
    bool depths_ok = true;
    for (int i = 0; i < scene.geometry.depth_a.size(); ++i)
      if (scene.geometry.depth_a.at(i) <= 0.0f) depths_ok = false;
    for (int i = 0; i < scene.geometry.depth_b.size(); ++i)
      if (scene.geometry.depth_b.at(i) <= 0.0f) depths_ok = false;
    if (!depths_ok) continue;

    audit_scene(scene);
    return scene;
  }
  throw std::runtime_error(
      "make_occlusion_scene: no valid configuration in 10 attempts");
}

void audit_scene(const SceneBundle& scene) {
  const Tensor& da = scene.geometry.depth_a;
  const Tensor& db = scene.geometry.depth_b;
  const int h = da.dim(0), w = da.dim(1);
  if (scene.image_a.dim(0) != h || scene.image_a.dim(1) != w ||
      db.dim(0) != scene.image_b.dim(0) || db.dim(1) != scene.image_b.dim(1))
    throw std::runtime_error("audit_scene: image/depth shape mismatch");
  for (int i = 0; i < scene.image_a.size(); ++i) {
    float va = scene.image_a.at(i), vb = scene.image_b.at(i);
    if (!(va >= 0.0f && va <= 1.0f) || !(vb >= 0.0f && vb <= 1.0f))
      throw std::runtime_error("audit_scene: pixel value out of [0,1]");
  }
  for (int i = 0; i < da.size(); ++i)
    if (!std::isfinite(da.at(i)) || !std::isfinite(db.at(i)) ||
        da.at(i) < 0.0f || db.at(i) < 0.0f)
      throw std::runtime_error("audit_scene: invalid depth value");

  RelativePose inv = inverse_pose(scene.geometry.pose);
  const bool analytic = !scene.planes.empty();
  for (int y = 2; y < h; y += 5) {
    for (int x = 2; x < w; x += 5) {
      Vec2 pa{static_cast<double>(x), static_cast<double>(y)};
      double d = analytic ? exact_depth(scene.planes, scene.geometry.ka, pa)
                          : da.at(y, x, 0);
      if (d <= 0.0) continue;
      WarpResult fwd =
          warp_point(pa, d, scene.geometry.ka, scene.geometry.kb,
                     scene.geometry.pose);
      if (!fwd.in_front) continue;
      WarpResult back = warp_point(fwd.point, fwd.depth, scene.geometry.kb,
                                   scene.geometry.ka, inv);
      if (!back.in_front ||
          std::hypot(back.point.x - pa.x, back.point.y - pa.y) > 1e-4)
        throw std::runtime_error("audit_scene: warp round-trip exceeded 1e-4 px");
      if (scene.has_homography && analytic) {
        Vec2 hp = apply_homography(scene.homography, pa);
        if (std::hypot(hp.x - fwd.point.x, hp.y - fwd.point.y) > 1e-6)
          throw std::runtime_error(
              "audit_scene: homography disagrees with depth warp beyond 1e-6 px");
      }
    }
  }
}

namespace {

struct FrequencyBank {
  std::vector<Vec3> omega;
  std::vector<double> phase;
};

FrequencyBank make_bank(uint64_t seed, int dim, double sigma) {
  FrequencyBank bank;
  Rng rng(mix_seed(seed, 0x0f4ac1e5ull));
  bank.omega.resize(static_cast<size_t>(dim / 2));
  bank.phase.resize(static_cast<size_t>(dim / 2));
  for (int i = 0; i < dim / 2; ++i) {
    bank.omega[static_cast<size_t>(i)] = {sigma * rng.normal(),
                                          sigma * rng.normal(),
                                          sigma * rng.normal()};
    bank.phase[static_cast<size_t>(i)] = rng.uniform(0.0, 2.0 * kPi);
  }
  return bank;
}

void encode_point(const FrequencyBank& bank, const Vec3& p, float* out,
                  int dim) {
  double scale = 1.0 / std::sqrt(static_cast<double>(dim / 2));
  for (int i = 0; i < dim / 2; ++i) {
    double angle = dot(bank.omega[static_cast<size_t>(i)], p) +
                   bank.phase[static_cast<size_t>(i)];
    out[2 * i] = static_cast<float>(std::cos(angle) * scale);
    out[2 * i + 1] = static_cast<float>(std::sin(angle) * scale);
  }
}

void random_unit_code(uint64_t seed, float* out, int dim) {
  Rng rng(seed);
  double sq = 0.0;
  std::vector<double> v(static_cast<size_t>(dim));
  for (int i = 0; i < dim; ++i) {
    v[static_cast<size_t>(i)] = rng.normal();
    sq += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
  }
  double inv = 1.0 / std::sqrt(std::max(sq, 1e-30));
  for (int i = 0; i < dim; ++i)
    out[i] = static_cast<float>(v[static_cast<size_t>(i)] * inv);
}

double median_depth(const Tensor& depth) {
  std::vector<float> vals;
  vals.reserve(static_cast<size_t>(depth.size()));
  for (int i = 0; i < depth.size(); ++i)
    if (depth.at(i) > 0.0f) vals.push_back(depth.at(i));
  if (vals.empty()) throw std::runtime_error("median_depth: empty depth map");
  std::nth_element(vals.begin(), vals.begin() + static_cast<long>(vals.size() / 2),
                   vals.end());
  return vals[vals.size() / 2];
}

Vec3 backproject(const CameraIntrinsics& k, const Vec2& pixel, double depth) {
  return {(pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth,
          depth};
}

}  // namespace

std::pair<Tensor, Tensor> oracle_features(const SceneBundle& scene, int dim,
                                          double rel_tol, int cell) {
  if (dim % 2 != 0)
    throw std::invalid_argument("oracle_features: dim must be even");
  const TwoViewGeometry& g = scene.geometry;
  const int gh = g.depth_a.dim(0) / cell, gw = g.depth_a.dim(1) / cell;
  const int ghb = g.depth_b.dim(0) / cell, gwb = g.depth_b.dim(1) / cell;

  // correlation falls to ~0.5 at half a coarse cell of 3-D separation
  double cell_world = median_depth(g.depth_a) * cell / g.ka.fx;
  FrequencyBank bank = make_bank(scene.seed, dim, 2.355 / cell_world);

  Tensor fa({gh, gw, dim}), fb({ghb, gwb, dim});
  Tensor covis_a = covisibility_labels(g, cell, rel_tol);
  TwoViewGeometry rev{g.kb, g.ka, inverse_pose(g.pose), g.depth_b, g.depth_a};
  Tensor covis_b = covisibility_labels(rev, cell, rel_tol);
  RelativePose inv = inverse_pose(g.pose);

  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c) {
      float* out = fa.data() + (static_cast<size_t>(r) * gw + c) * dim;
      Vec2 px{static_cast<double>(c * cell + cell / 2),
              static_cast<double>(r * cell + cell / 2)};
      double d = g.depth_a.at(static_cast<int>(px.y), static_cast<int>(px.x), 0);
      if (covis_a.at(r, c, 0) > 0.5f && d > 0.0) {
        encode_point(bank, backproject(g.ka, px, d), out, dim);
      } else {
        random_unit_code(mix_seed(scene.seed, 0x0a000000ull +
                                  static_cast<uint64_t>(r * gw + c)),
                         out, dim);
      }
    }
  for (int r = 0; r < ghb; ++r)
    for (int c = 0; c < gwb; ++c) {
      float* out = fb.data() + (static_cast<size_t>(r) * gwb + c) * dim;
      Vec2 px{static_cast<double>(c * cell + cell / 2),
              static_cast<double>(r * cell + cell / 2)};
      double d = g.depth_b.at(static_cast<int>(px.y), static_cast<int>(px.x), 0);
      if (covis_b.at(r, c, 0) > 0.5f && d > 0.0) {
        // express the point in view A's frame so codes are view-independent
        Vec3 pb = backproject(g.kb, px, d);
        Vec3 pa = inv.rotation * pb + inv.translation;
        encode_point(bank, pa, out, dim);
      } else {
        random_unit_code(mix_seed(scene.seed, 0x0b000000ull +
                                  static_cast<uint64_t>(r * gwb + c)),
                         out, dim);
      }
    }
  return {std::move(fa), std::move(fb)};
}

std::pair<Tensor, Tensor> oracle_fine_features(const SceneBundle& scene,
                                               int dim) {
  if (dim % 2 != 0)
    throw std::invalid_argument("oracle_fine_features: dim must be even");
  const TwoViewGeometry& g = scene.geometry;
  const int ha = g.depth_a.dim(0), wa = g.depth_a.dim(1);
  const int hb = g.depth_b.dim(0), wb = g.depth_b.dim(1);

  // smooth within one pixel (corr ~0.85), discriminative past three
  double px_world = median_depth(g.depth_a) / g.ka.fx;
  FrequencyBank bank = make_bank(scene.seed ^ 0x51deull, dim, 0.570 / px_world);
  RelativePose inv = inverse_pose(g.pose);

  auto build = [&](const Tensor& depth, const CameraIntrinsics& own_k,
                   const CameraIntrinsics& other_k, const Tensor& other_depth,
                   const RelativePose& to_other, bool view_b, int height,
                   int width) {
    Tensor f({height, width, dim});
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        float* out = f.data() + (static_cast<size_t>(y) * width + x) * dim;
        double d = depth.at(y, x, 0);
        bool supported = false;
        if (d > 0.0) {
          WarpResult wr = warp_point({static_cast<double>(x),
                                      static_cast<double>(y)},
                                     d, own_k, other_k, to_other);
          if (wr.in_front) {
            int ox = static_cast<int>(std::lround(wr.point.x));
            int oy = static_cast<int>(std::lround(wr.point.y));
            if (ox >= 0 && ox < other_depth.dim(1) && oy >= 0 &&
                oy < other_depth.dim(0)) {
              double od = other_depth.at(oy, ox, 0);
              supported = od > 0.0 && std::abs(wr.depth - od) / od <= 0.2;
            }
          }
        }
        if (supported) {
          Vec3 p = backproject(own_k, {static_cast<double>(x),
                                       static_cast<double>(y)}, d);
          if (view_b) p = inv.rotation * p + inv.translation;
          encode_point(bank, p, out, dim);
        } else {
          uint64_t tag = (view_b ? 0x0d000000ull : 0x0c000000ull) +
                         static_cast<uint64_t>(y * width + x);
          random_unit_code(mix_seed(scene.seed, tag), out, dim);
        }
      }
    return f;
  };

  Tensor fa = build(g.depth_a, g.ka, g.kb, g.depth_b, g.pose, false, ha, wa);
  Tensor fb = build(g.depth_b, g.kb, g.ka, g.depth_a, inv, true, hb, wb);
  return {std::move(fa), std::move(fb)};
}

void write_scene(const SceneBundle& scene, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::filesystem::path p(dir);
  write_pgm((p / "imageA.pgm").string(), scene.image_a);
  write_pgm((p / "imageB.pgm").string(), scene.image_b);
  write_tensor((p / "depthA.tsr").string(), scene.geometry.depth_a);
  write_tensor((p / "depthB.tsr").string(), scene.geometry.depth_b);
  write_geometry_json((p / "geometry.json").string(), scene.geometry,
                      "depthA.tsr", "depthB.tsr",
                      scene.has_homography ? &scene.homography : nullptr,
                      scene.seed);
}

SceneBundle load_scene(const std::string& dir) {
  std::filesystem::path p(dir);
  SceneBundle scene;
  scene.image_a = read_pgm((p / "imageA.pgm").string());
  scene.image_b = read_pgm((p / "imageB.pgm").string());
  bool has_h = false;
  Mat3 h;
  uint64_t seed = 0;
  scene.geometry =
      read_geometry_json((p / "geometry.json").string(), &has_h, &h, &seed);
  scene.has_homography = has_h;
  if (has_h) scene.homography = h;
  scene.seed = seed;
  return scene;
}

SceneBundle swapped_scene(const SceneBundle& scene) {
  SceneBundle out;
  out.image_a = scene.image_b;
  out.image_b = scene.image_a;
  out.geometry.ka = scene.geometry.kb;
  out.geometry.kb = scene.geometry.ka;
  out.geometry.depth_a = scene.geometry.depth_b;
  out.geometry.depth_b = scene.geometry.depth_a;
  out.geometry.pose = inverse_pose(scene.geometry.pose);
  out.seed = scene.seed;
  if (scene.has_homography) {
    out.has_homography = true;
    out.homography = inverse(scene.homography);
  }
  // plane specs stay in view A's frame, so they are re-expressed in B's
  for (const PlaneSpec& p : scene.planes)
    out.planes.push_back(transform_plane(p, scene.geometry.pose));
  return out;
}

}  // namespace comatch

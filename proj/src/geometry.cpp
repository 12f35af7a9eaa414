#include "comatch/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"

#include "comatch/rng.hpp"
#include "comatch/tensor_io.hpp"

namespace comatch {

double dot(const Vec3& a, const Vec3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z,
          a.x * b.y - a.y * b.x};
}

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 normalized(const Vec3& a) {
  double n = norm(a);
  if (n < 1e-300) throw std::invalid_argument("normalized: zero vector");
  return {a.x / n, a.y / n, a.z / n};
}

Mat3 Mat3::identity() {
  Mat3 r;
  r(0, 0) = r(1, 1) = r(2, 2) = 1.0;
  return r;
}

Mat3 operator*(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += a(i, k) * b(k, j);
      r(i, j) = acc;
    }
  return r;
}

Vec3 operator*(const Mat3& a, const Vec3& v) {
  return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
          a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
          a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
}

Mat3 transposed(const Mat3& a) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(j, i);
  return r;
}

Mat3 skew(const Vec3& t) {
  Mat3 r;
  r(0, 1) = -t.z;
  r(0, 2) = t.y;
  r(1, 0) = t.z;
  r(1, 2) = -t.x;
  r(2, 0) = -t.y;
  r(2, 1) = t.x;
  return r;
}

double det(const Mat3& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

Mat3 inverse(const Mat3& a) {
  double d = det(a);
  if (std::abs(d) < 1e-300) throw std::invalid_argument("inverse: singular");
  Mat3 r;
  r(0, 0) = (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) / d;
  r(0, 1) = (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) / d;
  r(0, 2) = (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) / d;
  r(1, 0) = (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) / d;
  r(1, 1) = (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) / d;
  r(1, 2) = (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) / d;
  r(2, 0) = (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) / d;
  r(2, 1) = (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) / d;
  r(2, 2) = (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) / d;
  return r;
}

void jacobi_eigen_sym(const std::vector<double>& a, int n,
                      std::vector<double>& eigenvalues,
                      std::vector<double>& eigenvectors) {
  if (n < 1 || static_cast<int>(a.size()) != n * n)
    throw std::invalid_argument("jacobi_eigen_sym: bad matrix size");
  std::vector<double> m = a;
  std::vector<double> v(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;

  auto at = [n](std::vector<double>& mat, int r, int c) -> double& {
    return mat[static_cast<size_t>(r) * n + c];
  };

  double scale = 0.0;
  for (int i = 0; i < n; ++i) scale = std::max(scale, std::abs(at(m, i, i)));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) scale = std::max(scale, std::abs(at(m, i, j)));
  if (scale == 0.0) scale = 1.0;
  const double tol = 1e-12 * scale;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off = std::max(off, std::abs(at(m, p, q)));
    if (off < tol) break;

    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        double apq = at(m, p, q);
        if (std::abs(apq) < tol * 1e-3) continue;
        double app = at(m, p, p), aqq = at(m, q, q);
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int k = 0; k < n; ++k) {
          double mkp = at(m, k, p), mkq = at(m, k, q);
          at(m, k, p) = c * mkp - s * mkq;
          at(m, k, q) = s * mkp + c * mkq;
        }
        for (int k = 0; k < n; ++k) {
          double mpk = at(m, p, k), mqk = at(m, q, k);
          at(m, p, k) = c * mpk - s * mqk;
          at(m, q, k) = s * mpk + c * mqk;
        }
        for (int k = 0; k < n; ++k) {
          double vkp = at(v, k, p), vkq = at(v, k, q);
          at(v, k, p) = c * vkp - s * vkq;
          at(v, k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    return at(m, x, x) > at(m, y, y);
  });

  eigenvalues.assign(static_cast<size_t>(n), 0.0);
  eigenvectors.assign(static_cast<size_t>(n) * n, 0.0);
  for (int col = 0; col < n; ++col) {
    int src = order[static_cast<size_t>(col)];
    eigenvalues[static_cast<size_t>(col)] = at(m, src, src);
    for (int r = 0; r < n; ++r)
      eigenvectors[static_cast<size_t>(r) * n + col] = at(v, r, src);
  }
}

void svd3(const Mat3& a, Mat3& u, Vec3& sigma, Mat3& v) {
  std::vector<double> ata(9, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += a(k, i) * a(k, j);
      ata[static_cast<size_t>(i) * 3 + j] = acc;
    }
  std::vector<double> evals, evecs;
  jacobi_eigen_sym(ata, 3, evals, evecs);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) v(i, j) = evecs[static_cast<size_t>(i) * 3 + j];

  double s0 = std::sqrt(std::max(0.0, evals[0]));
  double s1 = std::sqrt(std::max(0.0, evals[1]));
  double s2 = std::sqrt(std::max(0.0, evals[2]));
  sigma = {s0, s1, s2};

  // the eigenvalues of a^T a carry absolute rounding error ~eps * s0^2, so a
  // singular value below ~sqrt(eps) * s0 is indistinguishable from zero
  const double tiny = 1e-7 * std::max(s0, 1e-300);
  Vec3 v0{v(0, 0), v(1, 0), v(2, 0)};
  Vec3 v1{v(0, 1), v(1, 1), v(2, 1)};
  Vec3 v2{v(0, 2), v(1, 2), v(2, 2)};
  Vec3 u0, u1, u2;
  if (s0 > 1e-300) {
    u0 = normalized(a * v0);
  } else {
    u = Mat3::identity();
    return;
  }
  if (s1 > tiny) {
    u1 = a * v1;
    // re-orthogonalize against u0 to kill rounding drift
    u1 = u1 - dot(u1, u0) * u0;
    u1 = normalized(u1);
  } else {
    // rank-1 input: pick any unit vector orthogonal to u0
    Vec3 seed = std::abs(u0.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    u1 = normalized(cross(u0, seed));
  }
  double n2 = 0.0;
  if (s2 > tiny) {
    // full-rank input: the third left vector comes from the input itself so
    // the sign is right and u * diag(sigma) * v^T reconstructs exactly
    u2 = a * v2;
    u2 = u2 - dot(u2, u0) * u0 - dot(u2, u1) * u1;
    n2 = norm(u2);
  }
  if (n2 > tiny) {
    u2 = {u2.x / n2, u2.y / n2, u2.z / n2};
  } else {
    // rank-deficient: complete the basis; the sign is arbitrary because the
    // matching singular value is zero
    u2 = cross(u0, u1);
  }
  u(0, 0) = u0.x; u(1, 0) = u0.y; u(2, 0) = u0.z;
  u(0, 1) = u1.x; u(1, 1) = u1.y; u(2, 1) = u1.z;
  u(0, 2) = u2.x; u(1, 2) = u2.y; u(2, 2) = u2.z;
}

Mat3 essential_from_pose(const RelativePose& pose) {
  return skew(pose.translation) * pose.rotation;
}

namespace {

struct EpipolarTerms {
  double r;          // pb' E pa
  double ep1, ep2;   // (E pa).xy
  double et1, et2;   // (E' pb).xy
  double denom;
};

EpipolarTerms epipolar_terms(const Vec2& pa, const Vec2& pb, const Mat3& e) {
  EpipolarTerms t;
  double ep1 = e(0, 0) * pa.x + e(0, 1) * pa.y + e(0, 2);
  double ep2 = e(1, 0) * pa.x + e(1, 1) * pa.y + e(1, 2);
  double ep3 = e(2, 0) * pa.x + e(2, 1) * pa.y + e(2, 2);
  t.r = pb.x * ep1 + pb.y * ep2 + ep3;
  t.ep1 = ep1;
  t.ep2 = ep2;
  t.et1 = e(0, 0) * pb.x + e(1, 0) * pb.y + e(2, 0);
  t.et2 = e(0, 1) * pb.x + e(1, 1) * pb.y + e(2, 1);
  t.denom = ep1 * ep1 + ep2 * ep2 + t.et1 * t.et1 + t.et2 * t.et2;
  return t;
}

}  // namespace

double sampson_distance(const Vec2& pa, const Vec2& pb, const Mat3& e) {
  EpipolarTerms t = epipolar_terms(pa, pb, e);
  if (t.denom <= 0.0) return std::numeric_limits<double>::infinity();
  return t.r * t.r / t.denom;
}

std::array<double, 4> sampson_gradient(const Vec2& pa, const Vec2& pb,
                                       const Mat3& e) {
  EpipolarTerms t = epipolar_terms(pa, pb, e);
  if (t.denom <= 0.0)
    throw std::invalid_argument("sampson_gradient: degenerate denominator");
  double dr[4] = {t.et1, t.et2, t.ep1, t.ep2};
  double dd[4] = {
      2.0 * (t.ep1 * e(0, 0) + t.ep2 * e(1, 0)),
      2.0 * (t.ep1 * e(0, 1) + t.ep2 * e(1, 1)),
      2.0 * (t.et1 * e(0, 0) + t.et2 * e(0, 1)),
      2.0 * (t.et1 * e(1, 0) + t.et2 * e(1, 1)),
  };
  std::array<double, 4> g;
  double d2 = t.denom * t.denom;
  for (int i = 0; i < 4; ++i)
    g[static_cast<size_t>(i)] =
        2.0 * t.r * dr[i] / t.denom - t.r * t.r * dd[i] / d2;
  return g;
}

WarpResult warp_point(const Vec2& pixel_a, double depth_a,
                      const CameraIntrinsics& ka, const CameraIntrinsics& kb,
                      const RelativePose& pose) {
  WarpResult out;
  Vec3 pa{(pixel_a.x - ka.cx) / ka.fx * depth_a,
          (pixel_a.y - ka.cy) / ka.fy * depth_a, depth_a};
  Vec3 pb = pose.rotation * pa + pose.translation;
  out.depth = pb.z;
  out.in_front = depth_a > 0.0 && pb.z > 1e-12;
  if (pb.z > 1e-12 || pb.z < -1e-12) {
    out.point = {kb.fx * pb.x / pb.z + kb.cx, kb.fy * pb.y / pb.z + kb.cy};
  }
  return out;
}

Tensor covisibility_labels(const TwoViewGeometry& geom, int cell,
                           double rel_tol) {
  const Tensor& da = geom.depth_a;
  const Tensor& db = geom.depth_b;
  if (da.rank() != 3 || db.rank() != 3)
    throw std::invalid_argument("covisibility_labels: depth maps must be [H,W,1]");
  const int ha = da.dim(0), wa = da.dim(1);
  const int hb = db.dim(0), wb = db.dim(1);
  const int gh = ha / cell, gw = wa / cell;
  Tensor labels({gh, gw, 1});
  for (int r = 0; r < gh; ++r) {
    for (int c = 0; c < gw; ++c) {
      int ax = c * cell + cell / 2;
      int ay = r * cell + cell / 2;
      double d = da.at(ay, ax, 0);
      if (d <= 0.0) continue;
      WarpResult wr = warp_point({static_cast<double>(ax),
                                  static_cast<double>(ay)},
                                 d, geom.ka, geom.kb, geom.pose);
      if (!wr.in_front) continue;
      int bx = static_cast<int>(std::lround(wr.point.x));
      int by = static_cast<int>(std::lround(wr.point.y));
      if (bx < 0 || bx >= wb || by < 0 || by >= hb) continue;
      double db_val = db.at(by, bx, 0);
      if (db_val <= 0.0) continue;
      if (std::abs(wr.depth - db_val) / db_val <= rel_tol)
        labels.at(r, c, 0) = 1.0f;
    }
  }
  return labels;
}

std::vector<std::pair<int, int>> gt_coarse_matches(const TwoViewGeometry& geom,
                                                   int cell, double rel_tol) {
  Tensor labels = covisibility_labels(geom, cell, rel_tol);
  const int gh = labels.dim(0), gw = labels.dim(1);
  const int ghb = geom.depth_b.dim(0) / cell, gwb = geom.depth_b.dim(1) / cell;

  struct Claim {
    double dist;
    int a_index;
  };
  std::vector<Claim> claims(static_cast<size_t>(ghb) * gwb,
                            {std::numeric_limits<double>::infinity(), -1});

  for (int r = 0; r < gh; ++r) {
    for (int c = 0; c < gw; ++c) {
      if (labels.at(r, c, 0) < 0.5f) continue;
      int ax = c * cell + cell / 2;
      int ay = r * cell + cell / 2;
      double d = geom.depth_a.at(ay, ax, 0);
      WarpResult wr = warp_point({static_cast<double>(ax),
                                  static_cast<double>(ay)},
                                 d, geom.ka, geom.kb, geom.pose);
      int bc = static_cast<int>(
          std::lround((wr.point.x - cell / 2) / cell));
      int br = static_cast<int>(
          std::lround((wr.point.y - cell / 2) / cell));
      if (bc < 0 || bc >= gwb || br < 0 || br >= ghb) continue;
      double dx = wr.point.x - (bc * cell + cell / 2);
      double dy = wr.point.y - (br * cell + cell / 2);
      double dist = std::hypot(dx, dy);
      Claim& slot = claims[static_cast<size_t>(br) * gwb + bc];
      // strict less keeps the earlier (lower) A index on exact ties
      if (dist < slot.dist) slot = {dist, r * gw + c};
    }
  }

  std::vector<std::pair<int, int>> matches;
  for (int b = 0; b < ghb * gwb; ++b) {
    if (claims[static_cast<size_t>(b)].a_index >= 0)
      matches.emplace_back(claims[static_cast<size_t>(b)].a_index, b);
  }
  std::sort(matches.begin(), matches.end());
  return matches;
}

namespace {

struct NormalizeTransform {
  Mat3 t;
  bool ok;
};

// Hartley conditioning: centroid to origin, mean distance sqrt(2)
NormalizeTransform hartley_normalize(const std::vector<Vec2>& pts,
                                     std::vector<Vec2>& out) {
  double mx = 0.0, my = 0.0;
  for (const Vec2& p : pts) {
    mx += p.x;
    my += p.y;
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const Vec2& p : pts) mean_dist += std::hypot(p.x - mx, p.y - my);
  mean_dist /= static_cast<double>(pts.size());
  if (mean_dist < 1e-12) return {Mat3::identity(), false};
  double s = std::sqrt(2.0) / mean_dist;
  Mat3 t;
  t(0, 0) = s;
  t(1, 1) = s;
  t(2, 2) = 1.0;
  t(0, 2) = -s * mx;
  t(1, 2) = -s * my;
  out.resize(pts.size());
  for (size_t i = 0; i < pts.size(); ++i)
    out[i] = {s * (pts[i].x - mx), s * (pts[i].y - my)};
  return {t, true};
}

struct EightPointOutcome {
  Mat3 f;
  double rank_gap = 0.0;  // lambda_8 / lambda_1 of A'A, ~0 when deficient
  bool ok = false;
};

EightPointOutcome eight_point(const std::vector<Vec2>& pts_a,
                              const std::vector<Vec2>& pts_b) {
  EightPointOutcome out;
  if (pts_a.size() < 8 || pts_a.size() != pts_b.size()) return out;
  std::vector<Vec2> na, nb;
  NormalizeTransform ta = hartley_normalize(pts_a, na);
  NormalizeTransform tb = hartley_normalize(pts_b, nb);
  if (!ta.ok || !tb.ok) return out;

  std::vector<double> ata(81, 0.0);
  for (size_t i = 0; i < na.size(); ++i) {
    double xa = na[i].x, ya = na[i].y, xb = nb[i].x, yb = nb[i].y;
    double row[9] = {xb * xa, xb * ya, xb, yb * xa, yb * ya, yb, xa, ya, 1.0};
    for (int r = 0; r < 9; ++r)
      for (int c = 0; c < 9; ++c)
        ata[static_cast<size_t>(r) * 9 + c] += row[r] * row[c];
  }
  std::vector<double> evals, evecs;
  jacobi_eigen_sym(ata, 9, evals, evecs);
  if (evals[0] <= 0.0) return out;
  out.rank_gap = std::max(0.0, evals[7]) / evals[0];

  Mat3 fn;
  for (int i = 0; i < 9; ++i)
    fn.m[static_cast<size_t>(i)] = evecs[static_cast<size_t>(i) * 9 + 8];
  out.f = transposed(tb.t) * fn * ta.t;
  out.ok = true;
  return out;
}

Mat3 project_to_essential(const Mat3& f) {
  Mat3 u, v;
  Vec3 s;
  svd3(f, u, s, v);
  double m = (s.x + s.y) / 2.0;
  Mat3 d;
  d(0, 0) = m;
  d(1, 1) = m;
  Mat3 e = u * d * transposed(v);
  double fro = 0.0;
  for (double x : e.m) fro += x * x;
  fro = std::sqrt(fro);
  if (fro < 1e-300) return e;
  for (double& x : e.m) x /= fro;
  return e;
}

constexpr double kRankGapMin = 1e-12;

}  // namespace

RansacResult estimate_essential_ransac(const std::vector<Vec2>& pts_a,
                                       const std::vector<Vec2>& pts_b,
                                       const CameraIntrinsics& ka,
                                       const CameraIntrinsics& kb,
                                       int iterations, double threshold_px,
                                       uint64_t seed) {
  if (pts_a.size() != pts_b.size())
    throw std::invalid_argument("estimate_essential_ransac: size mismatch");
  const int n = static_cast<int>(pts_a.size());
  if (n < 8)
    throw std::invalid_argument(
        "estimate_essential_ransac: need at least 8 matches, got " +
        std::to_string(n));
  if (iterations < 1 || threshold_px <= 0.0)
    throw std::invalid_argument("estimate_essential_ransac: bad parameters");

  std::vector<Vec2> norm_a(pts_a.size()), norm_b(pts_b.size());
  for (int i = 0; i < n; ++i) {
    norm_a[static_cast<size_t>(i)] = {(pts_a[static_cast<size_t>(i)].x - ka.cx) / ka.fx,
                                      (pts_a[static_cast<size_t>(i)].y - ka.cy) / ka.fy};
    norm_b[static_cast<size_t>(i)] = {(pts_b[static_cast<size_t>(i)].x - kb.cx) / kb.fx,
                                      (pts_b[static_cast<size_t>(i)].y - kb.cy) / kb.fy};
  }
  const double mean_focal = (ka.fx + ka.fy + kb.fx + kb.fy) / 4.0;
  const double thresh_sq = (threshold_px / mean_focal) * (threshold_px / mean_focal);

  auto count_inliers = [&](const Mat3& e, std::vector<char>* mask) {
    int count = 0;
    if (mask) mask->assign(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      double d = sampson_distance(norm_a[static_cast<size_t>(i)],
                                  norm_b[static_cast<size_t>(i)], e);
      if (d <= thresh_sq) {
        ++count;
        if (mask) (*mask)[static_cast<size_t>(i)] = 1;
      }
    }
    return count;
  };

  // truncated robust score: inliers contribute their residual, outliers the
  // threshold. Lower is better; unlike a plain inlier count this prefers an
  // exact model over one that keeps the same consensus set with worse
  // residuals.
  auto truncated_score = [&](const Mat3& e) {
    double score = 0.0;
    for (int i = 0; i < n; ++i) {
      double d = sampson_distance(norm_a[static_cast<size_t>(i)],
                                  norm_b[static_cast<size_t>(i)], e);
      score += std::min(d, thresh_sq);
    }
    return score;
  };

  RansacResult result;
  double best_score = std::numeric_limits<double>::infinity();
  Mat3 best_e;
  bool have_model = false;

  for (int iter = 0; iter < iterations; ++iter) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(iter)));
    int idx[8];
    int picked = 0;
    while (picked < 8) {
      int candidate = rng.uniform_int(0, n - 1);
      bool dup = false;
      for (int j = 0; j < picked; ++j)
        if (idx[j] == candidate) dup = true;
      if (!dup) idx[picked++] = candidate;
    }
    std::vector<Vec2> sa(8), sb(8);
    for (int j = 0; j < 8; ++j) {
      sa[static_cast<size_t>(j)] = norm_a[static_cast<size_t>(idx[j])];
      sb[static_cast<size_t>(j)] = norm_b[static_cast<size_t>(idx[j])];
    }
    EightPointOutcome ep = eight_point(sa, sb);
    if (!ep.ok || ep.rank_gap < kRankGapMin) continue;
    Mat3 e = project_to_essential(ep.f);
    double score = truncated_score(e);
    if (score < best_score) {
      best_score = score;
      best_e = e;
      have_model = true;
    }
  }

  if (!have_model) {
    result.failure =
        "every minimal sample was degenerate (collinear or coplanar picks)";
    return result;
  }

  // iterated least-squares refit over the consensus set, kept only while it
  // improves the truncated score; each round can widen the consensus and pull
  // a model fitted on a poorly conditioned minimal sample to the global one
  std::vector<char> mask;
  for (int round = 0; round < 10; ++round) {
    count_inliers(best_e, &mask);
    std::vector<Vec2> ia, ib;
    for (int i = 0; i < n; ++i) {
      if (mask[static_cast<size_t>(i)]) {
        ia.push_back(norm_a[static_cast<size_t>(i)]);
        ib.push_back(norm_b[static_cast<size_t>(i)]);
      }
    }
    if (ia.size() < 8) break;
    EightPointOutcome refit = eight_point(ia, ib);
    if (!refit.ok || refit.rank_gap < kRankGapMin) break;
    Mat3 e2 = project_to_essential(refit.f);
    double s2 = truncated_score(e2);
    if (s2 >= best_score) break;
    best_score = s2;
    best_e = e2;
  }

  result.essential = best_e;
  result.inlier_count = count_inliers(best_e, &result.inlier_mask);
  result.ok = true;
  return result;
}

namespace {

// least-squares two-ray triangulation; returns depths (lambda along R*a,
// mu along b) and whether the rays had usable parallax
struct Triangulation {
  double lambda = 0.0, mu = 0.0;
  bool usable = false;
};

Triangulation triangulate(const Mat3& r, const Vec3& t, const Vec2& a,
                          const Vec2& b) {
  Vec3 ra = r * Vec3{a.x, a.y, 1.0};
  Vec3 vb{b.x, b.y, 1.0};
  double a11 = dot(ra, ra), a12 = -dot(ra, vb), a22 = dot(vb, vb);
  double det2 = a11 * a22 - a12 * a12;
  Triangulation out;
  if (det2 < 1e-12 * a11 * a22) return out;
  double b1 = -dot(ra, t), b2 = dot(vb, t);
  out.lambda = (b1 * a22 - a12 * b2) / det2;
  out.mu = (a11 * b2 - a12 * b1) / det2;
  out.usable = true;
  return out;
}

}  // namespace

DecomposeResult decompose_essential(const Mat3& e,
                                    const std::vector<Vec2>& pts_a_norm,
                                    const std::vector<Vec2>& pts_b_norm) {
  if (pts_a_norm.empty() || pts_a_norm.size() != pts_b_norm.size())
    throw std::invalid_argument("decompose_essential: bad correspondences");
  Mat3 u, v;
  Vec3 s;
  svd3(e, u, s, v);
  if (det(u) < 0)
    for (int i = 0; i < 3; ++i) u(i, 2) = -u(i, 2);
  if (det(v) < 0)
    for (int i = 0; i < 3; ++i) v(i, 2) = -v(i, 2);

  Mat3 w;
  w(0, 1) = -1.0;
  w(1, 0) = 1.0;
  w(2, 2) = 1.0;
  Mat3 r1 = u * w * transposed(v);
  Mat3 r2 = u * transposed(w) * transposed(v);
  Vec3 t{u(0, 2), u(1, 2), u(2, 2)};

  struct Candidate {
    Mat3 r;
    Vec3 t;
  };
  Candidate candidates[4] = {
      {r1, t}, {r1, {-t.x, -t.y, -t.z}}, {r2, t}, {r2, {-t.x, -t.y, -t.z}}};

  const size_t m = pts_a_norm.size();
  int best = -1, best_votes = -1;
  for (int c = 0; c < 4; ++c) {
    int votes = 0;
    for (size_t i = 0; i < m; ++i) {
      Triangulation tri = triangulate(candidates[c].r, candidates[c].t,
                                      pts_a_norm[i], pts_b_norm[i]);
      if (!tri.usable) continue;
      if (tri.lambda > 0.0 && tri.mu > 0.0) ++votes;
    }
    if (votes > best_votes) {
      best_votes = votes;
      best = c;
    }
  }

  DecomposeResult out;
  if (best_votes <= 0) {
    // No candidate places any point in front of both cameras. That happens
    // when the baseline is (near) zero: the true rotation leaves every ray
    // pair parallel, and the twisted candidates fail cheirality. The
    // translation is unrecoverable; pick the rotation that best aligns the
    // ray bundles and flag the result.
    double best_align = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < 4; ++c) {
      double align = 0.0;
      for (size_t i = 0; i < m; ++i) {
        Vec3 ra = normalized(candidates[c].r *
                             Vec3{pts_a_norm[i].x, pts_a_norm[i].y, 1.0});
        Vec3 vb = normalized(Vec3{pts_b_norm[i].x, pts_b_norm[i].y, 1.0});
        align += dot(ra, vb);
      }
      if (align > best_align) {
        best_align = align;
        best = c;
      }
    }
    out.pose = {candidates[best].r, candidates[best].t};
    out.cheirality_votes = 0;
    out.degenerate = true;
    return out;
  }

  out.pose = {candidates[best].r, candidates[best].t};
  out.cheirality_votes = best_votes;

  // parallax check on the winner: median angle between the two rays
  std::vector<double> angles;
  for (size_t i = 0; i < m; ++i) {
    Triangulation tri = triangulate(candidates[best].r, candidates[best].t,
                                    pts_a_norm[i], pts_b_norm[i]);
    if (!tri.usable || tri.lambda <= 0.0 || tri.mu <= 0.0) continue;
    Vec3 ra = normalized(candidates[best].r *
                         Vec3{pts_a_norm[i].x, pts_a_norm[i].y, 1.0});
    Vec3 vb = normalized(Vec3{pts_b_norm[i].x, pts_b_norm[i].y, 1.0});
    angles.push_back(std::acos(std::clamp(dot(ra, vb), -1.0, 1.0)));
  }
  if (!angles.empty()) {
    std::nth_element(angles.begin(), angles.begin() + static_cast<long>(angles.size() / 2),
                     angles.end());
    out.degenerate = angles[angles.size() / 2] < 1e-4;
  } else {
    out.degenerate = true;
  }
  return out;
}

namespace {

// Rodrigues exponential with small-angle series fallback
Mat3 exp_so3(const Vec3& w) {
  double th = norm(w);
  Mat3 k = skew(w);
  Mat3 k2 = k * k;
  double a, b;
  if (th < 1e-8) {
    a = 1.0 - th * th / 6.0;
    b = 0.5 - th * th / 24.0;
  } else {
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / (th * th);
  }
  Mat3 out = Mat3::identity();
  for (size_t i = 0; i < 9; ++i) out.m[i] += a * k.m[i] + b * k2.m[i];
  return out;
}

// in-place Gaussian elimination with partial pivoting for tiny systems;
// solution replaces b
bool solve_dense(std::vector<double>& a, std::vector<double>& b, int n) {
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a[static_cast<size_t>(r) * n + col]) >
          std::abs(a[static_cast<size_t>(piv) * n + col]))
        piv = r;
    if (std::abs(a[static_cast<size_t>(piv) * n + col]) < 1e-300) return false;
    if (piv != col) {
      for (int c = 0; c < n; ++c)
        std::swap(a[static_cast<size_t>(piv) * n + c],
                  a[static_cast<size_t>(col) * n + c]);
      std::swap(b[static_cast<size_t>(piv)], b[static_cast<size_t>(col)]);
    }
    for (int r = col + 1; r < n; ++r) {
      double f = a[static_cast<size_t>(r) * n + col] /
                 a[static_cast<size_t>(col) * n + col];
      for (int c = col; c < n; ++c)
        a[static_cast<size_t>(r) * n + c] -=
            f * a[static_cast<size_t>(col) * n + c];
      b[static_cast<size_t>(r)] -= f * b[static_cast<size_t>(col)];
    }
  }
  for (int r = n - 1; r >= 0; --r) {
    double s = b[static_cast<size_t>(r)];
    for (int c = r + 1; c < n; ++c)
      s -= a[static_cast<size_t>(r) * n + c] * b[static_cast<size_t>(c)];
    b[static_cast<size_t>(r)] = s / a[static_cast<size_t>(r) * n + r];
  }
  return true;
}

}  // namespace

RelativePose refine_pose_sampson(const RelativePose& init,
                                 const std::vector<Vec2>& pts_a_norm,
                                 const std::vector<Vec2>& pts_b_norm,
                                 int max_iterations) {
  if (pts_a_norm.size() != pts_b_norm.size())
    throw std::invalid_argument("refine_pose_sampson: size mismatch");
  const size_t n = pts_a_norm.size();
  if (n < 5 || norm(init.translation) < 1e-12) return init;

  RelativePose cur = init;
  cur.translation = normalized(cur.translation);

  auto residuals = [&](const RelativePose& pose, std::vector<double>* out) {
    Mat3 e = essential_from_pose(pose);
    double cost = 0.0;
    for (size_t i = 0; i < n; ++i) {
      EpipolarTerms t = epipolar_terms(pts_a_norm[i], pts_b_norm[i], e);
      double rho = t.denom > 0.0 ? t.r / std::sqrt(t.denom) : 0.0;
      if (out) (*out)[i] = rho;
      cost += rho * rho;
    }
    return cost;
  };

  // chart at the current pose: rotation increment on the left, translation
  // nudged inside the unit sphere's tangent plane and renormalized
  auto retract = [](const RelativePose& pose, const double* d) {
    Vec3 t0 = pose.translation;
    Vec3 aux = std::abs(t0.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    Vec3 e1 = normalized(cross(t0, aux));
    Vec3 e2 = cross(t0, e1);
    RelativePose out;
    out.rotation = exp_so3({d[0], d[1], d[2]}) * pose.rotation;
    out.translation = normalized(t0 + d[3] * e1 + d[4] * e2);
    return out;
  };

  std::vector<double> rho(n), rho_p(n), rho_m(n);
  double cost = residuals(cur, &rho);
  double lambda = 1e-6;
  const double h = 1e-7;
  // already at the numerical floor: stepping along a flat cost surface
  // would only add rounding jitter
  const double cost_floor = 1e-24;

  for (int iter = 0; iter < max_iterations; ++iter) {
    if (cost < cost_floor) break;
    std::vector<std::array<double, 5>> jac(n);
    for (int p = 0; p < 5; ++p) {
      double dp[5] = {0, 0, 0, 0, 0};
      dp[p] = h;
      residuals(retract(cur, dp), &rho_p);
      dp[p] = -h;
      residuals(retract(cur, dp), &rho_m);
      for (size_t i = 0; i < n; ++i)
        jac[i][static_cast<size_t>(p)] = (rho_p[i] - rho_m[i]) / (2.0 * h);
    }
    std::vector<double> jtj(25, 0.0), jtr(5, 0.0);
    for (size_t i = 0; i < n; ++i)
      for (size_t r = 0; r < 5; ++r) {
        jtr[r] += jac[i][r] * rho[i];
        for (size_t c = 0; c < 5; ++c) jtj[r * 5 + c] += jac[i][r] * jac[i][c];
      }

    bool stepped = false;
    for (int attempt = 0; attempt < 8 && !stepped; ++attempt) {
      std::vector<double> a = jtj, b(5);
      for (size_t d = 0; d < 5; ++d) {
        a[d * 5 + d] += lambda * (1.0 + jtj[d * 5 + d]);
        b[d] = -jtr[d];
      }
      if (!solve_dense(a, b, 5)) {
        lambda *= 10.0;
        continue;
      }
      RelativePose cand = retract(cur, b.data());
      double cand_cost = residuals(cand, &rho_p);
      if (cand_cost < cost) {
        double step_sq = 0.0;
        for (double v : b) step_sq += v * v;
        cur = cand;
        cost = cand_cost;
        rho = rho_p;
        lambda = std::max(lambda / 3.0, 1e-12);
        stepped = true;
        if (step_sq < 1e-24) return cur;
      } else {
        lambda *= 10.0;
      }
    }
    if (!stepped) break;  // includes the already-optimal zero-cost case
  }
  return cur;
}

double pose_error_deg(const RelativePose& estimate, const RelativePose& gt) {
  constexpr double kRadToDeg = 57.295779513082320876798154814105;
  // atan2 keeps full resolution near 0 and 180 degrees, where the
  // acos-of-trace form loses ~sqrt(eps) of precision
  Mat3 rel = transposed(estimate.rotation) * gt.rotation;
  double tr = rel(0, 0) + rel(1, 1) + rel(2, 2);
  Vec3 ax{rel(2, 1) - rel(1, 2), rel(0, 2) - rel(2, 0),
          rel(1, 0) - rel(0, 1)};
  double rot_deg = std::atan2(0.5 * norm(ax), 0.5 * (tr - 1.0)) * kRadToDeg;

  double gt_norm = norm(gt.translation);
  if (gt_norm < 1e-12)
    throw std::invalid_argument(
        "pose_error_deg: ground-truth translation is zero, direction undefined");
  double est_norm = norm(estimate.translation);
  double trans_deg;
  if (est_norm < 1e-12) {
    trans_deg = 180.0;  // no direction at all: maximal error
  } else {
    trans_deg = std::atan2(norm(cross(estimate.translation, gt.translation)),
                           dot(estimate.translation, gt.translation)) *
                kRadToDeg;
  }
  return std::max(rot_deg, trans_deg);
}

std::vector<double> pose_auc(const std::vector<double>& errors_deg,
                             const std::vector<double>& thresholds_deg) {
  if (errors_deg.empty())
    throw std::invalid_argument("pose_auc: empty error list");
  for (double t : thresholds_deg)
    if (t <= 0.0) throw std::invalid_argument("pose_auc: thresholds must be positive");
  std::vector<double> sorted = errors_deg;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());

  std::vector<double> aucs;
  aucs.reserve(thresholds_deg.size());
  for (double t : thresholds_deg) {
    double area = 0.0, prev = 0.0;
    size_t count = 0;
    for (size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] > t) break;
      area += (sorted[i] - prev) * (static_cast<double>(i) / n);
      prev = sorted[i];
      count = i + 1;
    }
    area += (t - prev) * (static_cast<double>(count) / n);
    aucs.push_back(area / t);
  }
  return aucs;
}

Mat3 dlt_homography(const std::vector<Vec2>& pts_a,
                    const std::vector<Vec2>& pts_b) {
  if (pts_a.size() < 4 || pts_a.size() != pts_b.size())
    throw std::invalid_argument("dlt_homography: need at least 4 matches");
  std::vector<Vec2> na, nb;
  NormalizeTransform ta = hartley_normalize(pts_a, na);
  NormalizeTransform tb = hartley_normalize(pts_b, nb);
  if (!ta.ok || !tb.ok)
    throw std::invalid_argument("dlt_homography: degenerate point set");

  std::vector<double> ata(81, 0.0);
  auto accumulate = [&](const double row[9]) {
    for (int r = 0; r < 9; ++r)
      for (int c = 0; c < 9; ++c)
        ata[static_cast<size_t>(r) * 9 + c] += row[r] * row[c];
  };
  for (size_t i = 0; i < na.size(); ++i) {
    double x = na[i].x, y = na[i].y, u = nb[i].x, v = nb[i].y;
    double row1[9] = {x, y, 1, 0, 0, 0, -u * x, -u * y, -u};
    double row2[9] = {0, 0, 0, x, y, 1, -v * x, -v * y, -v};
    accumulate(row1);
    accumulate(row2);
  }
  std::vector<double> evals, evecs;
  jacobi_eigen_sym(ata, 9, evals, evecs);
  // a unique solution needs exactly one vanishing eigenvalue; a second one
  // means the configuration (collinear or coincident points) does not pin
  // the homography down
  if (evals[7] <= 1e-12 * std::max(evals[0], 1e-300))
    throw std::invalid_argument("dlt_homography: degenerate configuration");
  Mat3 hn;
  for (int i = 0; i < 9; ++i)
    hn.m[static_cast<size_t>(i)] = evecs[static_cast<size_t>(i) * 9 + 8];
  Mat3 h = inverse(tb.t) * hn * ta.t;
  double fro = 0.0;
  for (double x : h.m) fro += x * x;
  fro = std::sqrt(fro);
  if (fro < 1e-300)
    throw std::runtime_error("dlt_homography: null solution");
  double sign = h(2, 2) >= 0.0 ? 1.0 : -1.0;
  for (double& x : h.m) x = x * sign / fro;
  return h;
}

Vec2 apply_homography(const Mat3& h, const Vec2& p) {
  Vec3 q = h * Vec3{p.x, p.y, 1.0};
  if (std::abs(q.z) < 1e-300)
    throw std::runtime_error("apply_homography: point maps to infinity");
  return {q.x / q.z, q.y / q.z};
}

HomographyResult estimate_homography_ransac(const std::vector<Vec2>& pts_a,
                                            const std::vector<Vec2>& pts_b,
                                            int iterations,
                                            double threshold_px,
                                            uint64_t seed) {
  if (pts_a.size() != pts_b.size())
    throw std::invalid_argument("estimate_homography_ransac: size mismatch");
  const int n = static_cast<int>(pts_a.size());
  HomographyResult result;
  if (n < 4) {
    result.failure = "need at least 4 matches";
    return result;
  }

  auto count_inliers = [&](const Mat3& h, std::vector<char>* mask) {
    int count = 0;
    if (mask) mask->assign(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      Vec3 q = h * Vec3{pts_a[static_cast<size_t>(i)].x,
                        pts_a[static_cast<size_t>(i)].y, 1.0};
      if (std::abs(q.z) < 1e-12) continue;
      double dx = q.x / q.z - pts_b[static_cast<size_t>(i)].x;
      double dy = q.y / q.z - pts_b[static_cast<size_t>(i)].y;
      if (dx * dx + dy * dy <= threshold_px * threshold_px) {
        ++count;
        if (mask) (*mask)[static_cast<size_t>(i)] = 1;
      }
    }
    return count;
  };

  // truncated robust score, same rationale as the essential-matrix loop
  const double thresh_sq = threshold_px * threshold_px;
  auto truncated_score = [&](const Mat3& h) {
    double score = 0.0;
    for (int i = 0; i < n; ++i) {
      Vec3 q = h * Vec3{pts_a[static_cast<size_t>(i)].x,
                        pts_a[static_cast<size_t>(i)].y, 1.0};
      if (std::abs(q.z) < 1e-12) {
        score += thresh_sq;
        continue;
      }
      double dx = q.x / q.z - pts_b[static_cast<size_t>(i)].x;
      double dy = q.y / q.z - pts_b[static_cast<size_t>(i)].y;
      score += std::min(dx * dx + dy * dy, thresh_sq);
    }
    return score;
  };

  double best_score = std::numeric_limits<double>::infinity();
  Mat3 best_h;
  bool have_model = false;
  for (int iter = 0; iter < iterations; ++iter) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(iter)));
    int idx[4];
    int picked = 0;
    while (picked < 4) {
      int candidate = rng.uniform_int(0, n - 1);
      bool dup = false;
      for (int j = 0; j < picked; ++j)
        if (idx[j] == candidate) dup = true;
      if (!dup) idx[picked++] = candidate;
    }
    std::vector<Vec2> sa(4), sb(4);
    for (int j = 0; j < 4; ++j) {
      sa[static_cast<size_t>(j)] = pts_a[static_cast<size_t>(idx[j])];
      sb[static_cast<size_t>(j)] = pts_b[static_cast<size_t>(idx[j])];
    }
    Mat3 h;
    try {
      h = dlt_homography(sa, sb);
    } catch (const std::exception&) {
      continue;
    }
    double score = truncated_score(h);
    if (score < best_score) {
      best_score = score;
      best_h = h;
      have_model = true;
    }
  }
  if (!have_model) {
    result.failure = "every minimal sample was degenerate";
    return result;
  }

  // iterated consensus refit, same rationale as the essential-matrix loop
  std::vector<char> mask;
  for (int round = 0; round < 10; ++round) {
    count_inliers(best_h, &mask);
    std::vector<Vec2> ia, ib;
    for (int i = 0; i < n; ++i) {
      if (mask[static_cast<size_t>(i)]) {
        ia.push_back(pts_a[static_cast<size_t>(i)]);
        ib.push_back(pts_b[static_cast<size_t>(i)]);
      }
    }
    if (ia.size() < 4) break;
    Mat3 h2;
    try {
      h2 = dlt_homography(ia, ib);
    } catch (const std::exception&) {
      break;
    }
    double s2 = truncated_score(h2);
    if (s2 >= best_score) break;
    best_score = s2;
    best_h = h2;
  }

  result.h = best_h;
  result.inlier_count = count_inliers(best_h, &result.inlier_mask);
  result.ok = true;
  return result;
}

double homography_corner_error(const Mat3& estimate, const Mat3& gt, int width,
                               int height) {
  Vec2 corners[4] = {{0.0, 0.0},
                     {static_cast<double>(width - 1), 0.0},
                     {static_cast<double>(width - 1), static_cast<double>(height - 1)},
                     {0.0, static_cast<double>(height - 1)}};
  double total = 0.0;
  for (const Vec2& c : corners) {
    Vec2 pe = apply_homography(estimate, c);
    Vec2 pg = apply_homography(gt, c);
    total += std::hypot(pe.x - pg.x, pe.y - pg.y);
  }
  return total / 4.0;
}

void write_geometry_json(const std::string& path, const TwoViewGeometry& geom,
                         const std::string& depth_a_ref,
                         const std::string& depth_b_ref,
                         const Mat3* homography, uint64_t seed) {
  nlohmann::json j;
  j["intrinsics_a"] = {{"fx", geom.ka.fx}, {"fy", geom.ka.fy},
                       {"cx", geom.ka.cx}, {"cy", geom.ka.cy}};
  j["intrinsics_b"] = {{"fx", geom.kb.fx}, {"fy", geom.kb.fy},
                       {"cx", geom.kb.cx}, {"cy", geom.kb.cy}};
  j["rotation"] = geom.pose.rotation.m;
  j["translation"] = {geom.pose.translation.x, geom.pose.translation.y,
                      geom.pose.translation.z};
  j["depth_a"] = depth_a_ref;
  j["depth_b"] = depth_b_ref;
  if (homography) j["homography"] = homography->m;
  j["seed"] = seed;
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << j.dump(2) << "\n";
}

TwoViewGeometry read_geometry_json(const std::string& path,
                                   bool* has_homography, Mat3* homography,
                                   uint64_t* seed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }
  TwoViewGeometry geom;
  auto read_k = [&](const char* key) {
    const auto& jk = j.at(key);
    return CameraIntrinsics{jk.at("fx").get<double>(), jk.at("fy").get<double>(),
                            jk.at("cx").get<double>(), jk.at("cy").get<double>()};
  };
  geom.ka = read_k("intrinsics_a");
  geom.kb = read_k("intrinsics_b");
  auto rot = j.at("rotation").get<std::array<double, 9>>();
  geom.pose.rotation.m = rot;
  auto tr = j.at("translation").get<std::array<double, 3>>();
  geom.pose.translation = {tr[0], tr[1], tr[2]};
  std::filesystem::path dir = std::filesystem::path(path).parent_path();
  geom.depth_a = read_tensor((dir / j.at("depth_a").get<std::string>()).string());
  geom.depth_b = read_tensor((dir / j.at("depth_b").get<std::string>()).string());
  if (has_homography) *has_homography = j.contains("homography");
  if (homography && j.contains("homography"))
    homography->m = j.at("homography").get<std::array<double, 9>>();
  if (seed) *seed = j.value("seed", 0ull);
  return geom;
}

}  // namespace comatch

#include "comatch/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "comatch/dcat.hpp"
#include "comatch/geometry.hpp"
#include "comatch/matcher.hpp"
#include "comatch/rng.hpp"
#include "comatch/supervision.hpp"
#include "comatch/tensor.hpp"
#include "comatch/tensor_io.hpp"

namespace comatch {

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int i = 0; i < t.size(); ++i)
    t.at(i) = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return 1e30;
  double worst = 0.0;
  for (int i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.at(i)) - b.at(i)));
  return worst;
}

// reference convolution written as the direct definition
Tensor conv_reference(const Tensor& in, const Tensor& ker, int stride, int pad,
                      bool depthwise) {
  int h = in.dim(0), w = in.dim(1), cin = in.dim(2);
  int k = ker.dim(0);
  int cout = depthwise ? cin : ker.dim(3);
  int oh = (h + 2 * pad - k) / stride + 1;
  int ow = (w + 2 * pad - k) / stride + 1;
  Tensor out({oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            int y = oy * stride + ky - pad, x = ox * stride + kx - pad;
            if (y < 0 || y >= h || x < 0 || x >= w) continue;
            if (depthwise)
              acc += static_cast<double>(in.at(y, x, co)) * ker.at(ky, kx, co);
            else
              for (int ci = 0; ci < cin; ++ci)
                acc += static_cast<double>(in.at(y, x, ci)) *
                       ker.at(ky, kx, ci, co);
          }
        out.at(oy, ox, co) = static_cast<float>(acc);
      }
  return out;
}

bool check_conv(Rng& rng) {
  for (int trial = 0; trial < 4; ++trial) {
    int k = (trial % 2) ? 3 : 1;
    int stride = 1 + trial % 2;
    bool depthwise = trial >= 2;
    int c = 3;
    Tensor in = random_tensor(rng, {8, 10, c});
    Tensor ker = depthwise ? random_tensor(rng, {k, k, c})
                           : random_tensor(rng, {k, k, c, 4});
    Tensor got = conv2d(in, ker, stride, Padding::kSame, depthwise);
    Tensor want = conv_reference(in, ker, stride, (k - 1) / 2, depthwise);
    if (max_abs_diff(got, want) > 1e-5) return false;
  }
  return true;
}

bool check_pool_and_resize(Rng& rng) {
  Tensor in = random_tensor(rng, {6, 8, 3});
  Tensor got = max_pool2d(in, 2);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) {
        float want = std::max(std::max(in.at(2 * y, 2 * x, c),
                                       in.at(2 * y, 2 * x + 1, c)),
                              std::max(in.at(2 * y + 1, 2 * x, c),
                                       in.at(2 * y + 1, 2 * x + 1, c)));
        if (got.at(y, x, c) != want) return false;
      }
  Tensor img({2, 2, 1}, {0.0f, 1.0f, 0.0f, 1.0f});
  Tensor up = bilinear_resize(img, 2, 4);
  const float want_row[4] = {0.0f, 0.25f, 0.75f, 1.0f};
  for (int x = 0; x < 4; ++x)
    if (std::abs(up.at(0, x, 0) - want_row[x]) > 1e-6f) return false;
  return true;
}

bool check_dual_softmax_mnn(Rng& rng) {
  Tensor corr = random_tensor(rng, {5, 7}, -2.0, 2.0);
  Tensor got = dual_softmax(corr);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j) {
      double row = 0.0, col = 0.0;
      for (int jj = 0; jj < 7; ++jj)
        row += std::exp(static_cast<double>(corr.at(i, jj)) - corr.at(i, j));
      for (int ii = 0; ii < 5; ++ii)
        col += std::exp(static_cast<double>(corr.at(ii, j)) - corr.at(i, j));
      double want = 1.0 / (row * col);
      if (std::abs(want - got.at(i, j)) > 1e-5) return false;
    }
  auto matches = mnn_filter(got, 0.0f);
  for (const CoarseMatch& m : matches) {
    for (int jj = 0; jj < 7; ++jj)
      if (got.at(m.a_index, jj) > got.at(m.a_index, m.b_index)) return false;
    for (int ii = 0; ii < 5; ++ii)
      if (got.at(ii, m.b_index) > got.at(m.a_index, m.b_index)) return false;
  }
  return true;
}

bool check_condense_example() {
  Tensor features({2, 2, 1}, {4.0f, 0.0f, 0.0f, 0.0f});
  Tensor covis({2, 2, 1}, {1.0f, 0.0f, 0.0f, 0.0f});
  Tensor got = condense_key_value(features, covis, 2);
  double e = std::exp(1.0);
  double want = 4.0 * e / (e + 3.0);
  return std::abs(got.at(0, 0, 0) - want) < 1e-6;
}

bool check_attention(Rng& rng) {
  Tensor q = random_tensor(rng, {3, 4});
  Tensor k = random_tensor(rng, {5, 4});
  Tensor v = random_tensor(rng, {5, 4});
  Tensor c = random_tensor(rng, {5}, 0.1, 1.0);
  Tensor vran = vanilla_attention(q, k, v);
  Tensor cov = covis_attention(q, k, v, c);
  for (int i = 0; i < 3; ++i) {
    double logits[5];
    double mx = -1e300;
    for (int j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (int t = 0; t < 4; ++t)
        acc += static_cast<double>(q.at(i, t)) * k.at(j, t);
      logits[j] = acc / 2.0;  // sqrt(4)
      mx = std::max(mx, logits[j]);
    }
    double sum = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      sum += l;
    }
    for (int t = 0; t < 4; ++t) {
      double plain = 0.0, weighted = 0.0;
      for (int j = 0; j < 5; ++j) {
        plain += logits[j] / sum * v.at(j, t);
        weighted += logits[j] / sum * v.at(j, t) * c.at(j);
      }
      if (std::abs(plain - vran.at(i, t)) > 1e-5) return false;
      if (std::abs(weighted - cov.at(i, t)) > 1e-5) return false;
    }
  }
  Tensor ones = Tensor::full({5}, 1.0f);
  return max_abs_diff(vanilla_attention(q, k, v),
                      covis_attention(q, k, v, ones)) < 1e-6;
}

bool check_rope(Rng& rng) {
  RopeBasis basis = make_rope_basis(8);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor qk = random_tensor(rng, {2, 8});
    float xi = static_cast<float>(rng.uniform(0.0, 10.0));
    float yi = static_cast<float>(rng.uniform(0.0, 10.0));
    float xj = static_cast<float>(rng.uniform(0.0, 10.0));
    float yj = static_cast<float>(rng.uniform(0.0, 10.0));
    float tx = static_cast<float>(rng.uniform(-5.0, 5.0));
    float ty = static_cast<float>(rng.uniform(-5.0, 5.0));
    std::vector<std::array<float, 2>> p1{{xi, yi}, {xj, yj}};
    std::vector<std::array<float, 2>> p2{{xi + tx, yi + ty}, {xj + tx, yj + ty}};
    Tensor r1 = rope_rotate(qk, p1, basis);
    Tensor r2 = rope_rotate(qk, p2, basis);
    double s1 = 0.0, s2 = 0.0, n0 = 0.0, n1 = 0.0;
    for (int t = 0; t < 8; ++t) {
      s1 += static_cast<double>(r1.at(0, t)) * r1.at(1, t);
      s2 += static_cast<double>(r2.at(0, t)) * r2.at(1, t);
      n0 += static_cast<double>(qk.at(0, t)) * qk.at(0, t);
      n1 += static_cast<double>(r1.at(0, t)) * r1.at(0, t);
    }
    if (std::abs(s1 - s2) > 1e-5) return false;
    if (std::abs(std::sqrt(n0) - std::sqrt(n1)) > 1e-5) return false;
  }
  return true;
}

bool check_sampson() {
  RelativePose pose{Mat3::identity(), {1.0, 0.0, 0.0}};
  Mat3 e = essential_from_pose(pose);
  double d = sampson_distance({0.0, 0.0}, {0.0, 0.1}, e);
  if (std::abs(d - 0.005) > 1e-9) return false;
  // noiseless correspondence: x_b^T E x_a = 0 exactly
  Vec3 p{0.3, -0.2, 2.0};
  Vec2 pa{p.x / p.z, p.y / p.z};
  Vec2 pb{(p.x - 1.0) / p.z, p.y / p.z};
  return sampson_distance(pa, pb, e) < 1e-10;
}

bool check_pose_auc() {
  std::vector<double> errors{0.0, 10.0};
  std::vector<double> auc = pose_auc(errors, {10.0});
  return std::abs(auc[0] - 0.5) < 1e-12;
}

bool check_tensor_io() {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "comatch_selftest";
  fs::create_directories(dir);
  fs::path file = dir / "roundtrip.tsr";
  Tensor t({2, 3}, {1.5f, -2.25f, 0.0f, 3.0f, -0.5f, 4.75f});
  write_tensor(file.string(), t);
  Tensor back = read_tensor(file.string());
  if (!back.same_shape(t)) return false;
  for (int i = 0; i < t.size(); ++i)
    if (back.at(i) != t.at(i)) return false;
  // corrupting the magic must produce an error naming the offset
  {
    std::ofstream out(file, std::ios::binary);
    out << "BAD!";
  }
  try {
    read_tensor(file.string());
    return false;
  } catch (const std::exception& ex) {
    if (std::string(ex.what()).find("offset") == std::string::npos)
      return false;
  }
  return true;
}

bool check_minimal_pose_recovery(Rng& rng) {
  Mat3 r = Mat3::identity();
  {
    double a = 0.15, b = -0.1, c = 0.07;
    Mat3 rx = Mat3::identity(), ry = Mat3::identity(), rz = Mat3::identity();
    rx(1, 1) = std::cos(a); rx(1, 2) = -std::sin(a);
    rx(2, 1) = std::sin(a); rx(2, 2) = std::cos(a);
    ry(0, 0) = std::cos(b); ry(0, 2) = std::sin(b);
    ry(2, 0) = -std::sin(b); ry(2, 2) = std::cos(b);
    rz(0, 0) = std::cos(c); rz(0, 1) = -std::sin(c);
    rz(1, 0) = std::sin(c); rz(1, 1) = std::cos(c);
    r = rz * ry * rx;
  }
  Vec3 t = normalized({0.6, -0.2, 0.15});
  CameraIntrinsics k{160.0, 160.0, 63.5, 63.5};
  std::vector<Vec2> pa, pb;
  for (int i = 0; i < 60; ++i) {
    Vec3 p{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(3.0, 6.0)};
    Vec3 q = r * p + t;
    if (q.z <= 0.1) continue;
    pa.push_back({k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy});
    pb.push_back({k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy});
  }
  if (pa.size() < 20) return false;
  RansacResult res = estimate_essential_ransac(pa, pb, k, k, 200, 0.5, 7);
  if (!res.ok) return false;
  std::vector<Vec2> na, nb;
  for (size_t i = 0; i < pa.size(); ++i) {
    na.push_back({(pa[i].x - k.cx) / k.fx, (pa[i].y - k.cy) / k.fy});
    nb.push_back({(pb[i].x - k.cx) / k.fx, (pb[i].y - k.cy) / k.fy});
  }
  DecomposeResult dec = decompose_essential(res.essential, na, nb);
  double err = pose_error_deg(dec.pose, {r, t});
  return !dec.degenerate && err < 0.01;
}

bool check_loss_examples() {
  CameraIntrinsics k1{1000, 1000, 0, 0};
  if (std::abs(theta_f(k1, k1) - 3.75e-4) > 1e-12) return false;
  CameraIntrinsics k2{500, 500, 0, 0};
  if (std::abs(theta_f(k2, k2) - 7.5e-4) > 1e-12) return false;
  if (std::abs(total_loss(1, 1, 1, 1, 1.0, 0.25, 0.25) - 2.5) > 1e-12)
    return false;
  std::vector<Tensor> preds{Tensor::full({4, 4, 1}, 0.5f)};
  std::vector<Tensor> labels{Tensor({4, 4, 1})};
  for (int i = 0; i < 16; ++i) labels[0].at(i) = (i % 2) ? 1.0f : 0.0f;
  if (std::abs(covisibility_loss(preds, labels) - std::log(2.0)) > 1e-6)
    return false;
  Tensor corr = Tensor::full({64, 64}, 0.7f);  // uniform: every cell 1/4096
  std::vector<std::pair<int, int>> cells{{3, 5}, {10, 60}};
  return std::abs(fine_stage1_loss(corr, cells) - std::log(4096.0)) < 1e-5;
}

std::vector<std::pair<Vec2, Vec2>> random_epipolar_instances(Rng& rng, int n,
                                                             Mat3* e_out) {
  double a = rng.uniform(-0.3, 0.3), b = rng.uniform(-0.3, 0.3);
  Mat3 rx = Mat3::identity(), ry = Mat3::identity();
  rx(1, 1) = std::cos(a); rx(1, 2) = -std::sin(a);
  rx(2, 1) = std::sin(a); rx(2, 2) = std::cos(a);
  ry(0, 0) = std::cos(b); ry(0, 2) = std::sin(b);
  ry(2, 0) = -std::sin(b); ry(2, 2) = std::cos(b);
  RelativePose pose{ry * rx, normalized({rng.uniform(0.2, 1.0),
                                         rng.uniform(-0.5, 0.5),
                                         rng.uniform(-0.3, 0.3)})};
  *e_out = essential_from_pose(pose);
  std::vector<std::pair<Vec2, Vec2>> out;
  for (int i = 0; i < n; ++i) {
    // noisy pairs: generic points, not correspondences
    out.push_back({{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)},
                   {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)}});
  }
  return out;
}

double gradcheck_sampson(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Mat3 e;
    auto pts = random_epipolar_instances(rng, 1, &e);
    Vec2 pa = pts[0].first, pb = pts[0].second;
    if (sampson_distance(pa, pb, e) < 1e-12) continue;
    std::array<double, 4> g = sampson_gradient(pa, pb, e);
    auto f = [&](const std::vector<double>& x) {
      return sampson_distance({x[0], x[1]}, {x[2], x[3]}, e);
    };
    worst = std::max(worst,
                     finite_diff_check(f, {g[0], g[1], g[2], g[3]},
                                       {pa.x, pa.y, pb.x, pb.y}, 1e-4));
  }
  return worst;
}

double gradcheck_stage2(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Mat3 e;
    auto pts = random_epipolar_instances(rng, 6, &e);
    std::vector<Vec2> pa, pb;
    for (auto& [a, b] : pts) {
      pa.push_back(a);
      pb.push_back(b);
    }
    // keep every instance far from the clamp boundary
    double max_d = 0.0;
    for (size_t i = 0; i < pa.size(); ++i)
      max_d = std::max(max_d, sampson_distance(pa[i], pb[i], e));
    double theta = 2.0 * std::sqrt(max_d) + 0.05;

    std::vector<std::array<double, 4>> grads;
    fine_stage2_loss(pa, pb, e, theta, &grads);
    std::vector<double> flat_x, flat_g;
    for (size_t i = 0; i < pa.size(); ++i) {
      flat_x.insert(flat_x.end(), {pa[i].x, pa[i].y, pb[i].x, pb[i].y});
      flat_g.insert(flat_g.end(), grads[i].begin(), grads[i].end());
    }
    auto f = [&](const std::vector<double>& x) {
      std::vector<Vec2> qa(pa.size()), qb(pb.size());
      for (size_t i = 0; i < pa.size(); ++i) {
        qa[i] = {x[4 * i], x[4 * i + 1]};
        qb[i] = {x[4 * i + 2], x[4 * i + 3]};
      }
      return fine_stage2_loss(qa, qb, e, theta, nullptr);
    };
    worst = std::max(worst, finite_diff_check(f, flat_g, flat_x, 1e-5));
  }
  return worst;
}

double gradcheck_soft_argmax(Rng& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    float s[9];
    for (float& v : s) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    auto [ex, ey] = soft_argmax3x3(s);
    // analytic: dE/ds_j = p_j (o_j - E)
    double mx = s[0];
    for (float v : s) mx = std::max(mx, static_cast<double>(v));
    double w[9], sum = 0.0;
    for (int i = 0; i < 9; ++i) {
      w[i] = std::exp(s[i] - mx);
      sum += w[i];
    }
    std::vector<double> gx(9), gy(9);
    for (int i = 0; i < 9; ++i) {
      double p = w[i] / sum;
      gx[static_cast<size_t>(i)] = p * ((i % 3 - 1) - ex);
      gy[static_cast<size_t>(i)] = p * ((i / 3 - 1) - ey);
    }
    std::vector<double> x0(9);
    for (int i = 0; i < 9; ++i) x0[static_cast<size_t>(i)] = s[i];
    auto fx = [](const std::vector<double>& x) {
      float s2[9];
      for (int i = 0; i < 9; ++i) s2[i] = static_cast<float>(x[static_cast<size_t>(i)]);
      return soft_argmax3x3(s2).first;
    };
    auto fy = [](const std::vector<double>& x) {
      float s2[9];
      for (int i = 0; i < 9; ++i) s2[i] = static_cast<float>(x[static_cast<size_t>(i)]);
      return soft_argmax3x3(s2).second;
    };
    worst = std::max(worst, finite_diff_check(fx, gx, x0, 1e-3));
    worst = std::max(worst, finite_diff_check(fy, gy, x0, 1e-3));
  }
  return worst;
}

}  // namespace

CheckReport run_selftest(uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5e1full));
  CheckReport report;
  auto add = [&](const char* name, bool ok) {
    report.checks.emplace_back(name, ok);
  };
  add("conv2d matches reference loops", check_conv(rng));
  add("pooling and bilinear resize", check_pool_and_resize(rng));
  add("dual softmax and mutual nearest neighbors", check_dual_softmax_mnn(rng));
  add("weighted window condensing example", check_condense_example());
  add("attention kernels match reference", check_attention(rng));
  add("rotary encoding invariances", check_rope(rng));
  add("epipolar distance worked example", check_sampson());
  add("recall curve area example", check_pose_auc());
  add("tensor serialization round-trip", check_tensor_io());
  add("minimal pose recovery", check_minimal_pose_recovery(rng));
  add("loss function worked examples", check_loss_examples());
  return report;
}

CheckReport run_gradcheck(uint64_t seed) {
  Rng rng(mix_seed(seed, 0x6badull));
  CheckReport report;
  auto add = [&](const char* name, double worst, double tol) {
    char line[160];
    std::snprintf(line, sizeof(line), "%s: max rel err %.3e (tol %.0e)", name,
                  worst, tol);
    report.checks.emplace_back(line, worst <= tol);
  };
  add("epipolar distance gradient", gradcheck_sampson(rng), 1e-4);
  add("refinement loss gradient", gradcheck_stage2(rng), 1e-4);
  // float32 scores bound the achievable finite-difference accuracy
  add("soft-argmax sensitivity", gradcheck_soft_argmax(rng), 5e-3);
  return report;
}

}  // namespace comatch

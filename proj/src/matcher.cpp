#include "comatch/matcher.hpp"

#include <cmath>
#include <stdexcept>

#include "comatch/rng.hpp"

namespace comatch {

namespace {

Tensor flatten_tokens(const Tensor& f, const char* who) {
  if (f.rank() == 2) return f;
  if (f.rank() == 3)
    return Tensor({f.dim(0) * f.dim(1), f.dim(2)}, f.vec());
  throw std::invalid_argument(std::string(who) + ": expected [h,w,d] or [n,d]");
}

Tensor l2_normalize_rows(const Tensor& f) {
  Tensor out(f.shape());
  const int n = f.dim(0), d = f.dim(1);
  for (int i = 0; i < n; ++i) {
    double sq = 0.0;
    for (int j = 0; j < d; ++j) sq += static_cast<double>(f.at(i, j)) * f.at(i, j);
    double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
    for (int j = 0; j < d; ++j)
      out.at(i, j) = static_cast<float>(f.at(i, j) * inv);
  }
  return out;
}

Tensor he_kernel4(Rng& rng, int k, int cin, int cout) {
  Tensor t({k, k, cin, cout});
  double stddev = std::sqrt(2.0 / (static_cast<double>(k) * k * cin));
  for (int i = 0; i < t.size(); ++i)
    t.at(i) = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

Tensor he_matrix(Rng& rng, int rows, int cols) {
  Tensor t({rows, cols});
  double stddev = std::sqrt(2.0 / rows);
  for (int i = 0; i < t.size(); ++i)
    t.at(i) = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

Tensor apply_conv_bias(const Tensor& x, const ConvLayer& layer) {
  Tensor y = conv2d(x, layer.kernel, layer.stride, Padding::kSame);
  for (int i = 0; i < y.dim(0); ++i)
    for (int j = 0; j < y.dim(1); ++j)
      for (int c = 0; c < y.dim(2); ++c) y.at(i, j, c) += layer.bias.at(c);
  return y;
}

}  // namespace

Tensor correlation_matrix(const Tensor& fa, const Tensor& fb, float tau) {
  Tensor a = l2_normalize_rows(flatten_tokens(fa, "correlation_matrix"));
  Tensor b = l2_normalize_rows(flatten_tokens(fb, "correlation_matrix"));
  if (a.dim(1) != b.dim(1))
    throw std::invalid_argument("correlation_matrix: feature dims differ");
  Tensor corr = matmul(a, transpose(b));
  return scale(corr, tau);
}

Tensor dual_softmax(const Tensor& corr) {
  if (corr.rank() != 2)
    throw std::invalid_argument("dual_softmax: expected [nA,nB]");
  Tensor rows = softmax(corr, 1);
  Tensor cols = softmax(corr, 0);
  return mul(rows, cols);
}

std::vector<CoarseMatch> mnn_filter(const Tensor& scores, float threshold) {
  if (scores.rank() != 2)
    throw std::invalid_argument("mnn_filter: expected [nA,nB]");
  const int na = scores.dim(0), nb = scores.dim(1);
  std::vector<int> best_col(static_cast<size_t>(na), -1);
  std::vector<int> best_row(static_cast<size_t>(nb), -1);
  for (int i = 0; i < na; ++i) {
    float best = -1.0f;
    for (int j = 0; j < nb; ++j) {
      float v = scores.at(i, j);
      if (v > best) {  // strict: first (lowest j) wins ties
        best = v;
        best_col[static_cast<size_t>(i)] = j;
      }
    }
  }
  for (int j = 0; j < nb; ++j) {
    float best = -1.0f;
    for (int i = 0; i < na; ++i) {
      float v = scores.at(i, j);
      if (v > best) {
        best = v;
        best_row[static_cast<size_t>(j)] = i;
      }
    }
  }
  std::vector<CoarseMatch> matches;
  for (int i = 0; i < na; ++i) {
    int j = best_col[static_cast<size_t>(i)];
    if (j >= 0 && best_row[static_cast<size_t>(j)] == i &&
        scores.at(i, j) >= threshold) {
      matches.push_back({i, j, scores.at(i, j)});
    }
  }
  return matches;
}

FineParams init_fine(uint64_t seed) {
  FineParams p;
  uint64_t stream = 0;
  auto next_rng = [&]() { return Rng(mix_seed(seed, stream++)); };
  {
    Rng rng = next_rng();
    p.dec1 = {he_kernel4(rng, 3, 384, 128), Tensor({128}), 1};
  }
  {
    Rng rng = next_rng();
    p.dec2 = {he_kernel4(rng, 3, 192, 64), Tensor({64}), 1};
  }
  {
    Rng rng = next_rng();
    p.dec3 = {he_kernel4(rng, 3, 64, 64), Tensor({64}), 1};
  }
  {
    Rng rng = next_rng();
    p.consolidate.wq = he_matrix(rng, 64, 64);
    p.consolidate.wk = he_matrix(rng, 64, 64);
    p.consolidate.wv = he_matrix(rng, 64, 64);
    p.consolidate.wo = Tensor({64, 64});  // zero: consolidation starts as identity
  }
  return p;
}

Tensor fuse_fine(const Tensor& coarse, const Tensor& f4, const Tensor& f2,
                 const FineParams& params) {
  if (coarse.rank() != 3 || coarse.dim(2) != 256)
    throw std::invalid_argument("fuse_fine: coarse must be [h/8,w/8,256]");
  const int h8 = coarse.dim(0), w8 = coarse.dim(1);
  if (f4.dim(0) != 2 * h8 || f4.dim(1) != 2 * w8 || f4.dim(2) != 128)
    throw std::invalid_argument("fuse_fine: f4 shape mismatch");
  if (f2.dim(0) != 4 * h8 || f2.dim(1) != 4 * w8 || f2.dim(2) != 64)
    throw std::invalid_argument("fuse_fine: f2 shape mismatch");

  Tensor x = bilinear_resize(coarse, 2 * h8, 2 * w8);
  x = relu(apply_conv_bias(concat_channels(x, f4), params.dec1));
  x = bilinear_resize(x, 4 * h8, 4 * w8);
  x = relu(apply_conv_bias(concat_channels(x, f2), params.dec2));
  x = bilinear_resize(x, 8 * h8, 8 * w8);
  return apply_conv_bias(x, params.dec3);
}

namespace {

// single bidirectional vanilla cross-attention residual between two token
// sets, shared projections
void consolidate_pair(Tensor& ta, Tensor& tb, const AttentionParams& ap,
                      int heads) {
  const int n = ta.dim(0), m = tb.dim(0), d = ta.dim(1);
  const int dh = d / heads;
  auto attend = [&](const Tensor& xq, const Tensor& xkv) {
    Tensor q = matmul(xq, ap.wq);
    Tensor k = matmul(xkv, ap.wk);
    Tensor v = matmul(xkv, ap.wv);
    Tensor merged({xq.dim(0), d});
    Tensor qh({xq.dim(0), dh}), kh({xkv.dim(0), dh}), vh({xkv.dim(0), dh});
    for (int hh = 0; hh < heads; ++hh) {
      for (int i = 0; i < xq.dim(0); ++i)
        for (int c = 0; c < dh; ++c) qh.at(i, c) = q.at(i, hh * dh + c);
      for (int i = 0; i < xkv.dim(0); ++i)
        for (int c = 0; c < dh; ++c) {
          kh.at(i, c) = k.at(i, hh * dh + c);
          vh.at(i, c) = v.at(i, hh * dh + c);
        }
      Tensor out = vanilla_attention(qh, kh, vh);
      for (int i = 0; i < xq.dim(0); ++i)
        for (int c = 0; c < dh; ++c) merged.at(i, hh * dh + c) = out.at(i, c);
    }
    return matmul(merged, ap.wo);
  };
  Tensor da = attend(ta, tb);
  Tensor db = attend(tb, ta);
  (void)n;
  (void)m;
  ta = add(ta, da);
  tb = add(tb, db);
}

}  // namespace

std::vector<PatchPair> crop_and_consolidate(const Tensor& fine_a,
                                            const Tensor& fine_b,
                                            const std::vector<CoarseMatch>& matches,
                                            const FineParams& params,
                                            int grid_w_a, int grid_w_b,
                                            int* border_dropped) {
  const int w = params.window;
  const int ha = fine_a.dim(0), wa = fine_a.dim(1), d = fine_a.dim(2);
  const int hb = fine_b.dim(0), wb = fine_b.dim(1);
  if (fine_b.dim(2) != d)
    throw std::invalid_argument("crop_and_consolidate: channel mismatch");
  int dropped = 0;
  std::vector<PatchPair> out;
  for (const CoarseMatch& m : matches) {
    int ra = m.a_index / grid_w_a, ca = m.a_index % grid_w_a;
    int rb = m.b_index / grid_w_b, cb = m.b_index % grid_w_b;
    int acx = ca * 8 + 4, acy = ra * 8 + 4;
    int bcx = cb * 8 + 4, bcy = rb * 8 + 4;
    int ax0 = acx - w / 2, ay0 = acy - w / 2;
    int bx0 = bcx - w / 2, by0 = bcy - w / 2;
    if (ax0 < 0 || ay0 < 0 || ax0 + w > wa || ay0 + w > ha || bx0 < 0 ||
        by0 < 0 || bx0 + w > wb || by0 + w > hb) {
      ++dropped;
      continue;
    }
    PatchPair pair;
    pair.parent = m;
    pair.ax0 = ax0;
    pair.ay0 = ay0;
    pair.bx0 = bx0;
    pair.by0 = by0;
    pair.a = Tensor({w, w, d});
    pair.b = Tensor({w, w, d});
    for (int y = 0; y < w; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < d; ++c) {
          pair.a.at(y, x, c) = fine_a.at(ay0 + y, ax0 + x, c);
          pair.b.at(y, x, c) = fine_b.at(by0 + y, bx0 + x, c);
        }
    Tensor ta({w * w, d}, pair.a.vec());
    Tensor tb({w * w, d}, pair.b.vec());
    consolidate_pair(ta, tb, params.consolidate, params.heads);
    pair.a = Tensor({w, w, d}, ta.vec());
    pair.b = Tensor({w, w, d}, tb.vec());
    out.push_back(std::move(pair));
  }
  if (border_dropped) *border_dropped = dropped;
  return out;
}

Stage1Result stage1_refine(const PatchPair& pair) {
  const int w = pair.a.dim(0), d = pair.a.dim(2);
  const int n = w * w;
  Tensor ta = l2_normalize_rows(Tensor({n, d}, pair.a.vec()));
  Tensor tb = l2_normalize_rows(Tensor({n, d}, pair.b.vec()));
  Tensor corr = matmul(ta, transpose(tb));

  std::vector<int> best_col(static_cast<size_t>(n), -1);
  std::vector<int> best_row(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    float best = -2.0f;
    for (int j = 0; j < n; ++j)
      if (corr.at(i, j) > best) {
        best = corr.at(i, j);
        best_col[static_cast<size_t>(i)] = j;
      }
  }
  for (int j = 0; j < n; ++j) {
    float best = -2.0f;
    for (int i = 0; i < n; ++i)
      if (corr.at(i, j) > best) {
        best = corr.at(i, j);
        best_row[static_cast<size_t>(j)] = i;
      }
  }

  Stage1Result res;
  float best_score = 0.0f;  // mutual pairs must clear a strictly positive score
  int best_i = -1, best_j = -1;
  for (int i = 0; i < n; ++i) {
    int j = best_col[static_cast<size_t>(i)];
    if (j < 0 || best_row[static_cast<size_t>(j)] != i) continue;
    float v = corr.at(i, j);
    if (v > best_score) {
      best_score = v;
      best_i = i;
      best_j = j;
    }
  }
  if (best_i < 0) {
    res.ax = w / 2;
    res.ay = w / 2;
    res.bx = w / 2;
    res.by = w / 2;
    res.low_confidence = true;
    res.score = 0.0f;
    return res;
  }
  res.ay = best_i / w;
  res.ax = best_i % w;
  res.by = best_j / w;
  res.bx = best_j % w;
  res.score = best_score;
  return res;
}

std::pair<double, double> soft_argmax3x3(const float scores[9]) {
  double mx = scores[0];
  for (int i = 1; i < 9; ++i) mx = std::max(mx, static_cast<double>(scores[i]));
  double w[9], sum = 0.0;
  for (int i = 0; i < 9; ++i) {
    w[i] = std::exp(static_cast<double>(scores[i]) - mx);
    sum += w[i];
  }
  double ex = 0.0, ey = 0.0;
  for (int dy = 0; dy < 3; ++dy)
    for (int dx = 0; dx < 3; ++dx) {
      double p = w[dy * 3 + dx] / sum;
      ex += p * (dx - 1);
      ey += p * (dy - 1);
    }
  return {ex, ey};
}

FineMatch stage2_refine(const Tensor& fine_a, const Tensor& fine_b,
                        const PatchPair& pair, const Stage1Result& s1,
                        float softmax_temp) {
  const int d = fine_a.dim(2);
  const int ha = fine_a.dim(0), wa = fine_a.dim(1);
  const int hb = fine_b.dim(0), wb = fine_b.dim(1);

  FineMatch fm;
  fm.parent = pair.parent;
  fm.low_confidence = s1.low_confidence;
  fm.score = s1.score;
  fm.s1_xa = pair.ax0 + s1.ax;
  fm.s1_ya = pair.ay0 + s1.ay;
  fm.s1_xb = pair.bx0 + s1.bx;
  fm.s1_yb = pair.by0 + s1.by;

  // average of the two consolidated stage-1 descriptors
  std::vector<double> mid(static_cast<size_t>(d));
  for (int c = 0; c < d; ++c)
    mid[static_cast<size_t>(c)] =
        0.5 * (static_cast<double>(pair.a.at(s1.ay, s1.ax, c)) +
               pair.b.at(s1.by, s1.bx, c));
  double sq = 0.0;
  for (double v : mid) sq += v * v;
  double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
  for (double& v : mid) v *= inv;

  auto refine_side = [&](const Tensor& fine, int cx, int cy, int width,
                         int height, double* out_x, double* out_y) {
    if (cx - 1 < 0 || cx + 1 >= width || cy - 1 < 0 || cy + 1 >= height) {
      *out_x = cx;
      *out_y = cy;
      fm.clamped = true;
      return;
    }
    float scores[9];
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        double dotp = 0.0, nsq = 0.0;
        for (int c = 0; c < d; ++c) {
          double v = fine.at(cy + dy, cx + dx, c);
          dotp += mid[static_cast<size_t>(c)] * v;
          nsq += v * v;
        }
        double denom = nsq > 0.0 ? std::sqrt(nsq) : 1.0;
        scores[(dy + 1) * 3 + (dx + 1)] =
            static_cast<float>(softmax_temp * dotp / denom);
      }
    auto [ex, ey] = soft_argmax3x3(scores);
    *out_x = cx + ex;
    *out_y = cy + ey;
  };

  refine_side(fine_a, fm.s1_xa, fm.s1_ya, wa, ha, &fm.xa, &fm.ya);
  refine_side(fine_b, fm.s1_xb, fm.s1_yb, wb, hb, &fm.xb, &fm.yb);
  return fm;
}

}  // namespace comatch

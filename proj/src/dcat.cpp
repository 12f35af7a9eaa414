#include "comatch/dcat.hpp"

#include <cmath>
#include <stdexcept>

#include "comatch/rng.hpp"

namespace comatch {

namespace {

Tensor he_matrix(Rng& rng, int rows, int cols) {
  Tensor t({rows, cols});
  double stddev = std::sqrt(2.0 / rows);
  for (int i = 0; i < t.size(); ++i)
    t.at(i) = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

Tensor as_matrix(const Tensor& t, int rows, int cols) {
  if (t.size() != rows * cols)
    throw std::invalid_argument("reshape size mismatch");
  return Tensor({rows, cols}, t.vec());
}

void check_grid(const Tensor& features, int window, const char* who) {
  if (features.rank() != 3)
    throw std::invalid_argument(std::string(who) + ": features must be [h,w,d]");
  if (features.dim(0) % window != 0 || features.dim(1) % window != 0)
    throw std::invalid_argument(std::string(who) +
                                ": grid dims must be divisible by the window");
}

}  // namespace

DcatParams init_dcat(uint64_t seed, int dim, int heads, int num_layers,
                     int window) {
  if (dim % heads != 0)
    throw std::invalid_argument("init_dcat: dim must be divisible by heads");
  if ((dim / heads) % 4 != 0)
    throw std::invalid_argument("init_dcat: head dim must be divisible by 4");
  DcatParams p;
  p.dim = dim;
  p.heads = heads;
  p.num_layers = num_layers;
  p.window = window;
  p.rope = make_rope_basis(dim / heads);
  p.layers.resize(static_cast<size_t>(num_layers));

  uint64_t stream = 0;
  auto next_rng = [&]() { return Rng(mix_seed(seed, stream++)); };

  for (int l = 0; l < num_layers; ++l) {
    DcatLayerParams& lp = p.layers[static_cast<size_t>(l)];
    if (l > 0) {
      Rng rng = next_rng();
      lp.covis_w1 = he_matrix(rng, dim, dim / 2);
      lp.covis_b1 = Tensor({dim / 2});
      lp.covis_w2 = he_matrix(rng, dim / 2, 1);
      lp.covis_b2 = Tensor({1});
    }
    {
      Rng rng = next_rng();
      lp.condense_kernel = Tensor({window, window, dim});
      double stddev = std::sqrt(2.0 / (static_cast<double>(window) * window));
      for (int i = 0; i < lp.condense_kernel.size(); ++i)
        lp.condense_kernel.at(i) = static_cast<float>(rng.normal(0.0, stddev));
      lp.condense_bias = Tensor({dim});
    }
    for (AttentionParams* ap : {&lp.self_attn, &lp.cross_attn}) {
      Rng rng = next_rng();
      ap->wq = he_matrix(rng, dim, dim);
      ap->wk = he_matrix(rng, dim, dim);
      ap->wv = he_matrix(rng, dim, dim);
      ap->wo = Tensor({dim, dim});  // zero: untrained block is identity
    }
    {
      Rng rng = next_rng();
      lp.fuse_w1 = he_matrix(rng, 2 * dim, dim);
      lp.fuse_b1 = Tensor({dim});
      lp.fuse_w2 = Tensor({dim, dim});  // zero
      lp.fuse_b2 = Tensor({dim});
    }
  }
  return p;
}

CovisibilityMap predict_covisibility(const Tensor& features,
                                     const DcatLayerParams& lp, int layer) {
  if (features.rank() != 3)
    throw std::invalid_argument("predict_covisibility: features must be [h,w,d]");
  const int h = features.dim(0), w = features.dim(1), d = features.dim(2);
  CovisibilityMap out;
  out.layer = layer;
  if (layer <= 1) {
    out.scores = Tensor::full({h, w, 1}, 1.0f);
    return out;
  }
  if (lp.covis_w1.empty())
    throw std::invalid_argument("predict_covisibility: layer params missing MLP");
  Tensor tokens = as_matrix(features, h * w, d);
  Tensor hidden = relu(linear(tokens, lp.covis_w1, lp.covis_b1));
  Tensor logit = linear(hidden, lp.covis_w2, lp.covis_b2);
  Tensor score = sigmoid(logit);
  out.scores = Tensor({h, w, 1}, score.vec());
  return out;
}

Tensor condense_query(const Tensor& features, const Tensor& covis,
                      const Tensor& kernel, const Tensor& bias, int window) {
  check_grid(features, window, "condense_query");
  if (covis.rank() != 3 || covis.dim(0) != features.dim(0) ||
      covis.dim(1) != features.dim(1) || covis.dim(2) != 1)
    throw std::invalid_argument("condense_query: covis must be [h,w,1]");
  const int h = features.dim(0), w = features.dim(1), d = features.dim(2);
  Tensor gated({h, w, d});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float c = covis.at(y, x, 0);
      for (int ch = 0; ch < d; ++ch)
        gated.at(y, x, ch) = features.at(y, x, ch) * c;
    }
  Tensor out = conv2d(gated, kernel, window, Padding::kValid, /*depthwise=*/true);
  for (int y = 0; y < out.dim(0); ++y)
    for (int x = 0; x < out.dim(1); ++x)
      for (int ch = 0; ch < d; ++ch) out.at(y, x, ch) += bias.at(ch);
  return out;
}

Tensor condense_key_value(const Tensor& features, const Tensor& covis,
                          int window) {
  check_grid(features, window, "condense_key_value");
  if (covis.rank() != 3 || covis.dim(0) != features.dim(0) ||
      covis.dim(1) != features.dim(1) || covis.dim(2) != 1)
    throw std::invalid_argument("condense_key_value: covis must be [h,w,1]");
  const int h = features.dim(0), w = features.dim(1), d = features.dim(2);
  const int oh = h / window, ow = w / window;
  Tensor out({oh, ow, d});
  std::vector<double> weights(static_cast<size_t>(window) * window);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double mx = -1e300;
      for (int ky = 0; ky < window; ++ky)
        for (int kx = 0; kx < window; ++kx)
          mx = std::max(mx, static_cast<double>(
                                covis.at(oy * window + ky, ox * window + kx, 0)));
      double sum = 0.0;
      for (int ky = 0; ky < window; ++ky)
        for (int kx = 0; kx < window; ++kx) {
          double e = std::exp(covis.at(oy * window + ky, ox * window + kx, 0) - mx);
          weights[static_cast<size_t>(ky) * window + kx] = e;
          sum += e;
        }
      for (int ch = 0; ch < d; ++ch) {
        double acc = 0.0;
        for (int ky = 0; ky < window; ++ky)
          for (int kx = 0; kx < window; ++kx)
            acc += weights[static_cast<size_t>(ky) * window + kx] / sum *
                   features.at(oy * window + ky, ox * window + kx, ch);
        out.at(oy, ox, ch) = static_cast<float>(acc);
      }
    }
  }
  return out;
}

std::pair<Tensor, Tensor> baseline_condense(const Tensor& features,
                                            const Tensor& kernel,
                                            const Tensor& bias, int window) {
  check_grid(features, window, "baseline_condense");
  const int d = features.dim(2);
  Tensor q = conv2d(features, kernel, window, Padding::kValid, /*depthwise=*/true);
  for (int y = 0; y < q.dim(0); ++y)
    for (int x = 0; x < q.dim(1); ++x)
      for (int ch = 0; ch < d; ++ch) q.at(y, x, ch) += bias.at(ch);
  Tensor kv = max_pool2d(features, window);
  return {std::move(q), std::move(kv)};
}

Tensor aggregate_covisibility(const Tensor& covis, int window) {
  if (covis.rank() != 3 || covis.dim(2) != 1)
    throw std::invalid_argument("aggregate_covisibility: covis must be [h,w,1]");
  return max_pool2d(covis, window);
}

Tensor vanilla_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw std::invalid_argument("vanilla_attention: rank-2 operands required");
  if (q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
    throw std::invalid_argument("vanilla_attention: shape mismatch");
  Tensor logits = matmul(q, transpose(k));
  float s = 1.0f / std::sqrt(static_cast<float>(q.dim(1)));
  logits = scale(logits, s);
  Tensor weights = softmax(logits, 1);
  return matmul(weights, v);
}

Tensor covis_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& c) {
  if (c.size() != k.dim(0))
    throw std::invalid_argument("covis_attention: covis length mismatch");
  Tensor logits = matmul(q, transpose(k));
  float s = 1.0f / std::sqrt(static_cast<float>(q.dim(1)));
  logits = scale(logits, s);
  Tensor weights = softmax(logits, 1);
  // scale value rows by key covisibility; attention rows are not
  // renormalized afterwards, low-covisibility evidence simply fades
  Tensor scaled_v(v.shape());
  for (int i = 0; i < v.dim(0); ++i)
    for (int j = 0; j < v.dim(1); ++j)
      scaled_v.at(i, j) = v.at(i, j) * c.at(i);
  return matmul(weights, scaled_v);
}

RopeBasis make_rope_basis(int head_dim) {
  if (head_dim % 4 != 0)
    throw std::invalid_argument("make_rope_basis: head dim must be divisible by 4");
  RopeBasis basis;
  const int per_axis = head_dim / 4;
  basis.freqs.resize(static_cast<size_t>(head_dim / 2));
  for (int t = 0; t < per_axis; ++t) {
    float theta = static_cast<float>(
        std::pow(10000.0, -static_cast<double>(t) / per_axis));
    basis.freqs[static_cast<size_t>(t)] = {theta, 0.0f};
    basis.freqs[static_cast<size_t>(per_axis + t)] = {0.0f, theta};
  }
  return basis;
}

Tensor rope_rotate(const Tensor& features,
                   const std::vector<std::array<float, 2>>& positions,
                   const RopeBasis& basis) {
  if (features.rank() != 2)
    throw std::invalid_argument("rope_rotate: features must be [n,dh]");
  const int n = features.dim(0), dh = features.dim(1);
  if (static_cast<size_t>(dh / 2) != basis.freqs.size())
    throw std::invalid_argument("rope_rotate: basis size mismatch");
  if (positions.size() != static_cast<size_t>(n))
    throw std::invalid_argument("rope_rotate: positions size mismatch");
  Tensor out({n, dh});
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < dh / 2; ++p) {
      const auto& f = basis.freqs[static_cast<size_t>(p)];
      float angle = f[0] * positions[static_cast<size_t>(i)][0] +
                    f[1] * positions[static_cast<size_t>(i)][1];
      float c = std::cos(angle), s = std::sin(angle);
      float a = features.at(i, 2 * p), b = features.at(i, 2 * p + 1);
      out.at(i, 2 * p) = c * a - s * b;
      out.at(i, 2 * p + 1) = s * a + c * b;
    }
  }
  return out;
}

float rope_score(const float* q, const float* k, int head_dim, float dx,
                 float dy, const RopeBasis& basis) {
  double acc = 0.0;
  for (int p = 0; p < head_dim / 2; ++p) {
    const auto& f = basis.freqs[static_cast<size_t>(p)];
    float angle = f[0] * dx + f[1] * dy;
    float c = std::cos(angle), s = std::sin(angle);
    // q_pair^T R(angle) k_pair
    acc += q[2 * p] * (c * k[2 * p] - s * k[2 * p + 1]) +
           q[2 * p + 1] * (s * k[2 * p] + c * k[2 * p + 1]);
  }
  return static_cast<float>(acc);
}

namespace {

// shared multi-head wrapper; covis (length m) gates the key/value side,
// rope rotates per-head q and k when positions are supplied
Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                            const AttentionParams& ap, int heads,
                            const Tensor* covis, const RopeBasis* rope,
                            const std::vector<std::array<float, 2>>* pos_q,
                            const std::vector<std::array<float, 2>>* pos_kv) {
  const int n = x_q.dim(0), m = x_kv.dim(0), d = x_q.dim(1);
  const int dh = d / heads;
  Tensor q = matmul(x_q, ap.wq);
  Tensor k = matmul(x_kv, ap.wk);
  Tensor v = matmul(x_kv, ap.wv);

  Tensor merged({n, d});
  Tensor qh({n, dh}), kh({m, dh}), vh({m, dh});
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < dh; ++c) qh.at(i, c) = q.at(i, h * dh + c);
    for (int i = 0; i < m; ++i)
      for (int c = 0; c < dh; ++c) {
        kh.at(i, c) = k.at(i, h * dh + c);
        vh.at(i, c) = v.at(i, h * dh + c);
      }
    Tensor qr = rope ? rope_rotate(qh, *pos_q, *rope) : qh;
    Tensor kr = rope ? rope_rotate(kh, *pos_kv, *rope) : kh;
    Tensor out = covis ? covis_attention(qr, kr, vh, *covis)
                       : vanilla_attention(qr, kr, vh);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < dh; ++c) merged.at(i, h * dh + c) = out.at(i, c);
  }
  return matmul(merged, ap.wo);
}

std::vector<std::array<float, 2>> grid_positions(int h, int w) {
  std::vector<std::array<float, 2>> pos(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      pos[static_cast<size_t>(y) * w + x] = {static_cast<float>(x),
                                             static_cast<float>(y)};
  return pos;
}

Tensor fuse_features(const Tensor& features, const Tensor& upsampled,
                     const DcatLayerParams& lp) {
  const int h = features.dim(0), w = features.dim(1), d = features.dim(2);
  Tensor cat = concat_channels(features, upsampled);
  Tensor tokens = Tensor({h * w, 2 * d}, cat.vec());
  Tensor hidden = relu(linear(tokens, lp.fuse_w1, lp.fuse_b1));
  Tensor delta = linear(hidden, lp.fuse_w2, lp.fuse_b2);
  Tensor out({h, w, d}, delta.vec());
  return add(features, out);
}

}  // namespace

DcatBlockOutput dcat_block(const Tensor& features_a, const Tensor& features_b,
                           const DcatParams& params, int layer) {
  if (layer < 1 || layer > params.num_layers)
    throw std::invalid_argument("dcat_block: layer out of range");
  const DcatLayerParams& lp = params.layers[static_cast<size_t>(layer - 1)];
  const int s = params.window;
  check_grid(features_a, s, "dcat_block");
  check_grid(features_b, s, "dcat_block");
  const int d = params.dim;
  if (features_a.dim(2) != d || features_b.dim(2) != d)
    throw std::invalid_argument("dcat_block: feature dim mismatch");

  DcatBlockOutput out;
  out.covis_a = predict_covisibility(features_a, lp, layer);
  out.covis_a.view = 'A';
  out.covis_b = predict_covisibility(features_b, lp, layer);
  out.covis_b.view = 'B';

  struct Stream {
    const Tensor* full;
    const CovisibilityMap* covis;
    int h, w, rh, rw;
    Tensor q, kv, reduced_covis_seq;
    std::vector<std::array<float, 2>> pos;
    Tensor self_out;
  };
  Stream sa{&features_a, &out.covis_a, 0, 0, 0, 0, {}, {}, {}, {}, {}};
  Stream sb{&features_b, &out.covis_b, 0, 0, 0, 0, {}, {}, {}, {}, {}};

  for (Stream* st : {&sa, &sb}) {
    st->h = st->full->dim(0);
    st->w = st->full->dim(1);
    st->rh = st->h / s;
    st->rw = st->w / s;
    Tensor q3 = condense_query(*st->full, st->covis->scores, lp.condense_kernel,
                               lp.condense_bias, s);
    Tensor kv3 = condense_key_value(*st->full, st->covis->scores, s);
    st->q = Tensor({st->rh * st->rw, d}, q3.vec());
    st->kv = Tensor({st->rh * st->rw, d}, kv3.vec());
    Tensor rc = aggregate_covisibility(st->covis->scores, s);
    st->reduced_covis_seq = Tensor({st->rh * st->rw}, rc.vec());
    st->pos = grid_positions(st->rh, st->rw);
  }

  for (Stream* st : {&sa, &sb}) {
    Tensor attn = multi_head_attention(st->q, st->kv, lp.self_attn,
                                       params.heads, &st->reduced_covis_seq,
                                       &params.rope, &st->pos, &st->pos);
    st->self_out = add(st->q, attn);
  }

  auto cross = [&](Stream& me, Stream& other) {
    Tensor attn = multi_head_attention(me.self_out, other.self_out,
                                       lp.cross_attn, params.heads,
                                       &other.reduced_covis_seq, nullptr,
                                       nullptr, nullptr);
    return add(me.self_out, attn);
  };
  Tensor za = cross(sa, sb);
  Tensor zb = cross(sb, sa);

  auto finish = [&](Stream& st, const Tensor& z) {
    Tensor grid = Tensor({st.rh, st.rw, d}, z.vec());
    Tensor up = bilinear_resize(grid, st.h, st.w);
    return fuse_features(*st.full, up, lp);
  };
  out.features_a = finish(sa, za);
  out.features_b = finish(sb, zb);
  return out;
}

DcatResult run_dcat(const Tensor& features_a, const Tensor& features_b,
                    const DcatParams& params) {
  DcatResult result;
  result.features_a = features_a;
  result.features_b = features_b;
  for (int layer = 1; layer <= params.num_layers; ++layer) {
    DcatBlockOutput block =
        dcat_block(result.features_a, result.features_b, params, layer);
    result.features_a = std::move(block.features_a);
    result.features_b = std::move(block.features_b);
    if (layer >= 2) {
      result.covis_a.push_back(std::move(block.covis_a));
      result.covis_b.push_back(std::move(block.covis_b));
    }
  }
  return result;
}

}  // namespace comatch

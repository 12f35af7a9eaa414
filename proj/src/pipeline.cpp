#include "comatch/pipeline.hpp"

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "comatch/rng.hpp"

namespace comatch {

namespace {

double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - start)
      .count();
}

void refine_all(const Tensor& fine_a, const Tensor& fine_b,
                const std::vector<CoarseMatch>& coarse,
                const FineParams& fine_params, const RunConfig& config,
                MatchResult* result) {
  std::vector<PatchPair> pairs = crop_and_consolidate(
      fine_a, fine_b, coarse, fine_params, result->grid_w_a, result->grid_w_b,
      &result->border_dropped);
  for (const PatchPair& pair : pairs) {
    Stage1Result s1 = stage1_refine(pair);
    result->fine.push_back(
        stage2_refine(fine_a, fine_b, pair, s1,
                      static_cast<float>(config.fine_softmax_temp)));
  }
  result->no_matches = result->fine.empty();
}

}  // namespace

ModelParams init_model(const RunConfig& config) {
  ModelParams m;
  m.backbone = init_backbone(config.seed);
  m.dcat = init_dcat(mix_seed(config.seed, 0xdca7ull), config.dim, config.heads,
                     config.num_layers, config.window);
  m.fine = init_fine(mix_seed(config.seed, 0xf19eull));
  m.fine.window = config.fine_window;
  m.fine.softmax_temp = static_cast<float>(config.fine_softmax_temp);
  return m;
}

MatchResult match_pipeline(const Tensor& image_a, const Tensor& image_b,
                           const ModelParams& model, const RunConfig& config) {
  MatchResult result;
  auto t0 = std::chrono::steady_clock::now();
  PyramidFeatures pa = extract_features(image_a, model.backbone);
  PyramidFeatures pb = extract_features(image_b, model.backbone);
  result.timings.backbone_ms = ms_since(t0);

  auto t1 = std::chrono::steady_clock::now();
  DcatResult dcat = run_dcat(pa.f8, pb.f8, model.dcat);
  result.covis_a = dcat.covis_a;
  result.covis_b = dcat.covis_b;
  result.timings.transformer_ms = ms_since(t1);

  result.grid_h_a = pa.f8.dim(0);
  result.grid_w_a = pa.f8.dim(1);
  result.grid_h_b = pb.f8.dim(0);
  result.grid_w_b = pb.f8.dim(1);

  auto t2 = std::chrono::steady_clock::now();
  Tensor corr = correlation_matrix(dcat.features_a, dcat.features_b,
                                   static_cast<float>(config.tau));
  Tensor assignment = dual_softmax(corr);
  result.coarse = mnn_filter(assignment, static_cast<float>(config.theta_c));
  result.timings.coarse_ms = ms_since(t2);

  auto t3 = std::chrono::steady_clock::now();
  if (result.coarse.empty()) {
    result.no_matches = true;
    result.timings.fine_ms = ms_since(t3);
    return result;
  }
  Tensor ga({result.grid_h_a, result.grid_w_a, 256}, dcat.features_a.vec());
  Tensor gb({result.grid_h_b, result.grid_w_b, 256}, dcat.features_b.vec());
  Tensor fine_a = fuse_fine(ga, pa.f4, pa.f2, model.fine);
  Tensor fine_b = fuse_fine(gb, pb.f4, pb.f2, model.fine);
  refine_all(fine_a, fine_b, result.coarse, model.fine, config, &result);
  result.timings.fine_ms = ms_since(t3);
  return result;
}

MatchResult match_with_features(const Tensor& coarse_a, const Tensor& coarse_b,
                                const Tensor& fine_a, const Tensor& fine_b,
                                const FineParams& fine_params,
                                const RunConfig& config) {
  if (coarse_a.rank() != 3 || coarse_b.rank() != 3)
    throw std::invalid_argument("match_with_features: coarse maps must be [gh,gw,d]");
  MatchResult result;
  result.grid_h_a = coarse_a.dim(0);
  result.grid_w_a = coarse_a.dim(1);
  result.grid_h_b = coarse_b.dim(0);
  result.grid_w_b = coarse_b.dim(1);

  auto t0 = std::chrono::steady_clock::now();
  Tensor corr = correlation_matrix(coarse_a, coarse_b,
                                   static_cast<float>(config.tau));
  Tensor assignment = dual_softmax(corr);
  result.coarse = mnn_filter(assignment, static_cast<float>(config.theta_c));
  result.timings.coarse_ms = ms_since(t0);

  auto t1 = std::chrono::steady_clock::now();
  if (result.coarse.empty()) {
    result.no_matches = true;
    result.timings.fine_ms = ms_since(t1);
    return result;
  }
  refine_all(fine_a, fine_b, result.coarse, fine_params, config, &result);
  result.timings.fine_ms = ms_since(t1);
  return result;
}

Tensor covis_visualization(const Tensor& image, const Tensor& covis_scores) {
  if (image.rank() != 3 || image.dim(2) != 1)
    throw std::invalid_argument("covis_visualization wants a [H,W,1] image");
  Tensor up = bilinear_resize(covis_scores, image.dim(0), image.dim(1));
  return mul(image, up);
}

void write_matches_csv(const std::string& path,
                       const std::vector<FineMatch>& matches) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << "xA,yA,xB,yB,score\n";
  char buf[160];
  for (const FineMatch& m : matches) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g,%.9g\n", m.xa, m.ya,
                  m.xb, m.yb, static_cast<double>(m.score));
    out << buf;
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

std::vector<FineMatch> read_matches_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error(path + ": empty matches file");
  if (line != "xA,yA,xB,yB,score")
    throw std::runtime_error(path + ": unexpected CSV header \"" + line + "\"");
  std::vector<FineMatch> matches;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    FineMatch m;
    std::istringstream ss(line);
    char c1, c2, c3, c4;
    if (!(ss >> m.xa >> c1 >> m.ya >> c2 >> m.xb >> c3 >> m.yb >> c4 >>
          m.score) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw std::runtime_error(path + ": malformed CSV at line " +
                               std::to_string(line_no));
    matches.push_back(m);
  }
  return matches;
}

}  // namespace comatch

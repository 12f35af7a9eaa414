#pragma once

#include <string>
#include <vector>

#include "comatch/backbone.hpp"
#include "comatch/config.hpp"
#include "comatch/dcat.hpp"
#include "comatch/matcher.hpp"
#include "comatch/tensor.hpp"

namespace comatch {

struct ModelParams {
  BackboneParams backbone;
  DcatParams dcat;
  FineParams fine;
};

ModelParams init_model(const RunConfig& config);

struct PipelineTimings {
  double backbone_ms = 0.0;
  double transformer_ms = 0.0;
  double coarse_ms = 0.0;
  double fine_ms = 0.0;
};

struct MatchResult {
  std::vector<CoarseMatch> coarse;
  std::vector<FineMatch> fine;
  std::vector<CovisibilityMap> covis_a, covis_b;
  int grid_h_a = 0, grid_w_a = 0;
  int grid_h_b = 0, grid_w_b = 0;
  int border_dropped = 0;
  bool no_matches = false;  // ran fine, nothing cleared the thresholds
  PipelineTimings timings;
};

// full path: backbone pyramid, covisibility transformer, dual-softmax
// coarse matching, progressive fine fusion, two-stage refinement
MatchResult match_pipeline(const Tensor& image_a, const Tensor& image_b,
                           const ModelParams& model, const RunConfig& config);

// injected-descriptor path: coarse maps [gh,gw,d] and fine maps [H,W,df]
// come from elsewhere (e.g. the synthetic-scene oracle); only matching and
// refinement run
MatchResult match_with_features(const Tensor& coarse_a, const Tensor& coarse_b,
                                const Tensor& fine_a, const Tensor& fine_b,
                                const FineParams& fine_params,
                                const RunConfig& config);

// score-map export: covisibility upsampled to image resolution and
// multiplied into the image; write_pgm of the result is bit-deterministic
Tensor covis_visualization(const Tensor& image, const Tensor& covis_scores);

// CSV with header xA,yA,xB,yB,score; coordinates are subpixel,
// full-resolution, origin at the top-left pixel center
void write_matches_csv(const std::string& path,
                       const std::vector<FineMatch>& matches);
std::vector<FineMatch> read_matches_csv(const std::string& path);

}  // namespace comatch

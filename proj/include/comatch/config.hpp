#pragma once

#include <cstdint>
#include <string>

namespace comatch {

// run-wide knobs; JSON config files and CLI flags both map onto this
struct RunConfig {
  uint64_t seed = 42;
  int dim = 256;
  int heads = 8;
  int num_layers = 4;
  int window = 4;       // transformer condensing factor
  double tau = 10.0;    // correlation temperature
  double theta_c = 0.1; // coarse confidence threshold
  double alpha = 1.0, beta = 0.25, gamma = 0.25;  // loss weights
  int ransac_iterations = 1000;
  double ransac_threshold_px = 0.5;
  double depth_rel_tol = 0.2;
  int fine_window = 8;
  double fine_softmax_temp = 10.0;
  std::string feature_mode = "backbone";  // "backbone" | "oracle"
};

// strict parse: unknown keys and wrong types are errors
RunConfig load_config_file(const std::string& path, const RunConfig& base);

// COMATCH_SEED, when set, overrides the seed from file/defaults
void apply_env_overrides(RunConfig& config);

std::string config_to_json(const RunConfig& config);

}  // namespace comatch

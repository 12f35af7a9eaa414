#include "comatch/config.hpp"

#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace comatch {

RunConfig load_config_file(const std::string& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open config file");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }
  if (!j.is_object())
    throw std::runtime_error(path + ": config root must be an object");

  RunConfig c = base;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "seed") c.seed = value.get<uint64_t>();
      else if (key == "dim") c.dim = value.get<int>();
      else if (key == "heads") c.heads = value.get<int>();
      else if (key == "num_layers") c.num_layers = value.get<int>();
      else if (key == "window") c.window = value.get<int>();
      else if (key == "tau") c.tau = value.get<double>();
      else if (key == "theta_c") c.theta_c = value.get<double>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "beta") c.beta = value.get<double>();
      else if (key == "gamma") c.gamma = value.get<double>();
      else if (key == "ransac_iterations") c.ransac_iterations = value.get<int>();
      else if (key == "ransac_threshold_px") c.ransac_threshold_px = value.get<double>();
      else if (key == "depth_rel_tol") c.depth_rel_tol = value.get<double>();
      else if (key == "fine_window") c.fine_window = value.get<int>();
      else if (key == "fine_softmax_temp") c.fine_softmax_temp = value.get<double>();
      else if (key == "feature_mode") c.feature_mode = value.get<std::string>();
      else
        throw std::runtime_error(path + ": unknown config key \"" + key + "\"");
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ": bad value for \"" + key + "\": " +
                               e.what());
    }
  }
  if (c.feature_mode != "backbone" && c.feature_mode != "oracle")
    throw std::runtime_error(path + ": feature_mode must be backbone or oracle");
  return c;
}

void apply_env_overrides(RunConfig& config) {
  const char* env = std::getenv("COMATCH_SEED");
  if (!env) return;
  char* end = nullptr;
  unsigned long long v = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0')
    throw std::runtime_error("COMATCH_SEED must be an unsigned integer, got \"" +
                             std::string(env) + "\"");
  config.seed = v;
}

std::string config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["num_layers"] = c.num_layers;
  j["window"] = c.window;
  j["tau"] = c.tau;
  j["theta_c"] = c.theta_c;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["ransac_iterations"] = c.ransac_iterations;
  j["ransac_threshold_px"] = c.ransac_threshold_px;
  j["depth_rel_tol"] = c.depth_rel_tol;
  j["fine_window"] = c.fine_window;
  j["fine_softmax_temp"] = c.fine_softmax_temp;
  j["feature_mode"] = c.feature_mode;
  return j.dump(2);
}

}  // namespace comatch

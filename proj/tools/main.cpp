#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "comatch/config.hpp"
#include "comatch/pipeline.hpp"
#include "comatch/rng.hpp"
#include "comatch/selftest.hpp"
#include "comatch/synth.hpp"
#include "comatch/tensor_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace comatch;

namespace {

// flag storage for the config options shared by every subcommand;
// precedence is defaults < config file < COMATCH_SEED < explicit flags
struct ConfigFlags {
  CLI::App* cmd = nullptr;
  std::string config_path;
  uint64_t seed = 0;
  double tau = 0.0, theta_c = 0.0;
  int ransac_iterations = 0;
  double ransac_threshold_px = 0.0;
  std::string feature_mode;

  void attach(CLI::App* app) {
    cmd = app;
    app->add_option("--config", config_path, "JSON config file");
    app->add_option("--seed", seed, "model / scene seed");
    app->add_option("--tau", tau, "correlation temperature");
    app->add_option("--theta-c", theta_c, "coarse confidence threshold");
    app->add_option("--ransac-iterations", ransac_iterations);
    app->add_option("--ransac-threshold", ransac_threshold_px,
                    "inlier threshold in pixels");
    app->add_option("--feature-mode", feature_mode, "backbone or oracle");
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (cmd->count("--config") > 0) cfg = load_config_file(config_path, cfg);
    apply_env_overrides(cfg);
    if (cmd->count("--seed") > 0) cfg.seed = seed;
    if (cmd->count("--tau") > 0) cfg.tau = tau;
    if (cmd->count("--theta-c") > 0) cfg.theta_c = theta_c;
    if (cmd->count("--ransac-iterations") > 0)
      cfg.ransac_iterations = ransac_iterations;
    if (cmd->count("--ransac-threshold") > 0)
      cfg.ransac_threshold_px = ransac_threshold_px;
    if (cmd->count("--feature-mode") > 0) {
      if (feature_mode != "backbone" && feature_mode != "oracle")
        throw std::runtime_error("--feature-mode must be backbone or oracle");
      cfg.feature_mode = feature_mode;
    }
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

MatchResult run_match(const SceneBundle& scene, const RunConfig& cfg) {
  if (cfg.feature_mode == "oracle") {
    auto [ca, cb] = oracle_features(scene, cfg.dim, cfg.depth_rel_tol, 8);
    auto [fa, fb] = oracle_fine_features(scene, 64);
    return match_with_features(ca, cb, fa, fb, init_fine(cfg.seed), cfg);
  }
  ModelParams model = init_model(cfg);
  return match_pipeline(scene.image_a, scene.image_b, model, cfg);
}

// mean match error in pixels: homography transfer error for planar scenes,
// epipolar (Sampson) distance otherwise
double mean_match_error_px(const std::vector<FineMatch>& matches,
                           const SceneBundle& scene) {
  if (matches.empty()) return 0.0;
  double sum = 0.0;
  if (scene.has_homography) {
    for (const FineMatch& m : matches) {
      Vec2 mapped = apply_homography(scene.homography, {m.xa, m.ya});
      double dx = mapped.x - m.xb, dy = mapped.y - m.yb;
      sum += std::sqrt(dx * dx + dy * dy);
    }
  } else {
    const CameraIntrinsics& ka = scene.geometry.ka;
    const CameraIntrinsics& kb = scene.geometry.kb;
    Mat3 e = essential_from_pose(scene.geometry.pose);
    double focal = 0.5 * (ka.fx + ka.fy + kb.fx + kb.fy) / 2.0;
    for (const FineMatch& m : matches) {
      Vec2 pa{(m.xa - ka.cx) / ka.fx, (m.ya - ka.cy) / ka.fy};
      Vec2 pb{(m.xb - kb.cx) / kb.fx, (m.yb - kb.cy) / kb.fy};
      sum += std::sqrt(sampson_distance(pa, pb, e)) * focal;
    }
  }
  return sum / static_cast<double>(matches.size());
}

void write_covis_maps(const MatchResult& result, const SceneBundle& scene,
                      const fs::path& out_dir) {
  for (const auto& maps : {&result.covis_a, &result.covis_b}) {
    for (const CovisibilityMap& map : *maps) {
      const Tensor& image =
          map.view == 'A' ? scene.image_a : scene.image_b;
      Tensor vis = covis_visualization(image, map.scores);
      char name[64];
      std::snprintf(name, sizeof(name), "covis%c_layer%d.pgm", map.view,
                    map.layer);
      write_pgm((out_dir / name).string(), vis);
    }
  }
}

int cmd_match(const ConfigFlags& flags, const std::string& image_a_path,
              const std::string& image_b_path, const std::string& scene_dir,
              const std::string& out_dir) {
  RunConfig cfg = flags.resolve();
  SceneBundle scene;
  bool have_geometry = false;
  if (!scene_dir.empty()) {
    scene = load_scene(scene_dir);
    have_geometry = true;
  } else {
    if (image_a_path.empty() || image_b_path.empty())
      throw std::runtime_error(
          "match needs either two images or --scene DIR");
    scene.image_a = read_pgm(image_a_path);
    scene.image_b = read_pgm(image_b_path);
  }
  if (cfg.feature_mode == "oracle" && !have_geometry)
    throw std::runtime_error(
        "oracle feature mode needs --scene (depth and geometry)");

  fs::create_directories(out_dir);
  MatchResult result = run_match(scene, cfg);
  write_matches_csv((fs::path(out_dir) / "matches.csv").string(), result.fine);
  write_covis_maps(result, scene, out_dir);

  json stats;
  stats["num_coarse"] = result.coarse.size();
  stats["num_fine"] = result.fine.size();
  stats["border_dropped"] = result.border_dropped;
  stats["no_matches"] = result.no_matches;
  if (have_geometry)
    stats["mean_epipolar_error_px"] = mean_match_error_px(result.fine, scene);
  stats["timing"] = {{"backbone_ms", result.timings.backbone_ms},
                     {"transformer_ms", result.timings.transformer_ms},
                     {"coarse_ms", result.timings.coarse_ms},
                     {"fine_ms", result.timings.fine_ms}};
  write_text(fs::path(out_dir) / "stats.json", stats.dump(2) + "\n");
  std::cout << stats.dump(2) << "\n";
  return 0;
}

int cmd_eval_pose(const ConfigFlags& flags,
                  const std::vector<std::string>& scene_dirs,
                  const std::string& out_dir) {
  RunConfig cfg = flags.resolve();
  fs::create_directories(out_dir);
  std::vector<double> errors;
  std::string csv = "scene,error_deg\n";
  for (size_t i = 0; i < scene_dirs.size(); ++i) {
    SceneBundle scene = load_scene(scene_dirs[i]);
    MatchResult result = run_match(scene, cfg);
    double error_deg = 180.0;  // worst case: unusable scene
    std::vector<Vec2> pa, pb;
    for (const FineMatch& m : result.fine) {
      pa.push_back({m.xa, m.ya});
      pb.push_back({m.xb, m.yb});
    }
    const CameraIntrinsics& ka = scene.geometry.ka;
    const CameraIntrinsics& kb = scene.geometry.kb;
    if (pa.size() >= 8) {
      try {
        RansacResult ransac = estimate_essential_ransac(
            pa, pb, ka, kb, cfg.ransac_iterations, cfg.ransac_threshold_px,
            mix_seed(cfg.seed, 7000 + i));
        if (ransac.ok) {
          std::vector<Vec2> na, nb;
          for (size_t j = 0; j < pa.size(); ++j) {
            if (!ransac.inlier_mask[j]) continue;
            na.push_back({(pa[j].x - ka.cx) / ka.fx, (pa[j].y - ka.cy) / ka.fy});
            nb.push_back({(pb[j].x - kb.cx) / kb.fx, (pb[j].y - kb.cy) / kb.fy});
          }
          DecomposeResult dec = decompose_essential(ransac.essential, na, nb);
          RelativePose polished = refine_pose_sampson(dec.pose, na, nb);
          error_deg = pose_error_deg(polished, scene.geometry.pose);
        }
      } catch (const std::exception& ex) {
        std::cerr << "warning: " << scene_dirs[i] << ": " << ex.what()
                  << " (recorded as 180 deg)\n";
      }
    }
    errors.push_back(error_deg);
    char line[512];
    std::snprintf(line, sizeof(line), "%s,%.6f\n", scene_dirs[i].c_str(),
                  error_deg);
    csv += line;
  }
  write_text(fs::path(out_dir) / "pose_errors.csv", csv);
  std::vector<double> auc = pose_auc(errors, {5.0, 10.0, 20.0});
  json out = {{"auc5", auc[0]},
              {"auc10", auc[1]},
              {"auc20", auc[2]},
              {"n", errors.size()}};
  write_text(fs::path(out_dir) / "auc.json", out.dump(2) + "\n");
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_eval_homography(const ConfigFlags& flags,
                        const std::vector<std::string>& scene_dirs,
                        const std::string& out_dir) {
  RunConfig cfg = flags.resolve();
  fs::create_directories(out_dir);
  std::vector<double> errors;
  std::string csv = "scene,corner_error_px\n";
  size_t used = 0;
  for (size_t i = 0; i < scene_dirs.size(); ++i) {
    SceneBundle scene = load_scene(scene_dirs[i]);
    if (!scene.has_homography) {
      std::cerr << "warning: " << scene_dirs[i]
                << " has no homography, skipped\n";
      continue;
    }
    ++used;
    MatchResult result = run_match(scene, cfg);
    double corner_err = 1e9;
    std::vector<Vec2> pa, pb;
    for (const FineMatch& m : result.fine) {
      pa.push_back({m.xa, m.ya});
      pb.push_back({m.xb, m.yb});
    }
    if (pa.size() >= 4) {
      HomographyResult fit = estimate_homography_ransac(
          pa, pb, cfg.ransac_iterations, cfg.ransac_threshold_px,
          mix_seed(cfg.seed, 8000 + i));
      if (fit.ok)
        corner_err = homography_corner_error(fit.h, scene.homography,
                                             scene.image_a.dim(1),
                                             scene.image_a.dim(0));
    }
    errors.push_back(corner_err);
    char line[512];
    std::snprintf(line, sizeof(line), "%s,%.6f\n", scene_dirs[i].c_str(),
                  corner_err);
    csv += line;
  }
  if (errors.empty())
    throw std::runtime_error("no scene in the list carries a homography");
  write_text(fs::path(out_dir) / "corner_errors.csv", csv);
  std::vector<double> auc = pose_auc(errors, {3.0, 5.0, 10.0});
  json out = {{"auc3", auc[0]},
              {"auc5", auc[1]},
              {"auc10", auc[2]},
              {"n", used}};
  write_text(fs::path(out_dir) / "corner_auc.json", out.dump(2) + "\n");
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_synth(uint64_t seed, const std::string& kind, int height, int width,
              double shift_x, double shift_y, const std::string& out_dir) {
  SceneBundle scene;
  if (kind == "planar") {
    scene = make_planar_scene(seed, height, width, PoseRange{},
                              TextureKind::kValueNoise);
  } else if (kind == "dual-plane") {
    scene = make_dual_plane_scene(seed, height, width);
  } else if (kind == "blocks") {
    scene = make_blocks_scene(seed, height, width);
  } else if (kind == "occlusion") {
    scene = make_occlusion_scene(seed, height, width);
  } else if (kind == "shifted") {
    scene = make_shifted_planar_scene(seed, height, width, shift_x, shift_y);
  } else {
    throw std::runtime_error("unknown scene kind: " + kind);
  }
  write_scene(scene, out_dir);
  json out = {{"seed", seed},
              {"kind", kind},
              {"height", height},
              {"width", width},
              {"has_homography", scene.has_homography},
              {"dir", out_dir}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

int print_report(const CheckReport& report) {
  for (const auto& [name, ok] : report.checks)
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << name << "\n";
  if (!report.all_passed()) {
    std::cout << "FAILED\n";
    return 1;
  }
  std::cout << "OK (" << report.checks.size() << " checks)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"comatch: covisibility-aware semi-dense image matching"};
  app.require_subcommand(1);

  // match
  auto* match = app.add_subcommand("match", "match two images");
  ConfigFlags match_flags;
  match_flags.attach(match);
  std::string image_a_path, image_b_path, scene_dir, match_out;
  match->add_option("imageA", image_a_path, "view A (PGM)");
  match->add_option("imageB", image_b_path, "view B (PGM)");
  match->add_option("--scene", scene_dir,
                    "scene directory (enables geometry stats, required for "
                    "oracle features)");
  match->add_option("--out", match_out, "output directory")->required();

  // eval-pose
  auto* eval_pose = app.add_subcommand("eval-pose",
                                       "relative pose error over scenes");
  ConfigFlags pose_flags;
  pose_flags.attach(eval_pose);
  std::vector<std::string> pose_scenes;
  std::string pose_out;
  eval_pose->add_option("scenes", pose_scenes, "scene directories")
      ->required();
  eval_pose->add_option("--out", pose_out, "output directory")->required();

  // eval-homography
  auto* eval_h = app.add_subcommand("eval-homography",
                                    "corner error over planar scenes");
  ConfigFlags h_flags;
  h_flags.attach(eval_h);
  std::vector<std::string> h_scenes;
  std::string h_out;
  eval_h->add_option("scenes", h_scenes, "scene directories")->required();
  eval_h->add_option("--out", h_out, "output directory")->required();

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene");
  uint64_t synth_seed = 42;
  std::string synth_kind = "planar", synth_out;
  int synth_h = 128, synth_w = 128;
  double shift_x = 2.5, shift_y = 0.5;
  synth->add_option("--seed", synth_seed);
  synth->add_option("--kind", synth_kind,
                    "planar | dual-plane | blocks | occlusion | shifted");
  synth->add_option("--height", synth_h);
  synth->add_option("--width", synth_w);
  synth->add_option("--shift-x", shift_x, "pixel shift (kind=shifted)");
  synth->add_option("--shift-y", shift_y, "pixel shift (kind=shifted)");
  synth->add_option("--out", synth_out, "scene directory")->required();

  // gradcheck / selftest
  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "finite-difference gradient audits");
  ConfigFlags grad_flags;
  grad_flags.attach(gradcheck);
  auto* selftest = app.add_subcommand("selftest", "fast health checks");
  ConfigFlags self_flags;
  self_flags.attach(selftest);

  try {
    app.parse(argc, argv);
    if (match->parsed())
      return cmd_match(match_flags, image_a_path, image_b_path, scene_dir,
                       match_out);
    if (eval_pose->parsed())
      return cmd_eval_pose(pose_flags, pose_scenes, pose_out);
    if (eval_h->parsed()) return cmd_eval_homography(h_flags, h_scenes, h_out);
    if (synth->parsed())
      return cmd_synth(synth_seed, synth_kind, synth_h, synth_w, shift_x,
                       shift_y, synth_out);
    if (gradcheck->parsed())
      return print_report(run_gradcheck(grad_flags.resolve().seed));
    if (selftest->parsed())
      return print_report(run_selftest(self_flags.resolve().seed));
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 2;
}

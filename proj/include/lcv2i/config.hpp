#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lcv2i/common.hpp"

namespace lcv2i {

enum class NoiseTarget { kPose, kFeatures };

// Every knob of a run. Files use "key = value" lines ('#' comments); unset
// keys take the documented defaults and the full effective config is echoed
// into every output header.
struct ExperimentConfig {
  std::uint64_t seed = 7;

  // suite
  std::size_t eval_scenes = 200;
  double occluded_fraction = 0.5;
  std::size_t object_count_min = 3;
  std::size_t object_count_max = 6;

  // grid
  double grid_x_range = 32.0;
  double grid_y_range = 32.0;
  double grid_cell_size = 0.5;
  std::size_t grid_height_bins = 1;
  std::size_t grid_channels = 16;

  // rigs
  double vehicle_x = -14.0, vehicle_y = 0.0, vehicle_yaw = 0.0;
  double infra_x = 12.0, infra_y = 12.0, infra_yaw = -2.356194490192345;
  std::size_t vehicle_beams = 32;
  std::size_t infra_beams = 32;
  double vehicle_height = 1.8;
  double infra_height = 6.0;
  std::size_t degrade_factor = 1;
  std::size_t image_width = 96;
  std::size_t image_height = 96;
  double focal_length = 64.0;

  // robustness
  double noise_sigma = 0.0;
  NoiseTarget noise_target = NoiseTarget::kPose;

  // module hyperparameters
  std::size_t num_scales = 2;
  std::size_t samples_per_point = 2;  // J
  double ref_height = 0.7;
  double score_threshold = 0.5;
  double detection_threshold = 0.2;
  double nms_iou = 0.5;
  double rfea_sigma = 1.0;
  std::size_t rfea_kernel = 3;
  double rfea_threshold = 0.1;

  // mode flags
  bool collaboration = true;
  bool camera = true;
  bool vwf = true;
  bool focm = true;
  bool rfea = true;
  bool transmit_full_map = false;  // bypasses masking, sends every cell
  std::string confidence_combine = "or";  // or | and
  std::string selection_rule = "xnor";    // xnor | and

  // training
  std::size_t train_scenes = 48;
  std::size_t train_steps = 400;
  double learning_rate = 0.1;
  double pos_weight = 64.0;
  double lambda_reg = 1.0;

  std::size_t threads = 0;  // 0 = hardware concurrency

  // outputs
  std::string out_csv = "metrics.csv";
  std::string out_json = "summary.json";

  void validate() const {
    if (degrade_factor != 1 && degrade_factor != 2 && degrade_factor != 4)
      throw ConfigError("config: degrade_factor must be 1, 2 or 4");
    if (confidence_combine != "or" && confidence_combine != "and")
      throw ConfigError("config: confidence_combine must be 'or' or 'and'");
    if (selection_rule != "xnor" && selection_rule != "and")
      throw ConfigError("config: selection_rule must be 'xnor' or 'and'");
    if (vwf && !camera) throw ConfigError("config: vwf requires camera");
    if (occluded_fraction < 0 || occluded_fraction > 1)
      throw ConfigError("config: occluded_fraction must be in [0, 1]");
  }
};

namespace detail_config {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail_config

// Effective key = value lines, in schema order.
inline std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& c) {
  using detail_config::fmt_double;
  auto b = [](bool v) { return v ? std::string("true") : std::string("false"); };
  return {
      {"seed", std::to_string(c.seed)},
      {"eval_scenes", std::to_string(c.eval_scenes)},
      {"occluded_fraction", fmt_double(c.occluded_fraction)},
      {"object_count_min", std::to_string(c.object_count_min)},
      {"object_count_max", std::to_string(c.object_count_max)},
      {"grid_x_range", fmt_double(c.grid_x_range)},
      {"grid_y_range", fmt_double(c.grid_y_range)},
      {"grid_cell_size", fmt_double(c.grid_cell_size)},
      {"grid_height_bins", std::to_string(c.grid_height_bins)},
      {"grid_channels", std::to_string(c.grid_channels)},
      {"vehicle_x", fmt_double(c.vehicle_x)},
      {"vehicle_y", fmt_double(c.vehicle_y)},
      {"vehicle_yaw", fmt_double(c.vehicle_yaw)},
      {"infra_x", fmt_double(c.infra_x)},
      {"infra_y", fmt_double(c.infra_y)},
      {"infra_yaw", fmt_double(c.infra_yaw)},
      {"vehicle_beams", std::to_string(c.vehicle_beams)},
      {"infra_beams", std::to_string(c.infra_beams)},
      {"vehicle_height", fmt_double(c.vehicle_height)},
      {"infra_height", fmt_double(c.infra_height)},
      {"degrade_factor", std::to_string(c.degrade_factor)},
      {"image_width", std::to_string(c.image_width)},
      {"image_height", std::to_string(c.image_height)},
      {"focal_length", fmt_double(c.focal_length)},
      {"noise_sigma", fmt_double(c.noise_sigma)},
      {"noise_target", c.noise_target == NoiseTarget::kPose ? "pose" : "features"},
      {"num_scales", std::to_string(c.num_scales)},
      {"samples_per_point", std::to_string(c.samples_per_point)},
      {"ref_height", fmt_double(c.ref_height)},
      {"score_threshold", fmt_double(c.score_threshold)},
      {"detection_threshold", fmt_double(c.detection_threshold)},
      {"nms_iou", fmt_double(c.nms_iou)},
      {"rfea_sigma", fmt_double(c.rfea_sigma)},
      {"rfea_kernel", std::to_string(c.rfea_kernel)},
      {"rfea_threshold", fmt_double(c.rfea_threshold)},
      {"collaboration", b(c.collaboration)},
      {"camera", b(c.camera)},
      {"vwf", b(c.vwf)},
      {"focm", b(c.focm)},
      {"rfea", b(c.rfea)},
      {"transmit_full_map", b(c.transmit_full_map)},
      {"confidence_combine", c.confidence_combine},
      {"selection_rule", c.selection_rule},
      {"train_scenes", std::to_string(c.train_scenes)},
      {"train_steps", std::to_string(c.train_steps)},
      {"learning_rate", fmt_double(c.learning_rate)},
      {"pos_weight", fmt_double(c.pos_weight)},
      {"lambda_reg", fmt_double(c.lambda_reg)},
      {"threads", std::to_string(c.threads)},
      {"out_csv", c.out_csv},
      {"out_json", c.out_json},
  };
}

inline ExperimentConfig parse_config(std::istream& is) {
  ExperimentConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = true;
      for (char ch : line) blank = blank && std::isspace(static_cast<unsigned char>(ch));
      if (blank) continue;
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto z = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, z - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto as_u64 = [&] { return std::stoull(val); };
    auto as_sz = [&] { return static_cast<std::size_t>(std::stoull(val)); };
    auto as_d = [&] { return std::stod(val); };
    auto as_b = [&] {
      if (val == "true" || val == "1") return true;
      if (val == "false" || val == "0") return false;
      throw ConfigError("config line " + std::to_string(lineno) + ": bad boolean '" + val + "'");
    };

    if (key == "seed") c.seed = as_u64();
    else if (key == "eval_scenes") c.eval_scenes = as_sz();
    else if (key == "occluded_fraction") c.occluded_fraction = as_d();
    else if (key == "object_count_min") c.object_count_min = as_sz();
    else if (key == "object_count_max") c.object_count_max = as_sz();
    else if (key == "grid_x_range") c.grid_x_range = as_d();
    else if (key == "grid_y_range") c.grid_y_range = as_d();
    else if (key == "grid_cell_size") c.grid_cell_size = as_d();
    else if (key == "grid_height_bins") c.grid_height_bins = as_sz();
    else if (key == "grid_channels") c.grid_channels = as_sz();
    else if (key == "vehicle_x") c.vehicle_x = as_d();
    else if (key == "vehicle_y") c.vehicle_y = as_d();
    else if (key == "vehicle_yaw") c.vehicle_yaw = as_d();
    else if (key == "infra_x") c.infra_x = as_d();
    else if (key == "infra_y") c.infra_y = as_d();
    else if (key == "infra_yaw") c.infra_yaw = as_d();
    else if (key == "vehicle_beams") c.vehicle_beams = as_sz();
    else if (key == "infra_beams") c.infra_beams = as_sz();
    else if (key == "vehicle_height") c.vehicle_height = as_d();
    else if (key == "infra_height") c.infra_height = as_d();
    else if (key == "degrade_factor") c.degrade_factor = as_sz();
    else if (key == "image_width") c.image_width = as_sz();
    else if (key == "image_height") c.image_height = as_sz();
    else if (key == "focal_length") c.focal_length = as_d();
    else if (key == "noise_sigma") c.noise_sigma = as_d();
    else if (key == "noise_target") {
      if (val == "pose") c.noise_target = NoiseTarget::kPose;
      else if (val == "features") c.noise_target = NoiseTarget::kFeatures;
      else throw ConfigError("config: noise_target must be 'pose' or 'features'");
    }
    else if (key == "num_scales") c.num_scales = as_sz();
    else if (key == "samples_per_point") c.samples_per_point = as_sz();
    else if (key == "ref_height") c.ref_height = as_d();
    else if (key == "score_threshold") c.score_threshold = as_d();
    else if (key == "detection_threshold") c.detection_threshold = as_d();
    else if (key == "nms_iou") c.nms_iou = as_d();
    else if (key == "rfea_sigma") c.rfea_sigma = as_d();
    else if (key == "rfea_kernel") c.rfea_kernel = as_sz();
    else if (key == "rfea_threshold") c.rfea_threshold = as_d();
    else if (key == "collaboration") c.collaboration = as_b();
    else if (key == "camera") c.camera = as_b();
    else if (key == "vwf") c.vwf = as_b();
    else if (key == "focm") c.focm = as_b();
    else if (key == "rfea") c.rfea = as_b();
    else if (key == "transmit_full_map") c.transmit_full_map = as_b();
    else if (key == "confidence_combine") c.confidence_combine = val;
    else if (key == "selection_rule") c.selection_rule = val;
    else if (key == "train_scenes") c.train_scenes = as_sz();
    else if (key == "train_steps") c.train_steps = as_sz();
    else if (key == "learning_rate") c.learning_rate = as_d();
    else if (key == "pos_weight") c.pos_weight = as_d();
    else if (key == "lambda_reg") c.lambda_reg = as_d();
    else if (key == "threads") c.threads = as_sz();
    else if (key == "out_csv") c.out_csv = val;
    else if (key == "out_json") c.out_json = val;
    else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("load_config_file: cannot open " + path);
  return parse_config(f);
}

}  // namespace lcv2i

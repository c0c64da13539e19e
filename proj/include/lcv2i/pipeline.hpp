#pragma once

#include <atomic>
#include <thread>

#include "lcv2i/comm.hpp"
#include "lcv2i/config.hpp"
#include "lcv2i/encoders.hpp"
#include "lcv2i/fusion.hpp"
#include "lcv2i/metrics.hpp"
#include "lcv2i/model.hpp"
#include "lcv2i/rfea.hpp"
#include "lcv2i/scenario.hpp"

namespace lcv2i {

// Elevation bands are concentrated on the object height band so the ring
// spacing resolves box tops at the ranges the grid covers.
inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kVehicleElevMin = -14.0 * kPi / 180.0;
inline constexpr double kVehicleElevMax = 0.0;
inline constexpr double kInfraElevMin = -40.0 * kPi / 180.0;
inline constexpr double kInfraElevMax = -5.0 * kPi / 180.0;
inline constexpr double kAzimuthStep = 0.5 * kPi / 180.0;

inline GridSpec grid_spec_of(const ExperimentConfig& cfg) {
  GridSpec g;
  g.x_range = cfg.grid_x_range;
  g.y_range = cfg.grid_y_range;
  g.cell_size = cfg.grid_cell_size;
  g.height_bins = cfg.grid_height_bins;
  g.channels = cfg.grid_channels;
  g.validate();
  if (g.height_bins != 1)
    throw ConfigError("pipeline: the collaborative pipeline runs on single-bin pillars "
                      "(grid_height_bins = 1)");
  return g;
}

inline Camera camera_of(const ExperimentConfig& cfg) {
  Camera cam;
  cam.width = cfg.image_width;
  cam.height = cfg.image_height;
  cam.fx = cam.fy = cfg.focal_length;
  cam.cx = static_cast<double>(cfg.image_width) / 2;
  cam.cy = static_cast<double>(cfg.image_height) / 2;
  return cam;
}

inline SensorRig vehicle_rig(const ExperimentConfig& cfg) {
  auto rig = make_rig({cfg.vehicle_x, cfg.vehicle_y, cfg.vehicle_yaw}, cfg.vehicle_height,
                      cfg.vehicle_beams, kVehicleElevMin, kVehicleElevMax, kAzimuthStep,
                      camera_of(cfg));
  return degrade_beams(rig, cfg.degrade_factor);
}

// The infrastructure keeps full resolution.
inline SensorRig infra_rig(const ExperimentConfig& cfg) {
  return make_rig({cfg.infra_x, cfg.infra_y, cfg.infra_yaw}, cfg.infra_height, cfg.infra_beams,
                  kInfraElevMin, kInfraElevMax, kAzimuthStep, camera_of(cfg));
}

inline SensorFrame sense(const Scene& scene, const SensorRig& rig) {
  SensorFrame f;
  f.points = simulate_lidar(scene, rig);
  f.image = simulate_camera(scene, rig);
  f.pose = rig.pose;
  f.mount_height = rig.mount_height;
  f.camera = rig.camera;
  return f;
}

// ---------------------------------------------------------------------------
// Single-agent forward pass
// ---------------------------------------------------------------------------

struct AgentState {
  Var oc_rows;    // (cells, c), in the autodiff graph
  Tensor oc_grid; // (c, h, w) values
  BinaryMask score, difference, confidence, request;
};

inline AgentState agent_forward(const SensorFrame& frame, ModelParams& model,
                                const ExperimentConfig& cfg, const GridSpec& spec) {
  const std::size_t h = spec.grid_h(), w = spec.grid_w(), c = spec.channels;

  auto global_points = to_global_frame(frame.points, frame.pose);
  VoxelGrid grid = voxelize(global_points, spec);
  Var voxel_grid4 = pillar_encode(grid, model.pillar);
  Var voxel_rows = flatten_voxels(voxel_grid4);  // (h*w, c) with height_bins = 1

  Var fused_rows = voxel_rows;
  if (cfg.camera && cfg.vwf) {
    Var img_ori = image_encode(frame.image, model.image, cfg.image_height, cfg.image_width);
    MultiScaleImageFeatures scales = build_scales(img_ori, cfg.num_scales);
    std::vector<Var> per_scale;
    for (std::size_t s = 0; s < cfg.num_scales; ++s) {
      ReferencePoints refs = compute_reference_points(spec, frame.camera, frame.pose,
                                                      frame.mount_height, cfg.ref_height, s + 1);
      per_scale.push_back(
          deformable_cross_attention(voxel_rows, scales.scales[s], refs, model.vwf, s));
    }
    fused_rows = vwf_fuse(per_scale, model.vwf);
  }

  Var oc_rows = cfg.focm && cfg.camera && cfg.vwf ? focm(voxel_rows, fused_rows, model.focm)
                                                  : fused_rows;

  AgentState out;
  out.oc_rows = oc_rows;
  out.oc_grid = unflatten_voxels(oc_rows, {c, h, w}).value();
  out.score = score_map(out.oc_grid, model.decoder, cfg.score_threshold);
  out.difference = cfg.rfea ? regional_difference_map(out.oc_grid, cfg.rfea_sigma, cfg.rfea_kernel,
                                                      cfg.rfea_threshold)
                                  .mask
                            : BinaryMask(h, w);
  out.confidence = confidence_map(out.score, out.difference,
                                  cfg.confidence_combine == "and" ? ConfidenceCombine::kAnd
                                                                  : ConfidenceCombine::kOr);
  out.request = request_map(out.confidence);
  return out;
}

// ---------------------------------------------------------------------------
// One frame: both agents, one request/response exchange, vehicle decoding
// ---------------------------------------------------------------------------

struct FrameResult {
  std::vector<Detection> detections;
  Var head;  // raw decoder output on the vehicle's final features
  std::uint64_t payload_bytes = 0;
  std::uint64_t wire_bytes = 0;
  std::size_t selected_cells = 0;
  std::size_t gt_count = 0;
};

// training = true keeps the message path dense and differentiable so loss
// gradients reach the infrastructure encoder, and transmits the full map so
// the fusion never starves while the score maps are still uninformative;
// evaluation runs the mask-gated serialized wire path and meters bytes.
inline FrameResult run_frame(const ExperimentConfig& cfg, const Scene& scene, ModelParams& model,
                             std::size_t frame_index, bool training) {
  const GridSpec spec = grid_spec_of(cfg);
  const SensorRig vrig = vehicle_rig(cfg);
  const SensorRig irig = infra_rig(cfg);

  SensorFrame vframe = sense(scene, vrig);
  SensorFrame iframe = sense(scene, irig);
  if (cfg.noise_sigma > 0 && cfg.noise_target == NoiseTarget::kPose) {
    Rng rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * (frame_index + 1)));
    iframe.pose = add_noise(iframe.pose, cfg.noise_sigma, rng);
  }

  AgentState vehicle = agent_forward(vframe, model, cfg, spec);

  FrameResult result;
  result.gt_count = scene.objects.size();

  Var final_rows = vehicle.oc_rows;
  if (cfg.collaboration) {
    AgentState infra = agent_forward(iframe, model, cfg, spec);
    const BinaryMask ones(spec.grid_h(), spec.grid_w(), 1);
    const BinaryMask& req = cfg.transmit_full_map ? ones : vehicle.request;
    const BinaryMask& conf = cfg.transmit_full_map ? ones : infra.confidence;
    const SelectionRule rule =
        cfg.selection_rule == "and" ? SelectionRule::kAnd : SelectionRule::kXnor;

    if (training) {
      result.selected_cells = spec.grid_h() * spec.grid_w();
      final_rows = fuse_messages(infra.oc_rows, vehicle.oc_rows, model.fuse);
    } else {
      CollabMessage msg = select_features(infra.oc_grid, req, conf, rule, /*sender=*/1,
                                          static_cast<std::uint32_t>(frame_index));
      if (cfg.noise_sigma > 0 && cfg.noise_target == NoiseTarget::kFeatures) {
        Rng rng(cfg.seed ^ (0xC2B2AE3D27D4EB4FULL * (frame_index + 1)));
        for (float& v : msg.values) v = static_cast<float>(v + rng.normal(0.0, cfg.noise_sigma));
      }
      const auto bytes = serialize(msg);
      CollabMessage received = deserialize(bytes);
      BandwidthLedger ledger = comm_cost(BandwidthLedger{}, received);
      result.payload_bytes = ledger.payload_bytes;
      result.wire_bytes = ledger.wire_bytes;
      result.selected_cells = received.mask.popcount();
      Var remote_rows = constant(densify(received));
      final_rows = fuse_messages(remote_rows, vehicle.oc_rows, model.fuse);
    }
  }

  result.head = decoder_head(final_rows, model.decoder);
  result.detections =
      decode_head_tensor(result.head.value(), spec, cfg.detection_threshold, cfg.nms_iou);
  return result;
}

// ---------------------------------------------------------------------------
// Scene suites
// ---------------------------------------------------------------------------

inline SceneSpec scene_spec_of(const ExperimentConfig& cfg, bool occluded) {
  SceneSpec s;
  s.min_objects = cfg.object_count_min;
  s.max_objects = cfg.object_count_max;
  s.extent = cfg.grid_x_range / 2;
  if (occluded) {
    s.occlude_view = true;
    s.view_pose = {cfg.vehicle_x, cfg.vehicle_y, cfg.vehicle_yaw};
  }
  return s;
}

// Occluded scenes first, then open scenes.
inline std::vector<Scene> build_eval_suite(const ExperimentConfig& cfg) {
  std::vector<Scene> scenes;
  const std::size_t occluded = static_cast<std::size_t>(
      std::round(cfg.occluded_fraction * static_cast<double>(cfg.eval_scenes)));
  for (std::size_t i = 0; i < cfg.eval_scenes; ++i) {
    const bool occ = i < occluded;
    scenes.push_back(generate_scene(cfg.seed * 1000003ULL + i, scene_spec_of(cfg, occ)));
  }
  return scenes;
}

inline std::size_t occluded_count(const ExperimentConfig& cfg) {
  return static_cast<std::size_t>(
      std::round(cfg.occluded_fraction * static_cast<double>(cfg.eval_scenes)));
}

inline std::vector<Scene> build_train_pool(const ExperimentConfig& cfg) {
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < cfg.train_scenes; ++i) {
    const bool occ = i % 2 == 0;
    scenes.push_back(
        generate_scene(cfg.seed * 7000017ULL + 500000ULL + i, scene_spec_of(cfg, occ)));
  }
  return scenes;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<double> loss_curve;
};

inline TrainResult train_toy(const ExperimentConfig& cfg, ModelParams& model) {
  const GridSpec spec = grid_spec_of(cfg);
  std::vector<Scene> pool = build_train_pool(cfg);
  if (pool.empty()) throw ConfigError("train_toy: empty training pool");
  auto params = model.parameters();
  TrainResult result;
  result.loss_curve.reserve(cfg.train_steps);
  for (std::size_t step = 0; step < cfg.train_steps; ++step) {
    const Scene& scene = pool[step % pool.size()];
    FrameResult frame = run_frame(cfg, scene, model, step, /*training=*/true);
    DetectionTargets targets = rasterize_targets(scene.objects, spec);
    Var loss = detection_loss(frame.head, targets, cfg.pos_weight, cfg.lambda_reg);
    const double value = loss.value().data[0];
    if (!std::isfinite(value))
      throw TrainingError("train_toy: non-finite loss at step " + std::to_string(step));
    backward(loss);
    // step decay: full rate for 60% of the run, then 1/2, then 1/4
    const double lr = cfg.learning_rate *
                      (step * 5 < cfg.train_steps * 3 ? 1.0
                       : step * 20 < cfg.train_steps * 17 ? 0.5
                                                          : 0.25);
    sgd_step(params, lr);
    result.loss_curve.push_back(value);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct FrameRow {
  std::size_t frame = 0;
  bool occluded = false;
  std::size_t gt = 0;
  std::size_t detections = 0;
  std::size_t selected_cells = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t wire_bytes = 0;
};

struct SuiteMetrics {
  double ap50 = 0, ap70 = 0;
  double ap50_occluded = 0, ap50_open = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t wire_bytes = 0;
  double log2_payload = 0;
  double full_map_log2 = 0;
  double mean_payload_bytes = 0;
  std::uint64_t suite_hash = 0;
  std::vector<FrameRow> rows;
};

inline SuiteMetrics evaluate_suite(const ExperimentConfig& cfg, ModelParams& model,
                                   const std::vector<Scene>& scenes) {
  const GridSpec spec = grid_spec_of(cfg);
  const std::size_t n = scenes.size();
  std::vector<std::vector<Detection>> dets(n);
  std::vector<std::vector<Box2>> gts(n);
  std::vector<FrameRow> rows(n);

  const std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  const std::size_t nthreads = std::min(cfg.threads ? cfg.threads : hw, std::max<std::size_t>(n, 1));
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      FrameResult r = run_frame(cfg, scenes[i], model, i, /*training=*/false);
      dets[i] = r.detections;
      for (const auto& o : scenes[i].objects) gts[i].push_back(o.footprint());
      rows[i] = FrameRow{i,          !scenes[i].occluders.empty(), scenes[i].objects.size(),
                         r.detections.size(), r.selected_cells,    r.payload_bytes,
                         r.wire_bytes};
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < nthreads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  SuiteMetrics m;
  m.suite_hash = scene_suite_hash(scenes);
  m.rows = rows;
  m.ap50 = evaluate_ap(dets, gts, 0.5);
  m.ap70 = evaluate_ap(dets, gts, 0.7);

  const std::size_t occ = occluded_count(cfg);
  if (occ > 0 && occ < n) {
    std::vector<std::vector<Detection>> d_occ(dets.begin(), dets.begin() + occ);
    std::vector<std::vector<Box2>> g_occ(gts.begin(), gts.begin() + occ);
    std::vector<std::vector<Detection>> d_open(dets.begin() + occ, dets.end());
    std::vector<std::vector<Box2>> g_open(gts.begin() + occ, gts.end());
    m.ap50_occluded = evaluate_ap(d_occ, g_occ, 0.5);
    m.ap50_open = evaluate_ap(d_open, g_open, 0.5);
  } else {
    m.ap50_occluded = m.ap50_open = m.ap50;
  }

  for (const auto& r : rows) {
    m.payload_bytes += r.payload_bytes;
    m.wire_bytes += r.wire_bytes;
  }
  m.log2_payload = m.payload_bytes == 0 ? 0.0 : std::log2(static_cast<double>(m.payload_bytes));
  m.full_map_log2 = BandwidthLedger::full_map_log2(spec.grid_h(), spec.grid_w(), spec.channels);
  m.mean_payload_bytes = n == 0 ? 0.0 : static_cast<double>(m.payload_bytes) / static_cast<double>(n);
  return m;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline void write_metrics_csv(const ExperimentConfig& cfg, const SuiteMetrics& m,
                              std::ostream& os) {
  os << "# lcv2i metrics\n";
  for (const auto& [k, v] : config_entries(cfg)) os << "# " << k << " = " << v << "\n";
  char buf[128];
  std::snprintf(buf, sizeof(buf), "# suite_hash = %016llx\n",
                static_cast<unsigned long long>(m.suite_hash));
  os << buf;
  os << "frame,split,gt,detections,selected_cells,payload_bytes,wire_bytes\n";
  for (const auto& r : m.rows)
    os << r.frame << "," << (r.occluded ? "occluded" : "open") << "," << r.gt << ","
       << r.detections << "," << r.selected_cells << "," << r.payload_bytes << "," << r.wire_bytes
       << "\n";
  auto emit = [&](const char* key, double v) {
    std::snprintf(buf, sizeof(buf), "# %s = %.6f\n", key, v);
    os << buf;
  };
  emit("ap50", m.ap50);
  emit("ap70", m.ap70);
  emit("ap50_occluded", m.ap50_occluded);
  emit("ap50_open", m.ap50_open);
  emit("log2_payload_bytes", m.log2_payload);
  emit("full_map_log2_bytes", m.full_map_log2);
  emit("mean_payload_bytes", m.mean_payload_bytes);
}

inline void write_metrics_csv_file(const ExperimentConfig& cfg, const SuiteMetrics& m,
                                   const std::string& path) {
  std::ofstream f(path, std::ios::binary);  // LF line endings everywhere
  if (!f) throw ConfigError("write_metrics_csv_file: cannot open " + path);
  write_metrics_csv(cfg, m, f);
}

// Portable graymap (P2), 0 or 255 per cell, row 0 at the top.
inline void write_pgm(const BinaryMask& mask, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("write_pgm: cannot open " + path);
  f << "P2\n" << mask.w << " " << mask.h << "\n255\n";
  for (std::size_t r = 0; r < mask.h; ++r) {
    for (std::size_t c = 0; c < mask.w; ++c) f << (mask.at(r, c) ? 255 : 0) << (c + 1 == mask.w ? "" : " ");
    f << "\n";
  }
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string name;
  ExperimentConfig cfg;
  SuiteMetrics metrics;
  double final_loss = 0;
};

// Table-2 style matrix: baseline, +VWF, +VWF+FOCM, +all. Every row trains its
// own model on the shared scene suite.
inline std::vector<std::pair<std::string, ExperimentConfig>> table2_matrix(
    const ExperimentConfig& base) {
  auto row = [&](const char* name, bool vwf, bool focm, bool rfea) {
    ExperimentConfig c = base;
    c.camera = vwf;
    c.vwf = vwf;
    c.focm = focm;
    c.rfea = rfea;
    return std::make_pair(std::string(name), c);
  };
  return {row("baseline", false, false, false), row("vwf", true, false, false),
          row("vwf_focm", true, true, false), row("vwf_focm_rfea", true, true, true)};
}

inline std::vector<AblationRow> run_ablation(
    const std::vector<std::pair<std::string, ExperimentConfig>>& matrix) {
  if (matrix.empty()) throw ConfigError("run_ablation: empty matrix");
  std::vector<AblationRow> rows;
  std::uint64_t suite_hash = 0;
  for (const auto& [name, cfg] : matrix) {
    cfg.validate();
    std::vector<Scene> suite = build_eval_suite(cfg);
    const std::uint64_t h = scene_suite_hash(suite);
    if (rows.empty())
      suite_hash = h;
    else if (h != suite_hash)
      throw ConfigError("run_ablation: row '" + name + "' does not share the scene suite");
    ModelParams model = ModelParams::init(cfg, cfg.seed);
    TrainResult tr = train_toy(cfg, model);
    AblationRow row;
    row.name = name;
    row.cfg = cfg;
    row.metrics = evaluate_suite(cfg, model, suite);
    row.final_loss = tr.loss_curve.empty() ? 0.0 : tr.loss_curve.back();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace lcv2i

#pragma once

#include <algorithm>
#include <vector>

#include "lcv2i/geometry.hpp"
#include "lcv2i/scenario.hpp"
#include "lcv2i/tensor.hpp"

namespace lcv2i {

// BEV grid geometry. Ranges are full extents centered on the origin of the
// global frame; cells are (lo, hi] intervals so boundary points land in the
// lower-index cell.
struct GridSpec {
  double x_range = 32.0;
  double y_range = 32.0;
  double cell_size = 0.5;
  std::size_t height_bins = 1;
  std::size_t channels = 16;
  double z_min = 0.0;
  double z_max = 8.0;

  std::size_t grid_h() const { return static_cast<std::size_t>(std::round(y_range / cell_size)); }
  std::size_t grid_w() const { return static_cast<std::size_t>(std::round(x_range / cell_size)); }
  std::size_t cells() const { return height_bins * grid_h() * grid_w(); }

  void validate() const {
    if (cell_size <= 0) throw ConfigError("GridSpec: cell_size must be > 0");
    auto integral = [&](double range) {
      const double q = range / cell_size;
      return std::abs(q - std::round(q)) < 1e-9;
    };
    if (!integral(x_range) || !integral(y_range))
      throw ConfigError("GridSpec: ranges must be integral multiples of cell_size");
    if (height_bins < 1) throw ConfigError("GridSpec: height_bins must be >= 1");
  }

  double x_min() const { return -x_range / 2; }
  double y_min() const { return -y_range / 2; }

  // Boundary values belong to the lower-index cell; the global minimum edge
  // is therefore out of range.
  static long bin_index(double v, double lo, double cell, std::size_t count) {
    const double t = (v - lo) / cell;
    long i = static_cast<long>(std::floor(t));
    if (t == std::floor(t)) --i;
    if (i < 0 || i >= static_cast<long>(count)) return -1;
    return i;
  }

  long col_of(double x) const { return bin_index(x, x_min(), cell_size, grid_w()); }
  long row_of(double y) const { return bin_index(y, y_min(), cell_size, grid_h()); }
  long zbin_of(double z) const {
    return bin_index(z, z_min, (z_max - z_min) / static_cast<double>(height_bins), height_bins);
  }

  double col_center(std::size_t c) const { return x_min() + (static_cast<double>(c) + 0.5) * cell_size; }
  double row_center(std::size_t r) const { return y_min() + (static_cast<double>(r) + 0.5) * cell_size; }
  double zbin_center(std::size_t zb) const {
    const double zc = (z_max - z_min) / static_cast<double>(height_bins);
    return z_min + (static_cast<double>(zb) + 0.5) * zc;
  }
};

// Per-voxel point statistics: count, mean offset from the voxel center
// (dx, dy, dz) and mean intensity. Empty voxels stay zeroed.
inline constexpr std::size_t kVoxelStats = 5;

struct VoxelGrid {
  GridSpec spec;
  Tensor stats;  // (z, h, w, kVoxelStats)

  double stat_at(std::size_t zb, std::size_t r, std::size_t c, std::size_t k) const {
    return stats.data[(((zb * spec.grid_h()) + r) * spec.grid_w() + c) * kVoxelStats + k];
  }
  double count_at(std::size_t zb, std::size_t r, std::size_t c) const { return stat_at(zb, r, c, 0); }

  double total_points() const {
    double total = 0;
    for (std::size_t i = 0; i < stats.numel(); i += kVoxelStats) total += stats.data[i];
    return total;
  }
};

struct GlobalPoint {
  double x = 0, y = 0, z = 0, intensity = 0;
};

inline std::vector<GlobalPoint> to_global_frame(const std::vector<LidarPoint>& points,
                                                const Pose2& pose) {
  std::vector<GlobalPoint> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    const Vec3 g = pose.to_global({p.x, p.y, p.z});
    out.push_back({g.x, g.y, g.z, p.intensity});
  }
  return out;
}

// Order-independent aggregation: points are sorted inside each voxel before
// the sums are taken, so permuting the input cannot change the result.
inline VoxelGrid voxelize(const std::vector<GlobalPoint>& points, const GridSpec& spec) {
  spec.validate();
  VoxelGrid grid;
  grid.spec = spec;
  const std::size_t h = spec.grid_h(), w = spec.grid_w(), zb = spec.height_bins;
  grid.stats = Tensor::zeros({zb, h, w, kVoxelStats});

  struct Binned {
    std::size_t voxel;
    GlobalPoint p;
  };
  std::vector<Binned> binned;
  binned.reserve(points.size());
  for (const auto& p : points) {
    const long c = spec.col_of(p.x);
    const long r = spec.row_of(p.y);
    const long z = spec.zbin_of(p.z);
    if (c < 0 || r < 0 || z < 0) continue;
    binned.push_back({(static_cast<std::size_t>(z) * h + static_cast<std::size_t>(r)) * w +
                          static_cast<std::size_t>(c),
                      p});
  }
  std::sort(binned.begin(), binned.end(), [](const Binned& a, const Binned& b) {
    if (a.voxel != b.voxel) return a.voxel < b.voxel;
    if (a.p.x != b.p.x) return a.p.x < b.p.x;
    if (a.p.y != b.p.y) return a.p.y < b.p.y;
    if (a.p.z != b.p.z) return a.p.z < b.p.z;
    return a.p.intensity < b.p.intensity;
  });

  std::size_t i = 0;
  while (i < binned.size()) {
    std::size_t j = i;
    double sx = 0, sy = 0, sz = 0, si = 0;
    while (j < binned.size() && binned[j].voxel == binned[i].voxel) {
      sx += binned[j].p.x;
      sy += binned[j].p.y;
      sz += binned[j].p.z;
      si += binned[j].p.intensity;
      ++j;
    }
    const double n = static_cast<double>(j - i);
    const std::size_t voxel = binned[i].voxel;
    const std::size_t col = voxel % w;
    const std::size_t row = (voxel / w) % h;
    const std::size_t zbin = voxel / (w * h);
    double* s = &grid.stats.data[voxel * kVoxelStats];
    s[0] = n;
    s[1] = sx / n - spec.col_center(col);
    s[2] = sy / n - spec.row_center(row);
    s[3] = sz / n - spec.zbin_center(zbin);
    s[4] = si / n;
    i = j;
  }
  return grid;
}

struct PillarEncoderParams {
  Parameter w1, b1;  // (kVoxelStats, hidden), (hidden)
  Parameter w2, b2;  // (hidden, c), (c)

  static PillarEncoderParams init(std::size_t channels, Rng& rng, std::size_t hidden = 16) {
    PillarEncoderParams p;
    p.w1 = Parameter("pillar.w1", uniform_init({kVoxelStats, hidden}, kVoxelStats, rng));
    p.b1 = Parameter("pillar.b1", Tensor::zeros({hidden}));
    p.w2 = Parameter("pillar.w2", uniform_init({hidden, channels}, hidden, rng));
    p.b2 = Parameter("pillar.b2", Tensor::zeros({channels}));
    return p;
  }

  std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }
};

// Per-voxel two-layer embedding of the point statistics; no spatial mixing.
// The count channel is compressed with log1p and the remaining statistics
// are rescaled to unit order before the projection. Returns (c, z, h, w).
inline Var pillar_encode(const VoxelGrid& grid, PillarEncoderParams& params) {
  const GridSpec& spec = grid.spec;
  const std::size_t c = spec.channels;
  if (params.w2.value().shape[1] != c)
    throw ConfigError("pillar_encode: params emit " + std::to_string(params.w2.value().shape[1]) +
                      " channels, spec wants " + std::to_string(c));
  const std::size_t n = spec.cells();
  const double offset_scale = 2.0 / spec.cell_size;
  const double z_scale = 6.0 / (spec.z_max - spec.z_min);
  Tensor rows = Tensor::zeros({n, kVoxelStats});
  for (std::size_t i = 0; i < n; ++i) {
    const double* s = &grid.stats.data[i * kVoxelStats];
    double* r = &rows.data[i * kVoxelStats];
    r[0] = 3.0 * std::tanh(std::log1p(s[0]));
    r[1] = s[1] * offset_scale;
    r[2] = s[2] * offset_scale;
    r[3] = s[3] * z_scale;
    r[4] = s[4] * 8.0;
  }
  Var hidden = tanh_act(linear(constant(std::move(rows)), params.w1.var(), params.b1.var()));
  Var features = linear(hidden, params.w2.var(), params.b2.var());
  return reshape(transpose2d(features), {c, spec.height_bins, spec.grid_h(), spec.grid_w()});
}

struct ImageEncoderParams {
  Parameter w1, b1, w2, b2;
  std::size_t mid_channels = 8;

  static ImageEncoderParams init(std::size_t out_channels, Rng& rng, std::size_t mid = 8) {
    ImageEncoderParams p;
    p.mid_channels = mid;
    p.w1 = Parameter("imgenc.w1", uniform_init({mid, 1, 3, 3}, 9, rng));
    p.b1 = Parameter("imgenc.b1", Tensor::zeros({mid}));
    p.w2 = Parameter("imgenc.w2", uniform_init({out_channels, mid, 3, 3}, 9 * mid, rng));
    p.b2 = Parameter("imgenc.b2", Tensor::zeros({out_channels}));
    return p;
  }

  std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }
};

inline constexpr std::size_t kImageEncoderStride = 4;

// Two strided convolutions; spatial downsample factor 4.
inline Var image_encode(const Tensor& image, ImageEncoderParams& params,
                        std::size_t expected_h = 0, std::size_t expected_w = 0) {
  if (image.rank() != 3 || image.shape[0] != 1)
    throw ConfigError("image_encode: expects (1, H, W), got " + shape_to_string(image.shape));
  if (expected_h && (image.shape[1] != expected_h || image.shape[2] != expected_w))
    throw ConfigError("image_encode: resolution " + shape_to_string(image.shape) +
                      " does not match configured (" + std::to_string(expected_h) + ", " +
                      std::to_string(expected_w) + ")");
  Var x = constant(image);
  Var h1 = tanh_act(conv2d(x, params.w1.var(), params.b1.var(), 2, 1));
  return conv2d(h1, params.w2.var(), params.b2.var(), 2, 1);
}

// Resamples a local-frame BEV grid into the global frame. Output cell g takes
// the bilinear sample of the input at the local-frame location of g.
inline Var to_global_frame(const Var& features, const GridSpec& spec, const Pose2& pose) {
  const Tensor& fv = features.value();
  if (fv.rank() != 3) throw DimensionError("to_global_frame: expects (c, h, w)");
  const std::size_t h = spec.grid_h(), w = spec.grid_w();
  Tensor pts = Tensor::zeros({h * w, 2});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t cI = 0; cI < w; ++cI) {
      const Vec3 local = pose.to_local({spec.col_center(cI), spec.row_center(r), 0});
      pts.data[(r * w + cI) * 2 + 0] = (local.x - spec.x_min()) / spec.cell_size - 0.5;
      pts.data[(r * w + cI) * 2 + 1] = (local.y - spec.y_min()) / spec.cell_size - 0.5;
    }
  Var sampled = bilinear_sample(features, constant(std::move(pts)));  // (h*w, c)
  return reshape(transpose2d(sampled), {fv.shape[0], h, w});
}

inline Var to_local_frame(const Var& features, const GridSpec& spec, const Pose2& pose) {
  Pose2 inv;
  inv.yaw = -pose.yaw;
  const double c = std::cos(-pose.yaw), s = std::sin(-pose.yaw);
  inv.x = -(c * pose.x - s * pose.y);
  inv.y = -(s * pose.x + c * pose.y);
  return to_global_frame(features, spec, inv);
}

}  // namespace lcv2i

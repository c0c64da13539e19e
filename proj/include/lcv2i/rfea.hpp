#pragma once

#include "lcv2i/mask.hpp"
#include "lcv2i/tensor.hpp"

namespace lcv2i {

struct RegionalDifferenceMap {
  BinaryMask mask;
  double threshold_used = 0;
  double sigma_used = 0;
};

// Per-cell mean absolute channel value of a (c, h, w) feature map.
inline Tensor channel_magnitude(const Tensor& feature) {
  if (feature.rank() != 3)
    throw DimensionError("channel_magnitude: expects (c, h, w), got " + shape_to_string(feature.shape));
  const std::size_t c = feature.shape[0], h = feature.shape[1], w = feature.shape[2];
  Tensor out = Tensor::zeros({h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) out.data[i] += std::abs(feature.data[ch * h * w + i]);
  for (double& v : out.data) v /= static_cast<double>(c);
  return out;
}

// Pre-threshold regional difference field: smooth the magnitude map, then
// average the absolute differences to the four neighbors, missing neighbors
// reading as zero. A cell with no neighbors at all keeps its own value.
inline Tensor feature_difference_matrix(const Tensor& feature, double sigma, std::size_t kernel) {
  Tensor mag = channel_magnitude(feature);
  const std::size_t h = mag.shape[0], w = mag.shape[1];
  Tensor smooth =
      gaussian_filter2d(constant(Tensor({1, h, w}, mag.data)), sigma, kernel).value();
  Tensor out = Tensor::zeros({h, w});
  const bool has_neighbors = h > 1 || w > 1;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double vc = smooth.data[r * w + c];
      if (!has_neighbors) {
        out.data[0] = vc;
        continue;
      }
      const double vt = r > 0 ? smooth.data[(r - 1) * w + c] : 0.0;
      const double vb = r + 1 < h ? smooth.data[(r + 1) * w + c] : 0.0;
      const double vl = c > 0 ? smooth.data[r * w + c - 1] : 0.0;
      const double vr = c + 1 < w ? smooth.data[r * w + c + 1] : 0.0;
      out.data[r * w + c] =
          (std::abs(vc - vt) + std::abs(vc - vb) + std::abs(vc - vl) + std::abs(vc - vr)) / 4.0;
    }
  return out;
}

// Thresholds the difference field into the binary regional difference map.
// Ties (V_d == threshold) map to 0.
inline RegionalDifferenceMap regional_difference_map(const Tensor& feature, double sigma,
                                                     std::size_t kernel, double threshold) {
  if (threshold <= 0.0)
    throw ConfigError("regional_difference_map: threshold must be > 0, got " +
                      std::to_string(threshold));
  Tensor vd = feature_difference_matrix(feature, sigma, kernel);
  RegionalDifferenceMap out;
  out.threshold_used = threshold;
  out.sigma_used = sigma;
  out.mask = BinaryMask(vd.shape[0], vd.shape[1]);
  for (std::size_t i = 0; i < vd.numel(); ++i) out.mask.bits[i] = vd.data[i] > threshold ? 1 : 0;
  return out;
}

}  // namespace lcv2i

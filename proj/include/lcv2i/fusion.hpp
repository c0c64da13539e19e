#pragma once

#include <vector>

#include "lcv2i/encoders.hpp"
#include "lcv2i/tensor.hpp"

namespace lcv2i {

// Voxel features travel through fusion as (cells, channels) rows; grids are
// the (c, ...) tensor view used at module boundaries. flatten_voxels converts
// grid -> rows, unflatten_voxels the reverse.

struct MultiScaleImageFeatures {
  std::vector<Var> scales;  // scales[0] is the original feature map
};

// Scale i+1 is a window-2 stride-2 max pool of scale i.
inline MultiScaleImageFeatures build_scales(const Var& img_ori, std::size_t num_scales) {
  if (num_scales < 1) throw ConfigError("build_scales: need at least one scale");
  MultiScaleImageFeatures out;
  out.scales.push_back(img_ori);
  for (std::size_t i = 1; i < num_scales; ++i) {
    const Tensor& prev = out.scales.back().value();
    if (prev.shape[1] < 2 || prev.shape[2] < 2)
      throw ConfigError("build_scales: scale " + std::to_string(i + 1) + " would drop below 1x1");
    out.scales.push_back(maxpool2d(out.scales.back(), 2, 2));
  }
  return out;
}

// (c, d1, ..., dk) -> (d1*...*dk, c), spatial dims row-major.
inline Var flatten_voxels(const Var& grid) {
  const Tensor& g = grid.value();
  if (g.rank() < 2) throw DimensionError("flatten_voxels: expects a channel-leading grid");
  const std::size_t c = g.shape[0];
  return transpose2d(reshape(grid, {c, g.numel() / c}));
}

inline Var unflatten_voxels(const Var& rows, const std::vector<std::size_t>& grid_shape) {
  const Tensor& r = rows.value();
  if (r.rank() != 2) throw DimensionError("unflatten_voxels: expects (n, c)");
  return reshape(transpose2d(rows), grid_shape);
}

// Per-voxel anchor in a scale's image-feature plane. Invalid anchors (behind
// the camera or off the image) keep a far-outside sentinel coordinate and are
// bypassed by the attention.
struct ReferencePoints {
  Tensor points;                    // (n, 2) feature-plane (x, y)
  std::vector<std::uint8_t> valid;  // per voxel
};

// Projects BEV cell centers at ref_height into the camera, then maps image
// pixels to scale-s feature coordinates (s is 1-based).
inline ReferencePoints compute_reference_points(const GridSpec& spec, const Camera& camera,
                                                const Pose2& pose, double mount_height,
                                                double ref_height, std::size_t scale,
                                                std::size_t encoder_stride = kImageEncoderStride) {
  const std::size_t h = spec.grid_h(), w = spec.grid_w();
  const double scale_factor =
      1.0 / (static_cast<double>(encoder_stride) * static_cast<double>(1ULL << (scale - 1)));
  ReferencePoints refs;
  refs.points = Tensor::zeros({h * w, 2});
  refs.valid.assign(h * w, 0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      const auto p =
          camera.project({spec.col_center(c), spec.row_center(r), ref_height}, pose, mount_height);
      if (p.in_front && p.in_image) {
        refs.valid[i] = 1;
        refs.points.data[i * 2 + 0] = p.u * scale_factor;
        refs.points.data[i * 2 + 1] = p.v * scale_factor;
      } else {
        refs.points.data[i * 2 + 0] = -1000.0;
        refs.points.data[i * 2 + 1] = -1000.0;
      }
    }
  return refs;
}

struct VwfParams {
  std::size_t num_scales = 3;
  std::size_t samples = 4;  // J
  // per scale: offset head (c, 2J), logit head (c, J), per-sample value (c, c)
  std::vector<Parameter> offset_w, offset_b;
  std::vector<Parameter> logit_w, logit_b;
  std::vector<std::vector<Parameter>> value_w;
  Parameter out_w, out_b;  // (num_scales*c, c), (c)

  static VwfParams init(std::size_t channels, std::size_t num_scales, std::size_t samples,
                        Rng& rng) {
    if (samples < 1) throw ConfigError("VwfParams: J must be >= 1");
    VwfParams p;
    p.num_scales = num_scales;
    p.samples = samples;
    for (std::size_t s = 0; s < num_scales; ++s) {
      const std::string tag = "vwf.s" + std::to_string(s + 1);
      // offsets start at zero so training begins at the reference point
      p.offset_w.emplace_back(tag + ".offset_w", Tensor::zeros({channels, 2 * samples}));
      p.offset_b.emplace_back(tag + ".offset_b", Tensor::zeros({2 * samples}));
      p.logit_w.emplace_back(tag + ".logit_w", uniform_init({channels, samples}, channels, rng));
      p.logit_b.emplace_back(tag + ".logit_b", Tensor::zeros({samples}));
      std::vector<Parameter> vals;
      for (std::size_t k = 0; k < samples; ++k)
        vals.emplace_back(tag + ".value_w" + std::to_string(k),
                          uniform_init({channels, channels}, channels, rng));
      p.value_w.push_back(std::move(vals));
    }
    p.out_w = Parameter("vwf.out_w", uniform_init({num_scales * channels, channels},
                                                  num_scales * channels, rng));
    p.out_b = Parameter("vwf.out_b", Tensor::zeros({channels}));
    return p;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> ps;
    for (std::size_t s = 0; s < num_scales; ++s) {
      ps.push_back(&offset_w[s]);
      ps.push_back(&offset_b[s]);
      ps.push_back(&logit_w[s]);
      ps.push_back(&logit_b[s]);
      for (auto& v : value_w[s]) ps.push_back(&v);
    }
    ps.push_back(&out_w);
    ps.push_back(&out_b);
    return ps;
  }
};

// One scale of reference-point attention: for each query, J offset samples of
// the image features are combined with softmax weights, out = sum_k A_k W_k
// F(P + dP_k). Queries with an invalid reference pass through unchanged.
inline Var deformable_cross_attention(const Var& queries, const Var& img_scale,
                                      const ReferencePoints& refs, VwfParams& params,
                                      std::size_t scale_index, Var* attention_out = nullptr) {
  if (params.samples < 1) throw ConfigError("deformable_cross_attention: J must be >= 1");
  const std::size_t n = queries.value().shape[0];
  const std::size_t c = queries.value().shape[1];
  if (refs.points.shape[0] != n)
    throw DimensionError("deformable_cross_attention: query/reference count mismatch");
  const std::size_t s = scale_index;
  const std::size_t J = params.samples;

  Var offsets = linear(queries, params.offset_w[s].var(), params.offset_b[s].var());  // (n, 2J)
  Var logits = linear(queries, params.logit_w[s].var(), params.logit_b[s].var());     // (n, J)
  Var weights = softmax(logits, 1);
  if (attention_out) *attention_out = weights;

  Var ref_points = constant(refs.points);
  Var fused;
  for (std::size_t k = 0; k < J; ++k) {
    Var pts = add(ref_points, slice_cols(offsets, 2 * k, 2 * k + 2));
    Var sampled = bilinear_sample(img_scale, pts);                 // (n, c)
    Var valued = matmul(sampled, params.value_w[s][k].var());      // (n, c)
    Var wk = reshape(slice_cols(weights, k, k + 1), {n});
    Var term = rowwise_scale(valued, wk);
    fused = k == 0 ? term : add(fused, term);
  }

  Tensor valid_mask = Tensor::zeros({n});
  Tensor invalid_mask = Tensor::zeros({n});
  for (std::size_t i = 0; i < n; ++i) {
    valid_mask.data[i] = refs.valid[i] ? 1.0 : 0.0;
    invalid_mask.data[i] = refs.valid[i] ? 0.0 : 1.0;
  }
  (void)c;
  return add(rowwise_scale(fused, constant(valid_mask)),
             rowwise_scale(queries, constant(invalid_mask)));
}

// Channel-concatenates the per-scale fused rows and projects back to c
// channels with the linear output head.
inline Var vwf_fuse(const std::vector<Var>& per_scale, VwfParams& params) {
  if (per_scale.size() != params.num_scales)
    throw ConfigError("vwf_fuse: got " + std::to_string(per_scale.size()) + " scales, params want " +
                      std::to_string(params.num_scales));
  Var cat = per_scale.size() == 1 ? per_scale[0] : concat(per_scale, 1);
  return linear(cat, params.out_w.var(), params.out_b.var());
}

struct FocmParams {
  Parameter gen_w, gen_b;  // shared per-cell weight generator (c, 1), (1)
  Parameter out_w, out_b;  // (2c, c), (c)

  static FocmParams init(std::size_t channels, Rng& rng) {
    FocmParams p;
    p.gen_w = Parameter("focm.gen_w", uniform_init({channels, 1}, channels, rng));
    p.gen_b = Parameter("focm.gen_b", Tensor::zeros({1}));
    p.out_w = Parameter("focm.out_w", uniform_init({2 * channels, channels}, 2 * channels, rng));
    p.out_b = Parameter("focm.out_b", Tensor::zeros({channels}));
    return p;
  }

  std::vector<Parameter*> parameters() { return {&gen_w, &gen_b, &out_w, &out_b}; }
};

// Feature offset correction: each input map is scaled cell-wise by the
// other's generator weight (a logistic scalar per cell), the two halves are
// concatenated and projected: F_oc = W_oc(F_voxel*W_fused (+) F_fused*W_voxel) + B_oc.
inline Var focm(const Var& voxel_rows, const Var& fused_rows, FocmParams& params) {
  require_same_shape(voxel_rows.value(), fused_rows.value(), "focm");
  const std::size_t n = voxel_rows.value().shape[0];
  Var w_voxel = logistic(linear(voxel_rows, params.gen_w.var(), params.gen_b.var()));
  Var w_fused = logistic(linear(fused_rows, params.gen_w.var(), params.gen_b.var()));
  Var half_a = rowwise_scale(voxel_rows, reshape(w_fused, {n}));
  Var half_b = rowwise_scale(fused_rows, reshape(w_voxel, {n}));
  return linear(concat({half_a, half_b}, 1), params.out_w.var(), params.out_b.var());
}

}  // namespace lcv2i

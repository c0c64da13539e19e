#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lcv2i/encoders.hpp"
#include "lcv2i/mask.hpp"
#include "lcv2i/tensor.hpp"

namespace lcv2i {

// ---------------------------------------------------------------------------
// Detection decoder
// ---------------------------------------------------------------------------

struct Detection {
  double score = 0;    // class confidence in [0, 1]
  Box2 box;            // meters
  std::size_t cell = 0;  // originating BEV cell, used for deterministic ties
};

// Per-cell linear head: (class logit, dx, dy, log length, log width).
inline constexpr std::size_t kDecoderOutputs = 5;

struct DecoderParams {
  Parameter weight;  // (c, 5)
  Parameter bias;    // (5)

  static DecoderParams init(std::size_t channels, Rng& rng) {
    DecoderParams p;
    p.weight = Parameter("decoder.weight", uniform_init({channels, kDecoderOutputs}, channels, rng));
    p.bias = Parameter("decoder.bias", Tensor::zeros({kDecoderOutputs}));
    return p;
  }

  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

inline Var decoder_head(const Var& feature_rows, DecoderParams& params) {
  return linear(feature_rows, params.weight.var(), params.bias.var());
}

// ---------------------------------------------------------------------------
// Protocol masks
// ---------------------------------------------------------------------------

// Cells whose decoder confidence reaches the threshold (boundary inclusive).
// The score map reuses the detection decoder's parameters.
inline BinaryMask score_map(const Tensor& f_oc_grid, DecoderParams& params, double threshold) {
  if (f_oc_grid.rank() != 3)
    throw DimensionError("score_map: expects (c, h, w), got " + shape_to_string(f_oc_grid.shape));
  const std::size_t c = f_oc_grid.shape[0], h = f_oc_grid.shape[1], w = f_oc_grid.shape[2];
  Tensor rows = Tensor::zeros({h * w, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) rows.data[i * c + ch] = f_oc_grid.data[ch * h * w + i];
  Tensor head = decoder_head(constant(std::move(rows)), params).value();
  BinaryMask mask(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double conf = 1.0 / (1.0 + std::exp(-head.at(i, 0)));
    mask.bits[i] = conf >= threshold ? 1 : 0;
  }
  return mask;
}

enum class ConfidenceCombine { kOr, kAnd };

// M_sd: where the difference map complements the score map.
inline BinaryMask confidence_map(const BinaryMask& score, const BinaryMask& difference,
                                 ConfidenceCombine combine = ConfidenceCombine::kOr) {
  require_same_dims(score, difference, "confidence_map");
  BinaryMask out(score.h, score.w);
  for (std::size_t i = 0; i < out.cells(); ++i)
    out.bits[i] = combine == ConfidenceCombine::kOr ? (score.bits[i] | difference.bits[i])
                                                    : (score.bits[i] & difference.bits[i]);
  return out;
}

// M_re = 1 - M_sd.
inline BinaryMask request_map(const BinaryMask& confidence) {
  BinaryMask out(confidence.h, confidence.w);
  for (std::size_t i = 0; i < out.cells(); ++i) out.bits[i] = confidence.bits[i] ? 0 : 1;
  return out;
}

enum class SelectionRule { kXnor, kAnd };

inline BinaryMask selection_mask(const BinaryMask& request_local, const BinaryMask& conf_remote,
                                 SelectionRule rule = SelectionRule::kXnor) {
  require_same_dims(request_local, conf_remote, "selection_mask");
  BinaryMask s(request_local.h, request_local.w);
  for (std::size_t i = 0; i < s.cells(); ++i)
    s.bits[i] = rule == SelectionRule::kXnor
                    ? (request_local.bits[i] == conf_remote.bits[i] ? 1 : 0)
                    : (request_local.bits[i] & conf_remote.bits[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Messages and wire format
// ---------------------------------------------------------------------------

// Sparse selected features. Values are narrowed to 32-bit floats; the
// selection mask travels with the message.
struct CollabMessage {
  std::uint32_t h = 0, w = 0, channels = 0;
  std::uint32_t sender_id = 0, frame_id = 0;
  BinaryMask mask;                      // selection mask S
  std::vector<std::uint32_t> indices;   // strictly increasing cell ids
  std::vector<float> values;            // channels per index

  std::size_t payload_value_bytes() const { return values.size() * sizeof(float); }
};

// S = XNOR(M_re_local, M_sd_remote); cells with S = 1 and a non-zero feature
// vector are packed sparsely.
inline CollabMessage select_features(const Tensor& f_oc_remote, const BinaryMask& request_local,
                                     const BinaryMask& conf_remote,
                                     SelectionRule rule = SelectionRule::kXnor,
                                     std::uint32_t sender_id = 0, std::uint32_t frame_id = 0) {
  if (f_oc_remote.rank() != 3)
    throw DimensionError("select_features: expects (c, h, w), got " +
                         shape_to_string(f_oc_remote.shape));
  const std::size_t c = f_oc_remote.shape[0], h = f_oc_remote.shape[1], w = f_oc_remote.shape[2];
  if (request_local.h != h || request_local.w != w)
    throw DimensionError("select_features: mask dims (" + std::to_string(request_local.h) + ", " +
                         std::to_string(request_local.w) + ") vs feature " +
                         shape_to_string(f_oc_remote.shape));
  BinaryMask s = selection_mask(request_local, conf_remote, rule);

  CollabMessage msg;
  msg.h = static_cast<std::uint32_t>(h);
  msg.w = static_cast<std::uint32_t>(w);
  msg.channels = static_cast<std::uint32_t>(c);
  msg.sender_id = sender_id;
  msg.frame_id = frame_id;
  msg.mask = s;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (!s.bits[i]) continue;
    bool nonzero = false;
    for (std::size_t ch = 0; ch < c && !nonzero; ++ch) nonzero = f_oc_remote.data[ch * h * w + i] != 0.0;
    if (!nonzero) continue;
    msg.indices.push_back(static_cast<std::uint32_t>(i));
    for (std::size_t ch = 0; ch < c; ++ch)
      msg.values.push_back(static_cast<float>(f_oc_remote.data[ch * h * w + i]));
  }
  return msg;
}

// Dense (cells, channels) tensor with zeros where nothing was transmitted.
inline Tensor densify(const CollabMessage& msg) {
  Tensor out = Tensor::zeros({static_cast<std::size_t>(msg.h) * msg.w, msg.channels});
  for (std::size_t k = 0; k < msg.indices.size(); ++k)
    for (std::size_t ch = 0; ch < msg.channels; ++ch)
      out.data[msg.indices[k] * msg.channels + ch] =
          static_cast<double>(msg.values[k * msg.channels + ch]);
  return out;
}

namespace wire {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32(const std::vector<std::uint8_t>& in, std::size_t off) {
  return static_cast<std::uint32_t>(in[off]) | (static_cast<std::uint32_t>(in[off + 1]) << 8) |
         (static_cast<std::uint32_t>(in[off + 2]) << 16) |
         (static_cast<std::uint32_t>(in[off + 3]) << 24);
}

inline constexpr std::uint32_t kMagic = 0x4D43434CU;  // "LCCM"
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 32;

}  // namespace wire

// Little-endian layout: 32-byte header (magic, version, h, w, channels,
// count, sender, frame), then ceil(h*w/8) mask bytes, then count u32 indices,
// then count*channels f32 values.
inline std::vector<std::uint8_t> serialize(const CollabMessage& msg) {
  std::vector<std::uint8_t> out;
  const std::size_t cells = static_cast<std::size_t>(msg.h) * msg.w;
  const std::size_t mask_bytes = (cells + 7) / 8;
  out.reserve(wire::kHeaderBytes + mask_bytes + msg.indices.size() * (4 + msg.channels * 4));
  wire::put_u32(out, wire::kMagic);
  wire::put_u32(out, wire::kVersion);
  wire::put_u32(out, msg.h);
  wire::put_u32(out, msg.w);
  wire::put_u32(out, msg.channels);
  wire::put_u32(out, static_cast<std::uint32_t>(msg.indices.size()));
  wire::put_u32(out, msg.sender_id);
  wire::put_u32(out, msg.frame_id);
  out.resize(out.size() + mask_bytes, 0);
  for (std::size_t i = 0; i < cells; ++i)
    if (msg.mask.bits[i]) out[wire::kHeaderBytes + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  for (auto idx : msg.indices) wire::put_u32(out, idx);
  for (float v : msg.values) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    wire::put_u32(out, bits);
  }
  return out;
}

inline CollabMessage deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < wire::kHeaderBytes)
    throw DecodeError("deserialize: truncated header", bytes.size());
  if (wire::get_u32(bytes, 0) != wire::kMagic) throw DecodeError("deserialize: bad magic", 0);
  if (wire::get_u32(bytes, 4) != wire::kVersion) throw DecodeError("deserialize: bad version", 4);
  CollabMessage msg;
  msg.h = wire::get_u32(bytes, 8);
  msg.w = wire::get_u32(bytes, 12);
  msg.channels = wire::get_u32(bytes, 16);
  const std::uint32_t count = wire::get_u32(bytes, 20);
  msg.sender_id = wire::get_u32(bytes, 24);
  msg.frame_id = wire::get_u32(bytes, 28);

  const std::size_t cells = static_cast<std::size_t>(msg.h) * msg.w;
  const std::size_t mask_bytes = (cells + 7) / 8;
  std::size_t off = wire::kHeaderBytes;
  if (bytes.size() < off + mask_bytes) throw DecodeError("deserialize: truncated mask", bytes.size());
  msg.mask = BinaryMask(msg.h, msg.w);
  for (std::size_t i = 0; i < cells; ++i)
    msg.mask.bits[i] = (bytes[off + i / 8] >> (i % 8)) & 1;
  off += mask_bytes;

  if (bytes.size() < off + static_cast<std::size_t>(count) * 4)
    throw DecodeError("deserialize: truncated indices", bytes.size());
  std::uint32_t prev = 0;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t idx = wire::get_u32(bytes, off);
    if (idx >= cells) throw DecodeError("deserialize: index out of range", off);
    if (k > 0 && idx <= prev) throw DecodeError("deserialize: indices not increasing", off);
    if (!msg.mask.bits[idx]) throw DecodeError("deserialize: index outside selection mask", off);
    msg.indices.push_back(idx);
    prev = idx;
    off += 4;
  }

  const std::size_t value_count = static_cast<std::size_t>(count) * msg.channels;
  if (bytes.size() < off + value_count * 4)
    throw DecodeError("deserialize: truncated values", bytes.size());
  for (std::size_t k = 0; k < value_count; ++k) {
    const std::uint32_t raw = wire::get_u32(bytes, off);
    float v;
    std::memcpy(&v, &raw, 4);
    msg.values.push_back(v);
    off += 4;
  }
  if (off != bytes.size()) throw DecodeError("deserialize: trailing bytes", off);
  return msg;
}

inline void save_message_file(const CollabMessage& msg, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("save_message_file: cannot open " + path);
  auto bytes = serialize(msg);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline CollabMessage load_message_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("load_message_file: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// ---------------------------------------------------------------------------
// Bandwidth accounting
// ---------------------------------------------------------------------------

// The headline metric counts transmitted feature bytes; the wire total is
// kept alongside. log2 is always recomputed from the byte count.
struct BandwidthLedger {
  std::uint64_t last_message_bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t wire_bytes = 0;
  std::uint64_t messages = 0;

  double log2_payload() const {
    return payload_bytes == 0 ? 0.0 : std::log2(static_cast<double>(payload_bytes));
  }

  static double full_map_log2(std::size_t h, std::size_t w, std::size_t c) {
    return std::log2(static_cast<double>(h) * static_cast<double>(w) * static_cast<double>(c) *
                     4.0);
  }
};

inline BandwidthLedger comm_cost(BandwidthLedger ledger, const CollabMessage& msg) {
  ledger.last_message_bytes = msg.payload_value_bytes();
  ledger.payload_bytes += msg.payload_value_bytes();
  ledger.wire_bytes += serialize(msg).size();
  ledger.messages += 1;
  return ledger;
}

// ---------------------------------------------------------------------------
// Message fusion (two-token self-attention per BEV cell)
// ---------------------------------------------------------------------------

struct FuseParams {
  Parameter wq, wk, wv;  // (c, c)
  Parameter token_bias;  // (2): logit bias for (remote, local); init favors local

  static FuseParams init(std::size_t channels, Rng& rng) {
    FuseParams p;
    p.wq = Parameter("fuse.wq", uniform_init({channels, channels}, channels, rng));
    p.wk = Parameter("fuse.wk", uniform_init({channels, channels}, channels, rng));
    p.wv = Parameter("fuse.wv", uniform_init({channels, channels}, channels, rng));
    p.token_bias = Parameter("fuse.token_bias", Tensor({2}, {0.0, 2.0}));
    return p;
  }

  std::vector<Parameter*> parameters() { return {&wq, &wk, &wv, &token_bias}; }
};

// Per cell, the remote and local c-vectors form a 2-token sequence; scaled
// dot-product attention with the local token as query yields F^V.
inline Var fuse_messages(const Var& remote_rows, const Var& local_rows, FuseParams& params,
                         Var* attention_out = nullptr) {
  require_same_shape(remote_rows.value(), local_rows.value(), "fuse_messages");
  const std::size_t n = local_rows.value().shape[0];
  const std::size_t c = local_rows.value().shape[1];
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));

  Var q = matmul(local_rows, params.wq.var());
  Var k_remote = matmul(remote_rows, params.wk.var());
  Var k_local = matmul(local_rows, params.wk.var());
  Var v_remote = matmul(remote_rows, params.wv.var());
  Var v_local = matmul(local_rows, params.wv.var());

  Var s_remote = reshape(scale(sum_axis(mul(q, k_remote), 1), inv_sqrt_c), {n, 1});
  Var s_local = reshape(scale(sum_axis(mul(q, k_local), 1), inv_sqrt_c), {n, 1});
  Tensor eye2 = Tensor::zeros({2, 2});
  eye2.at(0, 0) = eye2.at(1, 1) = 1.0;
  Var scores = linear(concat({s_remote, s_local}, 1), constant(eye2), params.token_bias.var());
  Var att = softmax(scores, 1);  // (n, 2)
  if (attention_out) *attention_out = att;

  Var a_remote = reshape(slice_cols(att, 0, 1), {n});
  Var a_local = reshape(slice_cols(att, 1, 2), {n});
  return add(rowwise_scale(v_remote, a_remote), rowwise_scale(v_local, a_local));
}

// ---------------------------------------------------------------------------
// Decoding and loss
// ---------------------------------------------------------------------------

// Greedy NMS: survivors have pairwise IoU < threshold. Ties on score break
// toward the lower cell index.
inline std::vector<Detection> non_max_suppression(std::vector<Detection> dets, double iou_thresh) {
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.cell < b.cell;
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (box_iou(d.box, k.box) >= iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Decodes a raw (cells, 5) head tensor against the grid geometry.
inline std::vector<Detection> decode_head_tensor(const Tensor& head, const GridSpec& spec,
                                                 double det_threshold, double nms_iou = 0.5) {
  const std::size_t h = spec.grid_h(), w = spec.grid_w();
  if (head.rank() != 2 || head.shape[0] != h * w || head.shape[1] != kDecoderOutputs)
    throw DimensionError("decode: head shape " + shape_to_string(head.shape) + " vs grid " +
                         std::to_string(h) + "x" + std::to_string(w));
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < h * w; ++i) {
    const double score = 1.0 / (1.0 + std::exp(-head.at(i, 0)));
    if (score < det_threshold) continue;
    Detection d;
    d.score = score;
    d.cell = i;
    const std::size_t r = i / w, cI = i % w;
    d.box.cx = spec.col_center(cI) + head.at(i, 1) * spec.cell_size;
    d.box.cy = spec.row_center(r) + head.at(i, 2) * spec.cell_size;
    d.box.length = std::exp(head.at(i, 3));
    d.box.width = std::exp(head.at(i, 4));
    dets.push_back(d);
  }
  return non_max_suppression(std::move(dets), nms_iou);
}

inline std::vector<Detection> decode(const Tensor& feature_rows, DecoderParams& params,
                                     const GridSpec& spec, double det_threshold,
                                     double nms_iou = 0.5) {
  Tensor head = decoder_head(constant(feature_rows), params).value();
  return decode_head_tensor(head, spec, det_threshold, nms_iou);
}

// Ground truth rasterized onto the BEV grid: a cell is positive iff an
// object's center falls in it.
struct DetectionTargets {
  std::vector<std::uint8_t> positive;  // per cell
  Tensor regression;                   // (cells, 4): dx, dy, log l, log w
  std::size_t positives = 0;
};

inline DetectionTargets rasterize_targets(const std::vector<SceneObject>& objects,
                                          const GridSpec& spec) {
  const std::size_t h = spec.grid_h(), w = spec.grid_w();
  DetectionTargets t;
  t.positive.assign(h * w, 0);
  t.regression = Tensor::zeros({h * w, 4});
  for (const auto& o : objects) {
    const long col = spec.col_of(o.cx);
    const long row = spec.row_of(o.cy);
    if (col < 0 || row < 0) continue;
    const std::size_t i = static_cast<std::size_t>(row) * w + static_cast<std::size_t>(col);
    if (t.positive[i]) continue;  // first object wins a contested cell
    t.positive[i] = 1;
    ++t.positives;
    t.regression.at(i, 0) = (o.cx - spec.col_center(col)) / spec.cell_size;
    t.regression.at(i, 1) = (o.cy - spec.row_center(row)) / spec.cell_size;
    t.regression.at(i, 2) = std::log(o.length);
    t.regression.at(i, 3) = std::log(o.width);
  }
  return t;
}

// Weighted BCE over all cells plus smooth-L1 regression at positive cells.
inline Var detection_loss(const Var& head, const DetectionTargets& targets, double pos_weight,
                          double lambda_reg) {
  const std::size_t n = head.value().shape[0];
  if (targets.positive.size() != n)
    throw DimensionError("detection_loss: target count mismatch");
  Tensor y = Tensor::zeros({n});
  Tensor wts = Tensor::full({n}, 1.0);
  std::vector<std::size_t> pos_rows;
  for (std::size_t i = 0; i < n; ++i)
    if (targets.positive[i]) {
      y.data[i] = 1.0;
      wts.data[i] = pos_weight;
      pos_rows.push_back(i);
    }
  Var logits = reshape(slice_cols(head, 0, 1), {n});
  Var cls = bce_with_logits(logits, y, wts);
  if (pos_rows.empty()) return cls;

  Tensor reg_target = Tensor::zeros({pos_rows.size(), 4});
  for (std::size_t k = 0; k < pos_rows.size(); ++k)
    for (std::size_t j = 0; j < 4; ++j)
      reg_target.at(k, j) = targets.regression.at(pos_rows[k], j);
  Var reg = smooth_l1(gather_rows(slice_cols(head, 1, kDecoderOutputs), pos_rows), reg_target);
  return add(cls, scale(reg, lambda_reg));
}

}  // namespace lcv2i

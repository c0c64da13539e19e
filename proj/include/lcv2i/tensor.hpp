#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lcv2i/common.hpp"

namespace lcv2i {

// Dense row-major tensor of 64-bit floats.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> s, double v) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape) + " vs " +
                         shape_to_string(b.shape));
}

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // same shape as value, zero until backward
  bool needs_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // accumulates into inputs' grad using this->grad
};

using NodePtr = std::shared_ptr<Node>;

inline NodePtr make_node(Tensor value, std::vector<NodePtr> inputs) {
  auto n = std::make_shared<Node>();
  n->grad = Tensor::zeros(value.shape);
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs)
    if (in->needs_grad) n->needs_grad = true;
  return n;
}

}  // namespace detail

// Handle to a node in the reverse-mode tape.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool needs_grad = false) {
    n_ = detail::make_node(std::move(value), {});
    n_->needs_grad = needs_grad;
  }
  explicit Var(detail::NodePtr n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const Tensor& value() const { return n_->value; }
  const Tensor& grad() const { return n_->grad; }
  detail::NodePtr node() const { return n_; }

 private:
  detail::NodePtr n_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }

// Trainable value persisting across steps; gradient accumulates until sgd_step.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true)
      : name_(std::move(name)), var_(std::move(value), trainable), trainable_(trainable) {}
  // Shares the Var's node; gradients accumulate into the original.
  Parameter(std::string name, const Var& var)
      : name_(std::move(name)), var_(var), trainable_(var.node()->needs_grad) {}

  const std::string& name() const { return name_; }
  bool trainable() const { return trainable_; }
  const Tensor& value() const { return var_.value(); }
  Tensor& mutable_value() { return var_.node()->value; }
  const Tensor& grad() const { return var_.grad(); }
  Tensor& mutable_grad() { return var_.node()->grad; }
  const Var& var() const { return var_; }

  void zero_grad() { std::fill(mutable_grad().data.begin(), mutable_grad().data.end(), 0.0); }

 private:
  std::string name_;
  Var var_;
  bool trainable_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.value().data[i];
  auto n = detail::make_node(std::move(out), {a.node(), b.node()});
  n->backward = [](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      self.inputs[0]->grad.data[i] += self.grad.data[i];
      self.inputs[1]->grad.data[i] += self.grad.data[i];
    }
  };
  return Var(n);
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.value().data[i];
  auto n = detail::make_node(std::move(out), {a.node(), b.node()});
  n->backward = [](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      self.inputs[0]->grad.data[i] += self.grad.data[i];
      self.inputs[1]->grad.data[i] -= self.grad.data[i];
    }
  };
  return Var(n);
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.value().data[i];
  auto n = detail::make_node(std::move(out), {a.node(), b.node()});
  n->backward = [](detail::Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      self.inputs[0]->grad.data[i] += self.grad.data[i] * bv.data[i];
      self.inputs[1]->grad.data[i] += self.grad.data[i] * av.data[i];
    }
  };
  return Var(n);
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  auto n = detail::make_node(std::move(out), {a.node()});
  n->backward = [s](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      self.inputs[0]->grad.data[i] += self.grad.data[i] * s;
  };
  return Var(n);
}

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(av.shape) + " vs " +
                         shape_to_string(bv.shape));
  const std::size_t n = av.shape[0], k = av.shape[1], m = bv.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data[p * m];
      double* orow = &out.data[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  auto node = detail::make_node(std::move(out), {a.node(), b.node()});
  node->backward = [n, k, m](detail::Node& self) {
    const Tensor& avv = self.inputs[0]->value;
    const Tensor& bvv = self.inputs[1]->value;
    Tensor& ga = self.inputs[0]->grad;
    Tensor& gb = self.inputs[1]->grad;
    // dA = dY * B^T ; dB = A^T * dY
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double g = self.grad.data[i * m + j];
        if (g == 0.0) continue;
        for (std::size_t p = 0; p < k; ++p) {
          ga.data[i * k + p] += g * bvv.data[p * m + j];
          gb.data[p * m + j] += g * avv.data[i * k + p];
        }
      }
  };
  return Var(node);
}

// y = xW + b, row-wise
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.shape[1] != wv.shape[0])
    throw DimensionError("linear: shape mismatch " + shape_to_string(xv.shape) + " vs " +
                         shape_to_string(wv.shape));
  if (bv.rank() != 1 || bv.shape[0] != wv.shape[1])
    throw DimensionError("linear: bias shape mismatch " + shape_to_string(bv.shape) + " vs " +
                         shape_to_string(wv.shape));
  const std::size_t n = xv.shape[0], k = xv.shape[1], m = wv.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out.data[i * m];
    for (std::size_t j = 0; j < m; ++j) orow[j] = bv.data[j];
    for (std::size_t p = 0; p < k; ++p) {
      const double xip = xv.data[i * k + p];
      if (xip == 0.0) continue;
      const double* wrow = &wv.data[p * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += xip * wrow[j];
    }
  }
  auto node = detail::make_node(std::move(out), {x.node(), w.node(), b.node()});
  node->backward = [n, k, m](detail::Node& self) {
    const Tensor& xvv = self.inputs[0]->value;
    const Tensor& wvv = self.inputs[1]->value;
    Tensor& gx = self.inputs[0]->grad;
    Tensor& gw = self.inputs[1]->grad;
    Tensor& gb = self.inputs[2]->grad;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double g = self.grad.data[i * m + j];
        if (g == 0.0) continue;
        gb.data[j] += g;
        for (std::size_t p = 0; p < k; ++p) {
          gx.data[i * k + p] += g * wvv.data[p * m + j];
          gw.data[p * m + j] += g * xvv.data[i * k + p];
        }
      }
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions
// ---------------------------------------------------------------------------

inline Var softmax(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) throw DimensionError("softmax: axis out of range");
  const std::size_t len = xv.shape[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.shape[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.shape[i];

  Tensor out = Tensor::zeros(xv.shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -1e300;
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xv.data[base + l * inner]);
      double sum = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xv.data[base + l * inner] - mx);
        out.data[base + l * inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) out.data[base + l * inner] /= sum;
    }
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [len, inner, outer](detail::Node& self) {
    const Tensor& y = self.value;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t l = 0; l < len; ++l)
          dot += self.grad.data[base + l * inner] * y.data[base + l * inner];
        for (std::size_t l = 0; l < len; ++l) {
          const std::size_t idx = base + l * inner;
          self.inputs[0]->grad.data[idx] += (self.grad.data[idx] - dot) * y.data[idx];
        }
      }
  };
  return Var(node);
}

inline Var logistic(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  auto n = detail::make_node(std::move(out), {x.node()});
  n->backward = [](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double y = self.value.data[i];
      self.inputs[0]->grad.data[i] += self.grad.data[i] * y * (1.0 - y);
    }
  };
  return Var(n);
}

inline Var tanh_act(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data) v = std::tanh(v);
  auto n = detail::make_node(std::move(out), {x.node()});
  n->backward = [](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.numel(); ++i) {
      const double y = self.value.data[i];
      self.inputs[0]->grad.data[i] += self.grad.data[i] * (1.0 - y * y);
    }
  };
  return Var(n);
}

inline Var sum_all(const Var& x) {
  double s = std::accumulate(x.value().data.begin(), x.value().data.end(), 0.0);
  auto n = detail::make_node(Tensor::scalar(s), {x.node()});
  n->backward = [](detail::Node& self) {
    const double g = self.grad.data[0];
    for (double& v : self.inputs[0]->grad.data) v += g;
  };
  return Var(n);
}

inline Var mean_all(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x.value().numel());
  return scale(sum_all(x), inv);
}

// Sum along one axis, removing it.
inline Var sum_axis(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) throw DimensionError("sum_axis: axis out of range");
  const std::size_t len = xv.shape[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < xv.rank(); ++i) inner *= xv.shape[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.shape[i];
  std::vector<std::size_t> oshape;
  for (std::size_t i = 0; i < xv.rank(); ++i)
    if (i != axis) oshape.push_back(xv.shape[i]);
  if (oshape.empty()) oshape.push_back(1);
  Tensor out = Tensor::zeros(oshape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t in = 0; in < inner; ++in)
        out.data[o * inner + in] += xv.data[(o * len + l) * inner + in];
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [len, inner, outer](detail::Node& self) {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t in = 0; in < inner; ++in)
          self.inputs[0]->grad.data[(o * len + l) * inner + in] += self.grad.data[o * inner + in];
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Var reshape(const Var& x, std::vector<std::size_t> new_shape) {
  std::size_t n = 1;
  for (auto d : new_shape) n *= d;
  if (n != x.value().numel())
    throw DimensionError("reshape: element count mismatch " + shape_to_string(x.value().shape) +
                         " vs " + shape_to_string(new_shape));
  Tensor out(new_shape, x.value().data);
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      self.inputs[0]->grad.data[i] += self.grad.data[i];
  };
  return Var(node);
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Tensor& first = parts[0].value();
  if (axis >= first.rank()) throw DimensionError("concat: axis out of range");
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < first.rank(); ++i) inner *= first.shape[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= first.shape[i];
  std::size_t total_len = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const Tensor& t = p.value();
    if (t.rank() != first.rank()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < t.rank(); ++i)
      if (i != axis && t.shape[i] != first.shape[i])
        throw DimensionError("concat: shape mismatch " + shape_to_string(t.shape) + " vs " +
                             shape_to_string(first.shape));
    lens.push_back(t.shape[axis]);
    total_len += t.shape[axis];
  }
  std::vector<std::size_t> oshape = first.shape;
  oshape[axis] = total_len;
  Tensor out = Tensor::zeros(oshape);
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& t = parts[pi].value();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < lens[pi]; ++l)
        for (std::size_t in = 0; in < inner; ++in)
          out.data[(o * total_len + off + l) * inner + in] = t.data[(o * lens[pi] + l) * inner + in];
    off += lens[pi];
  }
  std::vector<detail::NodePtr> ins;
  for (const auto& p : parts) ins.push_back(p.node());
  auto node = detail::make_node(std::move(out), std::move(ins));
  node->backward = [lens, inner, outer, total_len](detail::Node& self) {
    std::size_t off2 = 0;
    for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
      Tensor& g = self.inputs[pi]->grad;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < lens[pi]; ++l)
          for (std::size_t in = 0; in < inner; ++in)
            g.data[(o * lens[pi] + l) * inner + in] +=
                self.grad.data[(o * total_len + off2 + l) * inner + in];
      off2 += lens[pi];
    }
  };
  return Var(node);
}

inline Var transpose2d(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("transpose2d: expects rank 2, got " + shape_to_string(xv.shape));
  const std::size_t n = xv.shape[0], m = xv.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[j * n + i] = xv.data[i * m + j];
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [n, m](detail::Node& self) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        self.inputs[0]->grad.data[i * m + j] += self.grad.data[j * n + i];
  };
  return Var(node);
}

// Columns [j0, j1) of a 2-D tensor.
inline Var slice_cols(const Var& x, std::size_t j0, std::size_t j1) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || j1 > xv.shape[1] || j0 >= j1)
    throw DimensionError("slice_cols: bad range on " + shape_to_string(xv.shape));
  const std::size_t n = xv.shape[0], m = xv.shape[1], w = j1 - j0;
  Tensor out = Tensor::zeros({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.data[i * w + j] = xv.data[i * m + j0 + j];
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [n, m, w, j0](detail::Node& self) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j)
        self.inputs[0]->grad.data[i * m + j0 + j] += self.grad.data[i * w + j];
  };
  return Var(node);
}

// x[i, j] * s[i]
inline Var rowwise_scale(const Var& x, const Var& s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (xv.rank() != 2 || sv.numel() != xv.shape[0])
    throw DimensionError("rowwise_scale: shape mismatch " + shape_to_string(xv.shape) + " vs " +
                         shape_to_string(sv.shape));
  const std::size_t n = xv.shape[0], m = xv.shape[1];
  Tensor out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] *= sv.data[i];
  auto node = detail::make_node(std::move(out), {x.node(), s.node()});
  node->backward = [n, m](detail::Node& self) {
    const Tensor& xvv = self.inputs[0]->value;
    const Tensor& svv = self.inputs[1]->value;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double g = self.grad.data[i * m + j];
        self.inputs[0]->grad.data[i * m + j] += g * svv.data[i];
        acc += g * xvv.data[i * m + j];
      }
      self.inputs[1]->grad.data[i] += acc;
    }
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// Spatial ops on [c, h, w] tensors
// ---------------------------------------------------------------------------

inline Var maxpool2d(const Var& x, std::size_t window, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("maxpool2d: expects (c, h, w), got " + shape_to_string(xv.shape));
  const std::size_t c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
  if (window > h || window > w)
    throw DimensionError("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                         shape_to_string(xv.shape));
  const std::size_t oh = (h - window) / stride + 1;
  const std::size_t ow = (w - window) / stride + 1;
  Tensor out = Tensor::zeros({c, oh, ow});
  std::vector<std::size_t> argmax(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -1e300;
        std::size_t bestIdx = 0;
        for (std::size_t di = 0; di < window; ++di)
          for (std::size_t dj = 0; dj < window; ++dj) {
            const std::size_t idx = (ch * h + i * stride + di) * w + j * stride + dj;
            if (xv.data[idx] > best) {
              best = xv.data[idx];
              bestIdx = idx;
            }
          }
        const std::size_t oidx = (ch * oh + i) * ow + j;
        out.data[oidx] = best;
        argmax[oidx] = bestIdx;
      }
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [argmax](detail::Node& self) {
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      self.inputs[0]->grad.data[argmax[i]] += self.grad.data[i];
  };
  return Var(node);
}

// Zero-padded strided convolution; weights (c_out, c_in, k, k), bias (c_out).
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride,
                  std::size_t pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.shape[1] != xv.shape[0])
    throw DimensionError("conv2d: shape mismatch " + shape_to_string(xv.shape) + " vs " +
                         shape_to_string(wv.shape));
  const std::size_t cin = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
  const std::size_t cout = wv.shape[0], k = wv.shape[2];
  if (bv.numel() != cout) throw DimensionError("conv2d: bias shape mismatch");
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (w + 2 * pad - k) / stride + 1;
  Tensor out = Tensor::zeros({cout, oh, ow});
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = bv.data[co];
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t di = 0; di < k; ++di) {
            const long iy = static_cast<long>(i * stride + di) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t dj = 0; dj < k; ++dj) {
              const long ix = static_cast<long>(j * stride + dj) - static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += xv.data[(ci * h + iy) * w + ix] * wv.data[((co * cin + ci) * k + di) * k + dj];
            }
          }
        out.data[(co * oh + i) * ow + j] = acc;
      }
  auto node = detail::make_node(std::move(out), {x.node(), weight.node(), bias.node()});
  node->backward = [cin, h, w, cout, k, stride, pad, oh, ow](detail::Node& self) {
    const Tensor& xvv = self.inputs[0]->value;
    const Tensor& wvv = self.inputs[1]->value;
    Tensor& gx = self.inputs[0]->grad;
    Tensor& gw = self.inputs[1]->grad;
    Tensor& gb = self.inputs[2]->grad;
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const double g = self.grad.data[(co * oh + i) * ow + j];
          if (g == 0.0) continue;
          gb.data[co] += g;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t di = 0; di < k; ++di) {
              const long iy = static_cast<long>(i * stride + di) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t dj = 0; dj < k; ++dj) {
                const long ix = static_cast<long>(j * stride + dj) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                gx.data[(ci * h + iy) * w + ix] += g * wvv.data[((co * cin + ci) * k + di) * k + dj];
                gw.data[((co * cin + ci) * k + di) * k + dj] += g * xvv.data[(ci * h + iy) * w + ix];
              }
            }
        }
  };
  return Var(node);
}

inline std::vector<double> gaussian_kernel(double sigma, std::size_t kernel) {
  const long r = static_cast<long>(kernel) / 2;
  std::vector<double> k(kernel * kernel);
  double sum = 0.0;
  for (long i = -r; i <= r; ++i)
    for (long j = -r; j <= r; ++j) {
      const double v = std::exp(-(static_cast<double>(i * i + j * j)) / (2.0 * sigma * sigma));
      k[(i + r) * kernel + (j + r)] = v;
      sum += v;
    }
  for (double& v : k) v /= sum;  // entries sum to 1
  return k;
}

// Per-channel smoothing with a normalized Gaussian kernel; zero padding.
// sigma == 0 passes the input through unchanged.
inline Var gaussian_filter2d(const Var& x, double sigma, std::size_t kernel) {
  if (kernel % 2 == 0) throw ConfigError("gaussian_filter2d: kernel must be odd, got " + std::to_string(kernel));
  if (sigma < 0.0) throw ConfigError("gaussian_filter2d: sigma must be >= 0");
  if (sigma == 0.0) return x;
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("gaussian_filter2d: expects (c, h, w)");
  const std::size_t c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
  const long r = static_cast<long>(kernel) / 2;
  const std::vector<double> ker = gaussian_kernel(sigma, kernel);
  Tensor out = Tensor::zeros(xv.shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (long di = -r; di <= r; ++di) {
          const long iy = static_cast<long>(i) + di;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (long dj = -r; dj <= r; ++dj) {
            const long ix = static_cast<long>(j) + dj;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            acc += xv.data[(ch * h + iy) * w + ix] * ker[(di + r) * kernel + (dj + r)];
          }
        }
        out.data[(ch * h + i) * w + j] = acc;
      }
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [c, h, w, r, ker, kernel](detail::Node& self) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const double g = self.grad.data[(ch * h + i) * w + j];
          if (g == 0.0) continue;
          for (long di = -r; di <= r; ++di) {
            const long iy = static_cast<long>(i) + di;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (long dj = -r; dj <= r; ++dj) {
              const long ix = static_cast<long>(j) + dj;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              self.inputs[0]->grad.data[(ch * h + iy) * w + ix] +=
                  g * ker[(di + r) * kernel + (dj + r)];
            }
          }
        }
  };
  return Var(node);
}

// Bilinear interpolation of feature (c, h, w) at n continuous (x, y) pixel
// locations. Out-of-bounds corners read as zero; differentiable w.r.t. both
// the feature values and the point coordinates.
inline Var bilinear_sample(const Var& feature, const Var& points) {
  const Tensor& fv = feature.value();
  const Tensor& pv = points.value();
  if (fv.rank() != 3) throw DimensionError("bilinear_sample: feature expects (c, h, w)");
  if (pv.rank() != 2 || pv.shape[1] != 2)
    throw DimensionError("bilinear_sample: points expects (n, 2), got " + shape_to_string(pv.shape));
  const std::size_t c = fv.shape[0], h = fv.shape[1], w = fv.shape[2], n = pv.shape[0];
  Tensor out = Tensor::zeros({n, c});
  auto fetch = [&](std::size_t ch, long y, long x) -> double {
    if (y < 0 || y >= static_cast<long>(h) || x < 0 || x >= static_cast<long>(w)) return 0.0;
    return fv.data[(ch * h + y) * w + x];
  };
  for (std::size_t i = 0; i < n; ++i) {
    const double px = pv.data[i * 2 + 0];
    const double py = pv.data[i * 2 + 1];
    const long x0 = static_cast<long>(std::floor(px));
    const long y0 = static_cast<long>(std::floor(py));
    const double fx = px - static_cast<double>(x0);
    const double fy = py - static_cast<double>(y0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v00 = fetch(ch, y0, x0), v01 = fetch(ch, y0, x0 + 1);
      const double v10 = fetch(ch, y0 + 1, x0), v11 = fetch(ch, y0 + 1, x0 + 1);
      out.data[i * c + ch] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
    }
  }
  auto node = detail::make_node(std::move(out), {feature.node(), points.node()});
  node->backward = [c, h, w, n](detail::Node& self) {
    const Tensor& fvv = self.inputs[0]->value;
    const Tensor& pvv = self.inputs[1]->value;
    Tensor& gf = self.inputs[0]->grad;
    Tensor& gp = self.inputs[1]->grad;
    auto fetch = [&](std::size_t ch, long y, long x) -> double {
      if (y < 0 || y >= static_cast<long>(h) || x < 0 || x >= static_cast<long>(w)) return 0.0;
      return fvv.data[(ch * h + y) * w + x];
    };
    auto bump = [&](std::size_t ch, long y, long x, double g) {
      if (y < 0 || y >= static_cast<long>(h) || x < 0 || x >= static_cast<long>(w)) return;
      gf.data[(ch * h + y) * w + x] += g;
    };
    for (std::size_t i = 0; i < n; ++i) {
      const double px = pvv.data[i * 2 + 0];
      const double py = pvv.data[i * 2 + 1];
      const long x0 = static_cast<long>(std::floor(px));
      const long y0 = static_cast<long>(std::floor(py));
      const double fx = px - static_cast<double>(x0);
      const double fy = py - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double g = self.grad.data[i * c + ch];
        if (g == 0.0) continue;
        const double v00 = fetch(ch, y0, x0), v01 = fetch(ch, y0, x0 + 1);
        const double v10 = fetch(ch, y0 + 1, x0), v11 = fetch(ch, y0 + 1, x0 + 1);
        bump(ch, y0, x0, g * (1 - fy) * (1 - fx));
        bump(ch, y0, x0 + 1, g * (1 - fy) * fx);
        bump(ch, y0 + 1, x0, g * fy * (1 - fx));
        bump(ch, y0 + 1, x0 + 1, g * fy * fx);
        //  d/dfx = (1-fy)(v01-v00) + fy(v11-v10),  d/dfy = (1-fx)(v10-v00) + fx(v11-v01)
        gp.data[i * 2 + 0] += g * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
        gp.data[i * 2 + 1] += g * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
      }
    }
  };
  return Var(node);
}

// Rows of x selected by index; backward scatters.
inline Var gather_rows(const Var& x, std::vector<std::size_t> rows) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("gather_rows: expects rank 2");
  const std::size_t m = xv.shape[1];
  for (auto r : rows)
    if (r >= xv.shape[0]) throw DimensionError("gather_rows: row index out of range");
  Tensor out = Tensor::zeros({rows.size(), m});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = xv.data[rows[i] * m + j];
  auto node = detail::make_node(std::move(out), {x.node()});
  node->backward = [rows, m](detail::Node& self) {
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < m; ++j)
        self.inputs[0]->grad.data[rows[i] * m + j] += self.grad.data[i * m + j];
  };
  return Var(node);
}

// Weighted mean of per-element binary cross-entropy, computed stably from
// logits: loss_i = max(z,0) - z*y + log(1 + exp(-|z|)).
inline Var bce_with_logits(const Var& logits, const Tensor& targets, const Tensor& weights) {
  const Tensor& z = logits.value();
  if (z.numel() != targets.numel() || z.numel() != weights.numel())
    throw DimensionError("bce_with_logits: size mismatch");
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) wsum += weights.data[i];
  if (wsum <= 0) throw ContractError("bce_with_logits: weights must sum to > 0");
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double zi = z.data[i];
    const double li = std::max(zi, 0.0) - zi * targets.data[i] + std::log1p(std::exp(-std::abs(zi)));
    acc += weights.data[i] * li;
  }
  auto node = detail::make_node(Tensor::scalar(acc / wsum), {logits.node()});
  node->backward = [targets, weights, wsum](detail::Node& self) {
    const double g = self.grad.data[0];
    const Tensor& z = self.inputs[0]->value;
    for (std::size_t i = 0; i < z.numel(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-z.data[i]));
      self.inputs[0]->grad.data[i] += g * weights.data[i] * (sig - targets.data[i]) / wsum;
    }
  };
  return Var(node);
}

// Mean smooth-L1 (Huber, delta = 1) over all elements.
inline Var smooth_l1(const Var& pred, const Tensor& target) {
  const Tensor& p = pred.value();
  require_same_shape(p, target, "smooth_l1");
  const double n = static_cast<double>(p.numel());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const double d = p.data[i] - target.data[i];
    acc += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  auto node = detail::make_node(Tensor::scalar(acc / n), {pred.node()});
  node->backward = [target, n](detail::Node& self) {
    const double g = self.grad.data[0];
    const Tensor& p = self.inputs[0]->value;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double d = p.data[i] - target.data[i];
      self.inputs[0]->grad.data[i] += g * std::clamp(d, -1.0, 1.0) / n;
    }
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// Backward pass and optimizer
// ---------------------------------------------------------------------------

inline void backward(const Var& loss) {
  if (loss.value().numel() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_to_string(loss.value().shape));
  // Postorder DFS, then run node backward in reverse order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next].get();
      ++next;
      if (child->needs_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->grad.data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward && (*it)->needs_grad) (*it)->backward(**it);
}

inline void sgd_step(const std::vector<Parameter*>& params, double lr) {
  for (Parameter* p : params) {
    if (!p->trainable()) continue;
    for (double g : p->grad().data)
      if (!std::isfinite(g))
        throw TrainingError("sgd_step: non-finite gradient in parameter '" + p->name() + "'");
    Tensor& v = p->mutable_value();
    const Tensor& g = p->grad();
    for (std::size_t i = 0; i < v.numel(); ++i) v.data[i] -= lr * g.data[i];
    p->zero_grad();
  }
}

// Uniform init in [-1/sqrt(d_in), +1/sqrt(d_in)].
inline Tensor uniform_init(std::vector<std::size_t> shape, std::size_t d_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace lcv2i

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hybridst/error.hpp"
#include "hybridst/tensor.hpp"

namespace hybridst::diff {

/// Handle into a Tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenRowMat>;
using ConstMatMap = Eigen::Map<const EigenRowMat>;

inline MatMap as_matrix(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
inline ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

/// Reverse-mode tape over dense f64 tensors. Nodes are appended in
/// topological order during the forward pass; backward() walks the tape
/// in reverse. Every primitive validates shapes and checks its output for
/// non-finite entries, throwing a computation error that names the label
/// of the offending node.
class Tape {
 public:
  Var leaf(Tensor value, bool needs_grad = false, const char* label = "leaf") {
    check_finite(value, label);
    return push(Op::kLeaf, std::move(value), needs_grad, label);
  }

  /// C = A . B for rank-2 tensors.
  Var matmul(Var a, Var b, const char* label = "matmul") {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
      shape_error(label, ta, tb);
    Tensor out({ta.rows(), tb.cols()});
    as_matrix(out).noalias() = as_matrix(ta) * as_matrix(tb);
    return push2(Op::kMatmul, a, b, std::move(out), label);
  }

  Var add(Var a, Var b, const char* label = "add") {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) shape_error(label, ta, tb);
    Tensor out = ta;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
    return push2(Op::kAdd, a, b, std::move(out), label);
  }

  /// a: [m x n], bias: [n] or [1 x n]; adds bias to every row.
  Var add_row_broadcast(Var a, Var bias, const char* label = "bias") {
    const Tensor& ta = value(a);
    const Tensor& tb = value(bias);
    if (ta.rank() != 2 || tb.size() != ta.cols()) shape_error(label, ta, tb);
    Tensor out = ta;
    const std::size_t rows = ta.rows(), cols = ta.cols();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += tb[c];
    return push2(Op::kAddRowBroadcast, a, bias, std::move(out), label);
  }

  Var scale(Var a, double s, const char* label = "scale") {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    Var v = push1(Op::kScale, a, std::move(out), label);
    node(v).a0 = s;
    return v;
  }

  Var relu(Var a, const char* label = "relu") {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out[i] < 0.0) out[i] = 0.0;
    return push1(Op::kRelu, a, std::move(out), label);
  }

  Var sigmoid(Var a, const char* label = "sigmoid") {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double x = out[i];
      if (x >= 0.0) {
        out[i] = 1.0 / (1.0 + std::exp(-x));
      } else {
        const double e = std::exp(x);
        out[i] = e / (1.0 + e);
      }
    }
    return push1(Op::kSigmoid, a, std::move(out), label);
  }

  /// Row-wise softmax, stabilized by subtracting each row's max.
  Var softmax_rows(Var a, const char* label = "softmax") {
    const Tensor& ta = value(a);
    if (ta.rank() != 2) shape_error(label, ta);
    Tensor out = ta;
    const std::size_t rows = ta.rows(), cols = ta.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = out.data() + r * cols;
      double mx = row[0];
      for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
      double sum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        row[c] = std::exp(row[c] - mx);
        sum += row[c];
      }
      for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
    }
    return push1(Op::kSoftmaxRows, a, std::move(out), label);
  }

  /// Row-wise normalization to zero mean / unit variance (eps = 1e-5),
  /// without learned gain or shift.
  Var layer_norm_rows(Var a, const char* label = "layer_norm") {
    const Tensor& ta = value(a);
    if (ta.rank() != 2) shape_error(label, ta);
    const std::size_t rows = ta.rows(), cols = ta.cols();
    Tensor out = ta;
    Tensor inv_std({rows});
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = out.data() + r * cols;
      double mean = 0.0;
      for (std::size_t c = 0; c < cols; ++c) mean += row[c];
      mean /= static_cast<double>(cols);
      double var = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double d = row[c] - mean;
        var += d * d;
      }
      var /= static_cast<double>(cols);
      const double inv = 1.0 / std::sqrt(var + 1e-5);
      inv_std[r] = inv;
      for (std::size_t c = 0; c < cols; ++c) row[c] = (row[c] - mean) * inv;
    }
    Var v = push1(Op::kLayerNormRows, a, std::move(out), label);
    node(v).saved = std::move(inv_std);
    return v;
  }

  Var concat_last_dim(Var a, Var b, const char* label = "concat") {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.rows() != tb.rows())
      shape_error(label, ta, tb);
    const std::size_t rows = ta.rows(), ca = ta.cols(), cb = tb.cols();
    Tensor out({rows, ca + cb});
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < ca; ++c) out[r * (ca + cb) + c] = ta[r * ca + c];
      for (std::size_t c = 0; c < cb; ++c)
        out[r * (ca + cb) + ca + c] = tb[r * cb + c];
    }
    return push2(Op::kConcatLastDim, a, b, std::move(out), label);
  }

  /// Stacks blocks vertically: out rows [i*T, (i+1)*T) = blocks[i].
  Var concat_rows(const std::vector<Var>& blocks, const char* label = "concat_rows") {
    if (blocks.empty()) fail(ErrorKind::dimension, std::string(label) + ": no blocks");
    const std::size_t cols = value(blocks[0]).cols();
    std::size_t rows = 0;
    for (Var b : blocks) {
      const Tensor& t = value(b);
      if (t.rank() != 2 || t.cols() != cols) shape_error(label, t);
      rows += t.rows();
    }
    Tensor out({rows, cols});
    std::size_t r0 = 0;
    for (Var b : blocks) {
      const Tensor& t = value(b);
      std::copy(t.data(), t.data() + t.size(), out.data() + r0 * cols);
      r0 += t.rows();
    }
    Var v = pushn(Op::kConcatRows, blocks, std::move(out), label);
    return v;
  }

  Var transpose(Var a, const char* label = "transpose") {
    const Tensor& ta = value(a);
    if (ta.rank() != 2) shape_error(label, ta);
    Tensor out({ta.cols(), ta.rows()});
    as_matrix(out) = as_matrix(ta).transpose();
    return push1(Op::kTranspose, a, std::move(out), label);
  }

  Var slice_rows(Var a, std::size_t r0, std::size_t r1,
                 const char* label = "slice_rows") {
    const Tensor& ta = value(a);
    if (ta.rank() != 2 || r0 >= r1 || r1 > ta.rows()) shape_error(label, ta);
    const std::size_t cols = ta.cols();
    Tensor out({r1 - r0, cols});
    std::copy(ta.data() + r0 * cols, ta.data() + r1 * cols, out.data());
    Var v = push1(Op::kSliceRows, a, std::move(out), label);
    node(v).s0 = r0;
    return v;
  }

  /// steps[t] are [N x d]; result is node-major [(N*T) x d] with
  /// row n*T + t = steps[t].row(n).
  Var stack_node_major(const std::vector<Var>& steps,
                       const char* label = "stack_node_major") {
    if (steps.empty()) fail(ErrorKind::dimension, std::string(label) + ": no steps");
    const Tensor& first = value(steps[0]);
    const std::size_t n = first.rows(), d = first.cols(), t_len = steps.size();
    for (Var s : steps) {
      const Tensor& t = value(s);
      if (t.rank() != 2 || t.rows() != n || t.cols() != d) shape_error(label, t);
    }
    Tensor out({n * t_len, d});
    for (std::size_t t = 0; t < t_len; ++t) {
      const Tensor& src = value(steps[t]);
      for (std::size_t row = 0; row < n; ++row)
        std::copy(src.data() + row * d, src.data() + (row + 1) * d,
                  out.data() + (row * t_len + t) * d);
    }
    Var v = pushn(Op::kStackNodeMajor, steps, std::move(out), label);
    node(v).s0 = n;
    node(v).s1 = t_len;
    return v;
  }

  /// out row i = a row (offset + i*stride), i in [0, count).
  Var take_rows_strided(Var a, std::size_t offset, std::size_t stride,
                        std::size_t count, const char* label = "take_rows") {
    const Tensor& ta = value(a);
    if (ta.rank() != 2 || count == 0 ||
        offset + (count - 1) * stride >= ta.rows())
      shape_error(label, ta);
    const std::size_t cols = ta.cols();
    Tensor out({count, cols});
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t src = offset + i * stride;
      std::copy(ta.data() + src * cols, ta.data() + (src + 1) * cols,
                out.data() + i * cols);
    }
    Var v = push1(Op::kTakeRowsStrided, a, std::move(out), label);
    node(v).s0 = offset;
    node(v).s1 = stride;
    node(v).s2 = count;
    return v;
  }

  /// a is node-major [(N*T) x d]; out row n = mean over t of a row n*T+t.
  Var node_time_mean(Var a, std::size_t n, std::size_t t_len,
                     const char* label = "time_mean") {
    const Tensor& ta = value(a);
    if (ta.rank() != 2 || ta.rows() != n * t_len) shape_error(label, ta);
    const std::size_t cols = ta.cols();
    Tensor out({n, cols});
    for (std::size_t row = 0; row < n; ++row) {
      double* dst = out.data() + row * cols;
      for (std::size_t t = 0; t < t_len; ++t) {
        const double* src = ta.data() + (row * t_len + t) * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
      }
      for (std::size_t c = 0; c < cols; ++c) dst[c] /= static_cast<double>(t_len);
    }
    Var v = push1(Op::kNodeTimeMean, a, std::move(out), label);
    node(v).s0 = n;
    node(v).s1 = t_len;
    return v;
  }

  /// gate: [N x 1]; out = gate.a + (1-gate).b with the scalar gate applied
  /// across each row.
  Var rowwise_blend(Var gate, Var a, Var b, const char* label = "blend") {
    const Tensor& tg = value(gate);
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (tg.rank() != 2 || tg.cols() != 1 || !ta.same_shape(tb) ||
        ta.rank() != 2 || ta.rows() != tg.rows())
      shape_error(label, ta, tb);
    const std::size_t rows = ta.rows(), cols = ta.cols();
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
      const double g = tg[r];
      for (std::size_t c = 0; c < cols; ++c)
        out[r * cols + c] = g * ta[r * cols + c] + (1.0 - g) * tb[r * cols + c];
    }
    Var v = pushn(Op::kRowwiseBlend, {gate, a, b}, std::move(out), label);
    return v;
  }

  Var sum_all(Var a, const char* label = "sum") {
    const Tensor& ta = value(a);
    Tensor out({1});
    out[0] = pairwise_sum(ta.data(), ta.size());
    return push1(Op::kSumAll, a, std::move(out), label);
  }

  /// Sum of squared errors over cells where mask is nonzero. target and
  /// mask are plain tensors (no gradient flows into them).
  Var masked_sse(Var pred, Tensor target, Tensor mask,
                 const char* label = "masked_sse") {
    const Tensor& tp = value(pred);
    if (!tp.same_shape(target) || !tp.same_shape(mask))
      shape_error(label, tp, target);
    const std::size_t sz = tp.size();
    double sse = 0.0;
    for (std::size_t i = 0; i < sz; ++i) {
      if (mask[i] != 0.0) {
        const double e = tp[i] - target[i];
        sse += e * e;
      }
    }
    // pack target and mask into one saved tensor: [2 x size]
    Tensor saved({2, sz});
    std::copy(target.data(), target.data() + sz, saved.data());
    std::copy(mask.data(), mask.data() + sz, saved.data() + sz);
    Var v = push1(Op::kMaskedSse, pred, Tensor({1}, {sse}), label);
    node(v).saved = std::move(saved);
    return v;
  }

  /// Fused multi-head scaled dot-product self-attention on one sequence:
  /// q,k,v are [T x d], d divisible by heads. Per head h with dk = d/heads:
  ///   P_h = softmax(Q_h K_h^T / sqrt(dk)),  out_h = P_h V_h
  /// and the head outputs are re-concatenated along the feature axis.
  Var multihead_attention(Var q, Var k, Var v, std::size_t heads,
                          const char* label = "mha") {
    const Tensor& tq = value(q);
    const Tensor& tk = value(k);
    const Tensor& tv = value(v);
    if (tq.rank() != 2 || !tq.same_shape(tk) || !tq.same_shape(tv) ||
        heads == 0 || tq.cols() % heads != 0)
      shape_error(label, tq, tk);
    const std::size_t t_len = tq.rows(), d = tq.cols(), dk = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor out({t_len, d});
    Tensor probs({heads * t_len, t_len});
    auto mq = as_matrix(tq);
    auto mk = as_matrix(tk);
    auto mv = as_matrix(tv);
    auto mo = as_matrix(out);
    auto mp = as_matrix(probs);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto qh = mq.middleCols(static_cast<Eigen::Index>(h * dk),
                                    static_cast<Eigen::Index>(dk));
      const auto kh = mk.middleCols(static_cast<Eigen::Index>(h * dk),
                                    static_cast<Eigen::Index>(dk));
      const auto vh = mv.middleCols(static_cast<Eigen::Index>(h * dk),
                                    static_cast<Eigen::Index>(dk));
      auto ph = mp.middleRows(static_cast<Eigen::Index>(h * t_len),
                              static_cast<Eigen::Index>(t_len));
      ph.noalias() = qh * kh.transpose() * inv_scale;
      for (std::size_t r = 0; r < t_len; ++r) {
        double* row = probs.data() + (h * t_len + r) * t_len;
        double mx = row[0];
        for (std::size_t c = 1; c < t_len; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < t_len; ++c) {
          row[c] = std::exp(row[c] - mx);
          sum += row[c];
        }
        for (std::size_t c = 0; c < t_len; ++c) row[c] /= sum;
      }
      mo.middleCols(static_cast<Eigen::Index>(h * dk),
                    static_cast<Eigen::Index>(dk))
          .noalias() = ph * vh;
    }
    Var out_var = pushn(Op::kMultiHeadAttention, {q, k, v}, std::move(out), label);
    Node& nd = node(out_var);
    nd.saved = std::move(probs);
    nd.s0 = heads;
    return out_var;
  }

  /// Reverse pass from a scalar output. Gradients accumulate into every
  /// node reachable from a needs_grad leaf; read them back via grad().
  void backward(Var output) {
    Node& out = node(output);
    if (out.value.size() != 1)
      fail(ErrorKind::dimension, "backward requires a scalar output");
    ensure_grad(output.id);
    out.grad[0] = 1.0;
    for (std::size_t i = output.id + 1; i-- > 0;) {
      Node& nd = nodes_[i];
      if (!nd.needs_grad || nd.grad.size() == 0) continue;
      backward_node(static_cast<std::uint32_t>(i));
    }
  }

  const Tensor& value(Var v) const { return nodes_[v.id].value; }

  const Tensor& grad(Var v) const {
    const Node& nd = nodes_[v.id];
    if (nd.grad.size() == 0) {
      static const Tensor empty;
      return empty;
    }
    return nd.grad;
  }

  /// Gradient of a node, zero-filled when it never received contributions
  /// (e.g. a disconnected parameter).
  Tensor grad_or_zero(Var v) const {
    const Node& nd = nodes_[v.id];
    if (nd.grad.size() == 0) return Tensor(nd.value.shape());
    return nd.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void reset() { nodes_.clear(); }

 private:
  enum class Op : std::uint8_t {
    kLeaf,
    kMatmul,
    kAdd,
    kAddRowBroadcast,
    kScale,
    kRelu,
    kSigmoid,
    kSoftmaxRows,
    kLayerNormRows,
    kConcatLastDim,
    kConcatRows,
    kTranspose,
    kSliceRows,
    kStackNodeMajor,
    kTakeRowsStrided,
    kNodeTimeMean,
    kRowwiseBlend,
    kSumAll,
    kMaskedSse,
    kMultiHeadAttention,
  };

  struct Node {
    Op op = Op::kLeaf;
    bool needs_grad = false;
    std::uint32_t in0 = UINT32_MAX;
    std::uint32_t in1 = UINT32_MAX;
    std::vector<std::uint32_t> extra;
    double a0 = 0.0;
    std::size_t s0 = 0, s1 = 0, s2 = 0;
    Tensor value;
    Tensor grad;
    Tensor saved;
    const char* label = "";
  };

  Node& node(Var v) { return nodes_[v.id]; }

  Var push(Op op, Tensor value, bool needs_grad, const char* label) {
    Node nd;
    nd.op = op;
    nd.needs_grad = needs_grad;
    nd.value = std::move(value);
    nd.label = label;
    nodes_.push_back(std::move(nd));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push1(Op op, Var a, Tensor value, const char* label) {
    check_finite(value, label);
    Var v = push(op, std::move(value), nodes_[a.id].needs_grad, label);
    node(v).in0 = a.id;
    return v;
  }

  Var push2(Op op, Var a, Var b, Tensor value, const char* label) {
    check_finite(value, label);
    Var v = push(op, std::move(value),
                 nodes_[a.id].needs_grad || nodes_[b.id].needs_grad, label);
    node(v).in0 = a.id;
    node(v).in1 = b.id;
    return v;
  }

  Var pushn(Op op, const std::vector<Var>& inputs, Tensor value,
            const char* label) {
    check_finite(value, label);
    bool needs = false;
    for (Var in : inputs) needs = needs || nodes_[in.id].needs_grad;
    Var v = push(op, std::move(value), needs, label);
    Node& nd = node(v);
    nd.extra.reserve(inputs.size());
    for (Var in : inputs) nd.extra.push_back(in.id);
    return v;
  }

  void ensure_grad(std::uint32_t id) {
    Node& nd = nodes_[id];
    if (nd.grad.size() == 0) nd.grad = Tensor(nd.value.shape());
  }

  /// Allocates the input's grad (if it participates) and returns it.
  Tensor* input_grad(std::uint32_t id) {
    Node& nd = nodes_[id];
    if (!nd.needs_grad) return nullptr;
    ensure_grad(id);
    return &nd.grad;
  }

  void backward_node(std::uint32_t id) {
    Node& nd = nodes_[id];
    const Tensor& g = nd.grad;
    switch (nd.op) {
      case Op::kLeaf:
        break;
      case Op::kMatmul: {
        const Tensor& a = nodes_[nd.in0].value;
        const Tensor& b = nodes_[nd.in1].value;
        if (Tensor* da = input_grad(nd.in0))
          as_matrix(*da).noalias() += as_matrix(g) * as_matrix(b).transpose();
        if (Tensor* db = input_grad(nd.in1))
          as_matrix(*db).noalias() += as_matrix(a).transpose() * as_matrix(g);
        break;
      }
      case Op::kAdd: {
        if (Tensor* da = input_grad(nd.in0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (Tensor* db = input_grad(nd.in1))
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i];
        break;
      }
      case Op::kAddRowBroadcast: {
        if (Tensor* da = input_grad(nd.in0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
        if (Tensor* db = input_grad(nd.in1)) {
          const std::size_t rows = nd.value.rows(), cols = nd.value.cols();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*db)[c] += g[r * cols + c];
        }
        break;
      }
      case Op::kScale: {
        if (Tensor* da = input_grad(nd.in0))
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += nd.a0 * g[i];
        break;
      }
      case Op::kRelu: {
        if (Tensor* da = input_grad(nd.in0)) {
          const Tensor& x = nodes_[nd.in0].value;
          for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0) (*da)[i] += g[i];
        }
        break;
      }
      case Op::kSigmoid: {
        if (Tensor* da = input_grad(nd.in0)) {
          const Tensor& y = nd.value;
          for (std::size_t i = 0; i < g.size(); ++i)
            (*da)[i] += g[i] * y[i] * (1.0 - y[i]);
        }
        break;
      }
      case Op::kSoftmaxRows: {
        if (Tensor* da = input_grad(nd.in0)) {
          const Tensor& y = nd.value;
          const std::size_t rows = y.rows(), cols = y.cols();
          for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
              dot += g[r * cols + c] * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
              (*da)[r * cols + c] +=
                  y[r * cols + c] * (g[r * cols + c] - dot);
          }
        }
        break;
      }
      case Op::kLayerNormRows: {
        if (Tensor* da = input_grad(nd.in0)) {
          const Tensor& y = nd.value;
          const Tensor& inv_std = nd.saved;
          const std::size_t rows = y.rows(), cols = y.cols();
          const double n = static_cast<double>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gy = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              mean_g += g[r * cols + c];
              mean_gy += g[r * cols + c] * y[r * cols + c];
            }
            mean_g /= n;
            mean_gy /= n;
            const double inv = inv_std[r];
            for (std::size_t c = 0; c < cols; ++c)
              (*da)[r * cols + c] +=
                  inv * (g[r * cols + c] - mean_g - y[r * cols + c] * mean_gy);
          }
        }
        break;
      }
      case Op::kConcatLastDim: {
        const std::size_t rows = nd.value.rows();
        const std::size_t ca = nodes_[nd.in0].value.cols();
        const std::size_t cb = nodes_[nd.in1].value.cols();
        if (Tensor* da = input_grad(nd.in0))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < ca; ++c)
              (*da)[r * ca + c] += g[r * (ca + cb) + c];
        if (Tensor* db = input_grad(nd.in1))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cb; ++c)
              (*db)[r * cb + c] += g[r * (ca + cb) + ca + c];
        break;
      }
      case Op::kConcatRows: {
        const std::size_t cols = nd.value.cols();
        std::size_t r0 = 0;
        for (std::uint32_t in : nd.extra) {
          const std::size_t r = nodes_[in].value.rows();
          if (Tensor* din = input_grad(in))
            for (std::size_t i = 0; i < r * cols; ++i)
              (*din)[i] += g[r0 * cols + i];
          r0 += r;
        }
        break;
      }
      case Op::kTranspose: {
        if (Tensor* da = input_grad(nd.in0))
          as_matrix(*da).noalias() += as_matrix(g).transpose();
        break;
      }
      case Op::kSliceRows: {
        if (Tensor* da = input_grad(nd.in0)) {
          const std::size_t cols = nd.value.cols();
          const std::size_t offset = nd.s0 * cols;
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[offset + i] += g[i];
        }
        break;
      }
      case Op::kStackNodeMajor: {
        const std::size_t n = nd.s0, t_len = nd.s1, d = nd.value.cols();
        for (std::size_t t = 0; t < t_len; ++t) {
          if (Tensor* dstep = input_grad(nd.extra[t])) {
            for (std::size_t row = 0; row < n; ++row) {
              const double* src = g.data() + (row * t_len + t) * d;
              double* dst = dstep->data() + row * d;
              for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
            }
          }
        }
        break;
      }
      case Op::kTakeRowsStrided: {
        if (Tensor* da = input_grad(nd.in0)) {
          const std::size_t cols = nd.value.cols();
          for (std::size_t i = 0; i < nd.s2; ++i) {
            const std::size_t src_row = nd.s0 + i * nd.s1;
            for (std::size_t c = 0; c < cols; ++c)
              (*da)[src_row * cols + c] += g[i * cols + c];
          }
        }
        break;
      }
      case Op::kNodeTimeMean: {
        if (Tensor* da = input_grad(nd.in0)) {
          const std::size_t n = nd.s0, t_len = nd.s1, cols = nd.value.cols();
          const double inv = 1.0 / static_cast<double>(t_len);
          for (std::size_t row = 0; row < n; ++row)
            for (std::size_t t = 0; t < t_len; ++t)
              for (std::size_t c = 0; c < cols; ++c)
                (*da)[(row * t_len + t) * cols + c] += g[row * cols + c] * inv;
        }
        break;
      }
      case Op::kRowwiseBlend: {
        const Tensor& tg = nodes_[nd.extra[0]].value;
        const Tensor& ta = nodes_[nd.extra[1]].value;
        const Tensor& tb = nodes_[nd.extra[2]].value;
        const std::size_t rows = ta.rows(), cols = ta.cols();
        if (Tensor* dgate = input_grad(nd.extra[0]))
          for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
              acc += g[r * cols + c] * (ta[r * cols + c] - tb[r * cols + c]);
            (*dgate)[r] += acc;
          }
        if (Tensor* da = input_grad(nd.extra[1]))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              (*da)[r * cols + c] += tg[r] * g[r * cols + c];
        if (Tensor* db = input_grad(nd.extra[2]))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              (*db)[r * cols + c] += (1.0 - tg[r]) * g[r * cols + c];
        break;
      }
      case Op::kSumAll: {
        if (Tensor* da = input_grad(nd.in0))
          for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += g[0];
        break;
      }
      case Op::kMaskedSse: {
        if (Tensor* dp = input_grad(nd.in0)) {
          const Tensor& p = nodes_[nd.in0].value;
          const std::size_t sz = p.size();
          const double* target = nd.saved.data();
          const double* mask = nd.saved.data() + sz;
          for (std::size_t i = 0; i < sz; ++i)
            if (mask[i] != 0.0)
              (*dp)[i] += g[0] * 2.0 * (p[i] - target[i]);
        }
        break;
      }
      case Op::kMultiHeadAttention: {
        const Tensor& tq = nodes_[nd.extra[0]].value;
        const Tensor& tk = nodes_[nd.extra[1]].value;
        const Tensor& tv = nodes_[nd.extra[2]].value;
        const std::size_t heads = nd.s0;
        const std::size_t t_len = tq.rows(), d = tq.cols(), dk = d / heads;
        const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
        Tensor* dq = input_grad(nd.extra[0]);
        Tensor* dkv = input_grad(nd.extra[1]);
        Tensor* dv = input_grad(nd.extra[2]);
        auto mq = as_matrix(tq);
        auto mk = as_matrix(tk);
        auto mv = as_matrix(tv);
        auto mg = as_matrix(g);
        auto mp = as_matrix(nd.saved);
        EigenRowMat d_probs(t_len, t_len), d_scores(t_len, t_len);
        for (std::size_t h = 0; h < heads; ++h) {
          const auto qh = mq.middleCols(static_cast<Eigen::Index>(h * dk),
                                        static_cast<Eigen::Index>(dk));
          const auto kh = mk.middleCols(static_cast<Eigen::Index>(h * dk),
                                        static_cast<Eigen::Index>(dk));
          const auto vh = mv.middleCols(static_cast<Eigen::Index>(h * dk),
                                        static_cast<Eigen::Index>(dk));
          const auto gh = mg.middleCols(static_cast<Eigen::Index>(h * dk),
                                        static_cast<Eigen::Index>(dk));
          const auto ph = mp.middleRows(static_cast<Eigen::Index>(h * t_len),
                                        static_cast<Eigen::Index>(t_len));
          if (dv)
            as_matrix(*dv)
                .middleCols(static_cast<Eigen::Index>(h * dk),
                            static_cast<Eigen::Index>(dk))
                .noalias() += ph.transpose() * gh;
          d_probs.noalias() = gh * vh.transpose();
          // softmax backward per row
          for (std::size_t r = 0; r < t_len; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < t_len; ++c)
              dot += d_probs(static_cast<Eigen::Index>(r),
                             static_cast<Eigen::Index>(c)) *
                     ph(static_cast<Eigen::Index>(r),
                        static_cast<Eigen::Index>(c));
            for (std::size_t c = 0; c < t_len; ++c)
              d_scores(static_cast<Eigen::Index>(r),
                       static_cast<Eigen::Index>(c)) =
                  ph(static_cast<Eigen::Index>(r),
                     static_cast<Eigen::Index>(c)) *
                  (d_probs(static_cast<Eigen::Index>(r),
                           static_cast<Eigen::Index>(c)) -
                   dot);
          }
          if (dq)
            as_matrix(*dq)
                .middleCols(static_cast<Eigen::Index>(h * dk),
                            static_cast<Eigen::Index>(dk))
                .noalias() += d_scores * kh * inv_scale;
          if (dkv)
            as_matrix(*dkv)
                .middleCols(static_cast<Eigen::Index>(h * dk),
                            static_cast<Eigen::Index>(dk))
                .noalias() += d_scores.transpose() * qh * inv_scale;
        }
        break;
      }
    }
  }

  void check_finite(const Tensor& t, const char* label) {
    if (!t.all_finite())
      fail(ErrorKind::computation,
           std::string("non-finite value produced by '") + label + "'");
  }

  [[noreturn]] void shape_error(const char* label, const Tensor& a) {
    fail(ErrorKind::dimension,
         std::string("shape mismatch in '") + label + "': " + a.shape_string());
  }

  [[noreturn]] void shape_error(const char* label, const Tensor& a,
                                const Tensor& b) {
    fail(ErrorKind::dimension, std::string("shape mismatch in '") + label +
                                   "': " + a.shape_string() + " vs " +
                                   b.shape_string());
  }

  std::vector<Node> nodes_;
};

}  // namespace hybridst::diff

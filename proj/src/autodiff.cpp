/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#include "wakerom/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "wakerom/error.hpp"

namespace wakerom {
namespace ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MatMap as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

constexpr double kLayerNormEps = 1e-5;
const double kGeluC = std::sqrt(2.0 / std::numbers::pi);
constexpr double kGeluA = 0.044715;

void require_rank2(const Tensor& t, const char* op, const char* operand) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": operand " + operand + " must be rank 2, got " + dims_to_string(t.dims()));
  }
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible operands " + dims_to_string(a.dims()) + " and " +
                   dims_to_string(b.dims()));
}

void accumulate(Tensor& into, const Tensor& g) {
  if (into.empty() && !g.empty()) {
    into = g;
    return;
  }
  auto dst = into.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::BroadcastAdd: return "broadcast_add";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Tanh: return "tanh";
    case Op::Gelu: return "gelu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Softmax: return "softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::ConcatCols: return "concat_cols";
    case Op::ConcatRows: return "concat_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::GatherRows: return "gather_rows";
    case Op::Reshape: return "reshape";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Mse: return "mse";
    case Op::Attention: return "attention";
  }
  return "?";
}

std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k, const AttentionShape& s) {
  const std::size_t d = q.cols();
  const std::size_t dk = d / s.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> probs(s.batch * s.heads * s.q_len * s.kv_len, 0.0);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      for (std::size_t i = 0; i < s.q_len; ++i) {
        double* p = &probs[((b * s.heads + h) * s.q_len + i) * s.kv_len];
        const double* qi = &q.data()[(b * s.q_len + i) * d + h * dk];
        const std::size_t visible = s.causal ? i + 1 : s.kv_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          const double* kj = &k.data()[(b * s.kv_len + j) * d + h * dk];
          double dot = 0.0;
          for (std::size_t c = 0; c < dk; ++c) dot += qi[c] * kj[c];
          p[j] = dot * inv_sqrt;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        for (std::size_t j = 0; j < visible; ++j) p[j] /= z;
      }
    }
  }
  return probs;
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw ContractError("autodiff: invalid variable handle");
  return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

Var Graph::push(Node n, const char* what) {
  if (!n.value.all_finite()) {
    throw NumericError(std::string("autodiff: non-finite value produced by ") + what);
  }
  for (auto in : n.inputs) n.needs_grad = n.needs_grad || nodes_[in].needs_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::input(Tensor value) {
  Node n{Op::Input, {}, std::move(value)};
  return push(std::move(n), "input");
}

Var Graph::param(const std::string& name, const Tensor& value) {
  if (params_.contains(name)) throw ContractError("autodiff: parameter '" + name + "' registered twice");
  Node n{Op::Param, {}, value};
  n.needs_grad = true;
  n.name = name;
  auto v = push(std::move(n), name.c_str());
  params_[name] = v.id;
  return v;
}

Var Graph::matmul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_rank2(A, "matmul", "a");
  require_rank2(B, "matmul", "b");
  if (A.cols() != B.rows()) mismatch("matmul", A, B);
  Tensor C({A.rows(), B.cols()});
  as_mat(C, A.rows(), B.cols()).noalias() = as_mat(A, A.rows(), A.cols()) * as_mat(B, B.rows(), B.cols());
  return push(Node{Op::MatMul, {a.id, b.id}, std::move(C)}, "matmul");
}

Var Graph::add(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.dims() != B.dims()) mismatch("add", A, B);
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
  return push(Node{Op::Add, {a.id, b.id}, std::move(C)}, "add");
}

Var Graph::sub(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.dims() != B.dims()) mismatch("sub", A, B);
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return push(Node{Op::Sub, {a.id, b.id}, std::move(C)}, "sub");
}

Var Graph::mul(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.dims() != B.dims()) mismatch("mul", A, B);
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return push(Node{Op::Mul, {a.id, b.id}, std::move(C)}, "mul");
}

Var Graph::broadcast_add(Var x, Var rows) {
  const auto& X = value(x);
  const auto& R = value(rows);
  const std::size_t c = X.cols();
  const std::size_t r = R.size() / std::max<std::size_t>(R.cols(), 1);
  if (R.cols() != c || R.size() == 0 || X.rows() % r != 0) mismatch("broadcast_add", X, R);
  Tensor Y = X;
  for (std::size_t i = 0; i < X.rows(); ++i) {
    auto dst = Y.row(i);
    const double* src = &R.data()[(i % r) * c];
    for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
  }
  Node n{Op::BroadcastAdd, {x.id, rows.id}, std::move(Y)};
  n.a = r;
  return push(std::move(n), "broadcast_add");
}

Var Graph::scale(Var x, double s) {
  Tensor Y = value(x);
  for (auto& v : Y.data()) v *= s;
  Node n{Op::Scale, {x.id}, std::move(Y)};
  n.scalar = s;
  return push(std::move(n), "scale");
}

Var Graph::add_scalar(Var x, double c) {
  Tensor Y = value(x);
  for (auto& v : Y.data()) v += c;
  return push(Node{Op::AddScalar, {x.id}, std::move(Y)}, "add_scalar");
}

Var Graph::tanh(Var x) {
  Tensor Y = value(x);
  for (auto& v : Y.data()) v = std::tanh(v);
  return push(Node{Op::Tanh, {x.id}, std::move(Y)}, "tanh");
}

Var Graph::gelu(Var x) {
  const auto& X = value(x);
  Tensor Y(X.dims());
  Tensor T(X.dims());
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double v = X[i];
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    T[i] = t;
    Y[i] = 0.5 * v * (1.0 + t);
  }
  Node n{Op::Gelu, {x.id}, std::move(Y)};
  n.cache = std::move(T);
  return push(std::move(n), "gelu");
}

Var Graph::exp(Var x) {
  Tensor Y = value(x);
  for (auto& v : Y.data()) v = std::exp(v);
  return push(Node{Op::Exp, {x.id}, std::move(Y)}, "exp");
}

Var Graph::log(Var x) {
  Tensor Y = value(x);
  for (auto& v : Y.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive argument " + std::to_string(v));
    v = std::log(v);
  }
  return push(Node{Op::Log, {x.id}, std::move(Y)}, "log");
}

Var Graph::softmax(Var x) {
  Tensor Y = value(x);
  const std::size_t c = Y.cols();
  for (std::size_t r = 0; r < Y.rows(); ++r) {
    auto row = Y.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  return push(Node{Op::Softmax, {x.id}, std::move(Y)}, "softmax");
}

Var Graph::layer_norm(Var x, Var gamma, Var beta) {
  const auto& X = value(x);
  const auto& G = value(gamma);
  const auto& B = value(beta);
  const std::size_t c = X.cols();
  if (G.size() != c) mismatch("layer_norm", X, G);
  if (B.size() != c) mismatch("layer_norm", X, B);
  Tensor Xhat(X.dims());
  Tensor inv_std({X.rows()});
  Tensor Y(X.dims());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    auto in = X.row(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[r] = is;
    auto xh = Xhat.row(r);
    auto out = Y.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      xh[j] = (in[j] - mu) * is;
      out[j] = G[j] * xh[j] + B[j];
    }
  }
  Node n{Op::LayerNorm, {x.id, gamma.id, beta.id}, std::move(Y)};
  n.cache = std::move(Xhat);
  n.cache2 = std::move(inv_std);
  return push(std::move(n), "layer_norm");
}

Var Graph::concat_cols(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_rank2(A, "concat_cols", "a");
  require_rank2(B, "concat_cols", "b");
  if (A.rows() != B.rows()) mismatch("concat_cols", A, B);
  const std::size_t ca = A.cols(), cb = B.cols();
  Tensor C({A.rows(), ca + cb});
  for (std::size_t r = 0; r < A.rows(); ++r) {
    std::copy(A.row(r).begin(), A.row(r).end(), C.row(r).begin());
    std::copy(B.row(r).begin(), B.row(r).end(), C.row(r).begin() + static_cast<std::ptrdiff_t>(ca));
  }
  return push(Node{Op::ConcatCols, {a.id, b.id}, std::move(C)}, "concat_cols");
}

Var Graph::concat_rows(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  require_rank2(A, "concat_rows", "a");
  require_rank2(B, "concat_rows", "b");
  if (A.cols() != B.cols()) mismatch("concat_rows", A, B);
  std::vector<double> data(A.data().begin(), A.data().end());
  data.insert(data.end(), B.data().begin(), B.data().end());
  Tensor C({A.rows() + B.rows(), A.cols()}, std::move(data));
  return push(Node{Op::ConcatRows, {a.id, b.id}, std::move(C)}, "concat_rows");
}

Var Graph::slice_cols(Var x, std::size_t begin, std::size_t end) {
  const auto& X = value(x);
  require_rank2(X, "slice_cols", "x");
  if (begin >= end || end > X.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     dims_to_string(X.dims()));
  }
  Tensor Y({X.rows(), end - begin});
  for (std::size_t r = 0; r < X.rows(); ++r) {
    auto in = X.row(r);
    std::copy(in.begin() + static_cast<std::ptrdiff_t>(begin), in.begin() + static_cast<std::ptrdiff_t>(end),
              Y.row(r).begin());
  }
  Node n{Op::SliceCols, {x.id}, std::move(Y)};
  n.a = begin;
  n.b = end;
  return push(std::move(n), "slice_cols");
}

Var Graph::gather_rows(Var x, std::vector<std::size_t> idx) {
  const auto& X = value(x);
  require_rank2(X, "gather_rows", "x");
  Tensor Y = take_rows(X, idx);
  Node n{Op::GatherRows, {x.id}, std::move(Y)};
  n.index = std::move(idx);
  return push(std::move(n), "gather_rows");
}

Var Graph::reshape(Var x, Dims dims) {
  Tensor Y = value(x).reshaped(std::move(dims));
  return push(Node{Op::Reshape, {x.id}, std::move(Y)}, "reshape");
}

Var Graph::sum(Var x) {
  double s = 0.0;
  for (double v : value(x).data()) s += v;
  return push(Node{Op::Sum, {x.id}, Tensor::scalar(s)}, "sum");
}

Var Graph::mean(Var x) {
  const auto& X = value(x);
  if (X.size() == 0) throw ShapeError("mean: empty operand");
  double s = 0.0;
  for (double v : X.data()) s += v;
  return push(Node{Op::Mean, {x.id}, Tensor::scalar(s / static_cast<double>(X.size()))}, "mean");
}

Var Graph::mse(Var a, Var b) {
  const auto& A = value(a);
  const auto& B = value(b);
  if (A.dims() != B.dims()) mismatch("mse", A, B);
  if (A.size() == 0) throw ShapeError("mse: empty operands");
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += (A[i] - B[i]) * (A[i] - B[i]);
  return push(Node{Op::Mse, {a.id, b.id}, Tensor::scalar(s / static_cast<double>(A.size()))}, "mse");
}

Var Graph::attention(Var q, Var k, Var v, const AttentionShape& s) {
  const auto& Q = value(q);
  const auto& K = value(k);
  const auto& V = value(v);
  require_rank2(Q, "attention", "q");
  require_rank2(K, "attention", "k");
  require_rank2(V, "attention", "v");
  const std::size_t d = Q.cols();
  if (s.heads == 0 || d % s.heads != 0) throw ShapeError("attention: width " + std::to_string(d) + " not divisible by heads");
  if (Q.rows() != s.batch * s.q_len) mismatch("attention", Q, K);
  if (K.rows() != s.batch * s.kv_len || K.cols() != d) mismatch("attention", Q, K);
  if (V.dims() != K.dims()) mismatch("attention", K, V);
  if (s.causal && s.q_len != s.kv_len) throw ShapeError("attention: causal masking needs q_len == kv_len");

  auto probs = attention_probabilities(Q, K, s);
  const std::size_t dk = d / s.heads;
  Tensor O({Q.rows(), d});
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      for (std::size_t i = 0; i < s.q_len; ++i) {
        const double* p = &probs[((b * s.heads + h) * s.q_len + i) * s.kv_len];
        double* o = &O.data()[(b * s.q_len + i) * d + h * dk];
        for (std::size_t j = 0; j < s.kv_len; ++j) {
          if (p[j] == 0.0) continue;
          const double* vj = &V.data()[(b * s.kv_len + j) * d + h * dk];
          for (std::size_t c = 0; c < dk; ++c) o[c] += p[j] * vj[c];
        }
      }
    }
  }
  Node n{Op::Attention, {q.id, k.id, v.id}, std::move(O)};
  const std::size_t n_probs = probs.size();
  n.cache = Tensor({n_probs}, std::move(probs));
  n.attn = s;
  return push(std::move(n), "attention");
}

ParamMap Graph::backward(Var loss) {
  const auto& L = value(loss);
  if (L.size() != 1) throw ContractError("backward: loss must be scalar, got " + dims_to_string(L.dims()));
  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id] = Tensor::filled(L.dims(), 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (grads[i].empty() || !nodes_[i].needs_grad) continue;
    backward_node(i, grads);
  }
  ParamMap out;
  for (const auto& [name, id] : params_) {
    out[name] = grads[id].empty() ? Tensor(nodes_[id].value.dims()) : grads[id];
  }
  return out;
}

void Graph::backward_node(std::size_t i, std::vector<Tensor>& grads) {
  const Node& n = nodes_[i];
  const Tensor& g = grads[i];
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
  auto send = [&](std::size_t k, const Tensor& t) { accumulate(grads[n.inputs[k]], t); };
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };

  switch (n.op) {
    case Op::Input:
    case Op::Param:
      break;
    case Op::MatMul: {
      const auto& A = in(0);
      const auto& B = in(1);
      auto G = as_mat(g, A.rows(), B.cols());
      if (wants(0)) {
        Tensor dA(A.dims());
        as_mat(dA, A.rows(), A.cols()).noalias() = G * as_mat(B, B.rows(), B.cols()).transpose();
        send(0, dA);
      }
      if (wants(1)) {
        Tensor dB(B.dims());
        as_mat(dB, B.rows(), B.cols()).noalias() = as_mat(A, A.rows(), A.cols()).transpose() * G;
        send(1, dB);
      }
      break;
    }
    case Op::Add:
      if (wants(0)) send(0, g);
      if (wants(1)) send(1, g);
      break;
    case Op::Sub:
      if (wants(0)) send(0, g);
      if (wants(1)) {
        Tensor d = g;
        for (auto& v : d.data()) v = -v;
        send(1, d);
      }
      break;
    case Op::Mul:
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const auto& other = in(1 - k);
        Tensor d = g;
        for (std::size_t j = 0; j < d.size(); ++j) d[j] *= other[j];
        send(k, d);
      }
      break;
    case Op::BroadcastAdd: {
      if (wants(0)) send(0, g);
      if (wants(1)) {
        Tensor d(in(1).dims());
        const std::size_t c = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto src = g.row(r);
          double* dst = &d.data()[(r % n.a) * c];
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
        send(1, d);
      }
      break;
    }
    case Op::Scale: {
      Tensor d = g;
      for (auto& v : d.data()) v *= n.scalar;
      send(0, d);
      break;
    }
    case Op::AddScalar:
      send(0, g);
      break;
    case Op::Tanh: {
      Tensor d = g;
      for (std::size_t j = 0; j < d.size(); ++j) d[j] *= 1.0 - n.value[j] * n.value[j];
      send(0, d);
      break;
    }
    case Op::Gelu: {
      const auto& X = in(0);
      Tensor d = g;
      for (std::size_t j = 0; j < d.size(); ++j) {
        const double x = X[j];
        const double t = n.cache[j];
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        d[j] *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      }
      send(0, d);
      break;
    }
    case Op::Exp: {
      Tensor d = g;
      for (std::size_t j = 0; j < d.size(); ++j) d[j] *= n.value[j];
      send(0, d);
      break;
    }
    case Op::Log: {
      Tensor d = g;
      const auto& X = in(0);
      for (std::size_t j = 0; j < d.size(); ++j) d[j] /= X[j];
      send(0, d);
      break;
    }
    case Op::Softmax: {
      Tensor d(g.dims());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto y = n.value.row(r);
        auto gy = g.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < y.size(); ++j) dot += gy[j] * y[j];
        auto dr = d.row(r);
        for (std::size_t j = 0; j < y.size(); ++j) dr[j] = y[j] * (gy[j] - dot);
      }
      send(0, d);
      break;
    }
    case Op::LayerNorm: {
      const auto& G = in(1);
      const std::size_t c = g.cols();
      const double inv_c = 1.0 / static_cast<double>(c);
      Tensor dx(g.dims()), dgamma(in(1).dims()), dbeta(in(2).dims());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gy = g.row(r);
        auto xh = n.cache.row(r);
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double dxh = gy[j] * G[j];
          mean_d += dxh;
          mean_dx += dxh * xh[j];
          dgamma[j] += gy[j] * xh[j];
          dbeta[j] += gy[j];
        }
        mean_d *= inv_c;
        mean_dx *= inv_c;
        auto out = dx.row(r);
        const double is = n.cache2[r];
        for (std::size_t j = 0; j < c; ++j) out[j] = is * (gy[j] * G[j] - mean_d - xh[j] * mean_dx);
      }
      if (wants(0)) send(0, dx);
      if (wants(1)) send(1, dgamma);
      if (wants(2)) send(2, dbeta);
      break;
    }
    case Op::ConcatCols: {
      const std::size_t ca = in(0).cols();
      const std::size_t cb = in(1).cols();
      Tensor da(in(0).dims()), db(in(1).dims());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto src = g.row(r);
        std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(ca), da.row(r).begin());
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(ca), src.begin() + static_cast<std::ptrdiff_t>(ca + cb),
                  db.row(r).begin());
      }
      if (wants(0)) send(0, da);
      if (wants(1)) send(1, db);
      break;
    }
    case Op::ConcatRows: {
      const std::size_t ra = in(0).rows();
      if (wants(0)) send(0, slice_rows(g, 0, ra));
      if (wants(1)) send(1, slice_rows(g, ra, g.rows()));
      break;
    }
    case Op::SliceCols: {
      Tensor d(in(0).dims());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto src = g.row(r);
        std::copy(src.begin(), src.end(), d.row(r).begin() + static_cast<std::ptrdiff_t>(n.a));
      }
      send(0, d);
      break;
    }
    case Op::GatherRows: {
      Tensor d(in(0).dims());
      for (std::size_t r = 0; r < n.index.size(); ++r) {
        auto src = g.row(r);
        auto dst = d.row(n.index[r]);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
      send(0, d);
      break;
    }
    case Op::Reshape:
      send(0, g.reshaped(in(0).dims()));
      break;
    case Op::Sum:
      send(0, Tensor::filled(in(0).dims(), g[0]));
      break;
    case Op::Mean:
      send(0, Tensor::filled(in(0).dims(), g[0] / static_cast<double>(in(0).size())));
      break;
    case Op::Mse: {
      const auto& A = in(0);
      const auto& B = in(1);
      const double f = 2.0 * g[0] / static_cast<double>(A.size());
      Tensor d(A.dims());
      for (std::size_t j = 0; j < d.size(); ++j) d[j] = f * (A[j] - B[j]);
      if (wants(0)) send(0, d);
      if (wants(1)) {
        for (auto& v : d.data()) v = -v;
        send(1, d);
      }
      break;
    }
    case Op::Attention: {
      const auto& Q = in(0);
      const auto& K = in(1);
      const auto& V = in(2);
      const auto& s = n.attn;
      const std::size_t d = Q.cols();
      const std::size_t dk = d / s.heads;
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
      Tensor dQ(Q.dims()), dK(K.dims()), dV(V.dims());
      std::vector<double> dp(s.kv_len);
      for (std::size_t b = 0; b < s.batch; ++b) {
        for (std::size_t h = 0; h < s.heads; ++h) {
          for (std::size_t i = 0; i < s.q_len; ++i) {
            const double* p = &n.cache.data()[((b * s.heads + h) * s.q_len + i) * s.kv_len];
            const double* go = &g.data()[(b * s.q_len + i) * d + h * dk];
            const std::size_t visible = s.causal ? i + 1 : s.kv_len;
            double dot = 0.0;
            for (std::size_t j = 0; j < visible; ++j) {
              const double* vj = &V.data()[(b * s.kv_len + j) * d + h * dk];
              double* dvj = &dV.data()[(b * s.kv_len + j) * d + h * dk];
              double acc = 0.0;
              for (std::size_t c = 0; c < dk; ++c) {
                acc += go[c] * vj[c];
                dvj[c] += p[j] * go[c];
              }
              dp[j] = acc;
              dot += acc * p[j];
            }
            const double* qi = &Q.data()[(b * s.q_len + i) * d + h * dk];
            double* dqi = &dQ.data()[(b * s.q_len + i) * d + h * dk];
            for (std::size_t j = 0; j < visible; ++j) {
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              if (ds == 0.0) continue;
              const double* kj = &K.data()[(b * s.kv_len + j) * d + h * dk];
              double* dkj = &dK.data()[(b * s.kv_len + j) * d + h * dk];
              for (std::size_t c = 0; c < dk; ++c) {
                dqi[c] += ds * kj[c];
                dkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
      if (wants(0)) send(0, dQ);
      if (wants(1)) send(1, dK);
      if (wants(2)) send(2, dV);
      break;
    }
  }
}

}  // namespace ad

double grad_check(const LossBuilder& f, const ParamMap& params, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  auto evaluate = [&](const ParamMap& p) {
    ad::Graph g;
    auto loss = f(g, p);
    return g.value(loss)[0];
  };
  ad::Graph g;
  auto loss = f(g, params);
  const double base = g.value(loss)[0];
  if (evaluate(params) != base) throw ContractError("grad_check: loss function is not deterministic");
  const ParamMap analytic = g.backward(loss);

  double worst = 0.0;
  ParamMap probe = params;
  for (auto& [name, tensor] : probe) {
    const auto it = analytic.find(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor[i];
      tensor[i] = orig + step;
      const double up = evaluate(probe);
      tensor[i] = orig - step;
      const double down = evaluate(probe);
      tensor[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double ag = it == analytic.end() ? 0.0 : it->second[i];
      worst = std::max(worst, std::abs(ag - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace wakerom

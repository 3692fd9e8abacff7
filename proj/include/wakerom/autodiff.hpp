/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "wakerom/tensor.hpp"

namespace wakerom {

using ParamMap = std::map<std::string, Tensor>;

namespace ad {

/// Handle to a node of a Graph. Only meaningful for the graph that created it.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

enum class Op : std::uint8_t {
  Input,
  Param,
  MatMul,
  Add,
  Sub,
  Mul,
  BroadcastAdd,
  Scale,
  AddScalar,
  Tanh,
  Gelu,
  Exp,
  Log,
  Softmax,
  LayerNorm,
  ConcatCols,
  ConcatRows,
  SliceCols,
  GatherRows,
  Reshape,
  Sum,
  Mean,
  Mse,
  Attention,
};

const char* op_name(Op op);

/// Batched multi-head scaled dot-product attention layout. Queries are
/// `batch * q_len` rows, keys and values `batch * kv_len` rows; all three share
/// the model width, which must divide by `heads`.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t q_len = 1;
  std::size_t kv_len = 1;
  std::size_t heads = 1;
  bool causal = false;  ///< query i sees keys j <= i; needs q_len == kv_len
};

/// Attention probabilities, laid out [batch][head][q][kv].
std::vector<double> attention_probabilities(const Tensor& q, const Tensor& k, const AttentionShape& shape);

/// Define-by-run reverse-mode tape.
///
/// Every op appends a node holding its forward value; nodes only reference
/// earlier nodes, so the tape is topologically ordered by construction and
/// backward() is a single reverse sweep. A graph is meant to live for one
/// training step.
///
/// Shape rules (2-D operands are [rows, cols]; "last axis" means cols):
///   matmul        [n,k] x [k,p] -> [n,p]
///   add/sub/mul   equal dims -> same dims
///   broadcast_add x [n,c] + t [r,c], r divides n; row i gets t[i % r]
///   softmax, layer_norm over the last axis (layer_norm eps = 1e-5)
///   concat_cols   [n,a] | [n,b] -> [n,a+b];  concat_rows [a,c] ; [b,c] -> [a+b,c]
///   slice_cols    [n,c] -> [n,end-begin];     gather_rows [n,c] -> [idx,c]
///   sum, mean, mse -> scalar
class Graph {
 public:
  Graph() = default;

  /// Constant leaf; receives no gradient.
  Var input(Tensor value);
  /// Named trainable leaf. Each name may be registered once per graph.
  Var param(const std::string& name, const Tensor& value);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var broadcast_add(Var x, Var rows);
  Var scale(Var x, double s);
  Var add_scalar(Var x, double c);
  Var tanh(Var x);
  /// Tanh-approximated GELU, the network activation used throughout.
  Var gelu(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var softmax(Var x);
  Var layer_norm(Var x, Var gamma, Var beta);
  Var concat_cols(Var a, Var b);
  Var concat_rows(Var a, Var b);
  Var slice_cols(Var x, std::size_t begin, std::size_t end);
  Var gather_rows(Var x, std::vector<std::size_t> idx);
  Var reshape(Var x, Dims dims);
  Var sum(Var x);
  Var mean(Var x);
  Var mse(Var a, Var b);
  Var attention(Var q, Var k, Var v, const AttentionShape& shape);

  const Tensor& value(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }

  /// Gradient of a scalar node with respect to every registered parameter.
  /// Parameters the loss does not depend on get zero tensors.
  ParamMap backward(Var loss);

 private:
  struct Node {
    Node(Op o, std::vector<std::uint32_t> in, Tensor v) : op(o), inputs(std::move(in)), value(std::move(v)) {}
    Op op;
    std::vector<std::uint32_t> inputs;
    Tensor value;
    bool needs_grad = false;
    double scalar = 0.0;
    std::size_t a = 0, b = 0;
    std::vector<std::size_t> index;
    Tensor cache;  // op-specific forward intermediate
    Tensor cache2;
    AttentionShape attn;
    std::string name;
  };

  Var push(Node node, const char* what);
  const Node& node(Var v) const;
  void backward_node(std::size_t i, std::vector<Tensor>& grads);

  std::vector<Node> nodes_;
  std::map<std::string, std::uint32_t> params_;
};

}  // namespace ad

/// Builds a scalar loss from parameters on a fresh graph.
using LossBuilder = std::function<ad::Var(ad::Graph&, const ParamMap&)>;

/// Largest |g_autodiff - g_fd| / max(1, |g_fd|) over every parameter entry,
/// with central differences of the given step. Throws ContractError when two
/// forward evaluations at the same point disagree.
double grad_check(const LossBuilder& f, const ParamMap& params, double step);

}  // namespace wakerom

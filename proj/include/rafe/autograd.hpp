#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "rafe/common.hpp"

namespace rafe {

/// Dense row-major tensor of doubles. All model math runs at 64-bit
/// precision; checkpoints narrow to 32-bit floats on disk.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, double fill = 0.0);

    static Tensor scalar(double v);
    static Tensor vector(std::vector<double> v);
    static Tensor randn(std::vector<std::size_t> s, SplitMix64& rng, double stddev);

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;
    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool all_finite() const;
};

/// Node in the dynamic computation graph. Built by the op functions below;
/// freed when the last Value referencing the subgraph goes away.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // accumulates this node's grad into parents
};

using Value = std::shared_ptr<Node>;

Value make_leaf(const Tensor& t);      // requires_grad = true
Value make_const(Tensor t);            // requires_grad = false
Value make_const_scalar(double v);
Value make_const_vector(std::vector<double> v);

// Matrix ops.
Value matmul(const Value& a, const Value& b);     // [m,k]x[k,n]
Value matmul_nt(const Value& a, const Value& b);  // [m,k]x[n,k]^T -> [m,n]

// Elementwise / broadcast ops.
Value add(const Value& a, const Value& b);         // same shape
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);         // hadamard
Value add_rowvec(const Value& a, const Value& b);  // a[m,n] + b[n]
Value scale(const Value& a, double c);
Value add_scalar(const Value& a, double c);
Value neg(const Value& a);
Value exp_v(const Value& a);
Value log_v(const Value& a);
Value sigmoid(const Value& a);
Value log_sigmoid(const Value& a);  // stable at large |x|
Value gelu(const Value& a);
Value minimum(const Value& a, const Value& b);
Value clamp(const Value& a, double lo, double hi);

// Structural ops.
Value rows(const Value& table, const std::vector<int>& ids);  // gather -> [T,d]
Value col_slice(const Value& x, std::size_t c0, std::size_t c1);
Value concat_cols(const std::vector<Value>& parts);
Value stack_scalars(const std::vector<Value>& xs);  // -> [n]
Value pick(const Value& matrix, const std::vector<std::pair<int, int>>& coords);  // -> [n]

// Row-wise normalizations.
Value layer_norm(const Value& x, const Value& gain, const Value& bias, double eps = 1e-5);
Value softmax_rows(const Value& x);
Value log_softmax_rows(const Value& x);
Value causal_mask(const Value& scores);  // -1e30 above the diagonal

// Reductions.
Value sum(const Value& x);   // -> scalar [1]
Value mean(const Value& x);  // -> scalar [1]

/// Reverse-mode sweep from a scalar root; leaf gradients end up in
/// node->grad. Rejects non-finite roots before differentiation.
void backward(const Value& root);

}  // namespace rafe

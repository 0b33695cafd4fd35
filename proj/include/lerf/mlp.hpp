#pragma once

#include "lerf/common.hpp"

#include <vector>

namespace lerf {

/// Fully connected network: `hidden_layers` rectified layers of `hidden_width`, then a
/// linear output layer of `out_dim`.
struct MLPConfig {
  int hidden_layers = 1;
  int hidden_width = 64;
  int out_dim = 1;

  void validate() const;
};

struct DenseLayout {
  size_t weight_offset = 0;  // out x in, column-major
  size_t bias_offset = 0;
  int in = 0, out = 0;
};

struct MlpLayout {
  MLPConfig config;
  int in_dim = 0;
  std::vector<DenseLayout> layers;
  size_t param_count = 0;
};

/// Offsets are relative to the MLP's parameter block.
MlpLayout make_mlp_layout(int in_dim, const MLPConfig& config);

template <typename Scalar>
struct MlpTape {
  std::vector<MatrixX<Scalar>> inputs;  // input of every layer (post-activation of the previous)
};

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const MatrixX<Scalar>>;
template <typename Scalar>
using ConstVectorMap = Eigen::Map<const VectorX<Scalar>>;

template <typename Scalar>
MatrixX<Scalar> mlp_forward(const MlpLayout& layout, const Scalar* params, const MatrixX<Scalar>& input,
                            MlpTape<Scalar>* tape = nullptr) {
  if (input.rows() != layout.in_dim) throw Error("mlp_forward: input has wrong dimension");
  if (tape) tape->inputs.clear();
  MatrixX<Scalar> h = input;
  for (size_t i = 0; i < layout.layers.size(); ++i) {
    const DenseLayout& d = layout.layers[i];
    const ConstMatrixMap<Scalar> w(params + d.weight_offset, d.out, d.in);
    const ConstVectorMap<Scalar> b(params + d.bias_offset, d.out);
    MatrixX<Scalar> z = w * h;
    z.colwise() += b;
    if (i + 1 < layout.layers.size()) z = z.cwiseMax(Scalar(0));
    if (tape) tape->inputs.push_back(std::move(h));
    h = std::move(z);
  }
  return h;
}

/// Accumulates parameter gradients into `grad_params` (same block layout as `params`) and
/// returns the gradient with respect to the input.
template <typename Scalar>
MatrixX<Scalar> mlp_backward(const MlpLayout& layout, const Scalar* params, const MlpTape<Scalar>& tape,
                             const MatrixX<Scalar>& grad_output, Scalar* grad_params) {
  if (tape.inputs.size() != layout.layers.size()) throw Error("mlp_backward: no matching forward pass recorded");
  if (grad_output.rows() != layout.layers.back().out || grad_output.cols() != tape.inputs.front().cols()) {
    throw Error("mlp_backward: gradient shape does not match the recorded forward pass");
  }
  MatrixX<Scalar> g = grad_output;
  for (size_t k = layout.layers.size(); k-- > 0;) {
    const DenseLayout& d = layout.layers[k];
    const MatrixX<Scalar>& in = tape.inputs[k];
    Eigen::Map<MatrixX<Scalar>> gw(grad_params + d.weight_offset, d.out, d.in);
    Eigen::Map<VectorX<Scalar>> gb(grad_params + d.bias_offset, d.out);
    gw.noalias() += g * in.transpose();
    gb += g.rowwise().sum();
    const ConstMatrixMap<Scalar> w(params + d.weight_offset, d.out, d.in);
    MatrixX<Scalar> gin = w.transpose() * g;
    if (k > 0) {
      // `in` is the rectified output of layer k-1.
      gin = (in.array() > Scalar(0)).select(gin, Scalar(0));
    }
    g = std::move(gin);
  }
  return g;
}

}  // namespace lerf

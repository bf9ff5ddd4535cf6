#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "seqvar/common.hpp"
#include "seqvar/rng.hpp"

namespace seqvar {

enum class Activation { kIdentity, kTanh };

// Multi-layer perceptron over a borrowed flat parameter slice. Hidden layers use
// tanh; the output activation is configurable (identity by default).
//
// Layout per layer: weights (d_out x d_in, row-major) followed by biases (d_out).
class Mlp {
 public:
  // Cached layer inputs and post-activation outputs for the backward pass.
  struct Tape {
    std::vector<Vec> inputs;
    std::vector<Vec> outputs;
  };

  Mlp() = default;
  explicit Mlp(std::vector<Eigen::Index> layer_dims, Activation output = Activation::kIdentity);

  const std::vector<Eigen::Index>& layer_dims() const { return dims_; }
  Eigen::Index input_dim() const { return dims_.front(); }
  Eigen::Index output_dim() const { return dims_.back(); }
  Eigen::Index num_params() const { return num_params_; }
  Activation output_activation() const { return output_; }

  Vec forward(std::span<const double> params, const Vec& x) const;
  Vec forward(std::span<const double> params, const Vec& x, Tape& tape) const;
  // Forward pass on every row of `xs`.
  RowMat forward_rows(std::span<const double> params, const RowMat& xs) const;

  // Vector-Jacobian products. `grad_params` is accumulated into; `grad_input`
  // (optional) is overwritten.
  void backward(std::span<const double> params, const Tape& tape, const Vec& upstream,
                std::span<double> grad_params, Vec* grad_input = nullptr) const;

  // Uniform in +-1/sqrt(fan_in) for weights and biases.
  void initialize(std::span<double> params, Stream& rng) const;

  // Forward pass for an arbitrary scalar type (used by the autodiff oracles).
  template <class S>
  Eigen::Matrix<S, Eigen::Dynamic, 1> forward_generic(const S* params,
                                                      Eigen::Matrix<S, Eigen::Dynamic, 1> x) const {
    using std::tanh;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      const Eigen::Index din = dims_[l];
      const Eigen::Index dout = dims_[l + 1];
      Eigen::Matrix<S, Eigen::Dynamic, 1> y(dout);
      for (Eigen::Index r = 0; r < dout; ++r) {
        S acc = params[dout * din + r];
        for (Eigen::Index c = 0; c < din; ++c) acc += params[r * din + c] * x[c];
        y[r] = acc;
      }
      params += dout * din + dout;
      const bool last = l + 2 == dims_.size();
      if (!last || output_ == Activation::kTanh) {
        for (Eigen::Index r = 0; r < dout; ++r) y[r] = tanh(y[r]);
      }
      x = std::move(y);
    }
    return x;
  }

 private:
  void check_params(std::size_t n) const;

  std::vector<Eigen::Index> dims_;
  Activation output_ = Activation::kIdentity;
  Eigen::Index num_params_ = 0;
};

}  // namespace seqvar

#include "seqvar/nn.hpp"

#include <string>

namespace seqvar {
namespace {

using ConstRowMap = Eigen::Map<const RowMat>;

}  // namespace

Mlp::Mlp(std::vector<Eigen::Index> layer_dims, Activation output)
    : dims_(std::move(layer_dims)), output_(output) {
  require(dims_.size() >= 2, "Mlp needs at least an input and an output layer");
  for (const auto d : dims_) require(d > 0, "Mlp layer widths must be positive");
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    num_params_ += (dims_[l] + 1) * dims_[l + 1];
  }
}

void Mlp::check_params(std::size_t n) const {
  if (static_cast<Eigen::Index>(n) != num_params_) {
    throw ParameterError("Mlp: parameter slice has " + std::to_string(n) + " entries, expected " +
                         std::to_string(num_params_));
  }
}

Vec Mlp::forward(std::span<const double> params, const Vec& x) const {
  Tape tape;
  return forward(params, x, tape);
}

Vec Mlp::forward(std::span<const double> params, const Vec& x, Tape& tape) const {
  check_params(params.size());
  require_dim(x.size(), input_dim(), "Mlp::forward");
  tape.inputs.clear();
  tape.outputs.clear();
  const double* p = params.data();
  Vec h = x;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const Eigen::Index din = dims_[l];
    const Eigen::Index dout = dims_[l + 1];
    const ConstRowMap w(p, dout, din);
    const Eigen::Map<const Vec> b(p + dout * din, dout);
    tape.inputs.push_back(h);
    Vec y = w * h + b;
    const bool last = l + 2 == dims_.size();
    if (!last || output_ == Activation::kTanh) y = y.array().tanh();
    tape.outputs.push_back(y);
    h = std::move(y);
    p += dout * din + dout;
  }
  return h;
}

RowMat Mlp::forward_rows(std::span<const double> params, const RowMat& xs) const {
  check_params(params.size());
  require_dim(xs.cols(), input_dim(), "Mlp::forward_rows");
  const double* p = params.data();
  RowMat h = xs;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const Eigen::Index din = dims_[l];
    const Eigen::Index dout = dims_[l + 1];
    const ConstRowMap w(p, dout, din);
    const Eigen::Map<const Vec> b(p + dout * din, dout);
    RowMat y = h * w.transpose();
    y.rowwise() += b.transpose();
    const bool last = l + 2 == dims_.size();
    if (!last || output_ == Activation::kTanh) y = y.array().tanh();
    h = std::move(y);
    p += dout * din + dout;
  }
  return h;
}

void Mlp::backward(std::span<const double> params, const Tape& tape, const Vec& upstream,
                   std::span<double> grad_params, Vec* grad_input) const {
  check_params(params.size());
  check_params(grad_params.size());
  require_dim(upstream.size(), output_dim(), "Mlp::backward");
  require(tape.inputs.size() + 1 == dims_.size(), "Mlp::backward: tape does not match network");

  // Offsets of each layer's block.
  std::vector<Eigen::Index> offset(dims_.size(), 0);
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    offset[l + 1] = offset[l] + (dims_[l] + 1) * dims_[l + 1];
  }

  Vec delta = upstream;
  for (std::size_t l = dims_.size() - 1; l-- > 0;) {
    const Eigen::Index din = dims_[l];
    const Eigen::Index dout = dims_[l + 1];
    const bool last = l + 2 == dims_.size();
    if (!last || output_ == Activation::kTanh) {
      delta = delta.array() * (1.0 - tape.outputs[l].array().square());
    }
    Eigen::Map<RowMat> gw(grad_params.data() + offset[l], dout, din);
    Eigen::Map<Vec> gb(grad_params.data() + offset[l] + dout * din, dout);
    gw.noalias() += delta * tape.inputs[l].transpose();
    gb += delta;
    if (l > 0 || grad_input != nullptr) {
      const ConstRowMap w(params.data() + offset[l], dout, din);
      Vec next = w.transpose() * delta;
      delta = std::move(next);
    }
  }
  if (grad_input != nullptr) *grad_input = delta;
}

void Mlp::initialize(std::span<double> params, Stream& rng) const {
  check_params(params.size());
  double* p = params.data();
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const Eigen::Index din = dims_[l];
    const Eigen::Index dout = dims_[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    for (Eigen::Index k = 0; k < dout * din + dout; ++k) {
      p[k] = bound * (2.0 * rng.uniform() - 1.0);
    }
    p += dout * din + dout;
  }
}

}  // namespace seqvar

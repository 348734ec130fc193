#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "xferlab/dataset.hpp"
#include "xferlab/train.hpp"

namespace xferlab::deepnet {

// Plain fully-connected ReLU stack for the per-layer gradient analysis:
// x^k = relu(x^{k-1} W_k) for k < L, scalar linear output at layer L,
// squared loss. No bias terms, no normalization layers.

enum class InitKind { kRandomGaussian, kPretrained };

struct DeepNet {
  std::vector<Eigen::Index> layer_dims;    // d_0 .. d_L, d_L == 1
  std::vector<Eigen::MatrixXd> weights;    // W_k is d_{k-1} x d_k
  std::vector<Eigen::MatrixXd> init_snapshot;
  InitKind init_kind = InitKind::kRandomGaussian;
  std::string init_run_id;  // set when init_kind == kPretrained

  Eigen::Index depth() const { return static_cast<Eigen::Index>(weights.size()); }
  Eigen::Index input_dim() const { return layer_dims.front(); }
};

// Gaussian init: W_k entries i.i.d. N(0, scale^2). scale may be 0.
DeepNet init_deep(const std::vector<Eigen::Index>& layer_dims, double scale,
                  std::uint64_t seed);

// Wraps externally produced weights (e.g. a loaded checkpoint) as a network
// whose init snapshot is the loaded state.
DeepNet deep_from_weights(std::vector<Eigen::MatrixXd> weights,
                          const std::string& run_id);

Eigen::VectorXd forward_deep(const DeepNet& net, const Eigen::MatrixXd& inputs);

struct BackpropResult {
  double loss = 0.0;
  Eigen::VectorXd output;
  std::vector<Eigen::MatrixXd> weight_grads;      // dL/dW_k, k = 1..L
  std::vector<Eigen::MatrixXd> activation_grads;  // dL/dx^k, k = 0..L (n x d_k)
  std::vector<Eigen::MatrixXd> masks;             // 1{z^k > 0}, k = 1..L-1
};

// One backprop pass; relu'(0) = 0. activation_grads[k] is the gradient with
// respect to the post-activation x^k, so the transport identity reads
// dL/dx^{k-1} = (mask_k o dL/dz^k) W_k^T in row convention.
BackpropResult forward_backward(const DeepNet& net, const Eigen::MatrixXd& inputs,
                                const Eigen::VectorXd& labels);

std::pair<DeepNet, TrainTrace> train_deep(const DeepNet& net,
                                          const tasks::TaskDataset& task,
                                          const TrainConfig& cfg,
                                          DeviationRef ref);

struct LayerGradReport {
  std::vector<double> grad_fro_norm;         // ||dL/dW_k||_F, k = 1..L
  std::vector<double> activation_grad_norm;  // ||dL/dx^k||_F, k = 1..L
  std::vector<double> scaling_ratio;  // ||dL/dx^{k-1}|| / ||dL/dx^k||, k = 1..L

  double geometric_mean_ratio() const;
};

LayerGradReport layer_grad_scale(const DeepNet& net, const Eigen::MatrixXd& inputs,
                                 const Eigen::VectorXd& labels);

}  // namespace xferlab::deepnet

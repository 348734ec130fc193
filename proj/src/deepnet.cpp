#include "xferlab/deepnet.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "xferlab/rng.hpp"

namespace xferlab::deepnet {

namespace {

void check_dims(const DeepNet& net, const Eigen::MatrixXd& inputs) {
  if (inputs.cols() != net.input_dim())
    throw std::invalid_argument("deepnet: input dimension mismatch");
}

void check_net(const DeepNet& net) {
  if (net.depth() < 2)
    throw std::invalid_argument("deepnet: need at least 2 layers");
  if (net.layer_dims.back() != 1)
    throw std::invalid_argument("deepnet: output dimension must be 1");
}

struct ForwardPass {
  std::vector<Eigen::MatrixXd> activations;  // x^0 .. x^L
  std::vector<Eigen::MatrixXd> masks;        // hidden layers 1 .. L-1
  Eigen::VectorXd output;
};

ForwardPass run_forward(const DeepNet& net, const Eigen::MatrixXd& inputs) {
  const Eigen::Index depth = net.depth();
  ForwardPass pass;
  pass.activations.reserve(depth + 1);
  pass.activations.push_back(inputs);
  for (Eigen::Index k = 0; k < depth; ++k) {
    Eigen::MatrixXd z = pass.activations.back() * net.weights[k];
    if (k + 1 < depth) {
      // Derivative mask; relu'(0) = 0.
      pass.masks.push_back((z.array() > 0.0).cast<double>());
      pass.activations.push_back(z.cwiseMax(0.0));
    } else {
      pass.activations.push_back(std::move(z));
    }
  }
  pass.output = pass.activations.back().col(0);
  return pass;
}

}  // namespace

DeepNet init_deep(const std::vector<Eigen::Index>& layer_dims, double scale,
                  std::uint64_t seed) {
  if (layer_dims.size() < 3)
    throw std::invalid_argument("init_deep: need input, hidden, output dims");
  for (Eigen::Index dim : layer_dims)
    if (dim < 1) throw std::invalid_argument("init_deep: dims must be positive");
  if (layer_dims.back() != 1)
    throw std::invalid_argument("init_deep: output dimension must be 1");
  if (scale < 0.0) throw std::invalid_argument("init_deep: scale must be >= 0");

  SplitRng root(seed);
  DeepNet net;
  net.layer_dims = layer_dims;
  net.init_kind = InitKind::kRandomGaussian;
  for (std::size_t k = 0; k + 1 < layer_dims.size(); ++k) {
    SplitRng layer_rng = root.split(k);
    net.weights.push_back(scale *
                          layer_rng.normal_matrix(layer_dims[k], layer_dims[k + 1]));
  }
  net.init_snapshot = net.weights;
  return net;
}

DeepNet deep_from_weights(std::vector<Eigen::MatrixXd> weights,
                          const std::string& run_id) {
  if (weights.size() < 2)
    throw std::invalid_argument("deep_from_weights: need at least 2 layers");
  DeepNet net;
  net.layer_dims.push_back(weights.front().rows());
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (k > 0 && weights[k].rows() != weights[k - 1].cols())
      throw std::invalid_argument("deep_from_weights: inconsistent layer dims");
    net.layer_dims.push_back(weights[k].cols());
  }
  if (net.layer_dims.back() != 1)
    throw std::invalid_argument("deep_from_weights: output dimension must be 1");
  net.weights = std::move(weights);
  net.init_snapshot = net.weights;
  net.init_kind = InitKind::kPretrained;
  net.init_run_id = run_id;
  return net;
}

Eigen::VectorXd forward_deep(const DeepNet& net, const Eigen::MatrixXd& inputs) {
  check_net(net);
  check_dims(net, inputs);
  return run_forward(net, inputs).output;
}

BackpropResult forward_backward(const DeepNet& net, const Eigen::MatrixXd& inputs,
                                const Eigen::VectorXd& labels) {
  check_net(net);
  check_dims(net, inputs);
  if (labels.size() != inputs.rows())
    throw std::invalid_argument("deepnet: label count mismatch");

  const Eigen::Index depth = net.depth();
  ForwardPass pass = run_forward(net, inputs);

  BackpropResult result;
  result.output = pass.output;
  const Eigen::VectorXd residual = pass.output - labels;
  result.loss = 0.5 * residual.squaredNorm();

  result.weight_grads.resize(depth);
  result.activation_grads.resize(depth + 1);
  result.activation_grads[depth] = residual;

  Eigen::MatrixXd delta = residual;  // dL/dz at the current layer
  for (Eigen::Index k = depth - 1; k >= 0; --k) {
    result.weight_grads[k].noalias() =
        pass.activations[k].transpose() * delta;
    Eigen::MatrixXd upstream = delta * net.weights[k].transpose();
    result.activation_grads[k] = upstream;
    if (k > 0) delta = upstream.cwiseProduct(pass.masks[k - 1]);
  }
  result.masks = std::move(pass.masks);
  return result;
}

std::pair<DeepNet, TrainTrace> train_deep(const DeepNet& net,
                                          const tasks::TaskDataset& task,
                                          const TrainConfig& cfg,
                                          DeviationRef ref) {
  check_net(net);
  check_dims(net, task.inputs);
  if (cfg.steps < 0) throw std::invalid_argument("train_deep: steps must be >= 0");
  if (!(cfg.eta >= 0.0) || !std::isfinite(cfg.eta))
    throw std::invalid_argument("train_deep: eta must be finite and >= 0");
  if (cfg.record_every < 1)
    throw std::invalid_argument("train_deep: record_every must be >= 1");

  DeepNet out = net;
  const double inv_sqrt_n = 1.0 / std::sqrt(double(task.n()));
  const std::vector<Eigen::MatrixXd>& ref_weights =
      (ref == DeviationRef::kInit) ? net.init_snapshot : net.weights;
  std::vector<Eigen::MatrixXd> ref_masks;
  {
    DeepNet ref_net = net;
    ref_net.weights = ref_weights;
    ref_masks = run_forward(ref_net, task.inputs).masks;
  }

  auto deviation = [&](const DeepNet& cur) {
    double sum = 0.0;  // per-layer sum of Frobenius deviations
    for (Eigen::Index k = 0; k < cur.depth(); ++k)
      sum += (cur.weights[k] - ref_weights[k]).norm();
    return inv_sqrt_n * sum;
  };
  auto flips = [&](const std::vector<Eigen::MatrixXd>& masks) {
    double diff = 0.0, total = 0.0;
    for (std::size_t k = 0; k < masks.size(); ++k) {
      diff += (masks[k] - ref_masks[k]).cwiseAbs().sum();
      total += static_cast<double>(masks[k].size());
    }
    return total > 0.0 ? diff / total : 0.0;
  };

  TrainTrace trace;
  trace.ref = ref;
  double initial_residual = -1.0;
  int k = 0;
  while (true) {
    BackpropResult bp = forward_backward(out, task.inputs, task.labels);
    const double res_norm = (bp.output - task.labels).norm();
    if (k == 0) initial_residual = res_norm;
    if (res_norm > 1e3 * std::max(initial_residual, 1e-300)) {
      std::ostringstream msg;
      msg << "train_deep: diverged at step " << k << " (residual " << res_norm
          << ")";
      throw std::runtime_error(msg.str());
    }

    const bool stopping =
        (k >= cfg.steps) ||
        (cfg.stop_residual > 0.0 && res_norm <= cfg.stop_residual);
    if (stopping || k % cfg.record_every == 0) {
      double grad_sq = 0.0;
      for (const auto& g : bp.weight_grads) grad_sq += g.squaredNorm();
      trace.step.push_back(k);
      trace.loss.push_back(bp.loss);
      trace.residual_norm.push_back(res_norm);
      trace.weight_deviation.push_back(deviation(out));
      trace.grad_fro_norm.push_back(std::sqrt(grad_sq));
      trace.flip_fraction.push_back(flips(bp.masks));
      if (stopping) break;
    }
    for (Eigen::Index l = 0; l < out.depth(); ++l)
      out.weights[l].noalias() -= cfg.eta * bp.weight_grads[l];
    ++k;
  }
  return {std::move(out), std::move(trace)};
}

double LayerGradReport::geometric_mean_ratio() const {
  if (scaling_ratio.empty()) return 0.0;
  double log_sum = 0.0;
  for (double r : scaling_ratio) log_sum += std::log(std::max(r, 1e-300));
  return std::exp(log_sum / static_cast<double>(scaling_ratio.size()));
}

LayerGradReport layer_grad_scale(const DeepNet& net, const Eigen::MatrixXd& inputs,
                                 const Eigen::VectorXd& labels) {
  BackpropResult bp = forward_backward(net, inputs, labels);
  LayerGradReport report;
  const Eigen::Index depth = net.depth();
  for (Eigen::Index k = 1; k <= depth; ++k) {
    report.grad_fro_norm.push_back(bp.weight_grads[k - 1].norm());
    const double up = bp.activation_grads[k - 1].norm();
    const double down = bp.activation_grads[k].norm();
    report.activation_grad_norm.push_back(down);
    report.scaling_ratio.push_back(down > 0.0 ? up / down : 0.0);
  }
  return report;
}

}  // namespace xferlab::deepnet

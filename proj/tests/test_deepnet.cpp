#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "xferlab/dataset.hpp"
#include "xferlab/deepnet.hpp"
#include "xferlab/probe.hpp"
#include "xferlab/rng.hpp"
#include "xferlab/shallow.hpp"

using namespace xferlab;
using tasks::LabelFnSpec;
using tasks::TaskDataset;

namespace {

TaskDataset small_task(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Eigen::VectorXd w = SplitRng(seed).split(7).unit_vector(d);
  return tasks::gen_task(n, d, LabelFnSpec::linear_teacher(w), seed);
}

}  // namespace

TEST_CASE("init_deep: zero scale, checkpoint identity, norm concentration") {
  const std::vector<Eigen::Index> dims = {4, 8, 8, 1};
  deepnet::DeepNet zero = deepnet::init_deep(dims, 0.0, 3);
  const Eigen::MatrixXd x = small_task(5, 4, 9).inputs;
  CHECK(deepnet::forward_deep(zero, x).norm() == 0.0);

  deepnet::DeepNet net = deepnet::init_deep(dims, 0.3, 5);
  deepnet::DeepNet copy = deepnet::deep_from_weights(net.weights, "run-1");
  for (Eigen::Index k = 0; k < net.depth(); ++k)
    CHECK(copy.weights[k] == net.weights[k]);
  CHECK(copy.init_kind == deepnet::InitKind::kPretrained);
  CHECK(copy.init_run_id == "run-1");

  // ||W||_F ~ scale sqrt(d_in d_out) within 20% for a reasonably big layer.
  deepnet::DeepNet wide = deepnet::init_deep({64, 128, 1}, 0.05, 7);
  const double expected = 0.05 * std::sqrt(64.0 * 128.0);
  CHECK(wide.weights[0].norm() == doctest::Approx(expected).epsilon(0.2));
}

TEST_CASE("init_deep: validation") {
  CHECK_THROWS_AS(deepnet::init_deep({4, 8}, 0.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(deepnet::init_deep({4, 8, 2}, 0.1, 1), std::invalid_argument);
  CHECK_THROWS_AS(deepnet::init_deep({4, 8, 1}, -0.1, 1), std::invalid_argument);
}

TEST_CASE("forward_backward: dead network") {
  const TaskDataset task = small_task(6, 4, 11);
  deepnet::DeepNet net = deepnet::init_deep({4, 8, 8, 1}, 0.0, 13);
  const deepnet::BackpropResult bp =
      deepnet::forward_backward(net, task.inputs, task.labels);
  CHECK(bp.loss == doctest::Approx(0.5 * task.labels.squaredNorm()));
  for (const auto& g : bp.weight_grads) CHECK(g.norm() == 0.0);
}

TEST_CASE("forward_backward: finite differences on every layer") {
  const TaskDataset task = small_task(7, 5, 17);
  deepnet::DeepNet net = deepnet::init_deep({5, 10, 6, 1}, 0.6, 19);
  probe::DeepModel model(net);
  const Eigen::VectorXd theta = model.flat_params();
  auto loss_at = [&](const Eigen::VectorXd& p) {
    model.set_flat_params(p);
    const double value = model.batch_loss(task.inputs, task.labels);
    return value;
  };
  const Eigen::VectorXd fd = oracles::fd_gradient(loss_at, theta, 1e-6);
  model.set_flat_params(theta);
  const Eigen::VectorXd analytic = model.flat_grad(task.inputs, task.labels);
  CHECK((analytic - fd).norm() <= 1e-5 * std::max(1.0, fd.norm()));
}

TEST_CASE("forward_backward: transport identity at every layer") {
  const TaskDataset task = small_task(6, 5, 23);
  deepnet::DeepNet net = deepnet::init_deep({5, 9, 7, 4, 1}, 0.5, 29);
  const deepnet::BackpropResult bp =
      deepnet::forward_backward(net, task.inputs, task.labels);
  // dL/dx^{k-1} = (mask_k o dL/dz^k) W_k^T, recomputed from returned pieces.
  const Eigen::Index depth = net.depth();
  for (Eigen::Index k = depth; k >= 1; --k) {
    Eigen::MatrixXd dz = bp.activation_grads[k];
    if (k < depth) dz = dz.cwiseProduct(bp.masks[k - 1]);
    const Eigen::MatrixXd expected = dz * net.weights[k - 1].transpose();
    CHECK((expected - bp.activation_grads[k - 1]).cwiseAbs().maxCoeff() <=
          1e-12);
  }
}

TEST_CASE("train_deep: eta = 0 unchanged; line-search makes loss non-increasing") {
  const TaskDataset task = small_task(10, 5, 31);
  deepnet::DeepNet net = deepnet::init_deep({5, 12, 12, 1}, 0.4, 37);
  TrainConfig frozen;
  frozen.eta = 0.0;
  frozen.steps = 5;
  auto [same, flat_trace] =
      deepnet::train_deep(net, task, frozen, DeviationRef::kInit);
  for (Eigen::Index k = 0; k < net.depth(); ++k)
    CHECK(same.weights[k] == net.weights[k]);

  // Halve eta until the recorded losses never increase; report must succeed
  // for some eta (line-search oracle).
  double eta = 0.5;
  bool found = false;
  for (int attempt = 0; attempt < 12 && !found; ++attempt, eta *= 0.5) {
    TrainConfig cfg;
    cfg.eta = eta;
    cfg.steps = 60;
    try {
      auto [out, trace] = deepnet::train_deep(net, task, cfg, DeviationRef::kInit);
      bool monotone = true;
      for (std::size_t i = 1; i < trace.size(); ++i)
        monotone = monotone && trace.loss[i] <= trace.loss[i - 1] + 1e-12;
      found = monotone;
    } catch (const std::runtime_error&) {
      // divergence guard; keep halving
    }
  }
  CHECK(found);

  // Deterministic given the seed/config.
  TrainConfig cfg;
  cfg.eta = 0.05;
  cfg.steps = 40;
  auto [a, ta] = deepnet::train_deep(net, task, cfg, DeviationRef::kInit);
  auto [b, tb] = deepnet::train_deep(net, task, cfg, DeviationRef::kInit);
  for (Eigen::Index k = 0; k < a.depth(); ++k) CHECK(a.weights[k] == b.weights[k]);
  CHECK(ta.loss == tb.loss);
}

TEST_CASE("layer_grad_scale: two-layer reduction matches the shallow identity") {
  const TaskDataset task = small_task(8, 5, 41);
  shallow::ShallowNet snet = shallow::init_net(5, 32, 0.7, 43);
  // Absorb the sign vector into the last layer: W2 = a / sqrt(m).
  deepnet::DeepNet dnet = deepnet::deep_from_weights(
      {snet.W, snet.a / std::sqrt(double(snet.m))}, "from-shallow");
  const Eigen::VectorXd u_shallow = shallow::forward(snet, task.inputs);
  const Eigen::VectorXd u_deep = deepnet::forward_deep(dnet, task.inputs);
  CHECK((u_shallow - u_deep).cwiseAbs().maxCoeff() <= 1e-12);

  const deepnet::LayerGradReport report =
      deepnet::layer_grad_scale(dnet, task.inputs, task.labels);
  REQUIRE(report.activation_grad_norm.size() == 2);
  const double res_sq = (u_deep - task.labels).squaredNorm();
  // ||dL/dx^1||^2 = ||u - y||^2 when the widths/scaling match.
  CHECK(report.activation_grad_norm[0] * report.activation_grad_norm[0] ==
        doctest::Approx(res_sq).epsilon(1e-12));
}

TEST_CASE("layer_grad_scale: zero input batch kills every gradient") {
  deepnet::DeepNet net = deepnet::init_deep({4, 6, 6, 1}, 0.5, 47);
  Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(3, 4);
  Eigen::VectorXd y = Eigen::VectorXd::Ones(3);
  const deepnet::BackpropResult bp = deepnet::forward_backward(net, zeros, y);
  for (const auto& g : bp.weight_grads) CHECK(g.norm() == 0.0);
  for (Eigen::Index k = 0; k + 1 <= net.depth() - 1; ++k)
    CHECK(bp.activation_grads[k].norm() == 0.0);
  const deepnet::LayerGradReport report = deepnet::layer_grad_scale(net, zeros, y);
  for (double g : report.grad_fro_norm) CHECK(g == 0.0);
}

TEST_CASE("layer_grad_scale: report shape and ratios") {
  const TaskDataset task = small_task(9, 6, 53);
  deepnet::DeepNet net = deepnet::init_deep({6, 16, 16, 16, 1}, 0.4, 59);
  const deepnet::LayerGradReport report =
      deepnet::layer_grad_scale(net, task.inputs, task.labels);
  CHECK(report.grad_fro_norm.size() == 4);
  CHECK(report.activation_grad_norm.size() == 4);
  CHECK(report.scaling_ratio.size() == 4);
  for (double r : report.scaling_ratio) CHECK(r >= 0.0);
  CHECK(report.geometric_mean_ratio() > 0.0);
}

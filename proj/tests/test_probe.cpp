#include <doctest.h>

#include <array>
#include <cmath>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "oracles.hpp"
#include "xferlab/dataset.hpp"
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

TEST_CASE("landscape_grid: G = 1 is the center point; model restored bitwise") {
  const TaskDataset task = small_task(8, 4, 3);
  shallow::ShallowNet net = shallow::init_net(4, 16, 0.5, 5);
  const Eigen::MatrixXd before = net.W;
  probe::ShallowModel model(net);
  const probe::LandscapeGrid grid = probe::landscape_grid(
      model, 0, 1, 0.1, task.inputs, task.labels, 11);
  CHECK(grid.grid.rows() == 1);
  CHECK(grid.grid(0, 0) == grid.center_loss);
  CHECK(net.W == before);  // bitwise restore
}

TEST_CASE("landscape_grid: center of an even grid equals the current loss") {
  const TaskDataset task = small_task(6, 4, 7);
  shallow::ShallowNet net = shallow::init_net(4, 8, 0.5, 9);
  const Eigen::MatrixXd before = net.W;
  probe::ShallowModel model(net);
  const probe::LandscapeGrid grid = probe::landscape_grid(
      model, 0, 8, 0.05, task.inputs, task.labels, 13);
  CHECK(std::abs(grid.grid(4, 4) - grid.center_loss) <= 1e-10);
  CHECK(net.W == before);
  // Raw directions orthogonal before scaling.
  const double cosine = std::abs(grid.direction1.dot(grid.direction2));
  CHECK(cosine <= 1e-8 * grid.direction1.norm() * grid.direction2.norm());
}

TEST_CASE("landscape_grid: quadratic model matches the analytic parabola") {
  // 1-parameter quadratic: loss(theta) = 0.5 * h * theta^2. Along direction d
  // from center theta0, loss(theta0 + alpha * s * d) is an exact parabola.
  Eigen::MatrixXd hess(1, 1);
  hess << 3.0;
  Eigen::VectorXd theta(1);
  theta << 0.7;
  probe::QuadraticModel model(hess, theta);
  const double step = 0.2;
  const Eigen::MatrixXd dummy_x = Eigen::MatrixXd::Zero(1, 2);
  const Eigen::VectorXd dummy_y = Eigen::VectorXd::Zero(1);
  const probe::LandscapeGrid grid =
      probe::landscape_grid(model, 0, 5, step, dummy_x, dummy_y, 17);
  // Scaled direction applied to the single parameter: d_scaled = |theta|.
  // Collect the losses along direction 1 at beta = 0 (column j = 2).
  for (int i = 0; i < 5; ++i) {
    const double alpha = step * (i - 2);
    // direction1 scaled per-neuron: sign unknown, magnitude |theta0|.
    const double offset = alpha * 0.7;
    const double expected_pos = 0.5 * 3.0 * (0.7 + offset) * (0.7 + offset);
    const double expected_neg = 0.5 * 3.0 * (0.7 - offset) * (0.7 - offset);
    const double got = grid.grid(i, 2);
    const bool matches = std::abs(got - expected_pos) <= 1e-12 ||
                         std::abs(got - expected_neg) <= 1e-12;
    CHECK(matches);
  }
}

TEST_CASE("landscape_grid: empty batch rejected") {
  shallow::ShallowNet net = shallow::init_net(3, 4, 0.5, 25);
  probe::ShallowModel model(net);
  CHECK_THROWS_AS(probe::landscape_grid(model, 0, 3, 0.1, Eigen::MatrixXd(),
                                        Eigen::VectorXd(), 1),
                  std::invalid_argument);
}

TEST_CASE("landscape_grid: zero-norm neuron falls back to global scaling") {
  const TaskDataset task = small_task(5, 3, 19);
  shallow::ShallowNet net = shallow::init_net(3, 4, 0.5, 21);
  net.W.col(1).setZero();  // dead neuron
  probe::ShallowModel model(net);
  const probe::LandscapeGrid grid = probe::landscape_grid(
      model, 0, 3, 0.1, task.inputs, task.labels, 23);
  CHECK(grid.used_global_fallback);
}

TEST_CASE("loss_variation_along_gradient: zero gradient and quadratic oracle") {
  // Perfectly fit teacher: residual 0 -> gradient 0 -> variation 0.
  const TaskDataset task = small_task(6, 4, 29);
  shallow::ShallowNet net = shallow::init_net(4, 512, 1e-2, 31);
  TaskDataset fitted = task;
  fitted.labels = shallow::forward(net, task.inputs);
  TrainConfig cfg;
  cfg.eta = 0.0;
  cfg.steps = 2;
  const probe::GradVariationSeries series =
      probe::loss_variation_along_gradient(net, fitted, cfg, 8);
  for (double v : series.variation) CHECK(v <= 1e-30);

  // Exactly dead net on zero labels: gradient identically zero.
  shallow::ShallowNet dead = shallow::init_net(3, 4, 1.0, 99);
  Eigen::MatrixXd x_dead(1, 3);
  x_dead << 1.0, 0.0, 0.0;
  dead.W.row(0).setConstant(-1.0);
  dead.W.row(1).setZero();
  dead.W.row(2).setZero();
  TaskDataset zero_task;
  zero_task.inputs = x_dead;
  zero_task.labels = Eigen::VectorXd::Zero(1);
  const probe::GradVariationSeries exact =
      probe::loss_variation_along_gradient(dead, zero_task, cfg, 8);
  for (double v : exact.variation) CHECK(v == 0.0);

  // Pretrained-vs-scratch arms: the probe runs and stays finite; the
  // directional claim is exercised in the acceptance suite.
  TrainConfig live;
  live.eta = 0.3;
  live.steps = 20;
  live.record_every = 5;
  const probe::GradVariationSeries moving =
      probe::loss_variation_along_gradient(net, task, live, 6);
  CHECK(moving.step.size() >= 4);
  for (double v : moving.variation) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0);
  }
}

TEST_CASE("loss_variation_along_gradient: flip-free segment matches the quadratic form") {
  // Within a fixed activation pattern the loss is exactly quadratic in W, so
  // the probed loss change at displacement -c g has the closed form
  // -c r^T H r + (c^2/2) ||H r||^2 with H the empirical kernel (Z^T Z).
  const TaskDataset base = small_task(6, 4, 71);
  shallow::ShallowNet net = shallow::init_net(4, 64, 0.5, 73);
  const Eigen::VectorXd u = shallow::forward(net, base.inputs);
  TaskDataset task = base;
  task.labels = u - 1e-3 * SplitRng(79).normal_vector(6);  // small residual

  // No activation flips over the probed segment [W, W - g].
  const Eigen::MatrixXd grad = shallow::grad_w(net, task.inputs, task.labels);
  shallow::ShallowNet displaced = net;
  displaced.W -= grad;
  REQUIRE(shallow::activation_flip_fraction(displaced, net, task.inputs) == 0.0);

  const Eigen::VectorXd residual = u - task.labels;
  const Eigen::MatrixXd kernel =
      ntk::gram_empirical(net.W, task.inputs, task.inputs).values;
  const Eigen::VectorXd hr = kernel * residual;
  const int probe_steps = 7;
  double analytic_max = 0.0;
  for (int j = 1; j <= probe_steps; ++j) {
    const double c = static_cast<double>(j) / probe_steps;
    analytic_max = std::max(
        analytic_max,
        std::abs(-c * residual.dot(hr) + 0.5 * c * c * hr.squaredNorm()));
  }

  TrainConfig cfg;
  cfg.eta = 0.0;
  cfg.steps = 1;
  const probe::GradVariationSeries series =
      probe::loss_variation_along_gradient(net, task, cfg, probe_steps);
  REQUIRE(!series.variation.empty());
  CHECK(series.variation.front() ==
        doctest::Approx(analytic_max).epsilon(1e-9));
}

TEST_CASE("hessian_topk: analytic diag(3,1) quadratic") {
  Eigen::MatrixXd hess(2, 2);
  hess << 3.0, 0.0, 0.0, 1.0;
  Eigen::VectorXd theta(2);
  theta << 0.4, -0.9;
  probe::QuadraticModel model(hess, theta);
  const probe::HessianSpectrum spectrum = probe::hessian_topk(
      model, Eigen::MatrixXd(), Eigen::VectorXd(), 2, 1e-8, 10000, 5);
  REQUIRE(spectrum.eigenvalues.size() == 2);
  CHECK(spectrum.eigenvalues[0] == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(spectrum.eigenvalues[1] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(spectrum.converged[0]);
  CHECK(spectrum.converged[1]);
  CHECK(model.flat_params() == theta);  // restored
}

TEST_CASE("hessian_topk: tiny ReLU net against the dense oracle") {
  const TaskDataset task = small_task(6, 3, 37);
  shallow::ShallowNet net = shallow::init_net(3, 10, 0.8, 41);  // 30 params
  // Push the net off its kinks so the piecewise-quadratic region is smooth.
  REQUIRE((task.inputs * net.W).cwiseAbs().minCoeff() > 1e-3);
  probe::ShallowModel model(net);

  const probe::HessianSpectrum spectrum = probe::hessian_topk(
      model, task.inputs, task.labels, 3, 1e-7, 20000, 7);

  const Eigen::VectorXd theta = model.flat_params();
  auto grad_at = [&](const Eigen::VectorXd& p) {
    model.set_flat_params(p);
    Eigen::VectorXd g = model.flat_grad(task.inputs, task.labels);
    model.set_flat_params(theta);
    return g;
  };
  const Eigen::MatrixXd dense =
      oracles::fd_hessian(grad_at, theta, 1e-5);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(dense);
  const Eigen::VectorXd all = eig.eigenvalues();  // ascending
  for (int i = 0; i < 3; ++i) {
    const double expected = all[all.size() - 1 - i];
    CHECK(std::abs(spectrum.eigenvalues[i] - expected) <=
          1e-4 * std::max(1.0, std::abs(expected)));
  }
}

TEST_CASE("hessian_topk: preconditions") {
  Eigen::MatrixXd hess = Eigen::MatrixXd::Identity(2, 2);
  Eigen::VectorXd theta = Eigen::VectorXd::Ones(2);
  probe::QuadraticModel model(hess, theta);
  CHECK_THROWS_AS(probe::hessian_topk(model, Eigen::MatrixXd(),
                                      Eigen::VectorXd(), 3),
                  std::invalid_argument);
}

TEST_CASE("grad_svd_projection: zero weight, rank-1 construction, oracle") {
  const TaskDataset task = small_task(7, 4, 43);
  shallow::ShallowNet net = shallow::init_net(4, 6, 0.5, 47);

  // W = 0 gives zero projections (gradient may be nonzero only through
  // active units; with W = 0 every unit is dead, so the gradient vanishes
  // and the projection list is empty with the zero flag).
  shallow::ShallowNet dead = net;
  dead.W.setZero();
  probe::ShallowModel dead_model(dead);
  const probe::SvdProjection empty =
      probe::grad_svd_projection(dead_model, 0, task.inputs, task.labels);
  CHECK(empty.zero_gradient);
  CHECK(empty.projections.empty());

  // Rank-1 construction on the quadratic model: gradient = H theta.
  {
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(3, 3);
    hess(0, 0) = 1.0;  // gradient = e1 * theta_0
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.0, 0.0;  // W = e1 (as a 3x1 layer)
    probe::QuadraticModel quad(hess, theta);
    const probe::SvdProjection rank1 = probe::grad_svd_projection(
        quad, 0, Eigen::MatrixXd(), Eigen::VectorXd());
    REQUIRE(rank1.singular_values.size() == 1);
    CHECK(rank1.singular_values[0] == doctest::Approx(1.0));
    CHECK(rank1.projections[0] == doctest::Approx(1.0));  // ||W^T u1|| = 1
  }

  // Random instance against the hand-rolled one-sided Jacobi SVD.
  probe::ShallowModel model(net);
  const probe::SvdProjection got =
      probe::grad_svd_projection(model, 0, task.inputs, task.labels);
  const Eigen::MatrixXd grad = shallow::grad_w(net, task.inputs, task.labels);
  // Jacobi oracle needs rows >= cols; run on the transpose and use V as U.
  const bool transpose = grad.rows() < grad.cols();
  const Eigen::MatrixXd for_svd = transpose ? grad.transpose() : grad;
  const oracles::JacobiSvd svd = oracles::one_sided_jacobi_svd(for_svd);
  // Compare sigma_i and ||W^T u_i|| for the leading triplets.
  const Eigen::Index count =
      std::min<Eigen::Index>(got.singular_values.size(), svd.sigma.size());
  for (Eigen::Index i = 0; i < count; ++i) {
    CHECK(std::abs(got.singular_values[i] - svd.sigma[i]) <= 1e-10);
    if (!transpose) {
      const double proj = (net.W.transpose() * svd.u.col(i)).norm();
      CHECK(std::abs(got.projections[i] - proj) <= 1e-10);
    }
  }

  // Recomposition sanity: <W, G> = sum_i sigma_i u_i^T W v_i.
  Eigen::JacobiSVD<Eigen::MatrixXd> full(grad,
                                         Eigen::ComputeThinU | Eigen::ComputeThinV);
  double recomposed = 0.0;
  for (Eigen::Index i = 0; i < full.singularValues().size(); ++i)
    recomposed += full.singularValues()[i] *
                  full.matrixU().col(i).dot(net.W * full.matrixV().col(i));
  CHECK(std::abs(recomposed - (net.W.array() * grad.array()).sum()) <= 1e-8);
}

TEST_CASE("weight_deviation_series: reference, single-entry, trained run") {
  probe::WeightList ref = {Eigen::MatrixXd::Zero(3, 3)};
  CHECK(probe::weight_deviation_series({ref}, ref, 4) ==
        std::vector<double>{0.0});

  probe::WeightList bumped = ref;
  bumped[0](1, 2) = 0.5;
  const auto series = probe::weight_deviation_series({ref, bumped}, ref, 4);
  CHECK(series[1] == doctest::Approx(0.5 / 2.0));  // delta / sqrt(n)

  // Trained-run series non-decreasing over >= 95% of steps.
  const TaskDataset task = small_task(10, 5, 53);
  shallow::ShallowNet net = shallow::init_net(5, 256, 1e-2, 59);
  TrainConfig cfg;
  cfg.eta = 0.5;
  cfg.steps = 120;
  cfg.record_every = 1;
  auto [trained, trace] = shallow::train_gd(net, task, cfg, DeviationRef::kInit);
  int ok = 0;
  for (std::size_t i = 1; i < trace.size(); ++i)
    if (trace.weight_deviation[i] >= trace.weight_deviation[i - 1]) ++ok;
  CHECK(ok >= static_cast<int>(0.95 * static_cast<double>(trace.size() - 1)));

  CHECK_THROWS_AS(
      probe::weight_deviation_series({{Eigen::MatrixXd::Zero(2, 2)}}, ref, 4),
      std::invalid_argument);
}

TEST_CASE("checkpoint_distance_matrix: duplicates, direct norm, metric") {
  SplitRng rng(61);
  probe::WeightList a = {rng.normal_matrix(4, 3)};
  probe::WeightList b = {rng.normal_matrix(4, 3)};
  const probe::DistanceMatrix dup =
      probe::checkpoint_distance_matrix({"x", "y"}, {a, a});
  CHECK(dup.values(0, 1) == 0.0);

  const probe::DistanceMatrix two =
      probe::checkpoint_distance_matrix({"a", "b"}, {a, b});
  CHECK(two.values(0, 1) == doctest::Approx((a[0] - b[0]).norm()));
  CHECK(two.values(1, 0) == two.values(0, 1));
  CHECK(probe::distance_matrix_is_metric(two));

  probe::WeightList c = {rng.normal_matrix(4, 3)};
  const probe::DistanceMatrix three =
      probe::checkpoint_distance_matrix({"a", "b", "c"}, {a, b, c});
  CHECK(probe::distance_matrix_is_metric(three));
}

TEST_CASE("checkpoint clustering: fine-tunes stay near the shared start") {
  // One pretrained net fine-tuned to three similar targets, plus one scratch
  // net: the fine-tuned cluster should be mutually closer than any member is
  // to the scratch arm, for most seeds. Desk-scale version with 3 seeds.
  int clustered = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    tasks::TaskPairSpec spec;
    spec.n_source = 12;
    spec.n_target = 12;
    spec.d = 6;
    spec.input_overlap = 1.0;
    Eigen::VectorXd w = SplitRng(67).unit_vector(6);
    spec.source_labels = LabelFnSpec::linear_teacher(w);
    spec.target_labels = spec.source_labels;
    spec.seed = 71 + seed;
    auto [source, t0] = tasks::make_task_pair(spec);
    tasks::TaskPairSpec alt1 = spec;
    alt1.seed = spec.seed + 1000;
    tasks::TaskPairSpec alt2 = spec;
    alt2.seed = spec.seed + 2000;
    const TaskDataset t1 = tasks::make_task_pair(alt1).second;
    const TaskDataset t2 = tasks::make_task_pair(alt2).second;

    TrainConfig cfg;
    cfg.eta = 0.5;
    cfg.steps = 1500;
    cfg.stop_residual = 1e-4;
    cfg.record_every = 1 << 20;
    shallow::ShallowNet base = shallow::init_net(6, 1 << 11, 1e-2, seed);
    auto [pretrained, pre_trace] =
        shallow::train_gd(base, source, cfg, DeviationRef::kInit);

    std::vector<probe::WeightList> checkpoints;
    std::vector<std::string> labels;
    const std::array<const TaskDataset*, 3> targets = {&t0, &t1, &t2};
    for (const TaskDataset* target : targets) {
      auto [tuned, trace] =
          shallow::train_gd(pretrained, *target, cfg, DeviationRef::kStart);
      checkpoints.push_back({tuned.W});
      labels.push_back("ft" + std::to_string(labels.size()));
    }
    shallow::ShallowNet scratch_init =
        shallow::init_net(6, 1 << 11, 1e-2, seed + 500);
    auto [scratch, strace] =
        shallow::train_gd(scratch_init, t0, cfg, DeviationRef::kInit);
    checkpoints.push_back({scratch.W});
    labels.push_back("scratch");

    const probe::DistanceMatrix dist =
        probe::checkpoint_distance_matrix(labels, checkpoints);
    double intra = 0.0, cross = 1e300;
    for (int i = 0; i < 3; ++i) {
      for (int j = i + 1; j < 3; ++j) intra = std::max(intra, dist.values(i, j));
      cross = std::min(cross, dist.values(i, 3));
    }
    if (intra < cross) ++clustered;
  }
  CHECK(clustered >= 2);
}

#include "xferlab/shallow.hpp"

#include <cassert>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <Eigen/Eigenvalues>

#include "xferlab/rng.hpp"
#include "xferlab/stats.hpp"

namespace xferlab::shallow {

namespace {

constexpr std::uint64_t kWeightStream = 0;
constexpr std::uint64_t kSignStream = 1;
constexpr double kDivergenceFactor = 1e3;

void check_dims(const ShallowNet& net, const Eigen::MatrixXd& inputs) {
  if (inputs.cols() != net.d)
    throw std::invalid_argument("shallow: input dimension mismatch");
}

void check_labels(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& labels) {
  if (labels.size() != inputs.rows())
    throw std::invalid_argument("shallow: label count mismatch");
}

struct ForwardState {
  Eigen::MatrixXd preact;  // n x m, X * W
  Eigen::MatrixXd mask;    // derivative mask 1{preact > 0}; relu'(0) = 0
  Eigen::VectorXd output;
};

ForwardState forward_state(const ShallowNet& net, const Eigen::MatrixXd& inputs) {
  ForwardState s;
  s.preact.noalias() = inputs * net.W;
  s.mask = (s.preact.array() > 0.0).cast<double>();
  s.output = (s.preact.cwiseMax(0.0) * net.a) / std::sqrt(double(net.m));
  return s;
}

Eigen::MatrixXd grad_from_state(const ShallowNet& net,
                                const Eigen::MatrixXd& inputs,
                                const ForwardState& state,
                                const Eigen::VectorXd& residual) {
  // d/dw_r L = (1/sqrt(m)) a_r sum_i residual_i mask_ri x_i
  const Eigen::MatrixXd weighted =
      (residual * net.a.transpose()).cwiseProduct(state.mask);
  return (inputs.transpose() * weighted) / std::sqrt(double(net.m));
}

double mask_flip_fraction(const Eigen::MatrixXd& mask_a,
                          const Eigen::MatrixXd& mask_b) {
  return (mask_a - mask_b).cwiseAbs().sum() /
         static_cast<double>(mask_a.size());
}

TrainConfig stopped_at(const TrainConfig& cfg, int steps) {
  TrainConfig out = cfg;
  out.steps = steps;
  return out;
}

}  // namespace

ShallowNet init_net(Eigen::Index d, Eigen::Index m, double kappa,
                    std::uint64_t seed) {
  if (d < 2) throw std::invalid_argument("init_net: d must be >= 2");
  if (m < 1) throw std::invalid_argument("init_net: m must be >= 1");
  if (!(kappa > 0.0)) throw std::invalid_argument("init_net: kappa must be > 0");
  SplitRng root(seed);
  ShallowNet net;
  net.d = d;
  net.m = m;
  net.kappa = kappa;
  net.W = kappa * root.split(kWeightStream).normal_matrix(d, m);
  SplitRng sign_rng = root.split(kSignStream);
  net.a.resize(m);
  for (Eigen::Index r = 0; r < m; ++r) net.a[r] = sign_rng.sign();
  net.W_init = net.W;
  return net;
}

Eigen::VectorXd forward(const ShallowNet& net, const Eigen::MatrixXd& inputs) {
  check_dims(net, inputs);
  return ((inputs * net.W).cwiseMax(0.0) * net.a) / std::sqrt(double(net.m));
}

double loss(const ShallowNet& net, const Eigen::MatrixXd& inputs,
            const Eigen::VectorXd& labels) {
  check_dims(net, inputs);
  check_labels(inputs, labels);
  return 0.5 * (forward(net, inputs) - labels).squaredNorm();
}

Eigen::MatrixXd grad_w(const ShallowNet& net, const Eigen::MatrixXd& inputs,
                       const Eigen::VectorXd& labels) {
  check_dims(net, inputs);
  check_labels(inputs, labels);
  const ForwardState state = forward_state(net, inputs);
  return grad_from_state(net, inputs, state, state.output - labels);
}

ActivationGrad grad_activations(const ShallowNet& net,
                                const Eigen::MatrixXd& inputs,
                                const Eigen::VectorXd& labels) {
  check_dims(net, inputs);
  check_labels(inputs, labels);
  const Eigen::VectorXd residual = forward(net, inputs) - labels;
  ActivationGrad grad;
  grad.per_sample =
      (net.a * residual.transpose()) / std::sqrt(double(net.m));
  // a^T a = m exactly, so the Frobenius norm collapses to the residual norm.
  grad.squared_norm = residual.squaredNorm();
  return grad;
}

Eigen::MatrixXd z_matrix(const ShallowNet& net, const Eigen::MatrixXd& inputs,
                         std::int64_t max_entries) {
  check_dims(net, inputs);
  const Eigen::Index n = inputs.rows();
  const std::int64_t entries =
      static_cast<std::int64_t>(net.m) * net.d * n;
  if (entries > max_entries) {
    std::ostringstream msg;
    msg << "z_matrix: " << entries << " entries exceed the budget of "
        << max_entries;
    throw std::length_error(msg.str());
  }
  const Eigen::MatrixXd mask =
      ((inputs * net.W).array() >= 0.0).cast<double>();  // n x m
  const double inv_sqrt_m = 1.0 / std::sqrt(double(net.m));
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(net.m * net.d, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index r = 0; r < net.m; ++r) {
      if (mask(i, r) != 0.0) {
        z.block(r * net.d, i, net.d, 1) =
            inv_sqrt_m * net.a[r] * inputs.row(i).transpose();
      }
    }
  }
  return z;
}

double activation_flip_fraction(const ShallowNet& net_now,
                                const ShallowNet& net_ref,
                                const Eigen::MatrixXd& inputs) {
  if (net_now.d != net_ref.d || net_now.m != net_ref.m)
    throw std::invalid_argument("activation_flip_fraction: shape mismatch");
  check_dims(net_now, inputs);
  const Eigen::MatrixXd mask_now =
      ((inputs * net_now.W).array() >= 0.0).cast<double>();
  const Eigen::MatrixXd mask_ref =
      ((inputs * net_ref.W).array() >= 0.0).cast<double>();
  return mask_flip_fraction(mask_now, mask_ref);
}

std::pair<ShallowNet, TrainTrace> train_gd(const ShallowNet& net,
                                           const tasks::TaskDataset& task,
                                           const TrainConfig& cfg,
                                           DeviationRef ref) {
  if (cfg.steps < 0) throw std::invalid_argument("train_gd: steps must be >= 0");
  if (!(cfg.eta >= 0.0) || !std::isfinite(cfg.eta))
    throw std::invalid_argument("train_gd: eta must be finite and >= 0");
  if (cfg.record_every < 1)
    throw std::invalid_argument("train_gd: record_every must be >= 1");
  check_dims(net, task.inputs);
  check_labels(task.inputs, task.labels);

  ShallowNet out = net;
  const Eigen::MatrixXd& inputs = task.inputs;
  const Eigen::VectorXd& labels = task.labels;
  const double inv_sqrt_n = 1.0 / std::sqrt(double(task.n()));
  const Eigen::MatrixXd& ref_w =
      (ref == DeviationRef::kInit) ? net.W_init : net.W;
  // Flips are tracked with the kernel indicator 1{w.x >= 0}.
  const Eigen::MatrixXd ref_mask =
      ((inputs * ref_w).array() >= 0.0).cast<double>();

  TrainTrace trace;
  trace.ref = ref;

  double initial_residual = -1.0;
  int k = 0;
  while (true) {
    const ForwardState state = forward_state(out, inputs);
    const Eigen::VectorXd residual = state.output - labels;
    const double res_norm = residual.norm();
    if (k == 0) initial_residual = res_norm;

    // Thm 1 proof identity ||dL/dX^1||^2 = ||u - y||^2, checked each step.
    assert(std::abs(out.a.squaredNorm() / double(out.m) - 1.0) == 0.0);

    if (res_norm > kDivergenceFactor * std::max(initial_residual, 1e-300)) {
      std::ostringstream msg;
      msg << "train_gd: diverged at step " << k << " (residual " << res_norm
          << " vs initial " << initial_residual << ")";
      throw std::runtime_error(msg.str());
    }

    const bool stopping =
        (k >= cfg.steps) ||
        (cfg.stop_residual > 0.0 && res_norm <= cfg.stop_residual);
    if (stopping || k % cfg.record_every == 0) {
      const Eigen::MatrixXd grad =
          grad_from_state(out, inputs, state, residual);
      trace.step.push_back(k);
      trace.loss.push_back(0.5 * residual.squaredNorm());
      trace.residual_norm.push_back(res_norm);
      trace.weight_deviation.push_back(inv_sqrt_n * (out.W - ref_w).norm());
      trace.grad_fro_norm.push_back(grad.norm());
      trace.flip_fraction.push_back(mask_flip_fraction(
          (state.preact.array() >= 0.0).cast<double>(), ref_mask));
      if (stopping) break;
      out.W.noalias() -= cfg.eta * grad;
    } else {
      out.W.noalias() -=
          cfg.eta * grad_from_state(out, inputs, state, residual);
    }
    ++k;
  }
  return {std::move(out), std::move(trace)};
}

double conservative_eta(double lambda_min, Eigen::Index n) {
  return lambda_min / (2.0 * static_cast<double>(n) * static_cast<double>(n));
}

double stable_eta(const ntk::GramMatrix& gram) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram.values,
                                                        Eigen::EigenvaluesOnly);
  const double lambda_max = solver.eigenvalues().maxCoeff();
  if (!(lambda_max > 0.0))
    throw std::invalid_argument("stable_eta: kernel has no positive eigenvalue");
  return 1.0 / lambda_max;
}

double default_kappa(double lambda_source, double delta, Eigen::Index n_source,
                     Eigen::Index n_target) {
  const double np = static_cast<double>(n_source);
  const double nq = static_cast<double>(n_target);
  const double rule = lambda_source * lambda_source * delta /
                      (np * np * std::sqrt(nq));
  return std::max(1e-4, std::min(0.1, rule));
}

TransferReport pretrain_then_transfer(const tasks::TaskDataset& source,
                                      const tasks::TaskDataset& target,
                                      const NetConfig& net_cfg,
                                      const TrainConfig& pre_cfg,
                                      const TrainConfig& fine_cfg) {
  if (source.d() != target.d())
    throw std::invalid_argument("pretrain_then_transfer: dimension mismatch");
  TransferReport report;
  report.bundle = ntk::make_bundle(source, target);

  ShallowNet net =
      init_net(source.d(), net_cfg.m, net_cfg.kappa, net_cfg.seed);
  auto [pretrained, pre_trace] =
      train_gd(net, source, pre_cfg, DeviationRef::kInit);
  auto [finetuned, fine_trace] =
      train_gd(pretrained, target, fine_cfg, DeviationRef::kStart);

  report.weight_movement = (finetuned.W - pretrained.W).norm();
  report.net_pretrained = std::move(pretrained);
  report.net_finetuned = std::move(finetuned);
  report.pretrain_trace = std::move(pre_trace);
  report.finetune_trace = std::move(fine_trace);
  return report;
}

namespace {

// Pretraining recipe shared by the theorem harnesses: step size 1/lambda_max
// of the exact source kernel, run until the residual is a factor 1e-4 below
// the label norm.
struct PretrainRecipe {
  TrainConfig cfg;
};

PretrainRecipe pretrain_recipe(const ntk::GramBundle& bundle,
                               const tasks::TaskDataset& source) {
  PretrainRecipe r;
  r.cfg.eta = stable_eta(bundle.gram_source);
  r.cfg.steps = 5000;
  r.cfg.stop_residual = 1e-4 * std::max(source.labels.norm(), 1e-6);
  r.cfg.record_every = 1 << 20;
  return r;
}

}  // namespace

Theorem1Report verify_theorem1(const tasks::TaskDataset& source,
                               const tasks::TaskDataset& target,
                               const std::vector<Eigen::Index>& m_values,
                               double kappa, double delta,
                               const std::vector<std::uint64_t>& seeds) {
  if (m_values.size() < 3)
    throw std::invalid_argument("verify_theorem1: need at least 3 widths");
  if (seeds.empty())
    throw std::invalid_argument("verify_theorem1: need at least one seed");
  (void)delta;

  const ntk::GramBundle bundle = ntk::make_bundle(source, target);
  const PretrainRecipe recipe = pretrain_recipe(bundle, source);

  Theorem1Report report;
  report.m_values = m_values;
  for (Eigen::Index m : m_values) {
    std::vector<double> measured, predicted, gaps;
    for (std::uint64_t seed : seeds) {
      ShallowNet net = init_net(source.d(), m, kappa, seed);
      const double grad_sq_init =
          (forward(net, target.inputs) - target.labels).squaredNorm();
      auto [pretrained, trace] =
          train_gd(net, source, recipe.cfg, DeviationRef::kInit);
      const double grad_sq_after =
          (forward(pretrained, target.inputs) - target.labels).squaredNorm();
      const double pred = ntk::theorem1_prediction(bundle, grad_sq_init);
      measured.push_back(grad_sq_after);
      predicted.push_back(pred);
      gaps.push_back(std::abs(grad_sq_after - pred));
    }
    report.median_gap.push_back(stats::median(gaps));
    report.measured.push_back(std::move(measured));
    report.predicted.push_back(std::move(predicted));
    report.gap.push_back(std::move(gaps));
  }
  report.gap_non_increasing = true;
  for (std::size_t i = 1; i < report.median_gap.size(); ++i) {
    if (report.median_gap[i] >
        report.median_gap[i - 1] * (1.0 + 1e-12) + 1e-15)
      report.gap_non_increasing = false;
  }
  return report;
}

Theorem2Report verify_theorem2(const tasks::TaskDataset& source,
                               const tasks::TaskDataset& target,
                               const std::vector<Eigen::Index>& m_values,
                               double kappa, double delta,
                               const std::vector<std::uint64_t>& seeds,
                               int family_size) {
  if (m_values.empty())
    throw std::invalid_argument("verify_theorem2: need at least one width");
  if (seeds.empty())
    throw std::invalid_argument("verify_theorem2: need at least one seed");
  if (family_size < 5)
    throw std::invalid_argument("verify_theorem2: family_size must be >= 5");
  (void)delta;

  // Family of targets: same inputs, labels blended toward an independent
  // random-sign labeling. Member 0 is the target itself.
  SplitRng alt_rng = SplitRng(target.seed).split(100);
  Eigen::VectorXd alt_labels(target.n());
  for (Eigen::Index i = 0; i < target.n(); ++i) alt_labels[i] = alt_rng.sign();

  std::vector<tasks::TaskDataset> family;
  std::vector<ntk::GramBundle> bundles;
  Theorem2Report report;
  report.m_values = m_values;
  for (int j = 0; j < family_size; ++j) {
    const double t = static_cast<double>(j) / (family_size - 1);
    tasks::TaskDataset member = target;
    member.labels = ((1.0 - t) * target.labels + t * alt_labels)
                        .cwiseMax(-1.0)
                        .cwiseMin(1.0);
    member.name = target.name + "-distort" + std::to_string(j);
    bundles.push_back(ntk::make_bundle(source, member));
    report.bounds.push_back(ntk::theorem2_bound(bundles.back()));
    family.push_back(std::move(member));
  }

  const PretrainRecipe recipe = pretrain_recipe(bundles.front(), source);
  const double fine_eta = stable_eta(bundles.front().gram_target);

  for (Eigen::Index m : m_values) {
    std::vector<std::vector<double>> per_seed;
    std::vector<double> spearmans;
    std::vector<double> slacks;
    for (std::uint64_t seed : seeds) {
      ShallowNet net = init_net(source.d(), m, kappa, seed);
      auto [pretrained, pre_trace] =
          train_gd(net, source, recipe.cfg, DeviationRef::kInit);
      std::vector<double> movement;
      for (const auto& member : family) {
        TrainConfig fine;
        fine.eta = fine_eta;
        fine.steps = 3000;
        fine.stop_residual = 1e-5 * std::max(member.labels.norm(), 1e-6);
        fine.record_every = 1 << 20;
        auto [tuned, fine_trace] =
            train_gd(pretrained, member, fine, DeviationRef::kStart);
        movement.push_back((tuned.W - pretrained.W).norm());
      }
      for (std::size_t j = 0; j < movement.size(); ++j)
        slacks.push_back(std::max(0.0, movement[j] - report.bounds[j]));
      spearmans.push_back(stats::spearman(movement, report.bounds));
      per_seed.push_back(std::move(movement));
    }
    report.median_slack.push_back(stats::median(slacks));
    report.spearman.push_back(spearmans);
    report.measured.push_back(std::move(per_seed));
  }

  report.slack_non_increasing = true;
  for (std::size_t i = 1; i < report.median_slack.size(); ++i) {
    if (report.median_slack[i] >
        report.median_slack[i - 1] * (1.0 + 1e-12) + 1e-15)
      report.slack_non_increasing = false;
  }

  report.seed_count = static_cast<int>(seeds.size());
  for (double rho : report.spearman.back())
    if (rho >= 0.9) ++report.seeds_with_rank_correlation;

  // Identical-task control and from-scratch arm at the largest width.
  {
    const Eigen::Index m = m_values.back();
    const ntk::GramBundle self_bundle = ntk::make_bundle(source, source);
    report.control_bound = ntk::theorem2_bound(self_bundle);
    ShallowNet net = init_net(source.d(), m, kappa, seeds.front());
    auto [pretrained, pre_trace] =
        train_gd(net, source, recipe.cfg, DeviationRef::kInit);
    TrainConfig fine;
    fine.eta = stable_eta(self_bundle.gram_target);
    fine.steps = 3000;
    fine.stop_residual = 1e-5 * std::max(source.labels.norm(), 1e-6);
    fine.record_every = 1 << 20;
    auto [control, control_trace] =
        train_gd(pretrained, source, fine, DeviationRef::kStart);
    report.control_movement = (control.W - pretrained.W).norm();
    report.scratch_movement = (pretrained.W - pretrained.W_init).norm();
  }

  const int needed =
      (report.seed_count * 8 + 9) / 10;  // ceil(0.8 * seeds)
  report.verdict = report.slack_non_increasing &&
                   report.seeds_with_rank_correlation >= needed &&
                   report.control_bound <= 1e-6 &&
                   report.scratch_movement >= 10.0 * report.control_movement;
  return report;
}

ConvergenceReport verify_convergence(const tasks::TaskDataset& source,
                                     const tasks::TaskDataset& target,
                                     const NetConfig& net_cfg,
                                     int pretrain_steps, int finetune_steps,
                                     const std::vector<std::uint64_t>& seeds,
                                     double tolerance) {
  const ntk::GramBundle bundle = ntk::make_bundle(source, target);
  ConvergenceReport report;
  report.lambda_target = bundle.lambda_target;
  report.eta = conservative_eta(bundle.lambda_target, target.n());
  const double contraction = 1.0 - report.eta * bundle.lambda_target / 2.0;

  TrainConfig pre;
  pre.eta = stable_eta(bundle.gram_source);
  pre.steps = pretrain_steps;
  pre.record_every = 1 << 20;

  TrainConfig fine;
  fine.eta = report.eta;
  fine.steps = finetune_steps;
  fine.record_every = 1;

  for (std::uint64_t seed : seeds) {
    ShallowNet net = init_net(source.d(), net_cfg.m, net_cfg.kappa, seed);
    auto [pretrained, pre_trace] =
        train_gd(net, source, pre, DeviationRef::kInit);
    auto [tuned, trace] = train_gd(pretrained, target, fine, DeviationRef::kStart);

    const double res0_sq = trace.residual_norm.front() * trace.residual_norm.front();
    bool pass = true;
    double worst = -1.0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
      const double lhs =
          trace.residual_norm[i] * trace.residual_norm[i];
      const double rhs = std::pow(contraction, trace.step[i]) * res0_sq *
                         (1.0 + tolerance);
      if (rhs > 0.0) worst = std::max(worst, lhs / rhs - 1.0);
      if (lhs > rhs) pass = false;
    }
    report.seed_passed.push_back(pass);
    report.worst_margin.push_back(worst);
    if (pass) ++report.passing_count;
  }
  return report;
}

SweepReport epoch_sweep_transfer(const tasks::TaskDataset& source,
                                 const tasks::TaskDataset& target,
                                 const NetConfig& net_cfg,
                                 const std::vector<int>& checkpoints,
                                 const TrainConfig& pre_cfg,
                                 const TrainConfig& fine_cfg) {
  for (std::size_t i = 1; i < checkpoints.size(); ++i) {
    if (checkpoints[i] <= checkpoints[i - 1])
      throw std::invalid_argument("epoch_sweep_transfer: checkpoints must increase");
  }
  if (!checkpoints.empty() && checkpoints.front() < 0)
    throw std::invalid_argument("epoch_sweep_transfer: negative checkpoint");

  SweepReport report;
  ShallowNet net = init_net(source.d(), net_cfg.m, net_cfg.kappa, net_cfg.seed);
  int trained = 0;
  for (int cp : checkpoints) {
    if (cp > trained) {
      TrainConfig chunk = stopped_at(pre_cfg, cp - trained);
      chunk.stop_residual = 0.0;  // run the exact number of steps
      chunk.record_every = 1 << 20;
      auto [next, trace] = train_gd(net, source, chunk, DeviationRef::kInit);
      net = std::move(next);
      trained = cp;
    }
    EpochSweepRow row;
    row.pretrain_steps = cp;
    row.source_residual = (forward(net, source.inputs) - source.labels).norm();
    auto [tuned, fine_trace] = train_gd(net, target, fine_cfg, DeviationRef::kStart);
    row.target_residual = fine_trace.residual_norm.back();
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace xferlab::shallow

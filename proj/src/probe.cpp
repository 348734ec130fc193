#include "xferlab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/SVD>

#include "xferlab/rng.hpp"

namespace xferlab::probe {

namespace {

void check_layer(const ParamModel& model, Eigen::Index layer) {
  if (layer < 0 || layer >= model.layer_count())
    throw std::invalid_argument("probe: no such layer");
}

Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
  return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
}

Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, Eigen::Index rows,
                          Eigen::Index cols) {
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}

}  // namespace

// ----- adapters --------------------------------------------------------------

Eigen::MatrixXd ShallowModel::layer_weights(Eigen::Index layer) const {
  check_layer(*this, layer);
  return net_->W;
}

void ShallowModel::set_layer_weights(Eigen::Index layer,
                                     const Eigen::MatrixXd& weights) {
  check_layer(*this, layer);
  if (weights.rows() != net_->d || weights.cols() != net_->m)
    throw std::invalid_argument("ShallowModel: weight shape mismatch");
  net_->W = weights;
}

double ShallowModel::batch_loss(const Eigen::MatrixXd& inputs,
                                const Eigen::VectorXd& labels) const {
  return shallow::loss(*net_, inputs, labels);
}

Eigen::VectorXd ShallowModel::flat_params() const { return flatten(net_->W); }

void ShallowModel::set_flat_params(const Eigen::VectorXd& params) {
  if (params.size() != net_->W.size())
    throw std::invalid_argument("ShallowModel: parameter count mismatch");
  net_->W = unflatten(params, net_->d, net_->m);
}

Eigen::VectorXd ShallowModel::flat_grad(const Eigen::MatrixXd& inputs,
                                        const Eigen::VectorXd& labels) const {
  return flatten(shallow::grad_w(*net_, inputs, labels));
}

Eigen::MatrixXd ShallowModel::layer_grad(Eigen::Index layer,
                                         const Eigen::MatrixXd& inputs,
                                         const Eigen::VectorXd& labels) const {
  check_layer(*this, layer);
  return shallow::grad_w(*net_, inputs, labels);
}

Eigen::MatrixXd DeepModel::layer_weights(Eigen::Index layer) const {
  check_layer(*this, layer);
  return net_->weights[layer];
}

void DeepModel::set_layer_weights(Eigen::Index layer,
                                  const Eigen::MatrixXd& weights) {
  check_layer(*this, layer);
  if (weights.rows() != net_->weights[layer].rows() ||
      weights.cols() != net_->weights[layer].cols())
    throw std::invalid_argument("DeepModel: weight shape mismatch");
  net_->weights[layer] = weights;
}

double DeepModel::batch_loss(const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels) const {
  return 0.5 * (deepnet::forward_deep(*net_, inputs) - labels).squaredNorm();
}

Eigen::VectorXd DeepModel::flat_params() const {
  Eigen::Index total = 0;
  for (const auto& w : net_->weights) total += w.size();
  Eigen::VectorXd out(total);
  Eigen::Index at = 0;
  for (const auto& w : net_->weights) {
    out.segment(at, w.size()) = flatten(w);
    at += w.size();
  }
  return out;
}

void DeepModel::set_flat_params(const Eigen::VectorXd& params) {
  Eigen::Index at = 0;
  for (auto& w : net_->weights) {
    if (at + w.size() > params.size())
      throw std::invalid_argument("DeepModel: parameter count mismatch");
    w = unflatten(params.segment(at, w.size()), w.rows(), w.cols());
    at += w.size();
  }
  if (at != params.size())
    throw std::invalid_argument("DeepModel: parameter count mismatch");
}

Eigen::VectorXd DeepModel::flat_grad(const Eigen::MatrixXd& inputs,
                                     const Eigen::VectorXd& labels) const {
  deepnet::BackpropResult bp = deepnet::forward_backward(*net_, inputs, labels);
  Eigen::Index total = 0;
  for (const auto& g : bp.weight_grads) total += g.size();
  Eigen::VectorXd out(total);
  Eigen::Index at = 0;
  for (const auto& g : bp.weight_grads) {
    out.segment(at, g.size()) = flatten(g);
    at += g.size();
  }
  return out;
}

Eigen::MatrixXd DeepModel::layer_grad(Eigen::Index layer,
                                      const Eigen::MatrixXd& inputs,
                                      const Eigen::VectorXd& labels) const {
  check_layer(*this, layer);
  return deepnet::forward_backward(*net_, inputs, labels).weight_grads[layer];
}

QuadraticModel::QuadraticModel(Eigen::MatrixXd hessian, Eigen::VectorXd theta)
    : hessian_(std::move(hessian)), theta_(std::move(theta)) {
  if (hessian_.rows() != hessian_.cols() || hessian_.rows() != theta_.size())
    throw std::invalid_argument("QuadraticModel: shape mismatch");
  if ((hessian_ - hessian_.transpose()).norm() > 1e-12 * (1.0 + hessian_.norm()))
    throw std::invalid_argument("QuadraticModel: hessian must be symmetric");
}

Eigen::MatrixXd QuadraticModel::layer_weights(Eigen::Index layer) const {
  check_layer(*this, layer);
  return theta_;
}

void QuadraticModel::set_layer_weights(Eigen::Index layer,
                                       const Eigen::MatrixXd& weights) {
  check_layer(*this, layer);
  if (weights.size() != theta_.size())
    throw std::invalid_argument("QuadraticModel: shape mismatch");
  theta_ = flatten(weights);
}

double QuadraticModel::batch_loss(const Eigen::MatrixXd&,
                                  const Eigen::VectorXd&) const {
  return 0.5 * theta_.dot(hessian_ * theta_);
}

void QuadraticModel::set_flat_params(const Eigen::VectorXd& params) {
  if (params.size() != theta_.size())
    throw std::invalid_argument("QuadraticModel: parameter count mismatch");
  theta_ = params;
}

Eigen::VectorXd QuadraticModel::flat_grad(const Eigen::MatrixXd&,
                                          const Eigen::VectorXd&) const {
  return hessian_ * theta_;
}

Eigen::MatrixXd QuadraticModel::layer_grad(Eigen::Index layer,
                                           const Eigen::MatrixXd&,
                                           const Eigen::VectorXd&) const {
  check_layer(*this, layer);
  return hessian_ * theta_;
}

// ----- landscape ---------------------------------------------------------------

LandscapeGrid landscape_grid(ParamModel& model, Eigen::Index layer,
                             int grid_size, double step_scale,
                             const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels, std::uint64_t seed,
                             const std::string& batch_id) {
  check_layer(model, layer);
  if (grid_size < 1)
    throw std::invalid_argument("landscape_grid: grid_size must be >= 1");
  if (inputs.rows() == 0)
    throw std::invalid_argument("landscape_grid: empty batch");

  const Eigen::MatrixXd saved = model.layer_weights(layer);
  SplitRng rng(seed);
  Eigen::MatrixXd dir1 = rng.split(0).normal_matrix(saved.rows(), saved.cols());
  Eigen::MatrixXd dir2 = rng.split(1).normal_matrix(saved.rows(), saved.cols());

  // Orthogonalize before any scaling.
  {
    const Eigen::VectorXd f1 = flatten(dir1);
    Eigen::VectorXd f2 = flatten(dir2);
    f2 -= (f1.dot(f2) / f1.squaredNorm()) * f1;
    dir2 = unflatten(f2, saved.rows(), saved.cols());
  }

  LandscapeGrid out;
  out.direction1 = flatten(dir1);
  out.direction2 = flatten(dir2);
  out.step_scale = step_scale;
  out.batch_id = batch_id;
  out.seed = seed;

  // Per-output-neuron (column) normalization by the weight-column norm.
  const double global_ratio_1 =
      dir1.norm() > 0.0 ? saved.norm() / dir1.norm() : 1.0;
  const double global_ratio_2 =
      dir2.norm() > 0.0 ? saved.norm() / dir2.norm() : 1.0;
  out.scales1.resize(saved.cols());
  out.scales2.resize(saved.cols());
  for (Eigen::Index c = 0; c < saved.cols(); ++c) {
    const double wn = saved.col(c).norm();
    const double d1n = dir1.col(c).norm();
    const double d2n = dir2.col(c).norm();
    double s1, s2;
    if (wn > 0.0 && d1n > 0.0 && d2n > 0.0) {
      s1 = wn / d1n;
      s2 = wn / d2n;
    } else {
      s1 = global_ratio_1;
      s2 = global_ratio_2;
      out.used_global_fallback = true;
    }
    dir1.col(c) *= s1;
    dir2.col(c) *= s2;
    out.scales1[c] = s1;
    out.scales2[c] = s2;
  }

  out.center_loss = model.batch_loss(inputs, labels);
  out.grid.resize(grid_size, grid_size);
  const int center = grid_size / 2;
  for (int i = 0; i < grid_size; ++i) {
    const double alpha = step_scale * (i - center);
    for (int j = 0; j < grid_size; ++j) {
      const double beta = step_scale * (j - center);
      model.set_layer_weights(layer, saved + alpha * dir1 + beta * dir2);
      out.grid(i, j) = model.batch_loss(inputs, labels);
    }
  }
  model.set_layer_weights(layer, saved);
  return out;
}

// ----- loss variation along the gradient -----------------------------------------

namespace {

// One probe: walk from theta along -g for a total displacement of ||g||,
// in probe_steps even increments, and report the largest |delta L|.
template <typename LossAt>
double probe_along_gradient(const Eigen::VectorXd& theta,
                            const Eigen::VectorXd& grad, double base_loss,
                            int probe_steps, LossAt&& loss_at) {
  const double gnorm = grad.norm();
  if (gnorm == 0.0) return 0.0;
  double worst = 0.0;
  for (int j = 1; j <= probe_steps; ++j) {
    const double c = static_cast<double>(j) / probe_steps;
    worst = std::max(worst, std::abs(loss_at(theta - c * grad) - base_loss));
  }
  return worst;
}

}  // namespace

GradVariationSeries loss_variation_along_gradient(
    const shallow::ShallowNet& net, const tasks::TaskDataset& task,
    const TrainConfig& cfg, int probe_steps) {
  if (probe_steps < 1)
    throw std::invalid_argument("loss_variation: probe_steps must be >= 1");
  shallow::ShallowNet work = net;
  ShallowModel model(work);
  GradVariationSeries series;
  for (int k = 0; true; ++k) {
    const Eigen::VectorXd grad = model.flat_grad(task.inputs, task.labels);
    const bool stopping = k >= cfg.steps;
    if (stopping || k % cfg.record_every == 0) {
      const Eigen::VectorXd theta = model.flat_params();
      const double base = model.batch_loss(task.inputs, task.labels);
      const double var = probe_along_gradient(
          theta, grad, base, probe_steps, [&](const Eigen::VectorXd& p) {
            model.set_flat_params(p);
            return model.batch_loss(task.inputs, task.labels);
          });
      model.set_flat_params(theta);  // exact restore
      series.step.push_back(k);
      series.variation.push_back(var);
      if (stopping) break;
    }
    work.W.noalias() -= cfg.eta * unflatten(grad, work.d, work.m);
  }
  return series;
}

GradVariationSeries loss_variation_along_gradient(
    const deepnet::DeepNet& net, const tasks::TaskDataset& task,
    const TrainConfig& cfg, int probe_steps) {
  if (probe_steps < 1)
    throw std::invalid_argument("loss_variation: probe_steps must be >= 1");
  deepnet::DeepNet work = net;
  DeepModel model(work);
  GradVariationSeries series;
  for (int k = 0; true; ++k) {
    const Eigen::VectorXd grad = model.flat_grad(task.inputs, task.labels);
    const bool stopping = k >= cfg.steps;
    if (stopping || k % cfg.record_every == 0) {
      const Eigen::VectorXd theta = model.flat_params();
      const double base = model.batch_loss(task.inputs, task.labels);
      const double var = probe_along_gradient(
          theta, grad, base, probe_steps, [&](const Eigen::VectorXd& p) {
            model.set_flat_params(p);
            return model.batch_loss(task.inputs, task.labels);
          });
      model.set_flat_params(theta);
      series.step.push_back(k);
      series.variation.push_back(var);
      if (stopping) break;
    }
    model.set_flat_params(model.flat_params() - cfg.eta * grad);
  }
  return series;
}

// ----- Hessian spectrum ------------------------------------------------------------

HessianSpectrum hessian_topk(ParamModel& model, const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels, int k, double tol,
                             int max_iter, std::uint64_t seed,
                             const std::string& batch_id) {
  if (k < 1) throw std::invalid_argument("hessian_topk: k must be >= 1");
  const Eigen::VectorXd theta = model.flat_params();
  const Eigen::Index dim = theta.size();
  if (dim < k)
    throw std::invalid_argument("hessian_topk: k exceeds parameter count");

  const double eps_scale = 1e-4 * (1.0 + theta.norm());
  auto hvp = [&](const Eigen::VectorXd& v) {
    const double eps = eps_scale / v.norm();
    model.set_flat_params(theta + eps * v);
    const Eigen::VectorXd gp = model.flat_grad(inputs, labels);
    model.set_flat_params(theta - eps * v);
    const Eigen::VectorXd gm = model.flat_grad(inputs, labels);
    return ((gp - gm) / (2.0 * eps)).eval();
  };

  SplitRng rng(seed);
  std::vector<Eigen::VectorXd> basis;  // converged eigenvectors
  HessianSpectrum spectrum;
  spectrum.batch_id = batch_id;

  // Basis vectors are iterated well past the reported tolerance: a leading
  // eigenvector that is only tol-accurate caps the residual reachable by
  // every deflated pair after it.
  const double inner_tol = std::min(tol, 1e-10);
  for (int e = 0; e < k; ++e) {
    Eigen::VectorXd v = rng.normal_vector(dim).normalized();
    double lambda = 0.0;
    double residual = 0.0;
    int iters = 0;
    for (; iters < max_iter; ++iters) {
      for (const auto& b : basis) v -= b.dot(v) * b;
      const double vkn = v.norm();
      if (vkn < 1e-12) {
        v = rng.normal_vector(dim).normalized();
        continue;
      }
      v /= vkn;
      const Eigen::VectorXd hv = hvp(v);
      lambda = v.dot(hv);
      residual = (hv - lambda * v).norm() / std::max(std::abs(lambda), 1e-30);
      if (residual <= inner_tol) break;
      v = hv;
    }
    spectrum.eigenvalues.push_back(lambda);
    spectrum.iterations_per_eig.push_back(iters);
    spectrum.residuals.push_back(residual);
    spectrum.converged.push_back(residual <= tol);
    basis.push_back(v.normalized());
  }
  model.set_flat_params(theta);  // exact restore

  // Report in descending order of value, keeping diagnostics aligned.
  std::vector<std::size_t> order(spectrum.eigenvalues.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return spectrum.eigenvalues[a] > spectrum.eigenvalues[b];
  });
  HessianSpectrum sorted;
  sorted.batch_id = spectrum.batch_id;
  for (std::size_t idx : order) {
    sorted.eigenvalues.push_back(spectrum.eigenvalues[idx]);
    sorted.iterations_per_eig.push_back(spectrum.iterations_per_eig[idx]);
    sorted.residuals.push_back(spectrum.residuals[idx]);
    sorted.converged.push_back(spectrum.converged[idx]);
  }
  return sorted;
}

// ----- gradient SVD projections ----------------------------------------------------

SvdProjection grad_svd_projection(ParamModel& model, Eigen::Index layer,
                                  const Eigen::MatrixXd& inputs,
                                  const Eigen::VectorXd& labels) {
  check_layer(model, layer);
  const Eigen::MatrixXd grad = model.layer_grad(layer, inputs, labels);
  SvdProjection out;
  if (grad.norm() == 0.0) {
    out.zero_gradient = true;
    return out;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(grad, Eigen::ComputeThinU);
  const Eigen::MatrixXd weights = model.layer_weights(layer);
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) {
    out.singular_values.push_back(svd.singularValues()[i]);
    out.projections.push_back((weights.transpose() * svd.matrixU().col(i)).norm());
  }
  return out;
}

// ----- checkpoint geometry -----------------------------------------------------------

namespace {

void check_same_shapes(const WeightList& a, const WeightList& b,
                       const char* who) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(who) + ": layer count mismatch");
  for (std::size_t l = 0; l < a.size(); ++l) {
    if (a[l].rows() != b[l].rows() || a[l].cols() != b[l].cols())
      throw std::invalid_argument(std::string(who) + ": layer shape mismatch");
  }
}

}  // namespace

std::vector<double> weight_deviation_series(
    const std::vector<WeightList>& checkpoints, const WeightList& reference,
    Eigen::Index n) {
  if (n < 1)
    throw std::invalid_argument("weight_deviation_series: n must be >= 1");
  std::vector<double> out;
  const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
  for (const auto& checkpoint : checkpoints) {
    check_same_shapes(checkpoint, reference, "weight_deviation_series");
    double sum = 0.0;
    for (std::size_t l = 0; l < checkpoint.size(); ++l)
      sum += (checkpoint[l] - reference[l]).norm();
    out.push_back(inv_sqrt_n * sum);
  }
  return out;
}

DistanceMatrix checkpoint_distance_matrix(
    const std::vector<std::string>& labels,
    const std::vector<WeightList>& checkpoints) {
  if (checkpoints.size() < 2)
    throw std::invalid_argument("checkpoint_distance_matrix: need >= 2 checkpoints");
  if (labels.size() != checkpoints.size())
    throw std::invalid_argument("checkpoint_distance_matrix: label count mismatch");
  const auto n = static_cast<Eigen::Index>(checkpoints.size());
  for (const auto& checkpoint : checkpoints)
    check_same_shapes(checkpoint, checkpoints.front(),
                      "checkpoint_distance_matrix");

  DistanceMatrix out;
  out.labels = labels;
  out.values = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (std::size_t l = 0; l < checkpoints[i].size(); ++l)
        sq += (checkpoints[i][l] - checkpoints[j][l]).squaredNorm();
      const double dist = std::sqrt(sq);
      out.values(i, j) = dist;
      out.values(j, i) = dist;
    }
  }
  return out;
}

bool distance_matrix_is_metric(const DistanceMatrix& matrix, double tol) {
  const Eigen::Index n = matrix.values.rows();
  if (matrix.values.cols() != n) return false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (matrix.values(i, i) != 0.0) return false;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (matrix.values(i, j) != matrix.values(j, i)) return false;
      for (Eigen::Index l = 0; l < n; ++l) {
        if (matrix.values(i, j) >
            matrix.values(i, l) + matrix.values(l, j) + tol)
          return false;
      }
    }
  }
  return true;
}

}  // namespace xferlab::probe

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "xferlab/dataset.hpp"
#include "xferlab/deepnet.hpp"
#include "xferlab/shallow.hpp"

namespace xferlab::probe {

// Parameter-space view of a model, shared by all probing instruments.
// Probes mutate the parameters temporarily and always restore them exactly.
class ParamModel {
 public:
  virtual ~ParamModel() = default;
  virtual Eigen::Index layer_count() const = 0;
  virtual Eigen::MatrixXd layer_weights(Eigen::Index layer) const = 0;
  virtual void set_layer_weights(Eigen::Index layer,
                                 const Eigen::MatrixXd& weights) = 0;
  virtual double batch_loss(const Eigen::MatrixXd& inputs,
                            const Eigen::VectorXd& labels) const = 0;
  virtual Eigen::VectorXd flat_params() const = 0;
  virtual void set_flat_params(const Eigen::VectorXd& params) = 0;
  virtual Eigen::VectorXd flat_grad(const Eigen::MatrixXd& inputs,
                                    const Eigen::VectorXd& labels) const = 0;
  virtual Eigen::MatrixXd layer_grad(Eigen::Index layer,
                                     const Eigen::MatrixXd& inputs,
                                     const Eigen::VectorXd& labels) const = 0;
};

class ShallowModel : public ParamModel {
 public:
  explicit ShallowModel(shallow::ShallowNet& net) : net_(&net) {}
  Eigen::Index layer_count() const override { return 1; }
  Eigen::MatrixXd layer_weights(Eigen::Index layer) const override;
  void set_layer_weights(Eigen::Index layer,
                         const Eigen::MatrixXd& weights) override;
  double batch_loss(const Eigen::MatrixXd& inputs,
                    const Eigen::VectorXd& labels) const override;
  Eigen::VectorXd flat_params() const override;
  void set_flat_params(const Eigen::VectorXd& params) override;
  Eigen::VectorXd flat_grad(const Eigen::MatrixXd& inputs,
                            const Eigen::VectorXd& labels) const override;
  Eigen::MatrixXd layer_grad(Eigen::Index layer, const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels) const override;

 private:
  shallow::ShallowNet* net_;
};

class DeepModel : public ParamModel {
 public:
  explicit DeepModel(deepnet::DeepNet& net) : net_(&net) {}
  Eigen::Index layer_count() const override { return net_->depth(); }
  Eigen::MatrixXd layer_weights(Eigen::Index layer) const override;
  void set_layer_weights(Eigen::Index layer,
                         const Eigen::MatrixXd& weights) override;
  double batch_loss(const Eigen::MatrixXd& inputs,
                    const Eigen::VectorXd& labels) const override;
  Eigen::VectorXd flat_params() const override;
  void set_flat_params(const Eigen::VectorXd& params) override;
  Eigen::VectorXd flat_grad(const Eigen::MatrixXd& inputs,
                            const Eigen::VectorXd& labels) const override;
  Eigen::MatrixXd layer_grad(Eigen::Index layer, const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels) const override;

 private:
  deepnet::DeepNet* net_;
};

// loss(theta) = 0.5 theta^T A theta with symmetric A; ignores the batch.
// Its Hessian is A exactly, which makes it the calibration target for the
// spectrum and landscape probes.
class QuadraticModel : public ParamModel {
 public:
  QuadraticModel(Eigen::MatrixXd hessian, Eigen::VectorXd theta);
  Eigen::Index layer_count() const override { return 1; }
  Eigen::MatrixXd layer_weights(Eigen::Index layer) const override;
  void set_layer_weights(Eigen::Index layer,
                         const Eigen::MatrixXd& weights) override;
  double batch_loss(const Eigen::MatrixXd& inputs,
                    const Eigen::VectorXd& labels) const override;
  Eigen::VectorXd flat_params() const override { return theta_; }
  void set_flat_params(const Eigen::VectorXd& params) override;
  Eigen::VectorXd flat_grad(const Eigen::MatrixXd& inputs,
                            const Eigen::VectorXd& labels) const override;
  Eigen::MatrixXd layer_grad(Eigen::Index layer, const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels) const override;

 private:
  Eigen::MatrixXd hessian_;
  Eigen::VectorXd theta_;
};

// ----- Loss landscape -------------------------------------------------------

struct LandscapeGrid {
  double center_loss = 0.0;
  Eigen::MatrixXd grid;  // G x G losses
  Eigen::VectorXd direction1;  // flattened, pre-normalization
  Eigen::VectorXd direction2;
  Eigen::VectorXd scales1;  // per-neuron scale applied to each direction
  Eigen::VectorXd scales2;
  bool used_global_fallback = false;
  double step_scale = 0.0;
  std::string batch_id;
  std::uint64_t seed = 0;
};

// 2-D loss surface around the current weights of one layer; the two random
// directions are orthogonalized first and then scaled per output neuron by
// the matching weight-column norm (zero-norm neurons fall back to a global
// scale). Other layers stay frozen; the model is restored bitwise.
LandscapeGrid landscape_grid(ParamModel& model, Eigen::Index layer,
                             int grid_size, double step_scale,
                             const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels, std::uint64_t seed,
                             const std::string& batch_id = "");

// ----- Loss variation along the gradient ------------------------------------

struct GradVariationSeries {
  std::vector<int> step;
  std::vector<double> variation;  // max |L(w - c g) - L(w)| over the segment
};

// Trains the net, and at every recorded step walks from the current weights
// along -g up to a displacement of one gradient magnitude, recording the
// maximum loss change over probe_steps evenly spaced points. Training itself
// is unaffected by the probing.
GradVariationSeries loss_variation_along_gradient(
    const shallow::ShallowNet& net, const tasks::TaskDataset& task,
    const TrainConfig& cfg, int probe_steps);

GradVariationSeries loss_variation_along_gradient(
    const deepnet::DeepNet& net, const tasks::TaskDataset& task,
    const TrainConfig& cfg, int probe_steps);

// ----- Hessian spectrum ------------------------------------------------------

struct HessianSpectrum {
  std::vector<double> eigenvalues;  // sorted descending
  std::vector<int> iterations_per_eig;
  std::vector<double> residuals;  // ||Hv - lambda v|| / |lambda|
  std::vector<bool> converged;
  std::string batch_id;
};

// Top-k eigenvalues by power iteration with deflation. Hessian-vector
// products use central differences of the analytic gradient with
// eps = 1e-4 (1 + ||theta||) / ||v||.
HessianSpectrum hessian_topk(ParamModel& model, const Eigen::MatrixXd& inputs,
                             const Eigen::VectorXd& labels, int k,
                             double tol = 1e-6, int max_iter = 10000,
                             std::uint64_t seed = 0,
                             const std::string& batch_id = "");

// ----- Gradient SVD projections ----------------------------------------------

struct SvdProjection {
  std::vector<double> singular_values;
  std::vector<double> projections;  // ||W^T u_i||_2 per left singular vector
  bool zero_gradient = false;
};

SvdProjection grad_svd_projection(ParamModel& model, Eigen::Index layer,
                                  const Eigen::MatrixXd& inputs,
                                  const Eigen::VectorXd& labels);

// ----- Checkpoint geometry ----------------------------------------------------

using WeightList = std::vector<Eigen::MatrixXd>;

// (1/sqrt(n)) sum_l ||W_l - W_ref,l||_F per checkpoint.
std::vector<double> weight_deviation_series(
    const std::vector<WeightList>& checkpoints, const WeightList& reference,
    Eigen::Index n);

struct DistanceMatrix {
  std::vector<std::string> labels;
  Eigen::MatrixXd values;  // symmetric, zero diagonal
};

DistanceMatrix checkpoint_distance_matrix(
    const std::vector<std::string>& labels,
    const std::vector<WeightList>& checkpoints);

// Symmetry, zero diagonal, and triangle inequality within tol.
bool distance_matrix_is_metric(const DistanceMatrix& matrix, double tol = 1e-8);

}  // namespace xferlab::probe

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "xferlab/dataset.hpp"

namespace xferlab::ntk {

// Kernel of an infinitely wide two-layer ReLU network on unit-norm inputs:
// entry(i,j) = c * (pi - arccos(c)) / (2*pi) with c = <x_i, x_j>.

enum class GramKind { kExactInfinite, kMonteCarlo, kEmpiricalFinite };

struct GramMatrix {
  Eigen::MatrixXd values;
  GramKind kind = GramKind::kExactInfinite;
  std::string meta;
  Eigen::MatrixXd stderrs;  // per-entry standard error; Monte-Carlo only

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
};

// Smallest-eigenvalue threshold below which kernel solves refuse to run.
constexpr double kSingularTolerance = 1e-8;

inline bool near_singular(double lambda_min) {
  return lambda_min < kSingularTolerance;
}

class NearSingularError : public std::runtime_error {
 public:
  NearSingularError(const std::string& which, double lambda_min,
                    double suggested_jitter);
  double lambda_min() const { return lambda_min_; }
  double suggested_jitter() const { return suggested_jitter_; }

 private:
  double lambda_min_;
  double suggested_jitter_;
};

// Exact infinite-width kernel of one dataset against itself; symmetric with
// diagonal pinned to exactly 1/2.
GramMatrix gram_exact(const Eigen::MatrixXd& inputs);

// Exact kernel across two input sets (rows unit-norm).
GramMatrix gram_exact(const Eigen::MatrixXd& inputs_a,
                      const Eigen::MatrixXd& inputs_b);

// Monte-Carlo estimate of the same expectation using `samples` draws of
// w ~ N(0, I); `stderrs` carries the per-entry standard error.
GramMatrix gram_monte_carlo(const Eigen::MatrixXd& inputs_a,
                            const Eigen::MatrixXd& inputs_b,
                            std::int64_t samples, std::uint64_t seed);

// Finite-width kernel using the columns of `hidden_weights` (d x m) as the
// weight samples: entry(i,j) = (1/m) <x_i,x_j> sum_r 1{w_r.x_i>=0, w_r.x_j>=0}.
GramMatrix gram_empirical(const Eigen::MatrixXd& hidden_weights,
                          const Eigen::MatrixXd& inputs_a,
                          const Eigen::MatrixXd& inputs_b);

// Smallest eigenvalue of a symmetric square Gram matrix.
double min_eigenvalue(const GramMatrix& gram);

// Solves H z = y by Cholesky and returns H_cross^T z. Throws
// NearSingularError when lambda_min(H) < kSingularTolerance.
Eigen::VectorXd transformed_labels(const GramMatrix& gram_source,
                                   const GramMatrix& gram_cross,
                                   const Eigen::VectorXd& labels_source);

struct TaskSimilarity {
  double l2 = 0.0;        // ||y_target - y_transformed||_2
  double quadform = 0.0;  // delta^T H_target^-1 delta
};

TaskSimilarity task_similarity(const Eigen::VectorXd& labels_target,
                               const Eigen::VectorXd& labels_transformed,
                               const GramMatrix& gram_target);

struct GramBundle {
  GramMatrix gram_source;   // n_P x n_P
  GramMatrix gram_target;   // n_Q x n_Q
  GramMatrix gram_cross;    // n_P x n_Q
  double lambda_source = 0.0;
  double lambda_target = 0.0;
  Eigen::VectorXd labels_source;
  Eigen::VectorXd labels_target;
  Eigen::VectorXd labels_transformed;  // cross^T source^-1 y_P
  double similarity_l2 = 0.0;
  double similarity_quadform = 0.0;
  double scratch_quadform = 0.0;  // y_Q^T H_Q^-1 y_Q, the from-scratch analog
  double jitter_used = 0.0;
};

struct BundleOptions {
  // When set, near-singular Gram matrices get a diagonal jitter of
  // 1e-10 * trace/n instead of failing; the jitter is recorded.
  bool allow_near_singular = false;
};

GramBundle make_bundle(const tasks::TaskDataset& source,
                       const tasks::TaskDataset& target,
                       const BundleOptions& options = {});

// Leading term of the weight-movement bound: sqrt(delta^T H_Q^-1 delta).
double theorem2_bound(const GramBundle& bundle);

// From-scratch counterpart, sqrt(y_Q^T H_Q^-1 y_Q).
double scratch_bound(const GramBundle& bundle);

// Leading-term prediction for the squared activation-gradient norm after
// transfer: grad_sq_at_init - y_Q^T y_Q + ||delta||^2.
double theorem1_prediction(const GramBundle& bundle, double grad_sq_at_init);

// Cholesky solve with one jitter retry; used by every kernel solve here.
Eigen::MatrixXd spd_solve(const Eigen::MatrixXd& matrix,
                          const Eigen::MatrixXd& rhs, double* jitter_used);

}  // namespace xferlab::ntk

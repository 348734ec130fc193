#include "xferlab/ntk.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "xferlab/rng.hpp"

namespace xferlab::ntk {

namespace {

constexpr double kUnitNormTolerance = 1e-8;

double kernel_entry(double c) {
  c = std::clamp(c, -1.0, 1.0);  // fp dot products of unit vectors can stray
  // arccos has infinite slope at the endpoints, so a dot product off by one
  // ulp moves the value by ~1e-9. Snap to the exact endpoint values; unit-norm
  // rows this close are the same (or mirrored) sample up to roundoff.
  if (c >= 1.0 - 4e-15) return 0.5;
  if (c <= -1.0 + 4e-15) return 0.0;
  return c * (M_PI - std::acos(c)) / (2.0 * M_PI);
}

void check_unit_rows(const Eigen::MatrixXd& inputs, const char* who) {
  for (Eigen::Index i = 0; i < inputs.rows(); ++i) {
    if (std::abs(inputs.row(i).norm() - 1.0) > kUnitNormTolerance) {
      std::ostringstream msg;
      msg << who << ": row " << i << " is not unit-norm";
      throw std::invalid_argument(msg.str());
    }
  }
}

double suggested_jitter(const Eigen::MatrixXd& matrix) {
  return 1e-10 * matrix.trace() / static_cast<double>(matrix.rows());
}

void check_square_symmetric(const GramMatrix& gram, const char* who) {
  if (gram.rows() != gram.cols())
    throw std::invalid_argument(std::string(who) + ": matrix is not square");
  const double asym = (gram.values - gram.values.transpose()).norm();
  if (asym > 1e-10 * (1.0 + gram.values.norm()))
    throw std::invalid_argument(std::string(who) + ": matrix is not symmetric");
}

double min_eigenvalue_checked(const GramMatrix& gram, const char* who) {
  check_square_symmetric(gram, who);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
      gram.values, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

}  // namespace

NearSingularError::NearSingularError(const std::string& which,
                                     double lambda_min, double suggested)
    : std::runtime_error([&] {
        std::ostringstream msg;
        msg << which << " is near-singular: lambda_min = " << lambda_min
            << " < " << kSingularTolerance
            << "; suggested diagonal jitter = " << suggested;
        return msg.str();
      }()),
      lambda_min_(lambda_min),
      suggested_jitter_(suggested) {}

GramMatrix gram_exact(const Eigen::MatrixXd& inputs) {
  check_unit_rows(inputs, "gram_exact");
  const Eigen::Index n = inputs.rows();
  GramMatrix gram;
  gram.values.resize(n, n);
  gram.kind = GramKind::kExactInfinite;
  gram.meta = "exact";
  for (Eigen::Index i = 0; i < n; ++i) {
    gram.values(i, i) = 0.5;  // c = 1 exactly on the diagonal
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = kernel_entry(inputs.row(i).dot(inputs.row(j)));
      gram.values(i, j) = v;
      gram.values(j, i) = v;
    }
  }
  return gram;
}

GramMatrix gram_exact(const Eigen::MatrixXd& inputs_a,
                      const Eigen::MatrixXd& inputs_b) {
  check_unit_rows(inputs_a, "gram_exact");
  check_unit_rows(inputs_b, "gram_exact");
  if (inputs_a.cols() != inputs_b.cols())
    throw std::invalid_argument("gram_exact: dimension mismatch");
  GramMatrix gram;
  gram.kind = GramKind::kExactInfinite;
  gram.meta = "exact";
  gram.values.resize(inputs_a.rows(), inputs_b.rows());
  for (Eigen::Index i = 0; i < inputs_a.rows(); ++i)
    for (Eigen::Index j = 0; j < inputs_b.rows(); ++j)
      gram.values(i, j) = kernel_entry(inputs_a.row(i).dot(inputs_b.row(j)));
  return gram;
}

GramMatrix gram_monte_carlo(const Eigen::MatrixXd& inputs_a,
                            const Eigen::MatrixXd& inputs_b,
                            std::int64_t samples, std::uint64_t seed) {
  check_unit_rows(inputs_a, "gram_monte_carlo");
  check_unit_rows(inputs_b, "gram_monte_carlo");
  if (inputs_a.cols() != inputs_b.cols())
    throw std::invalid_argument("gram_monte_carlo: dimension mismatch");
  if (samples < 1)
    throw std::invalid_argument("gram_monte_carlo: samples must be >= 1");

  const Eigen::Index d = inputs_a.cols();
  const Eigen::Index na = inputs_a.rows();
  const Eigen::Index nb = inputs_b.rows();
  const Eigen::MatrixXd dots = inputs_a * inputs_b.transpose();

  // Joint activation counts, accumulated in batches. The w stream is a fixed
  // function of the seed, so the batch size does not affect the result.
  SplitRng rng(seed);
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(na, nb);
  const std::int64_t batch_cap = 1 << 14;
  for (std::int64_t done = 0; done < samples;) {
    const auto batch =
        static_cast<Eigen::Index>(std::min<std::int64_t>(batch_cap, samples - done));
    const Eigen::MatrixXd w = rng.normal_matrix(d, batch);
    const Eigen::MatrixXd active_a =
        ((inputs_a * w).array() >= 0.0).cast<double>();
    const Eigen::MatrixXd active_b =
        ((inputs_b * w).array() >= 0.0).cast<double>();
    counts.noalias() += active_a * active_b.transpose();
    done += batch;
  }

  const double inv_s = 1.0 / static_cast<double>(samples);
  const Eigen::ArrayXXd p = counts.array() * inv_s;
  GramMatrix gram;
  gram.kind = GramKind::kMonteCarlo;
  {
    std::ostringstream meta;
    meta << "mc samples=" << samples << " seed=" << seed;
    gram.meta = meta.str();
  }
  gram.values = (dots.array() * p).matrix();
  gram.stderrs =
      (dots.array().abs() * (p * (1.0 - p) * inv_s).sqrt()).matrix();
  return gram;
}

GramMatrix gram_empirical(const Eigen::MatrixXd& hidden_weights,
                          const Eigen::MatrixXd& inputs_a,
                          const Eigen::MatrixXd& inputs_b) {
  check_unit_rows(inputs_a, "gram_empirical");
  check_unit_rows(inputs_b, "gram_empirical");
  const Eigen::Index d = hidden_weights.rows();
  const Eigen::Index m = hidden_weights.cols();
  if (inputs_a.cols() != d || inputs_b.cols() != d)
    throw std::invalid_argument("gram_empirical: dimension mismatch");

  const Eigen::MatrixXd active_a =
      ((inputs_a * hidden_weights).array() >= 0.0).cast<double>();
  const Eigen::MatrixXd active_b =
      ((inputs_b * hidden_weights).array() >= 0.0).cast<double>();
  GramMatrix gram;
  gram.kind = GramKind::kEmpiricalFinite;
  gram.meta = "empirical m=" + std::to_string(m);
  gram.values = ((inputs_a * inputs_b.transpose()).array() *
                 (active_a * active_b.transpose()).array() /
                 static_cast<double>(m))
                    .matrix();
  return gram;
}

double min_eigenvalue(const GramMatrix& gram) {
  return min_eigenvalue_checked(gram, "min_eigenvalue");
}

Eigen::MatrixXd spd_solve(const Eigen::MatrixXd& matrix,
                          const Eigen::MatrixXd& rhs, double* jitter_used) {
  if (jitter_used) *jitter_used = 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(matrix);
  if (llt.info() != Eigen::Success) {
    const double jitter = suggested_jitter(matrix);
    Eigen::MatrixXd jittered = matrix;
    jittered.diagonal().array() += jitter;
    llt.compute(jittered);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("spd_solve: Cholesky failed even with jitter");
    if (jitter_used) *jitter_used = jitter;
  }
  // One step of iterative refinement keeps the forward error near machine
  // precision on the moderately conditioned kernels seen here.
  Eigen::MatrixXd x = llt.solve(rhs);
  x += llt.solve(rhs - matrix * x);
  return x;
}

Eigen::VectorXd transformed_labels(const GramMatrix& gram_source,
                                   const GramMatrix& gram_cross,
                                   const Eigen::VectorXd& labels_source) {
  const double lambda = min_eigenvalue_checked(gram_source, "transformed_labels");
  if (lambda < kSingularTolerance)
    throw NearSingularError("transformed_labels: H_source", lambda,
                            suggested_jitter(gram_source.values));
  if (gram_cross.rows() != gram_source.rows() ||
      labels_source.size() != gram_source.rows())
    throw std::invalid_argument("transformed_labels: shape mismatch");
  const Eigen::VectorXd z = spd_solve(gram_source.values, labels_source, nullptr);
  return gram_cross.values.transpose() * z;
}

TaskSimilarity task_similarity(const Eigen::VectorXd& labels_target,
                               const Eigen::VectorXd& labels_transformed,
                               const GramMatrix& gram_target) {
  const double lambda = min_eigenvalue_checked(gram_target, "task_similarity");
  if (lambda < kSingularTolerance)
    throw NearSingularError("task_similarity: H_target", lambda,
                            suggested_jitter(gram_target.values));
  if (labels_target.size() != labels_transformed.size() ||
      labels_target.size() != gram_target.rows())
    throw std::invalid_argument("task_similarity: shape mismatch");
  const Eigen::VectorXd delta = labels_target - labels_transformed;
  TaskSimilarity sim;
  sim.l2 = delta.norm();
  const Eigen::VectorXd solved = spd_solve(gram_target.values, delta, nullptr);
  sim.quadform = std::max(delta.dot(solved), 0.0);
  return sim;
}

GramBundle make_bundle(const tasks::TaskDataset& source,
                       const tasks::TaskDataset& target,
                       const BundleOptions& options) {
  if (source.d() != target.d())
    throw std::invalid_argument("make_bundle: input dimension mismatch");

  GramBundle bundle;
  bundle.gram_source = gram_exact(source.inputs);
  bundle.gram_target = gram_exact(target.inputs);
  bundle.gram_cross = gram_exact(source.inputs, target.inputs);
  bundle.gram_cross.meta = "exact cross";
  bundle.labels_source = source.labels;
  bundle.labels_target = target.labels;

  bundle.lambda_source = min_eigenvalue(bundle.gram_source);
  bundle.lambda_target = min_eigenvalue(bundle.gram_target);
  for (auto [lambda, gram, name] :
       {std::tuple{bundle.lambda_source, &bundle.gram_source, "H_source"},
        std::tuple{bundle.lambda_target, &bundle.gram_target, "H_target"}}) {
    if (lambda < kSingularTolerance) {
      if (!options.allow_near_singular)
        throw NearSingularError(std::string("make_bundle: ") + name, lambda,
                                suggested_jitter(gram->values));
      const double jitter = suggested_jitter(gram->values);
      gram->values.diagonal().array() += jitter;
      bundle.jitter_used = std::max(bundle.jitter_used, jitter);
    }
  }

  double jitter = 0.0;
  const Eigen::VectorXd z =
      spd_solve(bundle.gram_source.values, bundle.labels_source, &jitter);
  bundle.jitter_used = std::max(bundle.jitter_used, jitter);
  bundle.labels_transformed = bundle.gram_cross.values.transpose() * z;

  const Eigen::VectorXd delta = bundle.labels_target - bundle.labels_transformed;
  bundle.similarity_l2 = delta.norm();
  const Eigen::VectorXd solved_delta =
      spd_solve(bundle.gram_target.values, delta, &jitter);
  bundle.similarity_quadform = std::max(delta.dot(solved_delta), 0.0);
  bundle.jitter_used = std::max(bundle.jitter_used, jitter);
  const Eigen::VectorXd solved_labels =
      spd_solve(bundle.gram_target.values, bundle.labels_target, &jitter);
  bundle.scratch_quadform =
      std::max(bundle.labels_target.dot(solved_labels), 0.0);
  bundle.jitter_used = std::max(bundle.jitter_used, jitter);
  return bundle;
}

double theorem2_bound(const GramBundle& bundle) {
  return std::sqrt(bundle.similarity_quadform);
}

double scratch_bound(const GramBundle& bundle) {
  return std::sqrt(bundle.scratch_quadform);
}

double theorem1_prediction(const GramBundle& bundle, double grad_sq_at_init) {
  return grad_sq_at_init - bundle.labels_target.squaredNorm() +
         bundle.similarity_l2 * bundle.similarity_l2;
}

}  // namespace xferlab::ntk

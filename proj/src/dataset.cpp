#include "xferlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace xferlab::tasks {

namespace {

constexpr double kDuplicateCosine = 1.0 - 1e-9;
constexpr double kLabelTolerance = 1.0 + 1e-12;

// Seed-split streams used by this module.
enum Stream : std::uint64_t {
  kInputStream = 0,
  kLabelStream = 1,
  kRelabelStream = 2,
  kPairSourceInputs = 10,
  kPairSourceLabels = 11,
  kPairRotation = 12,
  kPairTargetInputs = 13,
  kPairTargetLabels = 14,
};

void check_params_finite(const LabelFnSpec& fn) {
  for (Eigen::Index i = 0; i < fn.params.size(); ++i) {
    if (!std::isfinite(fn.params[i]))
      throw std::invalid_argument("label_fn: non-finite parameter");
  }
}

void enforce_label_range(const Eigen::VectorXd& labels) {
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (!(std::abs(labels[i]) <= kLabelTolerance)) {
      std::ostringstream msg;
      msg << "label_fn: |y| <= 1 violated at index " << i << " (y=" << labels[i]
          << "); enable clip or rescale the teacher";
      throw std::invalid_argument(msg.str());
    }
  }
}

std::string label_fn_json(const LabelFnSpec& fn) {
  std::ostringstream out;
  out << "{\"kind\":\"" << label_kind_name(fn.kind) << "\",\"clip\":"
      << (fn.clip ? "true" : "false") << ",\"n_params\":" << fn.params.size()
      << "}";
  return out.str();
}

bool near_duplicate(const Eigen::MatrixXd& rows, Eigen::Index filled,
                    const Eigen::VectorXd& candidate) {
  for (Eigen::Index i = 0; i < filled; ++i) {
    if (rows.row(i).dot(candidate) > kDuplicateCosine) return true;
  }
  return false;
}

}  // namespace

std::string label_kind_name(LabelKind kind) {
  switch (kind) {
    case LabelKind::kLinearTeacher: return "linear-teacher";
    case LabelKind::kReluTeacher: return "relu-teacher";
    case LabelKind::kRandomSigns: return "random-signs";
    case LabelKind::kConstant: return "constant";
  }
  throw std::logic_error("unknown LabelKind");
}

LabelKind label_kind_from_name(const std::string& name) {
  if (name == "linear-teacher") return LabelKind::kLinearTeacher;
  if (name == "relu-teacher") return LabelKind::kReluTeacher;
  if (name == "random-signs") return LabelKind::kRandomSigns;
  if (name == "constant") return LabelKind::kConstant;
  throw std::invalid_argument("unknown label kind: " + name);
}

LabelFnSpec LabelFnSpec::linear_teacher(Eigen::VectorXd w, bool clip) {
  return {LabelKind::kLinearTeacher, std::move(w), clip};
}

LabelFnSpec LabelFnSpec::relu_teacher(Eigen::VectorXd w, bool clip) {
  return {LabelKind::kReluTeacher, std::move(w), clip};
}

LabelFnSpec LabelFnSpec::random_signs() {
  return {LabelKind::kRandomSigns, Eigen::VectorXd(), false};
}

LabelFnSpec LabelFnSpec::constant(double c) {
  Eigen::VectorXd p(1);
  p[0] = c;
  return {LabelKind::kConstant, p, true};
}

Eigen::VectorXd apply_label_fn(const LabelFnSpec& fn,
                               const Eigen::MatrixXd& inputs, SplitRng rng) {
  check_params_finite(fn);
  const Eigen::Index n = inputs.rows();
  Eigen::VectorXd y(n);
  switch (fn.kind) {
    case LabelKind::kLinearTeacher:
    case LabelKind::kReluTeacher: {
      if (fn.params.size() != inputs.cols())
        throw std::invalid_argument("label_fn: teacher dimension mismatch");
      y = inputs * fn.params;
      if (fn.kind == LabelKind::kReluTeacher) y = y.cwiseMax(0.0);
      break;
    }
    case LabelKind::kRandomSigns: {
      for (Eigen::Index i = 0; i < n; ++i) y[i] = rng.sign();
      break;
    }
    case LabelKind::kConstant: {
      if (fn.params.size() != 1)
        throw std::invalid_argument("label_fn: constant expects one parameter");
      y.setConstant(fn.params[0]);
      break;
    }
  }
  if (fn.clip) y = y.cwiseMax(-1.0).cwiseMin(1.0);
  enforce_label_range(y);
  return y;
}

TaskDataset gen_task(Eigen::Index n, Eigen::Index d, const LabelFnSpec& fn,
                     std::uint64_t seed, const std::string& name) {
  if (n < 1) throw std::invalid_argument("gen_task: n must be >= 1");
  if (d < 2) throw std::invalid_argument("gen_task: d must be >= 2");
  check_params_finite(fn);

  SplitRng root(seed);
  SplitRng input_rng = root.split(kInputStream);
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::VectorXd row = input_rng.unit_vector(d);
    while (near_duplicate(x, i, row)) row = input_rng.unit_vector(d);
    x.row(i) = row.transpose();
  }

  TaskDataset task;
  task.inputs = std::move(x);
  task.labels = apply_label_fn(fn, task.inputs, root.split(kLabelStream));
  task.name = name;
  task.seed = seed;
  std::ostringstream prov;
  prov << "{\"op\":\"gen_task\",\"label_fn\":" << label_fn_json(fn)
       << ",\"rng_version\":" << SplitRng::kRngVersion << "}";
  task.provenance = prov.str();
  return task;
}

TaskDataset rotate_inputs(const TaskDataset& task,
                          const Eigen::MatrixXd& rotation) {
  const Eigen::Index d = task.d();
  if (rotation.rows() != d || rotation.cols() != d)
    throw std::invalid_argument("rotate_inputs: rotation shape mismatch");
  const double ortho_err =
      (rotation.transpose() * rotation - Eigen::MatrixXd::Identity(d, d))
          .norm();
  if (ortho_err > 1e-10) {
    std::ostringstream msg;
    msg << "rotate_inputs: matrix is not orthogonal, ||R^T R - I|| = "
        << ortho_err;
    throw std::invalid_argument(msg.str());
  }
  TaskDataset out = task;
  // Rows are samples, so x_i -> R x_i is inputs * R^T.
  out.inputs = task.inputs * rotation.transpose();
  out.provenance = "{\"op\":\"rotate_inputs\",\"parent\":" + task.provenance + "}";
  return out;
}

TaskDataset relabel(const TaskDataset& task, const LabelFnSpec& fn) {
  TaskDataset out = task;
  out.labels =
      apply_label_fn(fn, task.inputs, SplitRng(task.seed).split(kRelabelStream));
  std::ostringstream prov;
  prov << "{\"op\":\"relabel\",\"label_fn\":" << label_fn_json(fn)
       << ",\"parent\":" << task.provenance << "}";
  out.provenance = prov.str();
  return out;
}

std::pair<TaskDataset, TaskDataset> make_task_pair(const TaskPairSpec& spec) {
  if (spec.n_source < 1 || spec.n_target < 1)
    throw std::invalid_argument("make_task_pair: counts must be positive");
  if (spec.d < 2) throw std::invalid_argument("make_task_pair: d must be >= 2");
  if (!(spec.input_overlap >= 0.0 && spec.input_overlap <= 1.0))
    throw std::invalid_argument("make_task_pair: input_overlap not in [0,1]");
  check_params_finite(spec.source_labels);
  check_params_finite(spec.target_labels);

  SplitRng root(spec.seed);

  TaskDataset source;
  {
    SplitRng input_rng = root.split(kPairSourceInputs);
    Eigen::MatrixXd x(spec.n_source, spec.d);
    for (Eigen::Index i = 0; i < spec.n_source; ++i) {
      Eigen::VectorXd row = input_rng.unit_vector(spec.d);
      while (near_duplicate(x, i, row)) row = input_rng.unit_vector(spec.d);
      x.row(i) = row.transpose();
    }
    source.inputs = std::move(x);
    source.labels = apply_label_fn(spec.source_labels, source.inputs,
                                   root.split(kPairSourceLabels));
    source.name = "source";
    source.seed = spec.seed;
  }

  // Target: the first round(overlap * n) samples come straight from the
  // shared process; the rest are rotated while their labels are computed in
  // pre-rotation coordinates, so the input-label relation is rotated.
  Eigen::MatrixXd rotation = root.split(kPairRotation).rotation_matrix(spec.d);
  const auto n_overlap = static_cast<Eigen::Index>(
      std::llround(spec.input_overlap * static_cast<double>(spec.n_target)));

  TaskDataset target;
  {
    SplitRng input_rng = root.split(kPairTargetInputs);
    Eigen::MatrixXd pre(spec.n_target, spec.d);  // pre-rotation coordinates
    Eigen::MatrixXd x(spec.n_target, spec.d);
    for (Eigen::Index i = 0; i < spec.n_target; ++i) {
      while (true) {
        Eigen::VectorXd z = input_rng.unit_vector(spec.d);
        Eigen::VectorXd row = (i < n_overlap) ? z : (rotation * z).eval();
        if (!near_duplicate(x, i, row)) {
          pre.row(i) = z.transpose();
          x.row(i) = row.transpose();
          break;
        }
      }
    }
    target.inputs = std::move(x);
    target.labels = apply_label_fn(spec.target_labels, pre,
                                   root.split(kPairTargetLabels));
    target.name = "target";
    target.seed = spec.seed;
  }

  std::ostringstream prov;
  prov << "{\"op\":\"make_task_pair\",\"overlap\":" << spec.input_overlap
       << ",\"n_source\":" << spec.n_source << ",\"n_target\":" << spec.n_target
       << ",\"d\":" << spec.d << ",\"rng_version\":" << SplitRng::kRngVersion
       << "}";
  source.provenance = prov.str();
  target.provenance = prov.str();
  return {std::move(source), std::move(target)};
}

ValidationReport validate(const TaskDataset& task) {
  ValidationReport report;
  const Eigen::Index n = task.n();
  for (Eigen::Index i = 0; i < n; ++i) {
    report.max_norm_deviation = std::max(
        report.max_norm_deviation, std::abs(task.inputs.row(i).norm() - 1.0));
    const double abs_label = std::abs(task.labels[i]);
    if (abs_label > report.max_abs_label) {
      report.max_abs_label = abs_label;
      if (abs_label > kLabelTolerance) report.bad_label_index = i;
    }
  }
  for (Eigen::Index i = 0; i < n && !report.has_duplicate; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (task.inputs.row(i).dot(task.inputs.row(j)) > kDuplicateCosine) {
        report.has_duplicate = true;
        report.duplicate_i = i;
        report.duplicate_j = j;
        break;
      }
    }
  }
  report.pass = report.max_norm_deviation <= 1e-12 &&
                report.bad_label_index < 0 && !report.has_duplicate &&
                task.labels.size() == n && n >= 1 && task.d() >= 2;
  return report;
}

}  // namespace xferlab::tasks

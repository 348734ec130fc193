#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include <Eigen/Core>

#include "xferlab/rng.hpp"

namespace xferlab::tasks {

// Synthetic regression tasks: n unit-norm inputs in R^d with labels in [-1,1].

enum class LabelKind { kLinearTeacher, kReluTeacher, kRandomSigns, kConstant };

std::string label_kind_name(LabelKind kind);
LabelKind label_kind_from_name(const std::string& name);

struct LabelFnSpec {
  LabelKind kind = LabelKind::kConstant;
  Eigen::VectorXd params;  // teacher weights, or [c] for kConstant
  bool clip = true;        // clamp emitted labels to [-1,1]

  static LabelFnSpec linear_teacher(Eigen::VectorXd w, bool clip = true);
  static LabelFnSpec relu_teacher(Eigen::VectorXd w, bool clip = true);
  static LabelFnSpec random_signs();
  static LabelFnSpec constant(double c);
};

struct TaskDataset {
  Eigen::MatrixXd inputs;  // n x d, each row unit-norm
  Eigen::VectorXd labels;  // |y_i| <= 1
  std::string name;
  std::uint64_t seed = 0;
  std::string provenance = "{}";  // JSON echo of how the task was produced

  Eigen::Index n() const { return inputs.rows(); }
  Eigen::Index d() const { return inputs.cols(); }
};

struct TaskPairSpec {
  Eigen::Index n_source = 0;
  Eigen::Index n_target = 0;
  Eigen::Index d = 0;
  double input_overlap = 1.0;  // in [0,1]
  LabelFnSpec source_labels;
  LabelFnSpec target_labels;
  std::uint64_t seed = 0;
};

struct ValidationReport {
  double max_norm_deviation = 0.0;
  double max_abs_label = 0.0;
  bool has_duplicate = false;
  Eigen::Index duplicate_i = -1;
  Eigen::Index duplicate_j = -1;
  Eigen::Index bad_label_index = -1;
  bool pass = false;
};

// Labels for the given inputs. kRandomSigns consumes the generator; the
// teacher kinds are deterministic functions of the inputs.
Eigen::VectorXd apply_label_fn(const LabelFnSpec& fn,
                               const Eigen::MatrixXd& inputs, SplitRng rng);

// n inputs uniform on the unit sphere (Gaussian draw, then normalize);
// rows closer than cosine 1 - 1e-9 to an earlier row are resampled.
TaskDataset gen_task(Eigen::Index n, Eigen::Index d, const LabelFnSpec& fn,
                     std::uint64_t seed, const std::string& name = "task");

// Inputs replaced by inputs * rotation^T (row convention); labels unchanged.
// Rejects matrices with ||R^T R - I|| beyond 1e-10.
TaskDataset rotate_inputs(const TaskDataset& task,
                          const Eigen::MatrixXd& rotation);

// Same inputs, labels recomputed from fn.
TaskDataset relabel(const TaskDataset& task, const LabelFnSpec& fn);

// Source/target pair. A fraction `input_overlap` of target samples is drawn
// fresh from the source generative process; the remainder has its
// input-label relation rotated by a random rotation (the synthetic analog of
// transforming the inputs while keeping the labeling rule).
std::pair<TaskDataset, TaskDataset> make_task_pair(const TaskPairSpec& spec);

ValidationReport validate(const TaskDataset& task);

}  // namespace xferlab::tasks

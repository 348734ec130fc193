#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "xferlab/dataset.hpp"
#include "xferlab/ntk.hpp"
#include "xferlab/train.hpp"

namespace xferlab::shallow {

using xferlab::DeviationRef;
using xferlab::TrainConfig;
using xferlab::TrainTrace;

// Two-layer ReLU network u(x) = (1/sqrt(m)) a^T relu(W^T x) with fixed signs
// a and trainable W, trained by full-batch gradient descent on squared loss.

struct ShallowNet {
  Eigen::Index d = 0;
  Eigen::Index m = 0;
  double kappa = 1.0;
  Eigen::MatrixXd W;       // d x m, column r is hidden unit r
  Eigen::VectorXd a;       // entries in {-1,+1}, never updated
  Eigen::MatrixXd W_init;  // frozen snapshot taken at construction
};

struct NetConfig {
  Eigen::Index m = 1024;
  double kappa = 1e-2;
  std::uint64_t seed = 0;
};

ShallowNet init_net(Eigen::Index d, Eigen::Index m, double kappa,
                    std::uint64_t seed);

Eigen::VectorXd forward(const ShallowNet& net, const Eigen::MatrixXd& inputs);

double loss(const ShallowNet& net, const Eigen::MatrixXd& inputs,
            const Eigen::VectorXd& labels);

// Closed-form gradient: column r is (1/sqrt(m)) a_r sum_i (u_i-y_i)
// 1{w_r.x_i >= 0} x_i. The ReLU subgradient at 0 is taken as 0.
Eigen::MatrixXd grad_w(const ShallowNet& net, const Eigen::MatrixXd& inputs,
                       const Eigen::VectorXd& labels);

struct ActivationGrad {
  Eigen::MatrixXd per_sample;  // m x n, column i = (1/sqrt(m)) a (u_i - y_i)
  double squared_norm = 0.0;   // equals ||u - y||^2 exactly since a^T a = m
};

ActivationGrad grad_activations(const ShallowNet& net,
                                const Eigen::MatrixXd& inputs,
                                const Eigen::VectorXd& labels);

// Explicit (m*d) x n trajectory matrix; column i stacks blocks
// (1/sqrt(m)) 1{w_r.x_i>=0} a_r x_i over r. Z^T Z equals the empirical Gram.
// Refuses to materialize more than max_entries doubles.
Eigen::MatrixXd z_matrix(const ShallowNet& net, const Eigen::MatrixXd& inputs,
                         std::int64_t max_entries = 8'000'000);

// Fraction of (unit, sample) ReLU indicators that differ between two nets.
double activation_flip_fraction(const ShallowNet& net_now,
                                const ShallowNet& net_ref,
                                const Eigen::MatrixXd& inputs);

// Full-batch gradient descent. Records step 0, every record_every-th step,
// and the final state. Aborts when the residual exceeds 1e3 x its initial
// value. Weight deviation and flips are measured against W_init (kInit) or
// against the weights this call started from (kStart).
std::pair<ShallowNet, TrainTrace> train_gd(const ShallowNet& net,
                                           const tasks::TaskDataset& task,
                                           const TrainConfig& cfg,
                                           DeviationRef ref);

// Step-size rules. conservative_eta is the lambda/(2 n^2) default; stable_eta
// is 1/lambda_max of the target kernel, still convergent in the
// over-parametrized regime but orders of magnitude faster to converge.
double conservative_eta(double lambda_min, Eigen::Index n);
double stable_eta(const ntk::GramMatrix& gram);

// kappa scale rule min(0.1, lambda^2 delta / (n_P^2 sqrt(n_Q))), floored at
// 1e-4.
double default_kappa(double lambda_source, double delta, Eigen::Index n_source,
                     Eigen::Index n_target);

struct TransferReport {
  ShallowNet net_pretrained;
  ShallowNet net_finetuned;
  TrainTrace pretrain_trace;
  TrainTrace finetune_trace;
  double weight_movement = 0.0;  // ||W(Q) - W(P)||_F
  ntk::GramBundle bundle;
};

TransferReport pretrain_then_transfer(const tasks::TaskDataset& source,
                                      const tasks::TaskDataset& target,
                                      const NetConfig& net_cfg,
                                      const TrainConfig& pre_cfg,
                                      const TrainConfig& fine_cfg);

// ----- Theorem harnesses ---------------------------------------------------

struct Theorem1Report {
  std::vector<Eigen::Index> m_values;
  // Indexed [m][seed].
  std::vector<std::vector<double>> measured;
  std::vector<std::vector<double>> predicted;
  std::vector<std::vector<double>> gap;
  std::vector<double> median_gap;         // per m
  bool gap_non_increasing = false;
};

Theorem1Report verify_theorem1(const tasks::TaskDataset& source,
                               const tasks::TaskDataset& target,
                               const std::vector<Eigen::Index>& m_values,
                               double kappa, double delta,
                               const std::vector<std::uint64_t>& seeds);

struct Theorem2Report {
  std::vector<Eigen::Index> m_values;
  std::vector<double> bounds;  // per family member (m-independent)
  // Indexed [m][seed][family member].
  std::vector<std::vector<std::vector<double>>> measured;
  std::vector<std::vector<double>> spearman;  // [m][seed]
  std::vector<double> median_slack;           // per m, max(0, measured-bound)
  bool slack_non_increasing = false;
  int seeds_with_rank_correlation = 0;  // spearman >= 0.9 at largest m
  int seed_count = 0;
  // Identical-task control at the largest m, first seed.
  double control_bound = 0.0;
  double control_movement = 0.0;
  double scratch_movement = 0.0;
  bool verdict = false;
};

// Builds a family of targets with increasing label distortion from `target`
// (family member t keeps inputs and blends labels toward an independent
// random-sign labeling), fine-tunes the source-pretrained net to each, and
// compares movement against the kernel bound.
Theorem2Report verify_theorem2(const tasks::TaskDataset& source,
                               const tasks::TaskDataset& target,
                               const std::vector<Eigen::Index>& m_values,
                               double kappa, double delta,
                               const std::vector<std::uint64_t>& seeds,
                               int family_size = 5);

struct ConvergenceReport {
  double eta = 0.0;
  double lambda_target = 0.0;
  std::vector<bool> seed_passed;
  std::vector<double> worst_margin;  // max over k of lhs/rhs - 1 per seed
  int passing_count = 0;
};

// Per-step contraction check: residual^2(k) <= (1 - eta*lambda_Q/2)^k *
// residual^2(0) * (1 + tolerance) along fine-tuning, with
// eta = lambda_Q / (2 n_Q^2).
ConvergenceReport verify_convergence(const tasks::TaskDataset& source,
                                     const tasks::TaskDataset& target,
                                     const NetConfig& net_cfg,
                                     int pretrain_steps, int finetune_steps,
                                     const std::vector<std::uint64_t>& seeds,
                                     double tolerance = 1e-6);

struct EpochSweepRow {
  int pretrain_steps = 0;
  double source_residual = 0.0;
  double target_residual = 0.0;
};

struct SweepReport {
  std::vector<EpochSweepRow> rows;
};

// Fine-tunes snapshots taken at the given pretraining lengths (checkpoints
// must be increasing; 0 means training the target from scratch weights).
SweepReport epoch_sweep_transfer(const tasks::TaskDataset& source,
                                 const tasks::TaskDataset& target,
                                 const NetConfig& net_cfg,
                                 const std::vector<int>& checkpoints,
                                 const TrainConfig& pre_cfg,
                                 const TrainConfig& fine_cfg);

}  // namespace xferlab::shallow

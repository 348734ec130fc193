#pragma once

#include <cstddef>
#include <vector>

namespace xferlab {

struct TrainConfig {
  double eta = 0.0;
  int steps = 1;
  double stop_residual = 0.0;  // early stop on ||u - y||_2
  int record_every = 1;
  double delta = 0.1;  // failure-probability budget, reporting only
};

// Reference against which weight deviation and activation flips are measured:
// the frozen random initialization, or the weights a training call started
// from (the pretrained point, when fine-tuning).
enum class DeviationRef { kInit, kStart };

struct TrainTrace {
  std::vector<int> step;
  std::vector<double> loss;
  std::vector<double> residual_norm;     // ||u - y||_2
  std::vector<double> weight_deviation;  // (1/sqrt(n)) ||W - W_ref||_F
  std::vector<double> grad_fro_norm;
  std::vector<double> flip_fraction;     // activation flips vs W_ref
  DeviationRef ref = DeviationRef::kInit;
  bool diverged = false;

  std::size_t size() const { return step.size(); }
};

}  // namespace xferlab

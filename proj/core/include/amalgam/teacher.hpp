#pragma once

#include <cstdint>
#include <vector>

#include "amalgam/metrics.hpp"
#include "amalgam/network.hpp"
#include "amalgam/optimizer.hpp"
#include "amalgam/scene.hpp"

namespace amalgam {

struct TeacherTrainConfig {
  int epochs = 12;
  std::int64_t max_steps = -1;  // >= 0 caps the number of optimizer steps
  int batch_size = 8;
  OptimizerConfig optim = OptimizerConfig::desk();
  std::uint64_t seed = 0;
};

struct CurvePoint {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TeacherResult {
  Model model;
  std::vector<CurvePoint> curve;
};

// Supervised training with ground truth (Eq. 1 / 3 / 4 for seg / depth /
// normal). Parameters are initialised from `seed`. Throws DivergenceError on
// a non-finite loss.
TeacherResult train_teacher(const NetworkSpec& spec, const LabeledSet& train,
                            const TeacherTrainConfig& cfg);

// Evaluation path: reads ground truth of `eval` for every head of the model.
MetricReport evaluate(const Model& model, const LabeledSet& eval, int batch_size = 16);

// Batch order of one epoch.
std::vector<std::vector<int>> epoch_batches(int count, int batch_size, std::uint64_t seed,
                                            std::uint64_t epoch);

}  // namespace amalgam

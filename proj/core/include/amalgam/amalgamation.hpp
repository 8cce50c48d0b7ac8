#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "amalgam/metrics.hpp"
#include "amalgam/network.hpp"
#include "amalgam/optimizer.hpp"
#include "amalgam/scene.hpp"

namespace amalgam {

enum class LossMode : std::uint8_t {
  kGraft,      // task losses through the grafted teacher (default)
  kFeatureL2,  // squared distance to the teacher's own block features
};

const char* mode_name(LossMode mode);
// "graft" or "feat-l2"; throws UsageError otherwise.
LossMode parse_mode(const std::string& name);

struct AmalgamationConfig {
  LossMode mode = LossMode::kGraft;
  double lambda_depth = 1.0;
  double lambda_seg = 1.0;
  double lambda_norm = 1.0;
  double lambda_u2 = 1.0;  // online: weight of the TargetNet-2 term
  int epochs_per_block = 2;
  int batch_size = 8;
  int finetune_steps = 200;
  int coding_reduction = 4;
  // Images used to measure the fine-tune loss before and after.
  int probe_samples = 64;
  OptimizerConfig optim = OptimizerConfig::desk();
  std::uint64_t seed = 0;
};

void validate(const AmalgamationConfig& cfg);

// Frozen-network outputs used as labels: one-hot classes, decoded depth,
// unit normals.
struct Supervision {
  std::optional<LabelMap> seg;
  std::optional<Tensor> depth;
  std::optional<Tensor> normal;

  Supervision gather(const std::vector<int>& indices) const;
};

Supervision supervision_from(const Model& model, const Tensor& images, int chunk = 16);

// Weighted task losses of `heads` against `sup`; `values` (optional) gets
// the unweighted value of each term, in order.
Var supervised_loss(const std::vector<HeadOutput>& heads, const Supervision& sup,
                    const std::vector<std::pair<TaskKind, double>>& terms,
                    std::vector<double>* values = nullptr);

// A frozen network the student is grafted into. `terms` weights the heads
// inside the target, `weight` the target as a whole.
struct GraftTarget {
  std::string name;
  const Model* model = nullptr;
  double weight = 1.0;
  std::vector<std::pair<TaskKind, double>> terms;
  // Copies of its layers stay frozen inside the assembled student.
  bool frozen_in_student = false;

  static GraftTarget teacher(const Model& m, double weight);
};

// L[t][n-1] is the end-of-block loss of column t.
struct BlockLossTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> losses;

  int blocks() const { return losses.empty() ? 0 : static_cast<int>(losses.front().size()); }
  const std::vector<double>& column(const std::string& name) const;
};

struct BranchOutPlan {
  int blocks = 0;
  std::vector<std::pair<std::string, int>> points;
  std::vector<int> removed_blocks;  // student blocks after the last branch point

  int at(const std::string& name) const;
  int last() const;
};

// argmin over the decoder half (N/2, N] per column, ties towards larger n.
// Throws DataError on NaN, ConfigError on a table of the wrong length.
BranchOutPlan select_branch_out(const BlockLossTable& table, int blocks);

struct BlockResult {
  std::map<std::string, double> losses;          // graft loss per target
  std::map<std::string, double> terms;           // "<target>.<task>" components
  std::map<std::string, double> feature_losses;  // feature mode only
  std::vector<double> curve;                     // total loss per step
};

// Block-wise trainer for one student against a set of frozen targets. Only
// images are ever seen.
class BlockwiseTrainer {
 public:
  BlockwiseTrainer(NetworkSpec student_spec, std::vector<GraftTarget> targets,
                   const ImageSource& data, AmalgamationConfig cfg);

  // Trains block n (must be the next untrained block) together with one fresh
  // channel coding per target; blocks 1..n-1 stay frozen.
  BlockResult train_block(int n);
  BlockLossTable train_all();

  const NetworkSpec& student_spec() const { return spec_; }
  const ModelState& student_state() const { return state_; }
  ModelState& mutable_student_state() { return state_; }
  int trained_blocks() const { return trained_; }
  const std::vector<GraftTarget>& targets() const { return targets_; }
  const ChannelCoding& coding(int block, const std::string& target) const;
  std::size_t coding_params_at(int block) const;
  const Supervision& supervision(const std::string& target) const;
  const Tensor& images() const { return images_; }

 private:
  NetworkSpec spec_;
  ModelState state_;
  std::vector<GraftTarget> targets_;
  AmalgamationConfig cfg_;
  Tensor images_;
  Tensor inputs_;  // cached F^{n-1} for every image
  std::map<std::string, Supervision> supervision_;
  std::map<std::pair<int, std::string>, ChannelCoding> codings_;
  int trained_ = 0;
};

struct BranchSource {
  std::string name;
  const Model* model = nullptr;
  int point = 0;
  ChannelCoding coding;
};

struct AssembledTarget {
  Model model;
  // Head segment -> index into the branch list.
  std::map<int, int> head_branch;
  // Parameters copied from networks that must stay frozen.
  std::set<std::string> frozen;
};

// Shared root = student blocks 1..max p; each branch attaches after root block
// p with its coding followed by everything the source network computes after
// its block p (layers and heads). Throws ConfigError when p <= N/2.
AssembledTarget assemble_target(const NetworkSpec& student_spec,
                                const ModelState& student_state,
                                const std::vector<BranchSource>& branches,
                                const std::set<std::string>& frozen_sources = {});

// Parameter count of the assembled network without building its state.
std::size_t assembled_param_count(const NetworkSpec& student_spec,
                                  const std::vector<std::pair<const NetworkSpec*, int>>& branches,
                                  int coding_reduction);

struct FineTuneResult {
  std::vector<double> curve;
  double initial_loss = 0.0;  // on the probe images
  double final_loss = 0.0;
};

FineTuneResult fine_tune(AssembledTarget& target, const std::vector<GraftTarget>& branches,
                         const std::vector<Supervision>& supervision, const Tensor& images,
                         const AmalgamationConfig& cfg);

struct ParamAccounting {
  std::map<std::string, std::size_t> teachers;
  std::size_t teacher_sum = 0;
  std::size_t student_trunk = 0;  // N-block student before assembly
  std::size_t coding_max_block = 0;
  std::size_t student = 0;  // assembled
  std::size_t adapters = 0;
};

struct FreezeAudit {
  std::string name;
  std::uint64_t before = 0;
  std::uint64_t after = 0;
};

struct AmalgamationReport {
  std::string pipeline;  // two | offline3 | online
  LossMode mode = LossMode::kGraft;
  int blocks = 0;
  BlockLossTable table;
  BlockLossTable components;
  BlockLossTable feature_table;
  BranchOutPlan plan;
  ParamAccounting params;
  int finetune_steps = 0;
  FineTuneResult finetune;
  std::map<std::string, MetricReport> metrics;
  std::vector<FreezeAudit> freeze;
  std::uint64_t train_ground_truth_reads = 0;
  std::uint64_t student_hash = 0;
};

struct AmalgamationResult {
  Model student;
  AmalgamationReport report;
};

// Full pipeline: block-wise training, branch out, assembly, fine-tune and
// (when `eval` is given) evaluation of the student and every target.
AmalgamationResult amalgamate(const NetworkSpec& student_spec, std::vector<GraftTarget> targets,
                              const ImageSource& train, const LabeledSet* eval,
                              const AmalgamationConfig& cfg, const std::string& pipeline);

AmalgamationResult amalgamate_two(const NetworkSpec& student_spec, const Model& segnet,
                                  const Model& depthnet, const ImageSource& train,
                                  const LabeledSet* eval, const AmalgamationConfig& cfg);

AmalgamationResult amalgamate_offline3(const NetworkSpec& student_spec, const Model& segnet,
                                       const Model& depthnet, const Model& normnet,
                                       const ImageSource& train, const LabeledSet* eval,
                                       const AmalgamationConfig& cfg);

// TargetNet-2 acts as a frozen teacher reached through the U coding; NormNet
// through the M coding.
AmalgamationResult amalgamate_online(const Model& target2, const Model& normnet,
                                     const ImageSource& train, const LabeledSet* eval,
                                     const AmalgamationConfig& cfg);

// The teacher's blocks without its head.
NetworkSpec student_spec_from(const Model& teacher);

}  // namespace amalgam

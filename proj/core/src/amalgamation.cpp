#include "amalgam/amalgamation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include <spdlog/spdlog.h>

#include "amalgam/error.hpp"
#include "amalgam/losses.hpp"
#include "amalgam/ops.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/teacher.hpp"

namespace amalgam {

const char* mode_name(LossMode mode) {
  return mode == LossMode::kGraft ? "graft" : "feat-l2";
}

LossMode parse_mode(const std::string& name) {
  if (name == "graft") return LossMode::kGraft;
  if (name == "feat-l2") return LossMode::kFeatureL2;
  throw UsageError("unknown mode '" + name + "' (expected graft or feat-l2)");
}

void validate(const AmalgamationConfig& cfg) {
  for (double l : {cfg.lambda_depth, cfg.lambda_seg, cfg.lambda_norm, cfg.lambda_u2}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and >= 0");
  }
  if (cfg.epochs_per_block < 1) throw ConfigError("amalg.epochs_per_block must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (cfg.finetune_steps < 0) throw ConfigError("amalg.finetune_steps must be >= 0");
  if (cfg.coding_reduction < 1) throw ConfigError("amalg.coding_reduction must be >= 1");
  if (cfg.probe_samples < 1) throw ConfigError("amalg.probe_samples must be >= 1");
  validate(cfg.optim);
}

namespace {

Tensor gather(const Tensor& all, const std::vector<int>& idx) {
  const Shape s = all.shape();
  const std::size_t len = static_cast<std::size_t>(s.c) * s.h * s.w;
  Tensor out({static_cast<int>(idx.size()), s.c, s.h, s.w}, 0.0);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= s.n) throw UsageError("gather: index out of range");
    std::copy_n(all.ptr() + idx[k] * len, len, out.ptr() + k * len);
  }
  return out;
}

void put(Tensor& all, int first, const Tensor& part) {
  const Shape s = part.shape();
  const std::size_t len = static_cast<std::size_t>(s.c) * s.h * s.w;
  std::copy_n(part.ptr(), part.size(), all.ptr() + first * len);
}

std::vector<int> range(int first, int last) {
  std::vector<int> out;
  for (int i = first; i < last; ++i) out.push_back(i);
  return out;
}

Tensor normalized(const Tensor& n) {
  Tensor out = n;
  const Shape s = n.shape();
  const std::size_t plane = s.plane();
  for (int b = 0; b < s.n; ++b) {
    double* p = out.ptr() + static_cast<std::size_t>(b) * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const double len = std::max(
          std::sqrt(p[i] * p[i] + p[plane + i] * p[plane + i] + p[2 * plane + i] * p[2 * plane + i]),
          ops::kNormalEpsilon);
      p[i] /= len;
      p[plane + i] /= len;
      p[2 * plane + i] /= len;
    }
  }
  return out;
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw DivergenceError(what + " became " + std::to_string(v));
}

}  // namespace

Supervision Supervision::gather(const std::vector<int>& idx) const {
  Supervision out;
  if (seg) {
    const std::size_t plane = static_cast<std::size_t>(seg->h) * seg->w;
    LabelMap m(static_cast<int>(idx.size()), seg->h, seg->w);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy_n(seg->labels.begin() + idx[k] * plane, plane, m.labels.begin() + k * plane);
    }
    out.seg = std::move(m);
  }
  if (depth) out.depth = amalgam::gather(*depth, idx);
  if (normal) out.normal = amalgam::gather(*normal, idx);
  return out;
}

Supervision supervision_from(const Model& model, const Tensor& images, int chunk) {
  const Shape s = images.shape();
  Supervision sup;
  for (int first = 0; first < s.n; first += chunk) {
    const int last = std::min(s.n, first + chunk);
    const InferenceResult r = infer(model, gather(images, range(first, last)));
    for (const auto& h : r.heads) {
      switch (h.task) {
        case TaskKind::kSegmentation: {
          if (!sup.seg) sup.seg = LabelMap(s.n, s.h, s.w);
          const LabelMap part = one_hot_supervision(h.output);
          std::copy(part.labels.begin(), part.labels.end(),
                    sup.seg->labels.begin() + static_cast<std::size_t>(first) * s.h * s.w);
          break;
        }
        case TaskKind::kDepth:
          if (!sup.depth) sup.depth = Tensor({s.n, 1, s.h, s.w}, 0.0);
          put(*sup.depth, first, h.output);
          break;
        case TaskKind::kNormal:
          if (!sup.normal) sup.normal = Tensor({s.n, 3, s.h, s.w}, 0.0);
          put(*sup.normal, first, normalized(h.output));
          break;
      }
    }
  }
  return sup;
}

Var supervised_loss(const std::vector<HeadOutput>& heads, const Supervision& sup,
                    const std::vector<std::pair<TaskKind, double>>& terms,
                    std::vector<double>* values) {
  Var total, first;
  for (const auto& [task, weight] : terms) {
    const HeadOutput* head = nullptr;
    for (const auto& h : heads) {
      if (h.task == task) head = &h;
    }
    if (!head) throw UsageError(std::string("no ") + task_name(task) + " head to supervise");
    Tape& tape = *head->prediction.tape();
    const Shape s = head->prediction.shape();
    Var loss;
    switch (task) {
      case TaskKind::kSegmentation:
        if (!sup.seg) throw UsageError("missing segmentation supervision");
        loss = seg_loss(head->prediction, *sup.seg, 0.0, {});
        break;
      case TaskKind::kDepth: {
        if (!sup.depth) throw UsageError("missing depth supervision");
        const ValidMask mask(s.n, s.h, s.w);
        loss = depth_loss(tape.constant(*sup.depth), head->prediction, mask);
        break;
      }
      case TaskKind::kNormal: {
        if (!sup.normal) throw UsageError("missing normal supervision");
        const ValidMask mask(s.n, s.h, s.w);
        loss = norm_loss(tape.constant(*sup.normal), head->prediction, mask);
        break;
      }
    }
    if (values) values->push_back(loss.value().item());
    if (!first.valid()) first = loss;
    if (weight == 0.0) continue;
    Var term = weight == 1.0 ? loss : ops::scale(loss, weight);
    total = total.valid() ? ops::add(total, term) : term;
  }
  if (!total.valid()) {
    if (!first.valid()) throw UsageError("supervised_loss: no terms");
    return ops::scale(first, 0.0);
  }
  return total;
}

GraftTarget GraftTarget::teacher(const Model& m, double weight) {
  const auto heads = m.spec.heads();
  if (heads.size() != 1) throw ConfigError("a teacher has exactly one head");
  const TaskKind task = heads.front().second.task;
  return {task_name(task), &m, weight, {{task, 1.0}}, false};
}

const std::vector<double>& BlockLossTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) return losses[i];
  }
  throw UsageError("loss table has no column '" + name + "'");
}

int BranchOutPlan::at(const std::string& name) const {
  for (const auto& [n, p] : points) {
    if (n == name) return p;
  }
  throw UsageError("plan has no branch point for '" + name + "'");
}

int BranchOutPlan::last() const {
  int best = 0;
  for (const auto& [n, p] : points) best = std::max(best, p);
  return best;
}

BranchOutPlan select_branch_out(const BlockLossTable& table, int blocks) {
  if (blocks < 2 || blocks % 2 != 0) throw ConfigError("block count must be even and >= 2");
  if (table.columns.size() != table.losses.size() || table.columns.empty()) {
    throw ConfigError("malformed loss table");
  }
  BranchOutPlan plan;
  plan.blocks = blocks;
  for (std::size_t t = 0; t < table.columns.size(); ++t) {
    const auto& col = table.losses[t];
    if (static_cast<int>(col.size()) != blocks) {
      throw ConfigError("loss column '" + table.columns[t] + "' has " +
                        std::to_string(col.size()) + " entries, expected " +
                        std::to_string(blocks));
    }
    for (std::size_t n = 0; n < col.size(); ++n) {
      if (std::isnan(col[n])) {
        throw DataError("NaN loss for '" + table.columns[t] + "' at block " +
                        std::to_string(n + 1));
      }
    }
    int best = blocks;
    for (int n = blocks - 1; n > blocks / 2; --n) {
      if (col[n - 1] < col[best - 1]) best = n;
    }
    plan.points.emplace_back(table.columns[t], best);
  }
  for (int n = plan.last() + 1; n <= blocks; ++n) plan.removed_blocks.push_back(n);
  return plan;
}

namespace {

void check_compatible(const NetworkSpec& student, const GraftTarget& t) {
  if (!t.model) throw UsageError("graft target '" + t.name + "' has no model");
  check_state(t.model->spec, t.model->state);
  const auto blocks = student.root_blocks();
  if (t.model->spec.segments.size() == 1) {
    NetworkSpec bare = t.model->spec;
    bare.segments.front().head.reset();
    if (auto diff = first_block_difference(student, bare)) {
      throw ConfigError("'" + t.name + "' and the student differ: " + *diff);
    }
  } else {
    if (t.model->spec.input_channels != student.input_channels) {
      throw ConfigError("'" + t.name + "' expects different input channels");
    }
    for (const auto& seg : t.model->spec.segments) {
      for (const auto& st : seg.stages) {
        if (!st.is_block()) continue;
        const int n = st.block.index;
        if (n < 1 || n > static_cast<int>(blocks.size()) || !(blocks[n - 1] == st.block)) {
          throw ConfigError("'" + t.name + "' and the student differ: block " +
                            std::to_string(n) + " differs");
        }
      }
    }
  }
  if (t.terms.empty()) throw ConfigError("graft target '" + t.name + "' has no loss terms");
  for (const auto& [task, w] : t.terms) {
    bool found = false;
    for (const auto& [s, h] : t.model->spec.heads()) found |= h.task == task;
    if (!found) {
      throw ConfigError("'" + t.name + "' has no " + std::string(task_name(task)) + " head");
    }
    if (!(w >= 0.0)) throw ConfigError("loss weights must be >= 0");
  }
}

std::string stage_prefix(int segment, int stage) {
  return "s" + std::to_string(segment) + "." + std::to_string(stage) + ".";
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}

std::vector<std::pair<std::string, Tensor*>> coding_tensors(ChannelCoding& c) {
  return {{"w1", &c.w1}, {"b1", &c.b1}, {"w2", &c.w2}, {"b2", &c.b2}};
}

}  // namespace

BlockwiseTrainer::BlockwiseTrainer(NetworkSpec student_spec, std::vector<GraftTarget> targets,
                                   const ImageSource& data, AmalgamationConfig cfg)
    : spec_(std::move(student_spec)), targets_(std::move(targets)), cfg_(cfg) {
  validate(cfg_);
  validate_encoder_decoder(spec_);
  if (!spec_.heads().empty()) throw ConfigError("the block-wise student has no heads");
  if (targets_.empty()) throw ConfigError("amalgamation needs at least one target");
  bool any = false;
  for (const auto& t : targets_) {
    check_compatible(spec_, t);
    any |= t.weight > 0.0;
    for (const auto& u : targets_) {
      if (&u != &t && u.name == t.name) throw ConfigError("duplicate target '" + t.name + "'");
    }
  }
  if (!any) throw ConfigError("all loss weights are zero");
  if (data.size() == 0) throw ConfigError("amalgamation needs training images");
  const int div = 1 << spec_.pool_depth();
  if (data.height() % div != 0 || data.width() % div != 0) {
    throw DimensionError("image size is not divisible by " + std::to_string(div));
  }
  state_ = init_state(spec_, Rng::derive(cfg_.seed, "student.init"));
  images_ = data.all();
  inputs_ = images_;
  for (const auto& t : targets_) supervision_[t.name] = supervision_from(*t.model, images_);
}

const ChannelCoding& BlockwiseTrainer::coding(int block, const std::string& target) const {
  auto it = codings_.find({block, target});
  if (it == codings_.end()) {
    throw UsageError("no coding for '" + target + "' at block " + std::to_string(block));
  }
  return it->second;
}

std::size_t BlockwiseTrainer::coding_params_at(int block) const {
  std::size_t total = 0;
  for (const auto& t : targets_) total += coding(block, t.name).param_count();
  return total;
}

const Supervision& BlockwiseTrainer::supervision(const std::string& target) const {
  return supervision_.at(target);
}

BlockResult BlockwiseTrainer::train_block(int n) {
  if (n != trained_ + 1) {
    throw UsageError("block " + std::to_string(n) + " cannot be trained before block " +
                     std::to_string(trained_ + 1));
  }
  const int stage = n - 1;
  const BlockSpec block = spec_.segments.front().stages[stage].block;
  const std::string prefix = stage_prefix(0, stage);
  const int channels = block.out_channels();
  const int count = images_.shape().n;

  std::vector<ChannelCoding> codings;
  for (const auto& t : targets_) {
    codings.push_back(ChannelCoding::init({channels, cfg_.coding_reduction},
                                          Rng::derive(cfg_.seed, "coding." + t.name, n)));
  }

  const int per_epoch = (count + cfg_.batch_size - 1) / cfg_.batch_size;
  Sgd sgd(cfg_.optim, static_cast<std::int64_t>(per_epoch) * cfg_.epochs_per_block);
  const auto trainable = [&prefix](const std::string& name) { return starts_with(name, prefix); };

  BlockResult result;
  std::map<std::string, double> sums, term_sums, feat_sums;
  int last_epoch_batches = 0;
  for (int epoch = 0; epoch < cfg_.epochs_per_block; ++epoch) {
    const bool last = epoch + 1 == cfg_.epochs_per_block;
    const auto batches = epoch_batches(count, cfg_.batch_size,
                                       Rng::derive(cfg_.seed, "block.shuffle", n), epoch);
    for (const auto& idx : batches) {
      Tape tape;
      BoundParams student(tape, state_, trainable);
      const Var fu = block_forward(block, student, 0, stage, tape.constant(gather(inputs_, idx)));
      const double inv_batch = 1.0 / static_cast<double>(idx.size());
      Var total;
      std::vector<CodingVars> bound;
      for (std::size_t t = 0; t < targets_.size(); ++t) {
        const GraftTarget& target = targets_[t];
        const bool active = target.weight > 0.0;
        bound.push_back(bind_coding(tape, codings[t], active));
        const Var coded = channel_code(bound.back(), fu);
        BoundParams frozen(tape, target.model->state);
        const ForwardResult grafted = forward_from(target.model->spec, frozen, n, coded);
        std::vector<double> values;
        const Var graft =
            supervised_loss(grafted.heads, supervision_.at(target.name).gather(idx),
                            target.terms, &values);
        Var objective = graft;
        if (cfg_.mode == LossMode::kFeatureL2) {
          const Var images = tape.constant(gather(images_, idx));
          const ForwardResult own =
              forward(target.model->spec, frozen, images, ForwardOptions{n});
          const Var feature = tape.constant(own.features.back().value.value());
          objective = ops::scale(ops::squared_difference(coded, feature), inv_batch);
          if (last) feat_sums[target.name] += objective.value().item();
        }
        if (last) {
          sums[target.name] += graft.value().item();
          for (std::size_t k = 0; k < values.size(); ++k) {
            term_sums[target.name + "." + task_name(target.terms[k].first)] += values[k];
          }
        }
        if (!active) continue;
        const Var weighted = target.weight == 1.0 ? objective : ops::scale(objective, target.weight);
        total = total.valid() ? ops::add(total, weighted) : weighted;
      }
      const double value = total.value().item();
      check_finite(value, "block " + std::to_string(n) + " loss");
      tape.backward(total);
      for (const auto& [name, var] : student.vars()) {
        if (trainable(name)) sgd.update(name, state_.params.at(name), tape.grad_view(var));
      }
      for (std::size_t t = 0; t < targets_.size(); ++t) {
        if (!(targets_[t].weight > 0.0)) continue;
        const std::string base = "coding." + targets_[t].name + ".";
        const CodingVars& cv = bound[t];
        const Var vars[4] = {cv.w1, cv.b1, cv.w2, cv.b2};
        auto tensors = coding_tensors(codings[t]);
        for (int k = 0; k < 4; ++k) {
          sgd.update(base + tensors[k].first, *tensors[k].second, tape.grad_view(vars[k]));
        }
      }
      sgd.finish_step();
      result.curve.push_back(value);
      if (last) ++last_epoch_batches;
    }
  }
  for (const auto& [k, v] : sums) result.losses[k] = v / last_epoch_batches;
  for (const auto& [k, v] : term_sums) result.terms[k] = v / last_epoch_batches;
  for (const auto& [k, v] : feat_sums) result.feature_losses[k] = v / last_epoch_batches;
  for (std::size_t t = 0; t < targets_.size(); ++t) {
    codings_[{n, targets_[t].name}] = codings[t];
  }

  // Frozen prefix output for the next block.
  const Shape in = inputs_.shape();
  const Shape out_shape = block_output_shape(spec_, n, in.n, images_.shape().h, images_.shape().w);
  Tensor next(out_shape, 0.0);
  const int chunk = 16;
  for (int first = 0; first < in.n; first += chunk) {
    Tape tape;
    BoundParams params(tape, state_);
    const Var y = block_forward(block, params, 0, stage,
                                tape.constant(gather(inputs_, range(first, std::min(in.n, first + chunk)))));
    put(next, first, y.value());
  }
  inputs_ = std::move(next);
  trained_ = n;
  std::string line;
  for (const auto& [k, v] : result.losses) line += " " + k + "=" + std::to_string(v);
  spdlog::info("block {} trained:{}", n, line);
  return result;
}

BlockLossTable BlockwiseTrainer::train_all() {
  BlockLossTable table;
  for (const auto& t : targets_) table.columns.push_back(t.name);
  table.losses.resize(targets_.size());
  for (int n = trained_ + 1; n <= spec_.block_count(); ++n) {
    const BlockResult r = train_block(n);
    for (std::size_t t = 0; t < targets_.size(); ++t) {
      table.losses[t].push_back(r.losses.at(targets_[t].name));
    }
  }
  return table;
}

namespace {

struct StageCopy {
  int src_segment, src_stage, dst_segment, dst_stage;
};

struct AssemblyPlan {
  NetworkSpec spec;
  // Per branch: copied stages/heads and the coding stage.
  std::vector<std::vector<StageCopy>> stages;
  std::vector<std::vector<std::pair<int, int>>> heads;  // (src segment, dst segment)
  std::vector<int> coding_segment;
};

AssemblyPlan plan_assembly(const NetworkSpec& student,
                           const std::vector<std::pair<const NetworkSpec*, int>>& branches,
                           int reduction) {
  validate_encoder_decoder(student);
  const int N = student.block_count();
  if (branches.empty()) throw ConfigError("assembly needs at least one branch");
  int last = 0;
  for (const auto& [spec, p] : branches) {
    if (p <= N / 2 || p > N) {
      throw ConfigError("branch point " + std::to_string(p) +
                        " lies outside the decoder half (" + std::to_string(N / 2) + ", " +
                        std::to_string(N) + "]");
    }
    last = std::max(last, p);
  }
  AssemblyPlan plan;
  plan.spec.input_channels = student.input_channels;
  Segment root;
  root.stages.assign(student.segments.front().stages.begin(),
                     student.segments.front().stages.begin() + last);
  plan.spec.segments.push_back(root);

  for (const auto& [src, p] : branches) {
    std::vector<StageCopy> copies;
    std::vector<std::pair<int, int>> heads;
    const int channels = root.stages[p - 1].out_channels();
    const int coding_seg = static_cast<int>(plan.spec.segments.size());
    Segment adapter;
    adapter.parent = 0;
    adapter.attach = p - 1;
    adapter.stages.push_back(Stage::of(CodingSpec{channels, reduction}));
    plan.spec.segments.push_back(adapter);

    std::function<void(int, int, int, int)> clone = [&](int s, int from, int parent, int attach) {
      const Segment& source = src->segments[s];
      const int dst = static_cast<int>(plan.spec.segments.size());
      Segment seg;
      seg.parent = parent;
      seg.attach = attach;
      for (int k = from; k < static_cast<int>(source.stages.size()); ++k) {
        copies.push_back({s, k, dst, k - from});
        seg.stages.push_back(source.stages[k]);
      }
      seg.head = source.head;
      if (seg.head) heads.emplace_back(s, dst);
      plan.spec.segments.push_back(seg);
      for (int c = 0; c < static_cast<int>(src->segments.size()); ++c) {
        if (src->segments[c].parent == s && src->segments[c].attach >= from) {
          clone(c, 0, dst, src->segments[c].attach - from);
        }
      }
    };
    bool found = false;
    for (int s = 0; s < static_cast<int>(src->segments.size()); ++s) {
      const Segment& seg = src->segments[s];
      for (int k = 0; k < static_cast<int>(seg.stages.size()); ++k) {
        if (!seg.stages[k].is_block() || seg.stages[k].block.index != p) continue;
        found = true;
        clone(s, k + 1, coding_seg, 0);
        for (int c = 0; c < static_cast<int>(src->segments.size()); ++c) {
          if (src->segments[c].parent == s && src->segments[c].attach == k) {
            clone(c, 0, coding_seg, 0);
          }
        }
      }
    }
    if (!found) throw ConfigError("branch source has no block " + std::to_string(p));
    plan.stages.push_back(std::move(copies));
    plan.heads.push_back(std::move(heads));
    plan.coding_segment.push_back(coding_seg);
  }
  validate(plan.spec);
  return plan;
}

void copy_param(const ModelState& from, const std::string& src, ModelState& to,
                const std::string& dst) {
  to.params.insert_or_assign(dst, from.params.at(src));
}

// Every parameter name of stage (segment, stage) in `spec`.
std::vector<std::string> stage_param_names(const Stage& st, int segment, int stage) {
  std::vector<std::string> out;
  if (st.is_block()) {
    for (std::size_t l = 0; l < st.block.convs.size(); ++l) {
      out.push_back(conv_param_name(segment, stage, static_cast<int>(l), false));
      out.push_back(conv_param_name(segment, stage, static_cast<int>(l), true));
    }
  } else {
    for (int fc = 1; fc <= 2; ++fc) {
      out.push_back(coding_param_name(segment, stage, fc, false));
      out.push_back(coding_param_name(segment, stage, fc, true));
    }
  }
  return out;
}

}  // namespace

AssembledTarget assemble_target(const NetworkSpec& student_spec,
                                const ModelState& student_state,
                                const std::vector<BranchSource>& branches,
                                const std::set<std::string>& frozen_sources) {
  std::vector<std::pair<const NetworkSpec*, int>> specs;
  for (const auto& b : branches) {
    if (!b.model) throw UsageError("branch '" + b.name + "' has no source network");
    specs.emplace_back(&b.model->spec, b.point);
  }
  const int reduction = branches.empty() ? 4 : branches.front().coding.spec.reduction;
  const AssemblyPlan plan = plan_assembly(student_spec, specs, reduction);

  AssembledTarget out;
  out.model.spec = plan.spec;
  ModelState& state = out.model.state;
  const Segment& root = plan.spec.segments.front();
  for (int k = 0; k < static_cast<int>(root.stages.size()); ++k) {
    for (const auto& name : stage_param_names(root.stages[k], 0, k)) {
      copy_param(student_state, name, state, name);
    }
  }
  for (std::size_t b = 0; b < branches.size(); ++b) {
    const BranchSource& src = branches[b];
    const int cs = plan.coding_segment[b];
    const int channels = plan.spec.segments[cs].stages.front().coding.channels;
    if (!(src.coding.spec == CodingSpec{channels, reduction})) {
      throw ConfigError("coding of branch '" + src.name + "' does not fit block " +
                        std::to_string(src.point));
    }
    state.params[coding_param_name(cs, 0, 1, false)] = src.coding.w1;
    state.params[coding_param_name(cs, 0, 1, true)] = src.coding.b1;
    state.params[coding_param_name(cs, 0, 2, false)] = src.coding.w2;
    state.params[coding_param_name(cs, 0, 2, true)] = src.coding.b2;
    const bool frozen = frozen_sources.count(src.name) > 0;
    for (const auto& c : plan.stages[b]) {
      const Stage& st = src.model->spec.segments[c.src_segment].stages[c.src_stage];
      const auto from = stage_param_names(st, c.src_segment, c.src_stage);
      const auto to = stage_param_names(st, c.dst_segment, c.dst_stage);
      for (std::size_t i = 0; i < from.size(); ++i) {
        copy_param(src.model->state, from[i], state, to[i]);
        if (frozen) out.frozen.insert(to[i]);
      }
    }
    for (const auto& [s, d] : plan.heads[b]) {
      for (bool bias : {false, true}) {
        copy_param(src.model->state, head_param_name(s, bias), state, head_param_name(d, bias));
        if (frozen) out.frozen.insert(head_param_name(d, bias));
      }
      out.head_branch[d] = static_cast<int>(b);
    }
  }
  check_state(out.model.spec, out.model.state);
  return out;
}

std::size_t assembled_param_count(const NetworkSpec& student_spec,
                                  const std::vector<std::pair<const NetworkSpec*, int>>& branches,
                                  int coding_reduction) {
  return count_params(plan_assembly(student_spec, branches, coding_reduction).spec);
}

namespace {

struct HeadWeight {
  int branch;
  TaskKind task;
  double weight;
};

Var assembled_loss(const ForwardResult& fr, const AssembledTarget& target,
                   const std::vector<GraftTarget>& branches,
                   const std::vector<Supervision>& batch_sup) {
  Var total, first;
  for (const auto& h : fr.heads) {
    const int b = target.head_branch.at(h.segment);
    double inner = -1.0;
    for (const auto& [task, w] : branches[b].terms) {
      if (task == h.task) inner = w;
    }
    if (inner < 0.0) continue;  // head the branch target does not supervise
    const Var loss = supervised_loss({h}, batch_sup[b], {{h.task, 1.0}});
    if (!first.valid()) first = loss;
    const double w = inner * branches[b].weight;
    if (w == 0.0) continue;
    const Var term = w == 1.0 ? loss : ops::scale(loss, w);
    total = total.valid() ? ops::add(total, term) : term;
  }
  if (!total.valid()) {
    if (!first.valid()) throw UsageError("assembled network has no supervised head");
    return ops::scale(first, 0.0);
  }
  return total;
}

std::vector<Supervision> gather_all(const std::vector<Supervision>& sup,
                                    const std::vector<int>& idx) {
  std::vector<Supervision> out;
  for (const auto& s : sup) out.push_back(s.gather(idx));
  return out;
}

}  // namespace

FineTuneResult fine_tune(AssembledTarget& target, const std::vector<GraftTarget>& branches,
                         const std::vector<Supervision>& supervision, const Tensor& images,
                         const AmalgamationConfig& cfg) {
  validate(cfg);
  if (branches.size() != supervision.size()) {
    throw UsageError("fine_tune: one supervision set per branch required");
  }
  const int count = images.shape().n;
  const int probe = std::min(cfg.probe_samples, count);
  auto probe_loss = [&]() {
    double sum = 0.0;
    for (int first = 0; first < probe; first += cfg.batch_size) {
      const auto idx = range(first, std::min(probe, first + cfg.batch_size));
      Tape tape;
      BoundParams params(tape, target.model.state);
      const ForwardResult fr = forward(target.model.spec, params, tape.constant(gather(images, idx)));
      sum += assembled_loss(fr, target, branches, gather_all(supervision, idx)).value().item() *
             static_cast<double>(idx.size());
    }
    return sum / probe;
  };

  FineTuneResult result;
  result.initial_loss = probe_loss();
  const auto trainable = [&target](const std::string& name) {
    return target.frozen.count(name) == 0;
  };
  Sgd sgd(cfg.optim, cfg.finetune_steps);
  std::uint64_t epoch = 0;
  std::vector<std::vector<int>> batches;
  std::size_t next = 0;
  for (int step = 0; step < cfg.finetune_steps; ++step) {
    if (next == batches.size()) {
      batches = epoch_batches(count, cfg.batch_size, Rng::derive(cfg.seed, "finetune.shuffle"),
                              epoch++);
      next = 0;
    }
    const auto& idx = batches[next++];
    Tape tape;
    BoundParams params(tape, target.model.state, trainable);
    const ForwardResult fr = forward(target.model.spec, params, tape.constant(gather(images, idx)));
    const Var loss = assembled_loss(fr, target, branches, gather_all(supervision, idx));
    const double value = loss.value().item();
    check_finite(value, "fine-tune loss at step " + std::to_string(step));
    tape.backward(loss);
    for (const auto& [name, var] : params.vars()) {
      if (trainable(name)) sgd.update(name, target.model.state.params.at(name), tape.grad_view(var));
    }
    sgd.finish_step();
    ++target.model.state.step;
    result.curve.push_back(value);
  }
  result.final_loss = cfg.finetune_steps > 0 ? probe_loss() : result.initial_loss;
  spdlog::info("fine-tune: probe loss {:.6f} -> {:.6f}", result.initial_loss, result.final_loss);
  return result;
}

NetworkSpec student_spec_from(const Model& teacher) {
  if (teacher.spec.segments.size() != 1) {
    throw ConfigError("a student can only be derived from a single-path teacher");
  }
  NetworkSpec spec = teacher.spec;
  spec.segments.front().head.reset();
  return spec;
}

AmalgamationResult amalgamate(const NetworkSpec& student_spec, std::vector<GraftTarget> targets,
                              const ImageSource& train, const LabeledSet* eval,
                              const AmalgamationConfig& cfg, const std::string& pipeline) {
  AmalgamationResult out;
  AmalgamationReport& rep = out.report;
  rep.pipeline = pipeline;
  rep.mode = cfg.mode;
  for (const auto& t : targets) {
    rep.freeze.push_back({t.name, state_hash(t.model->state), 0});
  }

  BlockwiseTrainer trainer(student_spec, targets, train, cfg);
  const int N = student_spec.block_count();
  rep.blocks = N;
  for (const auto& t : targets) {
    rep.table.columns.push_back(t.name);
    for (const auto& [task, w] : t.terms) {
      if (t.terms.size() > 1) {
        rep.components.columns.push_back(t.name + "." + task_name(task));
      }
    }
    if (cfg.mode == LossMode::kFeatureL2) rep.feature_table.columns.push_back(t.name);
  }
  rep.table.losses.resize(rep.table.columns.size());
  rep.components.losses.resize(rep.components.columns.size());
  rep.feature_table.losses.resize(rep.feature_table.columns.size());
  for (int n = 1; n <= N; ++n) {
    const BlockResult r = trainer.train_block(n);
    for (std::size_t c = 0; c < rep.table.columns.size(); ++c) {
      rep.table.losses[c].push_back(r.losses.at(rep.table.columns[c]));
    }
    for (std::size_t c = 0; c < rep.components.columns.size(); ++c) {
      rep.components.losses[c].push_back(r.terms.at(rep.components.columns[c]));
    }
    for (std::size_t c = 0; c < rep.feature_table.columns.size(); ++c) {
      rep.feature_table.losses[c].push_back(r.feature_losses.at(rep.feature_table.columns[c]));
    }
    rep.params.coding_max_block = std::max(rep.params.coding_max_block, trainer.coding_params_at(n));
  }
  rep.plan = select_branch_out(rep.table, N);

  std::vector<BranchSource> branches;
  std::set<std::string> frozen;
  std::vector<Supervision> sup;
  for (const auto& t : targets) {
    const int p = rep.plan.at(t.name);
    branches.push_back({t.name, t.model, p, trainer.coding(p, t.name)});
    if (t.frozen_in_student) frozen.insert(t.name);
    sup.push_back(trainer.supervision(t.name));
  }
  AssembledTarget assembled =
      assemble_target(student_spec, trainer.student_state(), branches, frozen);
  rep.finetune_steps = cfg.finetune_steps;
  rep.finetune = fine_tune(assembled, targets, sup, trainer.images(), cfg);

  for (const auto& t : targets) {
    rep.params.teachers[t.name] = count_params(t.model->spec);
    rep.params.teacher_sum += rep.params.teachers[t.name];
  }
  rep.params.student_trunk = count_params(student_spec);
  rep.params.student = count_params(assembled.model.spec);
  for (std::size_t b = 0; b < branches.size(); ++b) {
    rep.params.adapters += branches[b].coding.param_count();
  }

  if (eval) {
    rep.metrics["student"] = evaluate(assembled.model, *eval);
    for (const auto& t : targets) rep.metrics["teacher." + t.name] = evaluate(*t.model, *eval);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    rep.freeze[i].after = state_hash(targets[i].model->state);
  }
  rep.student_hash = state_hash(assembled.model.state);
  out.student = std::move(assembled.model);
  return out;
}

namespace {

void require_head(const Model& m, TaskKind task, const char* role) {
  const auto heads = m.spec.heads();
  if (heads.size() != 1 || heads.front().second.task != task) {
    throw UsageError(std::string(role) + " must be a single-head " + task_name(task) +
                     " network");
  }
}

}  // namespace

AmalgamationResult amalgamate_two(const NetworkSpec& student_spec, const Model& segnet,
                                  const Model& depthnet, const ImageSource& train,
                                  const LabeledSet* eval, const AmalgamationConfig& cfg) {
  require_head(segnet, TaskKind::kSegmentation, "segnet");
  require_head(depthnet, TaskKind::kDepth, "depthnet");
  return amalgamate(student_spec,
                    {GraftTarget::teacher(segnet, cfg.lambda_seg),
                     GraftTarget::teacher(depthnet, cfg.lambda_depth)},
                    train, eval, cfg, "two");
}

AmalgamationResult amalgamate_offline3(const NetworkSpec& student_spec, const Model& segnet,
                                       const Model& depthnet, const Model& normnet,
                                       const ImageSource& train, const LabeledSet* eval,
                                       const AmalgamationConfig& cfg) {
  require_head(segnet, TaskKind::kSegmentation, "segnet");
  require_head(depthnet, TaskKind::kDepth, "depthnet");
  require_head(normnet, TaskKind::kNormal, "normnet");
  return amalgamate(student_spec,
                    {GraftTarget::teacher(segnet, cfg.lambda_seg),
                     GraftTarget::teacher(depthnet, cfg.lambda_depth),
                     GraftTarget::teacher(normnet, cfg.lambda_norm)},
                    train, eval, cfg, "offline3");
}

AmalgamationResult amalgamate_online(const Model& target2, const Model& normnet,
                                     const ImageSource& train, const LabeledSet* eval,
                                     const AmalgamationConfig& cfg) {
  require_head(normnet, TaskKind::kNormal, "normnet");
  if (cfg.mode != LossMode::kGraft) {
    throw UsageError("online amalgamation supports only the graft loss");
  }
  bool seg = false, depth = false;
  for (const auto& [s, h] : target2.spec.heads()) {
    seg |= h.task == TaskKind::kSegmentation;
    depth |= h.task == TaskKind::kDepth;
  }
  if (!seg || !depth) throw UsageError("online base must carry seg and depth heads");
  GraftTarget u2{"u2",
                 &target2,
                 cfg.lambda_u2,
                 {{TaskKind::kDepth, cfg.lambda_depth}, {TaskKind::kSegmentation, cfg.lambda_seg}},
                 true};
  return amalgamate(student_spec_from(normnet),
                    {u2, GraftTarget::teacher(normnet, cfg.lambda_norm)}, train, eval, cfg,
                    "online");
}

}  // namespace amalgam

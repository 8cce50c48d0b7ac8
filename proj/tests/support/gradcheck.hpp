#pragma once

#include <functional>
#include <string>
#include <vector>

#include "amalgam/rng.hpp"
#include "amalgam/tape.hpp"

namespace amalgam::testing {

// Rebuilds the scalar loss on a fresh tape from variable leaves bound to
// `inputs` (in order).
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

// For losses whose leaves are created elsewhere (e.g. BoundParams): must push
// one leaf per input tensor, in order, into `leaves`.
using LeafLossBuilder =
    std::function<Var(Tape&, const std::vector<Tensor>&, std::vector<Var>& leaves)>;

struct GradCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool ok(double tol = 1e-5) const { return checked > 0 && max_rel_error < tol; }
};

// Central differences with step h against the tape gradient of every input
// element. Error per element is |a - n| / max(|a|, |n|, floor).
GradCheck check_gradients(const std::string& name, std::vector<Tensor> inputs,
                          const LossBuilder& loss, double h = 1e-5,
                          double floor = 1e-4);

GradCheck check_gradients_leaves(const std::string& name, std::vector<Tensor> inputs,
                                 const LeafLossBuilder& loss, double h = 1e-5,
                                 double floor = 1e-4);

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0);

// Every op and loss of the library, each on small random tensors.
std::vector<GradCheck> gradient_suite(std::uint64_t seed);

}  // namespace amalgam::testing

#pragma once

#include <span>

#include "amalgam/tape.hpp"

namespace amalgam::detail {

// Propagates `grad_out` of node `id` into the accumulators of its inputs.
void backward_op(Tape& tape, int id, const TapeNode& node,
                 std::span<const double> grad_out);

}  // namespace amalgam::detail

#pragma once

#include <string>
#include <vector>

#include "amalgam/amalgamation.hpp"
#include "amalgam/metrics.hpp"
#include "amalgam/teacher.hpp"

namespace amalgam {

// Pretty-printed JSON; doubles are written with round-trip precision, so a
// report built from identical values serialises to identical bytes.
std::string metrics_to_json(const MetricReport& report);
std::string report_to_json(const AmalgamationReport& report);

// Per-block loss table followed by one row per branch-out block, e.g.
// "Decoder_b2 (Target-depth)".
std::string format_block_table(const AmalgamationReport& report);

std::string curve_to_csv(const std::vector<CurvePoint>& curve);

}  // namespace amalgam

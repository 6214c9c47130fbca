#pragma once

#include <iosfwd>
#include <string>

#include "crae/config.hpp"

namespace crae {

/// Runs every (method, seed) combination of the spec: regenerates the data
/// from the run seed, trains, and writes per-run metrics and final confusion
/// CSVs plus a summary.csv with the per-method mean and standard deviation of
/// the final test error. Progress goes to `log`. Returns a process exit code
/// (0 on success); on failure partial outputs are left in place.
int run(const ExperimentSpec& spec, std::ostream& log);
int run(const ExperimentSpec& spec);

/// Benchmark pipeline for one run seed: templates -> examples -> split.
Split build_split(const ExperimentSpec& spec, std::uint64_t seed);

}  // namespace crae

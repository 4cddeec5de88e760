#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "donet/grad_check.hpp"

namespace donet {

struct GradCheckCase {
    std::string name;  // "<op>[<settings>] wrt <tensor> #<case>"
    std::string op;
    GradCheckReport report;
};

// Per-layer and per-loss checks in double precision on randomized shapes.
// Cycles through every covered op until `cases` checks have run.
std::vector<GradCheckCase> run_unit_gradchecks(std::size_t cases = 120, std::uint64_t seed = 1,
                                               double tolerance = 1e-4);

struct ModelGradCheckOptions {
    std::size_t size = 16;
    std::size_t base_channels = 4;
    std::size_t stages = 3;
    std::vector<std::size_t> dilation_rates{1, 2, 4, 8};
    std::size_t batch = 2;
    std::size_t coordinates = 200;  // spread over all parameters in proportion to size
    double tolerance = 1e-3;
    std::uint64_t seed = 1;
};

// Total-objective gradient of the full model against central differences on
// a subsample of parameter coordinates. One case per parameter tensor.
std::vector<GradCheckCase> run_model_gradcheck(const ModelGradCheckOptions& options = {});

bool all_pass(const std::vector<GradCheckCase>& cases);

}  // namespace donet

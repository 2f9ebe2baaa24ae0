#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stum {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
};

/// Central finite differences against the reverse-mode gradients, covering
/// every differentiable primitive and the full model + MAE composite on a
/// small fixture. 64-bit throughout.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 7,
                                                 double h = 1e-5);

}  // namespace stum

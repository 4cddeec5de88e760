#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "donet/tensor.hpp"

namespace donet {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Check at most this many coordinates (0 = all), chosen by `seed`.
    std::size_t max_coordinates = 0;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    // Coordinates where the one-sided slopes disagree (a kink within +-h);
    // they are excluded from max_rel_err.
    std::vector<std::size_t> kinks;
    // First coordinate whose perturbed evaluation was not finite.
    std::optional<std::size_t> non_finite_index;
    bool pass = false;

    std::string summary() const;
};

using ScalarFn = std::function<Tensord(const Tensord&)>;

// Compares reverse-mode gradients of `fn` at `input` against central
// differences (f(x+h) - f(x-h)) / 2h. Relative error per coordinate is
// |ga - gn| / max(|ga|, |gn|, 1e-8). `input` is restored on return.
GradCheckReport grad_check(const ScalarFn& fn, Tensord input, const GradCheckOptions& options = {});

// Same comparison for a parameter tensor the function reads implicitly
// (e.g. a layer weight). `fn` is evaluated with no arguments.
GradCheckReport grad_check_param(const std::function<Tensord()>& fn, Tensord param,
                                 const GradCheckOptions& options = {});

}  // namespace donet

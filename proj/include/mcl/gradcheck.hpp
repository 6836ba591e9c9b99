#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace mcl {

struct GradCheckReport {
    std::size_t trials = 0;
    std::size_t blocks = 0;    // parameter tensors compared
    std::size_t failures = 0;  // blocks whose relative error exceeded the tolerance
    double worst = 0.0;
    std::string worst_label;  // "trial 7 causal-classification fgr.w0"
    double tolerance = 0.0;
};

// Autodiff-versus-central-differences sweep over randomly drawn small
// networks, cycling through the four loss paths (plain/causal x
// regression/classification; the causal paths include both disentangling
// terms). Hidden activations are drawn from the smooth ones (tanh, softplus)
// so the finite-difference oracle is trustworthy at the default step; kinked
// activations have exact-arithmetic coverage in the unit tests. Passes iff
// every parameter block's relative error stays within `tolerance`.
GradCheckReport gradcheck_suite(std::uint64_t seed, std::size_t trials = 50,
                                double tolerance = 1e-5);

}  // namespace mcl

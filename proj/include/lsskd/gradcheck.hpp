#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lsskd/distill.hpp"

namespace lsskd {

struct GradCheckReport {
    struct Term {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<Term> terms; // ce_resp, ce_hier, div_sad, feat, total

    bool passed(double tol) const {
        for (const auto& t : terms)
            if (!(t.max_rel_err < tol)) return false;
        return !terms.empty();
    }
};

/// Central finite differences against the analytic gradients of every loss
/// term on a fixed toy network (2 stages, channels 4/8, N=3, M=4, batch 2),
/// forced to 64-bit. Detached quantities are frozen at their reference values
/// during the difference evaluations, matching the loss semantics.
/// `corrupt_factor` != 1 scales the analytic gradients — a fixture that makes
/// the check fail on purpose.
GradCheckReport run_gradcheck(const Hyperparams& hp, std::uint64_t seed,
                              int coordinates = 50, double step = 1e-5,
                              double corrupt_factor = 1.0);

} // namespace lsskd

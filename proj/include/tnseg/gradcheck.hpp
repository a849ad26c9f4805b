#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tnseg/autograd.hpp"

namespace tnseg {

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|, |numeric|).
/// `f` must rebuild its graph from the current parameter values on every call; the
/// parameters' grads are overwritten with the analytic gradient.
double grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params, double h = 1e-5);

/// Convenience form over plain tensors: `f` receives one leaf per input.
double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& f, std::vector<Tensor> inputs,
                  double h = 1e-5);

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckCase {
    std::string component;  // tensor-core, norm-layers, networks, losses
    std::string name;
    double max_rel_err = 0.0;
    bool passed() const { return max_rel_err < kGradcheckTolerance; }
};

/// Central-difference checks of every differentiable operation, both normalization layers (TN with
/// its channel weights held fixed), both networks and the losses, on tiny random inputs.
std::vector<GradcheckCase> run_gradcheck_suite(std::uint64_t seed = 0);

}  // namespace tnseg

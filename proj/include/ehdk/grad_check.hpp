#pragma once

#include <functional>
#include <vector>

#include "ehdk/tensor.hpp"

namespace ehdk {

// Scalar-valued differentiable function under test. Must read its inputs
// through the supplied handles (grad_check perturbs them in place) and return
// a (1,1,1,1) tensor, recording on the tape when one is given.
using DiffFn = std::function<Tensor(std::vector<Tensor>&, Tape*)>;

// Central-difference check of the tape gradients of f at `inputs`.
// Returns max over all input elements of
//   |analytic - central_difference| / max(1, |central_difference|).
// eps must lie in [1e-7, 1e-3]. Non-finite values anywhere raise NumericError.
double grad_check(const DiffFn& f, std::vector<Tensor> inputs, double eps);

}  // namespace ehdk

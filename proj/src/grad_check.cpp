#include "ehdk/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace ehdk {

double grad_check(const DiffFn& f, std::vector<Tensor> inputs, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ArgumentError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  FiniteGuard guard;

  for (Tensor& t : inputs) {
    t.ensure_grad();
    t.zero_grad();
  }

  Tape tape;
  Tensor out = f(inputs, &tape);
  if (!out.defined() || out.numel() != 1) {
    throw ArgumentError("grad_check: f must return a scalar tensor");
  }
  maybe_check_finite(out, "grad_check(function output)");
  tape.backward(out);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) {
    analytic.emplace_back(t.grad(), t.grad() + t.numel());
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor& t = inputs[i];
    for (std::int64_t j = 0; j < t.numel(); ++j) {
      double saved = t.data()[j];
      t.data()[j] = saved + eps;
      double plus = f(inputs, nullptr).data()[0];
      t.data()[j] = saved - eps;
      double minus = f(inputs, nullptr).data()[0];
      t.data()[j] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite value during central difference");
      }
      double cd = (plus - minus) / (2.0 * eps);
      double err = std::abs(analytic[i][j] - cd) / std::max(1.0, std::abs(cd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ehdk

#include "ehdk/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace ehdk {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor::Tensor(int n, int c, int h, int w) {
  if (n < 0 || c < 0 || h < 0 || w < 0) {
    throw ShapeError("tensor dims must be non-negative, got (" +
                     std::to_string(n) + "," + std::to_string(c) + "," +
                     std::to_string(h) + "," + std::to_string(w) + ")");
  }
  s_ = std::make_shared<Storage>();
  s_->shape = Shape{n, c, h, w};
  s_->value.assign(std::size_t(s_->shape.numel()), 0.0);
}

Tensor Tensor::full(int n, int c, int h, int w, double v) {
  Tensor t(n, c, h, w);
  std::fill(t.s_->value.begin(), t.s_->value.end(), v);
  return t;
}

Tensor Tensor::from_values(int n, int c, int h, int w, std::vector<double> v) {
  Tensor t(n, c, h, w);
  if (std::int64_t(v.size()) != t.numel()) {
    throw ShapeError("value count " + std::to_string(v.size()) +
                     " does not fill shape " + t.shape().str());
  }
  t.s_->value = std::move(v);
  return t;
}

Tensor Tensor::random_uniform(int n, int c, int h, int w, Rng& rng, double lo,
                              double hi) {
  Tensor t(n, c, h, w);
  for (auto& v : t.s_->value) v = rng.uniform(lo, hi);
  return t;
}

void Tensor::ensure_grad() {
  if (s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

void Tensor::drop_grad() { s_->grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = s_->shape;
  t.s_->value = s_->value;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : s_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tape::backward(Tensor& root) {
  root.ensure_grad();
  std::fill(root.grad(), root.grad() + root.numel(), 1.0);
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

namespace {
std::atomic<int> g_finite_guards{0};
}

FiniteGuard::FiniteGuard() { ++g_finite_guards; }
FiniteGuard::~FiniteGuard() { --g_finite_guards; }

void maybe_check_finite(const Tensor& t, const char* op) {
  if (g_finite_guards.load(std::memory_order_relaxed) == 0) return;
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value produced by op '") + op +
                       "'");
  }
}

}  // namespace ehdk

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ehdk/common.hpp"

namespace ehdk {

struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  std::int64_t numel() const {
    return std::int64_t(n) * c * h * w;
  }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }
  std::string str() const;
};

// Dense rank-4 (batch, channel, height, width) tensor, row-major doubles,
// with an optional same-shape gradient plane. Copies share storage; ops treat
// tensors as immutable once produced, gradients accumulate during a backward
// sweep. Use clone() for a deep copy.
class Tensor {
public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w);

  static Tensor zeros(int n, int c, int h, int w) { return Tensor(n, c, h, w); }
  static Tensor full(int n, int c, int h, int w, double v);
  static Tensor from_values(int n, int c, int h, int w, std::vector<double> v);
  static Tensor random_uniform(int n, int c, int h, int w, Rng& rng,
                               double lo = -1.0, double hi = 1.0);

  bool defined() const { return bool(s_); }
  const Shape& shape() const { return s_->shape; }
  int n() const { return s_->shape.n; }
  int c() const { return s_->shape.c; }
  int h() const { return s_->shape.h; }
  int w() const { return s_->shape.w; }
  std::int64_t numel() const { return s_->shape.numel(); }

  double* data() { return s_->value.data(); }
  const double* data() const { return s_->value.data(); }

  std::int64_t index(int in, int ic, int iy, int ix) const {
    const Shape& s = s_->shape;
    return ((std::int64_t(in) * s.c + ic) * s.h + iy) * s.w + ix;
  }
  double& at(int in, int ic, int iy, int ix) {
    return s_->value[index(in, ic, iy, ix)];
  }
  double at(int in, int ic, int iy, int ix) const {
    return s_->value[index(in, ic, iy, ix)];
  }

  bool has_grad() const { return defined() && !s_->grad.empty(); }
  void ensure_grad();
  void zero_grad();
  void drop_grad();
  double* grad() { return s_->grad.data(); }
  const double* grad() const { return s_->grad.data(); }

  Tensor clone() const;  // deep copy of values, no grad
  bool same_storage(const Tensor& o) const { return s_ == o.s_; }
  bool all_finite() const;

private:
  struct Storage {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until ensure_grad()
  };
  std::shared_ptr<Storage> s_;
};

// Reverse-mode tape: ops record one backward step per application; backward()
// replays them last-to-first. A sweep is single-threaded.
class Tape {
public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  // Seeds d(root) = 1 everywhere (normally a scalar) and replays the tape.
  void backward(Tensor& root);

  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

private:
  std::vector<std::function<void()>> steps_;
};

// Throws ShapeError naming both shapes when they differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

// Finite checking used by grad_check: when armed, ops call maybe_check_finite
// after producing a result and throw NumericError naming the op on NaN/Inf.
struct FiniteGuard {
  FiniteGuard();
  ~FiniteGuard();
};
void maybe_check_finite(const Tensor& t, const char* op);

}  // namespace ehdk

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "miseg/tensor.hpp"

namespace miseg {

// Central finite differences: (f(x + h e_i) - f(x - h e_i)) / (2h) per
// element. f must be deterministic.
template <class T>
TensorT<T> finite_difference_gradient(const std::function<double(const TensorT<T>&)>& f,
                                      const TensorT<T>& x, double h) {
  TensorT<T> g(x.shape);
  TensorT<T> probe = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    const T orig = probe.data[i];
    probe.data[i] = T(double(orig) + h);
    const double up = f(probe);
    probe.data[i] = T(double(orig) - h);
    const double dn = f(probe);
    probe.data[i] = orig;
    g.data[i] = T((up - dn) / (2.0 * h));
  }
  return g;
}

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckOptions {
  int seeds = 10;
  double h = 1e-3;
  double tolerance = 1e-4;
  bool corrupt_conv_backward = false;  // negative-control hook for tests
};

// Runs the 64-bit finite-difference suite over every differentiable op plus
// the full tiny-network segmentation objective. One report per op.
std::vector<GradCheckReport> run_gradient_checks(const GradCheckOptions& opt = {});

// Convenience: true iff every report passes.
bool gradient_checks_pass(const std::vector<GradCheckReport>& reports);

}  // namespace miseg

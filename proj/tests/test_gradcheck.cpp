#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>

#include "doctest.h"
#include "miseg/gradcheck.hpp"
#include "miseg/rng.hpp"
#include "miseg/tape.hpp"

using namespace miseg;
using Td = TensorT<double>;

TEST_CASE("finite differences of a linear functional are exact ones") {
  Td x({2, 3});
  RngStream rng(1, 2, 3);
  x.fill_uniform(rng, -5, 5);
  auto f = [](const Td& v) {
    double s = 0;
    for (double e : v.data) s += e;
    return s;
  };
  const Td g = finite_difference_gradient<double>(f, x, 1e-3);
  for (double e : g.data) CHECK(e == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("finite differences of sum of squares at ones gives twos") {
  Td x({4}, 1.0);
  auto f = [](const Td& v) {
    double s = 0;
    for (double e : v.data) s += e * e;
    return s;
  };
  const Td g = finite_difference_gradient<double>(f, x, 1e-3);
  for (double e : g.data) CHECK(e == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("the full suite passes and covers every op kind once") {
  GradCheckOptions opt;
  opt.seeds = 10;
  const auto reports = run_gradient_checks(opt);
  CHECK(gradient_checks_pass(reports));

  std::set<std::string> names;
  for (const auto& r : reports) {
    CAPTURE(r.op);
    CHECK(r.max_rel_err <= opt.tolerance);
    CHECK(names.insert(r.op).second);  // exactly once
  }
  // every differentiable tape op appears, plus the composite network check
  const char* expected[] = {"conv3d",          "relu",          "upsample_nearest",
                            "concat_channels", "softmax_channels", "add",
                            "sub",             "mul",           "div",
                            "scale",           "add_scalar",    "log",
                            "sqrt",            "clamp_min",     "reduce_mean",
                            "reduce_sum",      "sum_per_channel", "broadcast_channel",
                            "slice_channels",  "segnet_seg_loss"};
  for (const char* name : expected) CHECK(names.count(name) == 1);
  CHECK(names.size() == std::size(expected));
}

TEST_CASE("a corrupted conv backward is caught") {
  GradCheckOptions opt;
  opt.seeds = 2;
  opt.corrupt_conv_backward = true;
  const auto reports = run_gradient_checks(opt);
  CHECK_FALSE(gradient_checks_pass(reports));
  for (const auto& r : reports)
    if (r.op == "conv3d") CHECK_FALSE(r.pass);
}

#include <set>

#include "doctest.h"
#include "vqd/grad_suite.hpp"

using namespace vqd;

TEST_CASE("every operation passes its finite-difference check") {
  const auto results = run_gradient_suite({});
  std::set<std::string> names;
  for (const auto& r : results) {
    CAPTURE(r.name);
    CAPTURE(r.max_rel_error);
    CHECK(r.passed());
    CHECK(r.entries > 0);
    CHECK(names.insert(r.name).second);
  }
  for (const char* op : {"matmul", "linear", "softmax_rows", "layer_norm", "gaussian_kl",
                         "giou_loss", "multihead_attention", "separated_group_attention",
                         "encode_noisy_box", "forward_looking_distill", "end_to_end_model"})
    CHECK(names.count(op) == 1);
  CHECK(results.back().name == "end_to_end_model");
  CHECK(results.back().tolerance == 1e-4);
}

TEST_CASE("a perturbed gradient is caught") {
  GradSuiteOptions opt;
  opt.trials = 1;
  opt.perturb = 1e-2;
  const auto results = run_gradient_suite(opt);
  std::size_t failed = 0;
  for (const auto& r : results) failed += !r.passed();
  CHECK(failed == results.size());
}

// Named finite-difference checks covering every differentiable op and the
// joint training objective on a reduced model, shared by the CLI and the
// acceptance tests.
#pragma once

#include <string>
#include <vector>

#include "dpnet/gradcheck.hpp"

namespace dpnet {

struct GradSuiteCase {
  std::string name;
  GradCheckResult result;
  bool pass = false;
};

// Runs all checks; `pass` compares each max relative error against tol.
std::vector<GradSuiteCase> run_gradcheck_suite(double tol = 1e-4);

// One line per case plus a summary line, formatted as a fixed-width table.
std::string gradsuite_table(const std::vector<GradSuiteCase>& cases,
                            double tol);

bool gradsuite_all_pass(const std::vector<GradSuiteCase>& cases);

}  // namespace dpnet

#ifndef REFCOLOR_SELFTEST_HPP
#define REFCOLOR_SELFTEST_HPP

#include <string>
#include <vector>

namespace refcolor {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// The property suite: finite-difference gradient checks (primitives and all
// four stage losses), latentizer roundtrip, zero-init neutrality, permutation
// invariances, DDIM with a perfect-epsilon oracle, q_sample variance law, and
// freeze/resume bit-equality.
std::vector<CheckResult> run_property_suite();

bool all_passed(const std::vector<CheckResult>& results);

// Prints one line per check plus a summary; returns true when all pass.
bool print_results(const std::vector<CheckResult>& results);

}  // namespace refcolor

#endif

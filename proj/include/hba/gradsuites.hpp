#pragma once

#include <string>
#include <vector>

namespace hba {

// One finite-difference verification target. err32 compares the float
// engine's analytic gradients against double-precision central differences;
// err64 compares the double engine against the same differences.
struct GradTarget {
    std::string name;
    double err32 = 0;
    double err64 = 0;
};

inline constexpr double kGradTol32 = 1e-3;
inline constexpr double kGradTol64 = 1e-5;

// every differentiable tensor op on small random inputs
std::vector<GradTarget> gradsuite_ops();

// the attention block, whole and per variant flag
std::vector<GradTarget> gradsuite_hba();

// end-to-end Dice loss through the full model at 64^2 input, sampled
// parameter subset
std::vector<GradTarget> gradsuite_model();

bool gradsuite_passed(const std::vector<GradTarget>& targets);

} // namespace hba

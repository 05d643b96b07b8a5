#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hba/tensor.hpp"

namespace hba {

// A differentiable graph under test: leaves plus a forward closure that
// reduces to a scalar. The closure must be a pure function of the leaves
// (no running-statistic updates, no fresh randomness).
template <class Real>
struct GradCase {
    std::string name;
    std::vector<std::string> leaf_names;
    std::vector<TensorPtr<Real>> leaves;
    std::function<TensorPtr<Real>(const std::vector<TensorPtr<Real>>&)> forward;
};

struct LeafError {
    std::string leaf;
    double max_rel = 0.0;
};

struct GradCheckReport {
    double max_rel = 0.0;
    std::vector<LeafError> per_leaf;
};

// Fill with values that are exactly representable in float so a case built
// at float and at double sees bit-identical leaf values.
template <class Real>
void fill_uniform_f32(Tensor<Real>& t, Rng& rng, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<Real>(static_cast<float>(rng.uniform(lo, hi)));
}

namespace detail {

// |a-n| / max(|a|, |n|, floor), floor tied to the gradient scale of the case
inline double rel_err(double a, double n, double floor) {
    const double d = std::abs(a - n);
    return d / std::max({std::abs(a), std::abs(n), floor});
}

// evenly spread element indices; samples <= 0 means every element
inline std::vector<std::int64_t> sample_indices(std::int64_t numel, int samples) {
    std::vector<std::int64_t> idx;
    if (samples <= 0 || samples >= numel) {
        idx.resize(static_cast<std::size_t>(numel));
        for (std::int64_t i = 0; i < numel; ++i) idx[static_cast<std::size_t>(i)] = i;
    } else {
        idx.reserve(static_cast<std::size_t>(samples));
        for (int k = 0; k < samples; ++k)
            idx.push_back(std::min<std::int64_t>(numel - 1, (static_cast<std::int64_t>(k) * numel) / samples));
    }
    return idx;
}

template <class Real>
double eval_scalar(GradCase<Real>& gc) {
    auto out = gc.forward(gc.leaves);
    if (out->numel() != 1) throw ShapeError("grad_check: graph output must be scalar");
    return static_cast<double>(out->data[0]);
}

// central difference at one leaf element, forward evaluated without a tape;
// also reports the second difference |f+ + f- - 2 f0|
template <class Real>
std::pair<double, double> central_diff(GradCase<Real>& gc, std::size_t leaf, std::int64_t elem,
                                       double h, double f0) {
    Real& slot = gc.leaves[leaf]->data[static_cast<std::size_t>(elem)];
    const Real saved = slot;
    slot = static_cast<Real>(static_cast<double>(saved) + h);
    const double fp = eval_scalar(gc);
    slot = static_cast<Real>(static_cast<double>(saved) - h);
    const double fm = eval_scalar(gc);
    slot = saved;
    return {(fp - fm) / (2.0 * h), std::abs(fp + fm - 2.0 * f0)};
}

// Central differences at the planned indices. ReLU and max-pool make the
// graph piecewise smooth, so each point is probed at steps h and h/4: on a
// smooth stretch the second difference shrinks like h^2 and the two
// estimates Richardson-extrapolate; a kink inside the interval makes it
// shrink only like h, in which case the sample deterministically moves to
// the next element. Returns the final indices alongside the values.
template <class Real>
void numeric_grads(GradCase<Real>& gc, std::vector<std::vector<std::int64_t>>& indices,
                   std::vector<std::vector<double>>& numeric, double eps) {
    const double f0 = eval_scalar(gc);
    const double noise =
        100.0 * (sizeof(Real) == 4 ? 1.2e-7 : 2.3e-16) * std::max(1.0, std::abs(f0));
    numeric.assign(indices.size(), {});
    for (std::size_t l = 0; l < indices.size(); ++l) {
        for (auto& idx : indices[l]) {
            const std::int64_t numel = gc.leaves[l]->numel();
            std::int64_t probe = idx;
            double n = 0.0;
            for (int attempt = 0; attempt < 12; ++attempt) {
                const double x =
                    std::abs(static_cast<double>(gc.leaves[l]->data[static_cast<std::size_t>(probe)]));
                const double h = eps * std::max(1.0, x);
                auto [d_h, s_h] = central_diff(gc, l, probe, h, f0);
                auto [d_q, s_q] = central_diff(gc, l, probe, h / 4.0, f0);
                if (s_h <= noise) {
                    n = d_h; // flat to working precision
                    break;
                }
                if (s_q <= noise) {
                    // the wide interval saw structure the narrow one does not
                    // reach; the narrow estimate is clean
                    n = d_q;
                    break;
                }
                if (s_h >= 10.0 * s_q) {
                    // h^2 scaling: smooth curvature, cancel it
                    n = (16.0 * d_q - d_h) / 15.0;
                    break;
                }
                // second difference scales like h: kink inside the interval
                n = d_q;
                if (attempt < 11) probe = (probe + 1) % numel;
            }
            idx = probe; // the index that was actually measured
            numeric[l].push_back(n);
        }
    }
}

// analytic gradients at the sampled indices, via one taped forward/backward
template <class Real>
std::vector<std::vector<double>> analytic_grads(GradCase<Real>& gc,
                                                const std::vector<std::vector<std::int64_t>>& indices) {
    for (auto& leaf : gc.leaves)
        if (leaf->requires_grad) {
            leaf->ensure_grad();
            leaf->zero_grad();
        }
    Tape<Real> tape;
    {
        TapeScope<Real> scope(tape);
        auto out = gc.forward(gc.leaves);
        if (out->numel() != 1) throw ShapeError("grad_check: graph output must be scalar");
        tape.backward(out);
    }
    std::vector<std::vector<double>> grads(gc.leaves.size());
    for (std::size_t l = 0; l < gc.leaves.size(); ++l) {
        if (indices[l].empty()) continue;
        gc.leaves[l]->ensure_grad();
        for (auto i : indices[l])
            grads[l].push_back(static_cast<double>(gc.leaves[l]->grad[static_cast<std::size_t>(i)]));
    }
    return grads;
}

template <class Real>
std::vector<std::vector<std::int64_t>> plan_indices(const GradCase<Real>& gc, int samples_per_leaf) {
    std::vector<std::vector<std::int64_t>> indices(gc.leaves.size());
    for (std::size_t l = 0; l < gc.leaves.size(); ++l)
        if (gc.leaves[l]->requires_grad)
            indices[l] = sample_indices(gc.leaves[l]->numel(), samples_per_leaf);
    return indices;
}

template <class Real>
GradCheckReport compare(const GradCase<Real>& gc,
                        const std::vector<std::vector<std::int64_t>>& indices,
                        const std::vector<std::vector<double>>& analytic,
                        const std::vector<std::vector<double>>& numeric, double floor_scale) {
    double n_inf = 0.0;
    for (const auto& leaf : numeric)
        for (double n : leaf) n_inf = std::max(n_inf, std::abs(n));
    const double floor = floor_scale * std::max(1.0, n_inf);
    GradCheckReport rep;
    for (std::size_t l = 0; l < indices.size(); ++l) {
        if (indices[l].empty()) continue;
        LeafError le;
        le.leaf = l < gc.leaf_names.size() ? gc.leaf_names[l] : ("leaf" + std::to_string(l));
        for (std::size_t k = 0; k < indices[l].size(); ++k)
            le.max_rel = std::max(le.max_rel, rel_err(analytic[l][k], numeric[l][k], floor));
        rep.max_rel = std::max(rep.max_rel, le.max_rel);
        rep.per_leaf.push_back(le);
    }
    return rep;
}

} // namespace detail

// Analytic reverse-mode gradients vs central finite differences, both at
// Real precision. samples_per_leaf <= 0 checks every element.
template <class Real>
GradCheckReport grad_check(GradCase<Real>& gc, double eps, int samples_per_leaf = 0) {
    auto indices = detail::plan_indices(gc, samples_per_leaf);
    std::vector<std::vector<double>> numeric;
    detail::numeric_grads(gc, indices, numeric, eps);
    const auto analytic = detail::analytic_grads(gc, indices);
    return detail::compare(gc, indices, analytic, numeric, sizeof(Real) == 4 ? 1e-3 : 1e-5);
}

struct DualGradReport {
    GradCheckReport f32; // float analytic vs double central differences
    GradCheckReport f64; // double analytic vs double central differences
};

// Runs the same case at both precisions. Case makers must produce
// value-identical leaves (use fill_uniform_f32); the double-precision
// central differences are computed once and serve as the oracle for both
// analytic passes.
template <class MakerF, class MakerD>
DualGradReport dual_grad_check(MakerF make32, MakerD make64, double eps, int samples_per_leaf = 0) {
    GradCase<double> c64 = make64();
    GradCase<float> c32 = make32();
    if (c32.leaves.size() != c64.leaves.size())
        throw Error("dual_grad_check: case makers disagree on leaf count for " + c64.name);
    for (std::size_t l = 0; l < c64.leaves.size(); ++l) {
        if (c32.leaves[l]->numel() != c64.leaves[l]->numel() ||
            c32.leaves[l]->requires_grad != c64.leaves[l]->requires_grad)
            throw Error("dual_grad_check: leaf layout mismatch in " + c64.name);
        for (std::int64_t i = 0; i < c64.leaves[l]->numel(); ++i)
            if (static_cast<double>(c32.leaves[l]->data[static_cast<std::size_t>(i)]) !=
                c64.leaves[l]->data[static_cast<std::size_t>(i)])
                throw Error("dual_grad_check: leaf values differ between precisions in " + c64.name);
    }

    auto indices = detail::plan_indices(c64, samples_per_leaf);
    std::vector<std::vector<double>> numeric;
    detail::numeric_grads(c64, indices, numeric, eps);
    const auto a64 = detail::analytic_grads(c64, indices);
    const auto a32 = detail::analytic_grads(c32, indices);

    DualGradReport rep;
    rep.f64 = detail::compare(c64, indices, a64, numeric, 1e-5);
    rep.f32 = detail::compare(c64, indices, a32, numeric, 1e-3);
    return rep;
}

} // namespace hba

#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "hba/common.hpp"
#include "hba/rng.hpp"

namespace hba {

// Dense 4-D tensor. data is row-major N-C-H-W; grad, when allocated, has the
// same shape. Tensors recorded on a tape must not be mutated in place.
template <class Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;
    std::vector<Real> grad; // empty until gradient flows
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, bool rg) : shape(s), data(static_cast<std::size_t>(s.numel()), Real(0)), requires_grad(rg) {}

    Real& at(int n, int c, int h, int w) { return data[static_cast<std::size_t>(shape.index(n, c, h, w))]; }
    Real at(int n, int c, int h, int w) const { return data[static_cast<std::size_t>(shape.index(n, c, h, w))]; }

    std::int64_t numel() const { return shape.numel(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    }
    void zero_grad() {
        std::fill(grad.begin(), grad.end(), Real(0));
    }
};

template <class Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <class Real>
TensorPtr<Real> make_tensor(Shape s, bool requires_grad = false) {
    return std::make_shared<Tensor<Real>>(s, requires_grad);
}

template <class Real>
TensorPtr<Real> full_tensor(Shape s, Real v, bool requires_grad = false) {
    auto t = make_tensor<Real>(s, requires_grad);
    std::fill(t->data.begin(), t->data.end(), v);
    return t;
}

template <class Real>
TensorPtr<Real> tensor_from(Shape s, std::vector<Real> values, bool requires_grad = false) {
    if (static_cast<std::int64_t>(values.size()) != s.numel())
        throw ShapeError("tensor_from: " + std::to_string(values.size()) + " values for shape " + s.str());
    auto t = make_tensor<Real>(s, requires_grad);
    t->data = std::move(values);
    return t;
}

// Draws are snapped to float so a float and a double build from the same
// seed hold bit-identical values.
template <class Real>
TensorPtr<Real> randn_tensor(Shape s, Rng& rng, Real stddev = Real(1), bool requires_grad = false) {
    auto t = make_tensor<Real>(s, requires_grad);
    const float sd = static_cast<float>(stddev);
    for (auto& v : t->data) v = static_cast<Real>(static_cast<float>(rng.normal()) * sd);
    return t;
}

template <class Real>
TensorPtr<Real> clone_tensor(const TensorPtr<Real>& t) {
    auto c = make_tensor<Real>(t->shape, t->requires_grad);
    c->data = t->data;
    return c;
}

// Linear record of executed operations. backward() replays the recorded
// closures in exact reverse execution order. Single shot: recording after
// backward, or a second backward, is an error.
template <class Real>
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        if (consumed_) throw Error("Tape: recording after backward");
        nodes_.push_back(std::move(backward_fn));
    }

    void backward(const TensorPtr<Real>& loss) {
        if (consumed_) throw Error("Tape: backward called twice without a new forward");
        if (loss->numel() != 1) throw ShapeError("Tape::backward: loss must be scalar, got " + loss->shape.str());
        consumed_ = true;
        loss->ensure_grad();
        loss->grad[0] = Real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

namespace detail {
template <class Real>
inline Tape<Real>*& active_tape_slot() {
    thread_local Tape<Real>* t = nullptr;
    return t;
}
} // namespace detail

template <class Real>
Tape<Real>* active_tape() {
    return detail::active_tape_slot<Real>();
}

// RAII binding of the thread's active tape; ops record onto it when a
// gradient path exists. No active tape = pure inference.
template <class Real>
class TapeScope {
public:
    explicit TapeScope(Tape<Real>& tape) : prev_(detail::active_tape_slot<Real>()) {
        detail::active_tape_slot<Real>() = &tape;
    }
    ~TapeScope() { detail::active_tape_slot<Real>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<Real>* prev_;
};

} // namespace hba

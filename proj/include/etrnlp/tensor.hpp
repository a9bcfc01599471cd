#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "etrnlp/rng.hpp"

namespace etrnlp {

// All feature maps are rank-4 NCHW; vectors and scalars use degenerate extents.
struct Shape {
    std::int64_t n = 1;
    std::int64_t c = 1;
    std::int64_t h = 1;
    std::int64_t w = 1;

    std::int64_t numel() const { return n * c * h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
               std::to_string(w);
    }
};

template <typename T>
struct TensorT;

template <typename T>
using TensorPtrT = std::shared_ptr<TensorT<T>>;

template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // empty until a backward pass touches this tensor
    std::string name;     // set for parameters and buffers

    TensorT() = default;
    TensorT(Shape s, T fill, bool req)
        : shape(s), data(static_cast<std::size_t>(s.numel()), fill), requires_grad(req) {}
    TensorT(Shape s, std::vector<T> d, bool req)
        : shape(s), data(std::move(d)), requires_grad(req) {
        if (static_cast<std::int64_t>(data.size()) != shape.numel()) {
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape.str());
        }
    }

    std::int64_t numel() const { return shape.numel(); }

    std::int64_t idx(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return ((n * shape.c + c) * shape.h + h) * shape.w + w;
    }
    T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>(idx(n, c, h, w))];
    }
    const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>(idx(n, c, h, w))];
    }

    bool is_scalar() const { return numel() == 1; }
    T item() const {
        if (!is_scalar()) throw std::invalid_argument("item() on non-scalar tensor " + shape.str());
        return data[0];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
    bool has_grad() const { return !grad.empty(); }

    bool all_finite() const {
        for (T v : data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }
};

template <typename T>
TensorPtrT<T> make_tensor(Shape s, T fill = T(0), bool requires_grad = false) {
    return std::make_shared<TensorT<T>>(s, fill, requires_grad);
}

template <typename T>
TensorPtrT<T> make_tensor(Shape s, std::vector<T> data, bool requires_grad = false) {
    return std::make_shared<TensorT<T>>(s, std::move(data), requires_grad);
}

template <typename T>
TensorPtrT<T> scalar_tensor(T v) {
    return make_tensor<T>(Shape{1, 1, 1, 1}, std::vector<T>{v});
}

// Gaussian fill; draws in double so float/double instantiations see the same stream.
template <typename T>
TensorPtrT<T> randn(Shape s, std::uint64_t seed, double stddev = 1.0, bool requires_grad = false) {
    auto t = make_tensor<T>(s, T(0), requires_grad);
    auto rng = make_rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t->data) v = static_cast<T>(dist(rng));
    return t;
}

template <typename T>
TensorPtrT<T> rand_uniform(Shape s, std::uint64_t seed, double lo, double hi,
                           bool requires_grad = false) {
    auto t = make_tensor<T>(s, T(0), requires_grad);
    auto rng = make_rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t->data) v = static_cast<T>(dist(rng));
    return t;
}

// Value transfer with precision cast; used by the f64 gradient-check harness.
template <typename Dst, typename Src>
void copy_cast(TensorT<Dst>& dst, const TensorT<Src>& src) {
    if (!(dst.shape == src.shape)) {
        throw std::invalid_argument("copy_cast shape mismatch: " + dst.shape.str() + " vs " +
                                    src.shape.str());
    }
    for (std::size_t i = 0; i < src.data.size(); ++i) dst.data[i] = static_cast<Dst>(src.data[i]);
}

template <typename Dst, typename Src>
TensorPtrT<Dst> clone_cast(const TensorT<Src>& src) {
    auto out = make_tensor<Dst>(src.shape, Dst(0), src.requires_grad);
    copy_cast(*out, src);
    out->name = src.name;
    return out;
}

// Reverse-mode tape. One logical thread owns it; nodes are recorded in forward
// order and replayed exactly once in reverse by backward().
template <typename T>
class TapeT {
  public:
    using BackwardFn = std::function<void()>;

    void record(std::vector<TensorPtrT<T>> inputs, TensorPtrT<T> output, BackwardFn fn) {
        produced_.insert(output.get());
        nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
    }

    bool produced(const TensorT<T>* t) const { return produced_.count(t) != 0; }

    // A gradient is propagated into a tensor if it is a learnable leaf or an
    // interior value of this tape. Frozen leaves are skipped, but gradients
    // still flow through the nodes that consumed them.
    bool needs_grad(const TensorPtrT<T>& t) const {
        return t->requires_grad || produced(t.get());
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    void backward(const TensorPtrT<T>& loss) {
        if (nodes_.empty()) throw std::invalid_argument("backward on empty tape");
        if (!loss->is_scalar()) {
            throw std::invalid_argument("backward expects a scalar loss, got " +
                                        loss->shape.str());
        }
        if (!produced(loss.get())) {
            throw std::invalid_argument("loss tensor was not produced by this tape");
        }
        loss->ensure_grad();
        loss->grad[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->output->has_grad()) continue;  // no downstream consumer
            it->fn();
        }
    }

  private:
    struct Node {
        std::vector<TensorPtrT<T>> inputs;
        TensorPtrT<T> output;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    std::unordered_set<const TensorT<T>*> produced_;
};

using Tensor = TensorT<float>;
using TensorPtr = TensorPtrT<float>;
using Tape = TapeT<float>;

}  // namespace etrnlp

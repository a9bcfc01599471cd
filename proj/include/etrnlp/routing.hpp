#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "etrnlp/nn_ops.hpp"
#include "etrnlp/params.hpp"
#include "etrnlp/primitives.hpp"
#include "etrnlp/rng.hpp"

namespace etrnlp {

// Partition of a layer's output channels into a branch shared by all tasks
// and a per-task exclusive remainder, controlled by the sharing ratio gamma.
struct ChannelSplit {
    std::int64_t c_out = 0;
    double gamma = 1.0;
    std::int64_t c_shared = 0;
    std::int64_t c_specific = 0;
};

inline ChannelSplit split_channels(std::int64_t c_out, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) {
        throw std::invalid_argument("split_channels: gamma " + std::to_string(gamma) +
                                    " outside [0, 1]");
    }
    if (c_out < 1) throw std::invalid_argument("split_channels: C_out must be >= 1");
    ChannelSplit s;
    s.c_out = c_out;
    s.gamma = gamma;
    s.c_shared = static_cast<std::int64_t>(gamma * static_cast<double>(c_out));
    s.c_specific = c_out - s.c_shared;
    return s;
}

template <typename T>
struct ConvPair {
    TensorPtrT<T> w;
    TensorPtrT<T> b;
};

template <typename T>
ConvPair<T> make_conv3x3(std::int64_t c_in, std::int64_t c_out, std::uint64_t seed) {
    ConvPair<T> p;
    p.w = randn<T>(Shape{c_out, c_in, 3, 3}, mix_seed(seed, "w"),
                   std::sqrt(2.0 / static_cast<double>(c_in * 9)), /*requires_grad=*/true);
    p.b = make_tensor<T>(Shape{1, c_out, 1, 1}, T(0), /*requires_grad=*/true);
    return p;
}

// Fused ETR module: one shared branch of C_shared channels (NLP-based or a
// standard 3x3 convolution) plus T task-specific 3x3 convolutions of
// C_specific channels each, concatenated per active task. Exactly one task
// branch participates in a forward pass.
struct EtrOptions {
    std::int64_t c_in = 0;
    std::int64_t c_out = 0;
    double gamma = 0.9;
    int tasks = 1;
    bool shared_nlp = true;
    std::vector<PrimitiveSpec> primitives;  // used when shared_nlp
    std::uint64_t seed = 0;
};

template <typename T>
class EtrModuleT {
  public:
    using Options = EtrOptions;

    explicit EtrModuleT(const Options& opt)
        : split_(split_channels(opt.c_out, opt.gamma)), c_in_(opt.c_in), tasks_(opt.tasks) {
        if (opt.tasks < 1) throw std::invalid_argument("etr module: tasks must be >= 1");
        if (split_.c_shared > 0) {
            if (opt.shared_nlp) {
                shared_nlp_.emplace(opt.primitives.empty() ? default_primitive_set()
                                                           : opt.primitives,
                                    c_in_, split_.c_shared, mix_seed(opt.seed, "shared"),
                                    /*strict_grouping=*/false);
            } else {
                shared_conv_ = make_conv3x3<T>(c_in_, split_.c_shared, mix_seed(opt.seed, "shared"));
            }
        }
        if (split_.c_specific > 0) {
            task_convs_.reserve(static_cast<std::size_t>(tasks_));
            for (int t = 0; t < tasks_; ++t) {
                task_convs_.push_back(make_conv3x3<T>(c_in_, split_.c_specific,
                                                      mix_seed(opt.seed, "task" + std::to_string(t))));
            }
        }
    }

    const ChannelSplit& split() const { return split_; }
    std::int64_t c_in() const { return c_in_; }
    int tasks() const { return tasks_; }
    int active_task() const { return active_task_; }
    bool has_nlp() const { return shared_nlp_.has_value(); }
    const NlpLayerT<T>& shared_nlp() const { return *shared_nlp_; }
    const std::vector<ConvPair<T>>& task_convs() const { return task_convs_; }
    ConvPair<T>& shared_conv() { return shared_conv_; }

    // Channels [0, C_shared) come from the shared branch, the rest from the
    // active task's branch; both consume the same input x.
    TensorPtrT<T> forward(TapeT<T>* tape, const TensorPtrT<T>& x, int task) {
        if (task < 0 || task >= tasks_) {
            throw std::invalid_argument("etr module: invalid task id " + std::to_string(task) +
                                        " (tasks=" + std::to_string(tasks_) + ")");
        }
        active_task_ = task;
        TensorPtrT<T> shared;
        if (split_.c_shared > 0) {
            if (shared_nlp_) {
                shared = shared_nlp_->forward(tape, x);
            } else {
                ConvSpec cs;
                cs.stride = 1;
                cs.pad = 1;
                shared = conv2d(tape, x, shared_conv_.w, shared_conv_.b, cs);
            }
        }
        TensorPtrT<T> specific;
        if (split_.c_specific > 0) {
            const auto& tc = task_convs_[static_cast<std::size_t>(task)];
            ConvSpec cs;
            cs.stride = 1;
            cs.pad = 1;
            specific = conv2d(tape, x, tc.w, tc.b, cs);
        }
        if (shared && specific) return concat_channels(tape, {shared, specific});
        return shared ? shared : specific;
    }

    std::int64_t shared_learnable_count() const {
        if (split_.c_shared == 0) return 0;
        if (shared_nlp_) return shared_nlp_->learnable_count();
        return shared_conv_.w->numel() + shared_conv_.b->numel();
    }
    std::int64_t per_task_learnable_count() const {
        if (split_.c_specific == 0) return 0;
        return split_.c_specific * c_in_ * 9 + split_.c_specific;
    }
    std::int64_t total_learnable_count() const {
        return shared_learnable_count() + static_cast<std::int64_t>(tasks_) * per_task_learnable_count();
    }
    std::int64_t frozen_count() const { return shared_nlp_ ? shared_nlp_->frozen_count() : 0; }

    std::int64_t macs(std::int64_t h, std::int64_t w) const {
        std::int64_t n = 0;
        if (split_.c_shared > 0) {
            n += shared_nlp_ ? shared_nlp_->macs(h, w) : split_.c_shared * c_in_ * 9 * h * w;
        }
        if (split_.c_specific > 0) n += split_.c_specific * c_in_ * 9 * h * w;  // one active branch
        return n;
    }

    void register_params(ParamRegistryT<T>& reg, const std::string& prefix) const {
        if (split_.c_shared > 0) {
            if (shared_nlp_) {
                shared_nlp_->register_params(reg, prefix + ".shared", kSharedTask);
            } else {
                reg.add(prefix + ".shared.w", shared_conv_.w, kSharedTask);
                reg.add(prefix + ".shared.b", shared_conv_.b, kSharedTask);
            }
        }
        for (int t = 0; t < static_cast<int>(task_convs_.size()); ++t) {
            const auto& tc = task_convs_[static_cast<std::size_t>(t)];
            reg.add(prefix + ".task" + std::to_string(t) + ".w", tc.w, t);
            reg.add(prefix + ".task" + std::to_string(t) + ".b", tc.b, t);
        }
    }

  private:
    ChannelSplit split_;
    std::int64_t c_in_ = 0;
    int tasks_ = 1;
    int active_task_ = 0;
    std::optional<NlpLayerT<T>> shared_nlp_;
    ConvPair<T> shared_conv_;
    std::vector<ConvPair<T>> task_convs_;
};

// Per-branch gradient magnitudes after a backward pass. The contract under
// explicit routing: every branch other than the active one reports exactly
// zero because it never entered the tape.
struct GradIsolationReport {
    int active_task = 0;
    double shared_linf = 0.0;
    std::vector<double> task_linf;
};

template <typename T>
double grad_linf(const std::vector<const ParamEntry<T>*>& params) {
    double m = 0.0;
    for (const auto* e : params) {
        if (!e->tensor->has_grad()) continue;
        for (T g : e->tensor->grad) m = std::max(m, std::abs(static_cast<double>(g)));
    }
    return m;
}

template <typename T>
GradIsolationReport grad_isolation_check(const ParamRegistryT<T>& reg, int tasks,
                                         int active_task) {
    GradIsolationReport rep;
    rep.active_task = active_task;
    rep.shared_linf = grad_linf(reg.shared_only());
    rep.task_linf.resize(static_cast<std::size_t>(tasks));
    for (int t = 0; t < tasks; ++t) {
        rep.task_linf[static_cast<std::size_t>(t)] = grad_linf(reg.task_only(t));
    }
    return rep;
}

// Random-mask task routing baseline: a single shared convolution whose output
// channels are gated per task by fixed binary masks of population
// floor(gamma * C_out), sampled once at construction.
struct MaskRoutingOptions {
    std::int64_t c_in = 0;
    std::int64_t c_out = 0;
    double gamma = 0.9;
    int tasks = 1;
    std::uint64_t seed = 0;
};

template <typename T>
class MaskRoutingT {
  public:
    using Options = MaskRoutingOptions;

    explicit MaskRoutingT(const Options& opt)
        : c_out_(opt.c_out), keep_(static_cast<std::size_t>(opt.tasks)) {
        if (opt.tasks < 1) throw std::invalid_argument("mask routing: tasks must be >= 1");
        const auto split = split_channels(opt.c_out, opt.gamma);
        conv_ = make_conv3x3<T>(opt.c_in, opt.c_out, mix_seed(opt.seed, "conv"));
        for (int t = 0; t < opt.tasks; ++t) {
            keep_[static_cast<std::size_t>(t)] =
                sample_mask(opt.c_out, split.c_shared, mix_seed(opt.seed, "mask" + std::to_string(t)));
        }
    }

    static std::vector<std::uint8_t> sample_mask(std::int64_t c_out, std::int64_t population,
                                                 std::uint64_t seed) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(c_out));
        std::iota(order.begin(), order.end(), std::int64_t{0});
        auto rng = make_rng(seed);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(c_out), 0);
        for (std::int64_t i = 0; i < population; ++i)
            mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
        return mask;
    }

    TensorPtrT<T> forward(TapeT<T>* tape, const TensorPtrT<T>& x, int task) {
        ConvSpec cs;
        cs.stride = 1;
        cs.pad = 1;
        auto y = conv2d(tape, x, conv_.w, conv_.b, cs);
        return apply_mask(tape, y, task);
    }

    TensorPtrT<T> apply_mask(TapeT<T>* tape, const TensorPtrT<T>& conv_out, int task) const {
        if (task < 0 || task >= static_cast<int>(keep_.size())) {
            throw std::invalid_argument("mask routing: invalid task id " + std::to_string(task));
        }
        if (conv_out->shape.c != c_out_) {
            throw std::invalid_argument("mask routing: mask length " + std::to_string(c_out_) +
                                        " does not match " + std::to_string(conv_out->shape.c) +
                                        " channels");
        }
        return mask_channels(tape, conv_out, keep_[static_cast<std::size_t>(task)]);
    }

    const std::vector<std::uint8_t>& mask(int task) const {
        return keep_.at(static_cast<std::size_t>(task));
    }
    std::int64_t c_out() const { return c_out_; }

    std::int64_t learnable_count() const { return conv_.w->numel() + conv_.b->numel(); }
    std::int64_t macs(std::int64_t c_in, std::int64_t h, std::int64_t w) const {
        return c_out_ * c_in * 9 * h * w;
    }

    void register_params(ParamRegistryT<T>& reg, const std::string& prefix) const {
        reg.add(prefix + ".conv.w", conv_.w, kSharedTask);
        reg.add(prefix + ".conv.b", conv_.b, kSharedTask);
    }

  private:
    std::int64_t c_out_ = 0;
    ConvPair<T> conv_;
    std::vector<std::vector<std::uint8_t>> keep_;
};

using EtrModule = EtrModuleT<float>;
using MaskRouting = MaskRoutingT<float>;

}  // namespace etrnlp

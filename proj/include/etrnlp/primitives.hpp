#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "etrnlp/nn_ops.hpp"
#include "etrnlp/params.hpp"
#include "etrnlp/rng.hpp"
#include "etrnlp/tensor.hpp"

namespace etrnlp {

enum class PrimitiveKind { avg_pool, max_pool, fixed_conv, shift, perturbation };

enum class WeightStyle { binary, gaussian };

inline const char* primitive_kind_name(PrimitiveKind k) {
    switch (k) {
        case PrimitiveKind::avg_pool: return "avg_pool";
        case PrimitiveKind::max_pool: return "max_pool";
        case PrimitiveKind::fixed_conv: return "fixed_conv";
        case PrimitiveKind::shift: return "shift";
        case PrimitiveKind::perturbation: return "perturbation";
    }
    return "?";
}

// Hyperparameters of one non-learnable primitive. All frozen state is a pure
// function of (spec, C_in, seed).
struct PrimitiveSpec {
    PrimitiveKind kind = PrimitiveKind::avg_pool;
    int kernel = 5;                                // pooling / fixed_conv
    double sparsity = 0.5;                         // fixed_conv, fraction zeroed
    WeightStyle weight_style = WeightStyle::binary;  // fixed_conv
    bool depthwise = true;                         // fixed_conv
    int shift_step = 1;                            // shift displacement magnitude
    double amplitude = 0.1;                        // perturbation noise bound

    void validate() const {
        switch (kind) {
            case PrimitiveKind::avg_pool:
            case PrimitiveKind::max_pool:
                if (kernel < 1 || kernel % 2 == 0) {
                    throw std::invalid_argument(std::string(primitive_kind_name(kind)) +
                                                ": kernel must be odd and >= 1");
                }
                break;
            case PrimitiveKind::fixed_conv:
                if (kernel < 1 || kernel % 2 == 0) {
                    throw std::invalid_argument("fixed_conv: kernel must be odd and >= 1");
                }
                if (!(sparsity >= 0.0 && sparsity < 1.0)) {
                    throw std::invalid_argument("fixed_conv: sparsity must be in [0, 1)");
                }
                break;
            case PrimitiveKind::shift:
                if (shift_step < 0) throw std::invalid_argument("shift: shift_step must be >= 0");
                break;
            case PrimitiveKind::perturbation:
                if (!(amplitude > 0.0)) {
                    throw std::invalid_argument("perturbation: amplitude must be > 0");
                }
                break;
        }
    }
};

inline std::vector<PrimitiveSpec> default_primitive_set() {
    PrimitiveSpec avg;
    avg.kind = PrimitiveKind::avg_pool;
    avg.kernel = 5;
    PrimitiveSpec conv;
    conv.kind = PrimitiveKind::fixed_conv;
    conv.kernel = 3;
    conv.sparsity = 0.5;
    conv.weight_style = WeightStyle::binary;
    conv.depthwise = true;
    PrimitiveSpec noise;
    noise.kind = PrimitiveKind::perturbation;
    noise.amplitude = 0.1;
    return {avg, conv, noise};
}

// One instantiated primitive: maps C_in channels to C_in channels at unchanged
// spatial size, with no learnable state.
template <typename T>
class PrimitiveT {
  public:
    PrimitiveT(PrimitiveSpec spec, std::int64_t c_in, std::uint64_t seed)
        : spec_(spec), c_in_(c_in), seed_(seed) {
        spec_.validate();
        if (c_in < 1) throw std::invalid_argument("primitive: C_in must be >= 1");
        switch (spec_.kind) {
            case PrimitiveKind::fixed_conv: build_fixed_conv(); break;
            case PrimitiveKind::shift: build_shift(); break;
            default: break;
        }
    }

    const PrimitiveSpec& spec() const { return spec_; }
    std::int64_t c_in() const { return c_in_; }
    std::uint64_t seed() const { return seed_; }
    const TensorPtrT<T>& conv_weight() const { return weight_; }
    const std::vector<std::pair<int, int>>& shift_offsets() const { return offsets_; }

    TensorPtrT<T> forward(TapeT<T>* tape, const TensorPtrT<T>& x) const {
        if (x->shape.c != c_in_) {
            throw std::invalid_argument(std::string(primitive_kind_name(spec_.kind)) +
                                        ": expected " + std::to_string(c_in_) +
                                        " channels, got " + std::to_string(x->shape.c));
        }
        switch (spec_.kind) {
            case PrimitiveKind::avg_pool:
                return avg_pool2d(tape, x, spec_.kernel, 1, spec_.kernel / 2);
            case PrimitiveKind::max_pool:
                return pool2d(tape, x, PoolKind::max, spec_.kernel, 1, spec_.kernel / 2);
            case PrimitiveKind::fixed_conv: {
                ConvSpec cs;
                cs.stride = 1;
                cs.pad = spec_.kernel / 2;
                cs.groups = spec_.depthwise ? c_in_ : 1;
                return conv2d(tape, x, weight_, TensorPtrT<T>{}, cs);
            }
            case PrimitiveKind::shift:
                return shift_channels(tape, x, offsets_);
            case PrimitiveKind::perturbation:
                return add_broadcast_n(tape, x, noise_mask(x->shape.h, x->shape.w));
        }
        throw std::logic_error("unreachable primitive kind");
    }

    // Count of frozen scalars held by this primitive (materialized state only).
    std::int64_t frozen_count() const {
        std::int64_t n = 0;
        if (weight_) n += weight_->numel();
        n += static_cast<std::int64_t>(offsets_.size());
        for (const auto& [hw, mask] : noise_cache_) n += mask->numel();
        return n;
    }

    // MACs per sample at the given spatial size; only the fixed convolution
    // performs multiply-accumulates.
    std::int64_t macs(std::int64_t h, std::int64_t w) const {
        if (spec_.kind != PrimitiveKind::fixed_conv) return 0;
        const std::int64_t per_group = spec_.depthwise ? 1 : c_in_;
        return c_in_ * per_group * spec_.kernel * spec_.kernel * h * w;
    }

    // Noise mask for the given spatial size, materialized once per size and
    // derived purely from (spec, C_in, seed, H, W).
    TensorPtrT<T> noise_mask(std::int64_t h, std::int64_t w) const {
        const auto key = std::make_pair(h, w);
        auto it = noise_cache_.find(key);
        if (it != noise_cache_.end()) return it->second;
        const std::uint64_t s =
            mix_seed(mix_seed(seed_, "noise"),
                     (static_cast<std::uint64_t>(h) << 32) | static_cast<std::uint64_t>(w));
        auto mask = rand_uniform<T>(Shape{1, c_in_, h, w}, s, -spec_.amplitude, spec_.amplitude);
        noise_cache_.emplace(key, mask);
        return mask;
    }

  private:
    void build_fixed_conv() {
        const std::int64_t per_group = spec_.depthwise ? 1 : c_in_;
        const Shape ws{c_in_, per_group, spec_.kernel, spec_.kernel};
        if (spec_.weight_style == WeightStyle::binary) {
            weight_ = make_tensor<T>(ws);
            auto rng = make_rng(mix_seed(seed_, "weights"));
            std::uniform_int_distribution<int> coin(0, 1);
            for (auto& v : weight_->data) v = coin(rng) ? T(1) : T(-1);
        } else {
            const double stddev = std::sqrt(2.0 / static_cast<double>(per_group * spec_.kernel *
                                                                      spec_.kernel));
            weight_ = randn<T>(ws, mix_seed(seed_, "weights"), stddev);
        }
        // Zero an exact floor(sparsity * n) subset chosen by seeded permutation.
        const auto n = weight_->data.size();
        const auto zeros = static_cast<std::size_t>(spec_.sparsity * static_cast<double>(n));
        if (zeros > 0) {
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), std::size_t{0});
            auto rng = make_rng(mix_seed(seed_, "sparsity"));
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t i = 0; i < zeros; ++i) weight_->data[order[i]] = T(0);
        }
    }

    void build_shift() {
        static constexpr std::pair<int, int> kPattern[5] = {
            {-1, 0}, {1, 0}, {0, -1}, {0, 1}, {0, 0}};
        offsets_.resize(static_cast<std::size_t>(c_in_));
        for (std::int64_t c = 0; c < c_in_; ++c) {
            auto [dy, dx] = kPattern[c % 5];
            offsets_[static_cast<std::size_t>(c)] = {dy * spec_.shift_step,
                                                     dx * spec_.shift_step};
        }
    }

    PrimitiveSpec spec_;
    std::int64_t c_in_ = 0;
    std::uint64_t seed_ = 0;
    TensorPtrT<T> weight_;                            // fixed_conv
    std::vector<std::pair<int, int>> offsets_;        // shift
    mutable std::map<std::pair<std::int64_t, std::int64_t>, TensorPtrT<T>> noise_cache_;
};

template <typename T>
PrimitiveT<T> make_primitive(const PrimitiveSpec& spec, std::int64_t c_in, std::uint64_t seed) {
    return PrimitiveT<T>(spec, c_in, seed);
}

// NLP feature extraction: k frozen primitives in parallel, concatenation,
// channel shuffle into groups holding one feature per primitive, and a
// learnable group-wise 1x1 recombination. Only the combiner is learnable.
//
// The combiner uses groups = gcd(C_in, C_out); when C_out is a multiple of
// C_in this is exactly groups = C_in with k inputs per group. Strict mode
// rejects channel pairs where neither count divides the other (no silent
// padding); the ETR shared branch disables it because floor(gamma * C_out)
// is generally not a multiple of C_in.
template <typename T>
class NlpLayerT {
  public:
    NlpLayerT(std::vector<PrimitiveSpec> specs, std::int64_t c_in, std::int64_t c_out,
              std::uint64_t seed, bool strict_grouping = true) {
        if (specs.empty()) throw std::invalid_argument("nlp layer: primitive set is empty");
        if (c_in < 1 || c_out < 1) throw std::invalid_argument("nlp layer: bad channel counts");
        if (strict_grouping && c_out % c_in != 0 && c_in % c_out != 0) {
            throw std::invalid_argument("nlp layer: C_out=" + std::to_string(c_out) +
                                        " must divide or be divisible by C_in=" +
                                        std::to_string(c_in));
        }
        c_in_ = c_in;
        c_out_ = c_out;
        groups_ = std::gcd(c_in, c_out);
        for (std::size_t i = 0; i < specs.size(); ++i) {
            prims_.emplace_back(specs[i], c_in,
                                mix_seed(seed, "prim" + std::to_string(i)));
        }
        const std::int64_t k = static_cast<std::int64_t>(prims_.size());
        const std::int64_t fan_in = (c_in / groups_) * k;
        weight_ = randn<T>(Shape{c_out, fan_in, 1, 1}, mix_seed(seed, "combiner.w"),
                           std::sqrt(2.0 / static_cast<double>(fan_in)), /*requires_grad=*/true);
        bias_ = make_tensor<T>(Shape{1, c_out, 1, 1}, T(0), /*requires_grad=*/true);
    }

    std::int64_t c_in() const { return c_in_; }
    std::int64_t c_out() const { return c_out_; }
    std::int64_t k() const { return static_cast<std::int64_t>(prims_.size()); }
    std::int64_t combiner_groups() const { return groups_; }
    const std::vector<PrimitiveT<T>>& primitives() const { return prims_; }
    const TensorPtrT<T>& combiner_weight() const { return weight_; }
    const TensorPtrT<T>& combiner_bias() const { return bias_; }

    TensorPtrT<T> forward(TapeT<T>* tape, const TensorPtrT<T>& x) const {
        if (x->shape.c != c_in_) {
            throw std::invalid_argument("nlp layer: expected " + std::to_string(c_in_) +
                                        " channels, got " + std::to_string(x->shape.c));
        }
        std::vector<TensorPtrT<T>> feats;
        feats.reserve(prims_.size());
        for (const auto& p : prims_) feats.push_back(p.forward(tape, x));
        auto y = concat_channels(tape, feats);
        y = channel_shuffle(tape, y, k());
        ConvSpec cs;
        cs.groups = groups_;
        return conv2d(tape, y, weight_, bias_, cs);
    }

    std::int64_t learnable_count() const { return weight_->numel() + bias_->numel(); }

    std::int64_t frozen_count() const {
        std::int64_t n = 0;
        for (const auto& p : prims_) n += p.frozen_count();
        return n;
    }

    std::int64_t macs(std::int64_t h, std::int64_t w) const {
        std::int64_t n = 0;
        for (const auto& p : prims_) n += p.macs(h, w);
        n += c_out_ * (c_in_ / groups_) * k() * h * w;  // combiner
        return n;
    }

    void register_params(ParamRegistryT<T>& reg, const std::string& prefix, int task) const {
        reg.add(prefix + ".combiner.w", weight_, task);
        reg.add(prefix + ".combiner.b", bias_, task);
    }

  private:
    std::int64_t c_in_ = 0;
    std::int64_t c_out_ = 0;
    std::int64_t groups_ = 1;
    std::vector<PrimitiveT<T>> prims_;
    TensorPtrT<T> weight_;
    TensorPtrT<T> bias_;
};

template <typename T>
std::pair<std::int64_t, std::int64_t> nlp_param_count(const NlpLayerT<T>& layer) {
    return {layer.learnable_count(), layer.frozen_count()};
}

using Primitive = PrimitiveT<float>;
using NlpLayer = NlpLayerT<float>;

}  // namespace etrnlp

#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "etrnlp/params.hpp"
#include "etrnlp/tensor.hpp"

namespace etrnlp {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam with per-parameter step counters, so shared and
// task-specific branches can be stepped at different cadences.
template <typename T>
class AdamT {
  public:
    struct Slot {
        std::vector<T> m;
        std::vector<T> v;
        std::int64_t t = 0;
    };

    explicit AdamT(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }

    void step(const std::vector<const ParamEntry<T>*>& params) {
        for (const auto* e : params) step_one(*e);
    }

    void step_one(const ParamEntry<T>& e) {
        auto& p = *e.tensor;
        auto& slot = slots_[e.name];
        if (slot.m.empty()) {
            slot.m.assign(p.data.size(), T(0));
            slot.v.assign(p.data.size(), T(0));
        }
        slot.t += 1;
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T corr1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(slot.t)));
        const T corr2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(slot.t)));
        const T lr = static_cast<T>(cfg_.lr);
        const T eps = static_cast<T>(cfg_.eps);
        const bool has_grad = p.has_grad();
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const T g = has_grad ? p.grad[i] : T(0);
            if (!std::isfinite(static_cast<double>(g))) {
                throw std::runtime_error("non-finite gradient in parameter '" + e.name + "'");
            }
            slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * g * g;
            const T mhat = slot.m[i] / corr1;
            const T vhat = slot.v[i] / corr2;
            p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }

    const std::map<std::string, Slot>& slots() const { return slots_; }
    std::map<std::string, Slot>& slots() { return slots_; }

  private:
    AdamConfig cfg_;
    std::map<std::string, Slot> slots_;
};

using Adam = AdamT<float>;

}  // namespace etrnlp

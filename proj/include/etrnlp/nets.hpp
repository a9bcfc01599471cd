#pragma once

#include <cstdint>
#include <cstdio>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "etrnlp/nn_ops.hpp"
#include "etrnlp/params.hpp"
#include "etrnlp/primitives.hpp"
#include "etrnlp/routing.hpp"

namespace etrnlp {

enum class LayerKind { conv, nlp, etr, etr_nlp, mask_routing };
enum class HeadKind { attribute_logit, segmentation_logit, depth_regression };
enum class ArchKind { mini_resnet, mini_segnet };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv: return "conv";
        case LayerKind::nlp: return "nlp";
        case LayerKind::etr: return "etr";
        case LayerKind::etr_nlp: return "etr_nlp";
        case LayerKind::mask_routing: return "mask_routing";
    }
    return "?";
}

inline const char* head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::attribute_logit: return "attribute";
        case HeadKind::segmentation_logit: return "segmentation";
        case HeadKind::depth_regression: return "depth";
    }
    return "?";
}

struct ArchConfig {
    ArchKind arch = ArchKind::mini_resnet;
    std::vector<std::int64_t> widths = {16, 32, 64};
    std::vector<LayerKind> stage_kinds = {LayerKind::conv, LayerKind::conv, LayerKind::conv};
    double gamma = 0.9;
    std::vector<double> gamma_per_stage;  // optional per-stage override
    std::vector<PrimitiveSpec> primitives = default_primitive_set();
    int tasks = 1;
    std::vector<HeadKind> heads;  // one per task; defaulted per arch when empty
    std::int64_t in_channels = 3;

    double stage_gamma(std::size_t stage) const {
        return gamma_per_stage.empty() ? gamma : gamma_per_stage.at(stage);
    }
};

template <typename T>
struct BatchNormT {
    TensorPtrT<T> scale, shift, mean, var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    void init(std::int64_t c) {
        scale = make_tensor<T>(Shape{1, c, 1, 1}, T(1), /*requires_grad=*/true);
        shift = make_tensor<T>(Shape{1, c, 1, 1}, T(0), /*requires_grad=*/true);
        mean = make_tensor<T>(Shape{1, c, 1, 1}, T(0));
        var = make_tensor<T>(Shape{1, c, 1, 1}, T(1));
    }
    TensorPtrT<T> forward(TapeT<T>* tape, const TensorPtrT<T>& x, bool train) const {
        return batchnorm2d(tape, x, scale, shift, mean, var, train, momentum, eps);
    }
    void register_params(ParamRegistryT<T>& reg, const std::string& prefix) const {
        reg.add(prefix + ".scale", scale, kSharedTask);
        reg.add(prefix + ".shift", shift, kSharedTask);
        reg.add_buffer(prefix + ".mean", mean);
        reg.add_buffer(prefix + ".var", var);
    }
    std::int64_t learnable_count() const { return scale->numel() + shift->numel(); }
};

// One swappable convolutional unit followed by batch normalization. Plain
// kinds use one task-shared norm. Routed kinds normalize the shared and the
// task-specific channel ranges separately: the exclusive channels carry a
// different branch's activations for every task, so they get per-task norms
// (running statistics pooled across tasks would mis-normalize them at eval).
template <typename T>
struct ConvUnitT {
    LayerKind kind = LayerKind::conv;
    std::int64_t c_in = 0;
    std::int64_t c_out = 0;
    ConvPair<T> conv;
    std::optional<NlpLayerT<T>> nlp;
    std::optional<EtrModuleT<T>> etr;
    std::optional<MaskRoutingT<T>> maskr;
    BatchNormT<T> bn;                     // non-routed kinds and the ETR shared range
    std::vector<BatchNormT<T>> task_bns;  // ETR task-specific range, one per task

    static ConvUnitT build(LayerKind kind, std::int64_t c_in, std::int64_t c_out, double gamma,
                           int tasks, const std::vector<PrimitiveSpec>& prims, std::uint64_t seed,
                           const std::string& where) {
        ConvUnitT u;
        u.kind = kind;
        u.c_in = c_in;
        u.c_out = c_out;
        try {
            switch (kind) {
                case LayerKind::conv:
                    u.conv = make_conv3x3<T>(c_in, c_out, seed);
                    break;
                case LayerKind::nlp:
                    u.nlp.emplace(prims, c_in, c_out, seed);
                    break;
                case LayerKind::etr:
                case LayerKind::etr_nlp: {
                    typename EtrModuleT<T>::Options opt;
                    opt.c_in = c_in;
                    opt.c_out = c_out;
                    opt.gamma = gamma;
                    opt.tasks = tasks;
                    opt.shared_nlp = (kind == LayerKind::etr_nlp);
                    opt.primitives = prims;
                    opt.seed = seed;
                    u.etr.emplace(opt);
                    break;
                }
                case LayerKind::mask_routing: {
                    typename MaskRoutingT<T>::Options opt;
                    opt.c_in = c_in;
                    opt.c_out = c_out;
                    opt.gamma = gamma;
                    opt.tasks = tasks;
                    opt.seed = seed;
                    u.maskr.emplace(opt);
                    break;
                }
            }
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(where + ": " + e.what());
        }
        if (u.etr) {
            const auto& split = u.etr->split();
            if (split.c_shared > 0) u.bn.init(split.c_shared);
            if (split.c_specific > 0) {
                u.task_bns.resize(static_cast<std::size_t>(tasks));
                for (auto& tb : u.task_bns) tb.init(split.c_specific);
            }
        } else {
            u.bn.init(c_out);
        }
        return u;
    }

    TensorPtrT<T> forward(TapeT<T>* tape, const TensorPtrT<T>& x, int task, bool train) {
        TensorPtrT<T> y;
        switch (kind) {
            case LayerKind::conv: {
                ConvSpec cs;
                cs.stride = 1;
                cs.pad = 1;
                y = conv2d(tape, x, conv.w, conv.b, cs);
                break;
            }
            case LayerKind::nlp:
                y = nlp->forward(tape, x);
                break;
            case LayerKind::etr:
            case LayerKind::etr_nlp: {
                y = etr->forward(tape, x, task);
                const auto& split = etr->split();
                auto& tb = task_bns.empty() ? bn
                                            : task_bns[static_cast<std::size_t>(task)];
                if (split.c_shared == 0) return tb.forward(tape, y, train);
                if (split.c_specific == 0) return bn.forward(tape, y, train);
                auto shared_part = slice_channels(tape, y, 0, split.c_shared);
                auto task_part = slice_channels(tape, y, split.c_shared, split.c_specific);
                return concat_channels(
                    tape, {bn.forward(tape, shared_part, train),
                           tb.forward(tape, task_part, train)});
            }
            case LayerKind::mask_routing:
                y = maskr->forward(tape, x, task);
                break;
        }
        return bn.forward(tape, y, train);
    }

    void register_params(ParamRegistryT<T>& reg, const std::string& prefix) const {
        switch (kind) {
            case LayerKind::conv:
                reg.add(prefix + ".w", conv.w, kSharedTask);
                reg.add(prefix + ".b", conv.b, kSharedTask);
                break;
            case LayerKind::nlp:
                nlp->register_params(reg, prefix, kSharedTask);
                break;
            case LayerKind::etr:
            case LayerKind::etr_nlp:
                etr->register_params(reg, prefix);
                break;
            case LayerKind::mask_routing:
                maskr->register_params(reg, prefix);
                break;
        }
        if (etr) {
            if (etr->split().c_shared > 0) bn.register_params(reg, prefix + ".bn");
            for (int t = 0; t < static_cast<int>(task_bns.size()); ++t) {
                auto& tb = task_bns[static_cast<std::size_t>(t)];
                const std::string tp = prefix + ".bn.task" + std::to_string(t);
                reg.add(tp + ".scale", tb.scale, t);
                reg.add(tp + ".shift", tb.shift, t);
                reg.add_buffer(tp + ".mean", tb.mean);
                reg.add_buffer(tp + ".var", tb.var);
            }
        } else {
            bn.register_params(reg, prefix + ".bn");
        }
    }

    std::int64_t learnable_count() const {
        std::int64_t n = 0;
        switch (kind) {
            case LayerKind::conv: n += conv.w->numel() + conv.b->numel(); break;
            case LayerKind::nlp: n += nlp->learnable_count(); break;
            case LayerKind::etr:
            case LayerKind::etr_nlp: n += etr->total_learnable_count(); break;
            case LayerKind::mask_routing: n += maskr->learnable_count(); break;
        }
        if (etr) {
            if (etr->split().c_shared > 0) n += bn.learnable_count();
            for (const auto& tb : task_bns) n += tb.learnable_count();
        } else {
            n += bn.learnable_count();
        }
        return n;
    }

    std::int64_t frozen_count() const {
        if (kind == LayerKind::nlp) return nlp->frozen_count();
        if (kind == LayerKind::etr || kind == LayerKind::etr_nlp) return etr->frozen_count();
        return 0;
    }

    std::int64_t macs(std::int64_t h, std::int64_t w) const {
        switch (kind) {
            case LayerKind::conv: return c_out * c_in * 9 * h * w;
            case LayerKind::nlp: return nlp->macs(h, w);
            case LayerKind::etr:
            case LayerKind::etr_nlp: return etr->macs(h, w);
            case LayerKind::mask_routing: return maskr->macs(c_in, h, w);
        }
        return 0;
    }
};

template <typename T>
struct ResBlockT {
    ConvUnitT<T> u1, u2;
    bool has_proj = false;
    ConvPair<T> proj;  // learnable 1x1, always fully shared

    TensorPtrT<T> forward(TapeT<T>* tape, const TensorPtrT<T>& x, int task, bool train) {
        auto h = relu(tape, u1.forward(tape, x, task, train));
        auto h2 = u2.forward(tape, h, task, train);
        TensorPtrT<T> skip = x;
        if (has_proj) {
            ConvSpec cs;
            skip = conv2d(tape, x, proj.w, proj.b, cs);
        }
        return relu(tape, add(tape, h2, skip));
    }
};

struct StageSummary {
    std::string name;
    std::string out_shape;
    std::int64_t learnable = 0;
    std::int64_t frozen = 0;
    std::int64_t macs = 0;
};

struct NetworkCounts {
    std::int64_t learnable = 0;
    std::int64_t frozen = 0;
    std::int64_t macs = 0;  // multiply-accumulates for one sample, one active task
};

template <typename T>
class NetworkT {
  public:
    NetworkT(const ArchConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        validate_and_default(cfg_);
        if (cfg_.arch == ArchKind::mini_resnet) build_resnet(seed);
        else build_segnet(seed);
        register_all();
    }

    const ArchConfig& config() const { return cfg_; }
    ParamRegistryT<T>& registry() { return reg_; }
    const ParamRegistryT<T>& registry() const { return reg_; }
    int tasks() const { return cfg_.tasks; }

    // Runs one forward with the given task active on every routed stage and
    // returns that task's head output.
    TensorPtrT<T> forward_task(TapeT<T>* tape, const TensorPtrT<T>& x, int task, bool train) {
        if (task < 0 || task >= cfg_.tasks) {
            throw std::invalid_argument("forward_task: invalid task id " + std::to_string(task));
        }
        if (x->shape.c != cfg_.in_channels) {
            throw std::invalid_argument("forward_task: stem expects " +
                                        std::to_string(cfg_.in_channels) + " channels, got " +
                                        std::to_string(x->shape.c));
        }
        return cfg_.arch == ArchKind::mini_resnet ? forward_resnet(tape, x, task, train)
                                                  : forward_segnet(tape, x, task, train);
    }

    std::vector<std::string> stage_names() const {
        std::vector<std::string> names{"stem"};
        if (cfg_.arch == ArchKind::mini_resnet) {
            for (std::size_t i = 0; i < blocks_.size(); ++i)
                names.push_back("stage" + std::to_string(i));
        } else {
            for (std::size_t i = 0; i < enc_.size(); ++i)
                names.push_back("enc" + std::to_string(i));
            for (std::size_t i = 0; i < dec_.size(); ++i)
                names.push_back("dec" + std::to_string(i));
        }
        return names;
    }

    std::vector<const ParamEntry<T>*> stage_shared_params(const std::string& stage) const {
        auto sel = reg_.select([&](const ParamEntry<T>& e) {
            return e.task == kSharedTask && e.name.rfind(stage + ".", 0) == 0;
        });
        if (sel.empty()) {
            std::string avail;
            for (const auto& s : stage_names()) avail += (avail.empty() ? "" : ", ") + s;
            throw std::invalid_argument("stage '" + stage +
                                        "' has no shared parameters; available: " + avail);
        }
        return sel;
    }

    std::vector<StageSummary> summarize(std::int64_t h, std::int64_t w) const {
        std::vector<StageSummary> rows;
        auto shape_str = [](std::int64_t c, std::int64_t hh, std::int64_t ww) {
            return std::to_string(c) + "x" + std::to_string(hh) + "x" + std::to_string(ww);
        };
        if (cfg_.arch == ArchKind::mini_resnet) {
            rows.push_back({"stem", shape_str(cfg_.widths[0], h, w), stem_.learnable_count(),
                            stem_.frozen_count(), stem_.macs(h, w)});
            std::int64_t hh = h, ww = w;
            for (std::size_t i = 0; i < blocks_.size(); ++i) {
                if (i > 0) {
                    hh = conv_out_extent(hh, 0, 2, 2);
                    ww = conv_out_extent(ww, 0, 2, 2);
                }
                const auto& b = blocks_[i];
                std::int64_t learn = b.u1.learnable_count() + b.u2.learnable_count();
                std::int64_t m = b.u1.macs(hh, ww) + b.u2.macs(hh, ww);
                if (b.has_proj) {
                    learn += b.proj.w->numel() + b.proj.b->numel();
                    m += b.u2.c_out * b.u1.c_in * hh * ww;
                }
                rows.push_back({"stage" + std::to_string(i), shape_str(b.u2.c_out, hh, ww), learn,
                                b.u1.frozen_count() + b.u2.frozen_count(), m});
            }
            std::int64_t head_learn = 0;
            for (const auto& hd : heads_) head_learn += hd.w->numel() + hd.b->numel();
            rows.push_back({"heads", shape_str(1, 1, 1), head_learn, 0, cfg_.widths.back()});
        } else {
            rows.push_back({"stem", shape_str(cfg_.widths[0], h, w), stem_.learnable_count(),
                            stem_.frozen_count(), stem_.macs(h, w)});
            std::int64_t hh = h, ww = w;
            for (std::size_t i = 0; i < enc_.size(); ++i) {
                rows.push_back({"enc" + std::to_string(i), shape_str(enc_[i].c_out, hh, ww),
                                enc_[i].learnable_count(), enc_[i].frozen_count(),
                                enc_[i].macs(hh, ww)});
                hh = conv_out_extent(hh, 0, 2, 2);
                ww = conv_out_extent(ww, 0, 2, 2);
            }
            for (std::size_t i = 0; i < dec_.size(); ++i) {
                hh *= 2;
                ww *= 2;
                rows.push_back({"dec" + std::to_string(i), shape_str(dec_[i].c_out, hh, ww),
                                dec_[i].learnable_count(), dec_[i].frozen_count(),
                                dec_[i].macs(hh, ww)});
            }
            std::int64_t head_learn = 0;
            for (const auto& hd : heads_) head_learn += hd.w->numel() + hd.b->numel();
            rows.push_back({"heads", shape_str(1, hh, ww), head_learn, 0,
                            cfg_.widths[0] * hh * ww});
        }
        return rows;
    }

    NetworkCounts count_params_flops(std::int64_t h, std::int64_t w) const {
        NetworkCounts c;
        for (const auto& r : summarize(h, w)) {
            c.learnable += r.learnable;
            c.frozen += r.frozen;
            c.macs += r.macs;
        }
        return c;
    }

    nlohmann::json summary_json(std::int64_t h, std::int64_t w) const {
        nlohmann::json j;
        j["arch"] = cfg_.arch == ArchKind::mini_resnet ? "mini_resnet" : "mini_segnet";
        j["tasks"] = cfg_.tasks;
        j["stages"] = nlohmann::json::array();
        for (const auto& r : summarize(h, w)) {
            j["stages"].push_back({{"name", r.name},
                                   {"out_shape", r.out_shape},
                                   {"learnable", r.learnable},
                                   {"frozen", r.frozen},
                                   {"macs", r.macs}});
        }
        const auto c = count_params_flops(h, w);
        j["total"] = {{"learnable", c.learnable}, {"frozen", c.frozen}, {"macs", c.macs}};
        return j;
    }

    std::string summary_text(std::int64_t h, std::int64_t w) const {
        const auto rows = summarize(h, w);
        std::ostringstream os;
        os << "stage        out          learnable     frozen        MACs\n";
        for (const auto& r : rows) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%-12s %-12s %-13lld %-13lld %lld\n", r.name.c_str(),
                          r.out_shape.c_str(), static_cast<long long>(r.learnable),
                          static_cast<long long>(r.frozen), static_cast<long long>(r.macs));
            os << buf;
        }
        const auto c = count_params_flops(h, w);
        os << "total learnable=" << c.learnable << " frozen=" << c.frozen << " macs=" << c.macs
           << "\n";
        return os.str();
    }

    HeadKind head_kind(int task) const { return cfg_.heads.at(static_cast<std::size_t>(task)); }

  private:
    static void validate_and_default(ArchConfig& cfg) {
        if (cfg.widths.empty()) throw std::invalid_argument("arch: widths must be non-empty");
        if (cfg.stage_kinds.size() == 1 && cfg.widths.size() > 1) {
            cfg.stage_kinds.assign(cfg.widths.size(), cfg.stage_kinds[0]);
        }
        if (cfg.stage_kinds.size() != cfg.widths.size()) {
            throw std::invalid_argument("arch: stage_kinds length must match widths");
        }
        if (!cfg.gamma_per_stage.empty() && cfg.gamma_per_stage.size() != cfg.widths.size()) {
            throw std::invalid_argument("arch: gamma_per_stage length must match widths");
        }
        if (cfg.tasks < 1) throw std::invalid_argument("arch: tasks must be >= 1");
        if (cfg.heads.empty()) {
            if (cfg.arch == ArchKind::mini_resnet) {
                cfg.heads.assign(static_cast<std::size_t>(cfg.tasks), HeadKind::attribute_logit);
            } else {
                cfg.heads.assign(static_cast<std::size_t>(cfg.tasks),
                                 HeadKind::segmentation_logit);
                cfg.heads.back() = HeadKind::depth_regression;
            }
        }
        if (static_cast<int>(cfg.heads.size()) != cfg.tasks) {
            throw std::invalid_argument("arch: exactly one head per task required");
        }
        if (cfg.arch == ArchKind::mini_resnet) {
            for (auto hk : cfg.heads) {
                if (hk != HeadKind::attribute_logit) {
                    throw std::invalid_argument("mini_resnet heads must be attribute-logit");
                }
            }
        }
    }

    void build_resnet(std::uint64_t seed) {
        const auto& w = cfg_.widths;
        stem_ = ConvUnitT<T>::build(LayerKind::conv, cfg_.in_channels, w[0], 1.0, cfg_.tasks,
                                    cfg_.primitives, mix_seed(seed, "stem"), "stem");
        std::int64_t c_prev = w[0];
        for (std::size_t i = 0; i < w.size(); ++i) {
            ResBlockT<T> blk;
            const std::string sname = "stage" + std::to_string(i);
            blk.u1 = ConvUnitT<T>::build(cfg_.stage_kinds[i], c_prev, w[i], cfg_.stage_gamma(i),
                                         cfg_.tasks, cfg_.primitives,
                                         mix_seed(seed, sname + ".u1"), sname);
            blk.u2 = ConvUnitT<T>::build(cfg_.stage_kinds[i], w[i], w[i], cfg_.stage_gamma(i),
                                         cfg_.tasks, cfg_.primitives,
                                         mix_seed(seed, sname + ".u2"), sname);
            blk.has_proj = (c_prev != w[i]);
            if (blk.has_proj) {
                blk.proj.w = randn<T>(Shape{w[i], c_prev, 1, 1}, mix_seed(seed, sname + ".skip"),
                                      std::sqrt(2.0 / static_cast<double>(c_prev)),
                                      /*requires_grad=*/true);
                blk.proj.b = make_tensor<T>(Shape{1, w[i], 1, 1}, T(0), /*requires_grad=*/true);
            }
            blocks_.push_back(std::move(blk));
            c_prev = w[i];
        }
        build_heads(seed, w.back());
    }

    void build_segnet(std::uint64_t seed) {
        const auto& w = cfg_.widths;
        stem_ = ConvUnitT<T>::build(LayerKind::conv, cfg_.in_channels, w[0], 1.0, cfg_.tasks,
                                    cfg_.primitives, mix_seed(seed, "stem"), "stem");
        std::int64_t c_prev = w[0];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const std::string sname = "enc" + std::to_string(i);
            enc_.push_back(ConvUnitT<T>::build(cfg_.stage_kinds[i], c_prev, w[i],
                                               cfg_.stage_gamma(i), cfg_.tasks, cfg_.primitives,
                                               mix_seed(seed, sname), sname));
            c_prev = w[i];
        }
        for (std::size_t d = 0; d < w.size(); ++d) {
            const std::size_t i = w.size() - 1 - d;  // mirrored encoder stage
            const std::int64_t c_out = i > 0 ? w[i - 1] : w[0];
            const std::string sname = "dec" + std::to_string(d);
            dec_.push_back(ConvUnitT<T>::build(cfg_.stage_kinds[i], w[i], c_out,
                                               cfg_.stage_gamma(i), cfg_.tasks, cfg_.primitives,
                                               mix_seed(seed, sname), sname));
        }
        build_heads(seed, w[0]);
    }

    void build_heads(std::uint64_t seed, std::int64_t feat_c) {
        for (int t = 0; t < cfg_.tasks; ++t) {
            ConvPair<T> head;
            head.w = randn<T>(Shape{1, feat_c, 1, 1}, mix_seed(seed, "head" + std::to_string(t)),
                              std::sqrt(2.0 / static_cast<double>(feat_c)),
                              /*requires_grad=*/true);
            head.b = make_tensor<T>(Shape{1, 1, 1, 1}, T(0), /*requires_grad=*/true);
            heads_.push_back(std::move(head));
        }
    }

    void register_all() {
        stem_.register_params(reg_, "stem");
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string sname = "stage" + std::to_string(i);
            blocks_[i].u1.register_params(reg_, sname + ".u1");
            blocks_[i].u2.register_params(reg_, sname + ".u2");
            if (blocks_[i].has_proj) {
                reg_.add(sname + ".skip.w", blocks_[i].proj.w, kSharedTask);
                reg_.add(sname + ".skip.b", blocks_[i].proj.b, kSharedTask);
            }
        }
        for (std::size_t i = 0; i < enc_.size(); ++i)
            enc_[i].register_params(reg_, "enc" + std::to_string(i));
        for (std::size_t i = 0; i < dec_.size(); ++i)
            dec_[i].register_params(reg_, "dec" + std::to_string(i));
        for (int t = 0; t < static_cast<int>(heads_.size()); ++t) {
            reg_.add("head" + std::to_string(t) + ".w", heads_[static_cast<std::size_t>(t)].w, t);
            reg_.add("head" + std::to_string(t) + ".b", heads_[static_cast<std::size_t>(t)].b, t);
        }
    }

    TensorPtrT<T> forward_resnet(TapeT<T>* tape, const TensorPtrT<T>& x, int task, bool train) {
        auto h = relu(tape, stem_.forward(tape, x, task, train));
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (i > 0) h = avg_pool2d(tape, h, 2, 2, 0);
            h = blocks_[i].forward(tape, h, task, train);
        }
        h = global_avg_pool(tape, h);
        const auto& hd = heads_[static_cast<std::size_t>(task)];
        return conv2d(tape, h, hd.w, hd.b, ConvSpec{});
    }

    TensorPtrT<T> forward_segnet(TapeT<T>* tape, const TensorPtrT<T>& x, int task, bool train) {
        auto h = relu(tape, stem_.forward(tape, x, task, train));
        std::vector<std::shared_ptr<PoolIndices>> indices;
        for (auto& unit : enc_) {
            h = relu(tape, unit.forward(tape, h, task, train));
            auto [pooled, idx] = max_pool2d_indices(tape, h, 2, 2, 0);
            h = pooled;
            indices.push_back(idx);
        }
        for (std::size_t d = 0; d < dec_.size(); ++d) {
            h = max_unpool2d(tape, h, indices[indices.size() - 1 - d]);
            h = relu(tape, dec_[d].forward(tape, h, task, train));
        }
        const auto& hd = heads_[static_cast<std::size_t>(task)];
        return conv2d(tape, h, hd.w, hd.b, ConvSpec{});
    }

    ArchConfig cfg_;
    ConvUnitT<T> stem_;
    std::vector<ResBlockT<T>> blocks_;
    std::vector<ConvUnitT<T>> enc_, dec_;
    std::vector<ConvPair<T>> heads_;
    ParamRegistryT<T> reg_;
};

template <typename T>
NetworkT<T> build_network(const ArchConfig& cfg, std::uint64_t seed) {
    return NetworkT<T>(cfg, seed);
}

using Network = NetworkT<float>;

}  // namespace etrnlp

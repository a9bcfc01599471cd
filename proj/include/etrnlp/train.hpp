#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "etrnlp/adam.hpp"
#include "etrnlp/cka.hpp"
#include "etrnlp/data.hpp"
#include "etrnlp/io.hpp"
#include "etrnlp/metrics.hpp"
#include "etrnlp/nets.hpp"

namespace etrnlp {

enum class UpdateStrategy { steady_state, synchronized };

inline const char* strategy_name(UpdateStrategy s) {
    return s == UpdateStrategy::steady_state ? "steady_state" : "synchronized";
}

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double lr = 1e-4;
    UpdateStrategy strategy = UpdateStrategy::steady_state;
    std::uint64_t seed = 0;
    std::string task_order = "round_robin";

    void validate() const {
        if (epochs < 1 || batch_size < 1 || !(lr > 0.0)) {
            throw std::invalid_argument("train: epochs, batch size and lr must be positive");
        }
        if (task_order != "round_robin") {
            throw std::invalid_argument("train: unsupported task order '" + task_order + "'");
        }
    }
};

struct EpochRecord {
    int epoch = 0;
    std::vector<double> task_loss;    // mean over rounds, one per task
    std::vector<double> task_metric;  // validation metric, one per task
    double wall_seconds = 0.0;
};

struct TrainHistory {
    std::vector<std::string> metric_names;  // one per task
    std::vector<EpochRecord> epochs;

    // Deterministic CSV: wall-clock stays in memory only.
    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,task,loss,metric\n";
        for (const auto& e : epochs) {
            for (std::size_t t = 0; t < e.task_loss.size(); ++t) {
                char buf[96];
                std::snprintf(buf, sizeof(buf), "%d,%zu,%.8g,%.8g\n", e.epoch, t, e.task_loss[t],
                              e.task_metric[t]);
                os << buf;
            }
        }
        return os.str();
    }
};

struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One round-robin pass over all tasks. steady_state steps the shared branch
// together with the active task's branch immediately after each backward;
// synchronized steps task branches as they go but accumulates (sums) the
// shared-branch gradients and steps them once at the round boundary.
template <typename Model>
std::vector<float> run_round(Model& model, Adam& opt, UpdateStrategy strategy,
                             const std::vector<Batch>& task_batches) {
    auto& reg = model.registry();
    const int tasks = model.tasks();
    if (static_cast<int>(task_batches.size()) != tasks) {
        throw std::invalid_argument("run_round: one batch per task required");
    }
    reg.zero_grads();
    std::vector<float> losses(static_cast<std::size_t>(tasks), 0.0f);
    for (int t = 0; t < tasks; ++t) {
        Tape tape;
        auto loss = model.task_loss(tape, task_batches[static_cast<std::size_t>(t)], t);
        const float lv = loss->item();
        if (!std::isfinite(lv)) {
            throw TrainError("non-finite loss on task " + std::to_string(t));
        }
        losses[static_cast<std::size_t>(t)] = lv;
        tape.backward(loss);
        if (strategy == UpdateStrategy::steady_state) {
            const auto scope = reg.scope(t);
            opt.step(scope);
            for (const auto* e : scope) e->tensor->zero_grad();
        } else {
            const auto own = reg.task_only(t);
            opt.step(own);
            for (const auto* e : own) e->tensor->zero_grad();
        }
    }
    if (strategy == UpdateStrategy::synchronized) {
        const auto shared = reg.shared_only();
        opt.step(shared);
        for (const auto* e : shared) e->tensor->zero_grad();
    }
    return losses;
}

// Adapter binding a network to per-head losses over ShapesMT batches.
class NetworkModel {
  public:
    explicit NetworkModel(Network& net) : net_(net) {}

    int tasks() const { return net_.tasks(); }
    ParamRegistry& registry() { return net_.registry(); }
    Network& network() { return net_; }

    TensorPtr task_loss(Tape& tape, const Batch& batch, int task) {
        auto out = net_.forward_task(&tape, batch.x, task, /*train=*/true);
        return loss_for_head(&tape, out, batch, task);
    }

    TensorPtr loss_for_head(Tape* tape, const TensorPtr& out, const Batch& batch, int task) {
        switch (net_.head_kind(task)) {
            case HeadKind::attribute_logit: {
                const auto& labels = batch.attr.at(static_cast<std::size_t>(task));
                auto target = make_tensor<float>(Shape{out->shape.n, 1, 1, 1});
                std::copy(labels.begin(), labels.end(), target->data.begin());
                return bce_with_logits_mean(tape, out, target);
            }
            case HeadKind::segmentation_logit: {
                auto target = mask_channel(batch, task);
                return bce_with_logits_mean(tape, out, target);
            }
            case HeadKind::depth_regression:
                return l1_loss_mean(tape, out, batch.depth);
        }
        throw std::logic_error("unknown head kind");
    }

    TensorPtr mask_channel(const Batch& batch, int task) const {
        const auto& m = batch.masks;
        const std::int64_t plane = m->shape.h * m->shape.w;
        auto target = make_tensor<float>(Shape{m->shape.n, 1, m->shape.h, m->shape.w});
        for (std::int64_t n = 0; n < m->shape.n; ++n) {
            std::copy_n(m->data.data() + m->idx(n, task, 0, 0), plane,
                        target->data.data() + n * plane);
        }
        return target;
    }

  private:
    Network& net_;
};

struct EvalResult {
    MetricRecord record;                       // aggregated, delta_p-ready
    std::vector<double> per_task_metric;       // primary metric per network task
    std::vector<std::string> per_task_metric_name;
};

inline std::vector<std::vector<int>> sequential_chunks(const std::vector<int>& ids,
                                                       int chunk_size) {
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(chunk_size)) {
        out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                         ids.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(ids.size(), i + static_cast<std::size_t>(chunk_size))));
    }
    return out;
}

// Deterministic per-task evaluation: eval-mode batch norm, sequential batches
// covering the whole split, one forward per task per batch.
inline EvalResult evaluate(Network& net, const ShapesMtDataset& data, Split split) {
    EvalResult res;
    const auto& ids = data.split_ids(split);
    if (ids.empty()) throw std::invalid_argument("evaluate: empty split");
    const auto chunks = sequential_chunks(ids, 64);
    NetworkModel model(net);
    const int tasks = net.tasks();

    const bool dense = data.config().dense;
    if (!dense) {
        std::vector<std::vector<float>> logits(static_cast<std::size_t>(tasks));
        std::vector<std::vector<float>> labels(static_cast<std::size_t>(tasks));
        for (const auto& chunk : chunks) {
            const auto batch = data.make_batch(chunk);
            for (int t = 0; t < tasks; ++t) {
                auto out = net.forward_task(nullptr, batch.x, t, /*train=*/false);
                auto& lg = logits[static_cast<std::size_t>(t)];
                lg.insert(lg.end(), out->data.begin(), out->data.end());
                const auto& la = batch.attr[static_cast<std::size_t>(t)];
                labels[static_cast<std::size_t>(t)].insert(
                    labels[static_cast<std::size_t>(t)].end(), la.begin(), la.end());
            }
        }
        const auto rep = classification_metrics(logits, labels);
        TaskMetrics tm;
        tm.task = "attributes";
        tm.metrics = {{"precision", rep.macro.precision, true},
                      {"recall", rep.macro.recall, true},
                      {"f_score", rep.macro.f1, true}};
        res.record.tasks.push_back(tm);
        for (int t = 0; t < tasks; ++t) {
            res.per_task_metric.push_back(rep.per_task[static_cast<std::size_t>(t)].f1);
            res.per_task_metric_name.push_back("f_score");
        }
        return res;
    }

    const int cats = data.config().seg_categories();
    std::vector<std::vector<float>> seg_logits(static_cast<std::size_t>(cats));
    std::vector<std::vector<float>> seg_gt(static_cast<std::size_t>(cats));
    std::vector<float> depth_pred, depth_gt;
    for (const auto& chunk : chunks) {
        const auto batch = data.make_batch(chunk);
        for (int t = 0; t < tasks; ++t) {
            auto out = net.forward_task(nullptr, batch.x, t, /*train=*/false);
            if (net.head_kind(t) == HeadKind::segmentation_logit) {
                auto gt = model.mask_channel(batch, t);
                seg_logits[static_cast<std::size_t>(t)].insert(
                    seg_logits[static_cast<std::size_t>(t)].end(), out->data.begin(),
                    out->data.end());
                seg_gt[static_cast<std::size_t>(t)].insert(seg_gt[static_cast<std::size_t>(t)].end(),
                                                           gt->data.begin(), gt->data.end());
            } else {
                depth_pred.insert(depth_pred.end(), out->data.begin(), out->data.end());
                depth_gt.insert(depth_gt.end(), batch.depth->data.begin(),
                                batch.depth->data.end());
            }
        }
    }
    const auto rep = dense_metrics(seg_logits, seg_gt, depth_pred, depth_gt);
    TaskMetrics seg;
    seg.task = "segmentation";
    seg.metrics = {{"miou", rep.miou, true}, {"pixel_acc", rep.pixel_acc, true}};
    TaskMetrics depth;
    depth.task = "depth";
    depth.metrics = {{"abs_err", rep.abs_err, false}, {"rel_err", rep.rel_err, false}};
    res.record.tasks = {seg, depth};
    for (int t = 0; t < tasks; ++t) {
        if (net.head_kind(t) == HeadKind::segmentation_logit) {
            res.per_task_metric.push_back(rep.iou_per_category[static_cast<std::size_t>(t)]);
            res.per_task_metric_name.push_back("iou");
        } else {
            res.per_task_metric.push_back(rep.abs_err);
            res.per_task_metric_name.push_back("abs_err");
        }
    }
    return res;
}

// ---- training state serialization ----

inline NamedTensors network_state(Network& net) {
    NamedTensors out;
    for (const auto& e : net.registry().entries()) out.emplace_back("p/" + e.name, e.tensor);
    for (const auto& e : net.registry().buffers()) out.emplace_back("b/" + e.name, e.tensor);
    return out;
}

inline void load_network_state(Network& net, const NamedTensors& state) {
    std::size_t loaded = 0;
    for (const auto& [name, t] : state) {
        TensorPtr dst;
        if (name.rfind("p/", 0) == 0) {
            if (const auto* e = net.registry().find(name.substr(2))) dst = e->tensor;
        } else if (name.rfind("b/", 0) == 0) {
            for (const auto& e : net.registry().buffers()) {
                if (e.name == name.substr(2)) {
                    dst = e.tensor;
                    break;
                }
            }
        } else {
            continue;  // meta / optimizer entries
        }
        if (!dst) throw IoError("checkpoint tensor '" + name + "' has no home in this network");
        if (!(dst->shape == t->shape)) {
            throw IoError("checkpoint tensor '" + name + "' shape " + t->shape.str() +
                          " does not match network " + dst->shape.str());
        }
        dst->data = t->data;
        ++loaded;
    }
    if (loaded == 0) throw IoError("checkpoint holds no network tensors");
}

inline NamedTensors train_state(Network& net, Adam& opt, int next_epoch) {
    NamedTensors out = network_state(net);
    for (const auto& [name, slot] : opt.slots()) {
        const auto* e = net.registry().find(name);
        const Shape shape = e ? e->tensor->shape
                              : Shape{1, 1, 1, static_cast<std::int64_t>(slot.m.size())};
        out.emplace_back("opt.m/" + name, make_tensor<float>(shape, std::vector<float>(slot.m)));
        out.emplace_back("opt.v/" + name, make_tensor<float>(shape, std::vector<float>(slot.v)));
        out.emplace_back("opt.t/" + name,
                         make_tensor<float>(Shape{1, 1, 1, 1},
                                            std::vector<float>{static_cast<float>(slot.t)}));
    }
    out.emplace_back("meta/next_epoch",
                     make_tensor<float>(Shape{1, 1, 1, 1},
                                        std::vector<float>{static_cast<float>(next_epoch)}));
    return out;
}

inline int load_train_state(Network& net, Adam& opt, const NamedTensors& state) {
    load_network_state(net, state);
    int next_epoch = 0;
    for (const auto& [name, t] : state) {
        if (name.rfind("opt.m/", 0) == 0) {
            opt.slots()[name.substr(6)].m.assign(t->data.begin(), t->data.end());
        } else if (name.rfind("opt.v/", 0) == 0) {
            opt.slots()[name.substr(6)].v.assign(t->data.begin(), t->data.end());
        } else if (name.rfind("opt.t/", 0) == 0) {
            opt.slots()[name.substr(6)].t = static_cast<std::int64_t>(t->data.at(0));
        } else if (name == "meta/next_epoch") {
            next_epoch = static_cast<int>(t->data.at(0));
        }
    }
    return next_epoch;
}

// ---- full training loop ----

struct TrainOutput {
    TrainHistory history;
    NamedTensors final_state;  // parameters + buffers
};

// Round-robin multi-task training. Every task draws its own mini-batch per
// activation; per-epoch randomness derives from (seed, epoch, task) only, so a
// run resumed from the rolling epoch state reproduces the uninterrupted run
// bit for bit.
inline TrainOutput train_network(Network& net, const ShapesMtDataset& data,
                                 const TrainConfig& cfg, Adam& opt,
                                 const std::optional<fs::path>& state_path = std::nullopt,
                                 int start_epoch = 0, TrainHistory history = {}) {
    cfg.validate();
    const int tasks = net.tasks();
    if (data.config().tasks != tasks) {
        throw std::invalid_argument("train: dataset provides " +
                                    std::to_string(data.config().tasks) + " tasks, network has " +
                                    std::to_string(tasks));
    }
    NetworkModel model(net);
    const auto& train_ids = data.split_ids(Split::train);

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::vector<std::vector<int>>> plans(static_cast<std::size_t>(tasks));
        std::size_t rounds = SIZE_MAX;
        for (int t = 0; t < tasks; ++t) {
            plans[static_cast<std::size_t>(t)] = batch_iter(
                train_ids, cfg.batch_size,
                mix_seed(cfg.seed, "epoch" + std::to_string(epoch) + ".task" + std::to_string(t)));
            rounds = std::min(rounds, plans[static_cast<std::size_t>(t)].size());
        }
        std::vector<double> loss_sum(static_cast<std::size_t>(tasks), 0.0);
        for (std::size_t r = 0; r < rounds; ++r) {
            std::vector<Batch> batches;
            batches.reserve(static_cast<std::size_t>(tasks));
            for (int t = 0; t < tasks; ++t)
                batches.push_back(data.make_batch(plans[static_cast<std::size_t>(t)][r]));
            std::vector<float> losses;
            try {
                losses = run_round(model, opt, cfg.strategy, batches);
            } catch (const TrainError& e) {
                throw TrainError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                 ", round " + std::to_string(r) + ")");
            }
            for (int t = 0; t < tasks; ++t)
                loss_sum[static_cast<std::size_t>(t)] += losses[static_cast<std::size_t>(t)];
        }
        const auto eval = evaluate(net, data, Split::val);
        EpochRecord rec;
        rec.epoch = epoch;
        for (int t = 0; t < tasks; ++t)
            rec.task_loss.push_back(loss_sum[static_cast<std::size_t>(t)] /
                                    static_cast<double>(rounds));
        rec.task_metric = eval.per_task_metric;
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (history.metric_names.empty()) history.metric_names = eval.per_task_metric_name;
        history.epochs.push_back(rec);
        if (state_path) save_checkpoint(*state_path, train_state(net, opt, epoch + 1));
    }
    return TrainOutput{std::move(history), network_state(net)};
}

// ---- gamma sweep ----

struct GammaSweepRow {
    double gamma = 0.0;
    std::uint64_t seed = 0;
    MetricRecord record;
    std::int64_t learnable = 0;
};

inline std::vector<GammaSweepRow> run_gamma_sweep(const ArchConfig& base_arch,
                                                  const TrainConfig& base_train,
                                                  const ShapesMtDataset& data,
                                                  const std::vector<double>& gammas,
                                                  const std::vector<std::uint64_t>& seeds) {
    std::vector<GammaSweepRow> rows;
    for (double g : gammas) {
        if (!(g >= 0.0 && g <= 1.0)) {
            throw std::invalid_argument("gamma sweep: gamma outside [0, 1]");
        }
        for (auto seed : seeds) {
            ArchConfig arch = base_arch;
            arch.gamma = g;
            arch.gamma_per_stage.clear();
            TrainConfig tc = base_train;
            tc.seed = seed;
            Network net(arch, seed);
            Adam opt(AdamConfig{tc.lr});
            train_network(net, data, tc, opt);
            GammaSweepRow row;
            row.gamma = g;
            row.seed = seed;
            row.record = evaluate(net, data, Split::test).record;
            row.learnable = net.registry().total_count();
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// ---- CKA gradient sampling ----

// One gradient snapshot per sampling step per task, on the same held-out batch
// for all tasks at that step; batches walk the validation split sequentially.
inline std::vector<CkaMatrix> task_pair_cka(Network& net, const ShapesMtDataset& data,
                                            const std::vector<std::string>& layers, int steps,
                                            int batch_size = 32) {
    if (steps < 2) throw std::invalid_argument("task_pair_cka: steps must be >= 2");
    const auto& ids = data.split_ids(Split::val);
    if (ids.empty()) throw std::invalid_argument("task_pair_cka: empty validation split");
    const auto chunks = sequential_chunks(ids, std::min<int>(batch_size,
                                                             static_cast<int>(ids.size())));
    // Validate layer names up front (throws with the available list).
    for (const auto& layer : layers) net.stage_shared_params(layer);

    NetworkModel model(net);
    const int tasks = net.tasks();
    std::vector<std::vector<GradSampleMatrix>> samples(layers.size());
    for (std::size_t li = 0; li < layers.size(); ++li) {
        samples[li].resize(static_cast<std::size_t>(tasks));
        for (int t = 0; t < tasks; ++t) {
            samples[li][static_cast<std::size_t>(t)].task = t;
            samples[li][static_cast<std::size_t>(t)].layer = layers[li];
        }
    }
    for (int s = 0; s < steps; ++s) {
        const auto batch = data.make_batch(chunks[static_cast<std::size_t>(s) % chunks.size()]);
        for (int t = 0; t < tasks; ++t) {
            net.registry().zero_grads();
            Tape tape;
            auto out = net.forward_task(&tape, batch.x, t, /*train=*/false);
            auto loss = model.loss_for_head(&tape, out, batch, t);
            tape.backward(loss);
            for (std::size_t li = 0; li < layers.size(); ++li) {
                std::vector<double> row;
                for (const auto* e : net.stage_shared_params(layers[li])) {
                    if (e->tensor->has_grad()) {
                        for (float g : e->tensor->grad) row.push_back(static_cast<double>(g));
                    } else {
                        row.insert(row.end(), static_cast<std::size_t>(e->tensor->numel()), 0.0);
                    }
                }
                samples[li][static_cast<std::size_t>(t)].add_row(row);
            }
        }
    }
    net.registry().zero_grads();
    std::vector<CkaMatrix> out;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        out.push_back(cka_matrix_from_samples(layers[li], samples[li]));
    }
    return out;
}

}  // namespace etrnlp

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "etrnlp/config.hpp"
#include "etrnlp/data.hpp"
#include "etrnlp/metrics.hpp"
#include "etrnlp/nets.hpp"
#include "etrnlp/train.hpp"

namespace etrnlp {

namespace cli {

inline nlohmann::json record_to_json(const MetricRecord& r) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& t : r.tasks) {
        nlohmann::json metrics = nlohmann::json::array();
        for (const auto& m : t.metrics) {
            metrics.push_back(
                {{"name", m.name}, {"value", m.value}, {"higher_better", m.higher_better}});
        }
        j.push_back({{"task", t.task}, {"metrics", metrics}});
    }
    return j;
}

inline MetricRecord record_from_json(const nlohmann::json& j) {
    MetricRecord r;
    for (const auto& tj : j) {
        TaskMetrics t;
        t.task = tj.at("task").get<std::string>();
        for (const auto& mj : tj.at("metrics")) {
            t.metrics.push_back({mj.at("name").get<std::string>(),
                                 mj.at("value").get<double>(),
                                 mj.at("higher_better").get<bool>()});
        }
        r.tasks.push_back(std::move(t));
    }
    return r;
}

inline MetricRecord mean_record(const std::vector<MetricRecord>& records) {
    MetricRecord mean = records.at(0);
    for (std::size_t t = 0; t < mean.tasks.size(); ++t) {
        for (std::size_t m = 0; m < mean.tasks[t].metrics.size(); ++m) {
            double s = 0.0;
            for (const auto& r : records) s += r.tasks[t].metrics[m].value;
            mean.tasks[t].metrics[m].value = s / static_cast<double>(records.size());
        }
    }
    return mean;
}

inline MetricRecord std_record(const std::vector<MetricRecord>& records,
                               const MetricRecord& mean) {
    MetricRecord sd = mean;
    for (std::size_t t = 0; t < sd.tasks.size(); ++t) {
        for (std::size_t m = 0; m < sd.tasks[t].metrics.size(); ++m) {
            double s = 0.0;
            for (const auto& r : records) {
                const double d = r.tasks[t].metrics[m].value - mean.tasks[t].metrics[m].value;
                s += d * d;
            }
            sd.tasks[t].metrics[m].value =
                records.size() > 1 ? std::sqrt(s / static_cast<double>(records.size())) : 0.0;
        }
    }
    return sd;
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << text;
    if (!os) throw IoError("write failed: " + path.string());
}

inline void refuse_overwrite(const fs::path& path, bool force) {
    if (!force && fs::exists(path)) {
        throw ConfigError("output '" + path.string() + "' exists; pass --force to overwrite");
    }
}

struct RunResult {
    std::uint64_t seed = 0;
    MetricRecord record;
    std::int64_t learnable = 0;
};

// Trains one seed into run_dir; resumable from the rolling epoch state.
inline RunResult run_one_seed(const ExperimentConfig& cfg, const ShapesMtDataset& data,
                              std::uint64_t seed, const fs::path& run_dir, bool resume) {
    fs::create_directories(run_dir);
    const auto state_path = run_dir / "state.etrn";
    const auto history_path = run_dir / "history.csv";

    Network net(cfg.arch, seed);
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    Adam opt(AdamConfig{tc.lr});

    int start_epoch = 0;
    std::string prior_history_rows;
    if (resume && fs::exists(state_path)) {
        start_epoch = load_train_state(net, opt, load_checkpoint(state_path));
        if (fs::exists(history_path)) {
            std::ifstream is(history_path);
            std::string line;
            std::getline(is, line);  // header
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                const int epoch = std::stoi(line.substr(0, line.find(',')));
                if (epoch < start_epoch) prior_history_rows += line + "\n";
            }
        }
    }

    auto out = train_network(net, data, tc, opt, state_path, start_epoch);
    write_text_file(history_path,
                    "epoch,task,loss,metric\n" + prior_history_rows +
                        [&] {
                            std::string rows;
                            TrainHistory h = out.history;
                            const std::string full = h.to_csv();
                            return full.substr(full.find('\n') + 1);
                        }());
    save_checkpoint(run_dir / "checkpoint.etrn", out.final_state);

    RunResult res;
    res.seed = seed;
    res.record = evaluate(net, data, Split::test).record;
    res.learnable = net.registry().total_count();

    nlohmann::json summary;
    summary["method"] = cfg.name;
    summary["seed"] = seed;
    summary["learnable"] = res.learnable;
    summary["record"] = record_to_json(res.record);
    write_text_file(run_dir / "summary.json", summary.dump(2) + "\n");
    return res;
}

inline void write_aggregate_summary(const ExperimentConfig& cfg, const fs::path& out_dir,
                                    const std::vector<RunResult>& runs) {
    std::vector<MetricRecord> records;
    for (const auto& r : runs) records.push_back(r.record);
    const auto mean = mean_record(records);
    const auto sd = std_record(records, mean);

    std::ostringstream csv;
    csv << "seed";
    for (const auto& t : mean.tasks)
        for (const auto& m : t.metrics) csv << "," << t.task << "/" << m.name;
    csv << "\n";
    for (const auto& r : runs) {
        csv << r.seed;
        for (const auto& t : r.record.tasks)
            for (const auto& m : t.metrics) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), ",%.6f", m.value);
                csv << buf;
            }
        csv << "\n";
    }
    auto stat_row = [&](const char* label, const MetricRecord& r) {
        csv << label;
        for (const auto& t : r.tasks)
            for (const auto& m : t.metrics) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), ",%.6f", m.value);
                csv << buf;
            }
        csv << "\n";
    };
    stat_row("mean", mean);
    stat_row("std", sd);
    write_text_file(out_dir / "summary.csv", csv.str());

    nlohmann::json j;
    j["method"] = cfg.name;
    j["seeds"] = cfg.seeds;
    j["learnable"] = runs.at(0).learnable;
    j["record"] = record_to_json(mean);
    j["record_std"] = record_to_json(sd);
    write_text_file(out_dir / "summary.json", j.dump(2) + "\n");
}

inline int cmd_generate(const ExperimentConfig& cfg, bool force) {
    if (!cfg.dataset.shapes) {
        throw ConfigError("generate: config.dataset.shapes section is required");
    }
    const fs::path dir = cfg.dataset.path;
    if (!force && dataset_up_to_date(*cfg.dataset.shapes, cfg.dataset.seed, dir)) {
        std::cout << "dataset up to date: " << dir.string() << " (manifest "
                  << hex64(file_checksum(dir / "manifest.json")) << ")\n";
        return 0;
    }
    if (fs::exists(dir / "manifest.json")) {
        refuse_overwrite(dir / "manifest.json", force);
    }
    generate_shapes_mt(*cfg.dataset.shapes, cfg.dataset.seed, dir);
    std::cout << "generated " << cfg.dataset.shapes->num_samples << " samples in " << dir.string()
              << " (manifest " << hex64(file_checksum(dir / "manifest.json")) << ")\n";
    return 0;
}

inline int cmd_train(const ExperimentConfig& cfg, bool force, bool resume) {
    const fs::path out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    if (!resume) refuse_overwrite(out_dir / "summary.json", force);
    write_text_file(out_dir / "config.json", experiment_config_to_json(cfg).dump(2) + "\n");

    const auto data = ShapesMtDataset::load(cfg.dataset.path);
    std::vector<RunResult> runs;
    for (auto seed : cfg.seeds) {
        const auto run_dir = out_dir / ("seed_" + std::to_string(seed));
        if (!resume) refuse_overwrite(run_dir / "checkpoint.etrn", force);
        runs.push_back(run_one_seed(cfg, data, seed, run_dir, resume));
        std::cout << "seed " << seed << " done\n";
    }
    write_aggregate_summary(cfg, out_dir, runs);
    std::cout << "trained " << runs.size() << " run(s) into " << out_dir.string() << "\n";
    return 0;
}

inline int cmd_eval(const ExperimentConfig& cfg, const fs::path& checkpoint) {
    const auto data = ShapesMtDataset::load(cfg.dataset.path);
    Network net(cfg.arch, cfg.seeds.at(0));
    load_network_state(net, load_checkpoint(checkpoint));
    const auto eval = evaluate(net, data, Split::test);
    std::cout << nlohmann::json({{"record", record_to_json(eval.record)}}).dump(2) << "\n";
    return 0;
}

inline int cmd_sweep_gamma(const ExperimentConfig& cfg, bool force) {
    const fs::path out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    const auto csv_path = out_dir / "gamma_sweep.csv";
    refuse_overwrite(csv_path, force);
    const auto data = ShapesMtDataset::load(cfg.dataset.path);
    const auto rows = run_gamma_sweep(cfg.arch, cfg.train, data, cfg.sweep_gammas, cfg.seeds);

    std::ostringstream csv;
    csv << "gamma,seed,learnable";
    for (const auto& t : rows.at(0).record.tasks)
        for (const auto& m : t.metrics) csv << "," << t.task << "/" << m.name;
    csv << "\n";
    for (const auto& r : rows) {
        char head[64];
        std::snprintf(head, sizeof(head), "%.4f,%llu,%lld", r.gamma,
                      static_cast<unsigned long long>(r.seed),
                      static_cast<long long>(r.learnable));
        csv << head;
        for (const auto& t : r.record.tasks)
            for (const auto& m : t.metrics) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), ",%.6f", m.value);
                csv << buf;
            }
        csv << "\n";
    }
    write_text_file(csv_path, csv.str());
    std::cout << "gamma sweep written to " << csv_path.string() << "\n";
    return 0;
}

struct SearchRow {
    std::uint32_t mask = 0;  // bit per primitive kind, 0 = conv baseline
    double metric_mean = 0.0;
    double metric_std = 0.0;
    double dp = 0.0;
    std::vector<MetricRecord> records;
};

// All 31 nonempty subsets of the five primitive kinds plus the learnable-conv
// baseline, each trained over the configured seed repetitions.
inline int cmd_search_primitives(const ExperimentConfig& cfg, bool force, int threads) {
    const fs::path out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    const auto csv_path = out_dir / "search.csv";
    refuse_overwrite(csv_path, force);
    const auto data = ShapesMtDataset::load(cfg.dataset.path);

    static constexpr PrimitiveKind kKinds[5] = {PrimitiveKind::avg_pool, PrimitiveKind::max_pool,
                                                PrimitiveKind::fixed_conv, PrimitiveKind::shift,
                                                PrimitiveKind::perturbation};
    std::vector<SearchRow> rows(32);
    for (std::uint32_t m = 0; m < 32; ++m) rows[m].mask = m;

    auto primary_metric = [](const MetricRecord& r) {
        for (const auto& t : r.tasks)
            for (const auto& m : t.metrics)
                if (m.name == "f_score" || m.name == "miou") return m.value;
        return r.tasks.at(0).metrics.at(0).value;
    };

    auto run_subset = [&](std::uint32_t mask) {
        ArchConfig arch = cfg.arch;
        if (mask == 0) {
            arch.stage_kinds.assign(arch.widths.size(), LayerKind::conv);
        } else {
            arch.stage_kinds.assign(arch.widths.size(), LayerKind::nlp);
            arch.primitives.clear();
            for (int b = 0; b < 5; ++b) {
                if (!(mask & (1u << b))) continue;
                PrimitiveSpec p;
                p.kind = kKinds[b];
                p.kernel = (p.kind == PrimitiveKind::avg_pool || p.kind == PrimitiveKind::max_pool)
                               ? 5
                               : 3;
                arch.primitives.push_back(p);
            }
        }
        SearchRow& row = rows[mask];
        std::vector<double> metrics;
        for (auto seed : cfg.seeds) {
            Network net(arch, seed);
            TrainConfig tc = cfg.train;
            tc.seed = seed;
            Adam opt(AdamConfig{tc.lr});
            train_network(net, data, tc, opt);
            auto record = evaluate(net, data, Split::test).record;
            metrics.push_back(primary_metric(record));
            row.records.push_back(std::move(record));
        }
        double mean = 0.0;
        for (double v : metrics) mean += v;
        mean /= static_cast<double>(metrics.size());
        double var = 0.0;
        for (double v : metrics) var += (v - mean) * (v - mean);
        row.metric_mean = mean;
        row.metric_std = metrics.size() > 1 ? std::sqrt(var / static_cast<double>(metrics.size()))
                                            : 0.0;
    };

    std::atomic<std::uint32_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::uint32_t m = next.fetch_add(1);
            if (m >= 32) break;
            run_subset(m);
        }
    };
    const int nthreads = std::max(1, threads);
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    const auto baseline_mean = mean_record(rows[0].records);
    for (auto& row : rows) {
        if (row.mask == 0) {
            row.dp = 0.0;
            continue;
        }
        try {
            row.dp = delta_p(mean_record(row.records), baseline_mean);
        } catch (const std::invalid_argument&) {
            row.dp = std::numeric_limits<double>::quiet_NaN();  // zero baseline metric
        }
    }
    std::vector<const SearchRow*> order;
    for (const auto& r : rows) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(), [](const SearchRow* a, const SearchRow* b) {
        return a->metric_mean > b->metric_mean;
    });

    std::ostringstream csv;
    csv << "avg_pool,max_pool,fixed_conv,shift,perturbation,metric_mean,metric_std,delta_p\n";
    for (const auto* r : order) {
        if (r->mask == 0) {
            csv << "baseline,baseline,baseline,baseline,baseline";
        } else {
            for (int b = 0; b < 5; ++b) csv << ((r->mask >> b) & 1u) << (b < 4 ? "," : "");
        }
        char buf[64];
        std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%.3f\n", r->metric_mean, r->metric_std, r->dp);
        csv << buf;
    }
    write_text_file(csv_path, csv.str());
    std::cout << "primitive search (31 subsets + baseline) written to " << csv_path.string()
              << "\n";
    return 0;
}

inline int cmd_cka(const ExperimentConfig& cfg, const fs::path& checkpoint, bool force) {
    const fs::path out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    const auto data = ShapesMtDataset::load(cfg.dataset.path);
    Network net(cfg.arch, cfg.seeds.at(0));
    load_network_state(net, load_checkpoint(checkpoint));
    auto layers = cfg.diagnostics.cka_layers;
    if (layers.empty()) layers = net.stage_names();
    const auto matrices =
        task_pair_cka(net, data, layers, cfg.diagnostics.cka_steps, cfg.diagnostics.cka_batch);
    std::string heatmaps;
    for (const auto& m : matrices) {
        const auto csv_path = out_dir / ("cka_" + m.layer + ".csv");
        refuse_overwrite(csv_path, force);
        write_text_file(csv_path, cka_matrix_csv(m));
        heatmaps += cka_heatmap_text(m) + "\n";
    }
    write_text_file(out_dir / "cka.txt", heatmaps);
    std::cout << heatmaps;
    return 0;
}

// Comparison tables over completed runs; exactly one run is the baseline.
inline int cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& baseline_dir,
                      const fs::path& out_dir, bool force) {
    if (baseline_dir.empty()) throw ConfigError("report: --baseline run directory is required");
    if (run_dirs.empty()) throw ConfigError("report: at least one run directory is required");

    struct Entry {
        std::string method;
        std::int64_t learnable = 0;
        MetricRecord record;
        MetricRecord record_std;
    };
    auto load_entry = [](const fs::path& dir) {
        const auto path = dir / "summary.json";
        std::ifstream is(path);
        if (!is) throw ConfigError("report: cannot open " + path.string());
        nlohmann::json j;
        is >> j;
        Entry e;
        e.method = j.at("method").get<std::string>();
        e.learnable = j.at("learnable").get<std::int64_t>();
        e.record = record_from_json(j.at("record"));
        if (j.contains("record_std")) e.record_std = record_from_json(j.at("record_std"));
        return e;
    };

    const Entry baseline = load_entry(baseline_dir);
    std::vector<Entry> entries;
    for (const auto& d : run_dirs) entries.push_back(load_entry(d));

    std::ostringstream csv, txt;
    csv << "method,learnable";
    for (const auto& t : baseline.record.tasks)
        for (const auto& m : t.metrics) csv << "," << t.task << "/" << m.name;
    csv << ",delta_p\n";
    txt << "method                       params    metrics (mean";
    txt << (entries.at(0).record_std.tasks.empty() ? "" : " +/- std") << ")  delta_p\n";
    for (const auto& e : entries) {
        const double dp = delta_p(e.record, baseline.record);
        csv << e.method << "," << e.learnable;
        std::string mtxt;
        for (std::size_t t = 0; t < e.record.tasks.size(); ++t) {
            for (std::size_t m = 0; m < e.record.tasks[t].metrics.size(); ++m) {
                const auto& mv = e.record.tasks[t].metrics[m];
                char buf[48];
                std::snprintf(buf, sizeof(buf), ",%.6f", mv.value);
                csv << buf;
                char tb[96];
                if (!e.record_std.tasks.empty()) {
                    std::snprintf(tb, sizeof(tb), "%s=%.4f±%.4f ", mv.name.c_str(), mv.value,
                                  e.record_std.tasks[t].metrics[m].value);
                } else {
                    std::snprintf(tb, sizeof(tb), "%s=%.4f ", mv.name.c_str(), mv.value);
                }
                mtxt += tb;
            }
        }
        char dpbuf[32];
        std::snprintf(dpbuf, sizeof(dpbuf), ",%+.1f\n", dp);
        csv << dpbuf;
        char row[512];
        std::snprintf(row, sizeof(row), "%-28s %-9lld %s %+.1f%%\n", e.method.c_str(),
                      static_cast<long long>(e.learnable), mtxt.c_str(), dp);
        txt << row;
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        refuse_overwrite(out_dir / "report.csv", force);
        write_text_file(out_dir / "report.csv", csv.str());
        write_text_file(out_dir / "report.txt", txt.str());
    }
    std::cout << txt.str();
    return 0;
}

}  // namespace cli

}  // namespace etrnlp

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "etrnlp/data.hpp"
#include "etrnlp/nets.hpp"
#include "etrnlp/train.hpp"

namespace etrnlp {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
T require(const nlohmann::json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing key '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

inline PrimitiveKind primitive_kind_from_string(const std::string& s) {
    if (s == "avg_pool") return PrimitiveKind::avg_pool;
    if (s == "max_pool") return PrimitiveKind::max_pool;
    if (s == "fixed_conv") return PrimitiveKind::fixed_conv;
    if (s == "shift") return PrimitiveKind::shift;
    if (s == "perturbation") return PrimitiveKind::perturbation;
    throw ConfigError("unknown primitive kind '" + s + "'");
}

inline LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "conv") return LayerKind::conv;
    if (s == "nlp") return LayerKind::nlp;
    if (s == "etr") return LayerKind::etr;
    if (s == "etr_nlp") return LayerKind::etr_nlp;
    if (s == "mask_routing") return LayerKind::mask_routing;
    throw ConfigError("unknown layer kind '" + s + "'");
}

inline HeadKind head_kind_from_string(const std::string& s) {
    if (s == "attribute") return HeadKind::attribute_logit;
    if (s == "segmentation") return HeadKind::segmentation_logit;
    if (s == "depth") return HeadKind::depth_regression;
    throw ConfigError("unknown head kind '" + s + "'");
}

inline PrimitiveSpec primitive_spec_from_json(const nlohmann::json& j, const std::string& where) {
    detail::check_keys(j, {"kind", "kernel", "sparsity", "weight_style", "depthwise",
                           "shift_step", "amplitude"},
                       where);
    PrimitiveSpec p;
    p.kind = primitive_kind_from_string(detail::require<std::string>(j, "kind", where));
    p.kernel = detail::get_or<int>(j, "kernel",
                                   p.kind == PrimitiveKind::avg_pool ? 5 : 3, where);
    p.sparsity = detail::get_or<double>(j, "sparsity", 0.5, where);
    const auto style = detail::get_or<std::string>(j, "weight_style", "binary", where);
    if (style == "binary") p.weight_style = WeightStyle::binary;
    else if (style == "gaussian") p.weight_style = WeightStyle::gaussian;
    else throw ConfigError(where + ": unknown weight_style '" + style + "'");
    p.depthwise = detail::get_or<bool>(j, "depthwise", true, where);
    p.shift_step = detail::get_or<int>(j, "shift_step", 1, where);
    p.amplitude = detail::get_or<double>(j, "amplitude", 0.1, where);
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return p;
}

inline nlohmann::json primitive_spec_to_json(const PrimitiveSpec& p) {
    return {{"kind", primitive_kind_name(p.kind)},
            {"kernel", p.kernel},
            {"sparsity", p.sparsity},
            {"weight_style", p.weight_style == WeightStyle::binary ? "binary" : "gaussian"},
            {"depthwise", p.depthwise},
            {"shift_step", p.shift_step},
            {"amplitude", p.amplitude}};
}

inline ArchConfig arch_config_from_json(const nlohmann::json& j, const std::string& where) {
    detail::check_keys(j, {"arch", "widths", "layer_kinds", "gamma", "gamma_per_stage",
                           "primitives", "tasks", "heads", "in_channels"},
                       where);
    ArchConfig a;
    const auto arch = detail::get_or<std::string>(j, "arch", "mini_resnet", where);
    if (arch == "mini_resnet") a.arch = ArchKind::mini_resnet;
    else if (arch == "mini_segnet") a.arch = ArchKind::mini_segnet;
    else throw ConfigError(where + ": unknown arch '" + arch + "'");
    a.widths = detail::get_or<std::vector<std::int64_t>>(j, "widths", {16, 32, 64}, where);
    if (j.contains("layer_kinds")) {
        a.stage_kinds.clear();
        if (j.at("layer_kinds").is_string()) {
            a.stage_kinds.assign(a.widths.size(),
                                 layer_kind_from_string(j.at("layer_kinds").get<std::string>()));
        } else {
            for (const auto& k : j.at("layer_kinds")) {
                a.stage_kinds.push_back(layer_kind_from_string(k.get<std::string>()));
            }
        }
    } else {
        a.stage_kinds.assign(a.widths.size(), LayerKind::conv);
    }
    a.gamma = detail::get_or<double>(j, "gamma", 0.9, where);
    a.gamma_per_stage = detail::get_or<std::vector<double>>(j, "gamma_per_stage", {}, where);
    if (j.contains("primitives")) {
        a.primitives.clear();
        int i = 0;
        for (const auto& p : j.at("primitives")) {
            a.primitives.push_back(
                primitive_spec_from_json(p, where + ".primitives[" + std::to_string(i++) + "]"));
        }
        if (a.primitives.empty()) throw ConfigError(where + ": primitives must be non-empty");
    }
    a.tasks = detail::get_or<int>(j, "tasks", 1, where);
    if (j.contains("heads")) {
        for (const auto& h : j.at("heads")) {
            a.heads.push_back(head_kind_from_string(h.get<std::string>()));
        }
    }
    a.in_channels = detail::get_or<std::int64_t>(j, "in_channels", 3, where);
    return a;
}

inline nlohmann::json arch_config_to_json(const ArchConfig& a) {
    nlohmann::json j;
    j["arch"] = a.arch == ArchKind::mini_resnet ? "mini_resnet" : "mini_segnet";
    j["widths"] = a.widths;
    nlohmann::json kinds = nlohmann::json::array();
    for (auto k : a.stage_kinds) kinds.push_back(layer_kind_name(k));
    j["layer_kinds"] = kinds;
    j["gamma"] = a.gamma;
    if (!a.gamma_per_stage.empty()) j["gamma_per_stage"] = a.gamma_per_stage;
    nlohmann::json prims = nlohmann::json::array();
    for (const auto& p : a.primitives) prims.push_back(primitive_spec_to_json(p));
    j["primitives"] = prims;
    j["tasks"] = a.tasks;
    nlohmann::json heads = nlohmann::json::array();
    for (auto h : a.heads) heads.push_back(head_kind_name(h));
    if (!a.heads.empty()) j["heads"] = heads;
    j["in_channels"] = a.in_channels;
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& where) {
    detail::check_keys(j, {"epochs", "batch_size", "lr", "strategy", "task_order"}, where);
    TrainConfig t;
    t.epochs = detail::get_or<int>(j, "epochs", 20, where);
    t.batch_size = detail::get_or<int>(j, "batch_size", 32, where);
    t.lr = detail::get_or<double>(j, "lr", 1e-4, where);
    const auto strategy = detail::get_or<std::string>(j, "strategy", "steady_state", where);
    if (strategy == "steady_state") t.strategy = UpdateStrategy::steady_state;
    else if (strategy == "synchronized") t.strategy = UpdateStrategy::synchronized;
    else throw ConfigError(where + ": unknown strategy '" + strategy + "'");
    t.task_order = detail::get_or<std::string>(j, "task_order", "round_robin", where);
    try {
        t.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
    return t;
}

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
    return {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"lr", t.lr},
            {"strategy", strategy_name(t.strategy)},
            {"task_order", t.task_order}};
}

struct DatasetSection {
    std::string path;
    std::optional<ShapesMtConfig> shapes;  // generation recipe, when present
    std::uint64_t seed = 0;                // generation seed
};

struct DiagnosticsSection {
    std::vector<std::string> cka_layers;
    int cka_steps = 32;
    int cka_batch = 32;
};

struct ExperimentConfig {
    int version = 1;
    std::string name = "run";
    DatasetSection dataset;
    ArchConfig arch;
    TrainConfig train;
    DiagnosticsSection diagnostics;
    std::vector<double> sweep_gammas = {0.25, 0.5, 0.75, 0.9, 1.0};
    std::string output_dir;
    std::vector<std::uint64_t> seeds = {0};
};

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"version", "name", "dataset", "arch", "train", "diagnostics",
                           "sweep_gammas", "output_dir", "seeds"},
                       "config");
    ExperimentConfig c;
    c.version = detail::require<int>(j, "version", "config");
    if (c.version != 1) throw ConfigError("config: unsupported version");
    c.name = detail::get_or<std::string>(j, "name", "run", "config");

    const auto& d = j.at("dataset");
    detail::check_keys(d, {"path", "shapes", "seed"}, "config.dataset");
    c.dataset.path = detail::require<std::string>(d, "path", "config.dataset");
    c.dataset.seed = detail::get_or<std::uint64_t>(d, "seed", 0, "config.dataset");
    if (d.contains("shapes")) {
        detail::check_keys(d.at("shapes"),
                           {"width", "height", "channels", "num_samples", "tasks", "dense",
                            "shapes_min", "shapes_max", "positive_rate", "coupling", "noise_std"},
                           "config.dataset.shapes");
        ShapesMtConfig s;
        const auto& sj = d.at("shapes");
        s.width = detail::get_or<std::int64_t>(sj, "width", 32, "config.dataset.shapes");
        s.height = detail::get_or<std::int64_t>(sj, "height", 32, "config.dataset.shapes");
        s.channels = detail::get_or<std::int64_t>(sj, "channels", 3, "config.dataset.shapes");
        s.num_samples = detail::get_or<int>(sj, "num_samples", 640, "config.dataset.shapes");
        s.tasks = detail::get_or<int>(sj, "tasks", 4, "config.dataset.shapes");
        s.dense = detail::get_or<bool>(sj, "dense", false, "config.dataset.shapes");
        s.shapes_min = detail::get_or<int>(sj, "shapes_min", 1, "config.dataset.shapes");
        s.shapes_max = detail::get_or<int>(sj, "shapes_max", 3, "config.dataset.shapes");
        s.positive_rate = detail::get_or<double>(sj, "positive_rate", 0.5, "config.dataset.shapes");
        s.coupling = detail::get_or<double>(sj, "coupling", 0.0, "config.dataset.shapes");
        s.noise_std = detail::get_or<double>(sj, "noise_std", 0.0, "config.dataset.shapes");
        try {
            s.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config.dataset.shapes: ") + e.what());
        }
        c.dataset.shapes = s;
    }

    if (j.contains("arch")) c.arch = arch_config_from_json(j.at("arch"), "config.arch");
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), "config.train");
    if (j.contains("diagnostics")) {
        const auto& g = j.at("diagnostics");
        detail::check_keys(g, {"cka_layers", "cka_steps", "cka_batch"}, "config.diagnostics");
        c.diagnostics.cka_layers =
            detail::get_or<std::vector<std::string>>(g, "cka_layers", {}, "config.diagnostics");
        c.diagnostics.cka_steps = detail::get_or<int>(g, "cka_steps", 32, "config.diagnostics");
        c.diagnostics.cka_batch = detail::get_or<int>(g, "cka_batch", 32, "config.diagnostics");
    }
    c.sweep_gammas = detail::get_or<std::vector<double>>(j, "sweep_gammas",
                                                         {0.25, 0.5, 0.75, 0.9, 1.0}, "config");
    c.output_dir = detail::require<std::string>(j, "output_dir", "config");
    c.seeds = detail::get_or<std::vector<std::uint64_t>>(j, "seeds", {0}, "config");
    if (c.seeds.empty()) throw ConfigError("config: seeds must be non-empty");
    return c;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["version"] = c.version;
    j["name"] = c.name;
    j["dataset"]["path"] = c.dataset.path;
    j["dataset"]["seed"] = c.dataset.seed;
    if (c.dataset.shapes) {
        nlohmann::json s;
        to_json(s, *c.dataset.shapes);
        j["dataset"]["shapes"] = s;
    }
    j["arch"] = arch_config_to_json(c.arch);
    j["train"] = train_config_to_json(c.train);
    j["diagnostics"] = {{"cka_layers", c.diagnostics.cka_layers},
                        {"cka_steps", c.diagnostics.cka_steps},
                        {"cka_batch", c.diagnostics.cka_batch}};
    j["sweep_gammas"] = c.sweep_gammas;
    j["output_dir"] = c.output_dir;
    j["seeds"] = c.seeds;
    return j;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

}  // namespace etrnlp

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "etrnlp/io.hpp"
#include "etrnlp/rng.hpp"
#include "etrnlp/tensor.hpp"

namespace etrnlp {

namespace fs = std::filesystem;

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline constexpr int kShapeVocab = 4;  // circle, square, triangle, cross
inline const char* kShapeNames[kShapeVocab] = {"circle", "square", "triangle", "cross"};

// Synthetic multi-task scenes standing in for CelebA / Cityscapes / NYU-v2 at
// desk scale. Attribute mode labels shape presence; dense mode adds per-category
// masks and an analytic depth field.
struct ShapesMtConfig {
    std::int64_t width = 32;
    std::int64_t height = 32;
    std::int64_t channels = 3;
    int num_samples = 640;
    int tasks = 4;  // attribute tasks, or seg categories + 1 depth task in dense mode
    bool dense = false;
    int shapes_min = 1;  // dense-mode scene complexity
    int shapes_max = 3;
    double positive_rate = 0.5;  // attribute-mode Bernoulli rate
    double coupling = 0.0;       // P(attr t copies attr t-1); correlates tasks
    double noise_std = 0.0;      // additive pixel noise before quantization

    int seg_categories() const { return dense ? tasks - 1 : tasks; }

    void validate() const {
        if (width < 8 || height < 8) throw std::invalid_argument("shapes: image too small");
        if (channels != 3) throw std::invalid_argument("shapes: only 3-channel images supported");
        if (num_samples < 10) throw std::invalid_argument("shapes: num_samples must be >= 10");
        if (tasks < 1 || seg_categories() < 1 || seg_categories() > kShapeVocab) {
            throw std::invalid_argument("shapes: tasks must map onto the 4-shape vocabulary");
        }
        if (dense && (shapes_min < 1 || shapes_max < shapes_min ||
                      shapes_max > seg_categories())) {
            throw std::invalid_argument("shapes: invalid shapes per image range");
        }
        if (!(positive_rate > 0.0 && positive_rate < 1.0)) {
            throw std::invalid_argument("shapes: positive_rate must be in (0, 1)");
        }
        if (!(coupling >= 0.0 && coupling <= 1.0)) {
            throw std::invalid_argument("shapes: coupling must be in [0, 1]");
        }
        if (noise_std < 0.0) throw std::invalid_argument("shapes: noise_std must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const ShapesMtConfig& c) {
    j = nlohmann::json{{"width", c.width},
                       {"height", c.height},
                       {"channels", c.channels},
                       {"num_samples", c.num_samples},
                       {"tasks", c.tasks},
                       {"dense", c.dense},
                       {"shapes_min", c.shapes_min},
                       {"shapes_max", c.shapes_max},
                       {"positive_rate", c.positive_rate},
                       {"coupling", c.coupling},
                       {"noise_std", c.noise_std}};
}

inline void from_json(const nlohmann::json& j, ShapesMtConfig& c) {
    j.at("width").get_to(c.width);
    j.at("height").get_to(c.height);
    j.at("channels").get_to(c.channels);
    j.at("num_samples").get_to(c.num_samples);
    j.at("tasks").get_to(c.tasks);
    j.at("dense").get_to(c.dense);
    j.at("shapes_min").get_to(c.shapes_min);
    j.at("shapes_max").get_to(c.shapes_max);
    j.at("positive_rate").get_to(c.positive_rate);
    j.at("coupling").get_to(c.coupling);
    j.at("noise_std").get_to(c.noise_std);
}

// ---- PPM (binary P6) ----

inline void write_ppm(const fs::path& path, const Tensor& img) {
    if (img.shape.n != 1 || img.shape.c != 3) {
        throw std::invalid_argument("write_ppm expects a 1x3xHxW tensor");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << "P6\n" << img.shape.w << " " << img.shape.h << "\n255\n";
    const std::int64_t plane = img.shape.h * img.shape.w;
    for (std::int64_t p = 0; p < plane; ++p) {
        for (std::int64_t c = 0; c < 3; ++c) {
            const float v = img.data[static_cast<std::size_t>(c * plane + p)];
            const int byte = std::clamp(static_cast<int>(std::lround(v * 255.0f)), 0, 255);
            os.put(static_cast<char>(byte));
        }
    }
    if (!os) throw IoError("write failed: " + path.string());
}

inline TensorPtr load_ppm(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    std::string magic;
    std::int64_t w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw BadMagicError("not a P6/255 ppm: " + path.string());
    is.get();  // single whitespace after header
    auto img = make_tensor<float>(Shape{1, 3, h, w});
    const std::int64_t plane = h * w;
    std::vector<char> raw(static_cast<std::size_t>(plane * 3));
    is.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::int64_t>(is.gcount()) != plane * 3) {
        throw TruncatedFileError("truncated ppm: " + path.string());
    }
    for (std::int64_t p = 0; p < plane; ++p)
        for (std::int64_t c = 0; c < 3; ++c)
            img->data[static_cast<std::size_t>(c * plane + p)] =
                static_cast<float>(static_cast<unsigned char>(raw[p * 3 + c])) / 255.0f;
    return img;
}

// ---- scene model ----

namespace detail {

struct ShapeInstance {
    int category = 0;  // index into kShapeNames
    double cx = 0, cy = 0, size = 0;
    float color[3] = {0, 0, 0};
};

inline bool inside_shape(const ShapeInstance& s, double x, double y) {
    const double dx = x - s.cx;
    const double dy = y - s.cy;
    switch (s.category) {
        case 0:  // circle
            return dx * dx + dy * dy <= s.size * s.size;
        case 1:  // square
            return std::abs(dx) <= s.size && std::abs(dy) <= s.size;
        case 2: {  // upright isoceles triangle
            if (dy < -s.size || dy > s.size) return false;
            const double half = (dy + s.size) / 2.0;
            return std::abs(dx) <= half;
        }
        case 3: {  // cross of two bars
            const double w = s.size / 3.0;
            return (std::abs(dx) <= w && std::abs(dy) <= s.size) ||
                   (std::abs(dy) <= w && std::abs(dx) <= s.size);
        }
        default: return false;
    }
}

struct Scene {
    std::vector<ShapeInstance> shapes;
    std::vector<int> flags;  // presence per category
};

inline Scene sample_scene(const ShapesMtConfig& cfg, std::mt19937_64& rng) {
    Scene scene;
    const int cats = cfg.seg_categories();
    scene.flags.assign(static_cast<std::size_t>(cats), 0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (!cfg.dense) {
        // Chain coupling keeps each marginal at positive_rate while
        // correlating neighbouring tasks.
        for (int t = 0; t < cats; ++t) {
            const int own = coin(rng) < cfg.positive_rate ? 1 : 0;
            if (t > 0 && coin(rng) < cfg.coupling) {
                scene.flags[static_cast<std::size_t>(t)] = scene.flags[static_cast<std::size_t>(t - 1)];
            } else {
                scene.flags[static_cast<std::size_t>(t)] = own;
            }
        }
    } else {
        std::uniform_int_distribution<int> count(cfg.shapes_min, cfg.shapes_max);
        const int m = count(rng);
        std::vector<int> order(static_cast<std::size_t>(cats));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (int i = 0; i < m; ++i) scene.flags[static_cast<std::size_t>(order[i])] = 1;
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int cat = 0; cat < cats; ++cat) {
        if (!scene.flags[static_cast<std::size_t>(cat)]) continue;
        ShapeInstance s;
        s.category = cat;
        const double margin = 6.0;
        s.size = 3.0 + unif(rng) * 4.0;
        s.cx = margin + unif(rng) * (static_cast<double>(cfg.width) - 2 * margin);
        s.cy = margin + unif(rng) * (static_cast<double>(cfg.height) - 2 * margin);
        for (auto& ch : s.color) ch = static_cast<float>(0.4 + 0.6 * unif(rng));
        scene.shapes.push_back(s);
    }
    return scene;
}

// Depth field: 1 / (1 + distance to the center of the nearest shape,
// normalized by the image diagonal). Positive everywhere.
inline double scene_depth(const Scene& scene, const ShapesMtConfig& cfg, double x, double y) {
    const double diag = std::sqrt(static_cast<double>(cfg.width * cfg.width +
                                                      cfg.height * cfg.height));
    double best = std::numeric_limits<double>::infinity();
    for (const auto& s : scene.shapes) {
        const double dx = x - s.cx;
        const double dy = y - s.cy;
        best = std::min(best, std::sqrt(dx * dx + dy * dy));
    }
    if (!std::isfinite(best)) best = diag;  // empty scene
    return 1.0 / (1.0 + best / diag);
}

}  // namespace detail

// ---- generation ----

// Renders the dataset directory: images/NNNNNN.ppm, labels.csv,
// masks/NNNNNN.tnsr + depth/NNNNNN.tnsr in dense mode, and manifest.json with
// the config, seed, split assignment and per-file checksums. Rasterization is
// anti-aliasing-free and single-threaded, so the directory is byte-identical
// for identical (config, seed).
inline fs::path generate_shapes_mt(const ShapesMtConfig& cfg, std::uint64_t seed,
                                   const fs::path& dir) {
    cfg.validate();
    fs::create_directories(dir / "images");
    if (cfg.dense) {
        fs::create_directories(dir / "masks");
        fs::create_directories(dir / "depth");
    }

    std::ostringstream labels;
    labels << "id";
    for (int t = 0; t < cfg.tasks; ++t) labels << ",attr_" << t;
    labels << "\n";

    const int cats = cfg.seg_categories();
    const std::int64_t plane = cfg.height * cfg.width;
    std::vector<std::string> files;

    for (int i = 0; i < cfg.num_samples; ++i) {
        auto rng = make_rng(mix_seed(seed, "sample" + std::to_string(i)));
        const auto scene = detail::sample_scene(cfg, rng);

        auto img = make_tensor<float>(Shape{1, 3, cfg.height, cfg.width});
        std::vector<int> owner(static_cast<std::size_t>(plane), -1);
        for (std::int64_t y = 0; y < cfg.height; ++y) {
            for (std::int64_t x = 0; x < cfg.width; ++x) {
                const double px = static_cast<double>(x) + 0.5;
                const double py = static_cast<double>(y) + 0.5;
                for (const auto& s : scene.shapes) {
                    if (detail::inside_shape(s, px, py)) {
                        owner[static_cast<std::size_t>(y * cfg.width + x)] = s.category;
                        for (std::int64_t c = 0; c < 3; ++c)
                            img->data[static_cast<std::size_t>(c * plane + y * cfg.width + x)] =
                                s.color[c];
                    }
                }
            }
        }
        if (cfg.noise_std > 0.0) {
            auto nrng = make_rng(mix_seed(seed, "noise" + std::to_string(i)));
            std::normal_distribution<double> nd(0.0, cfg.noise_std);
            for (auto& v : img->data) v = static_cast<float>(v + nd(nrng));
        }

        char name[32];
        std::snprintf(name, sizeof(name), "%06d", i);
        const std::string img_rel = std::string("images/") + name + ".ppm";
        write_ppm(dir / img_rel, *img);
        files.push_back(img_rel);

        labels << i;
        for (int t = 0; t < cfg.tasks; ++t) {
            int flag = 1;  // dense depth task is always on
            if (t < cats) flag = scene.flags[static_cast<std::size_t>(t)];
            labels << "," << flag;
        }
        labels << "\n";

        if (cfg.dense) {
            auto masks = make_tensor<float>(Shape{1, cats, cfg.height, cfg.width});
            for (std::int64_t p = 0; p < plane; ++p) {
                const int o = owner[static_cast<std::size_t>(p)];
                if (o >= 0) masks->data[static_cast<std::size_t>(o * plane + p)] = 1.0f;
            }
            auto depth = make_tensor<float>(Shape{1, 1, cfg.height, cfg.width});
            for (std::int64_t y = 0; y < cfg.height; ++y)
                for (std::int64_t x = 0; x < cfg.width; ++x)
                    depth->data[static_cast<std::size_t>(y * cfg.width + x)] = static_cast<float>(
                        detail::scene_depth(scene, cfg, static_cast<double>(x) + 0.5,
                                            static_cast<double>(y) + 0.5));
            const std::string mask_rel = std::string("masks/") + name + ".tnsr";
            const std::string depth_rel = std::string("depth/") + name + ".tnsr";
            write_tensor_file(dir / mask_rel, *masks);
            write_tensor_file(dir / depth_rel, *depth);
            files.push_back(mask_rel);
            files.push_back(depth_rel);
        }
    }

    {
        std::ofstream os(dir / "labels.csv", std::ios::binary | std::ios::trunc);
        os << labels.str();
        if (!os) throw IoError("write failed: labels.csv");
    }
    files.push_back("labels.csv");

    // Seeded 80/10/10 partition.
    std::vector<int> ids(static_cast<std::size_t>(cfg.num_samples));
    std::iota(ids.begin(), ids.end(), 0);
    {
        auto rng = make_rng(mix_seed(seed, "splits"));
        std::shuffle(ids.begin(), ids.end(), rng);
    }
    const int n_train = cfg.num_samples * 8 / 10;
    const int n_val = cfg.num_samples / 10;
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["config"] = cfg;
    manifest["seed"] = seed;
    manifest["splits"]["train"] = std::vector<int>(ids.begin(), ids.begin() + n_train);
    manifest["splits"]["val"] = std::vector<int>(ids.begin() + n_train,
                                                 ids.begin() + n_train + n_val);
    manifest["splits"]["test"] = std::vector<int>(ids.begin() + n_train + n_val, ids.end());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) manifest["checksums"][f] = hex64(file_checksum(dir / f));
    {
        std::ofstream os(dir / "manifest.json", std::ios::binary | std::ios::trunc);
        os << manifest.dump(2) << "\n";
        if (!os) throw IoError("write failed: manifest.json");
    }
    return dir;
}

// True when the directory already holds a dataset generated from exactly this
// (config, seed) and every checksummed file is intact.
inline bool dataset_up_to_date(const ShapesMtConfig& cfg, std::uint64_t seed,
                               const fs::path& dir) {
    const auto mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) return false;
    nlohmann::json manifest;
    try {
        std::ifstream is(mpath);
        is >> manifest;
        ShapesMtConfig stored = manifest.at("config").get<ShapesMtConfig>();
        nlohmann::json a, b;
        to_json(a, stored);
        to_json(b, cfg);
        if (a != b || manifest.at("seed").get<std::uint64_t>() != seed) return false;
        for (const auto& [file, sum] : manifest.at("checksums").items()) {
            if (!fs::exists(dir / file)) return false;
            if (hex64(file_checksum(dir / file)) != sum.get<std::string>()) return false;
        }
    } catch (const std::exception&) {
        return false;
    }
    return true;
}

// ---- loading ----

struct Batch {
    TensorPtr x;                            // N x 3 x H x W
    std::vector<std::vector<float>> attr;   // per task: N labels
    TensorPtr masks;                        // N x C_seg x H x W (dense)
    TensorPtr depth;                        // N x 1 x H x W (dense)
};

class ShapesMtDataset {
  public:
    static ShapesMtDataset load(const fs::path& dir) {
        ShapesMtDataset ds;
        ds.dir_ = dir;
        nlohmann::json manifest;
        {
            std::ifstream is(dir / "manifest.json");
            if (!is) throw IoError("cannot open manifest: " + (dir / "manifest.json").string());
            is >> manifest;
        }
        ds.cfg_ = manifest.at("config").get<ShapesMtConfig>();
        ds.seed_ = manifest.at("seed").get<std::uint64_t>();
        manifest.at("splits").at("train").get_to(ds.train_ids_);
        manifest.at("splits").at("val").get_to(ds.val_ids_);
        manifest.at("splits").at("test").get_to(ds.test_ids_);

        // labels
        {
            std::ifstream is(dir / "labels.csv");
            if (!is) throw IoError("cannot open labels.csv");
            std::string line;
            std::getline(is, line);  // header
            ds.attr_.assign(static_cast<std::size_t>(ds.cfg_.num_samples),
                            std::vector<float>(static_cast<std::size_t>(ds.cfg_.tasks), 0.0f));
            while (std::getline(is, line)) {
                if (line.empty()) continue;
                std::stringstream ss(line);
                std::string cell;
                std::getline(ss, cell, ',');
                const int id = std::stoi(cell);
                for (int t = 0; t < ds.cfg_.tasks; ++t) {
                    std::getline(ss, cell, ',');
                    ds.attr_[static_cast<std::size_t>(id)][static_cast<std::size_t>(t)] =
                        std::stof(cell);
                }
            }
        }

        ds.images_.resize(static_cast<std::size_t>(ds.cfg_.num_samples));
        if (ds.cfg_.dense) {
            ds.masks_.resize(static_cast<std::size_t>(ds.cfg_.num_samples));
            ds.depths_.resize(static_cast<std::size_t>(ds.cfg_.num_samples));
        }
        for (int i = 0; i < ds.cfg_.num_samples; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "%06d", i);
            ds.images_[static_cast<std::size_t>(i)] =
                load_ppm(dir / "images" / (std::string(name) + ".ppm"));
            if (ds.cfg_.dense) {
                ds.masks_[static_cast<std::size_t>(i)] =
                    load_tensor_file(dir / "masks" / (std::string(name) + ".tnsr"));
                ds.depths_[static_cast<std::size_t>(i)] =
                    load_tensor_file(dir / "depth" / (std::string(name) + ".tnsr"));
            }
        }
        return ds;
    }

    const ShapesMtConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    const fs::path& dir() const { return dir_; }

    const std::vector<int>& split_ids(Split s) const {
        switch (s) {
            case Split::train: return train_ids_;
            case Split::val: return val_ids_;
            case Split::test: return test_ids_;
        }
        throw std::logic_error("bad split");
    }

    Batch make_batch(const std::vector<int>& ids) const {
        Batch b;
        const std::int64_t n = static_cast<std::int64_t>(ids.size());
        const std::int64_t plane = cfg_.height * cfg_.width;
        b.x = make_tensor<float>(Shape{n, 3, cfg_.height, cfg_.width});
        b.attr.assign(static_cast<std::size_t>(cfg_.tasks), {});
        for (auto& v : b.attr) v.resize(static_cast<std::size_t>(n));
        if (cfg_.dense) {
            b.masks = make_tensor<float>(Shape{n, cfg_.seg_categories(), cfg_.height, cfg_.width});
            b.depth = make_tensor<float>(Shape{n, 1, cfg_.height, cfg_.width});
        }
        for (std::int64_t i = 0; i < n; ++i) {
            const auto id = static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]);
            std::copy_n(images_[id]->data.data(), 3 * plane, b.x->data.data() + i * 3 * plane);
            for (int t = 0; t < cfg_.tasks; ++t)
                b.attr[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] =
                    attr_[id][static_cast<std::size_t>(t)];
            if (cfg_.dense) {
                const std::int64_t cs = cfg_.seg_categories();
                std::copy_n(masks_[id]->data.data(), cs * plane,
                            b.masks->data.data() + i * cs * plane);
                std::copy_n(depths_[id]->data.data(), plane, b.depth->data.data() + i * plane);
            }
        }
        return b;
    }

  private:
    fs::path dir_;
    ShapesMtConfig cfg_;
    std::uint64_t seed_ = 0;
    std::vector<int> train_ids_, val_ids_, test_ids_;
    std::vector<TensorPtr> images_;
    std::vector<TensorPtr> masks_, depths_;
    std::vector<std::vector<float>> attr_;
};

// Seeded shuffle, fixed-size chunks, last partial batch dropped.
inline std::vector<std::vector<int>> batch_iter(const std::vector<int>& ids, int batch_size,
                                                std::uint64_t seed) {
    if (ids.empty()) throw std::invalid_argument("batch_iter: empty split");
    if (batch_size < 1 || batch_size > static_cast<int>(ids.size())) {
        throw std::invalid_argument("batch_iter: batch size must be in [1, split size]");
    }
    std::vector<int> order(ids);
    auto rng = make_rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> batches;
    const int full = static_cast<int>(order.size()) / batch_size;
    batches.reserve(static_cast<std::size_t>(full));
    for (int b = 0; b < full; ++b) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b) * batch_size,
                             order.begin() + static_cast<std::ptrdiff_t>(b + 1) * batch_size);
    }
    return batches;
}

}  // namespace etrnlp

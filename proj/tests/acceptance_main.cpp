// Acceptance suite: one line per criterion, nonzero exit if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "etrnlp/cli.hpp"
#include "etrnlp/config.hpp"
#include "etrnlp/train.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace etrnlp;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int n, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL", n, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

template <typename Fn>
void criterion(int n, const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
        auto [pass, detail] = fn();
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char timing[48];
        std::snprintf(timing, sizeof(timing), " (%.1fs)", secs);
        report(n, name, pass, detail + timing);
    } catch (const std::exception& e) {
        report(n, name, false, std::string("exception: ") + e.what());
    }
}

using Verdict = std::pair<bool, std::string>;

MetricRecord two_task_record(double miou, double abs_err) {
    MetricRecord r;
    r.tasks = {{"segmentation", {{"miou", miou, true}}},
               {"depth", {{"abs_err", abs_err, false}}}};
    return r;
}

// ---------- criterion 1 ----------
Verdict delta_p_reproduction() {
    const double dp_etr = delta_p(two_task_record(61.22, 0.0141), two_task_record(56.57, 0.0170));
    const double dp_mr = delta_p(two_task_record(57.93, 0.0143), two_task_record(56.57, 0.0170));
    MetricRecord celeb_base, celeb_etr;
    celeb_base.tasks = {
        {"attributes", {{"precision", 67.7, true}, {"recall", 59.8, true}}}};
    celeb_etr.tasks = {
        {"attributes", {{"precision", 72.0, true}, {"recall", 63.6, true}}}};
    const double dp_celeba = delta_p(celeb_etr, celeb_base);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "Dp=%.3f/%.3f/%.3f", dp_etr, dp_celeba, dp_mr);
    const bool pass = std::abs(dp_etr - 12.6) <= 0.05 && std::abs(dp_celeba - 6.4) <= 0.1 &&
                      std::abs(dp_mr - 9.1) <= 0.1;
    return {pass, buf};
}

// ---------- criterion 2 ----------
Verdict gradient_correctness() {
    double worst = 0.0;
    std::string worst_site;
    auto track = [&](const std::string& site, const gradcheck::Result& r) {
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            worst_site = site + ": " + r.worst;
        }
    };
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const std::uint64_t s0 = seed * 1000;
        {  // conv2d, plain / grouped / strided
            struct Cfg {
                std::int64_t groups, stride, pad;
            };
            for (const auto& c : {Cfg{1, 1, 1}, Cfg{2, 1, 1}, Cfg{1, 2, 0}}) {
                auto x = gradcheck::mirrored_uniform(Shape{2, 4, 6, 6}, s0 + 1, -1, 1, true);
                auto w = gradcheck::mirrored_uniform(Shape{4, 4 / c.groups, 3, 3}, s0 + 2, -0.5,
                                                     0.5, true);
                auto b = gradcheck::mirrored_uniform(Shape{1, 4, 1, 1}, s0 + 3, -0.1, 0.1, true);
                ConvSpec spec;
                spec.groups = c.groups;
                spec.stride = c.stride;
                spec.pad = c.pad;
                track("conv2d",
                      gradcheck::check(
                          {x.f32, w.f32, b.f32}, {x.f64, w.f64, b.f64},
                          [&](Tape& tape) {
                              auto y = conv2d(&tape, x.f32, w.f32, b.f32, spec);
                              return mean_all(&tape, mul(&tape, y, y));
                          },
                          [&]() {
                              auto y = conv2d<double>(nullptr, x.f64, w.f64, b.f64, spec);
                              auto sq = mul<double>(nullptr, y, y);
                              return mean_all<double>(nullptr, sq)->item();
                          }));
            }
        }
        {  // pooling, both kinds
            auto x = gradcheck::mirrored_uniform(Shape{2, 3, 7, 7}, s0 + 4, -1, 1, true);
            for (auto kind : {PoolKind::avg, PoolKind::max}) {
                track(kind == PoolKind::avg ? "avg_pool" : "max_pool",
                      gradcheck::check(
                          {x.f32}, {x.f64},
                          [&](Tape& tape) {
                              auto y = pool2d(&tape, x.f32, kind, 3, 1, 1);
                              return mean_all(&tape, mul(&tape, y, y));
                          },
                          [&]() {
                              auto y = pool2d<double>(nullptr, x.f64, kind, 3, 1, 1);
                              auto sq = mul<double>(nullptr, y, y);
                              return mean_all<double>(nullptr, sq)->item();
                          }));
            }
        }
        {  // batchnorm (train mode) with a random probe functional
            auto x = gradcheck::mirrored_uniform(Shape{2, 3, 4, 4}, s0 + 5, -1, 1, true);
            auto sc = gradcheck::mirrored_uniform(Shape{1, 3, 1, 1}, s0 + 6, 0.5, 1.5, true);
            auto sh = gradcheck::mirrored_uniform(Shape{1, 3, 1, 1}, s0 + 7, -0.5, 0.5, true);
            auto probe = gradcheck::mirrored_uniform(Shape{2, 3, 4, 4}, s0 + 8, -1, 1, false);
            track("batchnorm2d",
                  gradcheck::check(
                      {x.f32, sc.f32, sh.f32}, {x.f64, sc.f64, sh.f64},
                      [&](Tape& tape) {
                          auto y = batchnorm2d(&tape, x.f32, sc.f32, sh.f32, nullptr, nullptr,
                                               true, 0.1f, 1e-5f);
                          return sum_all(&tape, mul(&tape, y, probe.f32));
                      },
                      [&]() {
                          auto y = batchnorm2d<double>(nullptr, x.f64, sc.f64, sh.f64, nullptr,
                                                       nullptr, true, 0.1, 1e-5);
                          auto wy = mul<double>(nullptr, y, probe.f64);
                          return sum_all<double>(nullptr, wy)->item();
                      }));
        }
        {  // elementwise ops, losses, channel ops
            auto a = gradcheck::mirrored_uniform(Shape{2, 6, 4, 4}, s0 + 9, -1, 1, true);
            auto target = gradcheck::mirrored_uniform(Shape{2, 6, 4, 4}, s0 + 10, 0, 1, false);
            track("relu-sigmoid-chain",
                  gradcheck::check(
                      {a.f32}, {a.f64},
                      [&](Tape& tape) {
                          auto y = sigmoid(&tape, relu(&tape, a.f32));
                          return mean_all(&tape, mul(&tape, y, y));
                      },
                      [&]() {
                          auto y = sigmoid<double>(nullptr, relu<double>(nullptr, a.f64));
                          auto sq = mul<double>(nullptr, y, y);
                          return mean_all<double>(nullptr, sq)->item();
                      }));
            track("bce", gradcheck::check(
                             {a.f32}, {a.f64},
                             [&](Tape& tape) {
                                 return bce_with_logits_mean(&tape, a.f32, target.f32);
                             },
                             [&]() {
                                 return bce_with_logits_mean<double>(nullptr, a.f64, target.f64)
                                     ->item();
                             }));
            track("l1", gradcheck::check(
                            {a.f32}, {a.f64},
                            [&](Tape& tape) { return l1_loss_mean(&tape, a.f32, target.f32); },
                            [&]() {
                                return l1_loss_mean<double>(nullptr, a.f64, target.f64)->item();
                            }));
            track("channel_shuffle+gap",
                  gradcheck::check(
                      {a.f32}, {a.f64},
                      [&](Tape& tape) {
                          auto y = global_avg_pool(&tape, channel_shuffle(&tape, a.f32, 3));
                          return sum_all(&tape, mul(&tape, y, y));
                      },
                      [&]() {
                          auto y = global_avg_pool<double>(
                              nullptr, channel_shuffle<double>(nullptr, a.f64, 3));
                          auto sq = mul<double>(nullptr, y, y);
                          return sum_all<double>(nullptr, sq)->item();
                      }));
            std::vector<std::pair<int, int>> offs = {{-1, 0}, {1, 0}, {0, -1},
                                                     {0, 1},  {0, 0}, {-1, 1}};
            track("shift", gradcheck::check(
                               {a.f32}, {a.f64},
                               [&](Tape& tape) {
                                   auto y = shift_channels(&tape, a.f32, offs);
                                   return mean_all(&tape, mul(&tape, y, y));
                               },
                               [&]() {
                                   auto y = shift_channels<double>(nullptr, a.f64, offs);
                                   auto sq = mul<double>(nullptr, y, y);
                                   return mean_all<double>(nullptr, sq)->item();
                               }));
        }
        {  // composed ETR-NLP module: x, combiner, active task conv
            EtrOptions opt;
            opt.c_in = 4;
            opt.c_out = 8;
            opt.gamma = 0.5;
            opt.tasks = 2;
            opt.shared_nlp = true;
            opt.seed = s0 + 11;
            EtrModule m(opt);
            EtrModuleT<double> twin(opt);
            {
                const auto& sl = m.shared_nlp();
                const auto& dl = twin.shared_nlp();
                copy_cast(*dl.combiner_weight(), *sl.combiner_weight());
                copy_cast(*dl.combiner_bias(), *sl.combiner_bias());
                for (std::size_t i = 0; i < sl.primitives().size(); ++i) {
                    if (sl.primitives()[i].conv_weight()) {
                        copy_cast(*dl.primitives()[i].conv_weight(),
                                  *sl.primitives()[i].conv_weight());
                    }
                    if (sl.primitives()[i].spec().kind == PrimitiveKind::perturbation) {
                        copy_cast(*dl.primitives()[i].noise_mask(6, 6),
                                  *sl.primitives()[i].noise_mask(6, 6));
                    }
                }
                for (std::size_t t = 0; t < m.task_convs().size(); ++t) {
                    copy_cast(*twin.task_convs()[t].w, *m.task_convs()[t].w);
                    copy_cast(*twin.task_convs()[t].b, *m.task_convs()[t].b);
                }
            }
            auto x = gradcheck::mirrored_uniform(Shape{2, 4, 6, 6}, s0 + 12, -1, 1, true);
            track("etr_nlp_module",
                  gradcheck::check(
                      {x.f32, m.shared_nlp().combiner_weight(), m.shared_nlp().combiner_bias(),
                       m.task_convs()[1].w, m.task_convs()[1].b},
                      {x.f64, twin.shared_nlp().combiner_weight(),
                       twin.shared_nlp().combiner_bias(), twin.task_convs()[1].w,
                       twin.task_convs()[1].b},
                      [&](Tape& tape) {
                          auto y = m.forward(&tape, x.f32, 1);
                          return mean_all(&tape, mul(&tape, y, y));
                      },
                      [&]() {
                          auto y = twin.forward(nullptr, x.f64, 1);
                          auto sq = mul<double>(nullptr, y, y);
                          return mean_all<double>(nullptr, sq)->item();
                      }));
        }
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "max rel err %.2e (%s)", worst,
                  worst_site.substr(0, 80).c_str());
    return {worst < 1e-3, buf};
}

// ---------- criterion 3 ----------
Verdict channel_split_law() {
    for (std::int64_t c = 1; c <= 1024; ++c) {
        for (int gi = 0; gi <= 100; ++gi) {
            const double gamma = static_cast<double>(gi) / 100.0;
            const auto s = split_channels(c, gamma);
            const auto expected =
                static_cast<std::int64_t>(std::floor(gamma * static_cast<double>(c)));
            if (s.c_shared != expected || s.c_shared + s.c_specific != c) {
                return {false, "floor mismatch at C_out=" + std::to_string(c) +
                                   " gamma=" + std::to_string(gamma)};
            }
        }
    }
    // gamma=1 collapses to hard sharing: no task branches, and with copied
    // weights the module equals a single shared conv
    EtrOptions o1;
    o1.c_in = 8;
    o1.c_out = 16;
    o1.gamma = 1.0;
    o1.tasks = 3;
    o1.shared_nlp = false;
    o1.seed = 5;
    EtrModule hard(o1);
    if (!hard.task_convs().empty()) return {false, "gamma=1 still has task branches"};
    auto plain = make_conv3x3<float>(8, 16, 123);
    hard.shared_conv().w->data = plain.w->data;
    hard.shared_conv().b->data = plain.b->data;
    auto x = rand_uniform<float>(Shape{2, 8, 9, 9}, 6, -1, 1);
    ConvSpec pad1;
    pad1.pad = 1;
    auto ref = conv2d<float>(nullptr, x, plain.w, plain.b, pad1);
    for (int t = 0; t < 3; ++t) {
        if (!oracle::close(*hard.forward(nullptr, x, t), *ref, 1e-6)) {
            return {false, "gamma=1 does not equal the hard-sharing conv"};
        }
    }
    // gamma=0 collapses to single-task structure: no shared branch
    EtrOptions o0 = o1;
    o0.gamma = 0.0;
    o0.tasks = 1;
    EtrModule single(o0);
    if (single.shared_learnable_count() != 0) return {false, "gamma=0 still has a shared branch"};
    if (single.total_learnable_count() != 16 * 8 * 9 + 16) {
        return {false, "gamma=0 single-task count differs from a plain conv"};
    }
    return {true, "1024 x 101 grid + endpoint collapses"};
}

// ---------- criterion 4 ----------
Verdict gradient_isolation() {
    for (int tasks : {2, 3, 5}) {
        for (double gamma : {0.25, 0.5, 0.9}) {
            EtrOptions opt;
            opt.c_in = 4;
            opt.c_out = 8;
            opt.gamma = gamma;
            opt.tasks = tasks;
            opt.shared_nlp = true;
            opt.seed = 7;
            EtrModule m(opt);
            ParamRegistry reg;
            m.register_params(reg, "etr");
            Adam adam(AdamConfig{1e-3});
            auto x = rand_uniform<float>(Shape{2, 4, 6, 6}, 8, -1, 1);
            for (int active = 0; active < tasks; ++active) {
                std::vector<std::vector<float>> before;
                for (int t = 0; t < tasks; ++t) {
                    if (t == active) continue;
                    for (const auto* e : reg.task_only(t)) before.push_back(e->tensor->data);
                }
                Tape tape;
                auto y = m.forward(&tape, x, active);
                tape.backward(mean_all(&tape, mul(&tape, y, y)));
                const auto rep = grad_isolation_check(reg, tasks, active);
                for (int t = 0; t < tasks; ++t) {
                    if (t != active && rep.task_linf[static_cast<std::size_t>(t)] != 0.0) {
                        return {false, "nonzero inactive gradient (T=" + std::to_string(tasks) +
                                           ", gamma=" + std::to_string(gamma) + ")"};
                    }
                }
                adam.step(reg.scope(active));
                reg.zero_grads();
                std::size_t i = 0;
                for (int t = 0; t < tasks; ++t) {
                    if (t == active) continue;
                    for (const auto* e : reg.task_only(t)) {
                        if (e->tensor->data != before[i++]) {
                            return {false, "inactive branch changed after step (T=" +
                                               std::to_string(tasks) + ")"};
                        }
                    }
                }
            }
        }
    }
    return {true, "T in {2,3,5} x gamma in {0.25,0.5,0.9}, exact zeros and bitwise params"};
}

// ---------- criterion 5 ----------
Verdict non_learnable_contract() {
    NlpLayer layer(default_primitive_set(), 4, 8, 3);
    ParamRegistry reg;
    layer.register_params(reg, "nlp", kSharedTask);
    Adam adam(AdamConfig{1e-2});
    const auto conv_before = layer.primitives()[1].conv_weight()->data;
    const auto noise_before = layer.primitives()[2].noise_mask(6, 6)->data;
    auto x = rand_uniform<float>(Shape{2, 4, 6, 6}, 21, -1, 1);
    for (int step = 0; step < 100; ++step) {
        Tape tape;
        auto y = layer.forward(&tape, x);
        tape.backward(mean_all(&tape, mul(&tape, y, y)));
        adam.step(reg.scope(kSharedTask));
        reg.zero_grads();
    }
    if (layer.primitives()[1].conv_weight()->data != conv_before ||
        layer.primitives()[2].noise_mask(6, 6)->data != noise_before) {
        return {false, "frozen state changed during training"};
    }
    auto rng = make_rng(31);
    for (int i = 0; i < 10; ++i) {
        std::uniform_int_distribution<std::int64_t> cdist(1, 16);
        std::uniform_int_distribution<std::int64_t> mdist(1, 4);
        std::uniform_int_distribution<int> kdist(1, 5);
        const std::int64_t c_in = cdist(rng);
        const std::int64_t c_out = c_in * mdist(rng);
        const int k = kdist(rng);
        std::vector<PrimitiveSpec> specs;
        for (int p = 0; p < k; ++p) {
            PrimitiveSpec s;
            s.kind = static_cast<PrimitiveKind>(p % 5);
            s.kernel = (s.kind == PrimitiveKind::avg_pool || s.kind == PrimitiveKind::max_pool)
                           ? 5
                           : 3;
            specs.push_back(s);
        }
        NlpLayer l(specs, c_in, c_out, 1000 + i);
        if (l.learnable_count() != static_cast<std::int64_t>(k) * c_out + c_out) {
            return {false, "learnable count != k*C_out + C_out for C_in=" +
                               std::to_string(c_in) + " C_out=" + std::to_string(c_out) +
                               " k=" + std::to_string(k)};
        }
    }
    return {true, "bitwise-frozen state after 100 steps; 10 random count checks"};
}

// ---------- criterion 6 ----------
Verdict oracle_equivalence() {
    // conv2d
    {
        auto x = rand_uniform<float>(Shape{4, 8, 16, 16}, 41, -1, 1);
        auto w = rand_uniform<float>(Shape{8, 4, 3, 3}, 42, -1, 1);
        auto b = rand_uniform<float>(Shape{1, 8, 1, 1}, 43, -1, 1);
        ConvSpec spec;
        spec.pad = 1;
        spec.groups = 2;
        auto got = conv2d<float>(nullptr, x, w, b, spec);
        auto ref = oracle::conv2d_naive(*x, *w, b.get(), 1, 1, 2);
        if (!oracle::close(*got, *ref, 1e-6)) return {false, "conv2d vs loop oracle"};
    }
    // pool2d
    {
        auto x = rand_uniform<float>(Shape{4, 8, 16, 16}, 44, -1, 1);
        for (bool is_max : {false, true}) {
            auto got = pool2d<float>(nullptr, x, is_max ? PoolKind::max : PoolKind::avg, 3, 1, 1);
            auto ref = oracle::pool2d_naive(*x, is_max, 3, 1, 1);
            if (!oracle::close(*got, *ref, 1e-6)) return {false, "pool2d vs loop oracle"};
        }
    }
    // channel_shuffle
    {
        auto x = rand_uniform<float>(Shape{2, 8, 5, 5}, 45, -1, 1);
        auto got = channel_shuffle<float>(nullptr, x, 4);
        auto ref = oracle::channel_shuffle_naive(*x, 4);
        if (got->data != ref->data) return {false, "channel_shuffle vs index-map oracle"};
    }
    // nlp_forward and etr_forward against the double-precision straight line
    {
        EtrOptions opt;
        opt.c_in = 8;
        opt.c_out = 8;
        opt.gamma = 0.5;
        opt.tasks = 2;
        opt.shared_nlp = true;
        opt.seed = 46;
        EtrModule m(opt);
        EtrModuleT<double> twin(opt);
        const auto& sl = m.shared_nlp();
        const auto& dl = twin.shared_nlp();
        copy_cast(*dl.combiner_weight(), *sl.combiner_weight());
        copy_cast(*dl.combiner_bias(), *sl.combiner_bias());
        for (std::size_t i = 0; i < sl.primitives().size(); ++i) {
            if (sl.primitives()[i].conv_weight()) {
                copy_cast(*dl.primitives()[i].conv_weight(), *sl.primitives()[i].conv_weight());
            }
            if (sl.primitives()[i].spec().kind == PrimitiveKind::perturbation) {
                copy_cast(*dl.primitives()[i].noise_mask(16, 16),
                          *sl.primitives()[i].noise_mask(16, 16));
            }
        }
        for (std::size_t t = 0; t < m.task_convs().size(); ++t) {
            copy_cast(*twin.task_convs()[t].w, *m.task_convs()[t].w);
            copy_cast(*twin.task_convs()[t].b, *m.task_convs()[t].b);
        }
        auto x64 = rand_uniform<double>(Shape{4, 8, 16, 16}, 47, -1, 1);
        auto x32 = clone_cast<float>(*x64);

        // nlp_forward: explicit concat + shuffle + grouped 1x1 in doubles
        {
            auto got = m.shared_nlp().forward(nullptr, x32);
            const std::int64_t k = dl.k();
            auto cat = make_tensor<double>(Shape{4, 8 * k, 16, 16});
            for (std::int64_t p = 0; p < k; ++p) {
                auto f = dl.primitives()[static_cast<std::size_t>(p)].forward(nullptr, x64);
                for (std::int64_t n = 0; n < 4; ++n)
                    for (std::int64_t c = 0; c < 8; ++c)
                        for (std::int64_t h = 0; h < 16; ++h)
                            for (std::int64_t w = 0; w < 16; ++w)
                                cat->at(n, p * 8 + c, h, w) = f->at(n, c, h, w);
            }
            auto shuffled = oracle::channel_shuffle_naive(*cat, k);
            auto ref64 = oracle::grouped_1x1_naive(*shuffled, *dl.combiner_weight(),
                                                   *dl.combiner_bias(), dl.combiner_groups());
            auto ref = clone_cast<float>(*ref64);
            if (!oracle::close(*got, *ref, 1e-5)) return {false, "nlp_forward vs oracle"};
        }
        // etr_forward: shared + task conv + concat in doubles
        for (int task = 0; task < 2; ++task) {
            auto got = m.forward(nullptr, x32, task);
            auto shared = dl.forward(nullptr, x64);
            auto specific = oracle::conv2d_naive(*x64, *twin.task_convs()[task].w,
                                                 twin.task_convs()[task].b.get(), 1, 1, 1);
            auto ref64 = make_tensor<double>(Shape{4, 8, 16, 16});
            const auto cs = m.split().c_shared;
            for (std::int64_t n = 0; n < 4; ++n)
                for (std::int64_t c = 0; c < 8; ++c)
                    for (std::int64_t h = 0; h < 16; ++h)
                        for (std::int64_t w = 0; w < 16; ++w)
                            ref64->at(n, c, h, w) = c < cs ? shared->at(n, c, h, w)
                                                           : specific->at(n, c - cs, h, w);
            auto ref = clone_cast<float>(*ref64);
            if (!oracle::close(*got, *ref, 1e-5)) return {false, "etr_forward vs oracle"};
        }
    }
    return {true, "conv2d, pool2d, channel_shuffle, nlp_forward, etr_forward"};
}

// ---------- criterion 7 ----------
GradSampleMatrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    GradSampleMatrix m;
    auto rng = make_rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<double> row(cols);
        for (auto& v : row) v = dist(rng);
        m.add_row(row);
    }
    return m;
}

Verdict cka_suite() {
    const auto x = random_matrix(8, 5, 61);
    if (std::abs(linear_cka(x, x) - 1.0) > 1e-9) return {false, "self-similarity"};
    auto scaled = x;
    for (auto& v : scaled.data) v *= 2.5;
    if (std::abs(linear_cka(x, scaled) - 1.0) > 1e-8) return {false, "scale invariance"};

    // orthogonal transform of the columns via Gram-Schmidt
    const std::size_t p = 5;
    auto q = random_matrix(p, p, 62);
    std::vector<std::vector<double>> basis;
    for (std::size_t i = 0; i < p; ++i) {
        std::vector<double> v(q.data.begin() + i * p, q.data.begin() + (i + 1) * p);
        for (const auto& u : basis) {
            double dot = 0;
            for (std::size_t j = 0; j < p; ++j) dot += u[j] * v[j];
            for (std::size_t j = 0; j < p; ++j) v[j] -= dot * u[j];
        }
        double norm = 0;
        for (double vj : v) norm += vj * vj;
        norm = std::sqrt(norm);
        for (auto& vj : v) vj /= norm;
        basis.push_back(v);
    }
    GradSampleMatrix rotated;
    for (std::size_t r = 0; r < x.rows; ++r) {
        std::vector<double> row(p, 0.0);
        for (std::size_t j = 0; j < p; ++j)
            for (std::size_t k = 0; k < p; ++k) row[j] += x.at(r, k) * basis[j][k];
        rotated.add_row(row);
    }
    if (std::abs(linear_cka(x, rotated) - 1.0) > 1e-8) return {false, "orthogonal invariance"};

    for (int i = 0; i < 100; ++i) {
        const auto a = random_matrix(8, 5, 7000 + i);
        const auto b = random_matrix(8, 7, 8000 + i);
        if (std::abs(linear_cka(a, b) - oracle::cka_hsic_naive(a, b)) > 1e-10) {
            return {false, "HSIC oracle disagreement at pair " + std::to_string(i)};
        }
    }

    // duplicate-task construction on a real network
    const auto root = fs::temp_directory_path() / "etrnlp_acceptance" / "cka";
    fs::remove_all(root);
    ShapesMtConfig dcfg;
    dcfg.width = 16;
    dcfg.height = 16;
    dcfg.num_samples = 160;
    dcfg.tasks = 2;
    dcfg.coupling = 1.0;  // task 1 labels copy task 0
    generate_shapes_mt(dcfg, 9, root);
    const auto data = ShapesMtDataset::load(root);
    ArchConfig arch;
    arch.widths = {4, 8, 8};
    arch.stage_kinds = {LayerKind::conv, LayerKind::conv, LayerKind::conv};
    arch.tasks = 2;
    Network net(arch, 3);
    net.registry().find("head1.w")->tensor->data = net.registry().find("head0.w")->tensor->data;
    net.registry().find("head1.b")->tensor->data = net.registry().find("head0.b")->tensor->data;
    const auto mats = task_pair_cka(net, data, {"stage2"}, 8, 8);
    if (!(mats[0].at(0, 1) > 0.99)) {
        return {false, "duplicate-task off-diagonal " + std::to_string(mats[0].at(0, 1))};
    }
    return {true, "self/scale/orthogonal invariance, 100 HSIC pairs, duplicate tasks"};
}

// ---------- criterion 8 ----------
Verdict end_to_end_directional() {
    const auto root = fs::temp_directory_path() / "etrnlp_acceptance" / "e2e";
    fs::remove_all(root);
    ShapesMtConfig dcfg;
    dcfg.width = 32;
    dcfg.height = 32;
    dcfg.num_samples = 640;
    dcfg.tasks = 4;
    dcfg.coupling = 0.35;
    dcfg.noise_std = 0.05;
    generate_shapes_mt(dcfg, 2024, root / "data");
    const auto data = ShapesMtDataset::load(root / "data");

    ArchConfig conv_arch;
    conv_arch.widths = {16, 32, 64};
    conv_arch.stage_kinds = {LayerKind::conv, LayerKind::conv, LayerKind::conv};
    conv_arch.tasks = 4;
    ArchConfig etr_arch = conv_arch;
    etr_arch.stage_kinds = {LayerKind::etr_nlp, LayerKind::etr_nlp, LayerKind::etr_nlp};
    etr_arch.gamma = 0.9;
    etr_arch.primitives = default_primitive_set();

    TrainConfig tc;
    tc.epochs = 5;
    tc.batch_size = 32;
    tc.lr = 2e-3;
    tc.strategy = UpdateStrategy::steady_state;

    const std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::vector<double> baseline_f, dps;
    std::int64_t conv_params = 0, etr_params = 0;
    for (auto seed : seeds) {
        TrainConfig tcs = tc;
        tcs.seed = seed;
        Network conv_net(conv_arch, seed);
        Adam conv_opt(AdamConfig{tc.lr});
        train_network(conv_net, data, tcs, conv_opt);
        const auto conv_eval = evaluate(conv_net, data, Split::test);
        conv_params = conv_net.registry().total_count();

        Network etr_net(etr_arch, seed);
        Adam etr_opt(AdamConfig{tc.lr});
        train_network(etr_net, data, tcs, etr_opt);
        const auto etr_eval = evaluate(etr_net, data, Split::test);
        etr_params = etr_net.registry().total_count();

        baseline_f.push_back(conv_eval.record.tasks[0].metrics[2].value);  // macro f_score
        dps.push_back(delta_p(etr_eval.record, conv_eval.record));
    }
    std::vector<double> sorted_dps = dps;
    std::sort(sorted_dps.begin(), sorted_dps.end());
    const double median_dp = sorted_dps[2];
    const double min_f = *std::min_element(baseline_f.begin(), baseline_f.end());
    const bool pass_a = min_f > 0.5 + 0.15;
    const bool pass_b = median_dp > 0.0;
    const bool pass_c = etr_params < conv_params;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "baseline macro-F min %.3f (need >0.65); median Dp %+.2f%% "
                  "(per-seed %+.2f/%+.2f/%+.2f/%+.2f/%+.2f); params %lld vs %lld",
                  min_f, median_dp, dps[0], dps[1], dps[2], dps[3], dps[4],
                  static_cast<long long>(etr_params), static_cast<long long>(conv_params));
    return {pass_a && pass_b && pass_c, buf};
}

// ---------- criterion 9 ----------
struct ToyModel {
    ParamRegistry reg;
    TensorPtr s, b[2];
    ToyModel(float s0, float b0, float b1) {
        s = make_tensor<float>(Shape{1, 1, 1, 1}, s0);
        b[0] = make_tensor<float>(Shape{1, 1, 1, 1}, b0);
        b[1] = make_tensor<float>(Shape{1, 1, 1, 1}, b1);
        reg.add("shared.s", s, kSharedTask);
        reg.add("task0.b", b[0], 0);
        reg.add("task1.b", b[1], 1);
    }
    int tasks() const { return 2; }
    ParamRegistry& registry() { return reg; }
    TensorPtr task_loss(Tape& tape, const Batch& batch, int t) {
        auto x = scalar_tensor(batch.attr[0][0]);
        auto y = scalar_tensor(batch.attr[1][0]);
        auto diff = sub(&tape, add(&tape, mul(&tape, s, x), b[t]), y);
        return sum_all(&tape, mul(&tape, diff, diff));
    }
};

Verdict training_strategy_contract() {
    const auto root = fs::temp_directory_path() / "etrnlp_acceptance" / "strategy";
    fs::remove_all(root);
    ShapesMtConfig dcfg;
    dcfg.width = 16;
    dcfg.height = 16;
    dcfg.num_samples = 40;
    dcfg.tasks = 1;
    generate_shapes_mt(dcfg, 5, root);
    const auto data = ShapesMtDataset::load(root);

    ArchConfig arch;
    arch.widths = {4, 8, 8};
    arch.stage_kinds = {LayerKind::etr_nlp, LayerKind::etr_nlp, LayerKind::etr_nlp};
    arch.gamma = 0.5;
    arch.tasks = 1;
    auto run = [&](UpdateStrategy strategy) {
        Network net(arch, 3);
        Adam adam(AdamConfig{1e-3});
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 8;
        tc.lr = 1e-3;
        tc.strategy = strategy;
        tc.seed = 3;
        auto out = train_network(net, data, tc, adam);
        std::vector<float> flat;
        for (const auto& [name, t] : out.final_state)
            flat.insert(flat.end(), t->data.begin(), t->data.end());
        return flat;
    };
    if (run(UpdateStrategy::steady_state) != run(UpdateStrategy::synchronized)) {
        return {false, "T=1 strategies diverge"};
    }

    // synchronized: shared parameters constant within a round (observed inside
    // a manually driven round), stepped only at the boundary
    {
        ToyModel model(0.5f, 0.1f, -0.2f);
        Adam adam(AdamConfig{1e-2});
        Batch b0, b1;
        b0.attr = {{1.0f}, {0.5f}};
        b1.attr = {{-0.5f}, {0.25f}};
        const float s_before = model.s->data[0];
        model.reg.zero_grads();
        for (int t = 0; t < 2; ++t) {
            Tape tape;
            auto loss = model.task_loss(tape, t == 0 ? b0 : b1, t);
            tape.backward(loss);
            adam.step(model.reg.task_only(t));
            if (model.s->data[0] != s_before) {
                return {false, "shared parameter moved mid-round"};
            }
        }
        // hand-computed accumulated gradient: d(L0+L1)/ds = 2 d0 x0 + 2 d1 x1
        const float d0 = 0.5f * 1.0f + 0.1f - 0.5f;
        const float d1 = 0.5f * -0.5f + -0.2f - 0.25f;
        const float expected = 2.0f * d0 * 1.0f + 2.0f * d1 * -0.5f;
        if (model.s->grad[0] != expected) {
            return {false, "accumulated shared gradient differs from hand arithmetic"};
        }
        adam.step(model.reg.shared_only());
        if (model.s->data[0] == s_before) return {false, "shared parameter never stepped"};
    }
    return {true, "T=1 bitwise equality; in-round constancy; exact hand-checked accumulation"};
}

// ---------- criterion 10 ----------
Verdict reproducibility_io() {
    const auto root = fs::temp_directory_path() / "etrnlp_acceptance" / "repro";
    fs::remove_all(root);
    fs::create_directories(root);

    // dataset byte-determinism
    ShapesMtConfig dcfg;
    dcfg.width = 16;
    dcfg.height = 16;
    dcfg.num_samples = 60;
    dcfg.tasks = 2;
    generate_shapes_mt(dcfg, 77, root / "data_a");
    generate_shapes_mt(dcfg, 77, root / "data_b");
    if (file_checksum(root / "data_a" / "manifest.json") !=
        file_checksum(root / "data_b" / "manifest.json")) {
        return {false, "dataset generation not byte-deterministic"};
    }

    // tensor file and checkpoint round trips
    {
        auto t = rand_uniform<float>(Shape{2, 3, 4, 5}, 3, -10, 10);
        write_tensor_file(root / "t.tnsr", *t);
        auto back = load_tensor_file(root / "t.tnsr");
        if (back->data != t->data) return {false, "tensor file round trip"};
        NamedTensors ck{{"a", t}, {"b", rand_uniform<float>(Shape{1, 2, 3, 4}, 4, -1, 1)}};
        save_checkpoint(root / "c.etrn", ck);
        const auto loaded = load_checkpoint(root / "c.etrn");
        save_checkpoint(root / "c2.etrn", loaded);
        if (file_checksum(root / "c.etrn") != file_checksum(root / "c2.etrn")) {
            return {false, "checkpoint round trip not bit-exact"};
        }
    }

    // identical config+seed => bitwise-identical checkpoints and history CSVs
    ExperimentConfig cfg;
    cfg.name = "repro";
    cfg.dataset.path = (root / "data_a").string();
    cfg.arch.widths = {4, 8, 8};
    cfg.arch.stage_kinds = {LayerKind::etr_nlp, LayerKind::etr_nlp, LayerKind::etr_nlp};
    cfg.arch.gamma = 0.9;
    cfg.arch.tasks = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.lr = 1e-3;
    cfg.seeds = {0};
    cfg.output_dir = (root / "run_a").string();
    cli::cmd_train(cfg, /*force=*/true, /*resume=*/false);
    cfg.output_dir = (root / "run_b").string();
    cli::cmd_train(cfg, /*force=*/true, /*resume=*/false);
    const auto ck_a = file_checksum(root / "run_a" / "seed_0" / "checkpoint.etrn");
    const auto ck_b = file_checksum(root / "run_b" / "seed_0" / "checkpoint.etrn");
    const auto h_a = file_checksum(root / "run_a" / "seed_0" / "history.csv");
    const auto h_b = file_checksum(root / "run_b" / "seed_0" / "history.csv");
    if (ck_a != ck_b) return {false, "checkpoints differ across identical runs"};
    if (h_a != h_b) return {false, "history CSVs differ across identical runs"};
    return {true, "bitwise checkpoints/history, bit-exact containers, deterministic data"};
}

}  // namespace

int main() {
    std::printf("ETR-NLP acceptance suite\n");
    criterion(1, "delta_p reproduction from published values", delta_p_reproduction);
    criterion(2, "finite-difference gradient correctness", gradient_correctness);
    criterion(3, "channel-split law and endpoint collapses", channel_split_law);
    criterion(4, "gradient isolation across task branches", gradient_isolation);
    criterion(5, "non-learnable contract and NLP parameter counts", non_learnable_contract);
    criterion(6, "oracle equivalence of optimized paths", oracle_equivalence);
    criterion(7, "linear CKA suite", cka_suite);
    criterion(8, "end-to-end directional check on ShapesMT", end_to_end_directional);
    criterion(9, "training-strategy contract", training_strategy_contract);
    criterion(10, "reproducibility and I/O round trips", reproducibility_io);
    if (g_failures == 0) {
        std::printf("all criteria passed\n");
    } else {
        std::printf("%d criteria FAILED\n", g_failures);
    }
    return g_failures == 0 ? 0 : 1;
}

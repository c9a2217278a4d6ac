#pragma once

// Experiment runner: scene suites, simulated interactive sessions, MAE/RMSE.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <exception>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "icount/adaptation.hpp"
#include "icount/counter.hpp"
#include "icount/feedback.hpp"
#include "icount/grid.hpp"
#include "icount/io.hpp"
#include "icount/ipse.hpp"

namespace icount {

// ---- metrics ------------------------------------------------------------------

inline void check_metric_input(std::span<const double> preds, std::span<const double> gts) {
    if (preds.empty() || preds.size() != gts.size())
        throw std::invalid_argument("metric: inputs must be non-empty and of equal length");
}

inline double metric_mae(std::span<const double> preds, std::span<const double> gts) {
    check_metric_input(preds, gts);
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - gts[i]);
    return s / double(preds.size());
}

inline double metric_rmse(std::span<const double> preds, std::span<const double> gts) {
    check_metric_input(preds, gts);
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - gts[i]) * (preds[i] - gts[i]);
    return std::sqrt(s / double(preds.size()));
}

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;  // standard error of the mean; 0 for a single sample
};

inline MeanSe mean_se(std::span<const double> xs) {
    MeanSe out;
    if (xs.empty()) return out;
    for (double x : xs) out.mean += x;
    out.mean /= double(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - out.mean) * (x - out.mean);
        out.se = std::sqrt(ss / double(xs.size() - 1)) / std::sqrt(double(xs.size()));
    }
    return out;
}

// ---- configuration -------------------------------------------------------------

struct SuiteSpec {
    int scenes = 50;
    int min_size = 128;
    int max_size = 256;
    int size_step = 32;
    int min_objects = 5;
    int max_objects = 15;
    double dot_sigma = 2.0;
    int margin = 6;
    std::uint64_t scene_seed = 2024;
};

enum class InteractionMode { consecutive, non_consecutive };

struct ExperimentConfig {
    SuiteSpec suite;
    std::vector<std::uint64_t> seeds = {5, 10, 15};
    Miscalibration miscal;
    bool perfect_counter = false;  // ground truth := the unadapted prediction
    Strategy strategy = Strategy::random;
    NoiseLevel noise = NoiseLevel::none;
    TruthMode truth = TruthMode::integral;
    RangeFamily family;
    int interactions = 5;  // K
    InteractionMode mode = InteractionMode::consecutive;
    AdaptConfig adapt;
    SegmentationConfig segmentation;
    CounterSpec counter{6, 4, 25.0, 0};
    int threads = 0;  // 0: hardware concurrency
    std::string csv_path;
    std::string json_path;

    void validate() const {
        if (interactions < 0) throw std::invalid_argument("ExperimentConfig: interactions must be >= 0");
        if (seeds.empty()) throw std::invalid_argument("ExperimentConfig: need at least one seed");
        if (suite.scenes < 1) throw std::invalid_argument("ExperimentConfig: need at least one scene");
        if (suite.min_size < 8 || suite.min_size > suite.max_size)
            throw std::invalid_argument("ExperimentConfig: bad scene size range");
        if (suite.min_objects < 0 || suite.min_objects > suite.max_objects)
            throw std::invalid_argument("ExperimentConfig: bad object count range");
        adapt.validate();
        segmentation.validate();
        family.validate();
        miscal.validate();
    }
};

inline const std::vector<std::uint64_t>& full_protocol_seeds() {
    static const std::vector<std::uint64_t> s = {5, 10, 15, 20, 25};
    return s;
}

inline ExperimentConfig experiment_from_json(const json& j) {
    ExperimentConfig c;
    if (j.contains("suite")) {
        const auto& s = j["suite"];
        c.suite.scenes = s.value("scenes", c.suite.scenes);
        c.suite.min_size = s.value("min_size", c.suite.min_size);
        c.suite.max_size = s.value("max_size", c.suite.max_size);
        c.suite.size_step = s.value("size_step", c.suite.size_step);
        c.suite.min_objects = s.value("min_objects", c.suite.min_objects);
        c.suite.max_objects = s.value("max_objects", c.suite.max_objects);
        c.suite.dot_sigma = s.value("dot_sigma", c.suite.dot_sigma);
        c.suite.margin = s.value("margin", c.suite.margin);
        c.suite.scene_seed = s.value("scene_seed", c.suite.scene_seed);
    }
    if (j.value("full_protocol", false)) c.seeds = full_protocol_seeds();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("miscalibration")) c.miscal = miscalibration_from_json(j["miscalibration"]);
    c.perfect_counter = j.value("perfect_counter", c.perfect_counter);
    if (j.contains("strategy")) c.strategy = strategy_from_string(j["strategy"].get<std::string>());
    if (j.contains("noise")) c.noise = noise_from_string(j["noise"].get<std::string>());
    if (j.contains("truth"))
        c.truth = enum_from_string<TruthMode>(j["truth"].get<std::string>(),
                                              {{"integral", TruthMode::integral}, {"dot_centers", TruthMode::dot_centers}});
    if (j.contains("range_family")) from_json_into(j["range_family"], c.family);
    c.interactions = j.value("interactions", c.interactions);
    if (j.contains("mode"))
        c.mode = enum_from_string<InteractionMode>(
            j["mode"].get<std::string>(),
            {{"consecutive", InteractionMode::consecutive}, {"non_consecutive", InteractionMode::non_consecutive}});
    if (j.contains("adapt")) from_json_into(j["adapt"], c.adapt);
    if (j.contains("segmentation")) from_json_into(j["segmentation"], c.segmentation);
    if (j.contains("counter")) from_json_into(j["counter"], c.counter);
    c.threads = j.value("threads", c.threads);
    if (j.contains("output")) {
        c.csv_path = j["output"].value("csv", c.csv_path);
        c.json_path = j["output"].value("json", c.json_path);
    }
    c.validate();
    return c;
}

inline json to_json(const ExperimentConfig& c) {
    return {{"suite",
             {{"scenes", c.suite.scenes},
              {"min_size", c.suite.min_size},
              {"max_size", c.suite.max_size},
              {"size_step", c.suite.size_step},
              {"min_objects", c.suite.min_objects},
              {"max_objects", c.suite.max_objects},
              {"dot_sigma", c.suite.dot_sigma},
              {"margin", c.suite.margin},
              {"scene_seed", c.suite.scene_seed}}},
            {"seeds", c.seeds},
            {"miscalibration", to_json(c.miscal)},
            {"perfect_counter", c.perfect_counter},
            {"strategy", to_string(c.strategy)},
            {"noise", to_string(c.noise)},
            {"truth", c.truth == TruthMode::integral ? "integral" : "dot_centers"},
            {"range_family", {{"count_limit", c.family.count_limit}, {"interval", c.family.interval}}},
            {"interactions", c.interactions},
            {"mode", c.mode == InteractionMode::consecutive ? "consecutive" : "non_consecutive"},
            {"adapt", to_json(c.adapt)},
            {"segmentation", to_json(c.segmentation)},
            {"counter",
             {{"channels", c.counter.channels},
              {"upsample", c.counter.upsample},
              {"feature_gain", c.counter.feature_gain}}}};
}

// ---- scenes ---------------------------------------------------------------------

inline DotScene generate_scene(const SuiteSpec& spec, int scene_id) {
    std::seed_seq seq{std::uint64_t(spec.scene_seed), std::uint64_t(scene_id), std::uint64_t(0x5ce9e)};
    std::mt19937_64 rng(seq);
    const int steps = std::max(0, (spec.max_size - spec.min_size) / std::max(1, spec.size_step));
    std::uniform_int_distribution<int> size_pick(0, steps);
    DotScene s;
    s.height = spec.min_size + spec.size_step * size_pick(rng);
    s.width = spec.min_size + spec.size_step * size_pick(rng);
    s.sigma = spec.dot_sigma;
    std::uniform_int_distribution<int> count(spec.min_objects, spec.max_objects);
    const int n = count(rng);
    std::uniform_real_distribution<double> ux(spec.margin, s.width - spec.margin);
    std::uniform_real_distribution<double> uy(spec.margin, s.height - spec.margin);
    for (int i = 0; i < n; ++i) s.dots.push_back({ux(rng), uy(rng)});
    return s;
}

/// A scene with its ground truth and (possibly miscalibrated) counter.
struct SceneCase {
    int scene_id = 0;
    DotScene scene;
    DensityGrid gt;
    ToyCounter counter;
    Miscalibration miscal;
};

inline SceneCase make_scene_case(const ExperimentConfig& cfg, int scene_id) {
    SceneCase sc;
    sc.scene_id = scene_id;
    sc.scene = generate_scene(cfg.suite, scene_id);
    sc.gt = render_density(sc.scene);
    sc.miscal = cfg.miscal;
    if (sc.miscal.mode == Miscalibration::Mode::local_blob &&
        (sc.miscal.center_x < 0.0 || sc.miscal.center_y < 0.0)) {
        std::seed_seq seq{std::uint64_t(cfg.suite.scene_seed), std::uint64_t(scene_id), std::uint64_t(0xb10b)};
        std::mt19937_64 rng(seq);
        const double pad = 2.0 * sc.miscal.radius;
        std::uniform_real_distribution<double> ux(pad, sc.scene.width - pad), uy(pad, sc.scene.height - pad);
        sc.miscal.center_x = ux(rng);
        sc.miscal.center_y = uy(rng);
    }
    CounterSpec spec = cfg.counter;
    spec.seed = cfg.counter.seed ^ (cfg.suite.scene_seed * 1000003ULL + std::uint64_t(scene_id));
    sc.counter = synthesize_counter(sc.gt, sc.miscal, spec);
    if (cfg.perfect_counter) sc.gt = sc.counter.forward(sc.counter.identity_params());
    return sc;
}

// ---- sessions --------------------------------------------------------------------

struct SessionRow {
    int scene_id = 0;
    std::uint64_t seed = 0;
    int iteration = 0;
    double pred_total = 0.0;
    double gt_total = 0.0;
    double seg_ms = 0.0;
    double adapt_ms = 0.0;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
    std::seed_seq seq{a, b, c};
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    return (std::uint64_t(words[0]) << 32) | words[1];
}

}  // namespace detail

/// Runs K simulated interactions on one scene. Row 0 is the unadapted prediction.
inline std::vector<SessionRow> run_session(const SceneCase& sc, const ExperimentConfig& cfg, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    const auto& counter = sc.counter;
    const double gt_total = sc.gt.total();
    const std::vector<Dot>* dots = cfg.truth == TruthMode::dot_centers ? &sc.scene.dots : nullptr;

    SimulatedUser user(detail::mix_seed(seed, std::uint64_t(sc.scene_id), 1));
    user.strategy = cfg.strategy;
    user.noise = cfg.noise;
    user.family = cfg.family;
    user.truth_mode = cfg.truth;

    std::vector<SessionRow> rows;
    auto record = [&](int k, const DensityGrid& pred, double seg_ms, double adapt_ms) {
        rows.push_back({sc.scene_id, seed, k, pred.total(), gt_total, seg_ms, adapt_ms});
    };

    const auto identity = counter.identity_params();
    DensityGrid pred = counter.forward(identity);
    record(0, pred, 0.0, 0.0);

    SegmentationConfig seg_cfg = cfg.segmentation;
    Feedback omega;

    if (cfg.mode == InteractionMode::consecutive) {
        RefinementParams params = identity;
        AdamState adam = AdamState::zeros_like(params);
        for (int k = 1; k <= cfg.interactions; ++k) {
            auto t0 = clock::now();
            seg_cfg.seed = detail::mix_seed(seed, std::uint64_t(sc.scene_id), std::uint64_t(k) + 2);
            const auto seg = segment_full(pred, seg_cfg);
            const double seg_ms = detail::elapsed_ms(t0);
            user.new_segmentation();
            try {
                user.interact(seg.regions, sc.gt, pred, omega, k, dots);
            } catch (const RegionsExhausted&) {
                break;
            }
            auto t1 = clock::now();
            pred = adapt(counter, params, adam, omega, cfg.adapt).prediction;
            record(k, pred, seg_ms, detail::elapsed_ms(t1));
        }
    } else {
        auto t0 = clock::now();
        seg_cfg.seed = detail::mix_seed(seed, std::uint64_t(sc.scene_id), 2);
        const auto seg = segment_full(pred, seg_cfg);
        const double seg_ms = detail::elapsed_ms(t0);
        for (int k = 1; k <= cfg.interactions; ++k) {
            try {
                user.interact(seg.regions, sc.gt, pred, omega, k, dots);
            } catch (const RegionsExhausted&) {
                break;
            }
        }
        for (int k = 1; k <= std::min<int>(cfg.interactions, int(omega.size())); ++k) {
            Feedback first(omega.begin(), omega.begin() + k);
            RefinementParams params = identity;
            AdamState adam = AdamState::zeros_like(params);
            auto t1 = clock::now();
            auto adapted = adapt(counter, params, adam, first, cfg.adapt).prediction;
            record(k, adapted, k == 1 ? seg_ms : 0.0, detail::elapsed_ms(t1));
        }
    }

    // The simulated user stops once every region has been used; carry the last state forward.
    while (int(rows.size()) <= cfg.interactions) {
        SessionRow r = rows.back();
        r.iteration += 1;
        r.seg_ms = r.adapt_ms = 0.0;
        rows.push_back(r);
    }
    return rows;
}

// ---- suites -------------------------------------------------------------------------

struct IterationStats {
    int iteration = 0;
    MeanSe mae, rmse;
    double seg_ms = 0.0, adapt_ms = 0.0;
};

struct SuiteReport {
    std::vector<SessionRow> rows;
    std::vector<IterationStats> iterations;
    MeanSe mae_reduction;  // 1 - MAE_K / MAE_0, over seeds
    double wall_ms = 0.0;
};

/// Seed-level MAE/RMSE per iteration, then mean and standard error across seeds.
inline SuiteReport aggregate(std::vector<SessionRow> rows) {
    SuiteReport rep;
    std::map<std::uint64_t, std::map<int, std::pair<std::vector<double>, std::vector<double>>>> by_seed;
    std::map<int, std::pair<double, std::size_t>> seg, ad;
    int last = 0;
    for (const auto& r : rows) {
        auto& cell = by_seed[r.seed][r.iteration];
        cell.first.push_back(r.pred_total);
        cell.second.push_back(r.gt_total);
        seg[r.iteration].first += r.seg_ms;
        seg[r.iteration].second += 1;
        ad[r.iteration].first += r.adapt_ms;
        ad[r.iteration].second += 1;
        last = std::max(last, r.iteration);
    }
    std::vector<double> reductions;
    for (int k = 0; k <= last; ++k) {
        IterationStats st;
        st.iteration = k;
        std::vector<double> maes, rmses;
        for (auto& [seed, iters] : by_seed) {
            auto it = iters.find(k);
            if (it == iters.end()) continue;
            maes.push_back(metric_mae(it->second.first, it->second.second));
            rmses.push_back(metric_rmse(it->second.first, it->second.second));
        }
        st.mae = mean_se(maes);
        st.rmse = mean_se(rmses);
        if (seg.count(k)) st.seg_ms = seg[k].first / double(seg[k].second);
        if (ad.count(k)) st.adapt_ms = ad[k].first / double(ad[k].second);
        rep.iterations.push_back(st);
    }
    for (auto& [seed, iters] : by_seed) {
        if (!iters.count(0) || !iters.count(last)) continue;
        const double m0 = metric_mae(iters[0].first, iters[0].second);
        const double mk = metric_mae(iters[last].first, iters[last].second);
        if (m0 > 0.0) reductions.push_back(1.0 - mk / m0);
    }
    rep.mae_reduction = mean_se(reductions);
    rep.rows = std::move(rows);
    return rep;
}

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t workers = std::min<std::size_t>(n, threads > 0 ? std::size_t(threads) : hw);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

inline std::vector<SceneCase> build_scene_cases(const ExperimentConfig& cfg) {
    std::vector<SceneCase> cases(std::size_t(cfg.suite.scenes));
    detail::parallel_for(cases.size(), cfg.threads, [&](std::size_t i) { cases[i] = make_scene_case(cfg, int(i)); });
    return cases;
}

inline SuiteReport run_suite(const ExperimentConfig& cfg, const std::vector<SceneCase>& cases) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = cases.size() * cfg.seeds.size();
    std::vector<std::vector<SessionRow>> out(n);
    detail::parallel_for(n, cfg.threads, [&](std::size_t t) {
        const auto seed = cfg.seeds[t / cases.size()];
        out[t] = run_session(cases[t % cases.size()], cfg, seed);
    });
    std::vector<SessionRow> rows;
    for (auto& v : out) rows.insert(rows.end(), v.begin(), v.end());
    auto rep = aggregate(std::move(rows));
    rep.wall_ms = detail::elapsed_ms(t0);
    return rep;
}

inline SuiteReport run_suite(const ExperimentConfig& cfg) { return run_suite(cfg, build_scene_cases(cfg)); }

// ---- report output ----------------------------------------------------------------

inline std::string rows_to_csv(const std::vector<SessionRow>& rows) {
    std::ostringstream os;
    os << "scene_id,seed,iteration,pred_total,gt_total,seg_ms,adapt_ms\n";
    os << std::setprecision(10);
    for (const auto& r : rows)
        os << r.scene_id << ',' << r.seed << ',' << r.iteration << ',' << r.pred_total << ',' << r.gt_total << ','
           << r.seg_ms << ',' << r.adapt_ms << '\n';
    return os.str();
}

inline std::vector<SessionRow> rows_from_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line.rfind("scene_id,seed,iteration", 0) != 0)
        throw FormatError("results CSV: missing or unexpected header");
    std::vector<SessionRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        SessionRow r;
        char c1, c2, c3, c4, c5, c6;
        if (!(ls >> r.scene_id >> c1 >> r.seed >> c2 >> r.iteration >> c3 >> r.pred_total >> c4 >> r.gt_total >> c5 >>
              r.seg_ms >> c6 >> r.adapt_ms))
            throw FormatError("results CSV: malformed row at line " + std::to_string(lineno));
        rows.push_back(r);
    }
    return rows;
}

inline json report_to_json(const SuiteReport& rep) {
    json iters = json::array();
    for (const auto& s : rep.iterations)
        iters.push_back({{"iteration", s.iteration},
                         {"mae", s.mae.mean},
                         {"mae_se", s.mae.se},
                         {"rmse", s.rmse.mean},
                         {"rmse_se", s.rmse.se},
                         {"seg_ms", s.seg_ms},
                         {"adapt_ms", s.adapt_ms}});
    return {{"iterations", iters},
            {"mae_reduction", {{"mean", rep.mae_reduction.mean}, {"se", rep.mae_reduction.se}}},
            {"sessions", rep.rows.empty() ? 0 : rep.rows.size() / rep.iterations.size()}};
}

inline void write_report(const SuiteReport& rep, const ExperimentConfig& cfg) {
    if (!cfg.csv_path.empty()) write_text_file(cfg.csv_path, rows_to_csv(rep.rows));
    if (!cfg.json_path.empty()) {
        auto j = report_to_json(rep);
        j["config"] = to_json(cfg);
        write_text_file(cfg.json_path, j.dump(2));
    }
}

inline std::string format_report(const SuiteReport& rep) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "iter       MAE    (se)      RMSE    (se)   seg_ms  adapt_ms\n";
    for (const auto& s : rep.iterations)
        os << std::setw(4) << s.iteration << std::setw(10) << s.mae.mean << std::setw(8) << s.mae.se << std::setw(10)
           << s.rmse.mean << std::setw(8) << s.rmse.se << std::setw(9) << s.seg_ms << std::setw(10) << s.adapt_ms
           << '\n';
    os << "MAE reduction: " << 100.0 * rep.mae_reduction.mean << "% (se " << 100.0 * rep.mae_reduction.se << "%)\n";
    return os.str();
}

}  // namespace icount

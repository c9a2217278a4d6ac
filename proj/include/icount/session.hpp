#pragma once

// In-memory interaction sessions: create, inspect, submit feedback, delete.
// Transport-agnostic; the HTTP layer lives in http.hpp.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include "icount/adaptation.hpp"
#include "icount/bench.hpp"
#include "icount/counter.hpp"
#include "icount/feedback.hpp"
#include "icount/grid.hpp"
#include "icount/io.hpp"
#include "icount/ipse.hpp"

namespace icount {

/// Error carrying an HTTP-style status and a stable machine-readable code.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, std::string code, const std::string& message)
        : std::runtime_error(message), status_(status), code_(std::move(code)) {}
    int status() const { return status_; }
    const std::string& code() const { return code_; }

private:
    int status_;
    std::string code_;
};

inline json error_json(const std::string& code, const std::string& message) {
    return {{"error", {{"code", code}, {"message", message}}}};
}

struct SessionOptions {
    SegmentationConfig segmentation;
    AdaptConfig adaptation;
    RangeFamily ranges;
    CounterSpec counter{6, 4, 25.0, 0};
    double dot_radius = 4.0;  // non-maximum suppression radius for displayed dots, full-res px
};

inline void from_json_into(const json& j, SessionOptions& o) {
    if (j.contains("segmentation")) from_json_into(j["segmentation"], o.segmentation);
    if (j.contains("adaptation")) from_json_into(j["adaptation"], o.adaptation);
    if (j.contains("ranges")) from_json_into(j["ranges"], o.ranges);
    if (j.contains("counter")) from_json_into(j["counter"], o.counter);
    o.dot_radius = j.value("dot_radius", o.dot_radius);
    if (!(o.dot_radius > 0.0)) throw std::invalid_argument("dot_radius must be positive");
}

inline json to_json(const SessionOptions& o) {
    return {{"segmentation", to_json(o.segmentation)},
            {"adaptation", to_json(o.adaptation)},
            {"ranges", {{"count_limit", o.ranges.count_limit}, {"interval", o.ranges.interval}}},
            {"counter",
             {{"channels", o.counter.channels},
              {"upsample", o.counter.upsample},
              {"feature_gain", o.counter.feature_gain},
              {"seed", o.counter.seed}}},
            {"dot_radius", o.dot_radius}};
}

struct StageTimings {
    double adapt_ms = 0.0;
    double predict_ms = 0.0;
    double segment_ms = 0.0;
    double payload_ms = 0.0;
};

struct HistoryEntry {
    int iteration = 0;
    double predicted_total = 0.0;
};

struct Session {
    std::string id;
    SessionOptions options;
    ToyCounter counter;
    RefinementParams params;
    AdamState adam;
    DensityGrid gt;
    bool blind = false;

    DensityGrid prediction;
    FullSegmentation segmentation;
    std::uint32_t id_offset = 0;  // public region id = id_offset + label
    Feedback omega;
    int iteration = 0;
    std::vector<HistoryEntry> history;

    StageTimings timings;
    std::vector<double> loss_trajectory;
    double confidence = 1.0;
    StepSchedule schedule{0.0, 0};

    json payload;
    std::chrono::steady_clock::time_point last_access;
    mutable std::shared_mutex mutex;
};

namespace detail {

/// Label rows as [label, run, label, run, ...].
inline json rle_rows(const LabelMap& labels, std::uint32_t offset) {
    json rows = json::array();
    for (int y = 0; y < labels.height; ++y) {
        json row = json::array();
        int x = 0;
        while (x < labels.width) {
            const auto l = labels.at(y, x);
            int run = 1;
            while (x + run < labels.width && labels.at(y, x + run) == l) ++run;
            row.push_back(l + offset);
            row.push_back(run);
            x += run;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void resegment(Session& s) {
    const auto t0 = std::chrono::steady_clock::now();
    s.id_offset += static_cast<std::uint32_t>(s.segmentation.regions.size());
    s.segmentation = segment_full(s.prediction, s.options.segmentation);
    s.timings.segment_ms = elapsed_ms(t0);
}

inline void rebuild_payload(Session& s) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto labels = s.options.ranges.labels();
    json regions = json::array();
    for (const auto& r : s.segmentation.regions) {
        json dots = json::array();
        if (!r.pixels.empty())
            for (const auto& d : place_dots(s.prediction, r.pixels, s.options.dot_radius)) dots.push_back({d.x, d.y});
        regions.push_back({{"id", r.id + s.id_offset},
                           {"sum", r.sum},
                           {"area", r.area},
                           {"kind", to_string(r.kind)},
                           {"range_label", labels[bin_index(r.sum, s.options.ranges)]},
                           {"dots", std::move(dots)}});
    }
    json history = json::array();
    for (const auto& h : s.history) history.push_back({{"iteration", h.iteration}, {"predicted_total", h.predicted_total}});

    json p;
    p["session_id"] = s.id;
    p["iteration"] = s.iteration;
    p["height"] = s.prediction.height();
    p["width"] = s.prediction.width();
    p["predicted_total"] = s.prediction.total();
    p["blind"] = s.blind;
    if (!s.blind) p["gt_total"] = s.gt.total();
    p["ranges"] = labels;
    p["labels"] = {{"encoding", "rle-rows"}, {"rows", rle_rows(s.segmentation.labels, s.id_offset)}};
    p["regions"] = std::move(regions);
    p["feedback"] = feedback_to_json(s.omega);
    p["history"] = std::move(history);
    p["adaptation"] = {{"loss_trajectory", s.loss_trajectory},
                       {"confidence", s.confidence},
                       {"lr", s.schedule.lr},
                       {"steps", s.schedule.steps}};
    s.timings.payload_ms = elapsed_ms(t0);
    p["timings"] = {{"adapt_ms", s.timings.adapt_ms},
                    {"predict_ms", s.timings.predict_ms},
                    {"segment_ms", s.timings.segment_ms},
                    {"payload_ms", s.timings.payload_ms}};
    s.payload = std::move(p);
}

// Snapshots store the counter and ground truth as f32; sessions hold them at that
// precision from the start so a restored session is indistinguishable.
inline void round_to_float(std::vector<double>& v) {
    for (auto& x : v) x = double(float(x));
}

inline void round_to_float(ToyCounter& c, DensityGrid& gt) {
    round_to_float(c.features.values);
    round_to_float(c.weights.conv1_w);
    round_to_float(c.weights.conv1_b);
    round_to_float(c.weights.proj_w);
    c.weights.proj_b = double(float(c.weights.proj_b));
    for (auto& x : gt.values()) x = double(float(x));
}

inline std::string random_token() {
    static std::mutex mu;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(mu);
    std::ostringstream os;
    os << std::hex;
    for (int i = 0; i < 2; ++i) os << std::setw(16) << std::setfill('0') << rng();
    return os.str();
}

}  // namespace detail

/// Prediction, segmentation and payload for a freshly built session.
inline void initialize_session(Session& s) {
    s.params = s.counter.identity_params();
    s.adam = AdamState::zeros_like(s.params);
    auto t0 = std::chrono::steady_clock::now();
    s.prediction = s.counter.forward(s.params);
    s.timings.predict_ms = detail::elapsed_ms(t0);
    detail::resegment(s);
    s.history.push_back({0, s.prediction.total()});
    detail::rebuild_payload(s);
}

/// What a client may send to create a session.
struct CreateRequest {
    std::optional<DotScene> scene;
    std::optional<DensityGrid> grid;  // uploaded ground-truth density
    Miscalibration miscal;
    SessionOptions options;
    bool blind = false;
};

inline CreateRequest create_request_from_json(const json& j, const SessionOptions& defaults) {
    if (!j.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
    CreateRequest req;
    req.options = defaults;
    try {
        if (!j.contains("scene")) throw std::invalid_argument("missing \"scene\"");
        req.scene = scene_from_json(j.at("scene"));
        if (j.contains("miscalibration")) req.miscal = miscalibration_from_json(j["miscalibration"]);
        from_json_into(j, req.options);
        req.blind = j.value("blind", false);
    } catch (const ServiceError&) {
        throw;
    } catch (const std::exception& e) {
        throw ServiceError(400, "bad_request", e.what());
    }
    return req;
}

class SessionStore {
public:
    using Clock = std::chrono::steady_clock;

    explicit SessionStore(SessionOptions defaults = {}, std::chrono::seconds ttl = std::chrono::minutes(30),
                          std::string snapshot_dir = {})
        : defaults_(std::move(defaults)), ttl_(ttl), snapshot_dir_(std::move(snapshot_dir)) {}

    const SessionOptions& defaults() const { return defaults_; }

    /// Overrides the time source (tests use this to drive eviction).
    void set_clock(std::function<Clock::time_point()> clock) { clock_ = std::move(clock); }

    json create(const CreateRequest& req) {
        auto s = std::make_shared<Session>();
        s->id = detail::random_token();
        s->options = req.options;
        s->blind = req.blind;
        try {
            req.options.segmentation.validate();
            req.options.adaptation.validate();
            req.options.ranges.validate();
            if (req.scene) {
                s->gt = render_density(*req.scene);
            } else if (req.grid) {
                validate_density(*req.grid);
                s->gt = *req.grid;
            } else {
                throw std::invalid_argument("need a scene or a density grid");
            }
            s->counter = synthesize_counter(s->gt, req.miscal, req.options.counter);
            detail::round_to_float(s->counter, s->gt);
            initialize_session(*s);
        } catch (const std::exception& e) {
            throw ServiceError(400, "bad_request", e.what());
        }
        s->last_access = now();
        json out = s->payload;
        {
            std::unique_lock lock(map_mutex_);
            sessions_[s->id] = s;
        }
        persist(*s);
        return out;
    }

    json get(const std::string& id) {
        auto s = find(id);
        std::shared_lock lock(s->mutex);
        return s->payload;
    }

    json submit_feedback(const std::string& id, std::uint32_t region_id, std::int64_t range_index) {
        auto s = find(id);
        json out;
        {
            std::unique_lock lock(s->mutex);
            const auto n = static_cast<std::uint32_t>(s->segmentation.regions.size());
            if (region_id < s->id_offset)
                throw ServiceError(409, "stale_region",
                                   "region " + std::to_string(region_id) +
                                       " belongs to an earlier segmentation; refresh the session state");
            if (region_id >= s->id_offset + n)
                throw ServiceError(400, "bad_request", "unknown region id " + std::to_string(region_id));
            const auto bins = s->options.ranges.bins();
            if (range_index < 0 || range_index >= std::int64_t(bins.size()))
                throw ServiceError(400, "bad_request", "range index out of bounds: " + std::to_string(range_index));

            FeedbackRecord rec;
            rec.region = s->segmentation.regions[region_id - s->id_offset].pixels;
            rec.range = bins[std::size_t(range_index)];
            rec.iteration = s->iteration + 1;
            rec.region_id = region_id;
            s->omega.push_back(std::move(rec));

            auto t0 = Clock::now();
            auto res = adapt(s->counter, s->params, s->adam, s->omega, s->options.adaptation);
            s->timings.adapt_ms = detail::elapsed_ms(t0);
            s->timings.predict_ms = 0.0;  // the adapted prediction comes out of the last adaptation trace
            s->prediction = std::move(res.prediction);
            s->loss_trajectory = std::move(res.loss_trajectory);
            s->confidence = res.confidence;
            s->schedule = res.schedule;
            ++s->iteration;
            s->history.push_back({s->iteration, s->prediction.total()});
            detail::resegment(*s);
            detail::rebuild_payload(*s);
            s->last_access = now();
            out = s->payload;
        }
        persist(*s);
        return out;
    }

    void remove(const std::string& id) {
        std::unique_lock lock(map_mutex_);
        if (!sessions_.erase(id)) throw ServiceError(404, "not_found", "no session " + id);
        if (!snapshot_dir_.empty())
            for (const auto& f : snapshot_files(id)) std::filesystem::remove(f);
    }

    /// Drops sessions idle for longer than the TTL. Returns how many were removed.
    std::size_t evict_idle() {
        const auto t = now();
        std::vector<std::string> expired;
        {
            std::shared_lock lock(map_mutex_);
            for (const auto& [id, s] : sessions_) {
                std::shared_lock sl(s->mutex);
                if (t - s->last_access > ttl_) expired.push_back(id);
            }
        }
        for (const auto& id : expired) {
            try {
                remove(id);
            } catch (const ServiceError&) {
            }
        }
        return expired.size();
    }

    std::size_t size() const {
        std::shared_lock lock(map_mutex_);
        return sessions_.size();
    }

    /// Loads every snapshot in the snapshot directory. Returns the number restored.
    std::size_t restore() {
        if (snapshot_dir_.empty() || !std::filesystem::exists(snapshot_dir_)) return 0;
        std::size_t n = 0;
        for (const auto& entry : std::filesystem::directory_iterator(snapshot_dir_)) {
            const auto name = entry.path().filename().string();
            const std::string suffix = ".session.json";
            if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
                continue;
            auto s = load_snapshot(name.substr(0, name.size() - suffix.size()));
            s->last_access = now();
            std::unique_lock lock(map_mutex_);
            sessions_[s->id] = s;
            ++n;
        }
        return n;
    }

private:
    SessionOptions defaults_;
    std::chrono::seconds ttl_;
    std::string snapshot_dir_;
    std::function<Clock::time_point()> clock_;
    mutable std::shared_mutex map_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;

    Clock::time_point now() const { return clock_ ? clock_() : Clock::now(); }

    std::shared_ptr<Session> find(const std::string& id) {
        std::shared_ptr<Session> s;
        {
            std::shared_lock lock(map_mutex_);
            auto it = sessions_.find(id);
            if (it == sessions_.end()) throw ServiceError(404, "not_found", "no session " + id);
            s = it->second;
        }
        std::unique_lock lock(s->mutex);
        s->last_access = now();
        return s;
    }

    std::vector<std::filesystem::path> snapshot_files(const std::string& id) const {
        const std::filesystem::path d(snapshot_dir_);
        return {d / (id + ".session.json"), d / (id + ".features"), d / (id + ".head"), d / (id + ".gt.dgrid")};
    }

    static json blocks_to_json(const RefinementParams& p) {
        return {{"ch_scale", p.ch_scale}, {"ch_bias", p.ch_bias}, {"sp_scale", p.sp_scale}, {"sp_bias", p.sp_bias}};
    }

    static RefinementParams blocks_from_json(const json& j) {
        RefinementParams p;
        p.ch_scale = j.at("ch_scale").get<std::vector<double>>();
        p.ch_bias = j.at("ch_bias").get<std::vector<double>>();
        p.sp_scale = j.at("sp_scale").get<std::vector<double>>();
        p.sp_bias = j.at("sp_bias").get<std::vector<double>>();
        return p;
    }

    void persist(const Session& s) const {
        if (snapshot_dir_.empty()) return;
        std::filesystem::create_directories(snapshot_dir_);
        const auto files = snapshot_files(s.id);
        std::shared_lock lock(s.mutex);
        json omega = json::array();
        for (const auto& r : s.omega)
            omega.push_back({{"region_id", r.region_id},
                             {"range", {bound_to_json(r.range.lower), bound_to_json(r.range.upper)}},
                             {"iteration", r.iteration},
                             {"pixels", r.region}});
        json history = json::array();
        for (const auto& h : s.history) history.push_back({h.iteration, h.predicted_total});
        json j = {{"id", s.id},
                  {"options", to_json(s.options)},
                  {"blind", s.blind},
                  {"id_offset", s.id_offset},
                  {"iteration", s.iteration},
                  {"params", blocks_to_json(s.params)},
                  {"adam", {{"m", blocks_to_json(s.adam.m)}, {"v", blocks_to_json(s.adam.v)}, {"step", s.adam.step}}},
                  {"omega", omega},
                  {"history", history},
                  {"loss_trajectory", s.loss_trajectory},
                  {"confidence", s.confidence},
                  {"schedule", {s.schedule.lr, s.schedule.steps}},
                  {"timings",
                   {s.timings.adapt_ms, s.timings.predict_ms, s.timings.segment_ms, s.timings.payload_ms}}};
        write_text_file(files[0].string(), j.dump());
        std::ofstream fe(files[1], std::ios::binary), he(files[2], std::ios::binary);
        write_features(fe, s.counter.features);
        write_head(he, s.counter.weights);
        save_dgrid(files[3].string(), s.gt);
    }

    std::shared_ptr<Session> load_snapshot(const std::string& id) const {
        const auto files = snapshot_files(id);
        const auto j = read_json_file(files[0].string());
        auto s = std::make_shared<Session>();
        s->id = j.at("id").get<std::string>();
        from_json_into(j.at("options"), s->options);
        s->blind = j.at("blind").get<bool>();
        s->iteration = j.at("iteration").get<int>();
        std::ifstream fe(files[1], std::ios::binary), he(files[2], std::ios::binary);
        if (!fe || !he) throw FormatError("snapshot " + id + ": missing counter files");
        s->counter.features = read_features(fe);
        s->counter.weights = read_head(he);
        s->gt = load_dgrid(files[3].string());
        s->params = blocks_from_json(j.at("params"));
        s->adam.m = blocks_from_json(j.at("adam").at("m"));
        s->adam.v = blocks_from_json(j.at("adam").at("v"));
        s->adam.step = j.at("adam").at("step").get<long long>();
        for (const auto& e : j.at("omega")) {
            FeedbackRecord r;
            r.region_id = e.at("region_id").get<std::uint32_t>();
            const auto& rg = e.at("range");
            r.range = CountRange(rg.at(0).is_null() ? -kInf : rg.at(0).get<double>(),
                                 rg.at(1).is_null() ? kInf : rg.at(1).get<double>());
            r.iteration = e.at("iteration").get<int>();
            r.region = e.at("pixels").get<std::vector<std::uint32_t>>();
            s->omega.push_back(std::move(r));
        }
        for (const auto& h : j.at("history")) s->history.push_back({h.at(0).get<int>(), h.at(1).get<double>()});
        s->loss_trajectory = j.at("loss_trajectory").get<std::vector<double>>();
        s->confidence = j.at("confidence").get<double>();
        s->schedule = {j.at("schedule").at(0).get<double>(), j.at("schedule").at(1).get<int>()};
        const auto& t = j.at("timings");
        s->timings = {t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>(), t.at(3).get<double>()};

        s->prediction = s->counter.forward(s->params);
        s->segmentation = segment_full(s->prediction, s->options.segmentation);
        s->id_offset = j.at("id_offset").get<std::uint32_t>();
        const auto saved = s->timings;
        detail::rebuild_payload(*s);
        s->timings = saved;
        s->payload["timings"] = {{"adapt_ms", saved.adapt_ms},
                                 {"predict_ms", saved.predict_ms},
                                 {"segment_ms", saved.segment_ms},
                                 {"payload_ms", saved.payload_ms}};
        return s;
    }
};

}  // namespace icount

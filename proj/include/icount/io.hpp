#pragma once

// File formats:
//   DGRID  "DG01" u32 h, u32 w, f32[h*w]           (little-endian, row-major)
//   LMAP   "LM01" u32 h, u32 w, u32[h*w]
//   FM01   "FM01" u32 c, u32 h, u32 w, f32[c*h*w]
//   HW01   "HW01" u32 channels, u32 upsample, then FM01 blocks for conv1_w
//          (c*c, 3, 3), conv1_b (c, 1, 1), proj_w (c, 1, 1), proj_b (1, 1, 1)
// plus JSON for dot scenes, region tables and feedback sets.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "icount/adaptation.hpp"
#include "icount/counter.hpp"
#include "icount/feedback.hpp"
#include "icount/grid.hpp"
#include "icount/ipse.hpp"

namespace icount {

using json = nlohmann::json;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff), char((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("unexpected end of stream");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& os, double v) { put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline double get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

inline void expect_magic(std::istream& is, std::string_view magic) {
    char m[4];
    if (!is.read(m, 4) || std::string_view(m, 4) != magic)
        throw FormatError("bad magic, expected " + std::string(magic));
}

// Caps header-declared sizes so a corrupt header cannot trigger a huge allocation.
inline std::size_t checked_count(std::uint64_t n) {
    if (n == 0 || n > (std::uint64_t(1) << 28)) throw FormatError("implausible size in header");
    return std::size_t(n);
}

template <class Fn>
void with_file(const std::string& path, std::ios::openmode mode, Fn&& fn) {
    std::fstream f(path, mode | std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    try {
        fn(f);
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    if ((mode & std::ios::out) && !f.flush()) throw std::runtime_error("write failed: " + path);
}

}  // namespace detail

// ---- DGRID ------------------------------------------------------------------

inline void write_dgrid(std::ostream& os, const DensityGrid& g) {
    os.write("DG01", 4);
    detail::put_u32(os, std::uint32_t(g.height()));
    detail::put_u32(os, std::uint32_t(g.width()));
    for (double v : g.values()) detail::put_f32(os, v);
}

inline DensityGrid read_dgrid(std::istream& is) {
    detail::expect_magic(is, "DG01");
    const auto h = detail::get_u32(is), w = detail::get_u32(is);
    std::vector<double> v(detail::checked_count(std::uint64_t(h) * w));
    for (auto& x : v) x = detail::get_f32(is);
    DensityGrid g(int(h), int(w), std::move(v));
    validate_density(g);
    return g;
}

inline std::string dgrid_bytes(const DensityGrid& g) {
    std::ostringstream os;
    write_dgrid(os, g);
    return os.str();
}

inline DensityGrid dgrid_from_bytes(const std::string& bytes) {
    std::istringstream is(bytes);
    return read_dgrid(is);
}

inline void save_dgrid(const std::string& path, const DensityGrid& g) {
    detail::with_file(path, std::ios::out | std::ios::trunc, [&](std::ostream& os) { write_dgrid(os, g); });
}

inline DensityGrid load_dgrid(const std::string& path) {
    DensityGrid g;
    detail::with_file(path, std::ios::in, [&](std::istream& is) { g = read_dgrid(is); });
    return g;
}

// ---- LMAP -------------------------------------------------------------------

inline void write_lmap(std::ostream& os, const LabelMap& l) {
    os.write("LM01", 4);
    detail::put_u32(os, std::uint32_t(l.height));
    detail::put_u32(os, std::uint32_t(l.width));
    for (auto v : l.labels) detail::put_u32(os, v);
}

inline LabelMap read_lmap(std::istream& is) {
    detail::expect_magic(is, "LM01");
    const auto h = detail::get_u32(is), w = detail::get_u32(is);
    detail::checked_count(std::uint64_t(h) * w);
    LabelMap l{int(h), int(w)};
    for (auto& v : l.labels) v = detail::get_u32(is);
    return l;
}

inline void save_lmap(const std::string& path, const LabelMap& l) {
    detail::with_file(path, std::ios::out | std::ios::trunc, [&](std::ostream& os) { write_lmap(os, l); });
}

inline LabelMap load_lmap(const std::string& path) {
    LabelMap l;
    detail::with_file(path, std::ios::in, [&](std::istream& is) { l = read_lmap(is); });
    return l;
}

// ---- FM01 / HW01 --------------------------------------------------------------

inline void write_fm01(std::ostream& os, int c, int h, int w, std::span<const double> values) {
    os.write("FM01", 4);
    detail::put_u32(os, std::uint32_t(c));
    detail::put_u32(os, std::uint32_t(h));
    detail::put_u32(os, std::uint32_t(w));
    for (double v : values) detail::put_f32(os, v);
}

inline void write_features(std::ostream& os, const FeatureMap& f) {
    write_fm01(os, f.channels, f.height, f.width, f.values);
}

inline FeatureMap read_features(std::istream& is) {
    detail::expect_magic(is, "FM01");
    const auto c = detail::get_u32(is), h = detail::get_u32(is), w = detail::get_u32(is);
    detail::checked_count(std::uint64_t(c) * h * w);
    FeatureMap f{int(c), int(h), int(w)};
    for (auto& v : f.values) v = detail::get_f32(is);
    return f;
}

inline void write_head(std::ostream& os, const HeadWeights& hw) {
    const int c = hw.channels;
    os.write("HW01", 4);
    detail::put_u32(os, std::uint32_t(c));
    detail::put_u32(os, std::uint32_t(hw.upsample));
    write_fm01(os, c * c, 3, 3, hw.conv1_w);
    write_fm01(os, c, 1, 1, hw.conv1_b);
    write_fm01(os, c, 1, 1, hw.proj_w);
    const double pb[1] = {hw.proj_b};
    write_fm01(os, 1, 1, 1, pb);
}

inline HeadWeights read_head(std::istream& is) {
    detail::expect_magic(is, "HW01");
    HeadWeights hw;
    hw.channels = int(detail::get_u32(is));
    hw.upsample = int(detail::get_u32(is));
    auto block = [&](std::size_t expected) {
        auto f = read_features(is);
        if (f.values.size() != expected) throw FormatError("HW01: block size mismatch");
        return f.values;
    };
    const auto c = std::size_t(hw.channels);
    hw.conv1_w = block(c * c * 9);
    hw.conv1_b = block(c);
    hw.proj_w = block(c);
    hw.proj_b = block(1)[0];
    return hw;
}

// ---- JSON: scenes, regions, feedback ----------------------------------------------

inline DotScene scene_from_json(const json& j) {
    DotScene s;
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    s.sigma = j.value("sigma", 2.0);
    for (const auto& d : j.at("dots")) {
        if (!d.is_array() || d.size() != 2) throw std::invalid_argument("scene dots must be [x, y] pairs");
        s.dots.push_back({d[0].get<double>(), d[1].get<double>()});
    }
    if (s.height < 8 || s.width < 8) throw std::invalid_argument("scene must be at least 8x8");
    if (!(s.sigma > 0.0)) throw std::invalid_argument("scene sigma must be positive");
    for (const auto& d : s.dots)
        if (!(d.x >= 0 && d.x < s.width && d.y >= 0 && d.y < s.height))
            throw std::invalid_argument("scene dot outside grid bounds");
    return s;
}

inline json scene_to_json(const DotScene& s) {
    json dots = json::array();
    for (const auto& d : s.dots) dots.push_back({d.x, d.y});
    return {{"height", s.height}, {"width", s.width}, {"sigma", s.sigma}, {"dots", dots}};
}

inline json regions_to_json(const std::vector<Region>& regions) {
    json arr = json::array();
    for (const auto& r : regions)
        arr.push_back({{"id", r.id}, {"sum", r.sum}, {"area", r.area}, {"kind", to_string(r.kind)}});
    return {{"regions", arr}};
}

inline json bound_to_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json feedback_to_json(const Feedback& omega) {
    json arr = json::array();
    for (const auto& r : omega)
        arr.push_back({{"region_id", r.region_id},
                       {"range", {bound_to_json(r.range.lower), bound_to_json(r.range.upper)}},
                       {"iteration", r.iteration}});
    return arr;
}

/// Parses the feedback JSON; region pixel lists are not part of the format and stay empty.
inline Feedback feedback_from_json(const json& j) {
    Feedback out;
    for (const auto& e : j) {
        FeedbackRecord r;
        r.region_id = e.at("region_id").get<std::uint32_t>();
        const auto& rg = e.at("range");
        const double lo = rg.at(0).is_null() ? -kInf : rg.at(0).get<double>();
        const double hi = rg.at(1).is_null() ? kInf : rg.at(1).get<double>();
        r.range = CountRange(lo, hi);
        r.iteration = e.value("iteration", 0);
        out.push_back(std::move(r));
    }
    return out;
}

// ---- JSON: configs ------------------------------------------------------------

inline void from_json_into(const json& j, SegmentationConfig& c) {
    c.count_limit = j.value("count_limit", c.count_limit);
    c.area_lower = j.value("area_lower", c.area_lower);
    c.area_upper = j.value("area_upper", c.area_upper);
    c.zero_fraction_max = j.value("zero_fraction_max", c.zero_fraction_max);
    c.merge_threshold = j.value("merge_threshold", c.merge_threshold);
    c.smooth_sigma = j.value("smooth_sigma", c.smooth_sigma);
    c.smooth_radius = j.value("smooth_radius", c.smooth_radius);
    c.downsample_factor = j.value("downsample_factor", c.downsample_factor);
    c.seed = j.value("seed", c.seed);
    c.validate();
}

inline json to_json(const SegmentationConfig& c) {
    return {{"count_limit", c.count_limit},       {"area_lower", c.area_lower},
            {"area_upper", c.area_upper},         {"zero_fraction_max", c.zero_fraction_max},
            {"merge_threshold", c.effective_merge_threshold()}, {"smooth_sigma", c.smooth_sigma},
            {"smooth_radius", c.smooth_radius},   {"downsample_factor", c.downsample_factor}};
}

inline void from_json_into(const json& j, AdaptConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.steps = j.value("steps", c.steps);
    c.reg_weight = j.value("reg_weight", c.reg_weight);
    c.info_threshold = j.value("info_threshold", c.info_threshold);
    c.temperature = j.value("temperature", c.temperature);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.log_base = j.value("log_base", c.log_base);
    c.confidence_floor = j.value("confidence_floor", c.confidence_floor);
    c.confidence_scaling = j.value("confidence_scaling", c.confidence_scaling);
    c.reset_per_interaction = j.value("reset_per_interaction", c.reset_per_interaction);
    c.validate();
}

inline json to_json(const AdaptConfig& c) {
    return {{"lr", c.lr},
            {"steps", c.steps},
            {"reg_weight", c.reg_weight},
            {"info_threshold", c.info_threshold},
            {"temperature", c.temperature},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"epsilon", c.epsilon},
            {"log_base", c.log_base},
            {"confidence_floor", c.confidence_floor},
            {"confidence_scaling", c.confidence_scaling},
            {"reset_per_interaction", c.reset_per_interaction}};
}

inline void from_json_into(const json& j, RangeFamily& f) {
    f.count_limit = j.value("count_limit", f.count_limit);
    f.interval = j.value("interval", f.interval);
    f.validate();
}

inline void from_json_into(const json& j, CounterSpec& s) {
    s.channels = j.value("channels", s.channels);
    s.upsample = j.value("upsample", s.upsample);
    s.feature_gain = j.value("feature_gain", s.feature_gain);
    s.seed = j.value("seed", s.seed);
}

inline Miscalibration miscalibration_from_json(const json& j) {
    Miscalibration m;
    const auto mode = j.value("mode", std::string("none"));
    if (mode == "none") {
    } else if (mode == "global_scale") {
        m = Miscalibration::global(j.value("alpha", 1.0));
    } else if (mode == "channel_scale") {
        m = Miscalibration::channels(j.at("alphas").get<std::vector<double>>());
    } else if (mode == "local_blob") {
        m = Miscalibration::blob(j.value("center_x", -1.0), j.value("center_y", -1.0), j.value("radius", 4.0),
                                 j.value("magnitude", 1.0));
    } else {
        throw std::invalid_argument("unknown miscalibration mode: " + mode);
    }
    m.validate();
    return m;
}

inline json to_json(const Miscalibration& m) {
    switch (m.mode) {
        case Miscalibration::Mode::none: return {{"mode", "none"}};
        case Miscalibration::Mode::global_scale: return {{"mode", "global_scale"}, {"alpha", m.alpha}};
        case Miscalibration::Mode::channel_scale: return {{"mode", "channel_scale"}, {"alphas", m.channel_alpha}};
        case Miscalibration::Mode::local_blob:
            return {{"mode", "local_blob"},
                    {"center_x", m.center_x},
                    {"center_y", m.center_y},
                    {"radius", m.radius},
                    {"magnitude", m.magnitude}};
    }
    return {};
}

template <class E>
E enum_from_string(const std::string& s, std::initializer_list<std::pair<const char*, E>> table) {
    for (const auto& [name, value] : table)
        if (s == name) return value;
    throw std::invalid_argument("unknown option: " + s);
}

inline Strategy strategy_from_string(const std::string& s) {
    return enum_from_string<Strategy>(
        s, {{"random", Strategy::random}, {"background_prior", Strategy::background_prior}, {"error_based", Strategy::error_based}});
}

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::random: return "random";
        case Strategy::background_prior: return "background_prior";
        case Strategy::error_based: return "error_based";
    }
    return "?";
}

inline NoiseLevel noise_from_string(const std::string& s) {
    return enum_from_string<NoiseLevel>(
        s, {{"none", NoiseLevel::none}, {"moderate", NoiseLevel::moderate}, {"large", NoiseLevel::large}});
}

inline const char* to_string(NoiseLevel n) {
    switch (n) {
        case NoiseLevel::none: return "none";
        case NoiseLevel::moderate: return "moderate";
        case NoiseLevel::large: return "large";
    }
    return "?";
}

inline json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f || !(f << text) || !f.flush()) throw std::runtime_error("write failed: " + path);
}

}  // namespace icount

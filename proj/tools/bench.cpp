// bench: experiment runner and file utilities.
//
//   bench run     --config exp.json [--seed N | --full-protocol] [--csv out.csv] [--json out.json]
//   bench segment --in map.dgrid --out labels.lmap [--regions labels.json] [--factor 4]
//   bench render  --scene scene.json --out gt.dgrid
//   bench report  --in results.csv

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "icount/bench.hpp"
#include "icount/io.hpp"
#include "icount/ipse.hpp"

namespace {

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, bool full_protocol,
            const std::string& csv, const std::string& json_out) {
    auto j = config_path.empty() ? icount::json::object() : icount::read_json_file(config_path);
    auto cfg = icount::experiment_from_json(j);
    if (full_protocol) cfg.seeds = icount::full_protocol_seeds();
    if (seed) cfg.seeds = {*seed};
    if (!csv.empty()) cfg.csv_path = csv;
    if (!json_out.empty()) cfg.json_path = json_out;
    const auto rep = icount::run_suite(cfg);
    icount::write_report(rep, cfg);
    std::cout << icount::format_report(rep);
    std::cout << "wall time: " << rep.wall_ms / 1000.0 << " s\n";
    return 0;
}

int cmd_segment(const std::string& in, const std::string& out, std::string regions_path, int factor,
                std::optional<std::uint64_t> seed, const std::string& config_path) {
    icount::SegmentationConfig cfg;
    if (!config_path.empty()) icount::from_json_into(icount::read_json_file(config_path), cfg);
    if (factor > 0) cfg.downsample_factor = factor;
    if (seed) cfg.seed = *seed;
    const auto grid = icount::load_dgrid(in);
    const auto seg = icount::segment_full(grid, cfg);
    icount::save_lmap(out, seg.labels);
    if (regions_path.empty()) regions_path = out + ".json";
    icount::write_text_file(regions_path, icount::regions_to_json(seg.regions).dump(2));
    std::cout << seg.regions.size() << " regions, total " << grid.total() << "\n";
    return 0;
}

int cmd_render(const std::string& scene_path, const std::string& out) {
    const auto scene = icount::scene_from_json(icount::read_json_file(scene_path));
    const auto grid = icount::render_density(scene);
    icount::save_dgrid(out, grid);
    std::cout << scene.height << "x" << scene.width << ", total " << grid.total() << "\n";
    return 0;
}

int cmd_report(const std::string& in) {
    std::ifstream f(in);
    if (!f) throw std::runtime_error("cannot open " + in);
    std::vector<icount::SessionRow> rows;
    try {
        rows = icount::rows_from_csv(f);
    } catch (const std::exception& e) {
        throw std::runtime_error(in + ": " + e.what());
    }
    std::cout << icount::format_report(icount::aggregate(std::move(rows)));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interactive density counting benchmark"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::string config, csv, json_out;
    bool full_protocol = false;
    auto* run = app.add_subcommand("run", "Run an interactive-adaptation experiment suite");
    run->add_option("--config", config, "Experiment config (JSON)");
    auto* seed_opt = run->add_option("--seed", seed, "Run a single seed instead of the configured list");
    run->add_flag("--full-protocol", full_protocol, "Use the five-seed protocol (5, 10, 15, 20, 25)")->excludes(seed_opt);
    run->add_option("--csv", csv, "Per-row results CSV");
    run->add_option("--json", json_out, "Aggregated report JSON");

    std::string seg_in, seg_out, seg_regions, seg_config;
    int factor = 0;
    auto* seg = app.add_subcommand("segment", "Segment a DGRID density map into an LMAP label map");
    seg->add_option("--in", seg_in, "Input DGRID")->required();
    seg->add_option("--out", seg_out, "Output LMAP")->required();
    seg->add_option("--regions", seg_regions, "Region table JSON (default: <out>.json)");
    seg->add_option("--factor", factor, "Downsampling factor (default from config: 4)");
    seg->add_option("--config", seg_config, "Segmentation config (JSON)");
    seg->add_option("--seed", seed, "Background-splitting seed");

    std::string scene_path, render_out;
    auto* render = app.add_subcommand("render", "Render a dot scene to a DGRID density map");
    render->add_option("--scene", scene_path, "Scene JSON")->required();
    render->add_option("--out", render_out, "Output DGRID")->required();

    std::string report_in;
    auto* report = app.add_subcommand("report", "Summarize a results CSV");
    report->add_option("--in", report_in, "Results CSV")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*run) return cmd_run(config, seed, full_protocol, csv, json_out);
        if (*seg) return cmd_segment(seg_in, seg_out, seg_regions, factor, seed, seg_config);
        if (*render) return cmd_render(scene_path, render_out);
        if (*report) return cmd_report(report_in);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

// icount_server: HTTP session service for the interactive counting loop.
//
//   icount_server [--config server.json] [--addr host:port] [--static dir]
//
// Address precedence: --addr, then ICOUNT_ADDR, then the config file, then 127.0.0.1:8080.

#include <csignal>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "icount/http.hpp"

namespace {
httplib::Server* g_server = nullptr;
void on_signal(int) {
    if (g_server) g_server->stop();
}
}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interactive density counting session service"};
    std::string config_path, addr, static_dir;
    app.add_option("--config", config_path, "Server config (JSON)");
    app.add_option("--addr", addr, "Listen address, host:port");
    app.add_option("--static", static_dir, "Directory of static UI assets served at /");
    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = config_path.empty() ? icount::ServerConfig{}
                                       : icount::server_config_from_json(icount::read_json_file(config_path));
        icount::apply_environment(cfg);
        if (!addr.empty()) icount::parse_addr(addr, cfg);
        if (!static_dir.empty()) cfg.static_dir = static_dir;

        icount::SessionStore store(cfg.session, std::chrono::minutes(cfg.ttl_minutes), cfg.snapshot_dir);
        if (const auto n = store.restore()) std::cerr << "restored " << n << " sessions\n";

        httplib::Server srv;
        icount::mount_routes(srv, store);
        if (!cfg.static_dir.empty() && !srv.set_mount_point("/", cfg.static_dir))
            throw std::runtime_error("static directory not found: " + cfg.static_dir);

        g_server = &srv;
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        std::cerr << "listening on " << cfg.host << ":" << cfg.port << "\n";
        if (!srv.listen(cfg.host, cfg.port)) throw std::runtime_error("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

#pragma once

// JSON-over-HTTP routes for SessionStore, on cpp-httplib.
//
//   POST   /sessions                 JSON scene request, or a DGRID body (application/octet-stream)
//   GET    /sessions/{id}
//   POST   /sessions/{id}/feedback   {"region_id": ..., "range_index": ...}
//   DELETE /sessions/{id}

#include <cstdlib>
#include <string>

#include <httplib.h>

#include "icount/io.hpp"
#include "icount/session.hpp"

namespace icount {

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string static_dir;
    std::string snapshot_dir;
    int ttl_minutes = 30;
    SessionOptions session;
};

/// "host:port", ":port" or "port".
inline void parse_addr(const std::string& addr, ServerConfig& cfg) {
    const auto colon = addr.rfind(':');
    std::string port = addr;
    if (colon != std::string::npos) {
        if (colon > 0) cfg.host = addr.substr(0, colon);
        port = addr.substr(colon + 1);
    }
    std::size_t used = 0;
    int p = -1;
    try {
        p = std::stoi(port, &used);
    } catch (const std::exception&) {
    }
    if (used != port.size() || p < 0 || p > 65535) throw std::invalid_argument("bad address: " + addr);
    cfg.port = p;
}

inline ServerConfig server_config_from_json(const json& j) {
    ServerConfig c;
    if (j.contains("addr")) parse_addr(j["addr"].get<std::string>(), c);
    c.static_dir = j.value("static_dir", c.static_dir);
    c.snapshot_dir = j.value("snapshot_dir", c.snapshot_dir);
    c.ttl_minutes = j.value("ttl_minutes", c.ttl_minutes);
    if (c.ttl_minutes < 1) throw std::invalid_argument("ttl_minutes must be >= 1");
    if (j.contains("session")) from_json_into(j["session"], c.session);
    return c;
}

/// Applies ICOUNT_ADDR if set.
inline void apply_environment(ServerConfig& cfg) {
    if (const char* addr = std::getenv("ICOUNT_ADDR"); addr && *addr) parse_addr(addr, cfg);
}

namespace detail {

inline void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
    try {
        fn();
    } catch (const ServiceError& e) {
        send_json(res, e.status(), error_json(e.code(), e.what()));
    } catch (const json::exception& e) {
        send_json(res, 400, error_json("bad_request", e.what()));
    } catch (const FormatError& e) {
        send_json(res, 400, error_json("bad_request", e.what()));
    } catch (const std::invalid_argument& e) {
        send_json(res, 400, error_json("bad_request", e.what()));
    } catch (const std::exception& e) {
        send_json(res, 500, error_json("internal", e.what()));
    }
}

inline bool truthy(const std::string& v) { return v == "1" || v == "true" || v == "yes"; }

inline CreateRequest create_request_from_upload(const httplib::Request& req, const SessionOptions& defaults) {
    CreateRequest out;
    out.options = defaults;
    try {
        out.grid = dgrid_from_bytes(req.body);
        if (req.has_param("alpha")) out.miscal = Miscalibration::global(std::stod(req.get_param_value("alpha")));
    } catch (const std::exception& e) {
        throw ServiceError(400, "bad_request", e.what());
    }
    if (req.has_param("blind")) out.blind = truthy(req.get_param_value("blind"));
    return out;
}

}  // namespace detail

inline void mount_routes(httplib::Server& srv, SessionStore& store) {
    using httplib::Request;
    using httplib::Response;

    srv.Post("/sessions", [&store](const Request& req, Response& res) {
        detail::guarded(res, [&] {
            store.evict_idle();
            const bool upload = req.get_header_value("Content-Type").rfind("application/octet-stream", 0) == 0;
            const auto create = upload ? detail::create_request_from_upload(req, store.defaults())
                                       : create_request_from_json(json::parse(req.body), store.defaults());
            detail::send_json(res, 201, store.create(create));
        });
    });

    srv.Get("/sessions/:id", [&store](const Request& req, Response& res) {
        detail::guarded(res, [&] {
            store.evict_idle();
            detail::send_json(res, 200, store.get(req.path_params.at("id")));
        });
    });

    srv.Post("/sessions/:id/feedback", [&store](const Request& req, Response& res) {
        detail::guarded(res, [&] {
            store.evict_idle();
            const auto body = json::parse(req.body);
            if (!body.is_object() || !body.contains("region_id") || !body.contains("range_index"))
                throw ServiceError(400, "bad_request", "expected {\"region_id\": ..., \"range_index\": ...}");
            const auto& rid = body["region_id"];
            const auto& rix = body["range_index"];
            if (!rid.is_number_unsigned() || !rix.is_number_integer())
                throw ServiceError(400, "bad_request", "region_id and range_index must be non-negative integers");
            const auto region = rid.get<std::uint64_t>();
            if (region > std::numeric_limits<std::uint32_t>::max())
                throw ServiceError(400, "bad_request", "region_id out of range");
            detail::send_json(res, 200,
                              store.submit_feedback(req.path_params.at("id"), static_cast<std::uint32_t>(region),
                                                    rix.get<std::int64_t>()));
        });
    });

    srv.Delete("/sessions/:id", [&store](const Request& req, Response& res) {
        detail::guarded(res, [&] {
            store.remove(req.path_params.at("id"));
            res.status = 204;
        });
    });
}

}  // namespace icount

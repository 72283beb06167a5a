#pragma once

// HTTP facade over the inference pipeline.
//
//   GET    /api/health
//   POST   /api/harmonize          multipart: composite, fg_mask, [guide_mask], [session_id]
//   POST   /api/color_transfer     as above plus r1, r2 (form fields or a "params" JSON part)
//   POST   /api/sessions           multipart: composite, [fg_mask], [guide_mask]
//   GET    /api/sessions/:id
//   GET    /api/sessions/:id/result
//   DELETE /api/sessions/:id
//
// Image responses are PNG with the JSON sidecar in the X-IHarmon-Meta header.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "iharmon/archive.hpp"
#include "iharmon/error.hpp"
#include "iharmon/image_io.hpp"
#include "iharmon/inference.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines _res.
#include <httplib.h>

namespace iharmon::service {

inline constexpr std::size_t kMaxBodyBytes = 32u << 20;
inline constexpr int kMaxDimension = 4096;
inline constexpr char kMetaHeader[] = "X-IHarmon-Meta";

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    int workers = 2;
    std::chrono::seconds session_idle_timeout{1800};
    std::string cors_origin = "*";
    std::size_t max_body_bytes = kMaxBodyBytes;
    int max_dimension = kMaxDimension;
};

/// Failure carrying the HTTP status it maps to.
class HttpError : public Error {
public:
    HttpError(int status, const std::string& msg) : Error(msg), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

class Semaphore {
public:
    explicit Semaphore(int n) : free_(n) {}
    void acquire()
    {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return free_ > 0; });
        --free_;
    }
    void release()
    {
        {
            std::lock_guard lk(m_);
            ++free_;
        }
        cv_.notify_one();
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    int free_;
};

struct SessionRecord {
    std::string id;
    Image composite;
    std::optional<Mask> fg_mask;
    std::optional<Mask> guide_mask;
    Bytes last_result;
    std::chrono::steady_clock::time_point created;
    std::chrono::steady_clock::time_point touched;
};

class SessionStore {
public:
    explicit SessionStore(std::chrono::seconds idle) : idle_(idle) {}

    std::string create(Image composite)
    {
        std::lock_guard lk(m_);
        sweep();
        SessionRecord r;
        r.id = new_id();
        r.composite = std::move(composite);
        r.created = r.touched = std::chrono::steady_clock::now();
        const auto id = r.id;
        sessions_.emplace(id, std::move(r));
        return id;
    }

    /// Copy of the record; refreshes its idle timer.
    std::optional<SessionRecord> get(const std::string& id)
    {
        std::lock_guard lk(m_);
        sweep();
        auto it = sessions_.find(id);
        if (it == sessions_.end())
            return std::nullopt;
        it->second.touched = std::chrono::steady_clock::now();
        return it->second;
    }

    template <typename F>
    bool update(const std::string& id, F&& f)
    {
        std::lock_guard lk(m_);
        auto it = sessions_.find(id);
        if (it == sessions_.end())
            return false;
        f(it->second);
        it->second.touched = std::chrono::steady_clock::now();
        return true;
    }

    bool erase(const std::string& id)
    {
        std::lock_guard lk(m_);
        return sessions_.erase(id) > 0;
    }

    std::size_t size()
    {
        std::lock_guard lk(m_);
        sweep();
        return sessions_.size();
    }

private:
    void sweep()
    {
        const auto now = std::chrono::steady_clock::now();
        for (auto it = sessions_.begin(); it != sessions_.end();)
            it = now - it->second.touched > idle_ ? sessions_.erase(it) : std::next(it);
    }

    std::string new_id()
    {
        static constexpr char hex[] = "0123456789abcdef";
        std::string id;
        do {
            id.clear();
            for (int i = 0; i < 4; ++i) {
                auto v = rng_();
                for (int k = 0; k < 8; ++k, v >>= 4)
                    id.push_back(hex[v & 15]);
            }
        } while (sessions_.contains(id));
        return id;
    }

    std::mutex m_;
    std::chrono::seconds idle_;
    std::map<std::string, SessionRecord> sessions_;
    std::mt19937 rng_{std::random_device{}()};
};

class Service {
public:
    Service(ServiceConfig cfg, std::optional<WeightArchive> weights, std::optional<WeightArchive> color_weights = {})
        : cfg_(std::move(cfg)), sessions_(cfg_.session_idle_timeout), workers_(std::max(1, cfg_.workers))
    {
        if (weights) {
            config_hash_ = weights->metadata.config_hash;
            harmonizer_ = std::make_shared<const Harmonizer>(*weights);
        }
        if (color_weights)
            color_ = std::make_shared<const Harmonizer>(*color_weights);
        routes();
    }

    httplib::Server& server() noexcept { return server_; }
    SessionStore& sessions() noexcept { return sessions_; }

    bool listen() { return server_.listen(cfg_.host, cfg_.port); }
    /// Binds to a free port and returns it; follow with listen_after_bind().
    int bind_any() { return server_.bind_to_any_port(cfg_.host); }
    bool listen_after_bind() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }

private:
    struct Inputs {
        HarmonizeRequest request;
        std::optional<std::string> session;
    };

    void routes()
    {
        const auto threads = static_cast<std::size_t>(std::max(4, cfg_.workers + 2));
        server_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
        server_.set_payload_max_length(cfg_.max_body_bytes + (1u << 16));
        server_.set_default_headers({{"Access-Control-Allow-Origin", cfg_.cors_origin},
                                     {"Access-Control-Expose-Headers", kMetaHeader}});
        server_.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            if (req.get_header_value_u64("Content-Length") > cfg_.max_body_bytes) {
                fail(res, 400, "request body exceeds " + std::to_string(cfg_.max_body_bytes) + " bytes");
                return httplib::Server::HandlerResponse::Handled;
            }
            return httplib::Server::HandlerResponse::Unhandled;
        });
        server_.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            res.status = 204;
        });

        server_.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) {
            nlohmann::json j{{"status", "ok"},
                             {"weights_loaded", harmonizer_ != nullptr},
                             {"color_weights_loaded", color_ != nullptr},
                             {"model_config_hash", harmonizer_ ? nlohmann::json(config_hash_) : nlohmann::json()}};
            res.set_content(j.dump(), "application/json");
        });
        server_.Post("/api/harmonize", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { run(req, res, std::nullopt); });
        });
        server_.Post("/api/color_transfer", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] { run(req, res, ratios(req)); });
        });
        server_.Post("/api/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                require_multipart(req);
                if (!req.has_file("composite"))
                    throw HttpError(400, "missing composite");
                const auto composite = decode_composite(req.get_file_value("composite").content);
                const auto id = sessions_.create(composite);
                sessions_.update(id, [&](SessionRecord& r) {
                    if (req.has_file("fg_mask"))
                        r.fg_mask = decode_mask_part(req, "fg_mask");
                    if (req.has_file("guide_mask"))
                        r.guide_mask = decode_mask_part(req, "guide_mask");
                });
                res.status = 201;
                res.set_content(nlohmann::json{{"session_id", id}}.dump(), "application/json");
            });
        });
        server_.Get("/api/sessions/:id", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.get(req.path_params.at("id"));
            if (!s)
                return fail(res, 404, "unknown session");
            nlohmann::json j{{"session_id", s->id},
                             {"width", s->composite.width()},
                             {"height", s->composite.height()},
                             {"has_fg_mask", s->fg_mask.has_value()},
                             {"has_guide_mask", s->guide_mask.has_value()},
                             {"has_result", !s->last_result.empty()}};
            res.set_content(j.dump(), "application/json");
        });
        server_.Get("/api/sessions/:id/result", [this](const httplib::Request& req, httplib::Response& res) {
            const auto s = sessions_.get(req.path_params.at("id"));
            if (!s || s->last_result.empty())
                return fail(res, 404, "no result for session");
            res.set_content(std::string(s->last_result.begin(), s->last_result.end()), "image/png");
        });
        server_.Delete("/api/sessions/:id", [this](const httplib::Request& req, httplib::Response& res) {
            if (!sessions_.erase(req.path_params.at("id")))
                return fail(res, 404, "unknown session");
            res.status = 204;
        });
    }

    static void fail(httplib::Response& res, int status, const std::string& msg)
    {
        res.status = status;
        res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    }

    template <typename F>
    static void guarded(httplib::Response& res, F&& f)
    {
        try {
            f();
        } catch (const HttpError& e) {
            fail(res, e.status(), e.what());
        } catch (const RequestError& e) {
            fail(res, 422, e.what());
        } catch (const ShapeError& e) {
            fail(res, 422, e.what());
        } catch (const EmptyRegionError& e) {
            fail(res, 422, e.what());
        } catch (const std::exception& e) {
            fail(res, 500, e.what());
        }
    }

    static void require_multipart(const httplib::Request& req)
    {
        if (!req.is_multipart_form_data())
            throw HttpError(400, "expected multipart/form-data");
    }

    void check_dimensions(int h, int w) const
    {
        if (h > cfg_.max_dimension || w > cfg_.max_dimension)
            throw HttpError(400, "image exceeds " + std::to_string(cfg_.max_dimension) + " pixels per side");
    }

    Image decode_composite(const std::string& content) const
    {
        Image img;
        try {
            img = decode_image(std::span(reinterpret_cast<const std::uint8_t*>(content.data()), content.size()), 3);
        } catch (const Error& e) {
            throw HttpError(400, std::string("composite: ") + e.what());
        }
        check_dimensions(img.height(), img.width());
        return img;
    }

    Mask decode_mask_part(const httplib::Request& req, const std::string& name) const
    {
        const auto& content = req.get_file_value(name).content;
        Mask m;
        try {
            m = decode_mask(std::span(reinterpret_cast<const std::uint8_t*>(content.data()), content.size()));
        } catch (const Error& e) {
            throw HttpError(400, name + ": " + e.what());
        }
        check_dimensions(m.height(), m.width());
        return m;
    }

    static double ratio_field(const httplib::Request& req, const nlohmann::json& params, const std::string& key)
    {
        if (params.contains(key)) {
            if (!params[key].is_number())
                throw HttpError(400, key + " must be a number");
            return params[key].get<double>();
        }
        if (!req.has_file(key))
            throw HttpError(400, "missing " + key);
        const auto& text = req.get_file_value(key).content;
        try {
            std::size_t used = 0;
            const double v = std::stod(text, &used);
            if (used != text.size())
                throw std::invalid_argument(key);
            return v;
        } catch (const std::exception&) {
            throw HttpError(400, key + " is not a number");
        }
    }

    static BlendRatios ratios(const httplib::Request& req)
    {
        require_multipart(req);
        nlohmann::json params = nlohmann::json::object();
        if (req.has_file("params")) {
            params = nlohmann::json::parse(req.get_file_value("params").content, nullptr, false);
            if (params.is_discarded() || !params.is_object())
                throw HttpError(400, "params is not a JSON object");
        }
        BlendRatios r{ratio_field(req, params, "r1"), ratio_field(req, params, "r2")};
        r.validate();
        return r;
    }

    Inputs inputs(const httplib::Request& req)
    {
        require_multipart(req);
        Inputs in;
        std::optional<SessionRecord> session;
        if (req.has_file("session_id")) {
            in.session = req.get_file_value("session_id").content;
            session = sessions_.get(*in.session);
            if (!session)
                throw HttpError(404, "unknown session");
        }
        if (req.has_file("composite"))
            in.request.composite = decode_composite(req.get_file_value("composite").content);
        else if (session)
            in.request.composite = session->composite;
        else
            throw HttpError(400, "missing composite");

        if (req.has_file("fg_mask"))
            in.request.fg_mask = decode_mask_part(req, "fg_mask");
        else if (session && session->fg_mask)
            in.request.fg_mask = *session->fg_mask;
        else
            throw HttpError(400, "missing fg_mask");

        if (req.has_file("guide_mask"))
            in.request.guide_mask = decode_mask_part(req, "guide_mask");
        else if (session && session->guide_mask && !req.has_file("composite"))
            in.request.guide_mask = session->guide_mask;
        return in;
    }

    void run(const httplib::Request& req, httplib::Response& res, const std::optional<BlendRatios>& blend)
    {
        const auto start = std::chrono::steady_clock::now();
        const auto h = harmonizer_;
        if (!h)
            throw HttpError(503, "model not loaded");
        if (blend && !color_)
            throw HttpError(503, "colour weights not loaded");
        auto in = inputs(req);

        HarmonizeResult result;
        workers_.acquire();
        try {
            result = blend ? color_transfer(in.request, *blend, *h, *color_) : h->run(in.request);
        } catch (...) {
            workers_.release();
            throw;
        }
        workers_.release();

        const auto png = encode_png(result.output);
        if (in.session)
            sessions_.update(*in.session, [&](SessionRecord& r) {
                r.composite = in.request.composite;
                r.fg_mask = in.request.fg_mask;
                r.guide_mask = in.request.guide_mask;
                r.last_result = png;
            });
        const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
        nlohmann::json meta{{"latency_ms", ms}, {"used_default_reference", result.used_default_reference}};
        if (blend)
            meta.update({{"r1", blend->r1}, {"r2", blend->r2}});
        res.set_header(kMetaHeader, meta.dump());
        res.set_content(std::string(png.begin(), png.end()), "image/png");
    }

    ServiceConfig cfg_;
    httplib::Server server_;
    SessionStore sessions_;
    Semaphore workers_;
    std::shared_ptr<const Harmonizer> harmonizer_;
    std::shared_ptr<const Harmonizer> color_;
    std::string config_hash_;
};

} // namespace iharmon::service

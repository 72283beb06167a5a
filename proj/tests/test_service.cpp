#include <gtest/gtest.h>

#include <future>
#include <thread>
#include <vector>

#include "iharmon/service.hpp"
#include "test_util.hpp"

using namespace iharmon;
using namespace iharmon::service;

namespace {

ModelConfig small_config(std::uint64_t seed)
{
    ModelConfig c;
    c.style_dim = 8;
    c.base_channels = 4;
    c.style_base_channels = 4;
    c.residual_blocks = 1;
    c.resolution = 32;
    c.init_seed = seed;
    return c;
}

WeightArchive weights(std::uint64_t seed = 7)
{
    return make_archive(HarmonizationModel(small_config(seed)), 2, 10);
}

std::string str(const Bytes& b)
{
    return {b.begin(), b.end()};
}

Bytes bytes(const std::string& s)
{
    return {s.begin(), s.end()};
}

struct Scene {
    Image composite;
    Mask fg;
    Mask guide;
};

Scene scene(int h = 48, int w = 64)
{
    std::mt19937_64 rng(5);
    Scene s;
    s.composite = quantize8(test::random_image(rng, h, w, 3, 0.2f, 0.8f));
    s.fg = test::rect_mask(h, w, h / 4, w / 2, 3 * h / 4, w - 4);
    s.guide = test::rect_mask(h, w, 0, 0, h, w / 3);
    return s;
}

httplib::MultipartFormDataItems form(const Scene& s, bool fg = true, bool guide = true)
{
    httplib::MultipartFormDataItems items{{"composite", str(encode_png(s.composite)), "c.png", "image/png"}};
    if (fg)
        items.push_back({"fg_mask", str(encode_png(s.fg)), "f.png", "image/png"});
    if (guide)
        items.push_back({"guide_mask", str(encode_png(s.guide)), "g.png", "image/png"});
    return items;
}

// Runs a service on a free local port for the lifetime of the object.
class Running {
public:
    Running(ServiceConfig cfg, std::optional<WeightArchive> w, std::optional<WeightArchive> color = {})
        : svc_(std::move(cfg), std::move(w), std::move(color))
    {
        port_ = svc_.bind_any();
        thread_ = std::thread([this] { svc_.listen_after_bind(); });
        svc_.server().wait_until_ready();
    }
    ~Running()
    {
        svc_.stop();
        thread_.join();
    }
    httplib::Client client() const
    {
        httplib::Client c("127.0.0.1", port_);
        c.set_read_timeout(60, 0);
        return c;
    }
    Service& service() { return svc_; }

private:
    Service svc_;
    int port_ = 0;
    std::thread thread_;
};

ServiceConfig config()
{
    ServiceConfig c;
    c.workers = 2;
    return c;
}

} // namespace

TEST(Service, HealthWithoutWeights)
{
    Running r(config(), std::nullopt);
    auto c = r.client();
    auto res = c.Get("/api/health");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const auto j = nlohmann::json::parse(res->body);
    EXPECT_EQ(j["status"], "ok");
    EXPECT_FALSE(j["weights_loaded"].get<bool>());
    EXPECT_TRUE(j["model_config_hash"].is_null());
    auto h = c.Post("/api/harmonize", form(scene()));
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 503);
}

TEST(Service, HealthReportsConfigHash)
{
    const auto w = weights();
    Running r(config(), w);
    auto res = r.client().Get("/api/health");
    ASSERT_TRUE(res);
    const auto j = nlohmann::json::parse(res->body);
    EXPECT_TRUE(j["weights_loaded"].get<bool>());
    EXPECT_EQ(j["model_config_hash"], w.metadata.config_hash);
    EXPECT_EQ(j["model_config_hash"], small_config(7).hash());
}

TEST(Service, HarmonizeReturnsPngOfInputSize)
{
    const auto w = weights();
    Running r(config(), w);
    const auto s = scene();
    auto res = r.client().Post("/api/harmonize", form(s));
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
    const auto out = decode_image(bytes(res->body));
    EXPECT_EQ(out.height(), s.composite.height());
    EXPECT_EQ(out.width(), s.composite.width());
    const auto meta = nlohmann::json::parse(res->get_header_value(kMetaHeader));
    EXPECT_FALSE(meta["used_default_reference"].get<bool>());
    EXPECT_GE(meta["latency_ms"].get<double>(), 0.0);

    HarmonizeRequest req{s.composite, s.fg, s.guide, {}};
    EXPECT_EQ(res->body, str(encode_png(Harmonizer(w).run(req).output)));
}

TEST(Service, DefaultReferenceMatchesDirectPipeline)
{
    const auto w = weights();
    Running r(config(), w);
    const auto s = scene();
    auto res = r.client().Post("/api/harmonize", form(s, true, false));
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    EXPECT_TRUE(nlohmann::json::parse(res->get_header_value(kMetaHeader))["used_default_reference"].get<bool>());
    HarmonizeRequest req{s.composite, s.fg, default_reference(s.composite, s.fg), {}};
    EXPECT_EQ(res->body, str(encode_png(Harmonizer(w).run(req).output)));
}

TEST(Service, BadRequests)
{
    ServiceConfig cfg = config();
    cfg.max_dimension = 60;
    Running r(cfg, weights());
    auto c = r.client();
    const auto s = scene(48, 48);

    auto missing = c.Post("/api/harmonize", form(s, false, false));
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 400);

    auto not_multipart = c.Post("/api/harmonize", "{}", "application/json");
    ASSERT_TRUE(not_multipart);
    EXPECT_EQ(not_multipart->status, 400);

    auto items = form(s);
    items[0].content = "not an image";
    auto garbage = c.Post("/api/harmonize", items);
    ASSERT_TRUE(garbage);
    EXPECT_EQ(garbage->status, 400);

    auto big = c.Post("/api/harmonize", form(scene(48, 64)));
    ASSERT_TRUE(big);
    EXPECT_EQ(big->status, 400);
    EXPECT_NE(big->body.find("60"), std::string::npos);

    auto empty = s;
    empty.fg = Mask(48, 48);
    auto e = c.Post("/api/harmonize", form(empty));
    ASSERT_TRUE(e);
    EXPECT_EQ(e->status, 422);

    auto misaligned = s;
    misaligned.fg = test::rect_mask(40, 48, 10, 10, 20, 20);
    auto m = c.Post("/api/harmonize", form(misaligned));
    ASSERT_TRUE(m);
    EXPECT_EQ(m->status, 422);
}

TEST(Service, OversizedBodyRejected)
{
    ServiceConfig cfg = config();
    cfg.max_body_bytes = 2000;
    Running r(cfg, weights());
    auto res = r.client().Post("/api/harmonize", form(scene()));
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400);
    EXPECT_EQ(kMaxBodyBytes, 32u * 1024 * 1024);
    EXPECT_EQ(kMaxDimension, 4096);
}

TEST(Service, ColorTransfer)
{
    Running r(config(), weights(7), weights(99));
    auto c = r.client();
    const auto s = scene();
    auto plain = c.Post("/api/harmonize", form(s));
    ASSERT_TRUE(plain);
    ASSERT_EQ(plain->status, 200);

    auto items = form(s);
    items.push_back({"r1", "1", "", ""});
    items.push_back({"r2", "1", "", ""});
    auto same = c.Post("/api/color_transfer", items);
    ASSERT_TRUE(same);
    ASSERT_EQ(same->status, 200) << same->body;
    EXPECT_EQ(same->body, plain->body);

    auto json_items = form(s);
    json_items.push_back({"params", R"({"r1": 0.5, "r2": 0.5})", "", "application/json"});
    auto mid = c.Post("/api/color_transfer", json_items);
    ASSERT_TRUE(mid);
    ASSERT_EQ(mid->status, 200) << mid->body;
    EXPECT_NE(mid->body, plain->body);
    auto mid2 = c.Post("/api/color_transfer", json_items);
    ASSERT_TRUE(mid2);
    EXPECT_EQ(mid->body, mid2->body);

    auto bad = form(s);
    bad.push_back({"r1", "1.5", "", ""});
    bad.push_back({"r2", "1", "", ""});
    auto out_of_range = c.Post("/api/color_transfer", bad);
    ASSERT_TRUE(out_of_range);
    EXPECT_EQ(out_of_range->status, 422);

    auto no_ratio = c.Post("/api/color_transfer", form(s));
    ASSERT_TRUE(no_ratio);
    EXPECT_EQ(no_ratio->status, 400);
}

TEST(Service, ColorTransferNeedsColorWeights)
{
    Running r(config(), weights());
    auto items = form(scene());
    items.push_back({"r1", "1", "", ""});
    items.push_back({"r2", "1", "", ""});
    auto res = r.client().Post("/api/color_transfer", items);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 503);
}

TEST(Service, ConcurrentIdenticalRequestsAgree)
{
    Running r(config(), weights());
    const auto items = form(scene());
    std::vector<std::future<std::string>> jobs;
    for (int i = 0; i < 6; ++i)
        jobs.push_back(std::async(std::launch::async, [&] {
            auto c = r.client();
            auto res = c.Post("/api/harmonize", items);
            return res && res->status == 200 ? res->body : std::string();
        }));
    const auto first = jobs[0].get();
    ASSERT_FALSE(first.empty());
    for (std::size_t i = 1; i < jobs.size(); ++i)
        EXPECT_EQ(jobs[i].get(), first);
}

TEST(Service, Cors)
{
    Running r(config(), weights());
    auto c = r.client();
    auto res = c.Get("/api/health");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->get_header_value("Access-Control-Allow-Origin"), "*");
    auto pre = c.Options("/api/harmonize");
    ASSERT_TRUE(pre);
    EXPECT_EQ(pre->status, 204);
    EXPECT_NE(pre->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}

TEST(Service, Sessions)
{
    Running r(config(), weights());
    auto c = r.client();
    const auto s = scene();
    auto created = c.Post("/api/sessions", form(s, true, false));
    ASSERT_TRUE(created);
    ASSERT_EQ(created->status, 201) << created->body;
    const auto id = nlohmann::json::parse(created->body)["session_id"].get<std::string>();

    auto info = c.Get("/api/sessions/" + id);
    ASSERT_TRUE(info);
    const auto j = nlohmann::json::parse(info->body);
    EXPECT_EQ(j["width"], 64);
    EXPECT_TRUE(j["has_fg_mask"].get<bool>());
    EXPECT_FALSE(j["has_result"].get<bool>());

    // Only the guide changes between runs; the composite and fg mask come from the session.
    httplib::MultipartFormDataItems items{{"session_id", id, "", ""},
                                          {"guide_mask", str(encode_png(s.guide)), "g.png", "image/png"}};
    auto run = c.Post("/api/harmonize", items);
    ASSERT_TRUE(run);
    ASSERT_EQ(run->status, 200) << run->body;
    auto direct = c.Post("/api/harmonize", form(s));
    ASSERT_TRUE(direct);
    EXPECT_EQ(run->body, direct->body);

    auto result = c.Get("/api/sessions/" + id + "/result");
    ASSERT_TRUE(result);
    EXPECT_EQ(result->status, 200);
    EXPECT_EQ(result->body, run->body);

    auto del = c.Delete("/api/sessions/" + id);
    ASSERT_TRUE(del);
    EXPECT_EQ(del->status, 204);
    auto gone = c.Get("/api/sessions/" + id);
    ASSERT_TRUE(gone);
    EXPECT_EQ(gone->status, 404);
    auto unknown = c.Post("/api/harmonize", httplib::MultipartFormDataItems{{"session_id", id, "", ""}});
    ASSERT_TRUE(unknown);
    EXPECT_EQ(unknown->status, 404);
}

TEST(Service, SessionsExpire)
{
    SessionStore store(std::chrono::seconds(0));
    const auto id = store.create(Image(2, 2, 3));
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    EXPECT_FALSE(store.get(id).has_value());
    EXPECT_EQ(store.size(), 0u);

    SessionStore keep(std::chrono::seconds(60));
    const auto a = keep.create(Image(2, 2, 3));
    const auto b = keep.create(Image(2, 2, 3));
    EXPECT_NE(a, b);
    EXPECT_TRUE(keep.get(a).has_value());
    EXPECT_EQ(keep.size(), 2u);
}

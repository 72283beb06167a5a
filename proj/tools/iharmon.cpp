// iharmon: dataset synthesis, training, inference, evaluation and the HTTP service.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "iharmon/evaluation.hpp"
#include "iharmon/inference.hpp"
#include "iharmon/synthesis/dataset.hpp"
#include "iharmon/synthesis/toy.hpp"
#include "iharmon/training.hpp"
#include "iharmon/service.hpp"

namespace fs = std::filesystem;
using namespace iharmon;

namespace {

service::Service* g_service = nullptr;

void on_signal(int)
{
    if (g_service)
        g_service->stop();
}

int synth(const fs::path& annotations, const fs::path& out, std::size_t count, std::uint64_t seed)
{
    const auto m = synthesis::build_dataset(annotations, out, count, seed);
    std::cout << "wrote " << m.records.size() << " samples to " << out.string() << '\n';
    return m.records.size() == count ? 0 : 3;
}

int toy_sources(const fs::path& out, std::size_t count, std::uint64_t seed, int size)
{
    synthesis::ToySceneOptions opt;
    opt.size = size;
    const auto ann = synthesis::write_toy_sources(out, count, seed, opt);
    std::cout << ann.string() << '\n';
    return 0;
}

struct TrainArgs {
    fs::path config;
    int stage = 0;
    fs::path resume;
    fs::path log;
    fs::path out;
    int progress = 50;
};

int train(const TrainArgs& a)
{
    auto plan = read_training_plan(a.config);
    if (a.stage != 0) {
        std::erase_if(plan, [&](const StageConfig& c) { return c.stage != a.stage; });
        if (plan.empty())
            throw Error("config has no stage " + std::to_string(a.stage));
    }
    std::ofstream log_file;
    TrainHooks hooks;
    if (!a.log.empty()) {
        log_file.open(a.log);
        if (!log_file)
            throw Error("cannot write " + a.log.string());
        hooks.log = &log_file;
    }
    hooks.on_step = [&](const StepLog& l) {
        if (a.progress > 0 && l.step % a.progress == 0)
            std::cerr << "stage " << l.stage << " step " << l.step << " loss " << l.loss.total << '\n';
    };

    std::optional<TrainState> start;
    if (!a.resume.empty())
        start = load_checkpoint(a.resume);
    WeightArchive final_weights;
    if (plan.size() == 1) {
        TrainState state = start ? std::move(*start) : initial_state(plan[0]);
        train_stage(state, plan[0], load_training_set(plan[0].dataset, plan[0].resolution), hooks);
        final_weights = export_weights(state);
    } else {
        final_weights = run_curriculum(plan, hooks, std::move(start));
    }
    if (!a.out.empty()) {
        save_weights(final_weights, a.out);
        std::cout << "weights: " << a.out.string() << '\n';
    }
    return 0;
}

struct RunArgs {
    fs::path composite, fg_mask, guide_mask, weights, out, color_weights;
    std::optional<double> r1, r2;
    int poly_degree = 3;
};

int run(const RunArgs& a)
{
    HarmonizeRequest req;
    req.composite = read_image(a.composite);
    req.fg_mask = read_mask(a.fg_mask);
    if (!a.guide_mask.empty())
        req.guide_mask = read_mask(a.guide_mask);
    req.options.poly_degree = a.poly_degree;
    const Harmonizer h(load_weights(a.weights));

    HarmonizeResult res;
    if (a.r1 || a.r2 || !a.color_weights.empty()) {
        if (a.color_weights.empty())
            throw Error("--r1/--r2 need --color-weights");
        const Harmonizer color(load_weights(a.color_weights));
        res = color_transfer(req, {a.r1.value_or(1.0), a.r2.value_or(1.0)}, h, color);
    } else {
        res = h.run(req);
    }
    write_file(a.out, encode_png(res.output));
    return 0;
}

int eval(const fs::path& weights, const fs::path& data, const fs::path& out, int resolution, bool fg_only)
{
    EvalOptions opt{resolution, fg_only};
    std::vector<MetricsRow> rows{evaluate("direct_composite", direct_composite, data, opt)};
    if (!weights.empty()) {
        const Harmonizer h(load_weights(weights));
        rows.push_back(evaluate("iharmon", harmonizer_method(h), data, opt));
    }
    for (const auto& r : rows)
        std::cout << r.method << ": psnr " << r.psnr << " ssim " << r.ssim << " mse " << r.mse << " (n=" << r.n_images
                  << ", skipped " << r.skipped << ")\n";
    if (!out.empty()) {
        std::ofstream f(out);
        if (!f)
            throw Error("cannot write " + out.string());
        f << report_json(rows).dump(2) << '\n';
    }
    return 0;
}

int serve(service::ServiceConfig cfg, const fs::path& weights, const fs::path& color_weights)
{
    std::optional<WeightArchive> w, cw;
    if (!weights.empty())
        w = load_weights(weights);
    if (!color_weights.empty())
        cw = load_weights(color_weights);
    service::Service svc(cfg, std::move(w), std::move(cw));
    g_service = &svc;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cerr << "listening on " << cfg.host << ':' << cfg.port << '\n';
    const bool ok = svc.listen();
    g_service = nullptr;
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Interactive region-guided image harmonization"};
    app.require_subcommand(1);

    fs::path ann, synth_out;
    std::size_t count = 0;
    std::uint64_t seed = 0;
    auto* s = app.add_subcommand("synth", "Synthesize composite/ground-truth pairs from annotated images");
    s->add_option("--annotations", ann, "annotations.json")->required()->check(CLI::ExistingFile);
    s->add_option("--out", synth_out, "Output dataset directory")->required();
    s->add_option("--count", count, "Number of samples")->required();
    s->add_option("--seed", seed, "Seed");

    fs::path toy_out;
    std::size_t toy_count = 16;
    std::uint64_t toy_seed = 0;
    int toy_size = 64;
    auto* t = app.add_subcommand("toy-sources", "Write procedural source images with instance masks");
    t->add_option("--out", toy_out, "Output directory")->required();
    t->add_option("--count", toy_count, "Number of scenes");
    t->add_option("--seed", toy_seed, "Seed");
    t->add_option("--size", toy_size, "Scene side length");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train one stage or a curriculum");
    tr->add_option("--config", ta.config, "Stage config or {\"stages\": [...]}")->required()->check(CLI::ExistingFile);
    tr->add_option("--stage", ta.stage, "Run only this stage of the config")->check(CLI::Range(1, 3));
    tr->add_option("--resume", ta.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    tr->add_option("--log", ta.log, "Per-step JSON log");
    tr->add_option("--out", ta.out, "Write the final weights here");
    tr->add_option("--progress", ta.progress, "Print every N steps (0 = quiet)");

    RunArgs ra;
    auto* r = app.add_subcommand("run", "Harmonize one composite");
    r->add_option("--composite", ra.composite)->required()->check(CLI::ExistingFile);
    r->add_option("--fg-mask", ra.fg_mask)->required()->check(CLI::ExistingFile);
    r->add_option("--guide-mask", ra.guide_mask)->check(CLI::ExistingFile);
    r->add_option("--weights", ra.weights)->required()->check(CLI::ExistingFile);
    r->add_option("--out", ra.out)->required();
    r->add_option("--r1", ra.r1)->check(CLI::Range(0.0, 1.0));
    r->add_option("--r2", ra.r2)->check(CLI::Range(0.0, 1.0));
    r->add_option("--color-weights", ra.color_weights)->check(CLI::ExistingFile);
    r->add_option("--poly-degree", ra.poly_degree)->check(CLI::Range(1, 7));

    fs::path ew, edata, eout;
    int eres = 0;
    bool efg = false;
    auto* e = app.add_subcommand("eval", "PSNR/SSIM/MSE against ground truth, with the direct-composite row");
    e->add_option("--weights", ew, "Model weights (omit for the baseline only)")->check(CLI::ExistingFile);
    e->add_option("--data", edata, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    e->add_option("--out", eout, "report.json");
    e->add_option("--resolution", eres, "Resize to NxN before scoring (0 = stored size)");
    e->add_flag("--foreground-only", efg, "PSNR/MSE over the foreground only");

    service::ServiceConfig sc;
    fs::path sw, scw;
    int timeout_s = 1800;
    auto* sv = app.add_subcommand("serve", "Run the HTTP service");
    sv->add_option("--host", sc.host);
    sv->add_option("--port", sc.port);
    sv->add_option("--weights", sw)->check(CLI::ExistingFile);
    sv->add_option("--color-weights", scw)->check(CLI::ExistingFile);
    sv->add_option("--workers", sc.workers)->check(CLI::PositiveNumber);
    sv->add_option("--session-timeout", timeout_s, "Idle seconds before a session expires");
    sv->add_option("--cors-origin", sc.cors_origin);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*s)
            return synth(ann, synth_out, count, seed);
        if (*t)
            return toy_sources(toy_out, toy_count, toy_seed, toy_size);
        if (*tr)
            return train(ta);
        if (*r)
            return run(ra);
        if (*e)
            return eval(ew, edata, eout, eres, efg);
        if (*sv) {
            sc.session_idle_timeout = std::chrono::seconds(timeout_s);
            return serve(sc, sw, scw);
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 2;
    }
    return 0;
}

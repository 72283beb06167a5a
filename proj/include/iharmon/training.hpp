#pragma once

// Stage-wise training: batch assembly, the differentiable loss graph, Adam,
// checkpoint/resume and the three-stage curriculum.
//
// Batch order is a pure function of (seed, step): step s reads positions
// [s*B, (s+1)*B) of an endless stream made of per-epoch permutations, so a
// resumed run sees exactly the batches of an uninterrupted one.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iharmon/archive.hpp"
#include "iharmon/error.hpp"
#include "iharmon/imaging.hpp"
#include "iharmon/losses.hpp"
#include "iharmon/model.hpp"
#include "iharmon/nn/autograd.hpp"
#include "iharmon/nn/ops.hpp"
#include "iharmon/synthesis/dataset.hpp"

namespace iharmon {

class TrainingError : public Error {
public:
    using Error::Error;
};

inline double default_learning_rate(int stage)
{
    switch (stage) {
    case 1: return 1e-4;
    case 2: return 1e-5;
    default: return 1e-6;
    }
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct StageConfig {
    int stage = 1;
    std::filesystem::path dataset;
    double learning_rate = 1e-4;
    int batch_size = 48;
    long long steps = 0;
    int resolution = 256;
    LossWeights loss;
    AdamConfig adam;
    std::uint64_t seed = 0;
    long long checkpoint_every = 0; ///< 0 disables periodic checkpoints
    std::filesystem::path checkpoint_dir;
    /// Stage 1 only: when false the consistency and triplet terms are switched off.
    bool stage1_style_terms = true;
    /// Used when training starts from scratch (stage 1 or no init weights).
    ModelConfig model;
    /// Weights to start from (stage > 1 when not chained by run_curriculum).
    std::filesystem::path init_weights;

    void validate() const
    {
        if (stage < 1 || stage > 3)
            throw Error("stage must be 1, 2 or 3");
        if (!(learning_rate > 0))
            throw Error("learning rate must be positive");
        if (batch_size < 1)
            throw Error("batch size must be positive");
        if (steps < 0)
            throw Error("step count must be non-negative");
        if (resolution < 16 || resolution % 16 != 0)
            throw Error("resolution must be a positive multiple of 16");
        if (checkpoint_every < 0)
            throw Error("checkpoint cadence must be non-negative");
        loss.validate();
    }

    /// Loss weights with the stage-1 switch applied.
    LossWeights effective_loss() const
    {
        LossWeights w = loss;
        if (stage == 1 && !stage1_style_terms)
            w.lambda = w.beta = 0.0;
        return w;
    }
};

inline void to_json(nlohmann::json& j, const StageConfig& c)
{
    j = nlohmann::json{{"stage", c.stage},
                       {"dataset", c.dataset.string()},
                       {"learning_rate", c.learning_rate},
                       {"batch_size", c.batch_size},
                       {"steps", c.steps},
                       {"resolution", c.resolution},
                       {"loss", c.loss},
                       {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
                       {"seed", c.seed},
                       {"checkpoint_every", c.checkpoint_every},
                       {"checkpoint_dir", c.checkpoint_dir.string()},
                       {"stage1_style_terms", c.stage1_style_terms},
                       {"model", c.model},
                       {"init_weights", c.init_weights.string()}};
}

/// Missing keys take their defaults; the learning rate defaults by stage.
inline void from_json(const nlohmann::json& j, StageConfig& c)
{
    c = StageConfig{};
    c.stage = j.value("stage", 1);
    c.dataset = j.value("dataset", std::string{});
    c.learning_rate = j.value("learning_rate", default_learning_rate(c.stage));
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.resolution = j.value("resolution", c.resolution);
    if (j.contains("loss"))
        j.at("loss").get_to(c.loss);
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        c.adam.beta1 = a.value("beta1", c.adam.beta1);
        c.adam.beta2 = a.value("beta2", c.adam.beta2);
        c.adam.epsilon = a.value("epsilon", c.adam.epsilon);
    }
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.checkpoint_dir = j.value("checkpoint_dir", std::string{});
    c.stage1_style_terms = j.value("stage1_style_terms", c.stage1_style_terms);
    if (j.contains("model"))
        j.at("model").get_to(c.model);
    else
        c.model.resolution = c.resolution;
    c.init_weights = j.value("init_weights", std::string{});
}

namespace detail {

inline void resolve_paths(StageConfig& c, const std::filesystem::path& base)
{
    for (auto* p : {&c.dataset, &c.checkpoint_dir, &c.init_weights})
        if (!p->empty() && p->is_relative())
            *p = base / *p;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open config " + path.string());
    try {
        nlohmann::json j;
        in >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed config " + path.string() + ": " + e.what());
    }
}

} // namespace detail

/// One stage from a JSON file. Relative paths are taken relative to the file's directory.
inline StageConfig read_stage_config(const std::filesystem::path& path)
{
    const auto j = detail::read_json_file(path);
    try {
        auto c = j.get<StageConfig>();
        detail::resolve_paths(c, path.parent_path());
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed config " + path.string() + ": " + e.what());
    }
}

/// Either a single stage object or {"stages": [...]}; paths resolved as in read_stage_config.
inline std::vector<StageConfig> read_training_plan(const std::filesystem::path& path)
{
    const auto j = detail::read_json_file(path);
    if (!j.is_object() || !j.contains("stages"))
        return {read_stage_config(path)};
    std::vector<StageConfig> out;
    try {
        for (const auto& s : j.at("stages")) {
            auto c = s.get<StageConfig>();
            detail::resolve_paths(c, path.parent_path());
            c.validate();
            out.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed config " + path.string() + ": " + e.what());
    }
    if (out.empty())
        throw Error("config " + path.string() + " lists no stages");
    return out;
}

// -- batches --------------------------------------------------------------

/// Resizes a sample to res x res (bilinear images, nearest binary masks).
inline synthesis::CompositeSample prepare_sample(const synthesis::CompositeSample& s, int res)
{
    if (s.composite.height() == res && s.composite.width() == res)
        return s;
    synthesis::CompositeSample o;
    o.composite = resize(s.composite, res, res);
    o.ground_truth = resize(s.ground_truth, res, res);
    o.fg_mask = resize_mask(s.fg_mask, res, res);
    o.guide_mask = resize_mask(s.guide_mask, res, res);
    o.meta = s.meta;
    return o;
}

struct Batch {
    nn::Tensor composite; ///< N x 3 x H x W
    nn::Tensor ground_truth;
    nn::Tensor fg_mask;   ///< N x 1 x H x W, binary
    nn::Tensor reference; ///< style-encoder region, N x 1 x H x W
    std::vector<std::string> ids;
    int size() const { return static_cast<int>(ids.size()); }
};

/// Reference region for the style encoder: the whole background in stage 1, the guide mask later.
inline Mask reference_region(const synthesis::CompositeSample& s, int stage)
{
    return stage == 1 ? invert(binarize(s.fg_mask)) : binarize(s.guide_mask);
}

using WarningSink = synthesis::WarningSink;

/// Stacks samples (already at model resolution) into a batch; samples with an empty
/// foreground or reference are skipped with a warning.
inline Batch make_batch(const std::vector<const synthesis::CompositeSample*>& samples, int stage,
                        const WarningSink& warn = synthesis::stderr_warning)
{
    std::vector<const synthesis::CompositeSample*> keep;
    std::vector<Mask> refs;
    for (const auto* s : samples) {
        auto ref = reference_region(*s, stage);
        if (s->fg_mask.count_selected() == 0 || ref.count_selected() == 0) {
            warn("skipping sample '" + s->meta.id + "': empty foreground or reference region");
            continue;
        }
        if (!keep.empty() && !keep.front()->composite.same_shape(s->composite))
            throw ShapeError("batch samples differ in size");
        keep.push_back(s);
        refs.push_back(std::move(ref));
    }
    Batch b;
    if (keep.empty())
        return b;
    const int N = static_cast<int>(keep.size());
    const int H = keep[0]->composite.height(), W = keep[0]->composite.width();
    b.composite = nn::Tensor({N, 3, H, W});
    b.ground_truth = nn::Tensor({N, 3, H, W});
    b.fg_mask = nn::Tensor({N, 1, H, W});
    b.reference = nn::Tensor({N, 1, H, W});
    for (int n = 0; n < N; ++n) {
        HarmonizationModel::store_image(b.composite, n, keep[n]->composite);
        HarmonizationModel::store_image(b.ground_truth, n, keep[n]->ground_truth);
        const auto fg = binarize(keep[n]->fg_mask);
        std::copy(fg.values().begin(), fg.values().end(), b.fg_mask.channel(n, 0));
        std::copy(refs[n].values().begin(), refs[n].values().end(), b.reference.channel(n, 0));
        b.ids.push_back(keep[n]->meta.id);
    }
    return b;
}

/// Dataset indices of the batch at `step`.
inline std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, std::uint64_t seed,
                                              long long step)
{
    if (dataset_size == 0)
        throw Error("empty dataset");
    std::vector<std::size_t> out;
    std::vector<std::size_t> perm;
    long long cached_epoch = -1;
    const auto n = static_cast<long long>(dataset_size);
    for (long long pos = step * batch_size; pos < (step + 1) * batch_size; ++pos) {
        const long long epoch = pos / n;
        if (epoch != cached_epoch) {
            perm.resize(dataset_size);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::mt19937_64 rng(synthesis::mix_seed(seed, static_cast<std::uint64_t>(epoch)));
            std::shuffle(perm.begin(), perm.end(), rng);
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<std::size_t>(pos % n)]);
    }
    return out;
}

// -- loss graph -----------------------------------------------------------

/// Forward graph of one batch. `harmonizer_input` is the composite as seen by the
/// harmonizer path (its gradient is zero outside the foreground by construction).
struct BatchGraph {
    nn::Var harmonizer_input;
    nn::Var masked_input; ///< harmonizer_input with the background zeroed
    nn::Var output;     ///< raw harmonizer output
    nn::Var harmonized; ///< output composited onto the background
    nn::Var code_h, code_b, code_c, code_r;
};

inline BatchGraph build_graph(const HarmonizationModel& model, const Batch& b, bool input_grad = false)
{
    BatchGraph g;
    g.harmonizer_input = input_grad ? nn::leaf(b.composite) : nn::constant(b.composite);
    g.masked_input = nn::mul_map(g.harmonizer_input, b.fg_mask);
    const auto composite = nn::constant(b.composite);
    g.code_b = model.encode_style(composite, b.reference);
    g.output = model.harmonize(g.masked_input, b.fg_mask, g.code_b).output;
    g.harmonized = nn::blend_map(g.output, composite, b.fg_mask);
    g.code_h = model.encode_style(g.harmonized, b.fg_mask);
    g.code_c = model.encode_style(composite, b.fg_mask);
    g.code_r = model.encode_style(nn::constant(b.ground_truth), b.fg_mask);
    return g;
}

namespace detail {

inline Image sample_image(const nn::Tensor& t, int n)
{
    Image img(t.h(), t.w(), t.c());
    const std::size_t P = t.plane();
    auto v = img.values();
    for (int c = 0; c < t.c(); ++c) {
        const float* src = t.channel(n, c);
        for (std::size_t i = 0; i < P; ++i)
            v[i * t.c() + c] = src[i];
    }
    return img;
}

inline Mask sample_mask(const nn::Tensor& t, int n)
{
    Mask m(t.h(), t.w());
    std::copy(t.channel(n, 0), t.channel(n, 0) + t.plane(), m.values().begin());
    return m;
}

inline std::span<const float> row(const nn::Tensor& t, int n)
{
    const auto d = static_cast<std::size_t>(t.dim(1));
    return {t.data() + n * d, d};
}

inline void accumulate(LossReport& acc, const LossReport& r, double s)
{
    acc.harmonization += s * r.harmonization;
    acc.highlight += s * r.highlight;
    acc.mid_tone += s * r.mid_tone;
    acc.shadow += s * r.shadow;
    acc.lm += s * r.lm;
    acc.consistency += s * r.consistency;
    acc.triplet1 += s * r.triplet1;
    acc.triplet2 += s * r.triplet2;
    acc.total += s * r.total;
}

} // namespace detail

/// Batch-mean loss of a built graph. When `backprop` is set, seeds every loss
/// gradient and runs backward (parameter gradients accumulate).
inline LossReport batch_loss(const BatchGraph& g, const Batch& b, const LossWeights& w, bool backprop)
{
    const int N = b.size();
    const double inv = 1.0 / N;
    LossReport mean;
    nn::Tensor dH(g.harmonized->value.shape());
    nn::Tensor dh(g.code_h->value.shape()), db(g.code_b->value.shape()), dc(g.code_c->value.shape()),
        dr(g.code_r->value.shape());
    for (int n = 0; n < N; ++n) {
        const auto H = detail::sample_image(g.harmonized->value, n);
        const auto gt = detail::sample_image(b.ground_truth, n);
        const auto fg = detail::sample_mask(b.fg_mask, n);
        LossInputs<float> in{&H,
                             &gt,
                             &fg,
                             detail::row(g.code_h->value, n),
                             detail::row(g.code_b->value, n),
                             detail::row(g.code_c->value, n),
                             detail::row(g.code_r->value, n)};
        LossGradients<float> gr;
        const auto rep = total_loss(in, w, backprop ? &gr : nullptr);
        detail::accumulate(mean, rep, inv);
        if (!backprop)
            continue;
        const std::size_t P = H.pixel_count();
        const auto gv = gr.harmonized.values();
        for (int c = 0; c < 3; ++c) {
            float* dst = dH.channel(n, c);
            for (std::size_t i = 0; i < P; ++i)
                dst[i] = static_cast<float>(gv[i * 3 + c] * inv);
        }
        const auto D = static_cast<std::size_t>(g.code_h->value.dim(1));
        for (std::size_t k = 0; k < D; ++k) {
            dh[n * D + k] = static_cast<float>(gr.code_h[k] * inv);
            db[n * D + k] = static_cast<float>(gr.code_b[k] * inv);
            dc[n * D + k] = static_cast<float>(gr.code_c[k] * inv);
            dr[n * D + k] = static_cast<float>(gr.code_r[k] * inv);
        }
    }
    if (backprop)
        nn::backward({{g.harmonized, dH}, {g.code_h, dh}, {g.code_b, db}, {g.code_c, dc}, {g.code_r, dr}});
    return mean;
}

// -- optimizer --------------------------------------------------------------

/// Adam with bias correction; moments are keyed by parameter name.
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(ParameterStore& params, double lr)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
        const auto step_size = static_cast<float>(lr / c1);
        const auto eps = static_cast<float>(cfg_.epsilon);
        const auto sc2 = static_cast<float>(1.0 / std::sqrt(c2));
        for (const auto& [name, p] : params.entries()) {
            if (!p->has_grad())
                continue;
            auto& m = slot(m_, name, p->value);
            auto& v = slot(v_, name, p->value);
            float* x = p->value.data();
            const float* g = p->grad.data();
            float* mm = m.data();
            float* vv = v.data();
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                mm[i] = b1 * mm[i] + (1 - b1) * g[i];
                vv[i] = b2 * vv[i] + (1 - b2) * g[i] * g[i];
                x[i] -= step_size * mm[i] / (std::sqrt(vv[i]) * sc2 + eps);
            }
        }
    }

    long long steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return cfg_; }

    void save(WeightArchive& a) const
    {
        for (const auto& [k, t] : m_)
            a.tensors["optim.m." + k] = t;
        for (const auto& [k, t] : v_)
            a.tensors["optim.v." + k] = t;
        a.metadata.extra["adam"] = {
            {"t", t_}, {"beta1", cfg_.beta1}, {"beta2", cfg_.beta2}, {"epsilon", cfg_.epsilon}};
    }

    void load(const WeightArchive& a)
    {
        m_.clear();
        v_.clear();
        t_ = 0;
        if (!a.metadata.extra.contains("adam"))
            return;
        const auto& j = a.metadata.extra.at("adam");
        t_ = j.value("t", 0LL);
        cfg_.beta1 = j.value("beta1", cfg_.beta1);
        cfg_.beta2 = j.value("beta2", cfg_.beta2);
        cfg_.epsilon = j.value("epsilon", cfg_.epsilon);
        for (const auto& [k, t] : a.tensors) {
            if (k.starts_with("optim.m."))
                m_[k.substr(8)] = t;
            else if (k.starts_with("optim.v."))
                v_[k.substr(8)] = t;
        }
    }

private:
    static nn::Tensor& slot(std::map<std::string, nn::Tensor>& store, const std::string& name, const nn::Tensor& like)
    {
        auto it = store.find(name);
        if (it == store.end())
            it = store.emplace(name, nn::Tensor(like.shape())).first;
        return it->second;
    }

    AdamConfig cfg_;
    long long t_ = 0;
    std::map<std::string, nn::Tensor> m_, v_;
};

// -- state, checkpoints ------------------------------------------------------

struct TrainState {
    HarmonizationModel model;
    Adam optimizer;
    int stage = 1;
    long long step = 0; ///< completed steps within the current stage
    std::uint64_t seed = 0;
    double running_total = 0;         ///< exponential average (0.98) of the total loss
    double running_harmonization = 0; ///< same for the harmonization term
    nlohmann::json lineage = nlohmann::json::array();

    explicit TrainState(ModelConfig cfg) : model(cfg) {}
    explicit TrainState(HarmonizationModel m) : model(std::move(m)) {}
};

inline WeightArchive checkpoint_archive(const TrainState& s)
{
    auto a = make_archive(s.model, s.stage, s.step);
    s.optimizer.save(a);
    a.metadata.extra["seed"] = s.seed;
    a.metadata.extra["running_total"] = s.running_total;
    a.metadata.extra["running_harmonization"] = s.running_harmonization;
    a.metadata.extra["lineage"] = s.lineage;
    return a;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    save_weights(checkpoint_archive(s), path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path)
{
    const auto a = load_weights(path);
    TrainState s(model_from_archive(a));
    s.optimizer.load(a);
    s.stage = a.metadata.stage;
    s.step = a.metadata.step;
    const auto& x = a.metadata.extra;
    s.seed = x.value("seed", std::uint64_t{0});
    s.running_total = x.value("running_total", 0.0);
    s.running_harmonization = x.value("running_harmonization", 0.0);
    if (x.contains("lineage"))
        s.lineage = x.at("lineage");
    return s;
}

/// Weights-only archive (optimizer moments dropped) tagged with the state's stage.
inline WeightArchive export_weights(const TrainState& s)
{
    auto a = make_archive(s.model, s.stage, s.step);
    a.metadata.extra["lineage"] = s.lineage;
    return a;
}

// -- training loop ------------------------------------------------------------

struct StepLog {
    int stage = 0;
    long long step = 0; ///< 1-based index of the completed step
    double learning_rate = 0;
    LossReport loss;
    std::vector<std::string> batch;
    double seconds = 0;
};

inline void to_json(nlohmann::json& j, const StepLog& l)
{
    j = nlohmann::json{{"stage", l.stage}, {"step", l.step}, {"lr", l.learning_rate},
                       {"loss", l.loss},   {"batch", l.batch}, {"seconds", l.seconds}};
}

struct TrainHooks {
    std::function<void(const StepLog&)> on_step;
    std::ostream* log = nullptr; ///< one JSON object per step
    WarningSink warn = synthesis::stderr_warning;
};

inline std::vector<synthesis::CompositeSample> load_training_set(const std::filesystem::path& dir, int res)
{
    std::vector<synthesis::CompositeSample> out;
    for (auto& s : synthesis::load_dataset(dir))
        out.push_back(prepare_sample(s, res));
    if (out.empty())
        throw Error("dataset " + dir.string() + " has no samples");
    return out;
}

/// Writes a diagnostic record for a non-finite loss and throws TrainingError.
[[noreturn]] inline void abort_non_finite(const StageConfig& cfg, long long step, const Batch& b,
                                          const LossReport& r)
{
    nlohmann::json dump{{"stage", cfg.stage}, {"step", step}, {"batch", b.ids}, {"loss", r}};
    std::string where;
    if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
        const auto p = cfg.checkpoint_dir / ("nonfinite_stage" + std::to_string(cfg.stage) + "_step" +
                                             std::to_string(step) + ".json");
        std::ofstream(p) << dump.dump(2) << '\n';
        where = " (dump: " + p.string() + ")";
    }
    std::string ids;
    for (const auto& id : b.ids)
        ids += (ids.empty() ? "" : ",") + id;
    throw TrainingError("non-finite loss at stage " + std::to_string(cfg.stage) + " step " + std::to_string(step) +
                        ", batch [" + ids + "]" + where);
}

/// Runs steps state.step .. cfg.steps - 1 of the stage on the given samples.
inline void train_stage(TrainState& state, const StageConfig& cfg,
                        const std::vector<synthesis::CompositeSample>& samples, const TrainHooks& hooks = {})
{
    cfg.validate();
    if (state.model.config().resolution != cfg.resolution)
        throw Error("model resolution " + std::to_string(state.model.config().resolution) +
                    " does not match stage resolution " + std::to_string(cfg.resolution));
    if (state.stage != cfg.stage) {
        state.stage = cfg.stage;
        state.step = 0;
        state.optimizer = Adam(cfg.adam);
    }
    state.seed = cfg.seed;
    const auto w = cfg.effective_loss();
    const auto warn = hooks.warn ? hooks.warn : synthesis::WarningSink(synthesis::stderr_warning);

    while (state.step < cfg.steps) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<const synthesis::CompositeSample*> picked;
        for (auto i : batch_indices(samples.size(), cfg.batch_size, cfg.seed, state.step))
            picked.push_back(&samples[i]);
        const auto batch = make_batch(picked, cfg.stage, warn);
        StepLog log{cfg.stage, state.step + 1, cfg.learning_rate, {}, batch.ids, 0};
        if (batch.size() > 0) {
            state.model.parameters().zero_grad();
            const auto g = build_graph(state.model, batch);
            log.loss = batch_loss(g, batch, w, true);
            if (!std::isfinite(log.loss.total))
                abort_non_finite(cfg, state.step + 1, batch, log.loss);
            state.optimizer.step(state.model.parameters(), cfg.learning_rate);
            const double a = state.step == 0 ? 0.0 : 0.98;
            state.running_total = a * state.running_total + (1 - a) * log.loss.total;
            state.running_harmonization = a * state.running_harmonization + (1 - a) * log.loss.harmonization;
        }
        ++state.step;
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (hooks.log)
            *hooks.log << nlohmann::json(log).dump() << '\n' << std::flush;
        if (hooks.on_step)
            hooks.on_step(log);
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && !cfg.checkpoint_dir.empty())
            save_checkpoint(state, cfg.checkpoint_dir / ("stage" + std::to_string(cfg.stage) + "_step" +
                                                         std::to_string(state.step) + ".ihw"));
    }
    const nlohmann::json entry{{"stage", cfg.stage}, {"steps", state.step}, {"seed", cfg.seed},
                               {"learning_rate", cfg.learning_rate}, {"dataset", cfg.dataset.string()}};
    if (!state.lineage.empty() && state.lineage.back().value("stage", 0) == cfg.stage)
        state.lineage.back() = entry;
    else
        state.lineage.push_back(entry);
    if (!cfg.checkpoint_dir.empty())
        save_checkpoint(state, cfg.checkpoint_dir / ("stage" + std::to_string(cfg.stage) + "_final.ihw"));
}

/// Initial state for a stage: init weights when given, else a fresh model from cfg.model.
inline TrainState initial_state(const StageConfig& cfg)
{
    if (!cfg.init_weights.empty()) {
        const auto a = load_weights(cfg.init_weights);
        TrainState s(model_from_archive(a));
        s.stage = a.metadata.stage;
        s.step = a.metadata.step;
        if (a.metadata.extra.contains("lineage"))
            s.lineage = a.metadata.extra.at("lineage");
        return s;
    }
    if (cfg.stage > 1)
        throw Error("stage " + std::to_string(cfg.stage) + " needs init_weights from the previous stage");
    auto m = cfg.model;
    m.resolution = cfg.resolution;
    TrainState s(m);
    s.model.make_identity(); // fresh models start from the pass-through mapping
    s.stage = 0;
    return s;
}

/// Chains the stages, threading weights from one to the next. Every dataset is checked
/// before any training starts. Returns the final weights, tagged with the last stage.
inline WeightArchive run_curriculum(const std::vector<StageConfig>& cfgs, const TrainHooks& hooks = {},
                                    std::optional<TrainState> start = std::nullopt)
{
    if (cfgs.empty())
        throw Error("empty curriculum");
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
        cfgs[i].validate();
        if (cfgs[i].stage != static_cast<int>(i) + 1)
            throw Error("curriculum stages must be 1, 2, 3 in order");
        if (!std::filesystem::exists(cfgs[i].dataset / "manifest.json"))
            throw Error("stage " + std::to_string(cfgs[i].stage) + " dataset missing: " + cfgs[i].dataset.string());
    }
    TrainState state = start ? std::move(*start) : initial_state(cfgs[0]);
    for (const auto& cfg : cfgs) {
        const auto samples = load_training_set(cfg.dataset, cfg.resolution);
        train_stage(state, cfg, samples, hooks);
    }
    return export_weights(state);
}

} // namespace iharmon

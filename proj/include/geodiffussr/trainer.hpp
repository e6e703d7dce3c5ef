#pragma once

// Training loop (decoupled-weight-decay Adam on the flow-matching loss),
// bit-exact checkpoint/resume, the evaluation driver, and the MCA /
// model-size ablation harness. All stochastic draws derive from named
// substreams of (seed, step), so a resumed run replays the interrupted loss
// trace exactly.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "geodiffussr/container.hpp"
#include "geodiffussr/data.hpp"
#include "geodiffussr/dem_encoder.hpp"
#include "geodiffussr/flow.hpp"
#include "geodiffussr/metrics.hpp"
#include "geodiffussr/text.hpp"
#include "geodiffussr/unet.hpp"

namespace gdr {

struct TrainConfig {
    double lr = 5e-4;  // AdamW, paper recipe
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int batch_size = 8;
    int max_steps = 2000;
    double cfg_dropout_p = 0.1;
    uint64_t seed = 0;
    UNetConfig unet;
    SamplerConfig sampler;
    int eval_every = 500;  // checkpoint cadence, in steps
    std::string text_provider = "hash";
    std::string text_cache_dir;
    std::string encoder_weights;          // empty: tiny-seeded preset
    std::string lr_schedule = "none";     // none | cosine
    double ema_decay = 0.0;               // 0 disables the EMA shadow

    void validate() const {
        check(lr > 0.0, "TrainConfig: lr must be > 0");
        check(max_steps >= 1, "TrainConfig: max_steps must be >= 1");
        check(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
        check(cfg_dropout_p >= 0.0 && cfg_dropout_p <= 1.0,
              "TrainConfig: cfg_dropout_p must be in [0,1]");
        check(lr_schedule == "none" || lr_schedule == "cosine",
              "TrainConfig: lr_schedule must be none|cosine");
        unet.validate();
        sampler.validate();
    }

    double lr_at(int step) const {
        if (lr_schedule == "cosine")
            return lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(step - 1) /
                                              double(std::max(1, max_steps))));
        return lr;
    }

    json to_json() const {
        json j;
        j["lr"] = lr;
        j["weight_decay"] = weight_decay;
        j["beta1"] = beta1;
        j["beta2"] = beta2;
        j["adam_eps"] = adam_eps;
        j["batch_size"] = batch_size;
        j["max_steps"] = max_steps;
        j["cfg_dropout_p"] = cfg_dropout_p;
        j["seed"] = seed;
        j["unet"] = unet.to_json();
        j["sampler"] = sampler.to_json();
        j["eval_every"] = eval_every;
        j["text_provider"] = text_provider;
        j["text_cache_dir"] = text_cache_dir;
        j["encoder_weights"] = encoder_weights;
        j["lr_schedule"] = lr_schedule;
        j["ema_decay"] = ema_decay;
        return j;
    }

    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.cfg_dropout_p = j.value("cfg_dropout_p", c.cfg_dropout_p);
        c.seed = j.value("seed", c.seed);
        if (j.contains("unet")) c.unet = UNetConfig::from_json(j["unet"]);
        if (j.contains("sampler")) c.sampler = SamplerConfig::from_json(j["sampler"]);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.text_provider = j.value("text_provider", c.text_provider);
        c.text_cache_dir = j.value("text_cache_dir", c.text_cache_dir);
        c.encoder_weights = j.value("encoder_weights", c.encoder_weights);
        c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
        c.ema_decay = j.value("ema_decay", c.ema_decay);
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

// Decoupled weight decay applied multiplicatively before the moment update:
// with zero gradient a step shrinks parameters by exactly (1 - lr * wd).
template <typename S>
class AdamW {
public:
    AdamW(ParamStore<S>& params, double lr, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8)
        : params_(params), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto& [name, v] : params_.items()) {
            m_.push_back(Tensor<S>::zeros(v.value().shape()));
            v_.push_back(Tensor<S>::zeros(v.value().shape()));
        }
    }

    void step(std::optional<double> lr_override = std::nullopt) {
        ++t_;
        const S lr = S(lr_override.value_or(lr_));
        const S decay = S(1) - lr * S(wd_);
        const S b1 = S(b1_), b2 = S(b2_), eps = S(eps_);
        const S bc1 = S(1) - S(std::pow(b1_, double(t_)));
        const S bc2 = S(1) - S(std::pow(b2_, double(t_)));
        for (size_t i = 0; i < params_.items().size(); ++i) {
            auto& var = params_.items()[i].second;
            Tensor<S>& p = var.value();
            Tensor<S>& m = m_[i];
            Tensor<S>& v = v_[i];
            if (!var.has_grad()) {
                // zero gradient: moments decay, weight decay still applies
                m.vec() *= b1;
                v.vec() *= b2;
                if (wd_ != 0.0) p.vec() *= decay;
                continue;
            }
            const Tensor<S>& g = var.grad();
            m.vec() = b1 * m.vec() + (S(1) - b1) * g.vec();
            v.vec().array() = b2 * v.vec().array() + (S(1) - b2) * g.vec().array().square();
            if (wd_ != 0.0) p.vec() *= decay;
            p.vec().array() -=
                lr * (m.vec().array() / bc1) / ((v.vec().array() / bc2).sqrt() + eps);
        }
    }

    int64_t t() const { return t_; }
    void set_t(int64_t t) { t_ = t; }

    NamedTensors<S> state() const {
        NamedTensors<S> out;
        for (size_t i = 0; i < params_.items().size(); ++i) {
            out.push_back({"opt.m." + params_.items()[i].first, m_[i]});
            out.push_back({"opt.v." + params_.items()[i].first, v_[i]});
        }
        return out;
    }

    void load_state(const NamedTensors<S>& tensors, size_t offset) {
        for (size_t i = 0; i < params_.items().size(); ++i) {
            const auto& [mn, mt] = tensors[offset + 2 * i];
            const auto& [vn, vt] = tensors[offset + 2 * i + 1];
            check(mn == "opt.m." + params_.items()[i].first, "checkpoint: bad optimizer state");
            check(vn == "opt.v." + params_.items()[i].first, "checkpoint: bad optimizer state");
            m_[i] = mt;
            v_[i] = vt;
        }
    }

private:
    ParamStore<S>& params_;
    double lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::vector<Tensor<S>> m_, v_;
};

// ---------------------------------------------------------------------------
// conditioning assembly
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> textures_to_internal(const DatasetCache& cache, const std::vector<size_t>& idx) {
    const auto& first = cache.at(idx[0]).texture.rgb;
    const int h = first.dim(0), w = first.dim(1);
    Tensor<S> out({int(idx.size()), h, w, 3});
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& rgb = cache.at(idx[i]).texture.rgb;
        for (int64_t j = 0; j < rgb.size(); ++j)
            out[int64_t(i) * rgb.size() + j] = S(rgb[j]) * S(2) - S(1);
    }
    return out;
}

template <typename S>
Tensor<S> dems_to_channel(const DatasetCache& cache, const std::vector<size_t>& idx) {
    const auto& first = cache.at(idx[0]).dem.elevation;
    const int h = first.dim(0), w = first.dim(1);
    Tensor<S> out({int(idx.size()), h, w, 1});
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& e = cache.at(idx[i]).dem.elevation;
        for (int64_t j = 0; j < e.size(); ++j) out[int64_t(i) * e.size() + j] = S(e[j]);
    }
    return out;
}

}  // namespace detail

// Owns everything the velocity model is conditioned on and assembles batched
// Conditioning structs; pyramids and caption embeddings are cached.
template <typename S>
class ConditioningProvider {
public:
    ConditioningProvider(const DatasetCache& cache, const UNetConfig& unet,
                         const DemEncoder<S>& encoder, const TextProvider<S>& text)
        : cache_(cache), unet_(unet), encoder_(encoder), text_(text) {
        pyramids_.resize(cache.size());
        embeddings_.resize(cache.size());
    }

    const FeaturePyramid<S>& pyramid(size_t i) {
        if (!pyramids_[i]) pyramids_[i] = encoder_.encode(cache_.at(i).dem);
        return *pyramids_[i];
    }

    const TextEmbedding<S>& embedding(size_t i) {
        if (!embeddings_[i]) embeddings_[i] = text_.embed(cache_.at(i).caption);
        return *embeddings_[i];
    }

    // conditional batch; drop_rng, when given, applies CFG conditioning dropout
    Conditioning<S> conditional(const std::vector<size_t>& idx, Rng* drop_rng, double drop_p) {
        Conditioning<S> cond;
        std::vector<TextEmbedding<S>> embs;
        for (size_t i : idx) {
            TextEmbedding<S> e = embedding(i);
            if (drop_rng) e = cfg_dropout(e, drop_p, *drop_rng);
            embs.push_back(std::move(e));
        }
        set_text_batch(cond, embs);
        attach_dem(cond, idx);
        return cond;
    }

    // unconditional branch: explicit null embedding, same DEM conditioning
    Conditioning<S> unconditional(const std::vector<size_t>& idx) {
        Conditioning<S> cond;
        std::vector<TextEmbedding<S>> embs(idx.size(), null_embedding<S>(unet_.text_dim, 1));
        set_text_batch(cond, embs);
        attach_dem(cond, idx);
        return cond;
    }

private:
    void attach_dem(Conditioning<S>& cond, const std::vector<size_t>& idx) {
        if (unet_.mca_mode == MCAMode::NONE) {
            cond.dem = detail::dems_to_channel<S>(cache_, idx);
        } else {
            std::vector<FeaturePyramid<S>> pyrs;
            for (size_t i : idx) pyrs.push_back(pyramid(i));
            cond.pyramid = stack_pyramids(pyrs);
        }
    }

    const DatasetCache& cache_;
    UNetConfig unet_;
    const DemEncoder<S>& encoder_;
    const TextProvider<S>& text_;
    std::vector<std::optional<FeaturePyramid<S>>> pyramids_;
    std::vector<std::optional<TextEmbedding<S>>> embeddings_;
};

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

constexpr const char* kCheckpointLatest = "checkpoint_latest.gdrc";

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const UNetMCA<S>& net,
                     const AdamW<S>& opt, const TrainConfig& cfg, int step, int64_t batch_epoch,
                     size_t batch_cursor, const std::vector<Tensor<S>>* ema = nullptr) {
    NamedTensors<S> tensors = net.state();
    for (auto& [name, t] : opt.state()) tensors.push_back({name, t});
    if (ema)
        for (size_t i = 0; i < ema->size(); ++i)
            tensors.push_back({"ema." + net.params().items()[i].first, (*ema)[i]});
    json meta;
    meta["step"] = step;
    meta["config"] = cfg.to_json();
    meta["param_checksum"] = net.params().checksum();
    meta["adamw_t"] = opt.t();
    meta["batch_epoch"] = batch_epoch;
    meta["batch_cursor"] = batch_cursor;
    meta["rng"] = {{"scheme", "substream(seed, name, step)"}, {"seed", cfg.seed}};
    save_container<S>(path, tensors, meta);
}

template <typename S>
struct Checkpoint {
    TrainConfig config;
    int step = 0;
    int64_t adamw_t = 0;
    int64_t batch_epoch = 0;
    size_t batch_cursor = 0;
    uint64_t param_checksum = 0;
    NamedTensors<S> tensors;
};

template <typename S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
    Checkpoint<S> ck;
    json meta;
    ck.tensors = load_container<S>(path, &meta);
    ck.config = TrainConfig::from_json(meta.at("config"));
    ck.step = meta.value("step", 0);
    ck.adamw_t = meta.value("adamw_t", int64_t(0));
    ck.batch_epoch = meta.value("batch_epoch", int64_t(0));
    ck.batch_cursor = meta.value("batch_cursor", size_t(0));
    ck.param_checksum = meta.value("param_checksum", uint64_t(0));
    return ck;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct TrainResult {
    std::filesystem::path checkpoint;
    std::vector<double> loss_trace;
    double final_loss = 0.0;
    int steps = 0;
};

template <typename S = float>
DemEncoder<S> make_encoder(const TrainConfig& cfg) {
    if (cfg.encoder_weights.empty())
        return DemEncoder<S>::tiny_seeded(cfg.unet.input_size);
    return load_encoder_weights<S>(cfg.encoder_weights, "tiny-seeded");
}

template <typename S = float>
TrainResult train(const TrainConfig& cfg, const Manifest& manifest,
                  const std::filesystem::path& out_dir,
                  const std::filesystem::path& resume_from = {}) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    DatasetCache cache(manifest);
    check(!manifest.indices_of(Split::TRAIN).empty(), "train: manifest has no train split");

    DemEncoder<S> encoder = make_encoder<S>(cfg);
    const uint64_t encoder_checksum = encoder.checksum();
    auto text = make_text_provider<S>(cfg.text_provider, cfg.unet.text_dim,
                                      substream(cfg.seed, "text-provider").next_u64(),
                                      cfg.text_cache_dir);
    ConditioningProvider<S> cond_provider(cache, cfg.unet, encoder, *text);

    UNetMCA<S> net(cfg.unet, substream(cfg.seed, "model-init").next_u64());
    AdamW<S> opt(net.params(), cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps);
    BatchIterator batches(manifest, Split::TRAIN, cfg.batch_size,
                          substream(cfg.seed, "batches").next_u64());

    // optional EMA shadow of the trainable parameters
    std::vector<Tensor<S>> ema;
    if (cfg.ema_decay > 0.0)
        for (auto& [name, v] : net.params().items()) ema.push_back(v.value());

    int start_step = 0;
    if (!resume_from.empty()) {
        Checkpoint<S> ck = load_checkpoint<S>(resume_from);
        check(ck.config.unet.to_json() == cfg.unet.to_json(),
              "resume: checkpoint model config differs");
        NamedTensors<S> params(ck.tensors.begin(),
                               ck.tensors.begin() + int64_t(net.params().count()));
        net.load_state(params);
        opt.load_state(ck.tensors, net.params().count());
        opt.set_t(ck.adamw_t);
        batches.restore(ck.batch_epoch, ck.batch_cursor);
        start_step = ck.step;
        if (cfg.ema_decay > 0.0) {
            size_t base = 3 * net.params().count();  // params + opt.m + opt.v
            check(ck.tensors.size() == base + net.params().count(),
                  "resume: checkpoint has no EMA state");
            for (size_t i = 0; i < ema.size(); ++i) ema[i] = ck.tensors[base + i].second;
        }
    }

    std::ofstream log(out_dir / "train_log.csv",
                      start_step > 0 ? std::ios::app : std::ios::out);
    if (start_step == 0) log << "step,loss,lr,wall_time\n";
    auto wall_start = std::chrono::steady_clock::now();

    TrainResult result;
    auto model = [&](const Var<S>& x, const std::vector<S>& t, const Conditioning<S>& c) {
        return net.forward(x, t, c);
    };

    std::filesystem::path last_good;
    for (int step = start_step + 1; step <= cfg.max_steps; ++step) {
        auto idx = batches.next();
        Tensor<S> x1 = detail::textures_to_internal<S>(cache, idx);
        Rng drop_rng = substream(cfg.seed, "cfg-dropout", uint64_t(step));
        Conditioning<S> cond = cond_provider.conditional(idx, &drop_rng, cfg.cfg_dropout_p);

        Rng flow_rng = substream(cfg.seed, "flow", uint64_t(step));
        double loss_value;
        try {
            auto loss = cfm_loss(model, x1, cond, flow_rng);
            loss_value = double(loss.value()[0]);
            if (!std::isfinite(loss_value)) fail("non-finite loss");
            loss.backward();
        } catch (const std::exception& e) {
            fail("training aborted at step " + std::to_string(step) + ": " + e.what() +
                 (last_good.empty() ? " (no checkpoint retained)"
                                    : " (last good checkpoint: " + last_good.string() + ")"));
        }
        opt.step(cfg.lr_at(step));
        net.params().zero_grads();

        if (cfg.ema_decay > 0.0) {
            const S d = S(cfg.ema_decay);
            auto& items = net.params().items();
            for (size_t i = 0; i < items.size(); ++i)
                ema[i].vec() = d * ema[i].vec() + (S(1) - d) * items[i].second.value().vec();
        }

        double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start)
                .count();
        log << step << "," << loss_value << "," << cfg.lr_at(step) << "," << wall << "\n";
        result.loss_trace.push_back(loss_value);
        result.final_loss = loss_value;
        result.steps = step;

        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            auto path = out_dir / kCheckpointLatest;
            save_checkpoint(path, net, opt, cfg, step, batches.epoch(), batches.cursor(),
                            cfg.ema_decay > 0.0 ? &ema : nullptr);
            last_good = path;
        }
    }

    check(encoder.checksum() == encoder_checksum, "train: frozen encoder was modified");
    result.checkpoint = out_dir / kCheckpointLatest;
    return result;
}

// ---------------------------------------------------------------------------
// generation + evaluation
// ---------------------------------------------------------------------------

enum class GeneratorKind { MODEL, CHEAT, NOISE };

inline GeneratorKind parse_generator(const std::string& s) {
    if (s == "model") return GeneratorKind::MODEL;
    if (s == "cheat") return GeneratorKind::CHEAT;
    if (s == "noise") return GeneratorKind::NOISE;
    fail("unknown generator: " + s + " (expected model|cheat|noise)");
}

// A trained model plus its frozen conditioning stack, restored from a
// checkpoint.
template <typename S = float>
class Generator {
public:
    explicit Generator(const std::filesystem::path& checkpoint_path) {
        Checkpoint<S> ck = load_checkpoint<S>(checkpoint_path);
        cfg_ = ck.config;
        net_ = std::make_unique<UNetMCA<S>>(cfg_.unet,
                                            substream(cfg_.seed, "model-init").next_u64());
        NamedTensors<S> params(ck.tensors.begin(),
                               ck.tensors.begin() + int64_t(net_->params().count()));
        net_->load_state(params);
        encoder_ = std::make_unique<DemEncoder<S>>(make_encoder<S>(cfg_));
        text_ = make_text_provider<S>(cfg_.text_provider, cfg_.unet.text_dim,
                                      substream(cfg_.seed, "text-provider").next_u64(),
                                      cfg_.text_cache_dir);
        step_ = ck.step;
    }

    // one texture from a DEM and a prompt; fully determined by sampler.seed
    TextureTile sample(const TerrainTile& dem, const std::string& prompt,
                       const SamplerConfig& sampler) {
        Conditioning<S> cond = conditioning_for(dem, prompt);
        Conditioning<S> uncond = conditioning_for(dem, "");
        auto infer = [&](const Tensor<S>& x, S t, const Conditioning<S>& c) {
            return net_->forward_infer(x, std::vector<S>(size_t(x.dim(0)), t), c);
        };
        Tensor<S> out = euler_sample(infer, cond, uncond, sampler,
                                     {1, cfg_.unet.input_size, cfg_.unet.input_size, 3});
        TextureTile tile;
        tile.rgb = out.reshaped({cfg_.unet.input_size, cfg_.unet.input_size, 3})
                       .template cast<float>();
        return tile;
    }

    const TrainConfig& config() const { return cfg_; }
    UNetMCA<S>& net() { return *net_; }
    const DemEncoder<S>& encoder() const { return *encoder_; }
    const TextProvider<S>& text() const { return *text_; }
    int step() const { return step_; }

private:
    Conditioning<S> conditioning_for(const TerrainTile& dem, const std::string& prompt) {
        Conditioning<S> cond;
        std::vector<TextEmbedding<S>> embs;
        embs.push_back(prompt.empty() ? null_embedding<S>(cfg_.unet.text_dim, 1)
                                      : text_->embed(prompt));
        set_text_batch(cond, embs);
        if (cfg_.unet.mca_mode == MCAMode::NONE) {
            Tensor<S> ch({1, dem.height(), dem.width(), 1});
            for (int64_t i = 0; i < dem.elevation.size(); ++i) ch[i] = S(dem.elevation[i]);
            cond.dem = std::move(ch);
        } else {
            std::vector<FeaturePyramid<S>> pyrs = {encoder_->encode(dem)};
            cond.pyramid = stack_pyramids(pyrs);
        }
        return cond;
    }

    TrainConfig cfg_;
    std::unique_ptr<UNetMCA<S>> net_;
    std::unique_ptr<DemEncoder<S>> encoder_;
    std::unique_ptr<TextProvider<S>> text_;
    int step_ = 0;
};

// Mean flow-matching loss over a split with fixed seeded draws; the
// model-size criterion compares exactly this number across presets.
template <typename S = float>
double validation_loss(UNetMCA<S>& net, const DatasetCache& cache,
                       ConditioningProvider<S>& cond_provider, const std::vector<size_t>& idx,
                       int batch_size, uint64_t seed) {
    check(!idx.empty(), "validation_loss: empty index set");
    NoGradGuard guard;
    auto model = [&](const Var<S>& x, const std::vector<S>& t, const Conditioning<S>& c) {
        return net.forward(x, t, c);
    };
    double acc = 0;
    int64_t count = 0;
    for (size_t pos = 0; pos < idx.size(); pos += size_t(batch_size)) {
        std::vector<size_t> batch(idx.begin() + int64_t(pos),
                                  idx.begin() + int64_t(std::min(idx.size(),
                                                                 pos + size_t(batch_size))));
        Tensor<S> x1 = detail::textures_to_internal<S>(cache, batch);
        Conditioning<S> cond = cond_provider.conditional(batch, nullptr, 0.0);
        Rng rng = substream(seed, "val-loss", pos);
        auto loss = cfm_loss(model, x1, cond, rng);
        acc += double(loss.value()[0]) * double(batch.size());
        count += int64_t(batch.size());
    }
    return acc / double(count);
}

// Samples one texture per record of the split (noise seeded per record id)
// and assembles the metrics report. Per-tile metric failures are recorded,
// not fatal, unless every tile fails.
template <typename S = float>
MetricsReport evaluate(Generator<S>& gen, const Manifest& manifest, Split split,
                       const MetricsConfig& mcfg,
                       GeneratorKind kind = GeneratorKind::MODEL,
                       std::vector<TextureTile>* samples_out = nullptr) {
    mcfg.validate();
    DatasetCache cache(manifest);
    auto idx = manifest.indices_of(split);
    check(!idx.empty(), "evaluate: empty split " + to_string(split));

    const TrainConfig& cfg = gen.config();
    std::vector<TextureTile> generated(idx.size());
    const int B = std::max(1, cfg.batch_size);

    if (kind == GeneratorKind::MODEL) {
        ConditioningProvider<S> cond_provider(cache, cfg.unet, gen.encoder(), gen.text());
        auto infer = [&](const Tensor<S>& x, S t, const Conditioning<S>& c) {
            return gen.net().forward_infer(x, std::vector<S>(size_t(x.dim(0)), t), c);
        };
        for (size_t pos = 0; pos < idx.size(); pos += size_t(B)) {
            std::vector<size_t> batch(idx.begin() + int64_t(pos),
                                      idx.begin() + int64_t(std::min(idx.size(),
                                                                     pos + size_t(B))));
            const int n = int(batch.size());
            const int hw = cfg.unet.input_size;
            // per-record seeded noise, stacked
            Tensor<S> x({n, hw, hw, 3});
            for (int i = 0; i < n; ++i) {
                uint64_t rid = manifest.records[batch[size_t(i)]].record_id();
                Rng noise = substream(mix64(cfg.sampler.seed ^ rid), "sample-noise");
                for (int64_t j = 0; j < int64_t(hw) * hw * 3; ++j)
                    x[int64_t(i) * hw * hw * 3 + j] = S(noise.gaussian());
            }
            Conditioning<S> cond = cond_provider.conditional(batch, nullptr, 0.0);
            Conditioning<S> uncond = cond_provider.unconditional(batch);
            const S w = S(cfg.sampler.cfg_scale);
            const S dt = S(1) / S(cfg.sampler.steps);
            for (int k = 0; k < cfg.sampler.steps; ++k) {
                S t = S(k) / S(cfg.sampler.steps);
                Tensor<S> v;
                if (w == S(1)) {
                    v = infer(x, t, cond);
                } else {
                    Tensor<S> vu = infer(x, t, uncond);
                    Tensor<S> vc = infer(x, t, cond);
                    v = cfg_combine(vu, vc, w);
                }
                x.vec() += dt * v.vec();
                if (!x.all_finite())
                    fail("evaluate: non-finite sampler state at step " + std::to_string(k));
            }
            Tensor<S> mapped = to_storage_range(x);
            for (int i = 0; i < n; ++i) {
                Tensor<float> rgb({hw, hw, 3});
                for (int64_t j = 0; j < rgb.size(); ++j)
                    rgb[j] = float(mapped[int64_t(i) * rgb.size() + j]);
                generated[pos + size_t(i)].rgb = std::move(rgb);
            }
        }
    } else {
        for (size_t i = 0; i < idx.size(); ++i) {
            if (kind == GeneratorKind::CHEAT) {
                generated[i] = cache.at(idx[i]).texture;
            } else {
                uint64_t rid = manifest.records[idx[i]].record_id();
                Rng rng = substream(mix64(cfg.sampler.seed ^ rid), "noise-generator");
                generated[i].rgb = Tensor<float>::rand_uniform(
                    {cfg.unet.input_size, cfg.unet.input_size, 3}, rng);
            }
        }
    }

    MetricsReport report;
    report.n_tiles = int(idx.size());
    int mse_ok = 0, dcor_ok = 0;
    double mse_acc = 0, dcor_acc = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
        const auto& gt = cache.at(idx[i]);
        try {
            mse_acc += mse(generated[i], gt.texture);
            ++mse_ok;
        } catch (const std::exception& e) {
            std::cerr << "[geodiffussr] warning: mse failed on tile " << i << ": " << e.what()
                      << "\n";
        }
        try {
            dcor_acc += dcor_image_pair(generated[i], gt.dem, mcfg.dcor_subsample_cap,
                                        mcfg.subsample_seed);
            ++dcor_ok;
        } catch (const std::exception& e) {
            std::cerr << "[geodiffussr] warning: dcor failed on tile " << i << ": " << e.what()
                      << "\n";
        }
    }
    check(mse_ok > 0 && dcor_ok > 0, "evaluate: every tile failed");
    report.mse = mse_acc / mse_ok;
    report.dcor = dcor_acc / dcor_ok;
    report.delta_dcor = std::abs(report.dcor - mcfg.dcor_gt);

    if (mcfg.feature_extractor != "none") {
        auto extractor = make_feature_extractor(mcfg.feature_extractor);
        std::vector<TextureTile> real;
        for (size_t i : idx) real.push_back(cache.at(i).texture);
        report.fid = fid_between(real, generated, *extractor);
    }
    if (samples_out) *samples_out = std::move(generated);
    return report;
}

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

struct AblationCell {
    bool ok = false;
    std::string error;
    MetricsReport report;
    double val_loss = 0.0;
};

struct AblationRow {
    std::string variant;
    std::vector<AblationCell> seeds;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "variant";
    size_t nseeds = rows.empty() ? 0 : rows[0].seeds.size();
    const char* metrics[] = {"fid(desk)", "lpips", "mse", "delta_dcor"};
    for (const char* m : metrics) {
        for (size_t s = 0; s < nseeds; ++s) os << "," << m << "_s" << s;
        os << "," << m << "_mean";
    }
    os << "\n";
    for (const auto& row : rows) {
        os << row.variant;
        for (int mi = 0; mi < 4; ++mi) {
            double acc = 0;
            int n = 0;
            for (const auto& cell : row.seeds) {
                if (!cell.ok) {
                    os << ",failed";
                    continue;
                }
                double v = 0;
                bool has = true;
                switch (mi) {
                    case 0: has = cell.report.fid.has_value(); v = cell.report.fid.value_or(0); break;
                    case 1: has = cell.report.lpips.has_value(); v = cell.report.lpips.value_or(0); break;
                    case 2: v = cell.report.mse; break;
                    case 3: v = cell.report.delta_dcor; break;
                }
                if (!has) {
                    os << ",none";
                } else {
                    os << "," << v;
                    acc += v;
                    ++n;
                }
            }
            if (n > 0)
                os << "," << acc / n;
            else
                os << ",none";
        }
        os << "\n";
    }
    return os.str();
}

// Trains every variant under identical budgets and seeds, evaluates on the
// validation split, and emits the Table-1/Table-2-shaped CSV. Failed runs are
// marked in the table and the harness continues.
template <typename S = float>
std::vector<AblationRow> ablation_run(const TrainConfig& base, const std::vector<MCAMode>& modes,
                                      const std::vector<SizePreset>& sizes,
                                      const Manifest& manifest, const MetricsConfig& mcfg,
                                      const std::filesystem::path& out_dir, int n_seeds = 1) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::pair<std::string, UNetConfig>> variants;
    for (MCAMode mode : modes) {
        UNetConfig u = base.unet;
        u.mca_mode = mode;
        variants.push_back({"mca-" + to_string(mode), u});
    }
    for (SizePreset size : sizes) {
        UNetConfig u = UNetConfig::preset(size, MCAMode::FULL);
        u.text_dim = base.unet.text_dim;
        u.input_size = base.unet.input_size;
        u.pyramid_channels = base.unet.pyramid_channels;
        variants.push_back({"size-" + to_string(size), u});
    }

    std::vector<AblationRow> rows;
    for (const auto& [name, unet_cfg] : variants) {
        AblationRow row;
        row.variant = name;
        for (int s = 0; s < n_seeds; ++s) {
            AblationCell cell;
            try {
                TrainConfig cfg = base;
                cfg.unet = unet_cfg;
                cfg.seed = mix64(base.seed ^ (uint64_t(s) + 1));
                auto run_dir = out_dir / (name + "-seed" + std::to_string(s));
                TrainResult res = train<S>(cfg, manifest, run_dir);
                Generator<S> gen(res.checkpoint);
                cell.report = evaluate<S>(gen, manifest, Split::VAL, mcfg);
                {
                    DatasetCache cache(manifest);
                    ConditioningProvider<S> cp(cache, cfg.unet, gen.encoder(), gen.text());
                    cell.val_loss =
                        validation_loss<S>(gen.net(), cache, cp, manifest.indices_of(Split::VAL),
                                           cfg.batch_size, substream(cfg.seed, "val").next_u64());
                }
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
                std::cerr << "[geodiffussr] ablation run " << name << " seed " << s
                          << " failed: " << e.what() << "\n";
            }
            row.seeds.push_back(std::move(cell));
        }
        rows.push_back(std::move(row));
    }

    std::ofstream csv(out_dir / "ablation.csv");
    csv << ablation_csv(rows);
    return rows;
}

}  // namespace gdr

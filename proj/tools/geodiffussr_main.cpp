// geodiffussr: text- and DEM-conditioned terrain texture generation.
//
// Subcommands: dataset-synth, train, sample, eval, ablate, render.
// Each command reads its section of an optional JSON config file, applies
// command-line overrides on top (flags win), echoes the effective config to
// the output directory, and writes a machine-readable result file.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "geodiffussr/data.hpp"
#include "geodiffussr/render.hpp"
#include "geodiffussr/trainer.hpp"

using namespace gdr;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// config file section for a command, with unknown keys rejected
json config_section(const std::string& config_path, const std::string& command,
                    const std::set<std::string>& known_keys) {
    if (config_path.empty()) return json::object();
    std::ifstream in(config_path);
    check(in.good(), "cannot open config file: " + config_path);
    json full = json::parse(in);
    if (!full.contains(command)) return json::object();
    json section = full[command];
    for (auto it = section.begin(); it != section.end(); ++it)
        check(known_keys.count(it.key()),
              "unknown config key '" + it.key() + "' in section '" + command + "'");
    return section;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    check(out.good(), "cannot open for write: " + path.string());
    out << j.dump(2) << "\n";
}

void echo_config(const fs::path& out_dir, const std::string& command, const json& effective) {
    fs::create_directories(out_dir);
    json echo;
    echo["command"] = command;
    echo["effective_config"] = effective;
    write_json(out_dir / "config_echo.json", echo);
}

TerrainTile load_dem_tile(const fs::path& path) {
    TerrainTile dem;
    dem.elevation = read_png_gray16(path);
    auto side = path;
    side.replace_extension(".json");
    if (fs::exists(side)) {
        std::ifstream in(side);
        json j = json::parse(in);
        dem.meta = ElevationMeta{j.value("min_elev_m", 0.0f), j.value("max_elev_m", 0.0f)};
    }
    return dem;
}

int cmd_dataset_synth(const std::string& config_path, std::string out_dir, int n,
                      std::string presets_csv, uint64_t seed, double coupling,
                      std::array<double, 3> split_ratios) {
    json cfg = config_section(config_path, "dataset-synth",
                              {"out", "n", "presets", "seed", "coupling", "split_ratios"});
    if (out_dir.empty()) out_dir = cfg.value("out", "");
    if (n == 0) n = cfg.value("n", 256);
    if (presets_csv.empty())
        presets_csv = cfg.value("presets", "alpine,desert,forest,tundra,coast,volcanic");
    if (coupling < 0) coupling = cfg.value("coupling", kDefaultCoupling);
    if (cfg.contains("split_ratios"))
        split_ratios = cfg["split_ratios"].get<std::array<double, 3>>();
    check(!out_dir.empty(), "dataset-synth: --out is required");

    SynthParams params;
    params.coupling = coupling;
    auto presets = split_csv(presets_csv);
    auto manifest = synthesize_dataset(out_dir, n, presets, seed, params);
    manifest = stratified_split(manifest, split_ratios, substream(seed, "split").next_u64());
    write_manifest(manifest, fs::path(out_dir) / "manifest.json");

    json effective = {{"out", out_dir},      {"n", n},
                      {"presets", presets_csv}, {"seed", seed},
                      {"coupling", coupling},   {"split_ratios", split_ratios}};
    echo_config(out_dir, "dataset-synth", effective);
    json result = {{"n_triplets", manifest.records.size()},
                   {"manifest", (fs::path(out_dir) / "manifest.json").string()}};
    write_json(fs::path(out_dir) / "result.json", result);
    std::cout << "wrote " << manifest.records.size() << " triplets to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, std::string manifest_path, std::string out_dir,
              uint64_t seed, int steps, int batch, std::string mode, std::string size,
              double lr, std::string resume, std::array<double, 3> split_ratios,
              uint64_t split_seed) {
    json cfgj = config_section(
        config_path, "train",
        {"manifest", "out", "seed", "max_steps", "batch_size", "mode", "size", "lr",
         "weight_decay", "cfg_dropout_p", "eval_every", "text_provider", "text_cache_dir",
         "encoder_weights", "lr_schedule", "ema_decay", "sampler_steps", "cfg_scale",
         "attention_levels", "text_dim"});
    if (manifest_path.empty()) manifest_path = cfgj.value("manifest", "");
    if (out_dir.empty()) out_dir = cfgj.value("out", "");
    check(!manifest_path.empty(), "train: --manifest is required");
    check(!out_dir.empty(), "train: --out is required");

    TrainConfig cfg;
    cfg.seed = seed;
    cfg.unet = UNetConfig::preset(size.empty() ? SizePreset::S : parse_size_preset(size),
                                  mode.empty() ? MCAMode::FULL : parse_mca_mode(mode));
    cfg.max_steps = steps > 0 ? steps : cfgj.value("max_steps", 2000);
    cfg.batch_size = batch > 0 ? batch : cfgj.value("batch_size", 8);
    cfg.lr = lr > 0 ? lr : cfgj.value("lr", 5e-4);
    cfg.weight_decay = cfgj.value("weight_decay", cfg.weight_decay);
    cfg.cfg_dropout_p = cfgj.value("cfg_dropout_p", cfg.cfg_dropout_p);
    cfg.eval_every = cfgj.value("eval_every", std::max(1, cfg.max_steps / 4));
    cfg.text_provider = cfgj.value("text_provider", cfg.text_provider);
    cfg.text_cache_dir = cfgj.value("text_cache_dir", cfg.text_cache_dir);
    cfg.encoder_weights = cfgj.value("encoder_weights", cfg.encoder_weights);
    cfg.lr_schedule = cfgj.value("lr_schedule", cfg.lr_schedule);
    cfg.ema_decay = cfgj.value("ema_decay", cfg.ema_decay);
    cfg.sampler.steps = cfgj.value("sampler_steps", cfg.sampler.steps);
    cfg.sampler.cfg_scale = cfgj.value("cfg_scale", cfg.sampler.cfg_scale);
    cfg.sampler.seed = substream(seed, "sampler").next_u64();
    if (cfgj.contains("text_dim")) cfg.unet.text_dim = cfgj["text_dim"];
    if (cfgj.contains("attention_levels"))
        cfg.unet.attention_levels = cfgj["attention_levels"].get<std::vector<int>>();
    cfg.validate();

    Manifest manifest = load_manifest(manifest_path);
    if (manifest.indices_of(Split::TRAIN).empty()) {
        manifest = stratified_split(manifest, split_ratios, split_seed);
        fs::create_directories(out_dir);
        Manifest echo_manifest = manifest;
        // keep paths resolvable from the echoed copy
        for (auto& r : echo_manifest.records) {
            r.dem_path = fs::absolute(manifest.root / r.dem_path).string();
            r.image_path = fs::absolute(manifest.root / r.image_path).string();
        }
        echo_manifest.root = "";
        write_manifest(echo_manifest, fs::path(out_dir) / "manifest_split.json");
        std::cout << "assigned splits " << split_ratios[0] << "/" << split_ratios[1] << "/"
                  << split_ratios[2] << " (seed " << split_seed
                  << "), echoed to manifest_split.json\n";
    }

    json effective = cfg.to_json();
    effective["manifest"] = manifest_path;
    effective["out"] = out_dir;
    echo_config(out_dir, "train", effective);

    TrainResult res = train(cfg, manifest, out_dir, resume);
    json result = {{"checkpoint", res.checkpoint.string()},
                   {"steps", res.steps},
                   {"final_loss", res.final_loss}};
    write_json(fs::path(out_dir) / "result.json", result);
    std::cout << "trained " << res.steps << " steps, final loss " << res.final_loss << "\n";
    return 0;
}

int cmd_sample(const std::string& config_path, std::string checkpoint, std::string dem_path,
               std::string prompt, uint64_t seed, std::string out_dir, int steps,
               double cfg_scale) {
    json cfgj = config_section(config_path, "sample",
                               {"checkpoint", "dem", "prompt", "seed", "out", "steps",
                                "cfg_scale"});
    if (checkpoint.empty()) checkpoint = cfgj.value("checkpoint", "");
    if (dem_path.empty()) dem_path = cfgj.value("dem", "");
    if (prompt.empty()) prompt = cfgj.value("prompt", "");
    if (out_dir.empty()) out_dir = cfgj.value("out", "");
    if (steps == 0) steps = cfgj.value("steps", 0);
    if (cfg_scale < 0) cfg_scale = cfgj.value("cfg_scale", -1.0);
    check(!checkpoint.empty(), "sample: --checkpoint is required");
    check(!dem_path.empty(), "sample: --dem is required");
    check(!prompt.empty(), "sample: --prompt is required");
    check(!out_dir.empty(), "sample: --out is required");

    Generator<float> gen(checkpoint);
    SamplerConfig sampler = gen.config().sampler;
    if (steps > 0) sampler.steps = steps;
    if (cfg_scale >= 0) sampler.cfg_scale = cfg_scale;
    sampler.seed = seed;
    sampler.validate();

    TerrainTile dem = load_dem_tile(dem_path);
    TextureTile tex = gen.sample(dem, prompt, sampler);

    fs::create_directories(out_dir);
    json effective = {{"checkpoint", checkpoint}, {"dem", dem_path},
                      {"prompt", prompt},         {"seed", seed},
                      {"steps", sampler.steps},   {"cfg_scale", sampler.cfg_scale}};
    echo_config(out_dir, "sample", effective);
    auto png = fs::path(out_dir) / "sample.png";
    write_png_rgb8(png, tex.rgb);
    json result = {{"sample", png.string()},
                   {"checkpoint_step", gen.step()},
                   {"prompt", prompt},
                   {"seed", seed}};
    write_json(fs::path(out_dir) / "result.json", result);
    std::cout << "wrote " << png.string() << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, std::string checkpoint, std::string manifest_path,
             std::string split, std::string generator, std::string out_dir, uint64_t seed) {
    json cfgj = config_section(config_path, "eval",
                               {"checkpoint", "manifest", "split", "generator", "out", "seed",
                                "dcor_gt", "feature_extractor", "sampler_steps"});
    if (checkpoint.empty()) checkpoint = cfgj.value("checkpoint", "");
    if (manifest_path.empty()) manifest_path = cfgj.value("manifest", "");
    if (out_dir.empty()) out_dir = cfgj.value("out", "");
    check(!checkpoint.empty(), "eval: --checkpoint is required");
    check(!manifest_path.empty(), "eval: --manifest is required");
    check(!out_dir.empty(), "eval: --out is required");

    MetricsConfig mcfg;
    mcfg.dcor_gt = cfgj.value("dcor_gt", mcfg.dcor_gt);
    mcfg.feature_extractor = cfgj.value("feature_extractor", mcfg.feature_extractor);
    mcfg.subsample_seed = seed;
    mcfg.validate();

    Manifest manifest = load_manifest(manifest_path);
    Generator<float> gen(checkpoint);
    if (cfgj.contains("sampler_steps")) {
        // evaluation-time sampler override, echoed below
    }
    GeneratorKind kind = parse_generator(generator);
    MetricsReport report = evaluate(gen, manifest, parse_split(split), mcfg, kind);

    json effective = {{"checkpoint", checkpoint}, {"manifest", manifest_path},
                      {"split", split},           {"generator", generator},
                      {"seed", seed},             {"metrics", mcfg.to_json()}};
    echo_config(out_dir, "eval", effective);
    write_json(fs::path(out_dir) / "result.json", report.to_json(mcfg));
    std::cout << report.to_json(mcfg).dump(2) << "\n";
    return 0;
}

int cmd_ablate(const std::string& config_path, std::string manifest_path, std::string out_dir,
               std::string modes_csv, std::string sizes_csv, int n_seeds, int steps, int batch,
               uint64_t seed, int sampler_steps) {
    json cfgj = config_section(config_path, "ablate",
                               {"manifest", "out", "modes", "sizes", "seeds", "max_steps",
                                "batch_size", "seed", "sampler_steps", "cfg_scale", "text_dim"});
    if (manifest_path.empty()) manifest_path = cfgj.value("manifest", "");
    if (out_dir.empty()) out_dir = cfgj.value("out", "");
    if (modes_csv.empty()) modes_csv = cfgj.value("modes", "");
    if (sizes_csv.empty()) sizes_csv = cfgj.value("sizes", "");
    if (n_seeds == 0) n_seeds = cfgj.value("seeds", 1);
    if (steps == 0) steps = cfgj.value("max_steps", 2000);
    if (batch == 0) batch = cfgj.value("batch_size", 8);
    check(!manifest_path.empty(), "ablate: --manifest is required");
    check(!out_dir.empty(), "ablate: --out is required");

    TrainConfig base;
    base.seed = seed;
    base.max_steps = steps;
    base.batch_size = batch;
    base.eval_every = std::max(1, steps / 2);
    base.unet = UNetConfig::preset(SizePreset::S, MCAMode::FULL);
    base.sampler.steps = sampler_steps > 0 ? sampler_steps : cfgj.value("sampler_steps", 16);
    base.sampler.cfg_scale = cfgj.value("cfg_scale", 8.0);
    if (cfgj.contains("text_dim")) base.unet.text_dim = cfgj["text_dim"];
    base.validate();

    std::vector<MCAMode> modes;
    for (const auto& m : split_csv(modes_csv)) modes.push_back(parse_mca_mode(m));
    std::vector<SizePreset> sizes;
    for (const auto& s : split_csv(sizes_csv)) sizes.push_back(parse_size_preset(s));
    check(!modes.empty() || !sizes.empty(), "ablate: need --modes and/or --sizes");

    Manifest manifest = load_manifest(manifest_path);
    check(!manifest.indices_of(Split::TRAIN).empty(),
          "ablate: manifest needs assigned splits (run train once or pre-split)");
    MetricsConfig mcfg;

    json effective = {{"manifest", manifest_path}, {"out", out_dir}, {"modes", modes_csv},
                      {"sizes", sizes_csv},        {"seeds", n_seeds}, {"max_steps", steps},
                      {"batch_size", batch},       {"seed", seed},
                      {"sampler_steps", base.sampler.steps}};
    echo_config(out_dir, "ablate", effective);

    auto rows = ablation_run(base, modes, sizes, manifest, mcfg, out_dir, n_seeds);
    json result = json::array();
    for (const auto& row : rows) {
        json r = {{"variant", row.variant}};
        json seeds = json::array();
        for (const auto& cell : row.seeds) {
            if (cell.ok) {
                json c = cell.report.to_json(mcfg);
                c["val_loss"] = cell.val_loss;
                seeds.push_back(c);
            } else {
                seeds.push_back({{"failed", cell.error}});
            }
        }
        r["seeds"] = seeds;
        result.push_back(r);
    }
    write_json(fs::path(out_dir) / "result.json", result);
    std::cout << "ablation table written to " << (fs::path(out_dir) / "ablation.csv").string()
              << "\n";
    return 0;
}

int cmd_render(const std::string& config_path, std::string dem_path, std::string texture_path,
               std::string out_dir, int factor, double z_scale, std::string light_csv) {
    json cfgj = config_section(config_path, "render",
                               {"dem", "texture", "out", "factor", "z_scale", "light"});
    if (dem_path.empty()) dem_path = cfgj.value("dem", "");
    if (texture_path.empty()) texture_path = cfgj.value("texture", "");
    if (out_dir.empty()) out_dir = cfgj.value("out", "");
    if (factor == 0) factor = cfgj.value("factor", 4);
    if (z_scale < 0) z_scale = cfgj.value("z_scale", -1.0);
    if (light_csv.empty()) light_csv = cfgj.value("light", "1,1,1.2");
    check(!dem_path.empty(), "render: --dem is required");
    check(!texture_path.empty(), "render: --texture is required");
    check(!out_dir.empty(), "render: --out is required");

    TerrainTile dem = load_dem_tile(dem_path);
    TextureTile tex{read_png_rgb8(texture_path)};
    check(dem.height() == tex.height() && dem.width() == tex.width(),
          "render: DEM and texture sizes differ");

    // vertical exaggeration: grid units per normalized elevation. With meta,
    // use the real range at ~30 m/px; otherwise a plausible default.
    if (z_scale < 0) {
        if (dem.meta && dem.meta->max_elev_m > dem.meta->min_elev_m)
            z_scale = double(dem.meta->max_elev_m - dem.meta->min_elev_m) / 30.0;
        else
            z_scale = 6.0;
    }

    auto light_parts = split_csv(light_csv);
    check(light_parts.size() == 3, "render: light must be x,y,z");
    std::array<float, 3> light = {std::stof(light_parts[0]), std::stof(light_parts[1]),
                                  std::stof(light_parts[2])};

    TerrainTile dem_hi = subdivide_dem(dem, factor);
    TextureTile tex_hi = upscale_texture(tex, factor);
    TextureTile preview = hillshade_render(dem_hi, tex_hi, light, float(z_scale * factor));

    fs::create_directories(out_dir);
    json effective = {{"dem", dem_path},   {"texture", texture_path}, {"out", out_dir},
                      {"factor", factor},  {"z_scale", z_scale},      {"light", light_csv}};
    echo_config(out_dir, "render", effective);
    write_png_rgb8(fs::path(out_dir) / "preview.png", preview.rgb);
    auto stats = export_mesh(dem_hi, tex_hi, float(z_scale * factor),
                             fs::path(out_dir) / "mesh.obj");
    json result = {{"preview", (fs::path(out_dir) / "preview.png").string()},
                   {"mesh", (fs::path(out_dir) / "mesh.obj").string()},
                   {"vertices", stats.vertices},
                   {"faces", stats.faces},
                   {"z_scale", z_scale}};
    write_json(fs::path(out_dir) / "result.json", result);
    std::cout << "wrote preview and mesh to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"geodiffussr: DEM- and text-conditioned terrain texture generation"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file with per-command sections")
        ->configurable(false);

    // dataset-synth
    auto* synth = app.add_subcommand("dataset-synth", "generate a synthetic triplet corpus");
    synth->fallthrough();
    std::string s_out, s_presets;
    int s_n = 0;
    uint64_t s_seed = 0;
    double s_coupling = -1;
    std::array<double, 3> s_ratios = {0.9, 0.05, 0.05};
    synth->add_option("--out", s_out, "output dataset directory");
    synth->add_option("--n", s_n, "number of triplets");
    synth->add_option("--presets", s_presets, "comma-separated biome presets");
    synth->add_option("--seed", s_seed, "corpus seed");
    synth->add_option("--coupling", s_coupling, "height-appearance coupling in [0,1]");
    synth->add_option("--split-ratios", s_ratios, "train/val/test ratios");

    // train
    auto* tr = app.add_subcommand("train", "train a velocity model");
    tr->fallthrough();
    std::string t_manifest, t_out, t_mode, t_size, t_resume;
    int t_steps = 0, t_batch = 0;
    uint64_t t_seed = 0, t_split_seed = 0;
    double t_lr = -1;
    std::array<double, 3> t_ratios = {0.9, 0.05, 0.05};
    tr->add_option("--manifest", t_manifest, "dataset manifest path");
    tr->add_option("--out", t_out, "run output directory");
    tr->add_option("--seed", t_seed, "training seed");
    tr->add_option("--steps", t_steps, "max training steps");
    tr->add_option("--batch", t_batch, "batch size");
    tr->add_option("--mode", t_mode, "MCA mode: full|single16|none");
    tr->add_option("--size", t_size, "size preset: S|M|L");
    tr->add_option("--lr", t_lr, "learning rate");
    tr->add_option("--resume", t_resume, "checkpoint to resume from");
    tr->add_option("--split-ratios", t_ratios, "train/val/test ratios if unsplit");
    tr->add_option("--split-seed", t_split_seed, "stratified split seed");

    // sample
    auto* sm = app.add_subcommand("sample", "sample a texture for a DEM and prompt");
    sm->fallthrough();
    std::string m_ckpt, m_dem, m_prompt, m_out;
    uint64_t m_seed = 0;
    int m_steps = 0;
    double m_cfg_scale = -1;
    sm->add_option("--checkpoint", m_ckpt, "trained checkpoint");
    sm->add_option("--dem", m_dem, "input DEM (16-bit grayscale png)");
    sm->add_option("--prompt", m_prompt, "text prompt");
    sm->add_option("--seed", m_seed, "sampling seed");
    sm->add_option("--out", m_out, "output directory");
    sm->add_option("--steps", m_steps, "euler steps");
    sm->add_option("--cfg-scale", m_cfg_scale, "guidance scale w");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    ev->fallthrough();
    std::string e_ckpt, e_manifest, e_split = "val", e_gen = "model", e_out;
    uint64_t e_seed = 0;
    ev->add_option("--checkpoint", e_ckpt, "trained checkpoint");
    ev->add_option("--manifest", e_manifest, "dataset manifest path");
    ev->add_option("--split", e_split, "split to evaluate");
    ev->add_option("--generator", e_gen, "generator: model|cheat|noise");
    ev->add_option("--out", e_out, "output directory");
    ev->add_option("--seed", e_seed, "evaluation seed");

    // ablate
    auto* ab = app.add_subcommand("ablate", "run the MCA / model-size ablation harness");
    ab->fallthrough();
    std::string a_manifest, a_out, a_modes, a_sizes;
    int a_seeds = 0, a_steps = 0, a_batch = 0, a_sampler_steps = 0;
    uint64_t a_seed = 0;
    ab->add_option("--manifest", a_manifest, "dataset manifest path");
    ab->add_option("--out", a_out, "output directory");
    ab->add_option("--modes", a_modes, "comma-separated MCA modes");
    ab->add_option("--sizes", a_sizes, "comma-separated size presets");
    ab->add_option("--seeds", a_seeds, "seeds per variant");
    ab->add_option("--steps", a_steps, "training steps per run");
    ab->add_option("--batch", a_batch, "batch size");
    ab->add_option("--seed", a_seed, "base seed");
    ab->add_option("--sampler-steps", a_sampler_steps, "euler steps for evaluation sampling");

    // render
    auto* rd = app.add_subcommand("render", "compose a 2.5D preview and mesh");
    rd->fallthrough();
    std::string r_dem, r_tex, r_out, r_light;
    int r_factor = 0;
    double r_zscale = -1;
    rd->add_option("--dem", r_dem, "input DEM (16-bit grayscale png)");
    rd->add_option("--texture", r_tex, "input texture (8-bit rgb png)");
    rd->add_option("--out", r_out, "output directory");
    rd->add_option("--factor", r_factor, "subdivision/upscale factor: 2|4|8");
    rd->add_option("--zscale", r_zscale, "vertical exaggeration (grid units)");
    rd->add_option("--light", r_light, "light direction x,y,z");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed())
            return cmd_dataset_synth(config_path, s_out, s_n, s_presets, s_seed, s_coupling,
                                     s_ratios);
        if (tr->parsed())
            return cmd_train(config_path, t_manifest, t_out, t_seed, t_steps, t_batch, t_mode,
                             t_size, t_lr, t_resume, t_ratios, t_split_seed);
        if (sm->parsed())
            return cmd_sample(config_path, m_ckpt, m_dem, m_prompt, m_seed, m_out, m_steps,
                              m_cfg_scale);
        if (ev->parsed())
            return cmd_eval(config_path, e_ckpt, e_manifest, e_split, e_gen, e_out, e_seed);
        if (ab->parsed())
            return cmd_ablate(config_path, a_manifest, a_out, a_modes, a_sizes, a_seeds, a_steps,
                              a_batch, a_seed, a_sampler_steps);
        if (rd->parsed())
            return cmd_render(config_path, r_dem, r_tex, r_out, r_factor, r_zscale, r_light);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

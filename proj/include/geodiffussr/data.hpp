#pragma once

// Triplet dataset: manifest schema and I/O, DEM normalization,
// biome-stratified splitting, deterministic batch iteration, and the
// synthetic triplet generator with a controllable height-appearance coupling.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "geodiffussr/metrics.hpp"
#include "geodiffussr/png_io.hpp"
#include "geodiffussr/rng.hpp"
#include "geodiffussr/tensor.hpp"
#include "geodiffussr/tile.hpp"

namespace gdr {

enum class Split { TRAIN, VAL, TEST, UNASSIGNED };

inline std::string to_string(Split s) {
    switch (s) {
        case Split::TRAIN: return "train";
        case Split::VAL: return "val";
        case Split::TEST: return "test";
        case Split::UNASSIGNED: return "unassigned";
    }
    return "?";
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::TRAIN;
    if (s == "val") return Split::VAL;
    if (s == "test") return Split::TEST;
    if (s == "unassigned") return Split::UNASSIGNED;
    fail("unknown split: " + s);
}

struct TripletRecord {
    std::string dem_path;    // manifest-relative
    std::string image_path;  // manifest-relative
    std::string caption;
    std::string biome;
    std::string aoi_id;
    Split split = Split::UNASSIGNED;

    uint64_t record_id() const { return fnv1a64(dem_path + "|" + image_path); }
};

struct DemNormalization {
    std::string mode = "per_tile_minmax";  // or "global_affine"
    double a = 0.0, b = 1.0;               // global_affine: raw range [a,b] -> [0,1]
};

constexpr int kManifestSchemaVersion = 1;

struct Manifest {
    std::vector<TripletRecord> records;
    int schema_version = kManifestSchemaVersion;
    DemNormalization normalization;
    std::filesystem::path root;  // directory the manifest was loaded from

    void validate() const {
        check(schema_version == kManifestSchemaVersion,
              "unsupported manifest schema_version: " + std::to_string(schema_version));
        std::set<std::pair<std::string, std::string>> seen;
        for (const auto& r : records) {
            check(!r.biome.empty(), "manifest record with empty biome: " + r.dem_path);
            auto key = std::make_pair(r.dem_path, r.image_path);
            check(!seen.count(key), "duplicate (dem_path, image_path) pair: " + r.dem_path +
                                        ", " + r.image_path);
            seen.insert(key);
        }
    }

    std::vector<size_t> indices_of(Split split) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < records.size(); ++i)
            if (records[i].split == split) out.push_back(i);
        return out;
    }
};

// ---------------------------------------------------------------------------
// manifest I/O
// ---------------------------------------------------------------------------

inline json manifest_to_json(const Manifest& m) {
    json j;
    j["schema_version"] = m.schema_version;
    j["normalization"] = {{"mode", m.normalization.mode},
                          {"a", m.normalization.a},
                          {"b", m.normalization.b}};
    json recs = json::array();
    for (const auto& r : m.records) {
        recs.push_back({{"dem_path", r.dem_path},
                        {"image_path", r.image_path},
                        {"caption", r.caption},
                        {"biome", r.biome},
                        {"aoi_id", r.aoi_id},
                        {"split", to_string(r.split)}});
    }
    j["records"] = recs;
    return j;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    m.validate();
    check(std::filesystem::exists(path.parent_path()) || path.parent_path().empty(),
          "target directory missing: " + path.parent_path().string());
    std::ofstream out(path);
    check(out.good(), "cannot open for write: " + path.string());
    out << manifest_to_json(m).dump(2) << "\n";
    check(out.good(), "write failed: " + path.string());
}

inline Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    check(in.good(), "missing manifest: " + path.string());
    json j = json::parse(in);

    Manifest m;
    m.schema_version = j.value("schema_version", -1);
    check(m.schema_version == kManifestSchemaVersion,
          "unsupported manifest schema_version: " + std::to_string(m.schema_version));
    if (j.contains("normalization")) {
        m.normalization.mode = j["normalization"].value("mode", "per_tile_minmax");
        m.normalization.a = j["normalization"].value("a", 0.0);
        m.normalization.b = j["normalization"].value("b", 1.0);
    }
    for (const auto& e : j.at("records")) {
        TripletRecord r;
        r.dem_path = e.at("dem_path");
        r.image_path = e.at("image_path");
        r.caption = e.value("caption", "");
        r.biome = e.value("biome", "");
        r.aoi_id = e.value("aoi_id", "");
        r.split = parse_split(e.value("split", "unassigned"));
        m.records.push_back(std::move(r));
    }
    m.root = path.parent_path();
    m.validate();

    std::vector<std::string> missing;
    for (const auto& r : m.records) {
        if (!std::filesystem::exists(m.root / r.dem_path)) missing.push_back(r.dem_path);
        if (!std::filesystem::exists(m.root / r.image_path)) missing.push_back(r.image_path);
    }
    if (!missing.empty()) {
        std::string msg = "manifest references missing files:";
        for (const auto& p : missing) msg += "\n  " + p;
        fail(msg);
    }
    return m;
}

// ---------------------------------------------------------------------------
// DEM normalization
// ---------------------------------------------------------------------------

inline TerrainTile normalize_dem(const Tensor<float>& raw, const DemNormalization& norm) {
    check(raw.rank() == 2, "normalize_dem: expects (H,W)");
    for (int64_t i = 0; i < raw.size(); ++i)
        check(std::isfinite(raw[i]),
              "normalize_dem: NaN at pixel " + std::to_string(i / raw.dim(1)) + "," +
                  std::to_string(i % raw.dim(1)));

    TerrainTile tile;
    tile.elevation = Tensor<float>(raw.shape());
    if (norm.mode == "per_tile_minmax") {
        float lo = raw[0], hi = raw[0];
        for (int64_t i = 0; i < raw.size(); ++i) {
            lo = std::min(lo, raw[i]);
            hi = std::max(hi, raw[i]);
        }
        if (hi - lo <= 0.0f) {
            std::cerr << "[geodiffussr] warning: flat DEM tile, normalizing to 0.5\n";
            tile.elevation.fill(0.5f);
        } else {
            for (int64_t i = 0; i < raw.size(); ++i)
                tile.elevation[i] = (raw[i] - lo) / (hi - lo);
        }
        tile.meta = ElevationMeta{lo, hi};
    } else if (norm.mode == "global_affine") {
        check(norm.b > norm.a, "normalize_dem: global_affine needs b > a");
        for (int64_t i = 0; i < raw.size(); ++i)
            tile.elevation[i] =
                std::clamp(float((raw[i] - norm.a) / (norm.b - norm.a)), 0.0f, 1.0f);
        tile.meta = ElevationMeta{float(norm.a), float(norm.b)};
    } else {
        fail("normalize_dem: unknown mode " + norm.mode);
    }
    return tile;
}

inline Tensor<float> denormalize_dem(const TerrainTile& tile) {
    check(tile.meta.has_value(), "denormalize_dem: tile has no meta");
    Tensor<float> out(tile.elevation.shape());
    float lo = tile.meta->min_elev_m, hi = tile.meta->max_elev_m;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = tile.elevation[i] * (hi - lo) + lo;
    return out;
}

// ---------------------------------------------------------------------------
// synthetic triplets
// ---------------------------------------------------------------------------

// Height-appearance coupling of the generated corpus; calibrated so the mean
// dCor across presets sits near the 0.38 regime the metrics default to.
constexpr double kDefaultCoupling = 0.525;

struct SynthParams {
    double coupling = kDefaultCoupling;  // 0 = texture independent of DEM, 1 = fully driven
    double chroma_noise = 0.06;
    double slope_gain = 6.0;  // slope-shading strength over the appearance field
    int size = 32;
};

struct BiomePreset {
    std::string name;
    bool ridged;
    float min_elev_m, max_elev_m;
    // elevation-indexed color ramp (4 stops at 0, 1/3, 2/3, 1)
    std::array<std::array<float, 3>, 4> ramp;
    std::vector<std::string> captions;
};

inline const std::vector<BiomePreset>& biome_presets() {
    static const std::vector<BiomePreset> presets = {
        {"alpine",
         true,
         1800.0f,
         4200.0f,
         {{{0.18f, 0.26f, 0.15f}, {0.38f, 0.42f, 0.32f}, {0.62f, 0.66f, 0.58f}, {0.95f, 0.98f, 0.96f}}},
         {"snow-capped ridges above dark conifer valleys",
          "bare granite peaks with scattered snowfields",
          "steep alpine slopes with talus and bright summits"}},
        {"desert",
         false,
         200.0f,
         900.0f,
         {{{0.76f, 0.60f, 0.42f}, {0.82f, 0.66f, 0.45f}, {0.88f, 0.74f, 0.52f}, {0.93f, 0.83f, 0.64f}}},
         {"rippled sand dunes with pale wind-worn crests",
          "rocky desert flats broken by low dune fields",
          "sun-bleached badlands with sandy washes"}},
        {"forest",
         false,
         100.0f,
         800.0f,
         {{{0.10f, 0.22f, 0.10f}, {0.14f, 0.30f, 0.13f}, {0.22f, 0.38f, 0.18f}, {0.35f, 0.46f, 0.28f}}},
         {"dense broadleaf canopy over rolling hills",
          "dark conifer forest cut by bright clearings",
          "mixed woodland ridges with mossy hollows"}},
        {"tundra",
         false,
         50.0f,
         600.0f,
         {{{0.35f, 0.33f, 0.28f}, {0.48f, 0.44f, 0.36f}, {0.62f, 0.60f, 0.55f}, {0.85f, 0.87f, 0.88f}}},
         {"windswept tundra with patchy late snow",
          "lichen-covered plains fading into frozen rises",
          "barren frost-cracked ground with pale drifts"}},
        {"coast",
         false,
         0.0f,
         250.0f,
         {{{0.13f, 0.32f, 0.45f}, {0.72f, 0.67f, 0.50f}, {0.35f, 0.44f, 0.25f}, {0.27f, 0.36f, 0.20f}}},
         {"sandy shoreline rising into grassy bluffs",
          "tidal flats and dune grass along a curved coast",
          "rocky headlands above narrow beaches"}},
        {"volcanic",
         true,
         600.0f,
         2600.0f,
         {{{0.08f, 0.07f, 0.07f}, {0.22f, 0.16f, 0.13f}, {0.38f, 0.28f, 0.22f}, {0.60f, 0.52f, 0.48f}}},
         {"black lava fields around a scarred cone",
          "ash-gray slopes streaked with old flows",
          "cinder ridges and hardened basalt channels"}},
    };
    return presets;
}

inline const BiomePreset& biome_preset(const std::string& name) {
    for (const auto& p : biome_presets())
        if (p.name == name) return p;
    fail("unknown biome preset: " + name);
}

namespace detail {

// multi-octave value noise on [0,1]^2, bilinear between lattice points
inline Tensor<float> value_noise(int size, uint64_t seed, std::string_view tag, bool ridged) {
    Tensor<float> out({size, size});
    const int octaves[] = {4, 8, 16};
    float amp = 1.0f, amp_sum = 0.0f;
    for (int o = 0; o < 3; ++o) {
        const int n = octaves[o];
        Rng rng = substream(seed, std::string(tag) + ".octave", uint64_t(o));
        std::vector<float> grid(size_t((n + 1) * (n + 1)));
        for (auto& g : grid) g = float(rng.uniform());
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                float fy = float(y) / float(size) * float(n);
                float fx = float(x) / float(size) * float(n);
                int iy = int(fy), ix = int(fx);
                float ty = fy - float(iy), tx = fx - float(ix);
                auto g = [&](int yy, int xx) { return grid[size_t(yy) * size_t(n + 1) + size_t(xx)]; };
                float v = (1 - ty) * ((1 - tx) * g(iy, ix) + tx * g(iy, ix + 1)) +
                          ty * ((1 - tx) * g(iy + 1, ix) + tx * g(iy + 1, ix + 1));
                out[int64_t(y) * size + x] += amp * v;
            }
        amp_sum += amp;
        amp *= 0.5f;
    }
    out.vec() /= amp_sum;
    if (ridged)
        for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0f - std::abs(2.0f * out[i] - 1.0f);
    // per-tile minmax to [0,1]
    float lo = out[0], hi = out[0];
    for (int64_t i = 0; i < out.size(); ++i) {
        lo = std::min(lo, out[i]);
        hi = std::max(hi, out[i]);
    }
    for (int64_t i = 0; i < out.size(); ++i) out[i] = (out[i] - lo) / std::max(1e-9f, hi - lo);
    return out;
}

inline std::array<float, 3> ramp_color(const BiomePreset& preset, float e) {
    e = std::clamp(e, 0.0f, 1.0f);
    float pos = e * 3.0f;
    int k = std::min(2, int(pos));
    float t = pos - float(k);
    std::array<float, 3> c;
    for (int i = 0; i < 3; ++i)
        c[size_t(i)] = preset.ramp[size_t(k)][size_t(i)] * (1 - t) +
                       preset.ramp[size_t(k + 1)][size_t(i)] * t;
    return c;
}

}  // namespace detail

struct SynthTriplet {
    TerrainTile dem;
    TextureTile texture;
    std::string caption;
};

// Fully deterministic per (seed, preset): DEM from multi-octave value noise
// (ridged for mountainous presets), texture from the biome palette ramp over
// a coupling-blended elevation field plus slope shading and chroma noise.
inline SynthTriplet synth_triplet(uint64_t seed, const std::string& preset_name,
                                  const SynthParams& params = {}) {
    const BiomePreset& preset = biome_preset(preset_name);
    check(params.coupling >= 0.0 && params.coupling <= 1.0,
          "synth_triplet: coupling must be in [0,1]");
    const int size = params.size;

    SynthTriplet out;
    out.dem.elevation = detail::value_noise(size, seed, preset_name + ".dem", preset.ridged);
    out.dem.meta = ElevationMeta{preset.min_elev_m, preset.max_elev_m};

    // appearance field: coupling-weighted blend of true elevation and an
    // independent noise field, so dCor(texture, DEM) rises with coupling
    Tensor<float> indep = detail::value_noise(size, seed, preset_name + ".indep", false);
    Tensor<float> field({size, size});
    const float c = float(params.coupling);
    for (int64_t i = 0; i < field.size(); ++i)
        field[i] = c * out.dem.elevation[i] + (1 - c) * indep[i];

    Rng chroma = substream(seed, preset_name + ".chroma");
    out.texture.rgb = Tensor<float>({size, size, 3});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            float e = field[int64_t(y) * size + x];
            auto color = detail::ramp_color(preset, e);
            // slope shading from the appearance field's central differences
            float gx = (field[int64_t(y) * size + std::min(size - 1, x + 1)] -
                        field[int64_t(y) * size + std::max(0, x - 1)]) *
                       0.5f;
            float gy = (field[int64_t(std::min(size - 1, y + 1)) * size + x] -
                        field[int64_t(std::max(0, y - 1)) * size + x]) *
                       0.5f;
            float shade = std::clamp(1.0f - float(params.slope_gain) * std::sqrt(gx * gx + gy * gy),
                                     0.6f, 1.0f);
            for (int ch = 0; ch < 3; ++ch) {
                float v = color[size_t(ch)] * shade +
                          float(params.chroma_noise) * float(chroma.uniform(-0.5, 0.5));
                out.texture.rgb[(int64_t(y) * size + x) * 3 + ch] = std::clamp(v, 0.0f, 1.0f);
            }
        }

    Rng cap = substream(seed, preset_name + ".caption");
    out.caption = preset.captions[size_t(cap.below(preset.captions.size()))];
    return out;
}

// ---------------------------------------------------------------------------
// stratified splitting
// ---------------------------------------------------------------------------

// Within each biome stratum: seeded shuffle, then largest-remainder
// partitioning by the given ratios. Preserves the record multiset.
inline Manifest stratified_split(const Manifest& manifest, const std::array<double, 3>& ratios,
                                 uint64_t seed) {
    double sum = ratios[0] + ratios[1] + ratios[2];
    check(std::abs(sum - 1.0) <= 1e-9, "stratified_split: ratios must sum to 1");
    for (double r : ratios) check(r >= 0.0, "stratified_split: negative ratio");
    check(!manifest.records.empty(), "stratified_split: empty manifest");

    std::map<std::string, std::vector<size_t>> strata;
    for (size_t i = 0; i < manifest.records.size(); ++i)
        strata[manifest.records[i].biome].push_back(i);
    for (const auto& [biome, idx] : strata)
        check(!idx.empty(), "stratified_split: empty stratum " + biome);

    Manifest out = manifest;
    for (auto& [biome, idx] : strata) {
        Rng rng = substream(seed, "split." + biome);
        shuffle(idx, rng);
        const size_t n = idx.size();

        // largest-remainder rounding
        std::array<size_t, 3> counts{};
        std::array<double, 3> frac{};
        size_t assigned = 0;
        for (int k = 0; k < 3; ++k) {
            double quota = double(n) * ratios[size_t(k)];
            counts[size_t(k)] = size_t(quota);
            frac[size_t(k)] = quota - double(counts[size_t(k)]);
            assigned += counts[size_t(k)];
        }
        while (assigned < n) {
            int best = 0;
            for (int k = 1; k < 3; ++k)
                if (frac[size_t(k)] > frac[size_t(best)]) best = k;
            counts[size_t(best)] += 1;
            frac[size_t(best)] = -1.0;
            ++assigned;
        }

        size_t pos = 0;
        const Split splits[3] = {Split::TRAIN, Split::VAL, Split::TEST};
        for (int k = 0; k < 3; ++k)
            for (size_t j = 0; j < counts[size_t(k)]; ++j)
                out.records[idx[pos++]].split = splits[k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch iteration
// ---------------------------------------------------------------------------

// Seeded shuffle per epoch; the final partial batch is yielded. The (epoch,
// cursor) state restores exactly for bit-exact training resume.
class BatchIterator {
public:
    BatchIterator(const Manifest& manifest, Split split, int batch_size, uint64_t seed)
        : batch_size_(batch_size), seed_(seed) {
        check(batch_size >= 1, "batch_iter: batch_size must be >= 1");
        base_ = manifest.indices_of(split);
        check(!base_.empty(), "batch_iter: empty split " + to_string(split));
        reshuffle();
    }

    std::vector<size_t> next() {
        if (cursor_ >= order_.size()) {
            ++epoch_;
            cursor_ = 0;
            reshuffle();
        }
        size_t take = std::min(size_t(batch_size_), order_.size() - cursor_);
        std::vector<size_t> batch(order_.begin() + int64_t(cursor_),
                                  order_.begin() + int64_t(cursor_ + take));
        cursor_ += take;
        return batch;
    }

    int64_t epoch() const { return epoch_; }
    size_t cursor() const { return cursor_; }
    size_t split_size() const { return base_.size(); }

    void restore(int64_t epoch, size_t cursor) {
        check(cursor <= base_.size(), "batch_iter: bad cursor");
        epoch_ = epoch;
        cursor_ = cursor;
        reshuffle();
    }

private:
    void reshuffle() {
        order_ = base_;
        Rng rng = substream(seed_, "batch-order", uint64_t(epoch_));
        shuffle(order_, rng);
    }

    std::vector<size_t> base_, order_;
    int batch_size_;
    uint64_t seed_;
    int64_t epoch_ = 0;
    size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// dataset synthesis to disk + RAM cache
// ---------------------------------------------------------------------------

// dataset/{dems,images,captions}/<id>.<ext> + manifest.json; DEM as 16-bit
// grayscale PNG with a JSON meta sidecar, texture as 8-bit RGB PNG.
inline Manifest synthesize_dataset(const std::filesystem::path& out_dir, int n,
                                   const std::vector<std::string>& presets, uint64_t seed,
                                   const SynthParams& params = {}, int aoi_block = 32) {
    check(n >= 1, "synthesize_dataset: n must be >= 1");
    check(!presets.empty(), "synthesize_dataset: no presets given");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "dems");
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "captions");

    Manifest m;
    m.normalization.mode = "per_tile_minmax";
    m.root = out_dir;
    for (int i = 0; i < n; ++i) {
        const std::string& preset = presets[size_t(i) % presets.size()];
        uint64_t triplet_seed = mix64(seed ^ mix64(uint64_t(i) + 1));
        SynthTriplet t = synth_triplet(triplet_seed, preset, params);

        char id[32];
        std::snprintf(id, sizeof(id), "t%06d", i);
        std::string dem_rel = std::string("dems/") + id + ".png";
        std::string img_rel = std::string("images/") + id + ".png";
        write_png_gray16(out_dir / dem_rel, t.dem.elevation);
        write_png_rgb8(out_dir / img_rel, t.texture.rgb);
        {
            json meta = {{"min_elev_m", t.dem.meta->min_elev_m},
                         {"max_elev_m", t.dem.meta->max_elev_m}};
            std::ofstream side(out_dir / "dems" / (std::string(id) + ".json"));
            side << meta.dump(2) << "\n";
        }
        {
            std::ofstream cap(out_dir / "captions" / (std::string(id) + ".txt"));
            cap << t.caption << "\n";
        }

        TripletRecord r;
        r.dem_path = dem_rel;
        r.image_path = img_rel;
        r.caption = t.caption;
        r.biome = preset;
        r.aoi_id = "synth-aoi-" + std::to_string(i / aoi_block);
        m.records.push_back(std::move(r));
    }
    write_manifest(m, out_dir / "manifest.json");
    return m;
}

struct LoadedTriplet {
    TerrainTile dem;
    TextureTile texture;
    std::string caption;
};

// Tiles are tiny (32x32); the whole corpus is cached in RAM up front.
class DatasetCache {
public:
    explicit DatasetCache(const Manifest& manifest) : manifest_(manifest) {
        triplets_.reserve(manifest.records.size());
        for (const auto& r : manifest.records) {
            LoadedTriplet t;
            t.dem.elevation = read_png_gray16(manifest.root / r.dem_path);
            auto side = manifest.root / r.dem_path;
            side.replace_extension(".json");
            if (std::filesystem::exists(side)) {
                std::ifstream in(side);
                json j = json::parse(in);
                t.dem.meta =
                    ElevationMeta{j.value("min_elev_m", 0.0f), j.value("max_elev_m", 0.0f)};
            }
            t.texture.rgb = read_png_rgb8(manifest.root / r.image_path);
            t.caption = r.caption;
            triplets_.push_back(std::move(t));
        }
    }

    const LoadedTriplet& at(size_t i) const { return triplets_.at(i); }
    size_t size() const { return triplets_.size(); }
    const Manifest& manifest() const { return manifest_; }

private:
    Manifest manifest_;
    std::vector<LoadedTriplet> triplets_;
};

}  // namespace gdr

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stace/binary_io.hpp"
#include "stace/pipeline.hpp"
#include "stace/render.hpp"

// On-disk pipeline: a plain-text config, one directory per stage, and a
// manifest per stage recording input/output checksums.

namespace stace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

struct WorkspaceConfig {
    std::string out_dir = "workspace";
    std::uint64_t seed = 1;
    std::string dataset;  // manifest path; empty means synthesize
    int synth_classes = 4;
    int synth_videos_per_class = 20;
    Extent synth_dims{16, 32, 32};
    Extent input_dims{16, 32, 32};
    std::size_t epochs = 20;
    double lr = 0.01;
    std::size_t batch = 8;
    PipelineOptions pipeline;
    std::string model_id = "builtin";

    /// Directory against which relative paths in the config resolve.
    fs::path base_dir = ".";

    fs::path out() const { return base_dir / out_dir; }
    fs::path dataset_manifest() const {
        return dataset.empty() ? out() / "data" / "manifest.txt" : base_dir / dataset;
    }
};

namespace config_detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream in(v);
    T out{};
    if (!(in >> out) || !(in >> std::ws).eof())
        throw ParseError(ParseError::Kind::Syntax, "config: bad value for '" + key + "': '" + v + "'");
    return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
    if (!v.empty() && v[0] == '-') throw ParseError(ParseError::Kind::Syntax, "config: '" + key + "' must be non-negative");
    return parse_number<std::size_t>(key, v);
}

inline std::array<std::size_t, 3> parse_triple(const std::string& key, const std::string& v) {
    std::istringstream in(v);
    std::array<std::size_t, 3> out{};
    for (auto& x : out)
        if (!(in >> x)) throw ParseError(ParseError::Kind::Syntax, "config: '" + key + "' needs three integers");
    if (!(in >> std::ws).eof()) throw ParseError(ParseError::Kind::Syntax, "config: '" + key + "' needs three integers");
    return out;
}

inline std::string triple(std::size_t a, std::size_t b, std::size_t c) {
    return std::to_string(a) + " " + std::to_string(b) + " " + std::to_string(c);
}

inline std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace config_detail

/// Every key with its current value, in a fixed order; the parse/dump pair round-trips.
inline std::vector<std::pair<std::string, std::string>> config_entries(const WorkspaceConfig& c) {
    using config_detail::num;
    using config_detail::triple;
    const auto& p = c.pipeline;
    return {
        {"out_dir", c.out_dir},
        {"seed", std::to_string(c.seed)},
        {"dataset", c.dataset},
        {"synth_classes", std::to_string(c.synth_classes)},
        {"synth_videos_per_class", std::to_string(c.synth_videos_per_class)},
        {"synth_dims", triple(c.synth_dims.t, c.synth_dims.h, c.synth_dims.w)},
        {"input_dims", triple(c.input_dims.t, c.input_dims.h, c.input_dims.w)},
        {"epochs", std::to_string(c.epochs)},
        {"lr", num(c.lr)},
        {"batch", std::to_string(c.batch)},
        {"levels", triple(p.counts.small, p.counts.middle, p.counts.large)},
        {"compactness", num(p.compactness)},
        {"slic_iters", std::to_string(p.slic_iters)},
        {"tau", num(p.tau)},
        {"layer", p.layer},
        {"concepts", std::to_string(p.n_concepts)},
        {"kmeans_iters", std::to_string(p.kmeans_iters)},
        {"kmeans_restarts", std::to_string(p.kmeans_restarts)},
        {"min_size", std::to_string(p.min_size)},
        {"min_videos", std::to_string(p.min_videos)},
        {"cav_l2", num(p.cav.l2)},
        {"cav_epochs", std::to_string(p.cav.epochs)},
        {"cav_lr", num(p.cav.lr)},
        {"negatives", to_string(p.negatives)},
        {"n_negatives", std::to_string(p.n_negatives)},
        {"score_k", std::to_string(p.score_k)},
        {"k_max", std::to_string(p.k_max)},
        {"model_id", c.model_id},
    };
}

inline void set_config_value(WorkspaceConfig& c, const std::string& key, const std::string& v) {
    using namespace config_detail;
    auto& p = c.pipeline;
    if (key == "out_dir") c.out_dir = v;
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "dataset") c.dataset = v;
    else if (key == "synth_classes") c.synth_classes = parse_number<int>(key, v);
    else if (key == "synth_videos_per_class") c.synth_videos_per_class = parse_number<int>(key, v);
    else if (key == "synth_dims") { auto d = parse_triple(key, v); c.synth_dims = {d[0], d[1], d[2]}; }
    else if (key == "input_dims") { auto d = parse_triple(key, v); c.input_dims = {d[0], d[1], d[2]}; }
    else if (key == "epochs") c.epochs = parse_count(key, v);
    else if (key == "lr") c.lr = parse_number<double>(key, v);
    else if (key == "batch") c.batch = parse_count(key, v);
    else if (key == "levels") { auto d = parse_triple(key, v); p.counts = {d[0], d[1], d[2]}; }
    else if (key == "compactness") p.compactness = parse_number<double>(key, v);
    else if (key == "slic_iters") p.slic_iters = parse_count(key, v);
    else if (key == "tau") p.tau = parse_number<double>(key, v);
    else if (key == "layer") p.layer = v;
    else if (key == "concepts") p.n_concepts = parse_count(key, v);
    else if (key == "kmeans_iters") p.kmeans_iters = parse_count(key, v);
    else if (key == "kmeans_restarts") p.kmeans_restarts = parse_count(key, v);
    else if (key == "min_size") p.min_size = parse_count(key, v);
    else if (key == "min_videos") p.min_videos = parse_count(key, v);
    else if (key == "cav_l2") p.cav.l2 = parse_number<double>(key, v);
    else if (key == "cav_epochs") p.cav.epochs = parse_count(key, v);
    else if (key == "cav_lr") p.cav.lr = parse_number<double>(key, v);
    else if (key == "negatives") {
        if (v != "whole" && v != "segments")
            throw ParseError(ParseError::Kind::Syntax, "config: negatives must be 'whole' or 'segments'");
        p.negatives = negative_source_from_string(v);
    }
    else if (key == "n_negatives") p.n_negatives = parse_count(key, v);
    else if (key == "score_k") p.score_k = parse_count(key, v);
    else if (key == "k_max") p.k_max = parse_count(key, v);
    else if (key == "model_id") c.model_id = v;
    else throw ParseError(ParseError::Kind::Syntax, "config: unknown key '" + key + "'");
}

/// Range checks that are not syntax errors.
inline void validate(const WorkspaceConfig& c) {
    const auto& p = c.pipeline;
    detail::require(!c.out_dir.empty(), "config: out_dir must not be empty");
    detail::require(c.synth_classes >= 2, "config: synth_classes must be >= 2");
    detail::require(c.synth_videos_per_class >= 2, "config: synth_videos_per_class must be >= 2");
    detail::require(c.input_dims.t >= 8 && c.input_dims.h >= 8 && c.input_dims.w >= 8 && c.input_dims.t % 8 == 0 &&
                        c.input_dims.h % 8 == 0 && c.input_dims.w % 8 == 0,
                    "config: input_dims must be multiples of 8");
    detail::require(c.epochs >= 1 && c.batch >= 1 && c.lr > 0, "config: epochs, batch and lr must be positive");
    detail::require(p.counts.small > p.counts.middle && p.counts.middle > p.counts.large && p.counts.large >= 1,
                    "config: levels must satisfy small > middle > large >= 1");
    detail::require(p.compactness > 0, "config: compactness must be > 0");
    detail::require(p.slic_iters >= 1, "config: slic_iters must be >= 1");
    detail::require(p.tau > 0 && p.tau <= 1, "config: tau must be in (0, 1]");
    detail::require(p.n_concepts >= 1 && p.kmeans_iters >= 1 && p.kmeans_restarts >= 1,
                    "config: concepts, kmeans_iters and kmeans_restarts must be >= 1");
    detail::require(p.min_size >= 4, "config: min_size must be >= 4 (a CAV needs at least 4 positives)");
    detail::require(p.cav.lr > 0 && p.cav.l2 >= 0 && p.cav.epochs >= 1, "config: invalid CAV optimizer settings");
    detail::require(p.k_max >= 1, "config: k_max must be >= 1");
}

inline WorkspaceConfig parse_config(const std::string& text, fs::path base_dir = ".") {
    WorkspaceConfig c;
    c.base_dir = std::move(base_dir);
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(ParseError::Kind::Syntax, "config line " + std::to_string(lineno) + ": expected `key = value`");
        set_config_value(c, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    }
    return c;
}

inline WorkspaceConfig load_config(const std::string& path) {
    return parse_config(binary::read_text(path), fs::absolute(path).parent_path());
}

inline std::string dump_config(const WorkspaceConfig& c) {
    std::string out;
    for (const auto& [k, v] : config_entries(c)) out += k + " = " + v + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Stages

inline constexpr std::array<const char*, 8> kStages{"synth", "train", "segment", "cluster",
                                                    "cav",   "score", "eval",    "render"};

inline std::size_t stage_index(const std::string& name) {
    for (std::size_t i = 0; i < kStages.size(); ++i)
        if (name == kStages[i]) return i;
    throw InvalidArgument("unknown stage '" + name + "'");
}

inline std::uint64_t stage_seed(const WorkspaceConfig& c, const std::string& stage) { return c.seed + stage_index(stage); }

inline fs::path stage_dir(const WorkspaceConfig& c, const std::string& stage) {
    static const std::map<std::string, std::string> dirs{{"synth", "data"},    {"train", "model"},   {"segment", "segments"},
                                                         {"cluster", "concepts"}, {"cav", "cavs"}, {"score", "reports"},
                                                         {"eval", "eval"},     {"render", "render"}};
    return c.out() / dirs.at(stage);
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string file_checksum(const fs::path& p) { return hex64(binary::fnv1a(binary::read_file(p.string()))); }

/// Regular files under `dir` (recursive), excluding the stage manifest, as
/// paths relative to `root`, sorted.
inline std::vector<std::string> list_files(const fs::path& dir, const fs::path& root) {
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
            out.push_back(fs::relative(e.path(), root).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

struct StageContext {
    const WorkspaceConfig& config;
    std::string stage;
    std::vector<std::string> log;  // warnings and notes, recorded in the manifest

    fs::path dir() const { return stage_dir(config, stage); }
    std::uint64_t seed() const { return stage_seed(config, stage); }
};

/// Stages whose outputs a stage reads.
inline std::vector<std::string> stage_dependencies(const std::string& stage) {
    static const std::map<std::string, std::vector<std::string>> deps{
        {"synth", {}},
        {"train", {"synth"}},
        {"segment", {"synth"}},
        {"cluster", {"synth", "train", "segment"}},
        {"cav", {"synth", "train", "segment", "cluster"}},
        {"score", {"synth", "train", "cluster", "cav"}},
        {"eval", {"synth", "train", "segment", "cluster", "score"}},
        {"render", {"synth", "segment", "cluster", "score"}},
    };
    return deps.at(stage);
}

inline fs::path manifest_path(const WorkspaceConfig& c, const std::string& stage) {
    return stage_dir(c, stage) / "manifest.json";
}

/// Throws MissingStage naming the earliest dependency without a manifest.
inline void require_stages(const WorkspaceConfig& c, const std::string& stage) {
    for (const auto& d : stage_dependencies(stage)) {
        if (d == "synth" && !c.dataset.empty()) {
            if (!fs::exists(c.dataset_manifest()))
                throw IoError("dataset manifest not found: " + c.dataset_manifest().string());
            continue;
        }
        if (!fs::exists(manifest_path(c, d))) throw MissingStage(d);
    }
}

/// Input checksums: the config dump plus every file the dependencies produced.
inline nlohmann::json stage_inputs(const WorkspaceConfig& c, const std::string& stage) {
    nlohmann::json in = nlohmann::json::object();
    std::string cfg = dump_config(c);
    in["config"] = hex64(binary::fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(cfg.data()), cfg.size())));
    for (const auto& d : stage_dependencies(stage)) {
        if (d == "synth" && !c.dataset.empty()) {
            const fs::path dir = c.dataset_manifest().parent_path();
            for (const auto& f : list_files(dir, dir)) in["dataset/" + f] = file_checksum(dir / f);
            continue;
        }
        for (const auto& f : list_files(stage_dir(c, d), c.out())) in[f] = file_checksum(c.out() / f);
    }
    return in;
}

inline nlohmann::json stage_outputs(const WorkspaceConfig& c, const std::string& stage) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& f : list_files(stage_dir(c, stage), c.out())) out[f] = file_checksum(c.out() / f);
    return out;
}

/// True when the stage's manifest matches both its current inputs and outputs.
inline bool stage_up_to_date(const WorkspaceConfig& c, const std::string& stage, const nlohmann::json& inputs) {
    const auto mp = manifest_path(c, stage);
    if (!fs::exists(mp)) return false;
    try {
        const auto m = nlohmann::json::parse(binary::read_text(mp.string()));
        return m.at("inputs") == inputs && m.at("outputs") == stage_outputs(c, stage);
    } catch (const nlohmann::json::exception&) {
        return false;
    }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
    fs::create_directories(p.parent_path());
    binary::write_text(p.string(), j.dump(1) + "\n");
}

inline nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(binary::read_text(p.string()));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(ParseError::Kind::Syntax, p.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Artifact loaders shared by several stages

inline LabeledDataset load_workspace_dataset(const WorkspaceConfig& c) {
    return load_dataset(c.dataset_manifest().string());
}

inline BuiltinNet load_workspace_model(const WorkspaceConfig& c) {
    return load_model((stage_dir(c, "train") / "model.stn1").string());
}

/// Surviving segments of every dataset item, in dataset order.
inline std::vector<std::vector<Segment>> load_workspace_segments(const WorkspaceConfig& c, const LabeledDataset& ds) {
    const fs::path dir = stage_dir(c, "segment");
    const auto index = read_json(dir / "segments.json");
    std::map<std::string, std::vector<SegmentRef>> keep;
    for (const auto& v : index.at("videos")) {
        auto& refs = keep[v.at("id").get<std::string>()];
        for (const auto& r : v.at("keep")) refs.push_back(segment_ref_from_json(r));
    }
    std::vector<std::vector<Segment>> out;
    for (const auto& item : ds.items) {
        auto it = keep.find(item.id);
        if (it == keep.end()) throw MissingStage("segment");
        SegmentationLevels lv;
        for (Level l : kLevels) {
            const auto lbl = read_labels((dir / (item.id + "." + to_string(l) + ".stl1")).string());
            (l == Level::Small ? lv.small : l == Level::Middle ? lv.middle : lv.large) = lbl;
        }
        out.push_back(surviving_segments(item.id, item.video, lv, it->second));
    }
    return out;
}

/// Rebuilds the featurized segment table from the stored feature matrix.
inline SegmentTable load_workspace_table(const WorkspaceConfig& c, const LabeledDataset& ds,
                                         std::span<const std::vector<Segment>> segments) {
    const VideoTensor f = read_tensor((stage_dir(c, "cluster") / "features.stv1").string());
    SegmentTable t;
    t.features = FeatureMatrix(0, f.extent().w);
    for (std::size_t i = 0; i < segments.size(); ++i)
        for (const auto& s : segments[i]) {
            t.refs.push_back(ref_of(s));
            t.labels.push_back(ds.items[i].label);
            t.splits.push_back(ds.items[i].split);
            t.items.push_back(i);
        }
    if (f.extent().h != t.refs.size())
        throw ParseError(ParseError::Kind::ShapeMismatch, "features.stv1 rows do not match the segment list");
    t.features.data.assign(f.data().begin(), f.data().end());
    t.features.rows = t.refs.size();
    return t;
}

inline std::vector<Concept> load_workspace_concepts(const WorkspaceConfig& c) {
    return concepts_from_json(read_json(stage_dir(c, "cluster") / "concepts.json"));
}

inline std::map<int, ImportanceReport> load_workspace_reports(const WorkspaceConfig& c, int num_classes) {
    std::map<int, ImportanceReport> out;
    for (int y = 0; y < num_classes; ++y) {
        const auto p = stage_dir(c, "score") / ("class_" + std::to_string(y) + ".json");
        if (fs::exists(p)) out[y] = report_from_json(read_json(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stage bodies

inline void run_synth(StageContext& ctx) {
    const auto& c = ctx.config;
    if (!c.dataset.empty()) {
        // External dataset: validate it and record where it came from.
        const auto ds = load_workspace_dataset(c);
        write_json(ctx.dir() / "external.json",
                   {{"manifest", c.dataset}, {"videos", ds.items.size()}, {"classes", ds.num_classes}});
        return;
    }
    const auto ds = synth_dataset(c.synth_classes, c.synth_videos_per_class, c.synth_dims, ctx.seed());
    save_dataset(ds, ctx.dir().string());
}

inline void run_train(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto ds = load_workspace_dataset(c);
    TrainOptions opt;
    opt.epochs = c.epochs;
    opt.lr = c.lr;
    opt.batch = c.batch;
    opt.seed = ctx.seed();
    const auto result = train_model(ds, opt, c.input_dims);
    save_model((ctx.dir() / "model.stn1").string(), result.net);
    std::ostringstream log;
    log << "epoch,loss\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) log << e + 1 << ',' << config_detail::num(result.epoch_loss[e]) << '\n';
    binary::write_text((ctx.dir() / "train_log.csv").string(), log.str());
    ctx.log.push_back("baseline accuracy " + format_percent(baseline_accuracy(result.net, ds)));
}

inline void run_segment(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto ds = load_workspace_dataset(c);
    auto videos = nlohmann::json::array();
    for (const auto& item : ds.items) {
        const auto vs = segment_video(item.id, item.video, c.pipeline, ctx.seed());
        for (Level l : kLevels)
            write_labels((ctx.dir() / (item.id + "." + to_string(l) + ".stl1")).string(), vs.levels.at(l));
        auto keep = nlohmann::json::array();
        for (const auto& s : vs.segments) keep.push_back(to_json(ref_of(s)));
        videos.push_back({{"id", item.id}, {"keep", std::move(keep)}});
    }
    write_json(ctx.dir() / "segments.json", {{"tau", c.pipeline.tau}, {"videos", std::move(videos)}});
}

inline void run_cluster(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto ds = load_workspace_dataset(c);
    const auto net = load_workspace_model(c);
    const auto segments = load_workspace_segments(c, ds);
    const auto table = featurize_segments(net, ds, segments, c.pipeline.layer);
    VideoTensor f({1, table.features.rows, table.features.cols}, 1);
    std::copy(table.features.data.begin(), table.features.data.end(), f.data().begin());
    write_tensor((ctx.dir() / "features.stv1").string(), f);

    std::vector<Concept> all;
    for (int y = 0; y < ds.num_classes; ++y) {
        auto cs = discover_concepts(table, y, c.pipeline, class_seed(ctx.seed(), y));
        if (cs.empty()) ctx.log.push_back("class " + std::to_string(y) + ": no concept survived pruning");
        all.insert(all.end(), cs.begin(), cs.end());
    }
    write_json(ctx.dir() / "concepts.json", concepts_to_json(all));
}

inline void run_cav(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto ds = load_workspace_dataset(c);
    const auto net = load_workspace_model(c);
    const auto segments = load_workspace_segments(c, ds);
    const auto table = load_workspace_table(c, ds, segments);
    const auto concepts = load_workspace_concepts(c);
    auto run = learn_cavs(net, ds, table, concepts, c.pipeline, ctx.seed());
    ctx.log.insert(ctx.log.end(), run.warnings.begin(), run.warnings.end());
    write_json(ctx.dir() / "cavs.json", cavs_to_json(run.cavs));
}

inline void run_score(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto ds = load_workspace_dataset(c);
    const auto net = load_workspace_model(c);
    const auto cavs = cavs_from_json(read_json(stage_dir(c, "cav") / "cavs.json"));
    for (int y = 0; y < ds.num_classes; ++y) {
        const auto own = cavs_of_class(cavs, y);
        if (own.empty()) {
            ctx.log.push_back("class " + std::to_string(y) + ": no CAVs; no report written");
            continue;
        }
        const auto videos = scoring_videos(net, ds, y, c.pipeline.score_k);
        const auto report = tcav_scores(net, videos, own, y, c.pipeline.layer);
        write_json(ctx.dir() / ("class_" + std::to_string(y) + ".json"), report_to_json(report));
    }
}

inline void run_eval(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto ds = load_workspace_dataset(c);
    const auto net = load_workspace_model(c);
    const auto segments = load_workspace_segments(c, ds);
    const auto table = load_workspace_table(c, ds, segments);
    const auto concepts = load_workspace_concepts(c);
    const auto reports = load_workspace_reports(c, ds.num_classes);
    const auto videos = index_test_videos(ds, table, segments, concepts);
    auto run = evaluate(net, ds, videos, reports, c.pipeline.k_max, ctx.seed(), c.model_id);
    for (auto& curve : run.curves) curve.seed = c.seed;
    binary::write_text((ctx.dir() / "curves.csv").string(), curves_to_csv(run.curves));
    write_json(ctx.dir() / "summary.json", {{"baseline", run.baseline},
                                            {"remove_k0", run.remove_k0},
                                            {"add_k0", run.add_k0},
                                            {"warnings", run.warnings}});
    ctx.log.insert(ctx.log.end(), run.warnings.begin(), run.warnings.end());
}

/// The member video with the most member segments (ties: smallest id) and
/// those members' masks.
inline std::pair<std::size_t, std::vector<VoxelMask>> concept_showcase(const Concept& cpt, const LabeledDataset& ds,
                                                                        std::span<const std::vector<Segment>> segments) {
    std::map<std::string, std::size_t> count;
    for (const auto& m : cpt.members) ++count[m.video_id];
    std::string best;
    std::size_t best_n = 0;
    for (const auto& [id, n] : count)
        if (n > best_n) best = id, best_n = n;
    std::size_t item = 0;
    while (item < ds.items.size() && ds.items[item].id != best) ++item;
    detail::require(item < ds.items.size(), "concept member video '" + best + "' not in dataset");
    const std::set<SegmentRef> members(cpt.members.begin(), cpt.members.end());
    std::vector<VoxelMask> masks;
    for (const auto& s : segments[item])
        if (members.count(ref_of(s))) masks.push_back(s.mask);
    return {item, std::move(masks)};
}

inline void run_render(StageContext& ctx) {
    const auto& c = ctx.config;
    const auto ds = load_workspace_dataset(c);
    const auto segments = load_workspace_segments(c, ds);
    const auto concepts = load_workspace_concepts(c);
    const auto reports = load_workspace_reports(c, ds.num_classes);
    for (const auto& [y, rep] : reports) {
        if (rep.ranking.empty()) continue;
        const std::pair<const char*, int> picks[] = {{"top", rep.ranking.front()}, {"least", rep.ranking.back()}};
        for (const auto& [tag, id] : picks) {
            const auto it = std::find_if(concepts.begin(), concepts.end(),
                                         [&](const Concept& k) { return k.class_label == y && k.id == id; });
            detail::require(it != concepts.end(), "report references unknown concept " + std::to_string(id));
            const auto [item, masks] = concept_showcase(*it, ds, segments);
            const auto out = ctx.dir() / ("class_" + std::to_string(y)) /
                             (std::string(tag) + "_c" + std::to_string(id) + "_" + ds.items[item].id);
            render_overlay(ds.items[item].video, masks, out.string());
        }
    }
}

inline const std::map<std::string, std::function<void(StageContext&)>>& stage_bodies() {
    static const std::map<std::string, std::function<void(StageContext&)>> m{
        {"synth", run_synth},     {"train", run_train}, {"segment", run_segment}, {"cluster", run_cluster},
        {"cav", run_cav},         {"score", run_score}, {"eval", run_eval},       {"render", run_render}};
    return m;
}

struct StageOutcome {
    bool skipped = false;
    std::vector<std::string> log;
};

/// Runs one stage unless its manifest shows identical inputs and intact
/// outputs. Stale outputs are removed first so the directory holds only
/// what this run wrote.
inline StageOutcome run_stage(const std::string& stage, const WorkspaceConfig& c) {
    validate(c);
    stage_index(stage);
    require_stages(c, stage);
    const auto inputs = stage_inputs(c, stage);
    if (stage_up_to_date(c, stage, inputs)) return {true, {}};

    StageContext ctx{c, stage, {}};
    fs::remove_all(ctx.dir());
    fs::create_directories(ctx.dir());
    stage_bodies().at(stage)(ctx);
    write_json(manifest_path(c, stage), {{"stage", stage},
                                         {"seed", ctx.seed()},
                                         {"inputs", inputs},
                                         {"outputs", stage_outputs(c, stage)},
                                         {"log", ctx.log}});
    return {false, ctx.log};
}

}  // namespace stace

#ifndef MEMESCOPE_PIPELINE_STAGES_HPP_
#define MEMESCOPE_PIPELINE_STAGES_HPP_

#include "memescope/analytics.hpp"
#include "memescope/deepcluster.hpp"
#include "memescope/detector.hpp"
#include "memescope/linalg.hpp"
#include "memescope/memefilter.hpp"
#include "memescope/pipeline/state.hpp"
#include "memescope/synth.hpp"
#include "memescope/tsne.hpp"

#include <iomanip>

namespace memescope::pipeline {

// Artifact names inside a run directory.
namespace files {
inline constexpr const char* manifest = "manifest.jsonl";
inline constexpr const char* corpus_dir = "corpus";
inline constexpr const char* filter_ckpt = "filter.ckpt";
inline constexpr const char* filter_report = "filter_report.json";
inline constexpr const char* filtered = "filtered.jsonl";
inline constexpr const char* embed_ckpt = "embed.ckpt";
inline constexpr const char* checkpoints_dir = "checkpoints";
inline constexpr const char* traces = "traces.jsonl";
inline constexpr const char* embedded = "embedded.jsonl";
inline constexpr const char* embeddings = "embeddings.emb1";
inline constexpr const char* assignments = "assignments.json";
inline constexpr const char* centroids = "centroids.json";
inline constexpr const char* projection = "projection.json";
inline constexpr const char* profiles = "profiles.json";
inline constexpr const char* sheets_dir = "contact_sheets";
inline constexpr const char* report = "detection_report.json";
inline constexpr const char* detector_model = "detector.logr";
inline constexpr const char* labels = "labels.json";
}  // namespace files

namespace detail {

inline std::string rel(const std::filesystem::path& run_dir, const std::filesystem::path& p)
{
    return std::filesystem::absolute(p).lexically_normal().lexically_relative(
        std::filesystem::absolute(run_dir).lexically_normal()).generic_string();
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j)
{
    write_file_atomic(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& path)
{
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.filename().string() + ": invalid JSON (" + e.what() + ")");
    }
}

inline Manifest only(const Manifest& m, std::initializer_list<Source> sources)
{
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (std::find(sources.begin(), sources.end(), m.records[i].source) != sources.end()) idx.push_back(i);
    return m.subset(idx);
}

inline convnet::NetworkSpec with_head(const std::string& backbone, std::size_t classes)
{
    return convnet::NetworkSpec::parse(backbone + "-head(" + std::to_string(classes) + ")");
}

// Embeddings plus the manifest whose records they follow.
struct EmbeddedRun {
    Manifest manifest;
    MatrixD x;
};

inline EmbeddedRun load_embedded(const std::filesystem::path& run_dir)
{
    EmbeddedRun r{load_manifest(run_dir / files::embedded), read_emb1(run_dir / files::embeddings)};
    if (r.manifest.size() != r.x.rows())
        throw InputError("embeddings have " + std::to_string(r.x.rows()) + " rows for " +
                         std::to_string(r.manifest.size()) + " records");
    return r;
}

}  // namespace detail

// Feature space of the final clustering; analyze repeats it to measure
// distances to the stored centroids.
inline MatrixD cluster_space(const MatrixD& x, const ClusterSettings& s)
{
    MatrixD out = x;
    if (s.whiten) {
        const std::size_t limit = x.rows() == 0 ? 0 : std::min(x.rows() - 1, x.cols());
        if (s.pca_dim < 1 || s.pca_dim > limit)
            throw InputError("cluster: pca_dim " + std::to_string(s.pca_dim) + " must be in [1, " +
                             std::to_string(limit) + "]");
        out = linalg::pca_whiten(linalg::pca_fit(out, s.pca_dim), out);
    }
    if (s.l2) out = linalg::l2_normalize_rows(out).matrix;
    return out;
}

inline nlohmann::ordered_json centroids_json(const MatrixD& c)
{
    nlohmann::ordered_json j;
    j["K"] = c.rows();
    j["D"] = c.cols();
    auto& rows = j["centroids"] = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < c.rows(); ++k) {
        auto r = c.row(k);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    return j;
}

inline MatrixD parse_centroids(const nlohmann::json& j)
{
    try {
        const auto k = j.at("K").get<std::size_t>(), d = j.at("D").get<std::size_t>();
        MatrixD c(k, d);
        const auto& rows = j.at("centroids");
        if (rows.size() != k) throw InputError("centroids: row count does not match K");
        for (std::size_t r = 0; r < k; ++r) {
            const auto v = rows[r].get<std::vector<double>>();
            if (v.size() != d) throw InputError("centroids: row " + std::to_string(r) + " has the wrong length");
            std::copy(v.begin(), v.end(), c.row(r).begin());
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("centroids: malformed file (") + e.what() + ")");
    }
}

// Each stage returns the run-dir relative paths it wrote.
using Outputs = std::vector<std::string>;

inline Outputs stage_synth(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    Outputs out;
    Manifest m;
    if (cfg.corpus_manifest) {
        m = load_manifest(*cfg.corpus_manifest);
        m.validate();
        log::info("synth: using " + std::to_string(m.size()) + " records from " + cfg.corpus_manifest->string());
    } else {
        const auto dir = run_dir / files::corpus_dir;
        std::filesystem::remove_all(dir);
        m = synth::generate_synthetic_corpus(cfg.synthetic, derive_seed(cfg.seed, "synth"), dir).manifest;
        for (const auto& r : m.records) out.push_back(detail::rel(run_dir, r.path));
        out.push_back(detail::rel(run_dir, dir / "manifest.jsonl"));
        log::info("synth: generated " + std::to_string(m.size()) + " images");
    }
    save_manifest(run_dir / files::manifest, m);
    out.push_back(files::manifest);
    return out;
}

// Trained on REDDIT memes against NEGATIVE images, applied to the IRA
// records; the filtered manifest is passing IRA plus every REDDIT record.
inline Outputs stage_filter(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    const Manifest m = load_manifest(run_dir / files::manifest);
    const Manifest positives = detail::only(m, {Source::REDDIT});
    const Manifest negatives = detail::only(m, {Source::NEGATIVE});
    const Manifest ira = detail::only(m, {Source::IRA});
    if (positives.empty()) throw InputError("filter: corpus has no REDDIT records to train on");
    if (negatives.empty()) throw InputError("filter: corpus has no NEGATIVE records to train on");
    if (ira.empty()) throw InputError("filter: corpus has no IRA records to filter");

    memefilter::FilterConfig fc;
    fc.side = cfg.filter.side;
    fc.split = cfg.filter.split;
    fc.epochs = cfg.filter.epochs;
    fc.batch_size = cfg.filter.batch_size;
    fc.sgd = cfg.filter.sgd;
    fc.spec = detail::with_head(cfg.filter.backbone, 2);
    const auto trained = memefilter::train_filter(positives, negatives, fc, derive_seed(cfg.seed, "filter"));
    const auto applied = memefilter::apply_filter(trained.model, ira, cfg.filter.threshold);

    std::set<std::string> keep;
    for (const auto& r : applied.passing.records) keep.insert(r.id);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.records[i].source == Source::REDDIT || keep.count(m.records[i].id)) idx.push_back(i);
    const Manifest filtered = m.subset(idx);

    nlohmann::ordered_json report;
    report["training"] = memefilter::to_json(trained.report);
    report["application"] = memefilter::to_json(applied.report);
    report["filtered_counts"] = {{"IRA", filtered.count(Source::IRA)}, {"REDDIT", filtered.count(Source::REDDIT)}};
    memefilter::save_filter(run_dir / files::filter_ckpt, trained.model);
    detail::write_json(run_dir / files::filter_report, report);
    save_manifest(run_dir / files::filtered, filtered);
    log::info("filter: " + std::to_string(applied.report.passed) + " of " + std::to_string(ira.size()) +
              " IRA images pass; test accuracy " +
              (trained.report.test_accuracy ? std::to_string(*trained.report.test_accuracy) : std::string("n/a")));
    return {files::filter_ckpt, files::filter_report, files::filtered};
}

inline Outputs stage_embed(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    const Manifest filtered = load_manifest(run_dir / files::filtered);
    const std::size_t ira = filtered.count(Source::IRA), reddit = filtered.count(Source::REDDIT);
    const std::size_t per = cfg.embed.per_source ? cfg.embed.per_source : std::min(ira, reddit);
    if (per == 0) throw InputError("embed: filtered corpus needs both IRA and REDDIT records");
    const Manifest sample =
        balanced_sample(filtered, per, {Source::IRA, Source::REDDIT}, derive_seed(cfg.seed, "embed.sample"));
    const LoadedImages loaded = load_images(sample, cfg.embed.side);

    deepcluster::DeepClusterConfig dc = cfg.embed.dc;
    dc.seed = derive_seed(cfg.seed, "embed");
    auto net = convnet::init_network<float>(detail::with_head(cfg.embed.backbone, dc.pseudo_k), cfg.embed.side,
                                            derive_seed(cfg.seed, "embed.init"));

    const auto ckpt_dir = run_dir / files::checkpoints_dir;
    std::filesystem::remove_all(ckpt_dir);
    std::filesystem::create_directories(ckpt_dir);
    Outputs out;
    const auto result = deepcluster::train(net, std::span<const PixelTensor>(loaded.tensors), dc,
                                           [&](const convnet::Network<float>& n, const deepcluster::EpochTrace& t) {
                                               std::ostringstream name;
                                               name << "epoch_" << std::setw(3) << std::setfill('0') << t.epoch
                                                    << ".ckpt";
                                               convnet::save_checkpoint(ckpt_dir / name.str(), n);
                                               out.push_back(detail::rel(run_dir, ckpt_dir / name.str()));
                                           });
    write_file_atomic(run_dir / files::traces, deepcluster::traces_jsonl(result.history));
    convnet::save_checkpoint(run_dir / files::embed_ckpt, net);

    const auto features = convnet::extract_features(net, filtered);
    save_manifest(run_dir / files::embedded, features.manifest);
    write_emb1(run_dir / files::embeddings, features.features);
    log::info("embed: " + std::to_string(features.features.rows()) + " x " + std::to_string(features.features.cols()) +
              " embeddings");
    out.insert(out.end(), {files::traces, files::embed_ckpt, files::embedded, files::embeddings});
    return out;
}

inline Outputs stage_cluster(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    const auto run = detail::load_embedded(run_dir);
    if (cfg.cluster.k > run.x.rows())
        throw InputError("cluster: K = " + std::to_string(cfg.cluster.k) + " exceeds the " +
                         std::to_string(run.x.rows()) + " embedded images");
    const MatrixD x = cluster_space(run.x, cfg.cluster);
    const auto model = kmeans::kmeans_fit(x, cfg.cluster.k, cfg.cluster.kmeans, derive_seed(cfg.seed, "cluster"));
    std::vector<std::string> ids;
    for (const auto& r : run.manifest.records) ids.push_back(r.id);
    detail::write_json(run_dir / files::assignments, kmeans::assignments_json(model, x, ids));
    detail::write_json(run_dir / files::centroids, centroids_json(model.centroids));
    log::info("cluster: K = " + std::to_string(model.k()) + ", inertia " + std::to_string(model.inertia));
    return {files::assignments, files::centroids};
}

inline kmeans::AssignmentsFile load_assignments(const std::filesystem::path& run_dir, const Manifest& m)
{
    auto a = kmeans::parse_assignments(detail::read_json(run_dir / files::assignments));
    if (a.ids.size() != m.size()) throw InputError("assignments do not cover the embedded manifest");
    for (std::size_t i = 0; i < m.size(); ++i)
        if (a.ids[i] != m.records[i].id) throw InputError("assignments are out of order at row " + std::to_string(i));
    return a;
}

inline Outputs stage_project(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    const auto run = detail::load_embedded(run_dir);
    const auto a = load_assignments(run_dir, run.manifest);
    tsne::TsneConfig tc = cfg.tsne;
    tc.seed = derive_seed(cfg.seed, "project");
    const auto p = tsne::tsne_project(run.x, tc);
    std::vector<tsne::PointInfo> info;
    for (std::size_t i = 0; i < run.manifest.size(); ++i)
        info.push_back({run.manifest.records[i].id, a.clusters[i], to_string(run.manifest.records[i].source)});
    detail::write_json(run_dir / files::projection, tsne::projection_json(p, info));
    log::info("project: final KL " + std::to_string(p.kl));
    return {files::projection};
}

inline Outputs stage_analyze(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    const auto run = detail::load_embedded(run_dir);
    const auto a = load_assignments(run_dir, run.manifest);
    kmeans::KmeansModel model;
    model.centroids = parse_centroids(detail::read_json(run_dir / files::centroids));
    model.assignments = a.clusters;
    const MatrixD x = cluster_space(run.x, cfg.cluster);
    if (model.k() != a.k || model.centroids.cols() != x.cols())
        throw InputError("analyze: centroids do not match the clustering");

    const auto profiles = analytics::order_profiles(
        analytics::profile_clusters(model, x, run.manifest, derive_seed(cfg.seed, "analyze"), cfg.analyze.counts),
        cfg.analyze.order_by);
    detail::write_json(run_dir / files::profiles, analytics::profiles_json(profiles));

    Outputs out{files::profiles};
    const auto sheets = run_dir / files::sheets_dir;
    std::filesystem::remove_all(sheets);
    std::filesystem::create_directories(sheets);
    for (const auto& p : profiles) {
        const auto path = sheets / analytics::sheet_filename(p.cluster);
        write_png(path, analytics::contact_sheet(p, run.manifest, cfg.analyze.thumb_side, cfg.analyze.border));
        out.push_back(detail::rel(run_dir, path));
    }
    log::info("analyze: " + std::to_string(profiles.size()) + " cluster profiles");
    return out;
}

inline Outputs stage_detect(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    const auto run = detail::load_embedded(run_dir);
    const auto y = detector::source_labels(run.manifest);
    const auto t = detector::train_detector(run.x, y, cfg.detect, derive_seed(cfg.seed, "detect"));
    detail::write_json(run_dir / files::report, detector::to_json(t.report));
    detector::save_logr(run_dir / files::detector_model, t.model);
    log::info("detect: test accuracy " + std::to_string(t.report.accuracy) + ", AUC " + std::to_string(t.report.auc));
    return {files::report, files::detector_model};
}

struct StageResult {
    bool ran = false;  // false: already up to date
    Outputs outputs;
};

inline StageResult run_stage(std::string_view stage, const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    if (!is_stage(stage)) throw InputError("unknown stage '" + std::string(stage) + "'");
    std::filesystem::create_directories(run_dir);
    RunState state = load_state(run_dir);
    require_upstream(run_dir, cfg, state, stage);
    const std::string fp = fingerprint(cfg, stage, state);
    if (stage_status(run_dir, cfg, state, stage) == StageStatus::complete) {
        log::info(std::string(stage) + ": up to date");
        const StageMarker* m = state.find(stage);
        StageResult r;
        for (const auto& [path, hash] : m->outputs) r.outputs.push_back(path);
        return r;
    }

    Outputs out;
    if (stage == "synth") out = stage_synth(cfg, run_dir);
    else if (stage == "filter") out = stage_filter(cfg, run_dir);
    else if (stage == "embed") out = stage_embed(cfg, run_dir);
    else if (stage == "cluster") out = stage_cluster(cfg, run_dir);
    else if (stage == "project") out = stage_project(cfg, run_dir);
    else if (stage == "analyze") out = stage_analyze(cfg, run_dir);
    else out = stage_detect(cfg, run_dir);

    StageMarker marker{fp, {}};
    for (const auto& p : out) marker.outputs[p] = sha256_file(run_dir / p);
    state.stages[std::string(stage)] = std::move(marker);
    state.seed = cfg.seed;
    save_state(run_dir, state);
    return {true, std::move(out)};
}

inline void run_all(const RunConfig& cfg, const std::filesystem::path& run_dir)
{
    for (auto s : stage_names) run_stage(s, cfg, run_dir);
}

// Labels attach to this id; it changes whenever the clustering does.
inline std::string run_id(const std::filesystem::path& run_dir)
{
    return sha256_file(run_dir / files::assignments).substr(0, 16);
}

}  // namespace memescope::pipeline

#endif

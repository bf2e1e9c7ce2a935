#ifndef MEMESCOPE_PIPELINE_CONFIG_HPP_
#define MEMESCOPE_PIPELINE_CONFIG_HPP_

#include "memescope/analytics.hpp"
#include "memescope/deepcluster.hpp"
#include "memescope/detector.hpp"
#include "memescope/memefilter.hpp"
#include "memescope/synth.hpp"
#include "memescope/tsne.hpp"

#include <nlohmann/json.hpp>

#include <set>

namespace memescope::pipeline {

inline constexpr const char* default_backbone =
    "conv(8,3,1,1)-relu-maxpool(2,2)-conv(16,3,1,1)-relu-maxpool(2,2)-flatten-dense(256)-relu";

struct FilterSettings {
    double threshold = 0.9;
    std::size_t epochs = 30;
    std::size_t side = 64;
    double split = 0.8;
    std::size_t batch_size = 16;
    convnet::SgdConfig sgd;
    std::string backbone = default_backbone;
};

struct EmbedSettings {
    std::size_t side = 64;
    std::size_t per_source = 0;  // 0: as many as the smaller source allows
    std::string backbone = default_backbone;
    deepcluster::DeepClusterConfig dc;
};

struct ClusterSettings {
    std::size_t k = 100;
    bool whiten = false;
    std::size_t pca_dim = 32;
    bool l2 = false;
    kmeans::KmeansOptions kmeans;
};

struct AnalyzeSettings {
    analytics::SampleCounts counts;
    analytics::OrderKey order_by = analytics::OrderKey::share_gap;
    std::size_t thumb_side = 64;
    std::size_t border = 3;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> corpus_manifest;  // absent: generate a synthetic corpus
    synth::CorpusSpec synthetic;
    FilterSettings filter;
    EmbedSettings embed;
    ClusterSettings cluster;
    tsne::TsneConfig tsne;
    AnalyzeSettings analyze;
    detector::DetectorConfig detect;

    RunConfig()
    {
        synthetic.coordinated = 240;
        synthetic.coordinated_nonmeme = 60;
        synthetic.authentic = 240;
        synthetic.negative = 150;
        synthetic.cross_motif = 0.2;
    }
};

class ConfigError : public InputError {
  public:
    using InputError::InputError;
};

namespace detail {

// One JSON object; done() reports keys nobody read as unknown fields.
class Section {
  public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ConfigError("config: '" + display() + "' must be an object");
    }

    void done() const
    {
        for (const auto& [k, v] : j_.items())
            if (!used_.count(k)) throw ConfigError("config: unknown field '" + field(k) + "'");
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) const { return j_.contains(key); }

    std::optional<Section> child(const std::string& key)
    {
        used_.insert(key);
        if (!j_.contains(key)) return std::nullopt;
        return std::optional<Section>(std::in_place, j_.at(key), field(key));
    }

    template <typename T>
    void read(const std::string& key, T& out)
    {
        used_.insert(key);
        if (!j_.contains(key)) return;
        const auto& v = j_.at(key);
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_unsigned()) throw ConfigError("");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) throw ConfigError("");
            } else {
                if (!v.is_string()) throw ConfigError("");
            }
            out = v.get<T>();
        } catch (const std::exception&) {
            throw ConfigError("config: field '" + field(key) + "' has the wrong type");
        }
    }

    void check(bool ok, const std::string& key, const std::string& why) const
    {
        if (!ok) throw ConfigError("config: field '" + field(key) + "' " + why);
    }

  private:
    std::string display() const { return path_.empty() ? "<root>" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline void read_sgd(Section& s, convnet::SgdConfig& sgd)
{
    s.read("lr", sgd.lr);
    s.read("momentum", sgd.momentum);
    s.read("weight_decay", sgd.weight_decay);
    s.check(sgd.lr >= 0, "lr", "must be >= 0");
    s.check(sgd.momentum >= 0 && sgd.momentum < 1, "momentum", "must be in [0, 1)");
    s.check(sgd.weight_decay >= 0, "weight_decay", "must be >= 0");
}

inline void check_backbone(Section& s, const std::string& text)
{
    try {
        const auto spec = convnet::NetworkSpec::parse(text);
        for (const auto& l : spec.layers)
            if (l.kind == convnet::LayerKind::head) throw InputError("the head is added by the pipeline");
    } catch (const InputError& e) {
        s.check(false, "backbone", std::string("is invalid: ") + e.what());
    }
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base = {})
{
    RunConfig c;
    detail::Section root(j, "");
    root.read("seed", c.seed);

    if (auto corpus = root.child("corpus")) {
        std::string manifest;
        corpus->read("manifest", manifest);
        if (!manifest.empty()) {
            std::filesystem::path p = manifest;
            c.corpus_manifest = p.is_absolute() ? p : (base / p).lexically_normal();
        }
        if (auto s = corpus->child("synthetic")) {
            auto& sp = c.synthetic;
            s->read("coordinated", sp.coordinated);
            s->read("coordinated_nonmeme", sp.coordinated_nonmeme);
            s->read("authentic", sp.authentic);
            s->read("negative", sp.negative);
            s->read("cross_motif", sp.cross_motif);
            s->read("min_side", sp.min_side);
            s->read("max_side", sp.max_side);
            s->read("mean_jitter", sp.mean_jitter);
            s->check(sp.cross_motif >= 0 && sp.cross_motif <= 1, "cross_motif", "must be in [0, 1]");
            s->check(sp.min_side >= 16, "min_side", "must be >= 16");
            s->check(sp.max_side >= sp.min_side, "max_side", "must be >= min_side");
            s->done();
        }
        corpus->done();
    }

    if (auto s = root.child("filter")) {
        auto& f = c.filter;
        s->read("threshold", f.threshold);
        s->read("epochs", f.epochs);
        s->read("side", f.side);
        s->read("split", f.split);
        s->read("batch_size", f.batch_size);
        s->read("backbone", f.backbone);
        detail::read_sgd(*s, f.sgd);
        s->check(f.threshold >= 0 && f.threshold <= 1, "threshold", "must be in [0, 1]");
        s->check(f.epochs >= 1, "epochs", "must be >= 1");
        s->check(f.side >= 8, "side", "must be >= 8");
        s->check(f.split > 0 && f.split < 1, "split", "must be in (0, 1)");
        s->check(f.batch_size >= 1, "batch_size", "must be >= 1");
        detail::check_backbone(*s, f.backbone);
        s->done();
    }

    if (auto s = root.child("embed")) {
        auto& e = c.embed;
        auto& dc = e.dc;
        s->read("side", e.side);
        s->read("per_source", e.per_source);
        s->read("backbone", e.backbone);
        s->read("epochs", dc.epochs);
        s->read("pseudo_k", dc.pseudo_k);
        s->read("pca_dim", dc.pca_dim);
        s->read("whiten", dc.whiten);
        s->read("l2", dc.l2);
        s->read("lr", dc.lr);
        s->read("momentum", dc.momentum);
        s->read("weight_decay", dc.weight_decay);
        s->read("batch_size", dc.batch_size);
        s->read("uniform_cluster_sampling", dc.uniform_cluster_sampling);
        s->read("flip", dc.flip);
        s->check(e.side >= 8, "side", "must be >= 8");
        s->check(dc.epochs >= 1, "epochs", "must be >= 1");
        s->check(dc.pseudo_k >= 2, "pseudo_k", "must be >= 2");
        s->check(!dc.whiten || dc.pca_dim >= 1, "pca_dim", "must be >= 1");
        s->check(dc.lr >= 0, "lr", "must be >= 0");
        s->check(dc.momentum >= 0 && dc.momentum < 1, "momentum", "must be in [0, 1)");
        s->check(dc.weight_decay >= 0, "weight_decay", "must be >= 0");
        s->check(dc.batch_size >= 1, "batch_size", "must be >= 1");
        detail::check_backbone(*s, e.backbone);
        s->done();
    }

    if (auto s = root.child("cluster")) {
        auto& k = c.cluster;
        s->read("k", k.k);
        s->read("whiten", k.whiten);
        s->read("pca_dim", k.pca_dim);
        s->read("l2", k.l2);
        s->read("max_iter", k.kmeans.max_iter);
        s->read("tol", k.kmeans.tol);
        s->read("restarts", k.kmeans.restarts);
        s->check(k.k >= 1, "k", "must be >= 1");
        s->check(k.kmeans.max_iter >= 1, "max_iter", "must be >= 1");
        s->check(k.kmeans.tol >= 0, "tol", "must be >= 0");
        s->check(k.kmeans.restarts >= 1, "restarts", "must be >= 1");
        s->done();
    }

    if (auto s = root.child("tsne")) {
        auto& t = c.tsne;
        s->read("perplexity", t.perplexity);
        s->read("iterations", t.iterations);
        s->read("learning_rate", t.learning_rate);
        s->read("exaggeration", t.exaggeration);
        s->read("exaggeration_iters", t.exaggeration_iters);
        s->check(t.perplexity >= 1, "perplexity", "must be >= 1");
        s->check(t.iterations >= 1, "iterations", "must be >= 1");
        s->check(t.learning_rate > 0, "learning_rate", "must be > 0");
        s->check(t.exaggeration >= 1, "exaggeration", "must be >= 1");
        s->done();
    }

    if (auto s = root.child("analyze")) {
        auto& a = c.analyze;
        std::string order = "share_gap";
        s->read("representatives", a.counts.representatives);
        s->read("random", a.counts.random);
        s->read("order_by", order);
        s->read("thumb_side", a.thumb_side);
        s->read("border", a.border);
        const auto key = analytics::parse_order_key(order);
        s->check(key.has_value(), "order_by", "must be 'share_gap' or 'ira_share'");
        a.order_by = *key;
        s->check(a.thumb_side >= 1, "thumb_side", "must be >= 1");
        s->done();
    }

    if (auto s = root.child("detect")) {
        auto& d = c.detect;
        s->read("split", d.split);
        s->read("lr", d.lr);
        s->read("l2", d.l2);
        s->read("epochs", d.epochs);
        s->check(d.split > 0 && d.split < 1, "split", "must be in (0, 1)");
        s->check(d.lr > 0, "lr", "must be > 0");
        s->check(d.l2 >= 0, "l2", "must be >= 0");
        s->check(d.epochs >= 1, "epochs", "must be >= 1");
        s->done();
    }
    root.done();
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
    }
    return parse_config(j, path.parent_path());
}

// Canonical per-stage settings; a stage's fingerprint covers exactly these.
inline nlohmann::ordered_json stage_settings(const RunConfig& c, std::string_view stage)
{
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    if (stage == "synth") {
        if (c.corpus_manifest) {
            j["manifest"] = c.corpus_manifest->generic_string();
        } else {
            const auto& s = c.synthetic;
            j["synthetic"] = {{"coordinated", s.coordinated}, {"coordinated_nonmeme", s.coordinated_nonmeme},
                              {"authentic", s.authentic},     {"negative", s.negative},
                              {"cross_motif", s.cross_motif}, {"min_side", s.min_side},
                              {"max_side", s.max_side},       {"mean_jitter", s.mean_jitter}};
        }
    } else if (stage == "filter") {
        const auto& f = c.filter;
        j["filter"] = {{"threshold", f.threshold}, {"epochs", f.epochs},         {"side", f.side},
                       {"split", f.split},         {"batch_size", f.batch_size}, {"lr", f.sgd.lr},
                       {"momentum", f.sgd.momentum}, {"weight_decay", f.sgd.weight_decay}, {"backbone", f.backbone}};
    } else if (stage == "embed") {
        const auto& e = c.embed;
        const auto& d = e.dc;
        j["embed"] = {{"side", e.side},
                      {"per_source", e.per_source},
                      {"backbone", e.backbone},
                      {"epochs", d.epochs},
                      {"pseudo_k", d.pseudo_k},
                      {"pca_dim", d.pca_dim},
                      {"whiten", d.whiten},
                      {"l2", d.l2},
                      {"lr", d.lr},
                      {"momentum", d.momentum},
                      {"weight_decay", d.weight_decay},
                      {"batch_size", d.batch_size},
                      {"uniform_cluster_sampling", d.uniform_cluster_sampling},
                      {"flip", d.flip}};
    } else if (stage == "cluster") {
        const auto& k = c.cluster;
        j["cluster"] = {{"k", k.k},       {"whiten", k.whiten},           {"pca_dim", k.pca_dim},
                        {"l2", k.l2},     {"max_iter", k.kmeans.max_iter}, {"tol", k.kmeans.tol},
                        {"restarts", k.kmeans.restarts}};
    } else if (stage == "project") {
        const auto& t = c.tsne;
        j["tsne"] = {{"perplexity", t.perplexity},
                     {"iterations", t.iterations},
                     {"learning_rate", t.learning_rate},
                     {"exaggeration", t.exaggeration},
                     {"exaggeration_iters", t.exaggeration_iters}};
    } else if (stage == "analyze") {
        const auto& a = c.analyze;
        j["analyze"] = {{"representatives", a.counts.representatives},
                        {"random", a.counts.random},
                        {"order_by", a.order_by == analytics::OrderKey::share_gap ? "share_gap" : "ira_share"},
                        {"thumb_side", a.thumb_side},
                        {"border", a.border}};
    } else if (stage == "detect") {
        const auto& d = c.detect;
        j["detect"] = {{"split", d.split}, {"lr", d.lr}, {"l2", d.l2}, {"epochs", d.epochs}};
    } else {
        throw InputError("unknown stage '" + std::string(stage) + "'");
    }
    return j;
}

}  // namespace memescope::pipeline

#endif

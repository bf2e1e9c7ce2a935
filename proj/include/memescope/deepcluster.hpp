#ifndef MEMESCOPE_DEEPCLUSTER_HPP_
#define MEMESCOPE_DEEPCLUSTER_HPP_

#include "memescope/convnet.hpp"
#include "memescope/kmeans.hpp"
#include "memescope/linalg.hpp"

#include <nlohmann/json.hpp>

#include <optional>

namespace memescope::deepcluster {

struct DeepClusterConfig {
    std::size_t epochs = 10;
    std::size_t pseudo_k = 10;
    std::size_t pca_dim = 32;
    bool whiten = true;
    bool l2 = true;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 16;
    bool uniform_cluster_sampling = true;
    bool flip = false;
    std::uint64_t seed = 0;
    kmeans::KmeansOptions kmeans;

    void validate() const
    {
        if (pseudo_k < 2) throw InputError("deepcluster: pseudo_k must be >= 2");
        if (epochs < 1) throw InputError("deepcluster: epochs must be >= 1");
        if (batch_size < 1) throw InputError("deepcluster: batch_size must be >= 1");
        if (whiten && pca_dim < 1) throw InputError("deepcluster: pca_dim must be >= 1");
        if (!(lr >= 0)) throw InputError("deepcluster: lr must be >= 0");
        if (!(momentum >= 0 && momentum < 1)) throw InputError("deepcluster: momentum must be in [0,1)");
        if (!(weight_decay >= 0)) throw InputError("deepcluster: weight_decay must be >= 0");
    }
};

struct EpochTrace {
    std::size_t epoch = 0;
    double inertia = 0;
    std::optional<double> nmi_vs_previous;
    double mean_loss = 0;
    std::vector<std::size_t> cluster_sizes;
};

inline nlohmann::ordered_json to_json(const EpochTrace& t)
{
    nlohmann::ordered_json j;
    j["epoch"] = t.epoch;
    j["inertia"] = t.inertia;
    if (t.nmi_vs_previous) j["nmi_vs_previous"] = *t.nmi_vs_previous;
    j["mean_loss"] = t.mean_loss;
    j["cluster_sizes"] = t.cluster_sizes;
    return j;
}

inline std::string traces_jsonl(std::span<const EpochTrace> traces)
{
    std::string out;
    for (const auto& t : traces) out += to_json(t).dump() + '\n';
    return out;
}

// Features prepared for clustering: optional PCA whitening, then optional L2.
inline MatrixD preprocess(const MatrixD& features, const DeepClusterConfig& cfg)
{
    MatrixD x = features;
    if (cfg.whiten) {
        const std::size_t limit = std::min(x.rows() - 1, x.cols());
        if (cfg.pca_dim > limit)
            throw InputError("deepcluster: pca_dim " + std::to_string(cfg.pca_dim) + " exceeds min(N-1, D) = " +
                             std::to_string(limit));
        x = linalg::pca_whiten(linalg::pca_fit(x, cfg.pca_dim), x);
    }
    if (cfg.l2) x = linalg::l2_normalize_rows(x).matrix;
    return x;
}

// Batches drawn by picking a cluster uniformly, then a member uniformly.
inline std::vector<std::size_t> uniform_cluster_order(std::span<const std::size_t> assignments, std::size_t k,
                                                      std::size_t count, Rng& rng)
{
    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < assignments.size(); ++i) members[assignments[i]].push_back(i);
    std::vector<std::size_t> nonempty;
    for (std::size_t c = 0; c < k; ++c)
        if (!members[c].empty()) nonempty.push_back(c);
    std::vector<std::size_t> order(count);
    for (auto& o : order) {
        const auto& m = members[nonempty[uniform_index(rng, nonempty.size())]];
        o = m[uniform_index(rng, m.size())];
    }
    return order;
}

struct EpochResult {
    std::vector<std::size_t> assignments;
    EpochTrace trace;
};

inline EpochResult run_epoch(convnet::Network<float>& net, std::span<const PixelTensor> tensors,
                             const DeepClusterConfig& cfg, const std::vector<std::size_t>* previous,
                             std::size_t epoch)
{
    cfg.validate();
    if (tensors.empty()) throw InputError("deepcluster: empty corpus");
    if (cfg.pseudo_k > tensors.size())
        throw InputError("deepcluster: pseudo_k = " + std::to_string(cfg.pseudo_k) + " exceeds corpus size " +
                         std::to_string(tensors.size()));
    if (previous && previous->size() != tensors.size())
        throw InputError("deepcluster: previous assignments do not match corpus size");

    const MatrixD x = preprocess(convnet::extract_features(net, tensors, cfg.batch_size), cfg);
    // The same clustering seed every epoch, so a frozen network reproduces
    // its assignments exactly.
    const kmeans::KmeansModel km = kmeans::kmeans_fit(x, cfg.pseudo_k, cfg.kmeans, derive_seed(cfg.seed, "kmeans"));
    convnet::reinit_head(net, cfg.pseudo_k, derive_seed(derive_seed(cfg.seed, "head"), epoch));

    std::vector<int> labels(km.assignments.begin(), km.assignments.end());
    const std::uint64_t epoch_seed = derive_seed(derive_seed(cfg.seed, "sgd"), epoch);
    Rng rng(derive_seed(epoch_seed, "order"));
    std::vector<std::size_t> order;
    if (cfg.uniform_cluster_sampling) {
        order = uniform_cluster_order(km.assignments, cfg.pseudo_k, tensors.size(), rng);
    } else {
        order.resize(tensors.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(order.begin(), order.end(), rng);
    }
    const convnet::SgdConfig sgd{cfg.lr, cfg.momentum, cfg.weight_decay};

    EpochResult out;
    out.trace.epoch = epoch;
    out.trace.inertia = km.inertia;
    out.trace.cluster_sizes = kmeans::cluster_sizes(km);
    if (previous) out.trace.nmi_vs_previous = kmeans::nmi(*previous, km.assignments);
    out.trace.mean_loss = convnet::sgd_pass(net, tensors, std::span<const int>(labels),
                                            std::span<const std::size_t>(order), cfg.batch_size, sgd, cfg.flip,
                                            derive_seed(epoch_seed, "flip"));
    out.assignments = km.assignments;
    return out;
}

struct TrainResult {
    std::vector<EpochTrace> history;
    std::vector<std::size_t> assignments;
};

// on_epoch, when set, is called after every epoch (checkpointing, logging).
template <typename Callback = std::nullptr_t>
TrainResult train(convnet::Network<float>& net, std::span<const PixelTensor> tensors, const DeepClusterConfig& cfg,
                  Callback on_epoch = nullptr)
{
    cfg.validate();
    TrainResult out;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        EpochResult r = run_epoch(net, tensors, cfg, e == 0 ? nullptr : &out.assignments, e);
        out.assignments = std::move(r.assignments);
        out.history.push_back(r.trace);
        log::info("deepcluster epoch " + std::to_string(e) + " loss " + std::to_string(r.trace.mean_loss) +
                  (r.trace.nmi_vs_previous ? " nmi " + std::to_string(*r.trace.nmi_vs_previous) : std::string()));
        if constexpr (!std::is_same_v<Callback, std::nullptr_t>) on_epoch(net, out.history.back());
    }
    return out;
}

}  // namespace memescope::deepcluster

#endif

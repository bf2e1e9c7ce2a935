#ifndef MEMESCOPE_MEMEFILTER_HPP_
#define MEMESCOPE_MEMEFILTER_HPP_

#include "memescope/convnet.hpp"

#include <nlohmann/json.hpp>

#include <optional>

namespace memescope::memefilter {

inline constexpr std::size_t histogram_bins = 20;

struct FilterConfig {
    std::size_t side = 64;
    double split = 0.8;
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    convnet::SgdConfig sgd{0.01, 0.9, 5e-4};
    convnet::NetworkSpec spec = convnet::NetworkSpec::desk_default(2);
    Normalization norm;
};

struct FilterModel {
    convnet::Network<float> net;
    Normalization norm;
    std::size_t epochs = 0;
    std::uint64_t seed = 0;
};

struct FilterReport {
    std::optional<double> test_accuracy;
    std::size_t train_count = 0;
    std::size_t test_count = 0;
    std::array<std::size_t, histogram_bins> histogram{};
    std::size_t scored = 0;
    std::optional<double> threshold;
    std::size_t passed = 0;
    std::optional<double> pass_fraction;
    std::vector<double> epoch_losses;
    std::vector<std::string> skipped_ids;
};

inline std::size_t histogram_bin(double p)
{
    return std::min<std::size_t>(histogram_bins - 1, static_cast<std::size_t>(std::max(0.0, p) * histogram_bins));
}

inline std::array<std::size_t, histogram_bins> probability_histogram(std::span<const double> probs)
{
    std::array<std::size_t, histogram_bins> h{};
    for (double p : probs) ++h[histogram_bin(p)];
    return h;
}

// Fraction of scores in the first and last bins.
inline double extreme_mass(const std::array<std::size_t, histogram_bins>& h)
{
    std::size_t total = 0;
    for (auto c : h) total += c;
    return total == 0 ? 0.0 : static_cast<double>(h.front() + h.back()) / static_cast<double>(total);
}

// Softmax probability of the meme class (index 1).
inline std::vector<double> meme_probability(const FilterModel& model, std::span<const PixelTensor> tensors)
{
    std::vector<double> out;
    out.reserve(tensors.size());
    for (std::size_t start = 0; start < tensors.size(); start += 32) {
        const std::size_t end = std::min(tensors.size(), start + 32);
        const auto res = convnet::forward(model.net, tensors.subspan(start, end - start));
        // Two-class softmax in double: 1 / (1 + exp(l0 - l1)).
        for (std::size_t b = 0; b < end - start; ++b)
            out.push_back(1.0 / (1.0 + std::exp(static_cast<double>(res.logits(b, 0)) - res.logits(b, 1))));
    }
    return out;
}

struct TrainedFilter {
    FilterModel model;
    FilterReport report;
};

inline TrainedFilter train_filter(const Manifest& positives, const Manifest& negatives, const FilterConfig& cfg,
                                  std::uint64_t seed)
{
    if (positives.empty()) throw InputError("train_filter: no positive (meme) records");
    if (negatives.empty()) throw InputError("train_filter: no negative (non-meme) records");
    if (!(cfg.split > 0.0 && cfg.split < 1.0)) throw InputError("train_filter: split must be in (0,1)");
    if (cfg.epochs == 0) throw InputError("train_filter: epochs must be >= 1");
    if (cfg.spec.layers.empty() || cfg.spec.layers.back().out != 2)
        throw InputError("train_filter: network head must have 2 classes");

    TrainedFilter out;
    std::vector<PixelTensor> tensors;
    std::vector<int> labels;
    for (const auto& [m, label] : {std::pair{&negatives, 0}, std::pair{&positives, 1}}) {
        LoadedImages loaded = load_images(*m, cfg.side, cfg.norm);
        for (auto& t : loaded.tensors) {
            tensors.push_back(std::move(t));
            labels.push_back(label);
        }
        out.report.skipped_ids.insert(out.report.skipped_ids.end(), loaded.skipped_ids.begin(),
                                      loaded.skipped_ids.end());
    }
    if (std::count(labels.begin(), labels.end(), 0) == 0 || std::count(labels.begin(), labels.end(), 1) == 0)
        throw InputError("train_filter: a class has no decodable images");

    const Split split = stratified_split(labels, cfg.split, derive_seed(seed, "split"));
    out.model.net = convnet::init_network<float>(cfg.spec, cfg.side, derive_seed(seed, "init"));
    out.model.norm = cfg.norm;
    out.model.epochs = cfg.epochs;
    out.model.seed = seed;

    std::vector<std::size_t> order = split.train;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        Rng rng(derive_seed(derive_seed(seed, "order"), e));
        shuffle(order.begin(), order.end(), rng);
        double loss = 0;
        try {
            loss = convnet::sgd_pass(out.model.net, std::span<const PixelTensor>(tensors), std::span<const int>(labels),
                                     std::span<const std::size_t>(order), cfg.batch_size, cfg.sgd);
        } catch (const NumericError& err) {
            throw NumericError("train_filter: epoch " + std::to_string(e) + ": " + err.what());
        }
        out.report.epoch_losses.push_back(loss);
        log::debug("filter epoch " + std::to_string(e) + " loss " + std::to_string(loss));
    }

    std::vector<PixelTensor> test_tensors;
    for (auto i : split.test) test_tensors.push_back(tensors[i]);
    const auto probs = meme_probability(out.model, test_tensors);
    std::size_t correct = 0;
    for (std::size_t j = 0; j < probs.size(); ++j)
        if ((probs[j] > 0.5 ? 1 : 0) == labels[split.test[j]]) ++correct;
    out.report.train_count = split.train.size();
    out.report.test_count = split.test.size();
    if (!split.test.empty()) out.report.test_accuracy = static_cast<double>(correct) / static_cast<double>(probs.size());
    out.report.histogram = probability_histogram(probs);
    out.report.scored = probs.size();
    return out;
}

struct FilterResult {
    Manifest passing;
    std::vector<double> probabilities;  // aligned with scored records
    FilterReport report;
};

// Keeps records whose meme probability is strictly above threshold, in input order.
inline FilterResult apply_filter(const FilterModel& model, const Manifest& corpus, double threshold)
{
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw InputError("apply_filter: threshold must be in [0,1]");
    LoadedImages loaded = load_images(corpus, model.net.input_side, model.norm);
    FilterResult out;
    out.probabilities = meme_probability(model, loaded.tensors);
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < loaded.kept.size(); ++j)
        if (out.probabilities[j] > threshold) keep.push_back(loaded.kept[j]);
    out.passing = corpus.subset(keep);
    out.report.histogram = probability_histogram(out.probabilities);
    out.report.scored = out.probabilities.size();
    out.report.threshold = threshold;
    out.report.passed = keep.size();
    if (out.report.scored > 0)
        out.report.pass_fraction = static_cast<double>(keep.size()) / static_cast<double>(out.report.scored);
    out.report.skipped_ids = std::move(loaded.skipped_ids);
    return out;
}

inline nlohmann::ordered_json to_json(const FilterReport& r)
{
    nlohmann::ordered_json j;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    j["test_accuracy"] = opt(r.test_accuracy);
    j["train_count"] = r.train_count;
    j["test_count"] = r.test_count;
    j["threshold"] = opt(r.threshold);
    j["scored"] = r.scored;
    j["passed"] = r.passed;
    j["pass_fraction"] = opt(r.pass_fraction);
    j["histogram"] = r.histogram;
    j["extreme_mass"] = extreme_mass(r.histogram);
    j["epoch_losses"] = r.epoch_losses;
    j["skipped_ids"] = r.skipped_ids;
    return j;
}

inline void save_filter(const std::filesystem::path& path, const FilterModel& m)
{
    convnet::save_checkpoint(path, m.net);
}

inline FilterModel load_filter(const std::filesystem::path& path, const Normalization& norm = {})
{
    FilterModel m;
    m.net = convnet::load_checkpoint<float>(path);
    if (m.net.num_classes() != 2) throw InputError("filter checkpoint must have a 2-class head: " + path.string());
    m.norm = norm;
    return m;
}

}  // namespace memescope::memefilter

#endif

#ifndef MEMESCOPE_DETECTOR_HPP_
#define MEMESCOPE_DETECTOR_HPP_

#include "memescope/manifest.hpp"
#include "memescope/matrix.hpp"

#include <nlohmann/json.hpp>

#include <numeric>

namespace memescope::detector {

struct DetectorConfig {
    double split = 0.7;  // train fraction
    double lr = 0.1;
    double l2 = 1e-4;
    std::size_t epochs = 500;

    void validate() const
    {
        if (!(split > 0.0 && split < 1.0)) throw InputError("detector: split must be in (0, 1)");
        if (!(lr > 0.0)) throw InputError("detector: lr must be > 0");
        if (!(l2 >= 0.0)) throw InputError("detector: l2 must be >= 0");
        if (epochs == 0) throw InputError("detector: epochs must be >= 1");
    }
};

// Weights act on raw (unstandardized) features.
struct LogisticModel {
    std::vector<double> weights;
    double bias = 0;
    std::size_t epochs = 0;
    double lr = 0;
    double l2 = 0;
    std::uint64_t seed = 0;

    std::size_t dim() const { return weights.size(); }
};

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
    friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct DetectionReport {
    Confusion confusion;
    double accuracy = 0;
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    bool precision_undefined = false;
    bool recall_undefined = false;
    double auc = 0;
    double train_accuracy = 0;
    double split = 0.7;
    std::size_t train_count = 0;
    std::size_t test_count = 0;
    std::size_t lr_halvings = 0;
    double final_lr = 0;
    std::vector<double> loss_history;  // regularized training loss per epoch, non-increasing
};

struct Trained {
    LogisticModel model;
    DetectionReport report;
};

inline double sigmoid(double z)
{
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double logit(const LogisticModel& m, std::span<const double> x)
{
    return dot<double>(m.weights, x) + m.bias;
}

inline std::vector<double> score(const LogisticModel& m, const MatrixD& x)
{
    if (x.cols() != m.dim())
        throw InputError("score: feature dimension " + std::to_string(x.cols()) + " != model dimension " +
                         std::to_string(m.dim()));
    std::vector<double> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) out[i] = sigmoid(logit(m, x.row(i)));
    return out;
}

namespace detail {

inline void require_both_classes(std::span<const int> labels, const char* who)
{
    bool pos = false, neg = false;
    for (int y : labels) {
        if (y != 0 && y != 1) throw InputError(std::string(who) + ": labels must be 0 or 1");
        (y ? pos : neg) = true;
    }
    if (!pos || !neg) throw InputError(std::string(who) + ": both classes must be present");
}

}  // namespace detail

// Mann-Whitney form with mid-ranks, so ties count one half.
inline double compute_auc(std::span<const double> scores, std::span<const int> labels)
{
    if (scores.size() != labels.size()) throw InputError("auc: scores and labels differ in length");
    detail::require_both_classes(labels, "auc");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0, n_pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]]) {
                rank_sum += mid;
                n_pos += 1;
            }
        i = j;
    }
    const double n_neg = static_cast<double>(n) - n_pos;
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg);
}

inline Confusion confusion_at(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5)
{
    Confusion c;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const bool pred = probs[i] >= threshold;
        if (pred && labels[i]) ++c.tp;
        else if (pred) ++c.fp;
        else if (labels[i]) ++c.fn;
        else ++c.tn;
    }
    return c;
}

// Fills every metric derived from the confusion matrix.
inline void fill_metrics(DetectionReport& r)
{
    const Confusion& c = r.confusion;
    r.accuracy = c.total() ? static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total()) : 0.0;
    r.precision_undefined = c.tp + c.fp == 0;
    r.recall_undefined = c.tp + c.fn == 0;
    r.precision = r.precision_undefined ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    r.recall = r.recall_undefined ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
}

// 1 for IRA, 0 for REDDIT; anything else is an error.
inline std::vector<int> source_labels(const Manifest& m)
{
    std::vector<int> y;
    y.reserve(m.size());
    for (const auto& r : m.records) {
        if (r.source == Source::IRA) y.push_back(1);
        else if (r.source == Source::REDDIT) y.push_back(0);
        else throw InputError("detector: record '" + r.id + "' is " + to_string(r.source) + ", need IRA or REDDIT");
    }
    return y;
}

namespace detail {

struct Standardizer {
    std::vector<double> mean, scale;

    static Standardizer fit(const MatrixD& x, std::span<const std::size_t> rows)
    {
        Standardizer s{std::vector<double>(x.cols(), 0.0), std::vector<double>(x.cols(), 1.0)};
        const double n = static_cast<double>(rows.size());
        for (std::size_t i : rows)
            for (std::size_t j = 0; j < x.cols(); ++j) s.mean[j] += x(i, j);
        for (auto& v : s.mean) v /= n;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double var = 0;
            for (std::size_t i : rows) var += (x(i, j) - s.mean[j]) * (x(i, j) - s.mean[j]);
            const double sd = std::sqrt(var / n);
            s.scale[j] = sd > 1e-12 ? sd : 1.0;
        }
        return s;
    }

    MatrixD apply(const MatrixD& x, std::span<const std::size_t> rows) const
    {
        MatrixD z(rows.size(), x.cols());
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t j = 0; j < x.cols(); ++j) z(r, j) = (x(rows[r], j) - mean[j]) / scale[j];
        return z;
    }
};

inline double loss(const MatrixD& z, std::span<const int> y, std::span<const double> w, double b, double l2)
{
    double sum = 0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const double t = dot<double>(w, z.row(i)) + b;
        sum += softplus(t) - (y[i] ? t : 0.0);
    }
    return sum / static_cast<double>(z.rows()) + 0.5 * l2 * dot<double>(w, w);
}

}  // namespace detail

// Full-batch gradient descent on standardized training features; the scaling
// is folded back into the returned weights. A step that raises the loss is
// undone and retried at half the learning rate.
inline Trained train_detector(const MatrixD& x, std::span<const int> labels, const DetectorConfig& cfg,
                              std::uint64_t seed)
{
    cfg.validate();
    if (x.rows() != labels.size())
        throw InputError("detector: " + std::to_string(x.rows()) + " rows for " + std::to_string(labels.size()) +
                         " labels");
    detail::require_both_classes(labels, "detector");
    if (!x.all_finite()) throw InputError("detector: non-finite features");

    const Split split = stratified_split(labels, cfg.split, derive_seed(seed, "split"));
    const auto st = detail::Standardizer::fit(x, split.train);
    const MatrixD z = st.apply(x, split.train);
    std::vector<int> y;
    for (std::size_t i : split.train) y.push_back(labels[i]);

    const std::size_t d = x.cols();
    const double n = static_cast<double>(z.rows());
    std::vector<double> w(d, 0.0), gw(d), w_next(d);
    double b = 0, lr = cfg.lr;
    double current = detail::loss(z, y, w, b, cfg.l2);
    DetectionReport report;
    report.loss_history.reserve(cfg.epochs);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0;
        for (std::size_t i = 0; i < z.rows(); ++i) {
            const double r = sigmoid(dot<double>(w, z.row(i)) + b) - y[i];
            const auto row = z.row(i);
            for (std::size_t j = 0; j < d; ++j) gw[j] += r * row[j];
            gb += r;
        }
        for (std::size_t j = 0; j < d; ++j) gw[j] = gw[j] / n + cfg.l2 * w[j];
        gb /= n;
        for (int attempt = 0;; ++attempt) {
            for (std::size_t j = 0; j < d; ++j) w_next[j] = w[j] - lr * gw[j];
            const double b_next = b - lr * gb;
            const double next = detail::loss(z, y, w_next, b_next, cfg.l2);
            if (!std::isfinite(next)) throw NumericError("detector: non-finite loss at epoch " + std::to_string(epoch));
            if (next <= current) {
                w.swap(w_next);
                b = b_next;
                current = next;
                break;
            }
            if (attempt == 60) throw NumericError("detector: loss will not decrease at epoch " + std::to_string(epoch));
            lr *= 0.5;
            ++report.lr_halvings;
        }
        report.loss_history.push_back(current);
    }

    Trained out;
    out.model.weights.resize(d);
    out.model.bias = b;
    for (std::size_t j = 0; j < d; ++j) {
        out.model.weights[j] = w[j] / st.scale[j];
        out.model.bias -= w[j] * st.mean[j] / st.scale[j];
    }
    out.model.epochs = cfg.epochs;
    out.model.lr = cfg.lr;
    out.model.l2 = cfg.l2;
    out.model.seed = seed;

    auto eval = [&](std::span<const std::size_t> rows, std::vector<double>& probs, std::vector<int>& ys) {
        for (std::size_t i : rows) {
            probs.push_back(sigmoid(logit(out.model, x.row(i))));
            ys.push_back(labels[i]);
        }
    };
    std::vector<double> p_train, p_test;
    std::vector<int> y_train, y_test;
    eval(split.train, p_train, y_train);
    eval(split.test, p_test, y_test);

    const Confusion train_c = confusion_at(p_train, y_train);
    report.train_accuracy = static_cast<double>(train_c.tp + train_c.tn) / static_cast<double>(train_c.total());
    report.confusion = confusion_at(p_test, y_test);
    fill_metrics(report);
    report.auc = compute_auc(p_test, y_test);
    report.split = cfg.split;
    report.train_count = split.train.size();
    report.test_count = split.test.size();
    report.final_lr = lr;
    out.report = std::move(report);
    return out;
}

inline nlohmann::ordered_json to_json(const DetectionReport& r)
{
    nlohmann::ordered_json j;
    j["confusion"] = {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}};
    j["threshold"] = 0.5;
    j["accuracy"] = r.accuracy;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    j["f1"] = r.f1;
    j["auc"] = r.auc;
    j["train_accuracy"] = r.train_accuracy;
    j["precision_undefined"] = r.precision_undefined;
    j["recall_undefined"] = r.recall_undefined;
    j["split"] = r.split;
    j["positive_label"] = "IRA";
    j["train_count"] = r.train_count;
    j["test_count"] = r.test_count;
    j["lr_halvings"] = r.lr_halvings;
    j["final_lr"] = r.final_lr;
    j["final_loss"] = r.loss_history.empty() ? 0.0 : r.loss_history.back();
    return j;
}

// LOGR: "LOGR", u64 D, D weights, bias; f64 values; all little-endian.
inline std::string encode_logr(const LogisticModel& m)
{
    std::string out = "LOGR";
    memescope::detail::put_le<std::uint64_t>(out, m.dim());
    for (double v : m.weights) memescope::detail::put_le<double>(out, v);
    memescope::detail::put_le<double>(out, m.bias);
    return out;
}

inline LogisticModel decode_logr(std::string_view bytes)
{
    if (bytes.substr(0, 4) != "LOGR") throw InputError("LOGR: bad magic");
    std::size_t pos = 4;
    const auto d = memescope::detail::get_le<std::uint64_t>(bytes, pos);
    if (bytes.size() != 12 + 8 * (d + 1)) throw InputError("LOGR: size does not match dimension " + std::to_string(d));
    LogisticModel m;
    m.weights.resize(d);
    for (auto& v : m.weights) v = memescope::detail::get_le<double>(bytes, pos);
    m.bias = memescope::detail::get_le<double>(bytes, pos);
    for (double v : m.weights)
        if (!std::isfinite(v)) throw InputError("LOGR: non-finite weight");
    if (!std::isfinite(m.bias)) throw InputError("LOGR: non-finite bias");
    return m;
}

inline void save_logr(const std::filesystem::path& path, const LogisticModel& m)
{
    write_file_atomic(path, encode_logr(m));
}

inline LogisticModel load_logr(const std::filesystem::path& path) { return decode_logr(read_file(path)); }

}  // namespace memescope::detector

#endif

#ifndef MEMESCOPE_TSNE_HPP_
#define MEMESCOPE_TSNE_HPP_

#include "memescope/matrix.hpp"

#include <nlohmann/json.hpp>

namespace memescope::tsne {

struct TsneConfig {
    double perplexity = 30.0;
    std::size_t iterations = 1000;
    double learning_rate = 200.0;
    double exaggeration = 12.0;
    std::size_t exaggeration_iters = 250;
    double momentum_initial = 0.5;
    double momentum_final = 0.8;
    std::uint64_t seed = 0;
    double init_sd = 1e-4;
};

struct Affinities {
    MatrixD joint;                // symmetric, sums to 1
    std::vector<double> beta;     // per-point Gaussian precision 1 / (2 sigma^2)
    std::vector<double> entropy;  // realized entropy of each conditional, bits
};

struct Projection {
    MatrixD points;  // N x 2
    double kl = 0;
    std::vector<double> kl_history;  // one value per iteration, against the true P
};

// Float-rounded, so rigid motions of x give a bit-identical P.
inline MatrixD squared_distances(const MatrixD& x)
{
    const std::size_t n = x.rows();
    MatrixD d(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            d(i, j) = d(j, i) = static_cast<float>(squared_distance<double>(x.row(i), x.row(j)));
    return d;
}

inline void check_perplexity(std::size_t n, double perplexity)
{
    if (n < 4) throw InputError("tsne: need at least 4 points, got " + std::to_string(n));
    const double max_perp = static_cast<double>(n - 1) / 3.0;
    if (!(perplexity >= 1.0 && perplexity <= max_perp))
        throw InputError("tsne: perplexity " + std::to_string(perplexity) + " outside [1, (N-1)/3 = " +
                         std::to_string(max_perp) + "]");
}

// Per-point bisection on beta so that the conditional distribution's entropy
// is log2(perplexity) bits.
inline Affinities compute_affinities(const MatrixD& d2, double perplexity, double tol_bits = 1e-7)
{
    const std::size_t n = d2.rows();
    check_perplexity(n, perplexity);
    const double target = std::log2(perplexity);
    Affinities out{MatrixD(n, n), std::vector<double>(n), std::vector<double>(n)};
    MatrixD cond(n, n);
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        double dmin = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dmin = std::min(dmin, d2(i, j));
        auto entropy_at = [&](double beta) {
            double sum = 0, weighted = 0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) {
                    p[j] = 0;
                    continue;
                }
                const double shifted = d2(i, j) - dmin;
                p[j] = std::exp(-beta * shifted);
                sum += p[j];
                weighted += shifted * p[j];
            }
            for (auto& v : p) v /= sum;
            return (std::log(sum) + beta * weighted / sum) / std::log(2.0);
        };
        double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
        double h = entropy_at(beta);
        for (int it = 0; it < 400 && std::abs(h - target) > tol_bits; ++it) {
            if (h > target) {
                lo = beta;
                beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = entropy_at(beta);
        }
        out.beta[i] = beta;
        out.entropy[i] = h;
        for (std::size_t j = 0; j < n; ++j) cond(i, j) = p[j];
    }
    const double scale = 1.0 / (2.0 * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out.joint(i, j) = (cond(i, j) + cond(j, i)) * scale;
    return out;
}

namespace detail {

// Fills grad (N x 2) for the given P multiplier; returns KL(P || Q) for the
// unscaled P.
inline double gradient(const MatrixD& p, double exaggeration, const MatrixD& y, MatrixD& num, MatrixD& grad)
{
    const std::size_t n = y.rows();
    double z = 0;
    for (std::size_t i = 0; i < n; ++i) {
        num(i, i) = 0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
            const double v = 1.0 / (1.0 + dx * dx + dy * dy);
            num(i, j) = num(j, i) = v;
            z += 2.0 * v;
        }
    }
    double kl = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double gx = 0, gy = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double q = num(i, j) / z;
            const double m = (exaggeration * p(i, j) - q) * num(i, j);
            gx += m * (y(i, 0) - y(j, 0));
            gy += m * (y(i, 1) - y(j, 1));
            if (p(i, j) > 0) kl += p(i, j) * std::log(p(i, j) / q);
        }
        grad(i, 0) = 4.0 * gx;
        grad(i, 1) = 4.0 * gy;
    }
    return kl;
}

inline void center(MatrixD& y)
{
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0;
        for (std::size_t i = 0; i < y.rows(); ++i) mean += y(i, c);
        mean /= static_cast<double>(y.rows());
        for (std::size_t i = 0; i < y.rows(); ++i) y(i, c) -= mean;
    }
}

}  // namespace detail

inline Projection tsne_project(const MatrixD& x, const TsneConfig& cfg)
{
    check_perplexity(x.rows(), cfg.perplexity);
    if (!x.all_finite()) throw InputError("tsne: non-finite input");
    if (cfg.iterations == 0) throw InputError("tsne: iterations must be >= 1");
    if (!(cfg.learning_rate > 0)) throw InputError("tsne: learning_rate must be > 0");
    const std::size_t n = x.rows();
    const Affinities aff = compute_affinities(squared_distances(x), cfg.perplexity);

    Projection out;
    out.points = MatrixD(n, 2);
    Rng rng(cfg.seed);
    for (auto& v : out.points.values()) v = cfg.init_sd * normal(rng);
    MatrixD& y = out.points;
    MatrixD num(n, n), grad(n, 2), update(n, 2), gains(n, 2);
    for (auto& g : gains.values()) g = 1.0;

    out.kl_history.reserve(cfg.iterations);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        const bool early = it < cfg.exaggeration_iters;
        const double momentum = early ? cfg.momentum_initial : cfg.momentum_final;
        out.kl_history.push_back(detail::gradient(aff.joint, early ? cfg.exaggeration : 1.0, y, num, grad));
        for (std::size_t k = 0; k < n * 2; ++k) {
            double& g = gains.values()[k];
            const double dg = grad.values()[k];
            double& u = update.values()[k];
            g = (dg > 0) != (u > 0) ? g + 0.2 : g * 0.8;
            g = std::max(g, 0.01);
            u = momentum * u - cfg.learning_rate * g * dg;
            y.values()[k] += u;
        }
        detail::center(y);
        if (!y.all_finite()) throw NumericError("tsne: non-finite embedding at iteration " + std::to_string(it));
    }
    out.kl = detail::gradient(aff.joint, 1.0, y, num, grad);
    return out;
}

// Mean KL over consecutive windows starting at `from`; a trailing partial
// window is dropped.
inline std::vector<double> windowed_means(std::span<const double> history, std::size_t from, std::size_t window = 50)
{
    std::vector<double> out;
    for (std::size_t s = from; s + window <= history.size(); s += window) {
        double sum = 0;
        for (std::size_t t = s; t < s + window; ++t) sum += history[t];
        out.push_back(sum / static_cast<double>(window));
    }
    return out;
}

struct PointInfo {
    std::string id;
    std::size_t cluster = 0;
    std::string source;
};

inline nlohmann::ordered_json projection_json(const Projection& p, std::span<const PointInfo> info)
{
    if (info.size() != p.points.rows())
        throw InputError("projection: " + std::to_string(info.size()) + " records for " +
                         std::to_string(p.points.rows()) + " points");
    nlohmann::ordered_json j;
    j["kl"] = p.kl;
    auto& pts = j["points"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < info.size(); ++i)
        pts.push_back({{"id", info[i].id},
                       {"x", p.points(i, 0)},
                       {"y", p.points(i, 1)},
                       {"cluster", info[i].cluster},
                       {"source", info[i].source}});
    return j;
}

}  // namespace memescope::tsne

#endif

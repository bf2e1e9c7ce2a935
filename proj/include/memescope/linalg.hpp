#ifndef MEMESCOPE_LINALG_HPP_
#define MEMESCOPE_LINALG_HPP_

#include "memescope/matrix.hpp"

#include <numeric>

namespace memescope::linalg {

struct EigenResult {
    std::vector<double> values;  // descending
    MatrixD vectors;             // row i is the eigenvector for values[i]
};

// Cyclic Jacobi rotations on a symmetric matrix. Converges quadratically once
// the off-diagonal mass is small; D is at most a few hundred here.
inline EigenResult symmetric_eigen(MatrixD a, double tol = 1e-14, int max_sweeps = 100)
{
    const std::size_t n = a.rows();
    if (a.cols() != n) throw InputError("symmetric_eigen: matrix is not square");
    MatrixD v(n, n);
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

    auto off_norm = [&] {
        double s = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
        return s;
    };
    double scale = 0;
    for (double x : a.values()) scale += x * x;
    scale = std::max(scale, std::numeric_limits<double>::min());

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        if (off_norm() <= tol * tol * scale) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < std::numeric_limits<double>::min()) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    EigenResult out{std::vector<double>(n), MatrixD(n, n)};
    for (std::size_t r = 0; r < n; ++r) {
        out.values[r] = a(order[r], order[r]);
        for (std::size_t k = 0; k < n; ++k) out.vectors(r, k) = v(k, order[r]);
    }
    return out;
}

struct PcaModel {
    std::vector<double> mean;      // length D
    MatrixD components;            // out_dim x D, orthonormal rows
    std::vector<double> eigenvalues;  // length out_dim, descending, >= 0
    double epsilon = 1e-5;

    std::size_t input_dim() const { return mean.size(); }
    std::size_t output_dim() const { return components.rows(); }
};

inline std::vector<double> column_mean(const MatrixD& x)
{
    std::vector<double> mean(x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) mean[j] += r[j];
    }
    for (auto& m : mean) m /= static_cast<double>(x.rows());
    return mean;
}

// Sample covariance (N-1 denominator) of the rows of x.
inline MatrixD covariance(const MatrixD& x, std::span<const double> mean)
{
    const std::size_t n = x.rows(), d = x.cols();
    MatrixD cov(d, d);
    std::vector<double> centered(d);
    for (std::size_t i = 0; i < n; ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < d; ++j) centered[j] = r[j] - mean[j];
        for (std::size_t a = 0; a < d; ++a) {
            const double ca = centered[a];
            if (ca == 0.0) continue;
            auto out = cov.row(a);
            for (std::size_t b = a; b < d; ++b) out[b] += ca * centered[b];
        }
    }
    const double denom = static_cast<double>(n - 1);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            cov(a, b) /= denom;
            cov(b, a) = cov(a, b);
        }
    return cov;
}

inline PcaModel pca_fit(const MatrixD& x, std::size_t out_dim, double epsilon = 1e-5)
{
    const std::size_t n = x.rows(), d = x.cols();
    if (n < 2) throw InputError("pca_fit: need at least 2 rows, got " + std::to_string(n));
    if (out_dim < 1) throw InputError("pca_fit: out_dim must be >= 1");
    if (out_dim > std::min(n - 1, d))
        throw InputError("pca_fit: out_dim " + std::to_string(out_dim) + " exceeds min(N-1, D) = " +
                         std::to_string(std::min(n - 1, d)));
    if (!x.all_finite()) throw InputError("pca_fit: non-finite input");
    if (epsilon < 0) throw InputError("pca_fit: epsilon must be >= 0");

    PcaModel model;
    model.epsilon = epsilon;
    model.mean = column_mean(x);
    const MatrixD cov = covariance(x, model.mean);
    double trace = 0;
    for (std::size_t j = 0; j < d; ++j) trace += cov(j, j);
    if (trace <= 0.0) throw InputError("pca_fit: zero variance (all rows identical)");

    const EigenResult eig = symmetric_eigen(cov);
    model.components = MatrixD(out_dim, d);
    model.eigenvalues.resize(out_dim);
    for (std::size_t r = 0; r < out_dim; ++r) {
        // Jacobi leaves round-off sized negatives on rank-deficient data.
        model.eigenvalues[r] = std::max(0.0, eig.values[r]);
        auto src = eig.vectors.row(r);
        std::size_t arg = 0;
        for (std::size_t k = 1; k < d; ++k)
            if (std::abs(src[k]) > std::abs(src[arg])) arg = k;
        const double sign = src[arg] < 0 ? -1.0 : 1.0;
        auto dst = model.components.row(r);
        for (std::size_t k = 0; k < d; ++k) dst[k] = sign * src[k];
    }
    return model;
}

// Projection onto the principal directions without whitening.
inline MatrixD pca_project(const PcaModel& model, const MatrixD& x)
{
    if (x.cols() != model.input_dim())
        throw InputError("pca_project: input has " + std::to_string(x.cols()) + " columns, model expects " +
                         std::to_string(model.input_dim()));
    const std::size_t k = model.output_dim(), d = model.input_dim();
    MatrixD out(x.rows(), k);
    std::vector<double> centered(d);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t j = 0; j < d; ++j) centered[j] = r[j] - model.mean[j];
        for (std::size_t c = 0; c < k; ++c)
            out(i, c) = dot<double>(model.components.row(c), centered);
    }
    return out;
}

inline MatrixD pca_reconstruct(const PcaModel& model, const MatrixD& projected)
{
    const std::size_t k = model.output_dim(), d = model.input_dim();
    if (projected.cols() != k) throw InputError("pca_reconstruct: dimension mismatch");
    MatrixD out(projected.rows(), d);
    for (std::size_t i = 0; i < projected.rows(); ++i) {
        auto o = out.row(i);
        std::copy(model.mean.begin(), model.mean.end(), o.begin());
        for (std::size_t c = 0; c < k; ++c) {
            const double coef = projected(i, c);
            auto comp = model.components.row(c);
            for (std::size_t j = 0; j < d; ++j) o[j] += coef * comp[j];
        }
    }
    return out;
}

inline MatrixD pca_whiten(const PcaModel& model, const MatrixD& x)
{
    std::vector<double> scale(model.output_dim());
    for (std::size_t c = 0; c < scale.size(); ++c) {
        const double denom = model.eigenvalues[c] + model.epsilon;
        if (!(denom > 0.0))
            throw NumericError("pca_whiten: eigenvalue " + std::to_string(c) +
                               " plus epsilon is zero; cannot whiten a singular direction");
        scale[c] = 1.0 / std::sqrt(denom);
    }
    MatrixD out = pca_project(model, x);
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t c = 0; c < r.size(); ++c) r[c] *= scale[c];
    }
    return out;
}

struct NormalizedRows {
    MatrixD matrix;
    std::vector<std::size_t> zero_rows;  // left as zero
};

inline NormalizedRows l2_normalize_rows(const MatrixD& x)
{
    NormalizedRows out{x, {}};
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = out.matrix.row(i);
        // Two-pass scaled norm so huge or tiny rows still land on the unit sphere.
        double peak = 0;
        for (double v : r) peak = std::max(peak, std::abs(v));
        if (peak == 0.0) {
            out.zero_rows.push_back(i);
            continue;
        }
        double s = 0;
        for (double v : r) s += (v / peak) * (v / peak);
        const double norm = peak * std::sqrt(s);
        for (auto& v : r) v /= norm;
    }
    return out;
}

}  // namespace memescope::linalg

#endif

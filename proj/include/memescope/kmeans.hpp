#ifndef MEMESCOPE_KMEANS_HPP_
#define MEMESCOPE_KMEANS_HPP_

#include "memescope/matrix.hpp"

#include <nlohmann/json.hpp>

#include <map>

namespace memescope::kmeans {

struct KmeansModel {
    MatrixD centroids;                   // K x D
    std::vector<std::size_t> assignments;  // length N
    double inertia = 0;
    std::size_t iterations_run = 0;
    std::size_t empty_repairs = 0;
    // Inertia right after each assignment step; non-increasing.
    std::vector<double> inertia_history;
    std::uint64_t seed = 0;

    std::size_t k() const { return centroids.rows(); }
};

struct KmeansOptions {
    std::size_t max_iter = 300;
    double tol = 1e-4;
    std::size_t restarts = 1;
};

struct Assignment {
    std::vector<std::size_t> labels;
    std::vector<double> distances;  // Euclidean
};

namespace detail {

inline std::size_t nearest(const MatrixD& centroids, std::span<const double> x, double& best_sq)
{
    std::size_t best = 0;
    best_sq = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < centroids.rows(); ++k) {
        const double d = squared_distance<double>(centroids.row(k), x);
        if (d < best_sq) {  // strict: ties keep the lowest index
            best_sq = d;
            best = k;
        }
    }
    return best;
}

// Returns inertia.
inline double assign_all(const MatrixD& x, const MatrixD& centroids, std::vector<std::size_t>& labels,
                         std::vector<double>& sq)
{
    labels.resize(x.rows());
    sq.resize(x.rows());
    double inertia = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        labels[i] = nearest(centroids, x.row(i), sq[i]);
        inertia += sq[i];
    }
    return inertia;
}

inline MatrixD kmeans_plus_plus(const MatrixD& x, std::size_t k, Rng& rng)
{
    const std::size_t n = x.rows();
    MatrixD centroids(k, x.cols());
    auto set_centroid = [&](std::size_t c, std::size_t i) {
        std::copy(x.row(i).begin(), x.row(i).end(), centroids.row(c).begin());
    };
    set_centroid(0, uniform_index(rng, n));
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance<double>(x.row(i), centroids.row(0));
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0;
        for (double v : d2) total += v;
        std::size_t pick = 0;
        if (total > 0) {
            const double target = uniform01(rng) * total;
            double acc = 0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target && d2[i] > 0) {
                    pick = i;
                    break;
                }
            }
            while (d2[pick] == 0 && pick > 0) --pick;
        } else {
            pick = uniform_index(rng, n);
        }
        set_centroid(c, pick);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance<double>(x.row(i), centroids.row(c)));
    }
    return centroids;
}

// Moves the centroid of each empty cluster onto the point of the largest
// cluster that lies farthest from its centroid. Returns repairs made.
inline std::size_t repair_empty(const MatrixD& x, MatrixD& centroids, std::vector<std::size_t>& labels,
                                std::vector<double>& sq)
{
    const std::size_t k = centroids.rows();
    std::size_t repairs = 0;
    for (;;) {
        std::vector<std::size_t> sizes(k, 0);
        for (auto l : labels) ++sizes[l];
        const auto empty = std::find(sizes.begin(), sizes.end(), 0);
        if (empty == sizes.end()) return repairs;
        const std::size_t target = static_cast<std::size_t>(empty - sizes.begin());
        const std::size_t largest = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
        if (sizes[largest] < 2)
            throw InputError("kmeans: cannot repair empty cluster, fewer distinct points than K");
        std::size_t far = x.rows();
        for (std::size_t i = 0; i < x.rows(); ++i)
            if (labels[i] == largest && (far == x.rows() || sq[i] > sq[far])) far = i;
        if (sq[far] == 0.0) throw InputError("kmeans: cannot repair empty cluster, fewer distinct points than K");
        std::copy(x.row(far).begin(), x.row(far).end(), centroids.row(target).begin());
        labels[far] = target;
        sq[far] = 0.0;
        ++repairs;
    }
}

inline double update_centroids(const MatrixD& x, MatrixD& centroids, const std::vector<std::size_t>& labels)
{
    const std::size_t k = centroids.rows(), d = x.cols();
    MatrixD sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto s = sums.row(labels[i]);
        auto r = x.row(i);
        for (std::size_t j = 0; j < d; ++j) s[j] += r[j];
        ++counts[labels[i]];
    }
    double max_shift = 0;
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) continue;
        auto s = sums.row(c);
        for (auto& v : s) v /= static_cast<double>(counts[c]);
        max_shift = std::max(max_shift, std::sqrt(squared_distance<double>(s, centroids.row(c))));
        std::copy(s.begin(), s.end(), centroids.row(c).begin());
    }
    return max_shift;
}

inline KmeansModel fit_once(const MatrixD& x, std::size_t k, const KmeansOptions& opt, std::uint64_t seed)
{
    Rng rng(seed);
    KmeansModel model;
    model.seed = seed;
    model.centroids = kmeans_plus_plus(x, k, rng);
    std::vector<double> sq;
    for (std::size_t iter = 0; iter < opt.max_iter; ++iter) {
        const double inertia = assign_all(x, model.centroids, model.assignments, sq);
        model.inertia_history.push_back(inertia);
        model.empty_repairs += repair_empty(x, model.centroids, model.assignments, sq);
        const double shift = update_centroids(x, model.centroids, model.assignments);
        model.iterations_run = iter + 1;
        if (shift < opt.tol) break;
    }
    // Final assignment against the final centroids, so labels are exactly the
    // nearest-centroid labels and no cluster is empty.
    for (int guard = 0;; ++guard) {
        model.inertia = assign_all(x, model.centroids, model.assignments, sq);
        const std::size_t repaired = repair_empty(x, model.centroids, model.assignments, sq);
        model.empty_repairs += repaired;
        if (repaired == 0) break;
        if (guard > 100) throw Error("kmeans: empty-cluster repair did not settle");
    }
    return model;
}

}  // namespace detail

inline KmeansModel kmeans_fit(const MatrixD& x, std::size_t k, const KmeansOptions& opt, std::uint64_t seed)
{
    if (k == 0) throw InputError("kmeans: K must be >= 1");
    if (k > x.rows())
        throw InputError("kmeans: K = " + std::to_string(k) + " exceeds N = " + std::to_string(x.rows()));
    if (opt.max_iter < 1) throw InputError("kmeans: max_iter must be >= 1");
    if (!(opt.tol >= 0)) throw InputError("kmeans: tol must be >= 0");
    if (!x.all_finite()) throw InputError("kmeans: non-finite input");
    KmeansModel best;
    const std::size_t restarts = std::max<std::size_t>(1, opt.restarts);
    for (std::size_t r = 0; r < restarts; ++r) {
        KmeansModel m = detail::fit_once(x, k, opt, r == 0 ? seed : derive_seed(seed, r));
        if (r == 0 || m.inertia < best.inertia) best = std::move(m);
    }
    return best;
}

inline Assignment assign(const KmeansModel& model, const MatrixD& x)
{
    if (x.cols() != model.centroids.cols())
        throw InputError("kmeans assign: input has " + std::to_string(x.cols()) + " columns, centroids have " +
                         std::to_string(model.centroids.cols()));
    Assignment out;
    detail::assign_all(x, model.centroids, out.labels, out.distances);
    for (auto& d : out.distances) d = std::sqrt(d);
    return out;
}

inline std::vector<std::size_t> cluster_sizes(const KmeansModel& m)
{
    std::vector<std::size_t> sizes(m.k(), 0);
    for (auto a : m.assignments) ++sizes[a];
    return sizes;
}

// Assignments file, rows aligned with ids.
inline nlohmann::ordered_json assignments_json(const KmeansModel& m, const MatrixD& x,
                                               std::span<const std::string> ids)
{
    if (ids.size() != x.rows())
        throw InputError("assignments: " + std::to_string(ids.size()) + " ids for " + std::to_string(x.rows()) + " rows");
    const Assignment a = assign(m, x);
    nlohmann::ordered_json j;
    j["K"] = m.k();
    j["seed"] = m.seed;
    j["inertia"] = m.inertia;
    j["iterations_run"] = m.iterations_run;
    j["empty_repairs"] = m.empty_repairs;
    auto& rows = j["assignments"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ids.size(); ++i)
        rows.push_back({{"id", ids[i]}, {"cluster", a.labels[i]}, {"distance", a.distances[i]}});
    return j;
}

struct AssignmentsFile {
    std::size_t k = 0;
    std::uint64_t seed = 0;
    double inertia = 0;
    std::vector<std::string> ids;
    std::vector<std::size_t> clusters;
    std::vector<double> distances;
};

inline AssignmentsFile parse_assignments(const nlohmann::json& j)
{
    AssignmentsFile f;
    try {
        f.k = j.at("K").get<std::size_t>();
        f.seed = j.at("seed").get<std::uint64_t>();
        f.inertia = j.at("inertia").get<double>();
        for (const auto& r : j.at("assignments")) {
            f.ids.push_back(r.at("id").get<std::string>());
            f.clusters.push_back(r.at("cluster").get<std::size_t>());
            f.distances.push_back(r.at("distance").get<double>());
            if (f.clusters.back() >= f.k)
                throw InputError("assignments: cluster " + std::to_string(f.clusters.back()) + " out of range for K = " +
                                 std::to_string(f.k));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("assignments: malformed file (") + e.what() + ")");
    }
    return f;
}

// Normalized mutual information, I(a;b) / ((H(a) + H(b)) / 2). Two constant
// labelings are identical partitions and score 1.
template <typename A, typename B>
double nmi(std::span<const A> a, std::span<const B> b)
{
    if (a.size() != b.size())
        throw InputError("nmi: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    if (a.empty()) throw InputError("nmi: empty labeling");
    std::map<A, std::size_t> ia;
    std::map<B, std::size_t> ib;
    for (const auto& v : a) ia.emplace(v, ia.size());
    for (const auto& v : b) ib.emplace(v, ib.size());
    std::vector<double> table(ia.size() * ib.size(), 0.0), pa(ia.size(), 0.0), pb(ib.size(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const std::size_t r = ia.at(a[i]), c = ib.at(b[i]);
        table[r * ib.size() + c] += 1;
        pa[r] += 1;
        pb[c] += 1;
    }
    const double n = static_cast<double>(a.size());
    auto entropy = [n](const std::vector<double>& counts) {
        double h = 0;
        for (double c : counts)
            if (c > 0) h -= (c / n) * std::log(c / n);
        return h;
    };
    const double ha = entropy(pa), hb = entropy(pb);
    if (ha == 0.0 && hb == 0.0) return 1.0;
    double mi = 0;
    for (std::size_t r = 0; r < pa.size(); ++r)
        for (std::size_t c = 0; c < pb.size(); ++c) {
            const double nij = table[r * ib.size() + c];
            if (nij > 0) mi += (nij / n) * std::log(nij * n / (pa[r] * pb[c]));
        }
    return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

template <typename A, typename B>
double nmi(const std::vector<A>& a, const std::vector<B>& b)
{
    return nmi(std::span<const A>(a), std::span<const B>(b));
}

}  // namespace memescope::kmeans

#endif

#include "memescope/kmeans.hpp"

#include <gtest/gtest.h>

using namespace memescope;
using namespace memescope::kmeans;

namespace {

MatrixD gaussian(std::size_t n, std::size_t d, std::uint64_t seed)
{
    Rng rng(seed);
    MatrixD m(n, d);
    for (auto& v : m.values()) v = normal(rng);
    return m;
}

// Two unit-variance blobs whose centers are 10 sigma apart along every axis.
MatrixD two_blobs(std::size_t per_blob, std::size_t d, std::uint64_t seed, std::vector<int>& truth)
{
    MatrixD x = gaussian(2 * per_blob, d, seed);
    truth.assign(2 * per_blob, 0);
    for (std::size_t i = per_blob; i < 2 * per_blob; ++i) {
        truth[i] = 1;
        for (auto& v : x.row(i)) v += 10.0;
    }
    return x;
}

double brute_inertia(const MatrixD& x, const KmeansModel& m)
{
    double s = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) s += squared_distance<double>(x.row(i), m.centroids.row(m.assignments[i]));
    return s;
}

}  // namespace

TEST(Kmeans, SingleClusterIsColumnMean)
{
    const MatrixD x = gaussian(300, 5, 1);
    const KmeansModel m = kmeans_fit(x, 1, {}, 9);
    double total_var = 0;
    for (std::size_t j = 0; j < 5; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < 300; ++i) mean += x(i, j);
        mean /= 300;
        EXPECT_NEAR(m.centroids(0, j), mean, 1e-9);
        for (std::size_t i = 0; i < 300; ++i) total_var += (x(i, j) - mean) * (x(i, j) - mean);
    }
    EXPECT_NEAR(m.inertia, total_var, 1e-9 * total_var);
}

TEST(Kmeans, RecoversPlantedBlobs)
{
    std::vector<int> truth;
    const MatrixD x = two_blobs(100, 4, 3, truth);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const KmeansModel m = kmeans_fit(x, 2, {}, seed);
        EXPECT_DOUBLE_EQ(nmi(m.assignments, truth), 1.0) << "seed " << seed;
    }
}

TEST(Kmeans, InertiaMatchesAssignmentsAndIsMonotone)
{
    for (std::uint64_t inst = 0; inst < 20; ++inst) {
        const MatrixD x = gaussian(150, 3, 100 + inst);
        const KmeansModel m = kmeans_fit(x, 7, {}, inst);
        EXPECT_NEAR(m.inertia, brute_inertia(x, m), 1e-6 * m.inertia);
        for (std::size_t t = 1; t < m.inertia_history.size(); ++t)
            EXPECT_LE(m.inertia_history[t], m.inertia_history[t - 1]) << "instance " << inst << " iteration " << t;
        for (auto s : cluster_sizes(m)) EXPECT_GT(s, 0u);
    }
}

TEST(Kmeans, EmptyClusterRepairKeepsEveryClusterNonEmpty)
{
    // Heavy duplication makes k-means++ collide and forces repairs.
    MatrixD x(60, 2);
    for (std::size_t i = 0; i < 60; ++i) {
        x(i, 0) = static_cast<double>(i % 6);
        x(i, 1) = i < 50 ? 0.0 : 100.0;
    }
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        const KmeansModel m = kmeans_fit(x, 6, {}, seed);
        for (auto s : cluster_sizes(m)) EXPECT_GT(s, 0u) << "seed " << seed;
    }
}

TEST(Kmeans, RepairMovesFarthestPointOfLargestCluster)
{
    MatrixD x(5, 1);
    const double v[] = {0, 1, 2, 3, 10};
    for (std::size_t i = 0; i < 5; ++i) x(i, 0) = v[i];
    MatrixD c(2, 1);
    c(0, 0) = 1.0;
    c(1, 0) = 100.0;  // attracts nothing
    std::vector<std::size_t> labels;
    std::vector<double> sq;
    kmeans::detail::assign_all(x, c, labels, sq);
    EXPECT_EQ(kmeans::detail::repair_empty(x, c, labels, sq), 1u);
    EXPECT_EQ(c(1, 0), 10.0);
    EXPECT_EQ(labels[4], 1u);
}

TEST(Kmeans, Deterministic)
{
    const MatrixD x = gaussian(200, 6, 5);
    const KmeansModel a = kmeans_fit(x, 5, {}, 42), b = kmeans_fit(x, 5, {}, 42);
    EXPECT_EQ(a.assignments, b.assignments);
    EXPECT_EQ(a.centroids, b.centroids);
    EXPECT_EQ(a.inertia, b.inertia);
}

TEST(Kmeans, RowPermutationInvariantUpToRelabeling)
{
    std::vector<int> truth;
    const MatrixD x = two_blobs(80, 3, 8, truth);
    std::vector<std::size_t> perm(x.rows());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(1);
    shuffle(perm.begin(), perm.end(), rng);
    const MatrixD xp = x.select_rows(perm);
    const KmeansModel a = kmeans_fit(x, 2, {}, 3), b = kmeans_fit(xp, 2, {}, 3);
    std::vector<std::size_t> b_back(x.rows());
    for (std::size_t i = 0; i < perm.size(); ++i) b_back[perm[i]] = b.assignments[i];
    EXPECT_DOUBLE_EQ(nmi(a.assignments, b_back), 1.0);
}

TEST(Kmeans, RestartsPickLowestInertia)
{
    const MatrixD x = gaussian(120, 2, 11);
    KmeansOptions one;
    KmeansOptions many;
    many.restarts = 8;
    const KmeansModel single = kmeans_fit(x, 6, one, 4), best = kmeans_fit(x, 6, many, 4);
    EXPECT_LE(best.inertia, single.inertia);
}

TEST(Kmeans, RejectsBadInput)
{
    const MatrixD x = gaussian(5, 2, 1);
    EXPECT_THROW(kmeans_fit(x, 6, {}, 0), InputError);
    EXPECT_THROW(kmeans_fit(x, 0, {}, 0), InputError);
    KmeansOptions bad;
    bad.max_iter = 0;
    EXPECT_THROW(kmeans_fit(x, 2, bad, 0), InputError);
    bad = {};
    bad.tol = -1;
    EXPECT_THROW(kmeans_fit(x, 2, bad, 0), InputError);
    MatrixD nan = x;
    nan(2, 1) = std::nan("");
    EXPECT_THROW(kmeans_fit(nan, 2, {}, 0), InputError);
}

TEST(Assign, PointOnCentroidAndTieRule)
{
    KmeansModel m;
    m.centroids = MatrixD(6, 1);
    for (std::size_t k = 0; k < 6; ++k) m.centroids(k, 0) = static_cast<double>(k) * 10.0;
    m.centroids(0, 0) = 50.0;
    m.centroids(2, 0) = -1.0;
    m.centroids(5, 0) = 1.0;
    MatrixD x(2, 1);
    x(0, 0) = 30.0;  // on centroid 3
    x(1, 0) = 0.0;   // equidistant to 2 and 5
    const Assignment a = assign(m, x);
    EXPECT_EQ(a.labels[0], 3u);
    EXPECT_EQ(a.distances[0], 0.0);
    EXPECT_EQ(a.labels[1], 2u);
    EXPECT_EQ(a.distances[1], 1.0);
}

TEST(Assign, ReplaysTrainingAssignments)
{
    const MatrixD x = gaussian(250, 4, 21);
    const KmeansModel m = kmeans_fit(x, 8, {}, 2);
    EXPECT_EQ(assign(m, x).labels, m.assignments);
}

TEST(Assign, DimensionMismatch)
{
    const KmeansModel m = kmeans_fit(gaussian(20, 3, 1), 2, {}, 0);
    EXPECT_THROW(assign(m, gaussian(4, 2, 1)), InputError);
}

TEST(Nmi, IdentityAndRenaming)
{
    const std::vector<int> a{0, 0, 1, 1, 2, 2, 2};
    const std::vector<int> renamed{7, 7, 3, 3, 9, 9, 9};
    EXPECT_DOUBLE_EQ(nmi(a, a), 1.0);
    EXPECT_NEAR(nmi(a, renamed), 1.0, 1e-12);
    const std::vector<int> constant(7, 4);
    EXPECT_DOUBLE_EQ(nmi(constant, constant), 1.0);
    EXPECT_DOUBLE_EQ(nmi(a, constant), 0.0);
}

TEST(Nmi, IndependentLabelingsNearZero)
{
    const std::size_t n = 10000;
    Rng rng(77);
    std::vector<int> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = i < n / 2 ? 0 : 1;
        b[i] = static_cast<int>(uniform_index(rng, 2));
    }
    // Direct contingency-table computation with log2; the ratio is base-free.
    double t[2][2] = {};
    for (std::size_t i = 0; i < n; ++i) t[a[i]][b[i]] += 1;
    const double N = static_cast<double>(n);
    double ra[2] = {t[0][0] + t[0][1], t[1][0] + t[1][1]}, cb[2] = {t[0][0] + t[1][0], t[0][1] + t[1][1]};
    double mi = 0, ha = 0, hb = 0;
    for (int r = 0; r < 2; ++r) {
        ha -= ra[r] / N * std::log2(ra[r] / N);
        hb -= cb[r] / N * std::log2(cb[r] / N);
        for (int c = 0; c < 2; ++c) mi += t[r][c] / N * std::log2(t[r][c] * N / (ra[r] * cb[c]));
    }
    const double oracle = mi / ((ha + hb) / 2);
    const double got = nmi(a, b);
    EXPECT_NEAR(got, oracle, 1e-12);
    EXPECT_LT(got, 0.05);
}

TEST(Nmi, LengthMismatch)
{
    EXPECT_THROW(nmi(std::vector<int>{1, 2}, std::vector<int>{1}), InputError);
    EXPECT_THROW(nmi(std::vector<int>{}, std::vector<int>{}), InputError);
}

TEST(AssignmentsFile, RoundTrip)
{
    const MatrixD x = gaussian(12, 2, 3);
    const KmeansModel m = kmeans_fit(x, 3, {}, 5);
    std::vector<std::string> ids;
    for (int i = 0; i < 12; ++i) ids.push_back("img-" + std::to_string(i));
    const auto j = assignments_json(m, x, ids);
    const AssignmentsFile f = parse_assignments(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(f.k, 3u);
    EXPECT_EQ(f.seed, 5u);
    EXPECT_EQ(f.ids, ids);
    EXPECT_EQ(f.clusters, m.assignments);
    EXPECT_THROW(assignments_json(m, x, std::span<const std::string>(ids).first(3)), InputError);
}

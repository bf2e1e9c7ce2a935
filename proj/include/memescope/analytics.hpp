#ifndef MEMESCOPE_ANALYTICS_HPP_
#define MEMESCOPE_ANALYTICS_HPP_

#include "memescope/kmeans.hpp"
#include "memescope/manifest.hpp"

#include <nlohmann/json.hpp>

#include <map>

namespace memescope::analytics {

struct ClusterProfile {
    std::size_t cluster = 0;
    std::size_t size = 0;
    std::map<Source, std::size_t> counts;  // only sources present in the cluster
    std::map<Source, double> shares;       // every source present in the manifest
    Source majority_source = Source::REDDIT;
    bool majority_tie = false;
    std::optional<std::string> label;
    std::vector<std::string> representative_ids;
    std::vector<std::string> random_ids;
    double share_gap = 0;

    double share(Source s) const
    {
        auto it = shares.find(s);
        return it == shares.end() ? 0.0 : it->second;
    }

    friend bool operator==(const ClusterProfile&, const ClusterProfile&) = default;
};

struct SampleCounts {
    std::size_t representatives = 5;
    std::size_t random = 15;
};

inline std::vector<ClusterProfile> profile_clusters(const kmeans::KmeansModel& model, const MatrixD& x,
                                                    const Manifest& manifest, std::uint64_t seed,
                                                    SampleCounts counts = {})
{
    const std::size_t n = manifest.size();
    if (model.assignments.size() != n)
        throw InputError("profile_clusters: " + std::to_string(model.assignments.size()) + " assignments for " +
                         std::to_string(n) + " manifest records");
    if (x.rows() != n)
        throw InputError("profile_clusters: " + std::to_string(x.rows()) + " embedding rows for " +
                         std::to_string(n) + " manifest records");
    if (x.cols() != model.centroids.cols())
        throw InputError("profile_clusters: embedding dimension does not match centroids");

    const std::size_t k = model.k();
    std::vector<std::vector<std::size_t>> members(k);
    std::map<Source, std::size_t> totals;
    for (std::size_t i = 0; i < n; ++i) {
        if (model.assignments[i] >= k) throw InputError("profile_clusters: assignment out of range");
        members[model.assignments[i]].push_back(i);
        ++totals[manifest.records[i].source];
    }

    std::vector<ClusterProfile> out(k);
    for (std::size_t c = 0; c < k; ++c) {
        ClusterProfile& p = out[c];
        p.cluster = c;
        p.size = members[c].size();
        for (std::size_t i : members[c]) ++p.counts[manifest.records[i].source];
        for (const auto& [s, total] : totals) {
            auto it = p.counts.find(s);
            p.shares[s] = it == p.counts.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(total);
        }
        const double ira = p.share(Source::IRA), reddit = p.share(Source::REDDIT);
        p.share_gap = ira - reddit;
        p.majority_source = ira > reddit ? Source::IRA : Source::REDDIT;
        p.majority_tie = ira == reddit;

        std::vector<std::pair<double, std::size_t>> by_distance;
        by_distance.reserve(members[c].size());
        for (std::size_t i : members[c])
            by_distance.emplace_back(std::sqrt(squared_distance<double>(x.row(i), model.centroids.row(c))), i);
        std::sort(by_distance.begin(), by_distance.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first < b.first;
            return manifest.records[a.second].id < manifest.records[b.second].id;
        });
        const std::size_t reps = std::min(counts.representatives, by_distance.size());
        for (std::size_t r = 0; r < reps; ++r) p.representative_ids.push_back(manifest.records[by_distance[r].second].id);

        std::vector<std::size_t> rest;
        for (std::size_t r = reps; r < by_distance.size(); ++r) rest.push_back(by_distance[r].second);
        std::sort(rest.begin(), rest.end());
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
        shuffle(rest.begin(), rest.end(), rng);
        rest.resize(std::min(counts.random, rest.size()));
        for (std::size_t i : rest) p.random_ids.push_back(manifest.records[i].id);
    }
    return out;
}

enum class OrderKey { share_gap, ira_share };

inline std::optional<OrderKey> parse_order_key(std::string_view s)
{
    if (s == "share_gap") return OrderKey::share_gap;
    if (s == "ira_share") return OrderKey::ira_share;
    return std::nullopt;
}

// Descending by key; ties by cluster index.
inline std::vector<ClusterProfile> order_profiles(std::vector<ClusterProfile> profiles,
                                                  OrderKey key = OrderKey::share_gap)
{
    auto value = [key](const ClusterProfile& p) { return key == OrderKey::share_gap ? p.share_gap : p.share(Source::IRA); };
    std::sort(profiles.begin(), profiles.end(), [&](const ClusterProfile& a, const ClusterProfile& b) {
        const double va = value(a), vb = value(b);
        if (va != vb) return va > vb;
        return a.cluster < b.cluster;
    });
    return profiles;
}

inline std::array<std::uint8_t, 3> border_color(Source s)
{
    switch (s) {
    case Source::IRA: return {220, 30, 30};
    case Source::REDDIT: return {30, 70, 220};
    default: return {128, 128, 128};
    }
}

inline constexpr std::size_t sheet_rows = 4;
inline constexpr std::size_t sheet_cols = 5;

// Row 0 holds the representatives, rows 1-3 the random sample. Empty cells
// stay white.
inline Image contact_sheet(const ClusterProfile& profile, const Manifest& manifest, std::size_t side,
                           std::size_t border = 3)
{
    if (side == 0) throw InputError("contact_sheet: side must be >= 1");
    const std::size_t cell = side + 2 * border;
    Image sheet(sheet_cols * cell, sheet_rows * cell, {255, 255, 255});
    const auto index = manifest.index_by_id();

    auto place = [&](const std::string& id, std::size_t slot) {
        auto it = index.find(id);
        if (it == index.end()) throw InputError("contact_sheet: unknown id '" + id + "'");
        const ImageRecord& rec = manifest.records[it->second];
        const long x0 = static_cast<long>((slot % sheet_cols) * cell), y0 = static_cast<long>((slot / sheet_cols) * cell);
        sheet.fill_rect(x0, y0, static_cast<long>(cell), static_cast<long>(cell), border_color(rec.source));
        const Image thumb = resize_image(read_image(rec.path), side, side);
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x)
                for (std::size_t c = 0; c < 3; ++c)
                    sheet.at(static_cast<std::size_t>(x0) + border + x, static_cast<std::size_t>(y0) + border + y, c) =
                        thumb.at(x, y, c);
    };

    const std::size_t reps = std::min(profile.representative_ids.size(), sheet_cols);
    for (std::size_t r = 0; r < reps; ++r) place(profile.representative_ids[r], r);
    const std::size_t randoms = std::min(profile.random_ids.size(), (sheet_rows - 1) * sheet_cols);
    for (std::size_t r = 0; r < randoms; ++r) place(profile.random_ids[r], sheet_cols + r);
    return sheet;
}

inline std::string sheet_filename(std::size_t cluster) { return "cluster_" + std::to_string(cluster) + ".png"; }

namespace detail {

inline nlohmann::ordered_json source_map(const auto& m)
{
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [s, v] : m) j[to_string(s)] = v;
    return j;
}

inline Source require_source(const std::string& s)
{
    auto src = parse_source(s);
    if (!src) throw InputError("profiles: unknown source '" + s + "'");
    return *src;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const ClusterProfile& p)
{
    nlohmann::ordered_json j;
    j["cluster"] = p.cluster;
    j["size"] = p.size;
    j["count_per_source"] = detail::source_map(p.counts);
    j["share_per_source"] = detail::source_map(p.shares);
    j["share_gap"] = p.share_gap;
    j["majority_source"] = to_string(p.majority_source);
    j["majority_tie"] = p.majority_tie;
    j["label"] = p.label ? nlohmann::ordered_json(*p.label) : nlohmann::ordered_json(nullptr);
    j["representative_ids"] = p.representative_ids;
    j["random_ids"] = p.random_ids;
    return j;
}

inline nlohmann::ordered_json profiles_json(std::span<const ClusterProfile> profiles)
{
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& p : profiles) j.push_back(to_json(p));
    return j;
}

inline ClusterProfile profile_from_json(const nlohmann::json& j)
{
    try {
        ClusterProfile p;
        p.cluster = j.at("cluster").get<std::size_t>();
        p.size = j.at("size").get<std::size_t>();
        for (const auto& [s, v] : j.at("count_per_source").items()) p.counts[detail::require_source(s)] = v.get<std::size_t>();
        for (const auto& [s, v] : j.at("share_per_source").items()) p.shares[detail::require_source(s)] = v.get<double>();
        p.share_gap = j.at("share_gap").get<double>();
        p.majority_source = detail::require_source(j.at("majority_source").get<std::string>());
        p.majority_tie = j.at("majority_tie").get<bool>();
        if (!j.at("label").is_null()) p.label = j.at("label").get<std::string>();
        p.representative_ids = j.at("representative_ids").get<std::vector<std::string>>();
        p.random_ids = j.at("random_ids").get<std::vector<std::string>>();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("profiles: ") + e.what());
    }
}

// Labels -------------------------------------------------------------------

inline constexpr std::size_t max_label_chars = 200;

// Code points, assuming valid UTF-8.
inline std::size_t utf8_length(std::string_view s)
{
    return static_cast<std::size_t>(
        std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
}

struct LabelSet {
    std::string run_id;
    std::map<std::size_t, std::string> labels;

    friend bool operator==(const LabelSet&, const LabelSet&) = default;
};

inline void check_label(std::string_view text)
{
    if (utf8_length(text) > max_label_chars)
        throw InputError("label has " + std::to_string(utf8_length(text)) + " characters, limit is " +
                         std::to_string(max_label_chars));
}

inline nlohmann::ordered_json to_json(const LabelSet& l)
{
    nlohmann::ordered_json j;
    j["run_id"] = l.run_id;
    auto& m = j["labels"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : l.labels) m[std::to_string(k)] = v;
    return j;
}

inline LabelSet parse_labels(std::string_view text)
{
    try {
        const auto j = nlohmann::json::parse(text);
        LabelSet l;
        l.run_id = j.at("run_id").get<std::string>();
        for (const auto& [k, v] : j.at("labels").items()) {
            std::size_t pos = 0;
            const unsigned long c = std::stoul(k, &pos);
            if (pos != k.size()) throw InputError("labels: bad cluster key '" + k + "'");
            l.labels[c] = v.get<std::string>();
            check_label(l.labels[c]);
        }
        return l;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("labels: ") + e.what());
    } catch (const std::logic_error&) {
        throw InputError("labels: bad cluster key");
    }
}

// A missing file is an empty set for this run.
inline LabelSet load_labels(const std::filesystem::path& path, const std::string& run_id)
{
    if (!std::filesystem::exists(path)) return LabelSet{run_id, {}};
    return parse_labels(read_file(path));
}

inline void save_labels(const std::filesystem::path& path, const LabelSet& l)
{
    write_file_atomic(path, to_json(l).dump(2) + "\n");
}

// Labels written against another run are ignored.
inline void attach_labels(std::span<ClusterProfile> profiles, const LabelSet& labels, std::string_view run_id)
{
    for (auto& p : profiles) {
        p.label.reset();
        if (labels.run_id != run_id) continue;
        auto it = labels.labels.find(p.cluster);
        if (it != labels.labels.end()) p.label = it->second;
    }
}

}  // namespace memescope::analytics

#endif

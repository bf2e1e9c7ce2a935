#ifndef MEMESCOPE_MANIFEST_HPP_
#define MEMESCOPE_MANIFEST_HPP_

#include "memescope/image.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <optional>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace memescope {

enum class Source { IRA, REDDIT, NEGATIVE, UNLABELED };

inline constexpr std::array<Source, 4> all_sources{Source::IRA, Source::REDDIT, Source::NEGATIVE, Source::UNLABELED};

inline const char* to_string(Source s)
{
    switch (s) {
        case Source::IRA: return "IRA";
        case Source::REDDIT: return "REDDIT";
        case Source::NEGATIVE: return "NEGATIVE";
        case Source::UNLABELED: return "UNLABELED";
    }
    return "?";
}

inline std::optional<Source> parse_source(std::string_view s)
{
    for (Source src : all_sources)
        if (s == to_string(src)) return src;
    return std::nullopt;
}

struct ImageRecord {
    std::string id;
    std::filesystem::path path;  // resolved; relative paths in files are relative to the manifest
    Source source = Source::UNLABELED;
    std::optional<std::size_t> width;
    std::optional<std::size_t> height;

    friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct Manifest {
    std::vector<ImageRecord> records;
    std::chrono::system_clock::time_point created_at = std::chrono::system_clock::now();
    std::optional<std::uint64_t> seed;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }

    std::size_t count(Source s) const
    {
        return static_cast<std::size_t>(
            std::count_if(records.begin(), records.end(), [s](const ImageRecord& r) { return r.source == s; }));
    }

    // Throws if ids repeat.
    void validate() const
    {
        std::unordered_set<std::string> seen;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (records[i].id.empty()) throw InputError("manifest: record " + std::to_string(i) + " has an empty id");
            if (!seen.insert(records[i].id).second)
                throw InputError("manifest: duplicate id '" + records[i].id + "'");
        }
    }

    std::unordered_map<std::string, std::size_t> index_by_id() const
    {
        std::unordered_map<std::string, std::size_t> out;
        out.reserve(records.size());
        for (std::size_t i = 0; i < records.size(); ++i) out.emplace(records[i].id, i);
        return out;
    }

    Manifest subset(std::span<const std::size_t> idx) const
    {
        Manifest out;
        out.created_at = created_at;
        out.seed = seed;
        out.records.reserve(idx.size());
        for (std::size_t i : idx) out.records.push_back(records[i]);
        return out;
    }
};

inline ImageRecord parse_record(std::string_view line, std::size_t line_no, const std::filesystem::path& base)
{
    const std::string where = "manifest line " + std::to_string(line_no);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw InputError(where + ": expected a JSON object");
    auto need_string = [&](const char* key) {
        if (!j.contains(key) || !j[key].is_string())
            throw InputError(where + ": missing or non-string key '" + key + "'");
        return j[key].get<std::string>();
    };
    ImageRecord r;
    r.id = need_string("id");
    if (r.id.empty()) throw InputError(where + ": empty id");
    std::filesystem::path p = need_string("path");
    r.path = p.is_absolute() ? p : (base / p).lexically_normal();
    const std::string source = need_string("source");
    const auto parsed = parse_source(source);
    if (!parsed) throw InputError(where + ": unknown source '" + source + "'");
    r.source = *parsed;
    for (const char* key : {"width", "height"}) {
        if (!j.contains(key)) continue;
        if (!j[key].is_number_unsigned()) throw InputError(where + ": '" + key + "' must be a non-negative integer");
        (std::string_view(key) == "width" ? r.width : r.height) = j[key].get<std::size_t>();
    }
    return r;
}

inline Manifest parse_manifest(std::string_view text, const std::filesystem::path& base)
{
    Manifest m;
    std::unordered_set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
        ImageRecord r = parse_record(line, line_no, base);
        if (!seen.insert(r.id).second)
            throw InputError("manifest line " + std::to_string(line_no) + ": duplicate id '" + r.id + "'");
        m.records.push_back(std::move(r));
    }
    return m;
}

inline Manifest load_manifest(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw InputError("manifest not found: " + path.string());
    Manifest m = parse_manifest(read_file(path), path.parent_path());
    std::error_code ec;
    const auto mtime = std::filesystem::last_write_time(path, ec);
    if (!ec)
        m.created_at = std::chrono::time_point_cast<std::chrono::system_clock::duration>(
            mtime - std::filesystem::file_time_type::clock::now() + std::chrono::system_clock::now());
    return m;
}

// Paths under the manifest's directory are written relative to it so a run
// directory can be moved or compared byte-for-byte with another run.
inline std::string format_manifest(const Manifest& m, const std::filesystem::path& base)
{
    const auto abs_base = std::filesystem::absolute(base).lexically_normal();
    std::ostringstream out;
    for (const auto& r : m.records) {
        const auto abs_path = std::filesystem::absolute(r.path).lexically_normal();
        const auto rel = abs_path.lexically_relative(abs_base);
        const bool inside = !rel.empty() && *rel.begin() != "..";
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["path"] = inside ? rel.generic_string() : abs_path.generic_string();
        j["source"] = to_string(r.source);
        if (r.width) j["width"] = *r.width;
        if (r.height) j["height"] = *r.height;
        out << j.dump() << '\n';
    }
    return out.str();
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m)
{
    write_file_atomic(path, format_manifest(m, path.parent_path()));
}

inline PixelTensor load_image(const ImageRecord& record, std::size_t target, const Normalization& norm = {})
{
    return to_tensor(read_image(record.path), target, norm);
}

struct LoadedImages {
    std::vector<PixelTensor> tensors;
    std::vector<std::size_t> kept;          // manifest indices, ascending
    std::vector<std::string> skipped_ids;
};

// Decode failures are logged and skipped, never fatal.
inline LoadedImages load_images(const Manifest& m, std::size_t target, const Normalization& norm = {})
{
    LoadedImages out;
    out.tensors.reserve(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        try {
            out.tensors.push_back(load_image(m.records[i], target, norm));
            out.kept.push_back(i);
        } catch (const DecodeError& e) {
            log::warn("skipping '" + m.records[i].id + "': " + e.what());
            out.skipped_ids.push_back(m.records[i].id);
        }
    }
    return out;
}

// Exactly per_source records from each requested source, drawn without
// replacement. Selected records keep their relative manifest order.
inline Manifest balanced_sample(const Manifest& m, std::size_t per_source, std::pair<Source, Source> sources,
                                std::uint64_t seed)
{
    std::vector<std::size_t> chosen;
    for (Source s : {sources.first, sources.second}) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m.records[i].source == s) pool.push_back(i);
        if (pool.size() < per_source)
            throw InputError(std::string("balanced_sample: source ") + to_string(s) + " has " +
                             std::to_string(pool.size()) + " records, need " + std::to_string(per_source));
        Rng rng(derive_seed(seed, to_string(s)));
        shuffle(pool.begin(), pool.end(), rng);
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(per_source));
        if (sources.first == sources.second) break;
    }
    std::sort(chosen.begin(), chosen.end());
    Manifest out = m.subset(chosen);
    out.seed = seed;
    return out;
}

}  // namespace memescope

#endif

#ifndef MEMESCOPE_PIPELINE_STATE_HPP_
#define MEMESCOPE_PIPELINE_STATE_HPP_

#include "memescope/pipeline/config.hpp"

#include <nlohmann/json.hpp>

#include <map>

namespace memescope::pipeline {

inline constexpr std::array<std::string_view, 7> stage_names{"synth",   "filter",  "embed", "cluster",
                                                             "project", "analyze", "detect"};

inline bool is_stage(std::string_view s)
{
    return std::find(stage_names.begin(), stage_names.end(), s) != stage_names.end();
}

// Direct inputs of each stage.
inline std::vector<std::string_view> upstream(std::string_view stage)
{
    if (stage == "synth") return {};
    if (stage == "filter") return {"synth"};
    if (stage == "embed") return {"filter"};
    if (stage == "cluster") return {"embed"};
    if (stage == "project") return {"embed", "cluster"};
    if (stage == "analyze") return {"embed", "cluster"};
    if (stage == "detect") return {"embed"};
    throw InputError("unknown stage '" + std::string(stage) + "'");
}

// Every transitive input, in pipeline order.
inline std::vector<std::string_view> ancestors(std::string_view stage)
{
    std::set<std::string_view> seen;
    std::vector<std::string_view> todo = upstream(stage);
    while (!todo.empty()) {
        const auto s = todo.back();
        todo.pop_back();
        if (!seen.insert(s).second) continue;
        for (auto u : upstream(s)) todo.push_back(u);
    }
    std::vector<std::string_view> out;
    for (auto s : stage_names)
        if (seen.count(s)) out.push_back(s);
    return out;
}

struct StageMarker {
    std::string fingerprint;
    std::map<std::string, std::string> outputs;  // run-dir relative path -> sha256

    friend bool operator==(const StageMarker&, const StageMarker&) = default;
};

struct RunState {
    std::optional<std::uint64_t> seed;  // master seed of the last stage run
    std::map<std::string, StageMarker> stages;

    const StageMarker* find(std::string_view stage) const
    {
        auto it = stages.find(std::string(stage));
        return it == stages.end() ? nullptr : &it->second;
    }
};

class StaleError : public Error {
  public:
    StaleError(std::string stage, const std::string& msg) : Error(msg), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

  private:
    std::string stage_;
};

inline std::filesystem::path state_path(const std::filesystem::path& run_dir) { return run_dir / "state.json"; }

inline nlohmann::ordered_json to_json(const RunState& s)
{
    nlohmann::ordered_json j;
    if (s.seed) j["seed"] = *s.seed;
    auto& stages = j["stages"] = nlohmann::ordered_json::object();
    for (auto name : stage_names) {
        const StageMarker* m = s.find(name);
        if (!m) continue;
        auto& o = stages[std::string(name)];
        o["fingerprint"] = m->fingerprint;
        o["outputs"] = nlohmann::ordered_json::object();
        for (const auto& [path, hash] : m->outputs) o["outputs"][path] = hash;
    }
    return j;
}

inline RunState load_state(const std::filesystem::path& run_dir)
{
    RunState s;
    const auto path = state_path(run_dir);
    if (!std::filesystem::exists(path)) return s;
    try {
        const auto j = nlohmann::json::parse(read_file(path));
        if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& [name, o] : j.at("stages").items()) {
            if (!is_stage(name)) throw InputError("state: unknown stage '" + name + "'");
            StageMarker m;
            m.fingerprint = o.at("fingerprint").get<std::string>();
            for (const auto& [p, h] : o.at("outputs").items()) m.outputs[p] = h.get<std::string>();
            s.stages[name] = std::move(m);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError("state: " + path.string() + " is corrupt (" + e.what() + ")");
    }
    return s;
}

inline void save_state(const std::filesystem::path& run_dir, const RunState& s)
{
    write_file_atomic(state_path(run_dir), to_json(s).dump(2) + "\n");
}

inline std::string outputs_digest(const StageMarker& m)
{
    std::string text;
    for (const auto& [path, hash] : m.outputs) text += path + ' ' + hash + '\n';
    return sha256_hex(text);
}

// Stage settings plus the recorded outputs of every direct input.
inline std::string fingerprint(const RunConfig& cfg, std::string_view stage, const RunState& state)
{
    std::string text = stage_settings(cfg, stage).dump() + '\n';
    for (auto dep : upstream(stage)) {
        const StageMarker* m = state.find(dep);
        text += std::string(dep) + ' ' + (m ? outputs_digest(*m) : std::string("-")) + '\n';
    }
    return sha256_hex(text);
}

// First output that is missing or no longer matches its recorded hash.
inline std::optional<std::string> tampered_output(const std::filesystem::path& run_dir, const StageMarker& m)
{
    for (const auto& [path, hash] : m.outputs) {
        const auto full = run_dir / path;
        if (!std::filesystem::exists(full)) return path + " is missing";
        if (sha256_file(full) != hash) return path + " was modified";
    }
    return std::nullopt;
}

enum class StageStatus { missing, stale, tampered, complete };

inline const char* to_string(StageStatus s)
{
    switch (s) {
    case StageStatus::missing: return "missing";
    case StageStatus::stale: return "stale";
    case StageStatus::tampered: return "tampered";
    case StageStatus::complete: return "complete";
    }
    return "?";
}

inline StageStatus stage_status(const std::filesystem::path& run_dir, const RunConfig& cfg, const RunState& state,
                                std::string_view stage)
{
    const StageMarker* m = state.find(stage);
    if (!m) return StageStatus::missing;
    if (tampered_output(run_dir, *m)) return StageStatus::tampered;
    if (m->fingerprint != fingerprint(cfg, stage, state)) return StageStatus::stale;
    return StageStatus::complete;
}

// Throws StaleError naming the first input stage that blocks `stage`.
inline void require_upstream(const std::filesystem::path& run_dir, const RunConfig& cfg, const RunState& state,
                             std::string_view stage)
{
    const std::string me(stage);
    for (auto dep : upstream(stage))
        if (!state.find(dep))
            throw StaleError(std::string(dep), me + ": upstream stage '" + std::string(dep) +
                                                   "' has not run; run `memescope " + std::string(dep) + "` first");
    for (auto dep : ancestors(stage)) {
        const std::string d(dep);
        const StageMarker* m = state.find(dep);
        if (!m)
            throw StaleError(d, me + ": upstream stage '" + d + "' has not run; run `memescope " + d + "` first");
        if (auto why = tampered_output(run_dir, *m))
            throw StaleError(d, me + ": output of upstream stage '" + d + "' changed (" + *why + "); re-run `memescope " +
                                    d + "`");
        if (m->fingerprint != fingerprint(cfg, dep, state))
            throw StaleError(d, me + ": upstream stage '" + d +
                                    "' is stale (its settings or inputs changed); re-run `memescope " + d + "`");
    }
}

}  // namespace memescope::pipeline

#endif

#ifndef MEMESCOPE_PIPELINE_SERVER_HPP_
#define MEMESCOPE_PIPELINE_SERVER_HPP_

#include "memescope/pipeline/stages.hpp"

#include <httplib.h>

#include <mutex>

namespace memescope::pipeline {

inline constexpr const char* placeholder_page =
    "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>memescope</title></head>\n"
    "<body><h1>memescope</h1><p>The labeling UI is not bundled with this build. "
    "The JSON API is under <code>/api/</code>.</p></body></html>\n";

// Read-mostly view of a finished run plus the single label writer.
class ApiServer {
  public:
    // cfg, when given, lets /api/run report stale stages as well.
    explicit ApiServer(std::filesystem::path run_dir, std::optional<RunConfig> cfg = std::nullopt)
        : run_dir_(std::move(run_dir)), cfg_(std::move(cfg))
    {
        state_ = load_state(run_dir_);
        const StageMarker* analyze = state_.find("analyze");
        if (!analyze) throw StaleError("analyze", "serve: stage 'analyze' has not run; run `memescope analyze` first");
        if (auto why = tampered_output(run_dir_, *analyze))
            throw StaleError("analyze", "serve: output of stage 'analyze' changed (" + *why +
                                            "); re-run `memescope analyze`");
        for (auto dep : ancestors("analyze"))
            if (const StageMarker* m = state_.find(dep); m && tampered_output(run_dir_, *m))
                throw StaleError(std::string(dep), "serve: output of stage '" + std::string(dep) + "' changed");

        run_id_ = run_id(run_dir_);
        manifest_ = load_manifest(run_dir_ / files::embedded);
        for (std::size_t i = 0; i < manifest_.size(); ++i) by_id_[manifest_.records[i].id] = i;

        const auto pj = detail::read_json(run_dir_ / files::profiles);
        for (const auto& p : pj) profiles_.push_back(analytics::profile_from_json(p));
        for (std::size_t i = 0; i < profiles_.size(); ++i) by_cluster_[profiles_[i].cluster] = i;

        if (state_.find("project")) projection_ = read_file(run_dir_ / files::projection);
        if (state_.find("detect")) report_ = read_file(run_dir_ / files::report);

        labels_ = analytics::load_labels(labels_path(), run_id_);
        // No SO_REUSEPORT: a second server on a busy port must fail to bind.
        http_.set_socket_options([](socket_t sock) {
            int yes = 1;
            setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
        });
        install_routes();
    }

    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;
    ~ApiServer() { stop(); }

    std::filesystem::path labels_path() const { return run_dir_ / files::labels; }
    const std::string& id() const { return run_id_; }

    // Port 0 picks a free port. Throws if the port is taken.
    int bind(const std::string& host, int port)
    {
        if (port == 0) {
            port_ = http_.bind_to_any_port(host);
        } else {
            port_ = http_.bind_to_port(host, port) ? port : -1;
        }
        if (port_ < 0) throw Error("serve: cannot bind " + host + ":" + std::to_string(port) + " (port in use?)");
        return port_;
    }

    // Blocks until stop().
    void listen() { http_.listen_after_bind(); }

    void start()
    {
        worker_ = std::thread([this] { listen(); });
        http_.wait_until_ready();
    }

    void stop()
    {
        http_.stop();
        if (worker_.joinable()) worker_.join();
    }

    // Profiles in stored order with the current labels overlaid.
    std::vector<analytics::ClusterProfile> profiles() const
    {
        std::lock_guard lock(labels_mu_);
        auto out = profiles_;
        analytics::attach_labels(out, labels_, run_id_);
        return out;
    }

    // Throws InputError on an oversize label, std::out_of_range on an unknown cluster.
    void set_label(std::size_t cluster, const std::string& text)
    {
        if (!by_cluster_.count(cluster)) throw std::out_of_range("unknown cluster " + std::to_string(cluster));
        analytics::check_label(text);
        std::lock_guard lock(labels_mu_);
        if (labels_.run_id != run_id_) {
            // Keep another run's labels next to the new file instead of overwriting them.
            if (std::filesystem::exists(labels_path()))
                std::filesystem::copy_file(labels_path(), run_dir_ / ("labels." + labels_.run_id + ".json"),
                                           std::filesystem::copy_options::overwrite_existing);
            labels_ = analytics::LabelSet{run_id_, {}};
        }
        analytics::LabelSet next = labels_;
        if (text.empty()) next.labels.erase(cluster);
        else next.labels[cluster] = text;
        analytics::save_labels(labels_path(), next);
        labels_ = std::move(next);
    }

  private:
    static void send_json(httplib::Response& res, const nlohmann::ordered_json& j, int status = 200)
    {
        res.status = status;
        res.set_content(j.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, const std::string& msg)
    {
        send_json(res, {{"error", msg}}, status);
    }

    static std::optional<std::size_t> parse_index(const std::string& s)
    {
        if (s.empty() || s.size() > 9) return std::nullopt;
        return static_cast<std::size_t>(std::stoul(s));
    }

    nlohmann::ordered_json run_json() const
    {
        nlohmann::ordered_json j;
        j["run_id"] = run_id_;
        j["K"] = profiles_.size();
        j["seed"] = state_.seed ? nlohmann::ordered_json(*state_.seed) : nlohmann::ordered_json(nullptr);
        j["images"] = manifest_.size();
        auto& st = j["stages"] = nlohmann::ordered_json::object();
        for (auto s : stage_names) {
            const StageMarker* m = state_.find(s);
            std::string status;
            if (cfg_) status = to_string(stage_status(run_dir_, *cfg_, state_, s));
            else if (!m) status = "missing";
            else status = tampered_output(run_dir_, *m) ? "tampered" : "complete";
            st[std::string(s)] = status;
        }
        return j;
    }

    nlohmann::ordered_json member(const std::string& id, const char* role) const
    {
        nlohmann::ordered_json m;
        m["id"] = id;
        auto it = by_id_.find(id);
        m["source"] = it == by_id_.end() ? "UNLABELED" : to_string(manifest_.records[it->second].source);
        m["role"] = role;
        return m;
    }

    void install_routes()
    {
        http_.Get("/", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(placeholder_page, "text/html; charset=utf-8");
        });

        http_.Get("/api/run", [this](const httplib::Request&, httplib::Response& res) { send_json(res, run_json()); });

        http_.Get("/api/clusters", [this](const httplib::Request&, httplib::Response& res) {
            send_json(res, analytics::profiles_json(profiles()));
        });

        http_.Get(R"(/api/clusters/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
            const auto k = parse_index(req.matches[1]);
            if (!k || !by_cluster_.count(*k)) return send_error(res, 404, "unknown cluster");
            const auto all = profiles();
            const auto& p = all[by_cluster_.at(*k)];
            auto j = analytics::to_json(p);
            auto& members = j["members"] = nlohmann::ordered_json::array();
            for (const auto& id : p.representative_ids) members.push_back(member(id, "representative"));
            for (const auto& id : p.random_ids) members.push_back(member(id, "random"));
            j["sheet"] = "/api/clusters/" + std::to_string(*k) + "/sheet";
            send_json(res, j);
        });

        http_.Get(R"(/api/clusters/(\d+)/sheet)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto k = parse_index(req.matches[1]);
            if (!k || !by_cluster_.count(*k)) return send_error(res, 404, "unknown cluster");
            const auto path = run_dir_ / files::sheets_dir / analytics::sheet_filename(*k);
            if (!std::filesystem::exists(path)) return send_error(res, 404, "contact sheet missing");
            res.set_content(read_file(path), "image/png");
        });

        http_.Put(R"(/api/clusters/(\d+)/label)", [this](const httplib::Request& req, httplib::Response& res) {
            const auto k = parse_index(req.matches[1]);
            if (!k || !by_cluster_.count(*k)) return send_error(res, 404, "unknown cluster");
            std::string text;
            try {
                const auto body = nlohmann::json::parse(req.body);
                if (!body.is_object() || !body.contains("label") || !body.at("label").is_string())
                    return send_error(res, 400, "body must be {\"label\": string}");
                text = body.at("label").get<std::string>();
            } catch (const nlohmann::json::exception&) {
                return send_error(res, 400, "body is not valid JSON");
            }
            try {
                set_label(*k, text);
            } catch (const InputError& e) {
                return send_error(res, 400, e.what());
            }
            res.status = 204;
        });

        http_.Get(R"(/api/images/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            auto it = by_id_.find(req.matches[1]);
            if (it == by_id_.end()) return send_error(res, 404, "unknown image id");
            std::string bytes;
            try {
                bytes = read_file(manifest_.records[it->second].path);
            } catch (const Error&) {
                return send_error(res, 404, "image file missing");
            }
            const auto fmt = sniff_format(bytes);
            res.set_content(std::move(bytes), fmt == ImageFormat::unknown ? "application/octet-stream" : content_type(fmt));
        });

        http_.Get("/api/tsne", [this](const httplib::Request&, httplib::Response& res) {
            if (!projection_) return send_error(res, 404, "project stage has not run");
            res.set_content(*projection_, "application/json");
        });

        http_.Get("/api/report", [this](const httplib::Request&, httplib::Response& res) {
            if (!report_) return send_error(res, 404, "detect stage has not run");
            res.set_content(*report_, "application/json");
        });

        http_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string msg = "internal error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                msg = e.what();
            } catch (...) {
            }
            send_error(res, 500, msg);
        });
    }

    std::filesystem::path run_dir_;
    std::optional<RunConfig> cfg_;
    RunState state_;
    std::string run_id_;
    Manifest manifest_;
    std::map<std::string, std::size_t> by_id_;
    std::vector<analytics::ClusterProfile> profiles_;
    std::map<std::size_t, std::size_t> by_cluster_;
    std::optional<std::string> projection_;
    std::optional<std::string> report_;

    mutable std::mutex labels_mu_;
    analytics::LabelSet labels_;

    httplib::Server http_;
    int port_ = -1;
    std::thread worker_;
};

}  // namespace memescope::pipeline

#endif

// memescope command line: one subcommand per pipeline stage, plus `all` and `serve`.
#include "memescope/pipeline/server.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

namespace {

namespace ms = memescope;
namespace pl = memescope::pipeline;

constexpr int exit_usage = 1;
constexpr int exit_stage = 2;

pl::ApiServer* g_server = nullptr;

void on_signal(int)
{
    if (g_server) g_server->stop();
}

pl::RunConfig read_config(const std::string& path, const std::optional<std::uint64_t>& seed)
{
    pl::RunConfig cfg = path.empty() ? pl::RunConfig{} : pl::load_config(path);
    if (seed) cfg.seed = *seed;
    return cfg;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"memescope: cluster, profile and classify memes from two sources"};
    app.require_subcommand(1);

    std::string config_path, run_dir;
    std::optional<std::uint64_t> seed;
    int port = 8080;
    std::string host = "127.0.0.1";
    bool verbose = false;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* c = sub->add_option("--config", config_path, "run configuration (JSON)")->check(CLI::ExistingFile);
        if (config_required) c->required();
        sub->add_option("--run-dir", run_dir, "run directory")->required();
        sub->add_option("--seed", seed, "master seed, overrides the config");
        sub->add_flag("-v,--verbose", verbose, "debug logging");
    };

    std::vector<std::pair<std::string, CLI::App*>> stage_cmds;
    const std::map<std::string, std::string> help{
        {"synth", "build the corpus manifest (synthetic or external)"},
        {"filter", "train the meme filter and keep likely memes"},
        {"embed", "train the DeepCluster network and embed the filtered corpus"},
        {"cluster", "K-means over the embeddings"},
        {"project", "2-D t-SNE projection"},
        {"analyze", "cluster profiles and contact sheets"},
        {"detect", "logistic-regression source detector"},
    };
    for (auto s : pl::stage_names) {
        const std::string name(s);
        auto* sub = app.add_subcommand(name, help.at(name));
        add_common(sub, true);
        stage_cmds.emplace_back(name, sub);
    }
    auto* all = app.add_subcommand("all", "run every stage in order");
    add_common(all, true);
    auto* serve = app.add_subcommand("serve", "serve the labeling API for a finished run");
    add_common(serve, false);
    serve->add_option("--port", port, "listen port (0 picks a free one)")->check(CLI::Range(0, 65535));
    serve->add_option("--host", host, "listen address");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : exit_usage;
    }
    if (verbose) ms::log::threshold() = ms::log::Level::debug;

    pl::RunConfig cfg;
    try {
        cfg = read_config(config_path, seed);
    } catch (const ms::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_usage;
    }

    try {
        if (serve->parsed()) {
            std::optional<pl::RunConfig> c;
            if (!config_path.empty()) c = cfg;
            pl::ApiServer server(run_dir, c);
            const int bound = server.bind(host, port);
            std::cout << "serving run " << server.id() << " on http://" << host << ":" << bound << "/" << std::endl;
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            server.listen();
            g_server = nullptr;
            return 0;
        }
        if (all->parsed()) {
            pl::run_all(cfg, run_dir);
            return 0;
        }
        for (const auto& [name, sub] : stage_cmds) {
            if (!sub->parsed()) continue;
            const auto r = pl::run_stage(name, cfg, run_dir);
            for (const auto& p : r.outputs) ms::log::debug("  " + p);
            return 0;
        }
    } catch (const pl::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_stage;
    }
    return exit_usage;
}

#include "memescope/pipeline/server.hpp"
#include "tiny_run.hpp"

#include <gtest/gtest.h>

using namespace memescope;
using namespace memescope::pipeline;

namespace fs = std::filesystem;

namespace {

const fs::path& shared_run()
{
    static const fs::path dir = tiny::run("server_test_run");
    return dir;
}

fs::path copy_run(const std::string& name)
{
    const auto dir = tiny::fresh_dir(name);
    fs::copy(shared_run(), dir, fs::copy_options::recursive);
    return dir;
}

// A server on a free local port, stopped on destruction.
struct Running {
    explicit Running(const fs::path& dir) : server(dir)
    {
        port = server.bind("127.0.0.1", 0);
        server.start();
    }
    httplib::Client client() const { return httplib::Client("127.0.0.1", port); }

    ApiServer server;
    int port = 0;
};

nlohmann::json get_json(httplib::Client& c, const std::string& path)
{
    auto res = c.Get(path);
    if (!res) throw std::runtime_error("no response for " + path);
    if (res->status != 200) throw std::runtime_error(path + " returned " + std::to_string(res->status));
    return nlohmann::json::parse(res->body);
}

int put_label(httplib::Client& c, std::size_t k, const std::string& body)
{
    auto res = c.Put("/api/clusters/" + std::to_string(k) + "/label", body, "application/json");
    return res ? res->status : -1;
}

std::string label_body(const std::string& text) { return nlohmann::json{{"label", text}}.dump(); }

}  // namespace

TEST(Server, ClustersMatchProfilesFile)
{
    const auto dir = copy_run("server_clusters");
    Running r(dir);
    auto c = r.client();
    const auto got = get_json(c, "/api/clusters");
    const auto want = pipeline::detail::read_json(dir / files::profiles);
    EXPECT_EQ(got, want);

    // Server order is descending share gap.
    for (std::size_t i = 1; i < got.size(); ++i)
        EXPECT_GE(got[i - 1].at("share_gap").get<double>(), got[i].at("share_gap").get<double>());
}

TEST(Server, RunMetadata)
{
    const auto dir = copy_run("server_run");
    Running r(dir);
    auto c = r.client();
    const auto j = get_json(c, "/api/run");
    EXPECT_EQ(j.at("K").get<std::size_t>(), 4u);
    EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 11u);
    EXPECT_EQ(j.at("run_id").get<std::string>(), run_id(dir));
    for (auto s : stage_names) EXPECT_EQ(j.at("stages").at(std::string(s)), "complete") << s;
}

TEST(Server, ClusterDetailListsSampleRoles)
{
    const auto dir = copy_run("server_detail");
    Running r(dir);
    auto c = r.client();
    const auto profiles = pipeline::detail::read_json(dir / files::profiles);
    const auto k = profiles[0].at("cluster").get<std::size_t>();
    const auto j = get_json(c, "/api/clusters/" + std::to_string(k));
    EXPECT_EQ(j.at("representative_ids"), profiles[0].at("representative_ids"));
    EXPECT_EQ(j.at("random_ids"), profiles[0].at("random_ids"));
    const auto& members = j.at("members");
    const std::size_t reps = j.at("representative_ids").size();
    ASSERT_EQ(members.size(), reps + j.at("random_ids").size());
    for (std::size_t i = 0; i < members.size(); ++i)
        EXPECT_EQ(members[i].at("role"), i < reps ? "representative" : "random");

    auto sheet = c.Get("/api/clusters/" + std::to_string(k) + "/sheet");
    ASSERT_TRUE(sheet);
    EXPECT_EQ(sheet->status, 200);
    EXPECT_EQ(sheet->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(c.Get("/api/clusters/9999")->status, 404);
}

TEST(Server, ImagesHaveContentType)
{
    const auto dir = copy_run("server_images");
    Running r(dir);
    auto c = r.client();
    const Manifest m = load_manifest(dir / files::embedded);
    auto res = c.Get("/api/images/" + m.records[0].id);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(res->get_header_value("Content-Type"), "image/png");
    EXPECT_EQ(res->body, read_file(m.records[0].path));
    EXPECT_EQ(c.Get("/api/images/no-such-image")->status, 404);
}

TEST(Server, TsneAndReport)
{
    const auto dir = copy_run("server_tsne");
    Running r(dir);
    auto c = r.client();
    const auto t = get_json(c, "/api/tsne");
    EXPECT_EQ(t.at("points").size(), load_manifest(dir / files::embedded).size());
    for (const auto& p : t.at("points")) {
        EXPECT_TRUE(p.contains("cluster"));
        EXPECT_TRUE(p.contains("source"));
    }
    const auto rep = get_json(c, "/api/report");
    EXPECT_EQ(rep, pipeline::detail::read_json(dir / files::report));
    EXPECT_EQ(rep.at("positive_label"), "IRA");
}

TEST(Server, ReportMissingWithoutDetect)
{
    const auto dir = copy_run("server_no_detect");
    RunState st = load_state(dir);
    st.stages.erase("detect");
    save_state(dir, st);
    Running r(dir);
    auto c = r.client();
    EXPECT_EQ(c.Get("/api/report")->status, 404);
    EXPECT_EQ(get_json(c, "/api/run").at("stages").at("detect"), "missing");
}

TEST(Server, LabelPersistsAcrossRestart)
{
    const auto dir = copy_run("server_labels");
    const std::string text = "Screenshots/Tweets";
    std::size_t k = 0;
    {
        Running r(dir);
        auto c = r.client();
        k = get_json(c, "/api/clusters")[1].at("cluster").get<std::size_t>();
        EXPECT_EQ(put_label(c, k, label_body(text)), 204);
        EXPECT_EQ(get_json(c, "/api/clusters/" + std::to_string(k)).at("label"), text);
    }
    const auto stored = analytics::parse_labels(read_file(dir / files::labels));
    EXPECT_EQ(stored.run_id, run_id(dir));
    EXPECT_EQ(stored.labels.at(k), text);

    Running again(dir);
    auto c = again.client();
    const auto all = get_json(c, "/api/clusters");
    for (const auto& p : all) {
        if (p.at("cluster").get<std::size_t>() == k) EXPECT_EQ(p.at("label"), text);
        else EXPECT_TRUE(p.at("label").is_null());
    }
}

TEST(Server, LabelTextRoundTripsExactly)
{
    const auto dir = copy_run("server_label_text");
    Running r(dir);
    auto c = r.client();
    const std::string text = "Memes \"quoted\" \xC3\xA9t\xC3\xA9 / \xF0\x9F\x98\x80  trailing ";
    EXPECT_EQ(put_label(c, 0, label_body(text)), 204);
    EXPECT_EQ(get_json(c, "/api/clusters/0").at("label").get<std::string>(), text);
    EXPECT_EQ(put_label(c, 0, label_body("")), 204);
    EXPECT_TRUE(get_json(c, "/api/clusters/0").at("label").is_null());
}

TEST(Server, LabelErrors)
{
    const auto dir = copy_run("server_label_errors");
    Running r(dir);
    auto c = r.client();
    EXPECT_EQ(put_label(c, 0, label_body(std::string(200, 'a'))), 204);
    // 200 code points of two bytes each is still within the limit.
    std::string accents;
    for (int i = 0; i < 200; ++i) accents += "\xC3\xA9";
    EXPECT_EQ(put_label(c, 0, label_body(accents)), 204);
    EXPECT_EQ(put_label(c, 0, label_body(std::string(201, 'a'))), 400);
    EXPECT_EQ(put_label(c, 0, "{not json"), 400);
    EXPECT_EQ(put_label(c, 0, R"({"label": 5})"), 400);
    EXPECT_EQ(put_label(c, 0, R"({"text": "x"})"), 400);
    EXPECT_EQ(put_label(c, 4, label_body("x")), 404);
    EXPECT_EQ(put_label(c, 123456, label_body("x")), 404);
    EXPECT_EQ(get_json(c, "/api/clusters/0").at("label").get<std::string>(), accents);
}

TEST(Server, LabelsFromAnotherRunAreKept)
{
    const auto dir = copy_run("server_other_run");
    analytics::save_labels(dir / files::labels, analytics::LabelSet{"0123456789abcdef", {{0, "old theme"}}});
    Running r(dir);
    auto c = r.client();
    EXPECT_TRUE(get_json(c, "/api/clusters/0").at("label").is_null());
    EXPECT_EQ(put_label(c, 1, label_body("new theme")), 204);
    const auto old = analytics::parse_labels(read_file(dir / "labels.0123456789abcdef.json"));
    EXPECT_EQ(old.labels.at(0), "old theme");
    const auto now = analytics::parse_labels(read_file(dir / files::labels));
    EXPECT_EQ(now.run_id, run_id(dir));
    EXPECT_EQ(now.labels.size(), 1u);
}

TEST(Server, ConcurrentLabelWritesAllLand)
{
    const auto dir = copy_run("server_concurrent");
    Running r(dir);
    std::vector<std::thread> threads;
    std::vector<int> status(4, 0);
    for (std::size_t k = 0; k < 4; ++k)
        threads.emplace_back([&, k] {
            auto c = r.client();
            for (int i = 0; i < 10; ++i) status[k] = put_label(c, k, label_body("label " + std::to_string(k)));
        });
    for (auto& t : threads) t.join();
    for (int s : status) EXPECT_EQ(s, 204);
    const auto stored = analytics::parse_labels(read_file(dir / files::labels));
    ASSERT_EQ(stored.labels.size(), 4u);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(stored.labels.at(k), "label " + std::to_string(k));
}

TEST(Server, RefusesRunWithoutAnalyze)
{
    const auto dir = copy_run("server_no_analyze");
    RunState st = load_state(dir);
    st.stages.erase("analyze");
    save_state(dir, st);
    EXPECT_THROW(ApiServer{dir}, StaleError);
}

TEST(Server, RefusesTamperedProfiles)
{
    const auto dir = copy_run("server_tampered");
    write_file_atomic(dir / files::profiles, "[]\n");
    EXPECT_THROW(ApiServer{dir}, StaleError);
}

TEST(Server, PortInUse)
{
    const auto dir = copy_run("server_port");
    Running first(dir);
    ApiServer second(dir);
    EXPECT_THROW(second.bind("127.0.0.1", first.port), Error);
}

TEST(Server, IndexPage)
{
    const auto dir = copy_run("server_index");
    Running r(dir);
    auto c = r.client();
    auto res = c.Get("/");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    EXPECT_NE(res->body.find("/api/"), std::string::npos);
}

#include "memescope/memefilter.hpp"
#include "memescope/synth.hpp"

#include <gtest/gtest.h>

using namespace memescope;
using namespace memescope::memefilter;

namespace {

// One corpus shared by the tests in this file: memes of both motifs and
// text-scene negatives, small enough to train in seconds.
const synth::Corpus& corpus()
{
    static const synth::Corpus c = [] {
        const auto dir = std::filesystem::temp_directory_path() / "memescope_memefilter_test";
        std::filesystem::remove_all(dir);
        synth::CorpusSpec spec;
        spec.coordinated = 30;
        spec.authentic = 30;
        spec.negative = 60;
        spec.min_side = 40;
        spec.max_side = 56;
        return synth::generate_synthetic_corpus(spec, 3, dir);
    }();
    return c;
}

Manifest select(const Manifest& m, bool memes)
{
    Manifest out;
    for (const auto& r : m.records)
        if ((r.source != Source::NEGATIVE) == memes) out.records.push_back(r);
    return out;
}

FilterConfig small_config()
{
    FilterConfig cfg;
    cfg.side = 32;
    cfg.epochs = 8;
    cfg.spec = convnet::NetworkSpec::parse("conv(4,3,1,1)-relu-maxpool(2,2)-conv(8,3,1,1)-relu-maxpool(2,2)-flatten-dense(32)-relu-head(2)");
    return cfg;
}

const TrainedFilter& trained()
{
    static const TrainedFilter t =
        train_filter(select(corpus().manifest, true), select(corpus().manifest, false), small_config(), 5);
    return t;
}

}  // namespace

TEST(Histogram, BinEdges)
{
    EXPECT_EQ(histogram_bin(0.0), 0u);
    EXPECT_EQ(histogram_bin(0.049), 0u);
    EXPECT_EQ(histogram_bin(0.05), 1u);
    EXPECT_EQ(histogram_bin(0.5), 10u);
    EXPECT_EQ(histogram_bin(0.999), 19u);
    EXPECT_EQ(histogram_bin(1.0), 19u);
    const std::vector<double> p{0.0, 0.01, 0.5, 0.97, 1.0};
    const auto h = probability_histogram(p);
    EXPECT_EQ(std::accumulate(h.begin(), h.end(), std::size_t{0}), p.size());
    EXPECT_DOUBLE_EQ(extreme_mass(h), 0.8);
}

TEST(StratifiedSplit, SeventyThirtyPerClass)
{
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < 200; ++i) labels[i] = i % 2;
    const Split s = stratified_split(labels, 0.7, 9);
    EXPECT_EQ(s.train.size(), 140u);
    EXPECT_EQ(s.test.size(), 60u);
    std::size_t train_pos = 0;
    for (auto i : s.train) train_pos += static_cast<std::size_t>(labels[i]);
    EXPECT_EQ(train_pos, 70u);
    std::vector<std::size_t> all = s.train;
    all.insert(all.end(), s.test.begin(), s.test.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
    EXPECT_THROW(stratified_split(labels, 1.0, 0), InputError);
}

TEST(TrainFilter, SplitCountsAndHeldOutAccuracy)
{
    const auto& t = trained();
    EXPECT_EQ(t.report.train_count, 96u);  // 0.8 of 60 memes + 0.8 of 60 negatives
    EXPECT_EQ(t.report.test_count, 24u);
    ASSERT_TRUE(t.report.test_accuracy);
    EXPECT_GE(*t.report.test_accuracy, 0.9);
    EXPECT_EQ(t.report.epoch_losses.size(), 8u);
    EXPECT_LT(t.report.epoch_losses.back(), t.report.epoch_losses.front());
    const auto& h = t.report.histogram;
    EXPECT_EQ(std::accumulate(h.begin(), h.end(), std::size_t{0}), t.report.scored);
}

TEST(TrainFilter, DeterministicPerSeed)
{
    const auto again =
        train_filter(select(corpus().manifest, true), select(corpus().manifest, false), small_config(), 5);
    EXPECT_EQ(convnet::encode_checkpoint(again.model.net), convnet::encode_checkpoint(trained().model.net));
}

TEST(TrainFilter, RejectsBadInput)
{
    const Manifest memes = select(corpus().manifest, true);
    EXPECT_THROW(train_filter(memes, Manifest{}, small_config(), 0), InputError);
    EXPECT_THROW(train_filter(Manifest{}, memes, small_config(), 0), InputError);
    FilterConfig cfg = small_config();
    cfg.split = 0.0;
    EXPECT_THROW(train_filter(memes, memes, cfg, 0), InputError);
    cfg = small_config();
    cfg.spec = convnet::NetworkSpec::parse("flatten-head(3)");
    EXPECT_THROW(train_filter(memes, memes, cfg, 0), InputError);
}

TEST(ApplyFilter, ThresholdZeroPassesEverything)
{
    const auto r = apply_filter(trained().model, corpus().manifest, 0.0);
    EXPECT_EQ(r.passing.size(), corpus().manifest.size());
    EXPECT_EQ(r.report.scored, corpus().manifest.size());
    EXPECT_DOUBLE_EQ(*r.report.pass_fraction, 1.0);
}

TEST(ApplyFilter, SubsequenceAndMonotoneInThreshold)
{
    const Manifest& m = corpus().manifest;
    std::size_t last = m.size() + 1;
    for (double th : {0.0, 0.1, 0.5, 0.9, 0.99, 1.0}) {
        const auto r = apply_filter(trained().model, m, th);
        EXPECT_LE(r.passing.size(), last) << "threshold " << th;
        last = r.passing.size();
        std::size_t cursor = 0;
        for (const auto& rec : r.passing.records) {
            while (cursor < m.size() && m.records[cursor].id != rec.id) ++cursor;
            ASSERT_LT(cursor, m.size()) << rec.id << " out of order";
            ++cursor;
        }
        for (std::size_t j = 0; j < r.probabilities.size(); ++j) EXPECT_GE(r.probabilities[j], 0.0);
    }
    EXPECT_EQ(last, 0u);  // probability never exceeds 1
}

TEST(ApplyFilter, StrictComparisonAtThreshold)
{
    const auto r = apply_filter(trained().model, corpus().manifest, 0.0);
    const double p = r.probabilities[0];
    const auto at = apply_filter(trained().model, corpus().manifest, p);
    for (const auto& rec : at.passing.records) EXPECT_NE(rec.id, corpus().manifest.records[0].id);
    EXPECT_THROW(apply_filter(trained().model, corpus().manifest, 1.5), InputError);
}

TEST(ApplyFilter, SkipsUndecodableImages)
{
    Manifest m = corpus().manifest.subset(std::vector<std::size_t>{0, 1, 2});
    const auto bad = std::filesystem::temp_directory_path() / "memescope_memefilter_test" / "broken.png";
    write_file_atomic(bad, "not an image");
    m.records[1].path = bad;
    const auto r = apply_filter(trained().model, m, 0.0);
    EXPECT_EQ(r.report.scored, 2u);
    ASSERT_EQ(r.report.skipped_ids.size(), 1u);
    EXPECT_EQ(r.report.skipped_ids[0], m.records[1].id);
}

TEST(FilterReport, JsonAndCheckpointRoundTrip)
{
    const auto j = to_json(trained().report);
    EXPECT_EQ(j["histogram"].size(), histogram_bins);
    EXPECT_EQ(j["test_count"], 24u);
    const auto path = std::filesystem::temp_directory_path() / "memescope_memefilter_test" / "filter.ckpt";
    save_filter(path, trained().model);
    const FilterModel back = load_filter(path);
    const auto a = apply_filter(trained().model, corpus().manifest, 0.0).probabilities;
    const auto b = apply_filter(back, corpus().manifest, 0.0).probabilities;
    EXPECT_EQ(a, b);
}

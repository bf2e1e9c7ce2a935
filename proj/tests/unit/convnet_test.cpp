#include "memescope/convnet.hpp"

#include <gtest/gtest.h>

using namespace memescope;
using namespace memescope::convnet;

namespace {

PixelTensor random_tensor(std::size_t side, Rng& rng, double scale = 1.0)
{
    PixelTensor t{3, side, side, std::vector<float>(3 * side * side)};
    for (auto& v : t.values) v = static_cast<float>(scale * normal(rng));
    return t;
}

// Every layer kind, small enough for an exhaustive finite-difference sweep.
NetworkSpec tiny_spec()
{
    return NetworkSpec::parse("conv(3,3,1,1)-relu-maxpool(2,2)-conv(4,3,2,1)-relu-flatten-dense(5)-relu-head(3)");
}

template <typename T>
double loss_of(const Network<T>& net, std::span<const PixelTensor> batch, std::span<const int> labels)
{
    // Loss recomputed from logits only; no use of the backward path.
    const auto fw = forward(net, batch);
    double total = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        double peak = -1e300;
        for (std::size_t c = 0; c < net.num_classes(); ++c) peak = std::max(peak, static_cast<double>(fw.logits(b, c)));
        double z = 0;
        for (std::size_t c = 0; c < net.num_classes(); ++c) z += std::exp(fw.logits(b, c) - peak);
        total += peak + std::log(z) - fw.logits(b, static_cast<std::size_t>(labels[b]));
    }
    return total / static_cast<double>(batch.size());
}

}  // namespace

TEST(NetworkSpec, ParseRoundTrip)
{
    const NetworkSpec spec = NetworkSpec::desk_default(10);
    EXPECT_EQ(spec.to_string(),
              "conv(8,3,1,1)-relu-maxpool(2,2)-conv(16,3,1,1)-relu-maxpool(2,2)-flatten-dense(256)-relu-head(10)");
    EXPECT_EQ(NetworkSpec::parse(spec.to_string()), spec);
}

TEST(NetworkSpec, InvalidSpecsRejected)
{
    EXPECT_THROW(infer_shapes(NetworkSpec::parse("conv(2,3,1,1)-flatten-dense(4)"), 8), InputError);  // no head
    EXPECT_THROW(infer_shapes(NetworkSpec::parse("flatten-head(2)-dense(3)"), 8), InputError);       // head not last
    EXPECT_THROW(infer_shapes(NetworkSpec::parse("conv(2,3,1,1)-dense(4)-head(2)"), 8), InputError); // not flattened
    EXPECT_THROW(infer_shapes(NetworkSpec::parse("conv(2,9,1,0)-flatten-head(2)"), 8), InputError);  // kernel too big
    EXPECT_THROW(infer_shapes(NetworkSpec::parse("flatten-head(1)"), 8), InputError);
    EXPECT_THROW(NetworkSpec::parse("conv(2,3)-head(2)"), InputError);
    EXPECT_THROW(NetworkSpec::parse("softmax-head(2)"), InputError);
}

TEST(InitNetwork, DeterministicPerSeed)
{
    const auto a = init_network<float>(NetworkSpec::desk_default(2), 32, 5);
    const auto b = init_network<float>(NetworkSpec::desk_default(2), 32, 5);
    const auto c = init_network<float>(NetworkSpec::desk_default(2), 32, 6);
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        EXPECT_EQ(a.layers[i].weight, b.layers[i].weight);
        EXPECT_EQ(a.layers[i].bias, b.layers[i].bias);
    }
    EXPECT_NE(a.layers[0].weight, c.layers[0].weight);
}

TEST(InitNetwork, ConvWeightShape)
{
    const auto net = init_network<float>(NetworkSpec::desk_default(2), 64, 1);
    EXPECT_EQ(net.layers[0].weight.size(), 8u * 3 * 3 * 3);
    EXPECT_EQ(net.layers[0].bias.size(), 8u);
    EXPECT_EQ(net.shapes[1], (Shape{8, 64, 64}));
    EXPECT_EQ(net.shapes[7], (Shape{16 * 16 * 16, 1, 1}));
    EXPECT_EQ(net.feature_dim(), 256u);
}

TEST(InitNetwork, HeScaleStatistics)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto net = init_network<double>(NetworkSpec::desk_default(10), 32, seed);
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            if (net.layers[i].weight.empty()) continue;
            const double he = std::sqrt(2.0 / static_cast<double>(net.fan_in(i)));
            double mean_abs = 0;
            for (double w : net.layers[i].weight) mean_abs += std::abs(w);
            mean_abs /= static_cast<double>(net.layers[i].weight.size());
            EXPECT_GT(mean_abs, he / 3);
            EXPECT_LT(mean_abs, he * 3);
        }
    }
}

TEST(Forward, IdentityKernelCopiesChannel)
{
    auto net = init_network<float>(NetworkSpec::parse("conv(1,3,1,1)-flatten-head(2)"), 6, 1);
    auto& w = net.layers[0].weight;
    std::fill(w.begin(), w.end(), 0.0f);
    w[1 * 9 + 4] = 1.0f;  // input channel 1, kernel centre
    std::fill(net.layers[0].bias.begin(), net.layers[0].bias.end(), 0.0f);
    Rng rng(2);
    const PixelTensor x = random_tensor(6, rng);
    const auto out = forward(net, std::span<const PixelTensor>(&x, 1));
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(out.features(0, y * 6 + c), x.at(1, y, c));
}

TEST(Forward, ZeroInputGivesHeadBias)
{
    auto net = init_network<double>(NetworkSpec::desk_default(4), 16, 3);
    for (auto& l : net.layers) std::fill(l.bias.begin(), l.bias.end(), 0.0);
    net.layers.back().bias = {0.5, -1.25, 2.0, 0.0};
    const PixelTensor zero{3, 16, 16, std::vector<float>(3 * 16 * 16, 0.0f)};
    const auto out = forward(net, std::span<const PixelTensor>(&zero, 1));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.logits(0, c), net.layers.back().bias[c]);
}

TEST(Forward, MatchesHandUnrolledComputation)
{
    // Input 3x3x3, one 2x2 conv filter (valid), relu, flatten to 4, head(2).
    auto net = init_network<double>(NetworkSpec::parse("conv(1,2,1,0)-relu-flatten-head(2)"), 3, 9);
    Rng rng(4);
    const PixelTensor x = random_tensor(3, rng);
    const auto& cw = net.layers[0].weight;  // [c][ky][kx]
    const double cb = 0.1;
    net.layers[0].bias = {cb};
    net.layers[3].bias = {0.2, -0.3};
    const auto& hw = net.layers[3].weight;  // [class][feature]

    double feat[4];
    for (int oy = 0; oy < 2; ++oy)
        for (int ox = 0; ox < 2; ++ox) {
            double s = cb;
            for (int c = 0; c < 3; ++c)
                for (int ky = 0; ky < 2; ++ky)
                    for (int kx = 0; kx < 2; ++kx)
                        s += cw[static_cast<std::size_t>((c * 2 + ky) * 2 + kx)] *
                             static_cast<double>(x.at(static_cast<std::size_t>(c), static_cast<std::size_t>(oy + ky), static_cast<std::size_t>(ox + kx)));
            feat[oy * 2 + ox] = std::max(0.0, s);
        }
    double logits[2];
    for (int k = 0; k < 2; ++k) {
        logits[k] = net.layers[3].bias[static_cast<std::size_t>(k)];
        for (int f = 0; f < 4; ++f) logits[k] += hw[static_cast<std::size_t>(k * 4 + f)] * feat[f];
    }

    const auto out = forward(net, std::span<const PixelTensor>(&x, 1));
    for (int f = 0; f < 4; ++f) EXPECT_NEAR(out.features(0, static_cast<std::size_t>(f)), feat[f], 1e-12);
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(out.logits(0, static_cast<std::size_t>(k)), logits[k], 1e-12);
}

TEST(Forward, ShapeMismatchRejected)
{
    const auto net = init_network<float>(NetworkSpec::desk_default(2), 16, 1);
    Rng rng(1);
    const PixelTensor x = random_tensor(8, rng);
    EXPECT_THROW(forward(net, std::span<const PixelTensor>(&x, 1)), InputError);
    EXPECT_THROW(forward(net, std::span<const PixelTensor>()), InputError);
}

TEST(Forward, DeterministicBits)
{
    const auto net = init_network<float>(NetworkSpec::desk_default(3), 16, 8);
    Rng rng(5);
    std::vector<PixelTensor> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_tensor(16, rng));
    const auto a = forward(net, std::span<const PixelTensor>(batch));
    const auto b = forward(net, std::span<const PixelTensor>(batch));
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.features, b.features);
}

TEST(Loss, UniformLogitsGiveLogC)
{
    auto net = init_network<double>(NetworkSpec::desk_default(2), 8, 1);
    auto& head = net.layers.back();
    std::fill(head.weight.begin(), head.weight.end(), 0.0);
    std::fill(head.bias.begin(), head.bias.end(), 0.0);
    Rng rng(3);
    std::vector<PixelTensor> batch{random_tensor(8, rng), random_tensor(8, rng)};
    const std::vector<int> labels{0, 1};
    const auto res = loss_and_backward(net, std::span<const PixelTensor>(batch), std::span<const int>(labels));
    EXPECT_NEAR(res.loss, std::log(2.0), 1e-12);
    EXPECT_NEAR(res.loss, 0.6931, 1e-4);
}

TEST(Loss, PerfectMarginDrivesLossToZero)
{
    auto net = init_network<double>(NetworkSpec::desk_default(2), 8, 1);
    auto& head = net.layers.back();
    std::fill(head.weight.begin(), head.weight.end(), 0.0);
    Rng rng(3);
    const PixelTensor x = random_tensor(8, rng);
    const int label = 0;
    double previous = std::numeric_limits<double>::infinity();
    for (double margin : {0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0}) {
        head.bias = {margin, 0.0};
        const double loss = loss_and_backward(net, std::span<const PixelTensor>(&x, 1), std::span<const int>(&label, 1)).loss;
        EXPECT_LT(loss, previous);
        previous = loss;
    }
    EXPECT_LT(previous, 1e-16);
}

TEST(Loss, LabelOutOfRange)
{
    const auto net = init_network<double>(NetworkSpec::desk_default(2), 8, 1);
    Rng rng(3);
    const PixelTensor x = random_tensor(8, rng);
    for (int bad : {-1, 2}) {
        EXPECT_THROW(loss_and_backward(net, std::span<const PixelTensor>(&x, 1), std::span<const int>(&bad, 1)),
                     InputError);
    }
}

TEST(GradientCheck, EveryCoordinateMatchesCentralDifferences)
{
    auto net = init_network<double>(tiny_spec(), 8, 21);
    Rng rng(22);
    for (auto& l : net.layers)
        for (auto& b : l.bias) b = 0.1 * normal(rng);
    std::vector<PixelTensor> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_tensor(8, rng));
    const std::vector<int> labels{0, 2, 1};
    const auto analytic = loss_and_backward(net, std::span<const PixelTensor>(batch), std::span<const int>(labels));
    EXPECT_NEAR(analytic.loss, loss_of(net, batch, labels), 1e-12);

    const double h = 1e-3;
    double worst = 0;
    std::size_t checked = 0;
    auto check = [&](std::vector<double>& params, const std::vector<double>& grads, std::size_t layer) {
        for (std::size_t j = 0; j < params.size(); ++j) {
            const double saved = params[j];
            params[j] = saved + h;
            const double up = loss_of(net, batch, labels);
            params[j] = saved - h;
            const double down = loss_of(net, batch, labels);
            params[j] = saved;
            const double numeric = (up - down) / (2 * h);
            const double rel = std::abs(numeric - grads[j]) / std::max({std::abs(numeric), std::abs(grads[j]), 1e-6});
            worst = std::max(worst, rel);
            EXPECT_LT(rel, 1e-4) << "layer " << layer << " coordinate " << j << " analytic " << grads[j]
                                 << " numeric " << numeric;
            ++checked;
        }
    };
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        check(net.layers[i].weight, analytic.grads.weight[i], i);
        check(net.layers[i].bias, analytic.grads.bias[i], i);
    }
    EXPECT_GT(checked, 250u);
    RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Sgd, PlainStepWithoutMomentumOrDecay)
{
    auto net = init_network<double>(NetworkSpec::parse("flatten-head(2)"), 2, 1);
    auto grads = Gradients<double>::zeros_like(net);
    for (std::size_t j = 0; j < grads.weight[1].size(); ++j) grads.weight[1][j] = static_cast<double>(j) - 3.0;
    grads.bias[1] = {1.0, -2.0};
    const auto before = net;
    sgd_step(net, grads, {0.1, 0.0, 0.0});
    for (std::size_t j = 0; j < grads.weight[1].size(); ++j)
        EXPECT_DOUBLE_EQ(net.layers[1].weight[j], before.layers[1].weight[j] - 0.1 * grads.weight[1][j]);
    EXPECT_DOUBLE_EQ(net.layers[1].bias[0], -0.1);
    EXPECT_DOUBLE_EQ(net.layers[1].bias[1], 0.2);
}

TEST(Sgd, TwoMomentumStepsUnrollByHand)
{
    // v1 = g, w1 = w0 - lr g;  v2 = 0.9 g + g, w2 = w1 - 1.9 lr g.
    auto net = init_network<double>(NetworkSpec::parse("flatten-head(2)"), 2, 1);
    auto grads = Gradients<double>::zeros_like(net);
    const double g = 0.7, lr = 0.05;
    std::fill(grads.weight[1].begin(), grads.weight[1].end(), g);
    const auto w0 = net.layers[1].weight;
    sgd_step(net, grads, {lr, 0.9, 0.0});
    sgd_step(net, grads, {lr, 0.9, 0.0});
    for (std::size_t j = 0; j < w0.size(); ++j) EXPECT_NEAR(w0[j] - net.layers[1].weight[j], lr * g * (1 + 1.9), 1e-15);
}

TEST(Sgd, QuadraticBowlDecreasesMonotonically)
{
    // L(w) = 0.5 * sum a_j w_j^2, gradient a_j w_j; small lr keeps each step a descent step.
    auto net = init_network<double>(NetworkSpec::parse("flatten-head(2)"), 2, 4);
    auto& w = net.layers[1].weight;
    std::vector<double> curvature(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) curvature[j] = 0.5 + static_cast<double>(j % 5);
    auto loss = [&] {
        double s = 0;
        for (std::size_t j = 0; j < w.size(); ++j) s += 0.5 * curvature[j] * w[j] * w[j];
        return s;
    };
    double previous = loss();
    for (int step = 0; step < 1000; ++step) {
        auto grads = Gradients<double>::zeros_like(net);
        for (std::size_t j = 0; j < w.size(); ++j) grads.weight[1][j] = curvature[j] * w[j];
        sgd_step(net, grads, {0.01, 0.5, 0.0});
        const double now = loss();
        EXPECT_LE(now, previous);
        previous = now;
    }
    EXPECT_LT(previous, 1e-3);
}

TEST(Sgd, NonFiniteGradientNamesLayer)
{
    auto net = init_network<float>(NetworkSpec::desk_default(2), 8, 1);
    auto grads = Gradients<float>::zeros_like(net);
    grads.weight[3][0] = std::numeric_limits<float>::quiet_NaN();
    try {
        sgd_step(net, grads, {});
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 3 (conv(16,3,1,1))"), std::string::npos) << e.what();
    }
    EXPECT_THROW(sgd_step(net, Gradients<float>::zeros_like(net), {0.0, 0.9, 0.0}), InputError);
    EXPECT_THROW(sgd_step(net, Gradients<float>::zeros_like(net), {0.1, 1.0, 0.0}), InputError);
    EXPECT_THROW(sgd_step(net, Gradients<float>::zeros_like(net), {0.1, 0.5, -1.0}), InputError);
}

TEST(ExtractFeatures, BatchingInvariantAndShape)
{
    const auto net = init_network<float>(NetworkSpec::desk_default(4), 16, 2);
    Rng rng(6);
    std::vector<PixelTensor> tensors;
    for (int i = 0; i < 40; ++i) tensors.push_back(random_tensor(16, rng));
    tensors.push_back(tensors[3]);
    const MatrixD one = extract_features(net, std::span<const PixelTensor>(tensors), 1);
    const MatrixD many = extract_features(net, std::span<const PixelTensor>(tensors), 32);
    ASSERT_EQ(one.rows(), 41u);
    ASSERT_EQ(one.cols(), 256u);
    for (std::size_t i = 0; i < one.values().size(); ++i) EXPECT_NEAR(one.values()[i], many.values()[i], 1e-6);
    for (std::size_t j = 0; j < 256; ++j) EXPECT_EQ(one(3, j), one(40, j));
}

TEST(ExtractFeatures, ManifestPathSkipsUndecodable)
{
    const auto dir = std::filesystem::temp_directory_path() / "memescope_convnet_extract";
    std::filesystem::create_directories(dir);
    write_png(dir / "a.png", Image(20, 20, {10, 200, 30}));
    write_file_atomic(dir / "b.png", "broken");
    write_png(dir / "c.png", Image(20, 20, {10, 200, 30}));
    Manifest m;
    m.records = {{"a", dir / "a.png", Source::IRA, {}, {}},
                 {"b", dir / "b.png", Source::IRA, {}, {}},
                 {"c", dir / "c.png", Source::REDDIT, {}, {}}};
    const auto net = init_network<float>(NetworkSpec::desk_default(2), 16, 2);
    const auto out = extract_features(net, m, 8);
    EXPECT_EQ(out.features.rows(), 2u);
    EXPECT_EQ(out.skipped_ids, std::vector<std::string>{"b"});
    ASSERT_EQ(out.manifest.size(), 2u);
    EXPECT_EQ(out.manifest.records[1].id, "c");
    for (std::size_t j = 0; j < out.features.cols(); ++j) EXPECT_EQ(out.features(0, j), out.features(1, j));
    std::filesystem::remove_all(dir);
}

TEST(ReinitHead, OnlyHeadChanges)
{
    auto net = init_network<float>(NetworkSpec::desk_default(10), 16, 3);
    const auto before = net;
    reinit_head(net, 10, 77);
    for (std::size_t i = 0; i + 1 < net.layers.size(); ++i) {
        EXPECT_EQ(net.layers[i].weight, before.layers[i].weight);
        EXPECT_EQ(net.layers[i].bias, before.layers[i].bias);
    }
    EXPECT_NE(net.layers.back().weight, before.layers.back().weight);

    reinit_head(net, 100, 77);
    EXPECT_EQ(net.num_classes(), 100u);
    EXPECT_EQ(net.layers.back().bias.size(), 100u);
    Rng rng(1);
    const PixelTensor x = random_tensor(16, rng);
    EXPECT_EQ(forward(net, std::span<const PixelTensor>(&x, 1)).logits.cols(), 100u);

    auto other = net;
    reinit_head(other, 100, 78);
    EXPECT_NE(other.layers.back().weight, net.layers.back().weight);
    EXPECT_THROW(reinit_head(net, 1, 0), InputError);
}

TEST(Checkpoint, RoundTrip)
{
    auto net = init_network<float>(NetworkSpec::desk_default(5), 16, 4);
    const std::string bytes = encode_checkpoint(net);
    EXPECT_EQ(bytes.substr(0, 4), "CKPT");
    const auto back = decode_checkpoint<float>(bytes);
    EXPECT_EQ(back.spec, net.spec);
    EXPECT_EQ(back.input_side, 16u);
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        EXPECT_EQ(back.layers[i].weight, net.layers[i].weight);
        EXPECT_EQ(back.layers[i].bias, net.layers[i].bias);
    }
    EXPECT_EQ(encode_checkpoint(back), bytes);
    EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, bytes.size() - 1)), InputError);
    EXPECT_THROW(decode_checkpoint<float>("XXXX"), InputError);
}

TEST(Training, SeparableToySetReachesFullAccuracy)
{
    // Class 0: bright left half; class 1: bright right half, plus noise.
    Rng rng(10);
    std::vector<PixelTensor> data;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        PixelTensor t = random_tensor(8, rng, 0.3);
        const int label = i % 2;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < 8; ++y)
                for (std::size_t x = 0; x < 8; ++x)
                    if ((x < 4) == (label == 0)) t.values[(c * 8 + y) * 8 + x] += 1.0f;
        data.push_back(std::move(t));
        labels.push_back(label);
    }
    auto net = init_network<float>(NetworkSpec::parse("conv(4,3,1,1)-relu-maxpool(2,2)-flatten-dense(16)-relu-head(2)"), 8, 1);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < 50; ++epoch) {
        shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += 8) {
            std::vector<const PixelTensor*> batch;
            std::vector<int> y;
            for (std::size_t k = start; k < start + 8; ++k) {
                batch.push_back(&data[order[k]]);
                y.push_back(labels[order[k]]);
            }
            const auto res = loss_and_backward(net, std::span<const PixelTensor* const>(batch), std::span<const int>(y));
            sgd_step(net, res.grads, {0.05, 0.9, 0.0});
        }
    }
    const auto pred = argmax_rows(forward(net, std::span<const PixelTensor>(data)).logits);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) correct += pred[i] == labels[i];
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(data.size()), 0.99);
}

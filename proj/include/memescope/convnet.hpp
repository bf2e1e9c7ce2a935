#ifndef MEMESCOPE_CONVNET_HPP_
#define MEMESCOPE_CONVNET_HPP_

#include "memescope/manifest.hpp"
#include "memescope/matrix.hpp"

#include <charconv>

namespace memescope::convnet {

enum class LayerKind { conv, relu, maxpool, flatten, dense, head };

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::size_t out = 0;  // conv channels, dense features, head classes
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;

    static LayerSpec conv(std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding)
    {
        return {LayerKind::conv, out, kernel, stride, padding};
    }
    static LayerSpec relu() { return {LayerKind::relu}; }
    static LayerSpec maxpool(std::size_t kernel, std::size_t stride) { return {LayerKind::maxpool, 0, kernel, stride, 0}; }
    static LayerSpec flatten() { return {LayerKind::flatten}; }
    static LayerSpec dense(std::size_t out) { return {LayerKind::dense, out}; }
    static LayerSpec head(std::size_t classes) { return {LayerKind::head, classes}; }

    bool has_params() const { return kind == LayerKind::conv || kind == LayerKind::dense || kind == LayerKind::head; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline std::string to_string(const LayerSpec& l)
{
    auto n = [](std::size_t v) { return std::to_string(v); };
    switch (l.kind) {
        case LayerKind::conv: return "conv(" + n(l.out) + "," + n(l.kernel) + "," + n(l.stride) + "," + n(l.padding) + ")";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool(" + n(l.kernel) + "," + n(l.stride) + ")";
        case LayerKind::flatten: return "flatten";
        case LayerKind::dense: return "dense(" + n(l.out) + ")";
        case LayerKind::head: return "head(" + n(l.out) + ")";
    }
    return "?";
}

struct NetworkSpec {
    std::vector<LayerSpec> layers;

    // conv(8,3,1,1)-relu-maxpool(2,2)-conv(16,3,1,1)-relu-maxpool(2,2)-flatten-dense(256)-relu-head(k)
    static NetworkSpec desk_default(std::size_t num_classes)
    {
        return {{LayerSpec::conv(8, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
                 LayerSpec::conv(16, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2), LayerSpec::flatten(),
                 LayerSpec::dense(256), LayerSpec::relu(), LayerSpec::head(num_classes)}};
    }

    std::string to_string() const
    {
        std::string out;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (i) out += '-';
            out += convnet::to_string(layers[i]);
        }
        return out;
    }

    // Inverse of to_string.
    static NetworkSpec parse(std::string_view text)
    {
        NetworkSpec spec;
        std::size_t pos = 0;
        while (pos < text.size()) {
            // Split on '-' outside parentheses.
            std::size_t end = pos;
            int depth = 0;
            while (end < text.size() && (text[end] != '-' || depth > 0)) {
                depth += text[end] == '(' ? 1 : text[end] == ')' ? -1 : 0;
                ++end;
            }
            spec.layers.push_back(parse_layer(text.substr(pos, end - pos)));
            pos = end + 1;
        }
        return spec;
    }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

  private:
    static LayerSpec parse_layer(std::string_view tok)
    {
        const auto open = tok.find('(');
        const std::string_view name = tok.substr(0, open);
        std::vector<std::size_t> args;
        if (open != std::string_view::npos) {
            if (tok.back() != ')') throw InputError("network spec: unbalanced parentheses in '" + std::string(tok) + "'");
            std::string_view inner = tok.substr(open + 1, tok.size() - open - 2);
            while (!inner.empty()) {
                const auto comma = inner.find(',');
                const std::string_view num = inner.substr(0, comma);
                std::size_t v = 0;
                const auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
                if (ec != std::errc() || p != num.data() + num.size())
                    throw InputError("network spec: bad number '" + std::string(num) + "'");
                args.push_back(v);
                inner = comma == std::string_view::npos ? std::string_view{} : inner.substr(comma + 1);
            }
        }
        auto want = [&](std::size_t n) {
            if (args.size() != n)
                throw InputError("network spec: '" + std::string(name) + "' takes " + std::to_string(n) + " arguments");
        };
        if (name == "conv") { want(4); return LayerSpec::conv(args[0], args[1], args[2], args[3]); }
        if (name == "relu") { want(0); return LayerSpec::relu(); }
        if (name == "maxpool") { want(2); return LayerSpec::maxpool(args[0], args[1]); }
        if (name == "flatten") { want(0); return LayerSpec::flatten(); }
        if (name == "dense") { want(1); return LayerSpec::dense(args[0]); }
        if (name == "head") { want(1); return LayerSpec::head(args[0]); }
        throw InputError("network spec: unknown layer '" + std::string(name) + "'");
    }
};

struct Shape {
    std::size_t c = 0, h = 0, w = 0;
    std::size_t size() const { return c * h * w; }
    friend bool operator==(const Shape&, const Shape&) = default;
};

// shapes[0] is the input, shapes[i + 1] the output of layer i.
inline std::vector<Shape> infer_shapes(const NetworkSpec& spec, std::size_t input_side)
{
    if (spec.layers.empty()) throw InputError("network spec: no layers");
    std::vector<Shape> shapes{{3, input_side, input_side}};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const Shape in = shapes.back();
        const std::string where = "network spec layer " + std::to_string(i) + " (" + to_string(l) + "): ";
        Shape out = in;
        switch (l.kind) {
            case LayerKind::conv: {
                if (l.out == 0 || l.kernel == 0 || l.stride == 0) throw InputError(where + "zero-sized parameter");
                if (in.h + 2 * l.padding < l.kernel || in.w + 2 * l.padding < l.kernel)
                    throw InputError(where + "kernel larger than padded input " + std::to_string(in.h) + "x" + std::to_string(in.w));
                out = {l.out, (in.h + 2 * l.padding - l.kernel) / l.stride + 1, (in.w + 2 * l.padding - l.kernel) / l.stride + 1};
                break;
            }
            case LayerKind::maxpool: {
                if (l.kernel == 0 || l.stride == 0) throw InputError(where + "zero-sized parameter");
                if (in.h < l.kernel || in.w < l.kernel) throw InputError(where + "window larger than input");
                out = {in.c, (in.h - l.kernel) / l.stride + 1, (in.w - l.kernel) / l.stride + 1};
                break;
            }
            case LayerKind::relu: break;
            case LayerKind::flatten: out = {in.size(), 1, 1}; break;
            case LayerKind::dense:
            case LayerKind::head:
                if (in.h != 1 || in.w != 1) throw InputError(where + "expects a flattened input");
                if (l.out == 0) throw InputError(where + "zero output width");
                if (l.kind == LayerKind::head && l.out < 2) throw InputError(where + "head needs at least 2 classes");
                out = {l.out, 1, 1};
                break;
        }
        if (l.kind == LayerKind::head && i + 1 != spec.layers.size())
            throw InputError(where + "the head must be the last layer");
        shapes.push_back(out);
    }
    if (spec.layers.back().kind != LayerKind::head) throw InputError("network spec: last layer must be a head");
    return shapes;
}

template <typename T>
struct LayerParams {
    std::vector<T> weight, bias;
    std::vector<T> weight_velocity, bias_velocity;
};

template <typename T>
struct Network {
    NetworkSpec spec;
    std::size_t input_side = 0;
    std::vector<Shape> shapes;
    std::vector<LayerParams<T>> layers;

    std::size_t head_index() const { return spec.layers.size() - 1; }
    std::size_t num_classes() const { return spec.layers.back().out; }
    // Feature tap: the input of the head.
    std::size_t feature_dim() const { return shapes[head_index()].size(); }
    std::size_t fan_in(std::size_t i) const
    {
        const LayerSpec& l = spec.layers[i];
        return l.kind == LayerKind::conv ? shapes[i].c * l.kernel * l.kernel : shapes[i].size();
    }
};

template <typename T>
struct Gradients {
    std::vector<std::vector<T>> weight, bias;

    static Gradients zeros_like(const Network<T>& net)
    {
        Gradients g;
        for (const auto& l : net.layers) {
            g.weight.emplace_back(l.weight.size(), T(0));
            g.bias.emplace_back(l.bias.size(), T(0));
        }
        return g;
    }
};

namespace detail {

template <typename T>
void init_layer(Network<T>& net, std::size_t i, Rng& rng)
{
    const LayerSpec& l = net.spec.layers[i];
    auto& p = net.layers[i];
    p = {};
    if (!l.has_params()) return;
    const std::size_t fan_in = net.fan_in(i);
    const std::size_t n_out = net.shapes[i + 1].c;
    // He-uniform: std = sqrt(2 / fan_in).
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    p.weight.resize(n_out * fan_in);
    for (auto& w : p.weight) w = static_cast<T>(uniform(rng, -bound, bound));
    p.bias.assign(n_out, T(0));
    p.weight_velocity.assign(p.weight.size(), T(0));
    p.bias_velocity.assign(p.bias.size(), T(0));
}

}  // namespace detail

template <typename T>
Network<T> init_network(const NetworkSpec& spec, std::size_t input_side, std::uint64_t seed)
{
    Network<T> net{spec, input_side, infer_shapes(spec, input_side), {}};
    net.layers.resize(spec.layers.size());
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        Rng rng(derive_seed(seed, i));
        detail::init_layer(net, i, rng);
    }
    return net;
}

// Replaces the head with a freshly initialised num_classes-way head. Every
// other layer, including its momentum state, is left untouched.
template <typename T>
void reinit_head(Network<T>& net, std::size_t num_classes, std::uint64_t seed)
{
    if (num_classes < 2) throw InputError("reinit_head: need at least 2 classes");
    const std::size_t h = net.head_index();
    net.spec.layers[h].out = num_classes;
    net.shapes[h + 1] = {num_classes, 1, 1};
    Rng rng(derive_seed(derive_seed(seed, "head"), num_classes));
    detail::init_layer(net, h, rng);
}

// Per-sample activations and the bookkeeping backward needs.
template <typename T>
struct Workspace {
    std::vector<std::vector<T>> acts;            // acts[i] is the input of layer i
    std::vector<std::vector<T>> cols;            // im2col buffers for conv layers
    std::vector<std::vector<std::uint32_t>> argmax;  // maxpool winners
    std::vector<T> grad_a, grad_b, dcols;

    explicit Workspace(const Network<T>& net)
        : acts(net.shapes.size()), cols(net.layers.size()), argmax(net.layers.size())
    {
        for (std::size_t i = 0; i < net.shapes.size(); ++i) acts[i].resize(net.shapes[i].size());
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            const LayerSpec& l = net.spec.layers[i];
            if (l.kind == LayerKind::conv) cols[i].resize(net.fan_in(i) * net.shapes[i + 1].h * net.shapes[i + 1].w);
            if (l.kind == LayerKind::maxpool) argmax[i].resize(net.shapes[i + 1].size());
        }
    }
};

namespace detail {

// Every product below runs in one fixed summation order, so results do not
// depend on how buffers happen to be aligned (vectorised library kernels pick
// their code path by address, which moves the low bits between runs).
template <typename T>
void axpy(T a, const T* x, T* y, std::size_t n)
{
    for (std::size_t j = 0; j < n; ++j) y[j] += a * x[j];
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b)
{
    std::array<T, 8> acc{};
    const std::size_t n = a.size(), blocked = n - n % 8;
    for (std::size_t j = 0; j < blocked; j += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
    T tail = 0;
    for (std::size_t j = blocked; j < n; ++j) tail += a[j] * b[j];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

inline void im2col_index(std::size_t r, std::size_t k, std::size_t& c, std::size_t& ky, std::size_t& kx)
{
    kx = r % k;
    ky = (r / k) % k;
    c = r / (k * k);
}

template <typename T>
void im2col(std::span<const T> in, const Shape& is, const LayerSpec& l, const Shape& os, std::span<T> cols)
{
    const std::size_t k = l.kernel, rows = is.c * k * k, p = os.h * os.w;
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t c, ky, kx;
        im2col_index(r, k, c, ky, kx);
        T* dst = cols.data() + r * p;
        for (std::size_t oy = 0; oy < os.h; ++oy) {
            const long iy = static_cast<long>(oy * l.stride + ky) - static_cast<long>(l.padding);
            for (std::size_t ox = 0; ox < os.w; ++ox) {
                const long ix = static_cast<long>(ox * l.stride + kx) - static_cast<long>(l.padding);
                const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(is.h) && ix < static_cast<long>(is.w);
                dst[oy * os.w + ox] =
                    inside ? in[(c * is.h + static_cast<std::size_t>(iy)) * is.w + static_cast<std::size_t>(ix)] : T(0);
            }
        }
    }
}

template <typename T>
void col2im(std::span<const T> cols, const Shape& is, const LayerSpec& l, const Shape& os, std::span<T> out)
{
    std::fill(out.begin(), out.end(), T(0));
    const std::size_t k = l.kernel, rows = is.c * k * k, p = os.h * os.w;
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t c, ky, kx;
        im2col_index(r, k, c, ky, kx);
        const T* src = cols.data() + r * p;
        for (std::size_t oy = 0; oy < os.h; ++oy) {
            const long iy = static_cast<long>(oy * l.stride + ky) - static_cast<long>(l.padding);
            if (iy < 0 || iy >= static_cast<long>(is.h)) continue;
            for (std::size_t ox = 0; ox < os.w; ++ox) {
                const long ix = static_cast<long>(ox * l.stride + kx) - static_cast<long>(l.padding);
                if (ix < 0 || ix >= static_cast<long>(is.w)) continue;
                out[(c * is.h + static_cast<std::size_t>(iy)) * is.w + static_cast<std::size_t>(ix)] += src[oy * os.w + ox];
            }
        }
    }
}

}  // namespace detail

// Runs one sample through the network; ws.acts.back() holds the logits and
// ws.acts[head_index()] the tapped features.
template <typename T>
void forward_sample(const Network<T>& net, const PixelTensor& input, Workspace<T>& ws)
{
    using namespace detail;
    if (input.channels != net.shapes[0].c || input.height != net.shapes[0].h || input.width != net.shapes[0].w)
        throw InputError("forward: input " + std::to_string(input.channels) + "x" + std::to_string(input.height) + "x" +
                         std::to_string(input.width) + " does not match network input 3x" +
                         std::to_string(net.input_side) + "x" + std::to_string(net.input_side));
    std::transform(input.values.begin(), input.values.end(), ws.acts[0].begin(), [](float v) { return static_cast<T>(v); });
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const LayerSpec& l = net.spec.layers[i];
        const Shape& is = net.shapes[i];
        const Shape& os = net.shapes[i + 1];
        const auto& in = ws.acts[i];
        auto& out = ws.acts[i + 1];
        const auto& p = net.layers[i];
        switch (l.kind) {
            case LayerKind::conv: {
                const std::size_t rows = net.fan_in(i), pix = os.h * os.w;
                im2col<T>(in, is, l, os, ws.cols[i]);
                const T* cols = ws.cols[i].data();
                for (std::size_t c = 0; c < os.c; ++c) {
                    T* o = out.data() + c * pix;
                    std::fill(o, o + pix, p.bias[c]);
                    for (std::size_t r = 0; r < rows; ++r) axpy(p.weight[c * rows + r], cols + r * pix, o, pix);
                }
                break;
            }
            case LayerKind::relu:
                std::transform(in.begin(), in.end(), out.begin(), [](T v) { return v > T(0) ? v : T(0); });
                break;
            case LayerKind::maxpool: {
                auto& arg = ws.argmax[i];
                for (std::size_t c = 0; c < os.c; ++c)
                    for (std::size_t oy = 0; oy < os.h; ++oy)
                        for (std::size_t ox = 0; ox < os.w; ++ox) {
                            std::size_t best = (c * is.h + oy * l.stride) * is.w + ox * l.stride;
                            for (std::size_t ky = 0; ky < l.kernel; ++ky)
                                for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                                    const std::size_t idx = (c * is.h + oy * l.stride + ky) * is.w + ox * l.stride + kx;
                                    if (in[idx] > in[best]) best = idx;
                                }
                            const std::size_t o_idx = (c * os.h + oy) * os.w + ox;
                            out[o_idx] = in[best];
                            arg[o_idx] = static_cast<std::uint32_t>(best);
                        }
                break;
            }
            case LayerKind::flatten: std::copy(in.begin(), in.end(), out.begin()); break;
            case LayerKind::dense:
            case LayerKind::head: {
                const std::size_t n_in = is.size();
                for (std::size_t o = 0; o < os.c; ++o)
                    out[o] = dot(std::span<const T>(p.weight).subspan(o * n_in, n_in), std::span<const T>(in)) + p.bias[o];
                break;
            }
        }
    }
}

// Accumulates parameter gradients for one sample given dL/dlogits.
template <typename T>
void backward_sample(const Network<T>& net, Workspace<T>& ws, std::span<const T> dlogits, Gradients<T>& grads)
{
    using namespace detail;
    ws.grad_a.assign(dlogits.begin(), dlogits.end());
    for (std::size_t i = net.layers.size(); i-- > 0;) {
        const LayerSpec& l = net.spec.layers[i];
        const Shape& is = net.shapes[i];
        const Shape& os = net.shapes[i + 1];
        const auto& in = ws.acts[i];
        const auto& p = net.layers[i];
        const bool need_input_grad = i > 0;
        auto& dout = ws.grad_a;
        auto& din = ws.grad_b;
        din.assign(is.size(), T(0));
        switch (l.kind) {
            case LayerKind::conv: {
                const std::size_t rows = net.fan_in(i), pix = os.h * os.w;
                const std::span<const T> cols(ws.cols[i].data(), rows * pix);
                for (std::size_t c = 0; c < os.c; ++c) {
                    const std::span<const T> g(dout.data() + c * pix, pix);
                    for (std::size_t r = 0; r < rows; ++r) grads.weight[i][c * rows + r] += dot(g, cols.subspan(r * pix, pix));
                    T sum = 0;
                    for (T v : g) sum += v;
                    grads.bias[i][c] += sum;
                }
                if (need_input_grad) {
                    auto& dcols = ws.dcols;
                    dcols.assign(rows * pix, T(0));
                    for (std::size_t c = 0; c < os.c; ++c)
                        for (std::size_t r = 0; r < rows; ++r)
                            axpy(p.weight[c * rows + r], dout.data() + c * pix, dcols.data() + r * pix, pix);
                    col2im<T>(std::span<const T>(dcols.data(), rows * pix), is, l, os, din);
                }
                break;
            }
            case LayerKind::relu:
                for (std::size_t j = 0; j < in.size(); ++j) din[j] = in[j] > T(0) ? dout[j] : T(0);
                break;
            case LayerKind::maxpool: {
                const auto& arg = ws.argmax[i];
                for (std::size_t j = 0; j < arg.size(); ++j) din[arg[j]] += dout[j];
                break;
            }
            case LayerKind::flatten: std::copy(dout.begin(), dout.end(), din.begin()); break;
            case LayerKind::dense:
            case LayerKind::head: {
                const std::size_t n_in = is.size();
                for (std::size_t o = 0; o < os.c; ++o) {
                    const T g = dout[o];
                    T* dw = grads.weight[i].data() + o * n_in;
                    const T* w = p.weight.data() + o * n_in;
                    for (std::size_t j = 0; j < n_in; ++j) dw[j] += g * in[j];
                    grads.bias[i][o] += g;
                    if (need_input_grad)
                        for (std::size_t j = 0; j < n_in; ++j) din[j] += g * w[j];
                }
                break;
            }
        }
        std::swap(ws.grad_a, ws.grad_b);
    }
}

template <typename T>
struct ForwardResult {
    Matrix<T> logits;    // B x num_classes
    Matrix<T> features;  // B x feature_dim
};

template <typename T>
ForwardResult<T> forward(const Network<T>& net, std::span<const PixelTensor* const> batch)
{
    if (batch.empty()) throw InputError("forward: empty batch");
    ForwardResult<T> out{Matrix<T>(batch.size(), net.num_classes()), Matrix<T>(batch.size(), net.feature_dim())};
    Workspace<T> ws(net);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        forward_sample(net, *batch[b], ws);
        std::copy(ws.acts.back().begin(), ws.acts.back().end(), out.logits.row(b).begin());
        const auto& f = ws.acts[net.head_index()];
        std::copy(f.begin(), f.end(), out.features.row(b).begin());
    }
    return out;
}

template <typename T>
ForwardResult<T> forward(const Network<T>& net, std::span<const PixelTensor> batch)
{
    std::vector<const PixelTensor*> ptrs;
    for (const auto& t : batch) ptrs.push_back(&t);
    return forward(net, std::span<const PixelTensor* const>(ptrs));
}

// Numerically stable softmax of one row.
template <typename T>
std::vector<T> softmax(std::span<const T> logits)
{
    const T peak = *std::max_element(logits.begin(), logits.end());
    std::vector<T> p(logits.size());
    T sum = 0;
    for (std::size_t c = 0; c < logits.size(); ++c) sum += (p[c] = std::exp(logits[c] - peak));
    for (auto& v : p) v /= sum;
    return p;
}

template <typename T>
struct LossResult {
    T loss = 0;  // mean softmax cross-entropy
    Gradients<T> grads;
};

template <typename T>
LossResult<T> loss_and_backward(const Network<T>& net, std::span<const PixelTensor* const> batch,
                                std::span<const int> labels)
{
    if (batch.empty()) throw InputError("loss_and_backward: empty batch");
    if (labels.size() != batch.size()) throw InputError("loss_and_backward: label count does not match batch");
    const std::size_t classes = net.num_classes();
    for (std::size_t b = 0; b < labels.size(); ++b)
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
            throw InputError("loss_and_backward: label " + std::to_string(labels[b]) + " at position " +
                             std::to_string(b) + " outside [0, " + std::to_string(classes) + ")");
    LossResult<T> out{T(0), Gradients<T>::zeros_like(net)};
    Workspace<T> ws(net);
    const T inv_b = T(1) / static_cast<T>(batch.size());
    std::vector<T> dlogits(classes);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        forward_sample(net, *batch[b], ws);
        const auto& logits = ws.acts.back();
        const T peak = *std::max_element(logits.begin(), logits.end());
        T sum = 0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(logits[c] - peak);
        const T log_z = peak + std::log(sum);
        const auto y = static_cast<std::size_t>(labels[b]);
        out.loss += (log_z - logits[y]) * inv_b;
        for (std::size_t c = 0; c < classes; ++c)
            dlogits[c] = (std::exp(logits[c] - log_z) - (c == y ? T(1) : T(0))) * inv_b;
        backward_sample(net, ws, std::span<const T>(dlogits), out.grads);
    }
    return out;
}

template <typename T>
LossResult<T> loss_and_backward(const Network<T>& net, std::span<const PixelTensor> batch, std::span<const int> labels)
{
    std::vector<const PixelTensor*> ptrs;
    for (const auto& t : batch) ptrs.push_back(&t);
    return loss_and_backward(net, std::span<const PixelTensor* const>(ptrs), labels);
}

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

// v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v
template <typename T>
void sgd_step(Network<T>& net, const Gradients<T>& grads, const SgdConfig& cfg)
{
    if (!(cfg.lr > 0)) throw InputError("sgd_step: lr must be > 0");
    if (!(cfg.momentum >= 0 && cfg.momentum < 1)) throw InputError("sgd_step: momentum must be in [0,1)");
    if (!(cfg.weight_decay >= 0)) throw InputError("sgd_step: weight_decay must be >= 0");
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        auto finite = [](const std::vector<T>& v) {
            return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
        };
        if (!finite(grads.weight[i]) || !finite(grads.bias[i]))
            throw NumericError("sgd_step: non-finite gradient in layer " + std::to_string(i) + " (" +
                               to_string(net.spec.layers[i]) + ")");
    }
    const T lr = static_cast<T>(cfg.lr), mom = static_cast<T>(cfg.momentum), wd = static_cast<T>(cfg.weight_decay);
    auto update = [&](std::vector<T>& w, std::vector<T>& v, const std::vector<T>& g) {
        for (std::size_t j = 0; j < w.size(); ++j) {
            v[j] = mom * v[j] + g[j] + wd * w[j];
            w[j] -= lr * v[j];
        }
    };
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        auto& p = net.layers[i];
        update(p.weight, p.weight_velocity, grads.weight[i]);
        update(p.bias, p.bias_velocity, grads.bias[i]);
    }
}

inline PixelTensor flip_horizontal(const PixelTensor& t)
{
    PixelTensor out = t;
    for (std::size_t c = 0; c < t.channels; ++c)
        for (std::size_t y = 0; y < t.height; ++y)
            for (std::size_t x = 0; x < t.width; ++x)
                out.values[(c * t.height + y) * t.width + x] = t.values[(c * t.height + y) * t.width + (t.width - 1 - x)];
    return out;
}

// One minibatch SGD pass over `order` (indices into tensors/labels). Returns
// the sample-weighted mean loss. With lr == 0 the loss is evaluated but the
// parameters are left alone. flip mirrors each sample with probability 1/2.
template <typename T>
double sgd_pass(Network<T>& net, std::span<const PixelTensor> tensors, std::span<const int> labels,
                std::span<const std::size_t> order, std::size_t batch_size, const SgdConfig& cfg, bool flip = false,
                std::uint64_t flip_seed = 0)
{
    if (batch_size == 0) throw InputError("sgd_pass: batch_size must be >= 1");
    if (labels.size() != tensors.size()) throw InputError("sgd_pass: label count does not match tensors");
    Rng flip_rng(flip_seed);
    std::vector<PixelTensor> flipped;
    std::vector<const PixelTensor*> batch;
    std::vector<int> batch_labels;
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        batch.clear();
        batch_labels.clear();
        flipped.clear();
        flipped.reserve(end - start);
        for (std::size_t j = start; j < end; ++j) {
            const std::size_t i = order[j];
            if (i >= tensors.size()) throw InputError("sgd_pass: index out of range");
            if (flip && uniform01(flip_rng) < 0.5) {
                flipped.push_back(flip_horizontal(tensors[i]));
                batch.push_back(&flipped.back());
            } else {
                batch.push_back(&tensors[i]);
            }
            batch_labels.push_back(labels[i]);
        }
        const auto res = loss_and_backward(net, std::span<const PixelTensor* const>(batch),
                                           std::span<const int>(batch_labels));
        if (!std::isfinite(res.loss)) throw NumericError("sgd_pass: non-finite loss");
        total += static_cast<double>(res.loss) * static_cast<double>(end - start);
        if (cfg.lr > 0) sgd_step(net, res.grads, cfg);
    }
    return order.empty() ? 0.0 : total / static_cast<double>(order.size());
}

// Tapped features for every tensor, row i for tensors[i]. Rows are computed
// independently, so the result does not depend on batch_size.
template <typename T>
MatrixD extract_features(const Network<T>& net, std::span<const PixelTensor> tensors, std::size_t batch_size = 32)
{
    if (batch_size == 0) throw InputError("extract_features: batch_size must be >= 1");
    MatrixD out(tensors.size(), net.feature_dim());
    for (std::size_t start = 0; start < tensors.size(); start += batch_size) {
        const std::size_t end = std::min(tensors.size(), start + batch_size);
        const auto res = forward(net, tensors.subspan(start, end - start));
        for (std::size_t b = 0; b < end - start; ++b)
            for (std::size_t j = 0; j < net.feature_dim(); ++j) out(start + b, j) = static_cast<double>(res.features(b, j));
    }
    return out;
}

struct ExtractedFeatures {
    MatrixD features;
    Manifest manifest;  // rows of features align with these records
    std::vector<std::string> skipped_ids;
};

template <typename T>
ExtractedFeatures extract_features(const Network<T>& net, const Manifest& manifest, std::size_t batch_size = 32,
                                   const Normalization& norm = {})
{
    LoadedImages loaded = load_images(manifest, net.input_side, norm);
    ExtractedFeatures out;
    out.features = loaded.tensors.empty() ? MatrixD(0, net.feature_dim())
                                          : extract_features(net, std::span<const PixelTensor>(loaded.tensors), batch_size);
    out.manifest = manifest.subset(loaded.kept);
    out.skipped_ids = std::move(loaded.skipped_ids);
    return out;
}

template <typename T>
std::vector<int> argmax_rows(const Matrix<T>& m)
{
    std::vector<int> out(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    }
    return out;
}

// CKPT: "CKPT", u32 spec length, spec JSON, then per parameterised layer in
// order the weight and bias tensors as little-endian f32.
template <typename T>
std::string encode_checkpoint(const Network<T>& net)
{
    nlohmann::ordered_json spec;
    spec["input_side"] = net.input_side;
    spec["layers"] = net.spec.to_string();
    const std::string text = spec.dump();
    std::string out = "CKPT";
    memescope::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    for (const auto& l : net.layers) {
        for (T v : l.weight) memescope::detail::put_le<float>(out, static_cast<float>(v));
        for (T v : l.bias) memescope::detail::put_le<float>(out, static_cast<float>(v));
    }
    return out;
}

template <typename T>
Network<T> decode_checkpoint(std::string_view bytes)
{
    if (bytes.substr(0, 4) != "CKPT") throw InputError("checkpoint: bad magic");
    std::size_t pos = 4;
    const auto len = memescope::detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw InputError("checkpoint: truncated spec");
    nlohmann::json spec;
    try {
        spec = nlohmann::json::parse(bytes.substr(pos, len));
        pos += len;
        Network<T> net = init_network<T>(NetworkSpec::parse(spec.at("layers").get<std::string>()),
                                         spec.at("input_side").get<std::size_t>(), 0);
        for (auto& l : net.layers) {
            for (auto& v : l.weight) v = static_cast<T>(memescope::detail::get_le<float>(bytes, pos));
            for (auto& v : l.bias) v = static_cast<T>(memescope::detail::get_le<float>(bytes, pos));
            std::fill(l.weight_velocity.begin(), l.weight_velocity.end(), T(0));
            std::fill(l.bias_velocity.begin(), l.bias_velocity.end(), T(0));
        }
        if (pos != bytes.size()) throw InputError("checkpoint: trailing bytes");
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("checkpoint: bad spec header: ") + e.what());
    }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net)
{
    write_file_atomic(path, encode_checkpoint(net));
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path)
{
    return decode_checkpoint<T>(read_file(path));
}

}  // namespace memescope::convnet

#endif

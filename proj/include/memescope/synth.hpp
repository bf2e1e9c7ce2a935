#ifndef MEMESCOPE_SYNTH_HPP_
#define MEMESCOPE_SYNTH_HPP_

#include "memescope/manifest.hpp"

#include <iomanip>

namespace memescope::synth {

enum class Motif { caption, grid, scene };

inline const char* to_string(Motif m)
{
    switch (m) {
        case Motif::caption: return "caption";
        case Motif::grid: return "grid";
        case Motif::scene: return "scene";
    }
    return "?";
}

struct CorpusSpec {
    std::size_t coordinated = 0;  // IRA-tagged memes
    std::size_t authentic = 0;    // REDDIT-tagged memes
    std::size_t negative = 0;     // NEGATIVE text-scene images
    // IRA-tagged images drawn with the scene motif: the non-meme share of a
    // mixed coordinated corpus, which the filter should reject.
    std::size_t coordinated_nonmeme = 0;
    // Fraction of each meme source drawn with the other source's motif. Zero
    // gives a clean planted partition; positive values make themes shared.
    double cross_motif = 0.0;
    std::size_t min_side = 80;
    std::size_t max_side = 112;
    double mean_jitter = 8.0;  // per-channel mean target = 128 +/- jitter
};

struct Corpus {
    Manifest manifest;
    std::vector<Motif> motifs;  // aligned with manifest.records
};

namespace detail {

using Color = std::array<std::uint8_t, 3>;

inline std::uint8_t clamp_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// A "word": a run of 3x5 pseudo-glyphs, each a random bit pattern.
inline void draw_word(Image& img, long x, long y, std::size_t letters, long scale, Color color, Rng& rng)
{
    for (std::size_t l = 0; l < letters; ++l) {
        const std::uint64_t bits = rng();
        for (long gy = 0; gy < 5; ++gy)
            for (long gx = 0; gx < 3; ++gx)
                if ((bits >> (gy * 3 + gx)) & 1U)
                    img.fill_rect(x + gx * scale, y + gy * scale, scale, scale, color);
        x += 4 * scale;
    }
}

inline void draw_text_line(Image& img, long x0, long x1, long y, long scale, Color color, Rng& rng)
{
    long x = x0;
    while (x < x1) {
        const std::size_t letters = 2 + uniform_index(rng, 4);
        const long width = static_cast<long>(letters) * 4 * scale;
        if (x + width > x1) break;
        draw_word(img, x, y, letters, scale, color, rng);
        x += width + 3 * scale;
    }
}

// Smooth random field plus sensor-like noise: the "photograph" behind a caption meme.
inline void photo_background(Image& img, Rng& rng)
{
    struct Blob {
        double cx, cy, r;
        std::array<double, 3> color;
    };
    std::array<double, 3> base{};
    for (auto& b : base) b = uniform(rng, 40, 200);
    std::vector<Blob> blobs(4);
    for (auto& b : blobs) {
        b.cx = uniform(rng, 0, static_cast<double>(img.width));
        b.cy = uniform(rng, 0, static_cast<double>(img.height));
        b.r = uniform(rng, 0.15, 0.45) * static_cast<double>(img.width);
        for (auto& c : b.color) c = uniform(rng, -90, 90);
    }
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            std::array<double, 3> v = base;
            for (const auto& b : blobs) {
                const double dx = static_cast<double>(x) - b.cx, dy = static_cast<double>(y) - b.cy;
                const double w = std::exp(-(dx * dx + dy * dy) / (2 * b.r * b.r));
                for (std::size_t c = 0; c < 3; ++c) v[c] += w * b.color[c];
            }
            const double grain = 18.0 * normal(rng);
            for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = clamp_u8(v[c] + grain + 6.0 * normal(rng));
        }
}

inline void draw_caption(Image& img, Rng& rng)
{
    photo_background(img, rng);
    const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
    const long bar = std::max(8L, h * 18 / 100);
    const Color paper{clamp_u8(uniform(rng, 235, 255)), clamp_u8(uniform(rng, 235, 255)), clamp_u8(uniform(rng, 235, 255))};
    const Color ink{clamp_u8(uniform(rng, 0, 30)), clamp_u8(uniform(rng, 0, 30)), clamp_u8(uniform(rng, 0, 30))};
    img.fill_rect(0, 0, w, bar, paper);
    img.fill_rect(0, h - bar, w, bar, paper);
    const long scale = 1;
    draw_text_line(img, 3 + static_cast<long>(uniform_index(rng, 6)), w - 3, (bar - 5) / 2, scale, ink, rng);
    draw_text_line(img, 3 + static_cast<long>(uniform_index(rng, 6)), w - 3, h - bar + (bar - 5) / 2, scale, ink, rng);
}

// Saturated "cartoon" palette used only by the grid motif.
inline constexpr std::array<Color, 8> cartoon_palette{{
    {250, 220, 40}, {40, 200, 230}, {230, 60, 170}, {250, 140, 30},
    {60, 210, 90}, {120, 80, 230}, {240, 70, 60}, {250, 250, 250},
}};

inline void draw_grid(Image& img, Rng& rng)
{
    const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
    const Color gutter{20, 20, 20};
    img.fill_rect(0, 0, w, h, gutter);
    const long rows = 2, cols = 2, g = 3;
    const long pw = (w - g * (cols + 1)) / cols, ph = (h - g * (rows + 1)) / rows;
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) {
            const long x0 = g + c * (pw + g), y0 = g + r * (ph + g);
            const Color fill = cartoon_palette[uniform_index(rng, cartoon_palette.size())];
            img.fill_rect(x0, y0, pw, ph, fill);
            Color shape = cartoon_palette[uniform_index(rng, cartoon_palette.size())];
            if (shape == fill) shape = gutter;
            const long sw = pw / 2 + static_cast<long>(uniform_index(rng, static_cast<std::size_t>(pw / 4 + 1)));
            const long sh = ph / 2 + static_cast<long>(uniform_index(rng, static_cast<std::size_t>(ph / 4 + 1)));
            const long sx = x0 + static_cast<long>(uniform_index(rng, static_cast<std::size_t>(pw - sw + 1)));
            const long sy = y0 + static_cast<long>(uniform_index(rng, static_cast<std::size_t>(ph - sh + 1)));
            if (uniform_index(rng, 2) == 0) {
                img.fill_rect(sx, sy, sw, sh, shape);
            } else {
                const double cx = sx + sw / 2.0, cy = sy + sh / 2.0, rad = std::min(sw, sh) / 2.0;
                for (long y = sy; y < sy + sh; ++y)
                    for (long x = sx; x < sx + sw; ++x)
                        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad)
                            img.fill_rect(x, y, 1, 1, shape);
            }
        }
    for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = clamp_u8(img.rgb[i] + 3.0 * normal(rng));
}

// Oriented grating texture with small scattered words and no caption bars.
inline void draw_scene(Image& img, Rng& rng)
{
    const double angle = uniform(rng, 0, 3.14159265358979);
    const double freq = uniform(rng, 0.08, 0.25);
    const double phase = uniform(rng, 0, 6.283);
    std::array<double, 3> a{}, b{};
    for (std::size_t c = 0; c < 3; ++c) {
        a[c] = uniform(rng, 70, 150);
        b[c] = uniform(rng, 70, 150);
    }
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const double t = 0.5 + 0.5 * std::sin(freq * (ca * static_cast<double>(x) + sa * static_cast<double>(y)) + phase);
            for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = clamp_u8(a[c] * t + b[c] * (1 - t) + 8.0 * normal(rng));
        }
    const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
    const std::size_t words = 3 + uniform_index(rng, 4);
    for (std::size_t i = 0; i < words; ++i) {
        const Color ink = uniform_index(rng, 2) ? Color{235, 235, 235} : Color{15, 15, 15};
        const std::size_t letters = 2 + uniform_index(rng, 3);
        const long x = static_cast<long>(uniform_index(rng, static_cast<std::size_t>(std::max(1L, w - 20))));
        const long y = static_cast<long>(h / 5 + uniform_index(rng, static_cast<std::size_t>(std::max(1L, 3 * h / 5 - 5))));
        draw_word(img, x, y, letters, 1, ink, rng);
    }
}

// Shift each channel so its mean lands on a target drawn from one shared
// distribution; mean colour then carries no information about the motif.
inline void match_channel_means(Image& img, double jitter, Rng& rng)
{
    const std::size_t n = img.width * img.height;
    for (std::size_t c = 0; c < 3; ++c) {
        const double target = 128.0 + uniform(rng, -jitter, jitter);
        // mean(clamp(x + s)) is monotone in s, so bisect for the shift.
        auto shifted_mean = [&](double s) {
            double sum = 0;
            for (std::size_t i = 0; i < n; ++i) sum += std::clamp(img.rgb[3 * i + c] + s, 0.0, 255.0);
            return sum / static_cast<double>(n);
        };
        double lo = -255, hi = 255;
        for (int it = 0; it < 40; ++it) {
            const double mid = 0.5 * (lo + hi);
            (shifted_mean(mid) < target ? lo : hi) = mid;
        }
        const double shift = 0.5 * (lo + hi);
        for (std::size_t i = 0; i < n; ++i) img.rgb[3 * i + c] = clamp_u8(img.rgb[3 * i + c] + shift);
    }
}

}  // namespace detail

inline Image render(Motif motif, std::uint64_t seed, const CorpusSpec& spec)
{
    Rng rng(seed);
    const std::size_t span = spec.max_side - spec.min_side + 1;
    const std::size_t w = spec.min_side + uniform_index(rng, span);
    const std::size_t h = spec.min_side + uniform_index(rng, span);
    Image img(w, h);
    switch (motif) {
        case Motif::caption: detail::draw_caption(img, rng); break;
        case Motif::grid: detail::draw_grid(img, rng); break;
        case Motif::scene: detail::draw_scene(img, rng); break;
    }
    detail::match_channel_means(img, spec.mean_jitter, rng);
    return img;
}

// Writes <out_dir>/images/<id>.png and <out_dir>/manifest.jsonl. A pure
// function of (spec, seed) down to the bytes on disk.
inline Corpus generate_synthetic_corpus(const CorpusSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir)
{
    if (spec.min_side < 16 || spec.max_side < spec.min_side)
        throw InputError("synthetic corpus: invalid side range");
    if (spec.cross_motif < 0.0 || spec.cross_motif > 1.0)
        throw InputError("synthetic corpus: cross_motif must be in [0,1]");
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw Error("synthetic corpus: cannot create " + (out_dir / "images").string() + ": " + ec.message());

    Corpus corpus;
    corpus.manifest.seed = seed;
    auto emit = [&](const std::string& prefix, Source source, std::size_t count, Motif own, Motif other,
                    double other_fraction) {
        const std::uint64_t group_seed = derive_seed(seed, prefix);
        Rng pick(derive_seed(group_seed, "motif"));
        for (std::size_t i = 0; i < count; ++i) {
            const Motif motif = uniform01(pick) < other_fraction ? other : own;
            std::ostringstream id;
            id << prefix << '-' << std::setw(6) << std::setfill('0') << i;
            const Image img = render(motif, derive_seed(group_seed, i), spec);
            const auto path = out_dir / "images" / (id.str() + ".png");
            write_png(path, img);
            corpus.manifest.records.push_back({id.str(), path, source, img.width, img.height});
            corpus.motifs.push_back(motif);
        }
    };
    emit("ira", Source::IRA, spec.coordinated, Motif::caption, Motif::grid, spec.cross_motif);
    emit("ira-x", Source::IRA, spec.coordinated_nonmeme, Motif::scene, Motif::scene, 0.0);
    emit("reddit", Source::REDDIT, spec.authentic, Motif::grid, Motif::caption, spec.cross_motif);
    emit("neg", Source::NEGATIVE, spec.negative, Motif::scene, Motif::scene, 0.0);
    save_manifest(out_dir / "manifest.jsonl", corpus.manifest);
    return corpus;
}

}  // namespace memescope::synth

#endif

#ifndef MEMESCOPE_IMAGE_HPP_
#define MEMESCOPE_IMAGE_HPP_

#include "memescope/core.hpp"

#include <jpeglib.h>
#include <png.h>

#include <array>
#include <csetjmp>
#include <span>

namespace memescope {

// 8-bit interleaved RGB.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> fill = {0, 0, 0})
        : width(w), height(h), rgb(w * h * 3)
    {
        for (std::size_t i = 0; i < w * h; ++i)
            for (std::size_t c = 0; c < 3; ++c) rgb[3 * i + c] = fill[c];
    }

    std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
    std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }

    void set(std::size_t x, std::size_t y, std::array<std::uint8_t, 3> color)
    {
        for (std::size_t c = 0; c < 3; ++c) at(x, y, c) = color[c];
    }

    // Clipped axis-aligned rectangle fill.
    void fill_rect(long x0, long y0, long w, long h, std::array<std::uint8_t, 3> color)
    {
        const long x1 = std::min<long>(x0 + w, static_cast<long>(width));
        const long y1 = std::min<long>(y0 + h, static_cast<long>(height));
        for (long y = std::max(0L, y0); y < y1; ++y)
            for (long x = std::max(0L, x0); x < x1; ++x)
                set(static_cast<std::size_t>(x), static_cast<std::size_t>(y), color);
    }
};

class DecodeError : public InputError {
  public:
    using InputError::InputError;
};

enum class ImageFormat { png, jpeg, unknown };

inline ImageFormat sniff_format(std::string_view bytes)
{
    if (bytes.size() >= 8 && bytes.substr(0, 8) == std::string_view("\x89PNG\r\n\x1a\n", 8)) return ImageFormat::png;
    if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xFF &&
        static_cast<unsigned char>(bytes[1]) == 0xD8 && static_cast<unsigned char>(bytes[2]) == 0xFF)
        return ImageFormat::jpeg;
    return ImageFormat::unknown;
}

inline const char* content_type(ImageFormat f)
{
    switch (f) {
        case ImageFormat::png: return "image/png";
        case ImageFormat::jpeg: return "image/jpeg";
        default: return "application/octet-stream";
    }
}

inline Image decode_png(std::string_view bytes)
{
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw DecodeError(std::string("png: ") + img.message);
    img.format = PNG_FORMAT_RGB;
    if (img.width == 0 || img.height == 0) {
        png_image_free(&img);
        throw DecodeError("png: zero-dimension image");
    }
    Image out;
    out.width = img.width;
    out.height = img.height;
    out.rgb.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
        const std::string msg = img.message;
        png_image_free(&img);
        throw DecodeError("png: " + msg);
    }
    return out;
}

inline std::string encode_png(const Image& image)
{
    if (image.width == 0 || image.height == 0) throw InputError("png: cannot encode empty image");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.rgb.data(), 0, nullptr))
        throw Error(std::string("png: ") + img.message);
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.rgb.data(), 0, nullptr))
        throw Error(std::string("png: ") + img.message);
    out.resize(size);
    return out;
}

namespace detail {

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo)
{
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

inline void jpeg_silent(j_common_ptr) {}

// Returns false and fills err->message on failure. Only trivially destructible
// locals live in this frame, so longjmp out of libjpeg is safe.
inline bool jpeg_decode_raw(const unsigned char* data, std::size_t size, std::vector<std::uint8_t>& out,
                            std::size_t& width, std::size_t& height, JpegErrorManager* err)
{
    jpeg_decompress_struct cinfo;
    cinfo.err = jpeg_std_error(&err->base);
    err->base.error_exit = jpeg_error_exit;
    err->base.output_message = jpeg_silent;
    if (setjmp(err->jump)) {
        jpeg_destroy_decompress(&cinfo);
        return false;
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, data, static_cast<unsigned long>(size));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    width = cinfo.output_width;
    height = cinfo.output_height;
    out.resize(width * height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = out.data() + static_cast<std::size_t>(cinfo.output_scanline) * width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return true;
}

inline bool jpeg_encode_raw(const Image& image, int quality, unsigned char** buffer, unsigned long* size,
                            JpegErrorManager* err)
{
    jpeg_compress_struct cinfo;
    cinfo.err = jpeg_std_error(&err->base);
    err->base.error_exit = jpeg_error_exit;
    err->base.output_message = jpeg_silent;
    if (setjmp(err->jump)) {
        jpeg_destroy_compress(&cinfo);
        return false;
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, buffer, size);
    cinfo.image_width = static_cast<JDIMENSION>(image.width);
    cinfo.image_height = static_cast<JDIMENSION>(image.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        auto* row = const_cast<unsigned char*>(image.rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3);
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    return true;
}

}  // namespace detail

inline Image decode_jpeg(std::string_view bytes)
{
    detail::JpegErrorManager err{};
    Image out;
    if (!detail::jpeg_decode_raw(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), out.rgb,
                                 out.width, out.height, &err))
        throw DecodeError(std::string("jpeg: ") + err.message);
    if (out.width == 0 || out.height == 0) throw DecodeError("jpeg: zero-dimension image");
    return out;
}

inline std::string encode_jpeg(const Image& image, int quality = 90)
{
    detail::JpegErrorManager err{};
    unsigned char* buffer = nullptr;
    unsigned long size = 0;
    const bool ok = detail::jpeg_encode_raw(image, quality, &buffer, &size, &err);
    std::string out;
    if (ok) out.assign(reinterpret_cast<const char*>(buffer), size);
    std::free(buffer);
    if (!ok) throw Error(std::string("jpeg: ") + err.message);
    return out;
}

inline Image decode_image(std::string_view bytes)
{
    switch (sniff_format(bytes)) {
        case ImageFormat::png: return decode_png(bytes);
        case ImageFormat::jpeg: return decode_jpeg(bytes);
        default: throw DecodeError("unrecognized image format (expected PNG or JPEG)");
    }
}

inline Image read_image(const std::filesystem::path& path)
{
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const InputError& e) {
        throw DecodeError(e.what());
    }
    try {
        return decode_image(bytes);
    } catch (const DecodeError& e) {
        throw DecodeError(path.string() + ": " + e.what());
    }
}

inline void write_png(const std::filesystem::path& path, const Image& image)
{
    write_file_atomic(path, encode_png(image));
}

// Channel-major float image, the network's input layout.
struct PixelTensor {
    std::size_t channels = 3;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;  // [c][y][x]

    float at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
};

struct Normalization {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.5, 0.5, 0.5};
};

// Bilinear resample of one channel plane with half-pixel centres:
// source coordinate = (dst + 0.5) * in / out - 0.5, clamped to the edge.
inline std::vector<double> resize_bilinear(std::span<const double> plane, std::size_t in_w, std::size_t in_h,
                                           std::size_t out_w, std::size_t out_h)
{
    std::vector<double> out(out_w * out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    auto coord = [](std::size_t dst, double scale, std::size_t in) {
        double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        const std::size_t hi = std::min(lo + 1, in - 1);
        return std::tuple{lo, hi, src - static_cast<double>(lo)};
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        const auto [y0, y1, fy] = coord(y, sy, in_h);
        for (std::size_t x = 0; x < out_w; ++x) {
            const auto [x0, x1, fx] = coord(x, sx, in_w);
            const double top = plane[y0 * in_w + x0] * (1 - fx) + plane[y0 * in_w + x1] * fx;
            const double bottom = plane[y1 * in_w + x0] * (1 - fx) + plane[y1 * in_w + x1] * fx;
            out[y * out_w + x] = top * (1 - fy) + bottom * fy;
        }
    }
    return out;
}

// Square bilinear resize followed by per-channel (raw/255 - mean) / std.
inline PixelTensor to_tensor(const Image& image, std::size_t side, const Normalization& norm = {})
{
    if (image.width == 0 || image.height == 0) throw DecodeError("zero-dimension image");
    if (side == 0) throw InputError("to_tensor: target side must be positive");
    PixelTensor t{3, side, side, std::vector<float>(3 * side * side)};
    std::vector<double> plane(image.width * image.height);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = image.rgb[3 * i + c];
        const auto resized = resize_bilinear(plane, image.width, image.height, side, side);
        for (std::size_t i = 0; i < resized.size(); ++i)
            t.values[c * side * side + i] = static_cast<float>((resized[i] / 255.0 - norm.mean[c]) / norm.std[c]);
    }
    return t;
}

// Resize an 8-bit image (used for thumbnails); rounds to nearest.
inline Image resize_image(const Image& image, std::size_t out_w, std::size_t out_h)
{
    Image out(out_w, out_h);
    std::vector<double> plane(image.width * image.height);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = image.rgb[3 * i + c];
        const auto resized = resize_bilinear(plane, image.width, image.height, out_w, out_h);
        for (std::size_t i = 0; i < resized.size(); ++i)
            out.rgb[3 * i + c] = static_cast<std::uint8_t>(std::clamp(std::lround(resized[i]), 0L, 255L));
    }
    return out;
}

}  // namespace memescope

#endif

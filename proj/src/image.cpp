#include "c2vae/image.hpp"

#include "c2vae/common.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace c2vae {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept
    {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};

using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

std::vector<std::uint8_t> quantize(const GrayImage& image)
{
    std::vector<std::uint8_t> bytes(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), [](float v) {
        const float clamped = std::clamp(v, 0.0F, 1.0F);
        return static_cast<std::uint8_t>(std::floor(clamped * 255.0F + 0.5F));
    });
    return bytes;
}

void write_png(const std::filesystem::path& path, const GrayImage& image)
{
    if (image.height <= 0 || image.width <= 0) {
        throw DataError("write_png: empty image for " + path.string());
    }
    FilePtr file(std::fopen(path.c_str(), "wb"));
    if (!file) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng initialisation failed");
    }
    const auto bytes = quantize(image);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng write failed for " + path.string());
    }
    png_init_io(png, file.get());
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int row = 0; row < image.height; ++row) {
        auto* ptr = const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(row) * image.width);
        png_write_row(png, ptr);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

GrayImage read_png(const std::filesystem::path& path)
{
    FilePtr file(std::fopen(path.c_str(), "rb"));
    if (!file) {
        throw DataError("cannot open " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("libpng initialisation failed");
    }
    GrayImage image;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("corrupt PNG: " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) {
        png_set_strip_16(png);
    }
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    if ((color & PNG_COLOR_MASK_ALPHA) != 0) {
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const auto rowbytes = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> row(rowbytes);
    image = GrayImage(height, width);
    for (int r = 0; r < height; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (int c = 0; c < width; ++c) {
            image.at(r, c) = static_cast<float>(row[static_cast<std::size_t>(c)]) / 255.0F;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return image;
}

GrayImage downsample(const GrayImage& image, int factor)
{
    if (factor <= 0 || image.height % factor != 0 || image.width % factor != 0) {
        throw DataError("downsample: factor must divide the image size");
    }
    GrayImage out(image.height / factor, image.width / factor);
    const float inv = 1.0F / static_cast<float>(factor * factor);
    for (int r = 0; r < out.height; ++r) {
        for (int c = 0; c < out.width; ++c) {
            float acc = 0.0F;
            for (int dr = 0; dr < factor; ++dr) {
                for (int dc = 0; dc < factor; ++dc) {
                    acc += image.at(r * factor + dr, c * factor + dc);
                }
            }
            out.at(r, c) = acc * inv;
        }
    }
    return out;
}

GrayImage tile_row(std::span<const GrayImage> tiles, int gap, float gap_value)
{
    if (tiles.empty()) {
        return {};
    }
    const int h = tiles.front().height;
    int total = 0;
    for (const auto& t : tiles) {
        if (t.height != h) {
            throw DataError("tile_row: tiles differ in height");
        }
        total += t.width;
    }
    total += gap * static_cast<int>(tiles.size() - 1);
    GrayImage out(h, total, gap_value);
    int offset = 0;
    for (const auto& t : tiles) {
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < t.width; ++c) {
                out.at(r, offset + c) = t.at(r, c);
            }
        }
        offset += t.width + gap;
    }
    return out;
}

GrayImage heatmap(std::span<const double> values, int rows, int cols, double vmax, int cell)
{
    GrayImage out(rows * cell, cols * cell);
    const double scale = vmax > 0.0 ? vmax : 1.0;
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            const double v = std::clamp(values[static_cast<std::size_t>(i) * cols + j] / scale, 0.0, 1.0);
            const auto shade = static_cast<float>(1.0 - v);
            for (int r = 0; r < cell; ++r) {
                for (int c = 0; c < cell; ++c) {
                    // one-pixel grid line between cells
                    const bool border = r == cell - 1 || c == cell - 1;
                    out.at(i * cell + r, j * cell + c) = border ? 0.5F : shade;
                }
            }
        }
    }
    return out;
}

} // namespace c2vae

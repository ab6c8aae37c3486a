#ifndef C2VAE_IMAGE_HPP
#define C2VAE_IMAGE_HPP

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace c2vae {

/// Row-major grayscale image with intensities in [0, 1].
struct GrayImage {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    GrayImage() = default;
    GrayImage(int h, int w, float fill = 0.0F)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill)
    {
    }

    float& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }
    float at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }

    bool operator==(const GrayImage&) const = default;
};

/// Quantizes to 8 bits (round half up) and writes an 8-bit grayscale PNG with
/// pinned zlib settings, so identical images give identical files.
void write_png(const std::filesystem::path& path, const GrayImage& image);

GrayImage read_png(const std::filesystem::path& path);

std::vector<std::uint8_t> quantize(const GrayImage& image);

/// Box-filter downsampling by an integer factor.
GrayImage downsample(const GrayImage& image, int factor);

/// Lays images out left to right with a `gap`-pixel separator of value `gap_value`.
GrayImage tile_row(std::span<const GrayImage> tiles, int gap = 1, float gap_value = 1.0F);

/// Renders a matrix (values in [0, vmax]) as a heatmap, `cell` pixels per entry,
/// with 0 mapped to white and vmax to black.
GrayImage heatmap(std::span<const double> values, int rows, int cols, double vmax, int cell = 16);

} // namespace c2vae

#endif // C2VAE_IMAGE_HPP

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "roimatch/geometry.hpp"

namespace roimatch::img {

// Interleaved row-major 8-bit image; channels is 1 (gray) or 3 (RGB).
struct ImageU8 {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<uint8_t> data;

    static ImageU8 filled(int height, int width, int channels, uint8_t value);
    uint8_t at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

// Binary PGM (P5) / PPM (P6). The one-channel and three-channel writers pick
// the format from image.channels; read_image sniffs the magic.
void write_image(const std::string& path, const ImageU8& image);
ImageU8 read_image(const std::string& path);

// Masks are stored as single-channel 8-bit files: binary masks as 0/255,
// instance maps as the raw id value.
void write_mask_binary(const std::string& path, const geom::RasterMask& mask);
void write_mask_instances(const std::string& path, const geom::RasterMask& mask);
geom::RasterMask read_mask_binary(const std::string& path);
geom::RasterMask read_mask_instances(const std::string& path);

// Axis-aligned box outline, clipped to the image; thickness in pixels.
void draw_box(ImageU8& image, double x0, double y0, double x1, double y1, uint8_t r, uint8_t g,
              uint8_t b, int thickness = 2);

}  // namespace roimatch::img

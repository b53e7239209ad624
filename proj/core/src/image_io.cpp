// SPDX-License-Identifier: Apache-2.0
#include "roimatch/image_io.hpp"

#include <algorithm>
#include <fstream>

namespace roimatch::img {

ImageU8 ImageU8::filled(int height, int width, int channels, uint8_t value) {
    ImageU8 im;
    im.height = height;
    im.width = width;
    im.channels = channels;
    im.data.assign(static_cast<size_t>(height) * width * channels, value);
    return im;
}

void write_image(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw UsageError("write_image supports 1 or 3 channels");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << (image.channels == 1 ? "P5" : "P6") << "\n"
        << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.data.data()),
              static_cast<std::streamsize>(image.data.size()));
    if (!out) throw IoError("short write: " + path);
}

ImageU8 read_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5" && magic != "P6") throw IoError("unsupported image format in " + path);
    auto next_int = [&in, &path]() {
        // Skip whitespace and '#' comments between header tokens.
        int c = in.peek();
        while (c == ' ' || c == '\n' || c == '\r' || c == '\t' || c == '#') {
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else {
                in.get();
            }
            c = in.peek();
        }
        int v = 0;
        if (!(in >> v)) throw IoError("bad image header in " + path);
        return v;
    };
    ImageU8 im;
    im.width = next_int();
    im.height = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw IoError("only 8-bit images supported: " + path);
    in.get();  // single whitespace after header
    im.channels = magic == "P5" ? 1 : 3;
    im.data.resize(static_cast<size_t>(im.height) * im.width * im.channels);
    in.read(reinterpret_cast<char*>(im.data.data()), static_cast<std::streamsize>(im.data.size()));
    if (!in) throw IoError("truncated image data in " + path);
    return im;
}

void write_mask_binary(const std::string& path, const geom::RasterMask& mask) {
    ImageU8 im = ImageU8::filled(mask.height, mask.width, 1, 0);
    for (size_t i = 0; i < mask.values.size(); ++i) im.data[i] = mask.values[i] != 0 ? 255 : 0;
    write_image(path, im);
}

void write_mask_instances(const std::string& path, const geom::RasterMask& mask) {
    ImageU8 im = ImageU8::filled(mask.height, mask.width, 1, 0);
    for (size_t i = 0; i < mask.values.size(); ++i) {
        const int32_t v = mask.values[i];
        if (v < 0 || v > 255) throw UsageError("instance id out of 8-bit range");
        im.data[i] = static_cast<uint8_t>(v);
    }
    write_image(path, im);
}

namespace {
geom::RasterMask image_to_mask(const ImageU8& im, bool binary) {
    if (im.channels != 1) throw IoError("mask files must be single-channel");
    geom::RasterMask m = geom::RasterMask::zeros(im.height, im.width);
    for (size_t i = 0; i < im.data.size(); ++i) {
        m.values[i] = binary ? (im.data[i] >= 128 ? 1 : 0) : im.data[i];
    }
    return m;
}
}  // namespace

geom::RasterMask read_mask_binary(const std::string& path) {
    return image_to_mask(read_image(path), /*binary=*/true);
}

geom::RasterMask read_mask_instances(const std::string& path) {
    return image_to_mask(read_image(path), /*binary=*/false);
}

void draw_box(ImageU8& image, double x0, double y0, double x1, double y1, uint8_t r, uint8_t g,
              uint8_t b, int thickness) {
    const uint8_t rgb[3] = {r, g, b};
    auto put = [&](int y, int x) {
        if (y < 0 || x < 0 || y >= image.height || x >= image.width) return;
        for (int c = 0; c < image.channels; ++c) {
            image.at(y, x, c) = image.channels == 3 ? rgb[c] : rgb[0];
        }
    };
    const int ix0 = static_cast<int>(std::floor(x0));
    const int iy0 = static_cast<int>(std::floor(y0));
    const int ix1 = static_cast<int>(std::ceil(x1));
    const int iy1 = static_cast<int>(std::ceil(y1));
    for (int t = 0; t < thickness; ++t) {
        for (int x = ix0 - t; x <= ix1 + t; ++x) {
            put(iy0 - t, x);
            put(iy1 + t, x);
        }
        for (int y = iy0 - t; y <= iy1 + t; ++y) {
            put(y, ix0 - t);
            put(y, ix1 + t);
        }
    }
}

}  // namespace roimatch::img

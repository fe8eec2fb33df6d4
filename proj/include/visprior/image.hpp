#pragma once

#include <optional>
#include <string>
#include <vector>

#include "visprior/tensor.hpp"

namespace vp {

// One image in the normalized representation used everywhere: pixels are a
// [3, H, W] float tensor with values in [-1, 1]. Datasets built by the
// generators and loaders keep H = W in {32, 64}.
struct ImageSample {
    Tensor pixels;                 // [3, H, W]
    int label = -1;                // optional small class id
    std::vector<int> caption;      // optional token ids from the closed grammar

    int height() const { return pixels.dim(1); }
    int width() const { return pixels.dim(2); }
};

// 8-bit <-> [-1, 1]: u/255*2 - 1 and its rounding inverse; round trip stays
// within 1/255 per channel.
inline float u8_to_unit(uint8_t v) { return float(v) / 255.0f * 2.0f - 1.0f; }
inline uint8_t unit_to_u8(float v) {
    float c = (v + 1.0f) * 0.5f * 255.0f;
    if (c < 0.0f) c = 0.0f;
    if (c > 255.0f) c = 255.0f;
    return uint8_t(c + 0.5f);
}

struct RawImage {
    int width = 0, height = 0, channels = 0; // channels in {1, 3, 4}
    std::vector<uint8_t> pixels;             // row-major, interleaved
};

// PNG (8-bit gray/RGB/RGBA) and binary PPM/PGM.
RawImage read_image_file(const std::string& path);
void write_png(const std::string& path, const RawImage& img);
void write_ppm(const std::string& path, const RawImage& img);

ImageSample raw_to_sample(const RawImage& raw, int resolution); // center-crop + resize + normalize
RawImage sample_to_raw(const ImageSample& s);

void write_image_grid(const std::string& path, const std::vector<ImageSample>& images, int columns);

float mean_abs_diff(const ImageSample& a, const ImageSample& b);

} // namespace vp

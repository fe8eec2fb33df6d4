#include "visprior/image.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace vp {

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

uint32_t get_u32be(const uint8_t* p) {
    return uint32_t(p[0]) << 24 | uint32_t(p[1]) << 16 | uint32_t(p[2]) << 8 | uint32_t(p[3]);
}

void write_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& payload) {
    std::vector<uint8_t> head;
    put_u32be(head, uint32_t(payload.size()));
    f.write(reinterpret_cast<const char*>(head.data()), 4);
    f.write(type, 4);
    if (!payload.empty()) f.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!payload.empty()) crc = crc32(crc, payload.data(), uInt(payload.size()));
    std::vector<uint8_t> crcb;
    put_u32be(crcb, uint32_t(crc));
    f.write(reinterpret_cast<const char*>(crcb.data()), 4);
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

} // namespace

void write_png(const std::string& path, const RawImage& img) {
    VP_CHECK(img.channels == 1 || img.channels == 3 || img.channels == 4, "write_png: unsupported channels");
    VP_CHECK(img.pixels.size() == size_t(img.width) * img.height * img.channels, "write_png: size mismatch");

    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "write_png: cannot open " + path);
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    f.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr;
    put_u32be(ihdr, uint32_t(img.width));
    put_u32be(ihdr, uint32_t(img.height));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(img.channels == 1 ? 0 : (img.channels == 3 ? 2 : 6));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(f, "IHDR", ihdr);

    // filter 0 on every scanline, then deflate
    const size_t stride = size_t(img.width) * img.channels;
    std::vector<uint8_t> raw;
    raw.reserve((stride + 1) * size_t(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), img.pixels.begin() + long(y * stride), img.pixels.begin() + long((y + 1) * stride));
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> comp(bound);
    VP_CHECK(compress2(comp.data(), &bound, raw.data(), uLong(raw.size()), 6) == Z_OK, "write_png: deflate failed");
    comp.resize(bound);
    write_chunk(f, "IDAT", comp);
    write_chunk(f, "IEND", {});
}

void write_ppm(const std::string& path, const RawImage& img) {
    VP_CHECK(img.channels == 3, "write_ppm: RGB only");
    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
}

namespace {

RawImage read_ppm(std::ifstream& f, const std::string& path) {
    std::string magic;
    f >> magic;
    VP_CHECK(magic == "P6" || magic == "P5", "read_image: unsupported PNM magic in " + path);
    auto skip_ws = [&] {
        while (true) {
            int c = f.peek();
            if (c == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(c)) {
                f.get();
            } else
                break;
        }
    };
    skip_ws();
    int w, h, maxv;
    f >> w;
    skip_ws();
    f >> h;
    skip_ws();
    f >> maxv;
    VP_CHECK(maxv == 255, "read_image: only 8-bit PNM supported: " + path);
    f.get(); // single whitespace after header
    RawImage img;
    img.width = w;
    img.height = h;
    img.channels = magic == "P6" ? 3 : 1;
    img.pixels.resize(size_t(w) * h * img.channels);
    f.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    VP_CHECK(f.gcount() == std::streamsize(img.pixels.size()), "read_image: truncated PNM " + path);
    return img;
}

RawImage read_png(std::ifstream& f, const std::string& path) {
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    VP_CHECK(bytes.size() > 8, "read_image: truncated PNG " + path);
    size_t pos = 8;
    int width = 0, height = 0, channels = 0, bit_depth = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        uint32_t len = get_u32be(&bytes[pos]);
        std::string type(reinterpret_cast<const char*>(&bytes[pos + 4]), 4);
        VP_CHECK(pos + 12 + len <= bytes.size(), "read_image: corrupt PNG " + path);
        const uint8_t* payload = &bytes[pos + 8];
        if (type == "IHDR") {
            width = int(get_u32be(payload));
            height = int(get_u32be(payload + 4));
            bit_depth = payload[8];
            int color = payload[9];
            VP_CHECK(bit_depth == 8, "read_image: only 8-bit PNG supported: " + path);
            VP_CHECK(payload[12] == 0, "read_image: interlaced PNG unsupported: " + path);
            channels = color == 0 ? 1 : color == 2 ? 3 : color == 6 ? 4 : -1;
            VP_CHECK(channels > 0, "read_image: unsupported PNG color type in " + path);
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    VP_CHECK(width > 0 && height > 0, "read_image: missing IHDR in " + path);

    const size_t stride = size_t(width) * channels;
    std::vector<uint8_t> raw((stride + 1) * size_t(height));
    uLongf raw_len = uLongf(raw.size());
    VP_CHECK(uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) == Z_OK &&
                 raw_len == raw.size(),
             "read_image: inflate failed for " + path);

    RawImage img;
    img.width = width;
    img.height = height;
    img.channels = channels;
    img.pixels.resize(stride * size_t(height));
    const int bpp = channels;
    std::vector<uint8_t> prev(stride, 0);
    for (int y = 0; y < height; ++y) {
        const uint8_t filter = raw[size_t(y) * (stride + 1)];
        const uint8_t* src = &raw[size_t(y) * (stride + 1) + 1];
        uint8_t* dst = &img.pixels[size_t(y) * stride];
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= size_t(bpp) ? dst[i - bpp] : 0;
            const int b = prev[i];
            const int c = i >= size_t(bpp) ? prev[i - bpp] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw std::runtime_error("read_image: bad PNG filter in " + path);
            }
            dst[i] = uint8_t(v);
        }
        std::memcpy(prev.data(), dst, stride);
    }
    return img;
}

} // namespace

RawImage read_image_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "read_image: cannot open " + path);
    int c0 = f.peek();
    if (c0 == 'P') return read_ppm(f, path);
    return read_png(f, path);
}

ImageSample raw_to_sample(const RawImage& raw, int resolution) {
    VP_CHECK(raw.width > 0 && raw.height > 0, "raw_to_sample: empty image");
    const int side = std::min(raw.width, raw.height);
    const int ox = (raw.width - side) / 2;
    const int oy = (raw.height - side) / 2;

    ImageSample s;
    s.pixels = Tensor::zeros({3, resolution, resolution});
    const float sc = float(side) / float(resolution);
    for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
            // bilinear sample in the cropped square
            float fy = (float(y) + 0.5f) * sc - 0.5f;
            float fx = (float(x) + 0.5f) * sc - 0.5f;
            int y0 = int(std::floor(fy)), x0 = int(std::floor(fx));
            float wy = fy - float(y0), wx = fx - float(x0);
            for (int ch = 0; ch < 3; ++ch) {
                auto at = [&](int yy, int xx) -> float {
                    yy = std::clamp(yy, 0, side - 1) + oy;
                    xx = std::clamp(xx, 0, side - 1) + ox;
                    const size_t idx = (size_t(yy) * raw.width + xx) * raw.channels;
                    const uint8_t v = raw.channels == 1 ? raw.pixels[idx] : raw.pixels[idx + ch];
                    return float(v);
                };
                float v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                          wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
                s.pixels[(size_t(ch) * resolution + y) * resolution + x] = v / 255.0f * 2.0f - 1.0f;
            }
        }
    return s;
}

RawImage sample_to_raw(const ImageSample& s) {
    const int h = s.height(), w = s.width();
    RawImage raw;
    raw.width = w;
    raw.height = h;
    raw.channels = 3;
    raw.pixels.resize(size_t(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                raw.pixels[(size_t(y) * w + x) * 3 + c] = unit_to_u8(s.pixels[(size_t(c) * h + y) * w + x]);
    return raw;
}

void write_image_grid(const std::string& path, const std::vector<ImageSample>& images, int columns) {
    VP_CHECK(!images.empty(), "write_image_grid: no images");
    VP_CHECK(columns >= 1, "write_image_grid: bad column count");
    const int h = images[0].height(), w = images[0].width();
    const int rows = (int(images.size()) + columns - 1) / columns;
    RawImage grid;
    grid.width = columns * w;
    grid.height = rows * h;
    grid.channels = 3;
    grid.pixels.assign(size_t(grid.width) * grid.height * 3, 0);
    for (size_t i = 0; i < images.size(); ++i) {
        VP_CHECK(images[i].height() == h && images[i].width() == w, "write_image_grid: mixed sizes");
        RawImage cell = sample_to_raw(images[i]);
        const int gy = int(i) / columns, gx = int(i) % columns;
        for (int y = 0; y < h; ++y)
            std::memcpy(&grid.pixels[((size_t(gy) * h + y) * grid.width + size_t(gx) * w) * 3],
                        &cell.pixels[size_t(y) * w * 3], size_t(w) * 3);
    }
    write_png(path, grid);
}

float mean_abs_diff(const ImageSample& a, const ImageSample& b) {
    VP_CHECK(a.pixels.shape == b.pixels.shape, "mean_abs_diff: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.pixels.numel(); ++i) acc += std::fabs(double(a.pixels[i]) - double(b.pixels[i]));
    return float(acc / double(a.pixels.numel()));
}

} // namespace vp

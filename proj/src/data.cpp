#include "visprior/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace vp {

// --- manifest ----------------------------------------------------------------

std::string DatasetManifest::to_text() const {
    std::ostringstream os;
    os << "name=" << name << "\n";
    os << "count=" << count << "\n";
    os << "resolution=" << resolution << "\n";
    os << "modality=" << modality << "\n";
    os << "seed=" << seed << "\n";
    os << "source=" << source << "\n";
    return os.str();
}

DatasetManifest DatasetManifest::from_text(const std::string& text) {
    DatasetManifest m;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "name") m.name = v;
        else if (k == "count") m.count = std::stoi(v);
        else if (k == "resolution") m.resolution = std::stoi(v);
        else if (k == "modality") m.modality = v;
        else if (k == "seed") m.seed = std::stoull(v);
        else if (k == "source") m.source = v;
    }
    VP_CHECK(m.count > 0, "manifest: count must be positive");
    return m;
}

void DatasetManifest::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "manifest: cannot write " + path);
    f << to_text();
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "manifest: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str());
}

// --- tensor file ---------------------------------------------------------------

void write_tensor_file(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "tensor file: cannot write " + path);
    f.write("VPF1", 4);
    uint32_t rank = uint32_t(t.shape.size());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int d : t.shape) {
        uint32_t v = uint32_t(d);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    f.write(reinterpret_cast<const char*>(t.ptr()), std::streamsize(t.numel() * sizeof(float)));
}

Tensor read_tensor_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "tensor file: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    VP_CHECK(f.gcount() == 4 && std::memcmp(magic, "VPF1", 4) == 0, "tensor file: bad magic in " + path);
    uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    VP_CHECK(rank >= 1 && rank <= 8, "tensor file: implausible rank in " + path);
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        shape[i] = int(v);
    }
    Tensor t = Tensor::zeros(shape);
    f.read(reinterpret_cast<char*>(t.ptr()), std::streamsize(t.numel() * sizeof(float)));
    VP_CHECK(size_t(f.gcount()) == t.numel() * sizeof(float), "tensor file: truncated " + path);
    return t;
}

// --- dataset dir ----------------------------------------------------------------

void save_image_dataset(const std::string& dir, const ImageDataset& ds) {
    fs::create_directories(dir);
    const int n = int(ds.samples.size());
    VP_CHECK(n > 0, "save_image_dataset: empty dataset");
    const int h = ds.samples[0].height(), w = ds.samples[0].width();
    Tensor images = Tensor::zeros({n, 3, h, w});
    for (int i = 0; i < n; ++i)
        std::memcpy(images.ptr() + size_t(i) * 3 * h * w, ds.samples[size_t(i)].pixels.ptr(),
                    sizeof(float) * 3 * size_t(h) * w);
    write_tensor_file(dir + "/images.vpf", images);

    if (ds.n_classes > 0) {
        Tensor labels = Tensor::zeros({n});
        for (int i = 0; i < n; ++i) labels[size_t(i)] = float(ds.samples[size_t(i)].label);
        write_tensor_file(dir + "/labels.vpf", labels);
    }
    if (!ds.vocab.empty()) {
        const int L = int(ds.samples[0].caption.size());
        Tensor caps = Tensor::zeros({n, L});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < L; ++j) caps[size_t(i) * L + j] = float(ds.samples[size_t(i)].caption[size_t(j)]);
        write_tensor_file(dir + "/captions.vpf", caps);
        std::ofstream vf(dir + "/vocab.txt", std::ios::binary);
        for (const auto& wrd : ds.vocab) vf << wrd << "\n";
    }
    ds.manifest.save(dir + "/manifest.txt");
}

ImageDataset load_image_dataset(const std::string& dir) {
    ImageDataset ds;
    ds.manifest = DatasetManifest::load(dir + "/manifest.txt");
    Tensor images = read_tensor_file(dir + "/images.vpf");
    VP_CHECK(images.rank() == 4, "load_image_dataset: images.vpf must be [N,3,H,W]");
    const int n = images.dim(0), h = images.dim(2), w = images.dim(3);
    ds.samples.resize(size_t(n));
    for (int i = 0; i < n; ++i) {
        ds.samples[size_t(i)].pixels = Tensor::zeros({3, h, w});
        std::memcpy(ds.samples[size_t(i)].pixels.ptr(), images.ptr() + size_t(i) * 3 * h * w,
                    sizeof(float) * 3 * size_t(h) * w);
    }
    if (fs::exists(dir + "/labels.vpf")) {
        Tensor labels = read_tensor_file(dir + "/labels.vpf");
        int mx = -1;
        for (int i = 0; i < n; ++i) {
            ds.samples[size_t(i)].label = int(labels[size_t(i)]);
            mx = std::max(mx, ds.samples[size_t(i)].label);
        }
        ds.n_classes = mx + 1;
    }
    if (fs::exists(dir + "/captions.vpf")) {
        Tensor caps = read_tensor_file(dir + "/captions.vpf");
        const int L = caps.dim(1);
        for (int i = 0; i < n; ++i) {
            auto& c = ds.samples[size_t(i)].caption;
            c.resize(size_t(L));
            for (int j = 0; j < L; ++j) c[size_t(j)] = int(caps[size_t(i) * L + j]);
        }
        std::ifstream vf(dir + "/vocab.txt", std::ios::binary);
        std::string word;
        while (std::getline(vf, word))
            if (!word.empty()) ds.vocab.push_back(word);
    }
    return ds;
}

// --- directory loader -------------------------------------------------------------

ImageDataset load_image_dir(const std::string& path, int resolution) {
    VP_CHECK(fs::is_directory(path), "load_image_dir: not a directory: " + path);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(path))
        if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    VP_CHECK(!files.empty(), "load_image_dir: empty directory: " + path);

    ImageDataset ds;
    for (const auto& f : files) {
        try {
            RawImage raw = read_image_file(f);
            ds.samples.push_back(raw_to_sample(raw, resolution));
        } catch (const std::exception& e) {
            std::cerr << "[load_image_dir] skipping unreadable file " << f << ": " << e.what() << "\n";
        }
    }
    VP_CHECK(!ds.samples.empty(), "load_image_dir: no readable images under " + path);
    ds.manifest.name = fs::path(path).filename().string();
    ds.manifest.count = int(ds.samples.size());
    ds.manifest.resolution = resolution;
    ds.manifest.modality = "image";
    ds.manifest.source = path;
    return ds;
}

// --- grammar and rasterizer ---------------------------------------------------------

CaptionGrammar CaptionGrammar::single() {
    CaptionGrammar g;
    g.colors = {"red", "green", "blue", "yellow"};
    g.shapes = {"circle", "square", "triangle"};
    return g;
}

CaptionGrammar CaptionGrammar::pairs() {
    CaptionGrammar g = single();
    g.relations = {"above", "below", "left_of", "right_of"};
    return g;
}

std::vector<std::string> CaptionGrammar::vocabulary() const {
    std::vector<std::string> v = {"<pad>"};
    v.insert(v.end(), colors.begin(), colors.end());
    v.insert(v.end(), shapes.begin(), shapes.end());
    v.insert(v.end(), relations.begin(), relations.end());
    VP_CHECK(v.size() <= 64, "grammar: vocabulary exceeds 64 symbols");
    return v;
}

std::array<float, 3> color_rgb(const std::string& name) {
    if (name == "red") return {1.0f, -1.0f, -1.0f};
    if (name == "green") return {-1.0f, 1.0f, -1.0f};
    if (name == "blue") return {-1.0f, -1.0f, 1.0f};
    if (name == "yellow") return {1.0f, 1.0f, -1.0f};
    if (name == "magenta") return {1.0f, -1.0f, 1.0f};
    if (name == "cyan") return {-1.0f, 1.0f, 1.0f};
    throw std::runtime_error("color_rgb: unknown color " + name);
}

std::vector<char> shape_mask(SpriteShape shape, float cx, float cy, float radius, int h, int w) {
    std::vector<char> mask(size_t(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float dx = float(x) - cx, dy = float(y) - cy;
            bool in = false;
            switch (shape) {
                case SpriteShape::Circle: in = dx * dx + dy * dy <= radius * radius; break;
                case SpriteShape::Square: in = std::fabs(dx) <= radius && std::fabs(dy) <= radius; break;
                case SpriteShape::Triangle: {
                    // apex up: half-width grows from 0 at cy-radius to radius at cy+radius
                    const float t = dy + radius;
                    in = t >= 0.0f && t <= 2.0f * radius && std::fabs(dx) <= radius * (t / (2.0f * radius));
                    break;
                }
            }
            if (in) mask[size_t(y) * w + x] = 1;
        }
    return mask;
}

void draw_shape(Tensor& pixels, SpriteShape shape, float cx, float cy, float radius,
                const std::array<float, 3>& rgb) {
    const int h = pixels.dim(1), w = pixels.dim(2);
    auto mask = shape_mask(shape, cx, cy, radius, h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask[size_t(y) * w + x])
                for (int c = 0; c < 3; ++c) pixels[(size_t(c) * h + y) * w + x] = rgb[size_t(c)];
}

// --- captioned shapes ---------------------------------------------------------------

namespace {

int vocab_id(const std::vector<std::string>& vocab, const std::string& word) {
    for (size_t i = 0; i < vocab.size(); ++i)
        if (vocab[i] == word) return int(i);
    throw std::runtime_error("vocab_id: unknown word " + word);
}

} // namespace

ImageDataset synth_captioned_shapes(uint64_t seed, int n, int resolution, const CaptionGrammar& grammar) {
    VP_CHECK(!grammar.colors.empty() && !grammar.shapes.empty(), "synth_captioned_shapes: empty grammar");
    Rng rng(hash_combine(seed, 0xca9));
    ImageDataset ds;
    ds.vocab = grammar.vocabulary();
    ds.n_classes = grammar.n_classes();
    const int L = grammar.caption_length();
    const bool pairs = !grammar.relations.empty();

    for (int i = 0; i < n; ++i) {
        Rng r = rng.split(uint64_t(i));
        ImageSample s;
        s.pixels = Tensor::full({3, resolution, resolution}, kSpriteBackground);

        const int c1 = r.uniform_int(int(grammar.colors.size()));
        const int s1 = r.uniform_int(int(grammar.shapes.size()));
        s.label = c1 * int(grammar.shapes.size()) + s1;
        s.caption.assign(size_t(L), 0);
        const float rad = float(resolution) * (0.16f + 0.04f * r.uniformf());

        if (!pairs) {
            const float jx = float(resolution) * 0.12f * (r.uniformf() * 2.0f - 1.0f);
            const float jy = float(resolution) * 0.12f * (r.uniformf() * 2.0f - 1.0f);
            draw_shape(s.pixels, SpriteShape(s1), float(resolution) / 2 + jx, float(resolution) / 2 + jy, rad,
                       color_rgb(grammar.colors[size_t(c1)]));
            s.caption[0] = vocab_id(ds.vocab, grammar.colors[size_t(c1)]);
            s.caption[1] = vocab_id(ds.vocab, grammar.shapes[size_t(s1)]);
        } else {
            int c2 = r.uniform_int(int(grammar.colors.size()));
            int s2 = r.uniform_int(int(grammar.shapes.size()));
            const int rel = r.uniform_int(int(grammar.relations.size()));
            const float q = float(resolution) / 4.0f;
            const float mid = float(resolution) / 2.0f;
            float ax = mid, ay = mid, bx = mid, by = mid;
            const std::string& rname = grammar.relations[size_t(rel)];
            if (rname == "above") { ay = mid - q; by = mid + q; }
            else if (rname == "below") { ay = mid + q; by = mid - q; }
            else if (rname == "left_of") { ax = mid - q; bx = mid + q; }
            else { ax = mid + q; bx = mid - q; }
            const float prad = std::min(rad, q * 0.85f);
            draw_shape(s.pixels, SpriteShape(s1), ax, ay, prad, color_rgb(grammar.colors[size_t(c1)]));
            draw_shape(s.pixels, SpriteShape(s2), bx, by, prad, color_rgb(grammar.colors[size_t(c2)]));
            s.caption[0] = vocab_id(ds.vocab, grammar.colors[size_t(c1)]);
            s.caption[1] = vocab_id(ds.vocab, grammar.shapes[size_t(s1)]);
            s.caption[2] = vocab_id(ds.vocab, rname);
            s.caption[3] = vocab_id(ds.vocab, grammar.colors[size_t(c2)]);
            s.caption[4] = vocab_id(ds.vocab, grammar.shapes[size_t(s2)]);
        }
        ds.samples.push_back(std::move(s));
    }
    ds.manifest.name = pairs ? "captioned-shape-pairs" : "captioned-shapes";
    ds.manifest.count = n;
    ds.manifest.resolution = resolution;
    ds.manifest.modality = "captioned";
    ds.manifest.seed = seed;
    return ds;
}

// --- moving sprites -------------------------------------------------------------------

VideoSample render_moving_clip(const MovingSpriteSpec& spec, int frames, int resolution) {
    VP_CHECK(frames >= 2, "render_moving_clip: need at least 2 frames");
    VideoSample clip;
    int cx = spec.cx, cy = spec.cy, vx = spec.vx, vy = spec.vy;
    for (int f = 0; f < frames; ++f) {
        ImageSample img;
        img.pixels = Tensor::full({3, resolution, resolution}, kSpriteBackground);
        draw_shape(img.pixels, spec.shape, float(cx), float(cy), float(spec.radius), spec.rgb);
        clip.frames.push_back(std::move(img));
        // advance with border reflection
        int nx = cx + vx, ny = cy + vy;
        if (nx - spec.radius < 0 || nx + spec.radius >= resolution) { vx = -vx; nx = cx + vx; }
        if (ny - spec.radius < 0 || ny + spec.radius >= resolution) { vy = -vy; ny = cy + vy; }
        cx = nx;
        cy = ny;
    }
    return clip;
}

VideoDataset synth_moving_sprites(uint64_t seed, int n_clips, int frames, int resolution) {
    VP_CHECK(frames >= 2, "synth_moving_sprites: need at least 2 frames");
    Rng rng(hash_combine(seed, 0x71de0));
    VideoDataset ds;
    static const std::array<std::string, 4> palette = {"red", "green", "blue", "yellow"};
    for (int i = 0; i < n_clips; ++i) {
        Rng r = rng.split(uint64_t(i));
        MovingSpriteSpec spec;
        spec.shape = SpriteShape(r.uniform_int(3));
        spec.rgb = color_rgb(palette[size_t(r.uniform_int(4))]);
        spec.radius = resolution / 10 + r.uniform_int(resolution / 16 + 1);
        spec.cx = spec.radius + 1 + r.uniform_int(resolution - 2 * spec.radius - 2);
        spec.cy = spec.radius + 1 + r.uniform_int(resolution - 2 * spec.radius - 2);
        const int vmax = std::max(1, resolution / 24);
        do {
            spec.vx = r.uniform_int(2 * vmax + 1) - vmax;
            spec.vy = r.uniform_int(2 * vmax + 1) - vmax;
        } while (spec.vx == 0 && spec.vy == 0);
        ds.clips.push_back(render_moving_clip(spec, frames, resolution));
    }
    ds.manifest.name = "moving-sprites";
    ds.manifest.count = n_clips;
    ds.manifest.resolution = resolution;
    ds.manifest.modality = "video";
    ds.manifest.seed = seed;
    return ds;
}

// --- primitive renderer -----------------------------------------------------------------

namespace {

struct Hit {
    bool ok = false;
    double t = 1e30;
    Vec3 normal = {0, 0, 0};
};

Hit hit_sphere(const Vec3& o, const Vec3& d, double s) {
    Hit h;
    const double b = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
    const double c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - s * s;
    const double disc = b * b - c;
    if (disc < 0) return h;
    const double t = -b - std::sqrt(disc);
    if (t <= 1e-6) return h;
    h.ok = true;
    h.t = t;
    Vec3 p = {o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]};
    const double inv = 1.0 / s;
    h.normal = {p[0] * inv, p[1] * inv, p[2] * inv};
    return h;
}

Hit hit_cube(const Vec3& o, const Vec3& d, double s) {
    Hit h;
    double tmin = -1e30, tmax = 1e30;
    int axis = -1;
    for (int i = 0; i < 3; ++i) {
        if (std::fabs(d[size_t(i)]) < 1e-12) {
            if (o[size_t(i)] < -s || o[size_t(i)] > s) return h;
            continue;
        }
        double t0 = (-s - o[size_t(i)]) / d[size_t(i)];
        double t1 = (s - o[size_t(i)]) / d[size_t(i)];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > tmin) { tmin = t0; axis = i; }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return h;
    }
    if (tmin <= 1e-6 || axis < 0) return h;
    h.ok = true;
    h.t = tmin;
    Vec3 p = {o[0] + tmin * d[0], o[1] + tmin * d[1], o[2] + tmin * d[2]};
    h.normal = {0, 0, 0};
    h.normal[size_t(axis)] = p[size_t(axis)] > 0 ? 1.0 : -1.0;
    return h;
}

Hit hit_triangle(const Vec3& o, const Vec3& d, const Vec3& v0, const Vec3& v1, const Vec3& v2) {
    Hit h;
    const Vec3 e1 = {v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]};
    const Vec3 e2 = {v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]};
    const Vec3 pv = {d[1] * e2[2] - d[2] * e2[1], d[2] * e2[0] - d[0] * e2[2], d[0] * e2[1] - d[1] * e2[0]};
    const double det = e1[0] * pv[0] + e1[1] * pv[1] + e1[2] * pv[2];
    if (std::fabs(det) < 1e-12) return h;
    const double inv = 1.0 / det;
    const Vec3 tv = {o[0] - v0[0], o[1] - v0[1], o[2] - v0[2]};
    const double u = (tv[0] * pv[0] + tv[1] * pv[1] + tv[2] * pv[2]) * inv;
    if (u < 0 || u > 1) return h;
    const Vec3 qv = {tv[1] * e1[2] - tv[2] * e1[1], tv[2] * e1[0] - tv[0] * e1[2],
                     tv[0] * e1[1] - tv[1] * e1[0]};
    const double v = (d[0] * qv[0] + d[1] * qv[1] + d[2] * qv[2]) * inv;
    if (v < 0 || u + v > 1) return h;
    const double t = (e2[0] * qv[0] + e2[1] * qv[1] + e2[2] * qv[2]) * inv;
    if (t <= 1e-6) return h;
    h.ok = true;
    h.t = t;
    Vec3 n = {e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]};
    double nn = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
    h.normal = {n[0] / nn, n[1] / nn, n[2] / nn};
    // orient against the ray
    if (h.normal[0] * d[0] + h.normal[1] * d[1] + h.normal[2] * d[2] > 0)
        h.normal = {-h.normal[0], -h.normal[1], -h.normal[2]};
    return h;
}

Hit hit_pyramid(const Vec3& o, const Vec3& d, double s) {
    // square base at z=-s, apex at (0,0,s)
    const Vec3 apex = {0, 0, s};
    const Vec3 b0 = {-s, -s, -s}, b1 = {s, -s, -s}, b2 = {s, s, -s}, b3 = {-s, s, -s};
    Hit best;
    for (const auto& tri : {std::array<Vec3, 3>{b0, b1, apex}, std::array<Vec3, 3>{b1, b2, apex},
                            std::array<Vec3, 3>{b2, b3, apex}, std::array<Vec3, 3>{b3, b0, apex},
                            std::array<Vec3, 3>{b0, b2, b1}, std::array<Vec3, 3>{b0, b3, b2}}) {
        Hit h = hit_triangle(o, d, tri[0], tri[1], tri[2]);
        if (h.ok && h.t < best.t) best = h;
    }
    return best;
}

} // namespace

ImageSample render_view(const NvsObject& obj, const CameraPose& cam, int resolution, double fov_deg) {
    ImageSample img;
    img.pixels = Tensor::full({3, resolution, resolution}, -0.9f);
    const Vec3 origin = cam.center();
    const Mat3 rt = mat3_transpose(cam.R);
    const double half = std::tan(fov_deg * M_PI / 180.0 / 2.0);
    const double ambient = 0.25;

    for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
            const double u = ((double(x) + 0.5) / resolution * 2.0 - 1.0) * half;
            const double v = ((double(y) + 0.5) / resolution * 2.0 - 1.0) * half;
            Vec3 dc = {u, v, 1.0};
            const double n = std::sqrt(dc[0] * dc[0] + dc[1] * dc[1] + dc[2] * dc[2]);
            dc = {dc[0] / n, dc[1] / n, dc[2] / n};
            const Vec3 d = mat3_apply(rt, dc);

            Hit h;
            switch (obj.primitive) {
                case 0: h = hit_cube(origin, d, double(obj.size)); break;
                case 1: h = hit_sphere(origin, d, double(obj.size)); break;
                default: h = hit_pyramid(origin, d, double(obj.size)); break;
            }
            if (!h.ok) continue;
            // camera headlight: light arrives along -d
            const double lambert = std::max(0.0, -(h.normal[0] * d[0] + h.normal[1] * d[1] + h.normal[2] * d[2]));
            const double shade = ambient + (1.0 - ambient) * lambert;
            for (int c = 0; c < 3; ++c) {
                const double albedo01 = (double(obj.albedo[size_t(c)]) + 1.0) * 0.5;
                img.pixels[(size_t(c) * resolution + y) * resolution + x] =
                    float(albedo01 * shade * 2.0 - 1.0);
            }
        }
    return img;
}

PoseDataset synth_sprites_nvs(uint64_t seed, int n_objects, int views_per_object, int resolution,
                              int pairs_per_object) {
    VP_CHECK(views_per_object >= 2, "synth_sprites_nvs: need at least 2 views per object");
    Rng rng(hash_combine(seed, 0x3d5));
    PoseDataset ds;
    static const std::array<std::string, 4> palette = {"red", "green", "blue", "yellow"};

    for (int i = 0; i < n_objects; ++i) {
        Rng r = rng.split(uint64_t(i));
        NvsObject obj;
        obj.primitive = r.uniform_int(3);
        auto rgb = color_rgb(palette[size_t(r.uniform_int(4))]);
        // soften the hue so shading is visible
        obj.albedo = {rgb[0] * 0.7f, rgb[1] * 0.7f, rgb[2] * 0.7f};
        obj.size = 0.7f + 0.2f * r.uniformf();

        std::vector<CameraPose> poses;
        std::vector<ImageSample> views;
        for (int vye = 0; vye < views_per_object; ++vye) {
            const double az = r.uniform() * 2.0 * M_PI;
            const double el = r.uniform(-0.7, 0.7);
            CameraPose cam = spherical_to_pose(az, el, 2.5);
            poses.push_back(cam);
            views.push_back(render_view(obj, cam, resolution));
        }

        if (pairs_per_object <= 0) {
            for (int a = 0; a < views_per_object; ++a)
                for (int b = 0; b < views_per_object; ++b) {
                    if (a == b) continue;
                    ds.pairs.push_back({views[size_t(a)], views[size_t(b)],
                                        relative_pose(poses[size_t(a)], poses[size_t(b)])});
                }
        } else {
            for (int p = 0; p < pairs_per_object; ++p) {
                const int a = r.uniform_int(views_per_object);
                int b = r.uniform_int(views_per_object);
                ds.pairs.push_back({views[size_t(a)], views[size_t(b)],
                                    relative_pose(poses[size_t(a)], poses[size_t(b)])});
            }
        }
    }
    ds.manifest.name = "sprites-nvs";
    ds.manifest.count = int(ds.pairs.size());
    ds.manifest.resolution = resolution;
    ds.manifest.modality = "pose-pair";
    ds.manifest.seed = seed;
    return ds;
}

} // namespace vp

#pragma once

#include <string>
#include <vector>

#include "visprior/image.hpp"
#include "visprior/pose.hpp"

namespace vp {

// --- manifests and tensor files ---------------------------------------------

struct DatasetManifest {
    std::string name;
    int count = 0;
    int resolution = 0;
    std::string modality; // image | pose-pair | video | captioned
    uint64_t seed = 0;
    std::string source;   // directory for loaded datasets, empty for synthetic

    std::string to_text() const; // line-oriented key=value, UTF-8
    static DatasetManifest from_text(const std::string& text);
    void save(const std::string& path) const;
    static DatasetManifest load(const std::string& path);
};

// Flat binary tensor file: magic "VPF1", u32 rank, u32 extents, then
// little-endian f32 data.
void write_tensor_file(const std::string& path, const Tensor& t);
Tensor read_tensor_file(const std::string& path);

// --- sample containers -------------------------------------------------------

struct PoseSample {
    ImageSample source;
    ImageSample target;
    CameraPose relative; // source -> target
};

struct VideoSample {
    std::vector<ImageSample> frames; // f0..fn, all same shape
};

struct ImageDataset {
    DatasetManifest manifest;
    std::vector<ImageSample> samples;
    int n_classes = 0;
    std::vector<std::string> vocab; // captioned sets; index 0 is <pad>
};

struct PoseDataset {
    DatasetManifest manifest;
    std::vector<PoseSample> pairs;
};

struct VideoDataset {
    DatasetManifest manifest;
    std::vector<VideoSample> clips;
};

// Image dataset directory: manifest.txt + images.vpf (+ labels.vpf,
// captions.vpf when present).
void save_image_dataset(const std::string& dir, const ImageDataset& ds);
ImageDataset load_image_dataset(const std::string& dir);

// --- loaders ------------------------------------------------------------------

// Decodes every supported raster file under path (PNG/PPM/PGM) in
// lexicographic order, center-crops to square, resizes to resolution and
// normalizes to [-1,1]. Unreadable files are skipped with a warning on
// stderr; an empty directory is an error.
ImageDataset load_image_dir(const std::string& path, int resolution);

// --- caption grammar ----------------------------------------------------------

// Closed compositional grammar: color shape [relation color shape]. The
// caption is a sound description of the rendered pixels by construction,
// which is what makes text-image alignment machine-checkable.
struct CaptionGrammar {
    std::vector<std::string> colors;
    std::vector<std::string> shapes;
    std::vector<std::string> relations; // empty => single-object captions

    static CaptionGrammar single();     // 4 colors x 3 shapes, one object
    static CaptionGrammar pairs();      // adds spatial relations

    std::vector<std::string> vocabulary() const; // <pad> + words, <= 64 symbols
    int caption_length() const { return relations.empty() ? 2 : 5; }
    int n_classes() const { return int(colors.size() * shapes.size()); }
};

// Exact rasterizer pieces shared by the generators and their test oracles.
enum class SpriteShape { Circle = 0, Square = 1, Triangle = 2 };
std::array<float, 3> color_rgb(const std::string& name);
std::vector<char> shape_mask(SpriteShape shape, float cx, float cy, float radius, int h, int w);
void draw_shape(Tensor& pixels, SpriteShape shape, float cx, float cy, float radius,
                const std::array<float, 3>& rgb);

constexpr float kSpriteBackground = -0.85f;

// --- synthetic generators (pure functions of their seed) ----------------------

ImageDataset synth_captioned_shapes(uint64_t seed, int n, int resolution, const CaptionGrammar& grammar);

// Moving sprite clip with integer positions/velocities; reflects off borders.
struct MovingSpriteSpec {
    SpriteShape shape = SpriteShape::Square;
    std::array<float, 3> rgb = {1.0f, -1.0f, -1.0f};
    int cx = 0, cy = 0;   // start center, pixels
    int vx = 0, vy = 0;   // pixels per frame
    int radius = 4;
};
VideoSample render_moving_clip(const MovingSpriteSpec& spec, int frames, int resolution);
VideoDataset synth_moving_sprites(uint64_t seed, int n_clips, int frames, int resolution);

// Flat-shaded primitive renderer for novel-view pairs: cube/sphere/pyramid
// with per-object albedo on a fixed-radius orbit looking at the origin.
// Shading uses a camera headlight, so a sphere renders identically from any
// azimuth; the renderer is an exact oracle for that symmetry.
struct NvsObject {
    int primitive = 0; // 0 cube, 1 sphere, 2 pyramid
    std::array<float, 3> albedo = {0.8f, 0.3f, 0.3f};
    float size = 0.8f;
};
ImageSample render_view(const NvsObject& obj, const CameraPose& cam, int resolution,
                        double fov_deg = 45.0);

PoseDataset synth_sprites_nvs(uint64_t seed, int n_objects, int views_per_object, int resolution,
                              int pairs_per_object = 0); // 0 => all ordered pairs

} // namespace vp

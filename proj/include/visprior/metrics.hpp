#pragma once

#include <optional>
#include <string>
#include <vector>

#include "visprior/encoder.hpp"
#include "visprior/image.hpp"

namespace vp {

// Gaussian fit of a feature set: mean and unbiased covariance, double
// precision throughout.
struct FeatureStats {
    int dim = 0;
    int64_t count = 0;
    std::vector<double> mean; // d
    std::vector<double> cov;  // d*d, symmetric
};

// features [n, d], n >= 2; warns on stderr when n < d.
FeatureStats feature_stats(const Tensor& features);
// CLS-token wrapper over the frozen encoder.
FeatureStats feature_stats(const std::vector<ImageSample>& images, const VisionEncoder& enc);

// Symmetric PSD square root via Jacobi eigendecomposition of the symmetrized
// input. Errors when an eigenvalue falls below -1e-5 or the reconstruction
// residual exceeds 1e-4 relative.
std::vector<double> matrix_sqrt_psd(const std::vector<double>& m, int d);

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), the trace term computed
// through sqrt(Sa)^T Sb sqrt(Sa); tiny negative residue (> -1e-5) clamps to 0.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// 10*log10(max_val^2 / MSE), capped at 100 dB when MSE < 1e-10.
double psnr(const ImageSample& a, const ImageSample& b, double max_val = 2.0);

// Uniform 7x7 window, standard stabilization constants, mean over windows and
// channels; value in [-1, 1].
double ssim(const ImageSample& a, const ImageSample& b, double max_val = 2.0);

enum class InterpMode { Lerp, Slerp };

// Endpoint-exact interpolation between two condition token sets: lerp is
// per-element affine; slerp rotates each token on the unit sphere with the
// magnitude lerped. steps >= 2.
std::vector<ConditionTokens> condition_interpolate(const ConditionTokens& a, const ConditionTokens& b,
                                                   int steps, InterpMode mode);

// --- curves and reports ---------------------------------------------------------

struct MetricPoint {
    int64_t step = 0;
    std::string name;
    double value = 0.0;
};

// Ordered (step, name, value) records; steps strictly increase per name.
struct MetricCurve {
    std::vector<MetricPoint> points;

    void append(int64_t step, const std::string& name, double value);
    std::vector<MetricPoint> series(const std::string& name) const;
    std::string to_jsonl() const;
    static MetricCurve from_jsonl(const std::string& text);
    void save(const std::string& path) const;
    static MetricCurve load(const std::string& path);
};

struct MetricReport {
    std::vector<MetricPoint> metrics;
    std::string dataset_hash;
    std::string checkpoint_hash;
    uint64_t seed = 0;

    void add(const std::string& name, double value, int64_t step = 0);
    std::string to_jsonl() const; // one metric per line with provenance fields
    void save(const std::string& path) const;
    static MetricReport load(const std::string& path);
};

// First step at which the windowed moving average of a metric crosses the
// threshold in the given direction; nullopt = "never".
enum class CrossDirection { Below, Above };
std::optional<int64_t> steps_to_threshold(const MetricCurve& curve, const std::string& metric,
                                          double threshold, CrossDirection dir, int window = 1);

} // namespace vp

#include "visprior/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace vp {

using json = nlohmann::json;

FeatureStats feature_stats(const Tensor& features) {
    VP_CHECK(features.rank() == 2, "feature_stats: want [n,d]");
    const int n = features.dim(0), d = features.dim(1);
    VP_CHECK(n >= 2, "feature_stats: need at least 2 samples");
    if (n < d)
        std::cerr << "[feature_stats] warning: " << n << " samples for " << d
                  << " dims; covariance estimate will be rank-deficient\n";

    FeatureStats st;
    st.dim = d;
    st.count = n;
    st.mean.assign(size_t(d), 0.0);
    st.cov.assign(size_t(d) * d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) st.mean[size_t(j)] += double(features[size_t(i) * d + j]);
    for (int j = 0; j < d; ++j) st.mean[size_t(j)] /= double(n);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < d; ++a) {
            const double ca = double(features[size_t(i) * d + a]) - st.mean[size_t(a)];
            for (int b = a; b < d; ++b) {
                const double cb = double(features[size_t(i) * d + b]) - st.mean[size_t(b)];
                st.cov[size_t(a) * d + b] += ca * cb;
            }
        }
    for (int a = 0; a < d; ++a)
        for (int b = a; b < d; ++b) {
            const double v = st.cov[size_t(a) * d + b] / double(n - 1); // unbiased
            st.cov[size_t(a) * d + b] = v;
            st.cov[size_t(b) * d + a] = v;
        }
    return st;
}

FeatureStats feature_stats(const std::vector<ImageSample>& images, const VisionEncoder& enc) {
    VP_CHECK(images.size() >= 2, "feature_stats: need at least 2 images");
    return feature_stats(encode_cls_batch(enc, images));
}

namespace {

// cyclic Jacobi sweeps; d stays small (encoder dims), so this is plenty
void jacobi_eig(std::vector<double> a, int d, std::vector<double>& evals, std::vector<double>& evecs) {
    evecs.assign(size_t(d) * d, 0.0);
    for (int i = 0; i < d; ++i) evecs[size_t(i) * d + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += a[size_t(p) * d + q] * a[size_t(p) * d + q];
        if (off < 1e-24) break;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) {
                const double apq = a[size_t(p) * d + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double app = a[size_t(p) * d + p], aqq = a[size_t(q) * d + q];
                const double theta = 0.5 * (aqq - app) / apq;
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = a[size_t(k) * d + p], akq = a[size_t(k) * d + q];
                    a[size_t(k) * d + p] = c * akp - s * akq;
                    a[size_t(k) * d + q] = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = a[size_t(p) * d + k], aqk = a[size_t(q) * d + k];
                    a[size_t(p) * d + k] = c * apk - s * aqk;
                    a[size_t(q) * d + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < d; ++k) {
                    const double vkp = evecs[size_t(k) * d + p], vkq = evecs[size_t(k) * d + q];
                    evecs[size_t(k) * d + p] = c * vkp - s * vkq;
                    evecs[size_t(k) * d + q] = s * vkp + c * vkq;
                }
            }
    }
    evals.resize(size_t(d));
    for (int i = 0; i < d; ++i) evals[size_t(i)] = a[size_t(i) * d + i];
}

std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b, int d) {
    std::vector<double> c(size_t(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            const double v = a[size_t(i) * d + k];
            if (v == 0.0) continue;
            for (int j = 0; j < d; ++j) c[size_t(i) * d + j] += v * b[size_t(k) * d + j];
        }
    return c;
}

double frob(const std::vector<double>& a) {
    double s = 0.0;
    for (double v : a) s += v * v;
    return std::sqrt(s);
}

} // namespace

std::vector<double> matrix_sqrt_psd(const std::vector<double>& m, int d) {
    VP_CHECK(int(m.size()) == d * d, "matrix_sqrt_psd: size mismatch");
    // symmetrize; the contract only admits inputs with real nonnegative
    // spectrum within tolerance
    std::vector<double> sym(size_t(d) * d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            sym[size_t(i) * d + j] = 0.5 * (m[size_t(i) * d + j] + m[size_t(j) * d + i]);

    std::vector<double> evals, evecs;
    jacobi_eig(sym, d, evals, evecs);
    double max_eval = 0.0;
    for (double v : evals) max_eval = std::max(max_eval, std::fabs(v));
    for (double v : evals)
        if (v < -1e-5 * std::max(1.0, max_eval))
            throw std::runtime_error("matrix_sqrt_psd: negative eigenvalue " + std::to_string(v));

    std::vector<double> root(size_t(d) * d, 0.0);
    for (int k = 0; k < d; ++k) {
        const double s = std::sqrt(std::max(0.0, evals[size_t(k)]));
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                root[size_t(i) * d + j] += s * evecs[size_t(i) * d + k] * evecs[size_t(j) * d + k];
    }

    std::vector<double> check = mat_mul(root, root, d);
    for (size_t i = 0; i < check.size(); ++i) check[i] -= sym[i];
    const double rel = frob(check) / std::max(1e-12, frob(sym));
    if (rel > 1e-4)
        throw std::runtime_error("matrix_sqrt_psd: reconstruction residual " + std::to_string(rel));
    return root;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    VP_CHECK(a.dim == b.dim, "frechet_distance: dim mismatch");
    const int d = a.dim;
    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a.mean[size_t(i)] - b.mean[size_t(i)];
        mean_term += diff * diff;
    }

    // Tr((Sa Sb)^{1/2}) = Tr((sqrt(Sa) Sb sqrt(Sa))^{1/2}); the inner matrix
    // is symmetric PSD, which keeps every sqrt on the symmetric path
    std::vector<double> ra = matrix_sqrt_psd(a.cov, d);
    std::vector<double> inner = mat_mul(mat_mul(ra, b.cov, d), ra, d);
    std::vector<double> cross = matrix_sqrt_psd(inner, d);

    double tr = 0.0;
    for (int i = 0; i < d; ++i)
        tr += a.cov[size_t(i) * d + i] + b.cov[size_t(i) * d + i] - 2.0 * cross[size_t(i) * d + i];

    double out = mean_term + tr;
    VP_CHECK(out > -1e-5, "frechet_distance: trace residue " + std::to_string(out) + " beyond clamp");
    return std::max(0.0, out);
}

double psnr(const ImageSample& a, const ImageSample& b, double max_val) {
    VP_CHECK(a.pixels.shape == b.pixels.shape, "psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.pixels.numel(); ++i) {
        const double d = double(a.pixels[i]) - double(b.pixels[i]);
        mse += d * d;
    }
    mse /= double(a.pixels.numel());
    if (mse < 1e-10) return 100.0;
    return std::min(100.0, 10.0 * std::log10(max_val * max_val / mse));
}

double ssim(const ImageSample& a, const ImageSample& b, double max_val) {
    VP_CHECK(a.pixels.shape == b.pixels.shape, "ssim: shape mismatch");
    const int h = a.height(), w = a.width();
    const int win = 7;
    VP_CHECK(h >= win && w >= win, "ssim: image smaller than the 7x7 window");
    const double c1 = (0.01 * max_val) * (0.01 * max_val);
    const double c2 = (0.03 * max_val) * (0.03 * max_val);

    double acc = 0.0;
    int64_t count = 0;
    for (int c = 0; c < 3; ++c) {
        const float* pa = a.pixels.ptr() + size_t(c) * h * w;
        const float* pb = b.pixels.ptr() + size_t(c) * h * w;
        for (int y = 0; y + win <= h; ++y)
            for (int x = 0; x + win <= w; ++x) {
                double ma = 0, mb = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        ma += pa[size_t(y + i) * w + x + j];
                        mb += pb[size_t(y + i) * w + x + j];
                    }
                ma /= win * win;
                mb /= win * win;
                double va = 0, vb = 0, vab = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double da = pa[size_t(y + i) * w + x + j] - ma;
                        const double db = pb[size_t(y + i) * w + x + j] - mb;
                        va += da * da;
                        vb += db * db;
                        vab += da * db;
                    }
                va /= win * win - 1;
                vb /= win * win - 1;
                vab /= win * win - 1;
                acc += ((2 * ma * mb + c1) * (2 * vab + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    }
    return acc / double(count);
}

std::vector<ConditionTokens> condition_interpolate(const ConditionTokens& a, const ConditionTokens& b,
                                                   int steps, InterpMode mode) {
    VP_CHECK(a.tokens.shape == b.tokens.shape, "condition_interpolate: shape mismatch");
    VP_CHECK(steps >= 2, "condition_interpolate: need at least the two endpoints");
    const int m = a.tokens.dim(0), d = a.tokens.dim(1);

    std::vector<ConditionTokens> out;
    for (int s = 0; s < steps; ++s) {
        ConditionTokens ct;
        ct.mode = a.mode;
        if (s == 0) {
            ct.tokens = a.tokens.clone();
            out.push_back(std::move(ct));
            continue;
        }
        if (s == steps - 1) {
            ct.tokens = b.tokens.clone();
            out.push_back(std::move(ct));
            continue;
        }
        const double u = double(s) / double(steps - 1);
        ct.tokens = Tensor::zeros({m, d});
        for (int t = 0; t < m; ++t) {
            const float* ta = a.tokens.ptr() + size_t(t) * d;
            const float* tb = b.tokens.ptr() + size_t(t) * d;
            float* to = ct.tokens.ptr() + size_t(t) * d;
            if (mode == InterpMode::Lerp) {
                for (int i = 0; i < d; ++i) to[i] = float((1.0 - u) * ta[i] + u * tb[i]);
            } else {
                double na = 0, nb = 0, dot = 0;
                for (int i = 0; i < d; ++i) {
                    na += double(ta[i]) * ta[i];
                    nb += double(tb[i]) * tb[i];
                    dot += double(ta[i]) * tb[i];
                }
                na = std::sqrt(na);
                nb = std::sqrt(nb);
                VP_CHECK(na > 1e-12 && nb > 1e-12, "condition_interpolate: zero-norm token under slerp");
                const double cosw = std::clamp(dot / (na * nb), -1.0, 1.0);
                const double omega = std::acos(cosw);
                const double mag = (1.0 - u) * na + u * nb; // magnitude lerped
                if (omega < 1e-7) {
                    for (int i = 0; i < d; ++i)
                        to[i] = float(((1.0 - u) * ta[i] / na + u * tb[i] / nb) * mag);
                } else {
                    const double wa = std::sin((1.0 - u) * omega) / std::sin(omega);
                    const double wb = std::sin(u * omega) / std::sin(omega);
                    for (int i = 0; i < d; ++i)
                        to[i] = float((wa * ta[i] / na + wb * tb[i] / nb) * mag);
                }
            }
        }
        out.push_back(std::move(ct));
    }
    return out;
}

// --- curves / reports -------------------------------------------------------------

void MetricCurve::append(int64_t step, const std::string& name, double value) {
    for (auto it = points.rbegin(); it != points.rend(); ++it)
        if (it->name == name) {
            VP_CHECK(step > it->step, "MetricCurve: steps must strictly increase per metric");
            break;
        }
    points.push_back({step, name, value});
}

std::vector<MetricPoint> MetricCurve::series(const std::string& name) const {
    std::vector<MetricPoint> out;
    for (const auto& p : points)
        if (p.name == name) out.push_back(p);
    return out;
}

std::string MetricCurve::to_jsonl() const {
    std::ostringstream os;
    for (const auto& p : points) {
        json j = {{"step", p.step}, {"name", p.name}, {"value", p.value}};
        os << j.dump() << "\n";
    }
    return os.str();
}

MetricCurve MetricCurve::from_jsonl(const std::string& text) {
    MetricCurve c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        c.points.push_back({j.at("step").get<int64_t>(), j.at("name").get<std::string>(),
                            j.at("value").get<double>()});
    }
    return c;
}

void MetricCurve::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "MetricCurve: cannot write " + path);
    f << to_jsonl();
}

MetricCurve MetricCurve::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "MetricCurve: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_jsonl(ss.str());
}

void MetricReport::add(const std::string& name, double value, int64_t step) {
    metrics.push_back({step, name, value});
}

std::string MetricReport::to_jsonl() const {
    std::ostringstream os;
    for (const auto& p : metrics) {
        json j = {{"name", p.name},
                  {"value", p.value},
                  {"step", p.step},
                  {"dataset_hash", dataset_hash},
                  {"checkpoint_hash", checkpoint_hash},
                  {"seed", seed}};
        os << j.dump() << "\n";
    }
    return os.str();
}

void MetricReport::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "MetricReport: cannot write " + path);
    f << to_jsonl();
}

MetricReport MetricReport::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    VP_CHECK(bool(f), "MetricReport: cannot open " + path);
    MetricReport r;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        r.metrics.push_back({j.at("step").get<int64_t>(), j.at("name").get<std::string>(),
                             j.at("value").get<double>()});
        r.dataset_hash = j.value("dataset_hash", "");
        r.checkpoint_hash = j.value("checkpoint_hash", "");
        r.seed = j.value("seed", uint64_t(0));
    }
    return r;
}

std::optional<int64_t> steps_to_threshold(const MetricCurve& curve, const std::string& metric,
                                          double threshold, CrossDirection dir, int window) {
    VP_CHECK(window >= 1, "steps_to_threshold: window must be >= 1");
    std::vector<MetricPoint> s = curve.series(metric);
    VP_CHECK(!s.empty(), "steps_to_threshold: metric '" + metric + "' absent from curve");
    for (size_t i = 0; i < s.size(); ++i) {
        const size_t lo = i + 1 >= size_t(window) ? i + 1 - size_t(window) : 0;
        double acc = 0.0;
        for (size_t j = lo; j <= i; ++j) acc += s[j].value;
        const double smoothed = acc / double(i - lo + 1);
        if (dir == CrossDirection::Below ? smoothed <= threshold : smoothed >= threshold)
            return s[i].step;
    }
    return std::nullopt;
}

} // namespace vp

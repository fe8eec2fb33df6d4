#include "visprior/pose.hpp"

#include <cmath>

namespace vp {

Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += a[size_t(3 * i + k)] * b[size_t(3 * k + j)];
            c[size_t(3 * i + j)] = acc;
        }
    return c;
}

Mat3 mat3_transpose(const Mat3& a) {
    return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

Vec3 mat3_apply(const Mat3& a, const Vec3& v) {
    return {a[0] * v[0] + a[1] * v[1] + a[2] * v[2], a[3] * v[0] + a[4] * v[1] + a[5] * v[2],
            a[6] * v[0] + a[7] * v[1] + a[8] * v[2]};
}

double mat3_det(const Mat3& a) {
    return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
           a[2] * (a[3] * a[7] - a[4] * a[6]);
}

Vec3 CameraPose::center() const {
    Mat3 rt = mat3_transpose(R);
    Vec3 c = mat3_apply(rt, T);
    return {-c[0], -c[1], -c[2]};
}

bool is_valid_rotation(const Mat3& R, double tol) {
    Mat3 g = mat3_mul(mat3_transpose(R), R);
    Mat3 id = mat3_identity();
    for (int i = 0; i < 9; ++i)
        if (std::fabs(g[size_t(i)] - id[size_t(i)]) > tol) return false;
    return std::fabs(mat3_det(R) - 1.0) <= tol;
}

namespace {
Vec3 normalize(const Vec3& v) {
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    return {v[0] / n, v[1] / n, v[2] / n};
}
Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
} // namespace

CameraPose spherical_to_pose(double azimuth, double elevation, double radius) {
    VP_CHECK(radius > 0.0, "spherical_to_pose: radius must be positive");
    const double ce = std::cos(elevation);
    VP_CHECK(std::fabs(ce) > 1e-6, "spherical_to_pose: elevation at +-90 deg degenerates the up vector");

    const Vec3 c = {radius * ce * std::cos(azimuth), radius * ce * std::sin(azimuth),
                    radius * std::sin(elevation)};
    const Vec3 fwd = normalize({-c[0], -c[1], -c[2]}); // toward origin
    const Vec3 up = {0.0, 0.0, 1.0};
    const Vec3 right = normalize(cross(fwd, up));
    const Vec3 down = cross(fwd, right); // completes x right, y down, z forward

    CameraPose p;
    p.R = {right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2]};
    Vec3 rc = mat3_apply(p.R, c);
    p.T = {-rc[0], -rc[1], -rc[2]};
    return p;
}

CameraPose relative_pose(const CameraPose& a, const CameraPose& b) {
    CameraPose rel;
    rel.R = mat3_mul(b.R, mat3_transpose(a.R));
    Vec3 ra = mat3_apply(rel.R, a.T);
    rel.T = {b.T[0] - ra[0], b.T[1] - ra[1], b.T[2] - ra[2]};
    return rel;
}

CameraPose compose_pose(const CameraPose& rel, const CameraPose& a) {
    CameraPose out;
    out.R = mat3_mul(rel.R, a.R);
    Vec3 ra = mat3_apply(rel.R, a.T);
    out.T = {ra[0] + rel.T[0], ra[1] + rel.T[1], ra[2] + rel.T[2]};
    return out;
}

std::array<float, 12> flatten_pose(const CameraPose& p) {
    std::array<float, 12> out{};
    for (int i = 0; i < 9; ++i) out[size_t(i)] = float(p.R[size_t(i)]);
    for (int i = 0; i < 3; ++i) out[size_t(9 + i)] = float(p.T[size_t(i)]);
    return out;
}

double pose_distance(const CameraPose& a, const CameraPose& b) {
    double mx = 0.0;
    for (int i = 0; i < 9; ++i) mx = std::max(mx, std::fabs(a.R[size_t(i)] - b.R[size_t(i)]));
    for (int i = 0; i < 3; ++i) mx = std::max(mx, std::fabs(a.T[size_t(i)] - b.T[size_t(i)]));
    return mx;
}

} // namespace vp

#pragma once

#include <array>

#include "visprior/tensor.hpp"

namespace vp {

using Mat3 = std::array<double, 9>;  // row-major
using Vec3 = std::array<double, 3>;

Mat3 mat3_identity();
Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Mat3 mat3_transpose(const Mat3& a);
Vec3 mat3_apply(const Mat3& a, const Vec3& v);
double mat3_det(const Mat3& a);

// World-to-camera extrinsic: x_cam = R * x_world + T.
// Convention (fixed project-wide): right-handed world with +z up; the camera
// looks at the origin; camera axes are x right, y down, z forward.
struct CameraPose {
    Mat3 R = mat3_identity();
    Vec3 T = {0.0, 0.0, 0.0};

    Vec3 center() const; // camera position in world coordinates: -R^T T
};

// True when R^T R = I and det(R) = +1 within tol.
bool is_valid_rotation(const Mat3& R, double tol = 1e-5);

// Camera on a radius-r orbit at (azimuth, elevation), looking at the origin.
// Throws when elevation is so close to +-90 deg that the up vector degenerates.
CameraPose spherical_to_pose(double azimuth, double elevation, double radius);

// Pose of b relative to a: R_rel = R_b R_a^T, T_rel = T_b - R_rel T_a.
CameraPose relative_pose(const CameraPose& a, const CameraPose& b);

// Applies rel on top of a; relative_pose(a, b) composed onto a gives b.
CameraPose compose_pose(const CameraPose& rel, const CameraPose& a);

// Rotation 9 values row-major, then translation 3: the 12-vector fed to the
// pose-condition embedding.
std::array<float, 12> flatten_pose(const CameraPose& p);

double pose_distance(const CameraPose& a, const CameraPose& b); // max abs entry difference

} // namespace vp

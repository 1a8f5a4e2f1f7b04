#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <numbers>

#include "saor/core/rotation.hpp"
#include "saor/diffcore/ops.hpp"

namespace saor::render {

/// Distance at which a unit sphere spans `fill` of the image height.
inline double fitting_distance(double fov_deg, double fill) {
  const double half = fov_deg * std::numbers::pi / 360.0;
  return 1.0 / std::sin(std::atan(fill * std::tan(half)));
}

struct CameraConfig {
  double fov_deg = 30.0;
  double distance = fitting_distance(30.0, 0.7);
  double near = 0.1;
  double far = 10.0;
};

/// Decoded pose: azimuth, elevation, roll in degrees; translation in object units.
struct CameraPose {
  double azimuth = 0, elevation = 0, roll = 0;
  double tx = 0, ty = 0, tz = 0;

  std::array<double, 6> as_array() const { return {azimuth, elevation, roll, tx, ty, tz}; }
};

inline std::atomic<std::uint64_t>& near_clamp_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

/// Object-to-camera rotation Rz(roll) * Rx(elevation) * Ry(azimuth).
template <typename T>
Mat3<T> view_rotation(T az_rad, T el_rad, T roll_rad) {
  return matmul3(rot_z(roll_rad), matmul3(rot_x(el_rad), rot_y(az_rad)));
}

/// Maps object points into the camera frame p = R s + t + (0, 0, d) and divides
/// by depth. pose is [6] (az°, el°, roll°, tx, ty, tz); result is [N,3] with
/// (x_ndc, y_ndc, z_camera). Depth below `near` is clamped.
template <typename T>
ad::BasicTensor<T> view_project(const ad::BasicTensor<T>& S, const ad::BasicTensor<T>& pose,
                                const CameraConfig& cam = {}) {
  if (S.rank() != 2 || S.dim(1) != 3) throw ShapeError("view_project expects [N,3], got " + ad::to_string(S.shape()));
  if (pose.size() != 6) throw ShapeError("camera pose must have 6 values, got " + ad::to_string(pose.shape()));
  const std::size_t N = S.dim(0);
  const T deg = T(std::numbers::pi / 180.0);
  const auto pv = pose.values();
  const auto R = view_rotation(pv[0] * deg, pv[1] * deg, pv[2] * deg);
  const T focal = T(1.0 / std::tan(cam.fov_deg * std::numbers::pi / 360.0));
  const T d = T(cam.distance), near = T(cam.near);
  const auto s = S.values();
  std::vector<T> out(N * 3);
  std::uint64_t clamped = 0;
  for (std::size_t i = 0; i < N; ++i) {
    T p[3];
    for (int a = 0; a < 3; ++a) p[a] = R[a * 3] * s[i * 3] + R[a * 3 + 1] * s[i * 3 + 1] + R[a * 3 + 2] * s[i * 3 + 2] + pv[3 + a];
    p[2] += d;
    if (p[2] < near) {
      p[2] = near;
      ++clamped;
    }
    out[i * 3] = focal * p[0] / p[2];
    out[i * 3 + 1] = focal * p[1] / p[2];
    out[i * 3 + 2] = p[2];
  }
  if (clamped) {
    near_clamp_count() += clamped;
    log::warn("view_project: %llu vertices clamped to the near plane", static_cast<unsigned long long>(clamped));
  }
  return ad::make_result<T>("view_project", {N, 3}, std::move(out), {S, pose}, [N, focal, d, near](ad::Node<T>& self) {
    auto& nS = *self.parents[0];
    auto& nP = *self.parents[1];
    const T deg = T(std::numbers::pi / 180.0);
    const auto& pv = nP.value;
    const T az = pv[0] * deg, el = pv[1] * deg, ro = pv[2] * deg;
    const auto R = view_rotation(az, el, ro);
    const auto rz = rot_z(ro), rx = rot_x(el), ry = rot_y(az);
    const std::array<Mat3<T>, 3> dR = {matmul3(rz, matmul3(rx, drot_y(az))), matmul3(rz, matmul3(drot_x(el), ry)),
                                       matmul3(drot_z(ro), matmul3(rx, ry))};
    const auto& s = nS.value;
    std::vector<T> gS(N * 3, T(0));
    T gP[6] = {};
    for (std::size_t i = 0; i < N; ++i) {
      T p[3];
      for (int a = 0; a < 3; ++a) p[a] = R[a * 3] * s[i * 3] + R[a * 3 + 1] * s[i * 3 + 1] + R[a * 3 + 2] * s[i * 3 + 2] + pv[3 + a];
      p[2] += d;
      const bool live_z = p[2] >= near;
      const T z = live_z ? p[2] : near;
      const T* g = &self.grad[i * 3];
      // d(out)/dp
      T gp[3];
      gp[0] = g[0] * focal / z;
      gp[1] = g[1] * focal / z;
      gp[2] = live_z ? (-g[0] * focal * p[0] / (z * z) - g[1] * focal * p[1] / (z * z) + g[2]) : T(0);
      for (int b = 0; b < 3; ++b) gS[i * 3 + b] += R[b] * gp[0] + R[3 + b] * gp[1] + R[6 + b] * gp[2];
      for (int j = 0; j < 3; ++j) {
        T acc = T(0);
        for (int a = 0; a < 3; ++a)
          acc += gp[a] * (dR[j][a * 3] * s[i * 3] + dR[j][a * 3 + 1] * s[i * 3 + 1] + dR[j][a * 3 + 2] * s[i * 3 + 2]);
        gP[j] += acc * deg;
      }
      for (int a = 0; a < 3; ++a) gP[3 + a] += gp[a];
    }
    if (nS.requires_grad) {
      auto& dst = nS.grad_buffer();
      for (std::size_t e = 0; e < gS.size(); ++e) dst[e] += gS[e];
    }
    if (nP.requires_grad) {
      auto& dst = nP.grad_buffer();
      for (int e = 0; e < 6; ++e) dst[e] += gP[e];
    }
  });
}

}  // namespace saor::render

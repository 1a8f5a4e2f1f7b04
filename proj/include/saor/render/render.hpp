#pragma once

#include "saor/render/camera.hpp"
#include "saor/render/rasterizer.hpp"

namespace saor::render {

template <typename T>
struct BasicRenderOutput {
  ad::BasicTensor<T> rgb;         // [3,H,W]
  ad::BasicTensor<T> silhouette;  // [H,W]
  ad::BasicTensor<T> depth;       // [H,W]
};
using RenderOutput = BasicRenderOutput<float>;

struct RenderConfig {
  CameraConfig camera;
  RasterConfig raster;

  static RenderConfig square(std::size_t size) {
    RenderConfig c;
    c.raster.height = c.raster.width = size;
    return c;
  }
};

template <typename T>
BasicRenderOutput<T> unpack(const ad::BasicTensor<T>& packed) {
  const std::size_t H = packed.dim(1), W = packed.dim(2);
  return {ad::slice_rows(packed, 0, 3), ad::reshape(ad::slice_rows(packed, 3, 4), {H, W}),
          ad::reshape(ad::slice_rows(packed, 4, 5), {H, W})};
}

/// Π(S, T, P). pose is [6]: azimuth°, elevation°, roll°, tx, ty, tz.
template <typename T>
BasicRenderOutput<T> render(const mesh::TriMesh& topology, const ad::BasicTensor<T>& S,
                            const ad::BasicTensor<T>& texture, const ad::BasicTensor<T>& pose,
                            const RenderConfig& cfg = {}) {
  RasterConfig raster = cfg.raster;
  raster.near = cfg.camera.near;
  raster.far = cfg.camera.far;
  const auto screen = view_project(S, pose, cfg.camera);
  return unpack(soft_rasterize(topology.faces, topology.face_uv, screen, texture, raster));
}

template <typename T>
ad::BasicTensor<T> pose_tensor(const CameraPose& p) {
  const auto a = p.as_array();
  return ad::BasicTensor<T>::constant({6}, {T(a[0]), T(a[1]), T(a[2]), T(a[3]), T(a[4]), T(a[5])});
}

}  // namespace saor::render

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <span>
#include <string>

#include "saor/mesh/trimesh.hpp"

namespace saor::mesh {

/// Writes positions ([N*3] flat) with the mesh's faces and per-corner UVs as
/// Wavefront OBJ. Texture coordinates are deduplicated; indices are 1-based.
inline void export_obj(const TriMesh& m, std::span<const float> positions, const std::string& path) {
  if (positions.size() != m.vertices.size() * 3) {
    throw std::invalid_argument("export_obj: " + std::to_string(positions.size() / 3) + " positions for a mesh with " +
                                std::to_string(m.vertices.size()) + " vertices");
  }
  for (float p : positions) {
    if (!std::isfinite(p)) throw NumericError("export_obj", "non-finite vertex position");
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  char line[128];
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    std::snprintf(line, sizeof line, "v %.6f %.6f %.6f\n", positions[i * 3], positions[i * 3 + 1], positions[i * 3 + 2]);
    f << line;
  }
  std::map<std::pair<float, float>, std::size_t> vt_index;
  std::vector<std::array<std::size_t, 3>> corner_vt(m.faces.size());
  const bool has_uv = m.face_uv.size() == m.faces.size();
  if (has_uv) {
    for (std::size_t fi = 0; fi < m.faces.size(); ++fi) {
      for (int k = 0; k < 3; ++k) {
        const auto& uv = m.face_uv[fi][k];
        auto [it, inserted] = vt_index.try_emplace({uv[0], uv[1]}, vt_index.size() + 1);
        if (inserted) {
          std::snprintf(line, sizeof line, "vt %.6f %.6f\n", uv[0], uv[1]);
          f << line;
        }
        corner_vt[fi][k] = it->second;
      }
    }
  }
  for (std::size_t fi = 0; fi < m.faces.size(); ++fi) {
    const auto& t = m.faces[fi];
    if (has_uv) {
      f << "f " << t[0] + 1 << '/' << corner_vt[fi][0] << ' ' << t[1] + 1 << '/' << corner_vt[fi][1] << ' '
        << t[2] + 1 << '/' << corner_vt[fi][2] << '\n';
    } else {
      f << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
    }
  }
  if (!f) throw IoError("failed writing " + path);
}

/// ASCII PLY with per-vertex uchar RGB, used for part-label visualisation.
inline void export_ply(const TriMesh& m, std::span<const float> positions,
                       std::span<const std::array<std::uint8_t, 3>> colors, const std::string& path) {
  if (positions.size() != m.vertices.size() * 3 || colors.size() != m.vertices.size()) {
    throw std::invalid_argument("export_ply: positions/colors do not match the mesh");
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "ply\nformat ascii 1.0\nelement vertex " << m.vertices.size()
    << "\nproperty float x\nproperty float y\nproperty float z\n"
       "property uchar red\nproperty uchar green\nproperty uchar blue\nelement face "
    << m.faces.size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  char line[160];
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    std::snprintf(line, sizeof line, "%.6f %.6f %.6f %u %u %u\n", positions[i * 3], positions[i * 3 + 1],
                  positions[i * 3 + 2], colors[i][0], colors[i][1], colors[i][2]);
    f << line;
  }
  for (const auto& t : m.faces) f << "3 " << t[0] << ' ' << t[1] << ' ' << t[2] << '\n';
  if (!f) throw IoError("failed writing " + path);
}

/// Distinct, stable colour for a part index.
inline std::array<std::uint8_t, 3> part_color(std::size_t part) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 12> palette = {{
      {230, 25, 75}, {60, 180, 75}, {255, 225, 25}, {0, 130, 200}, {245, 130, 48}, {145, 30, 180},
      {70, 240, 240}, {240, 50, 230}, {210, 245, 60}, {250, 190, 212}, {0, 128, 128}, {170, 110, 40}}};
  if (part < palette.size()) return palette[part];
  const auto h = static_cast<std::uint8_t>((part * 67) % 256);
  return {h, static_cast<std::uint8_t>(255 - h), static_cast<std::uint8_t>((h * 3) % 256)};
}

}  // namespace saor::mesh

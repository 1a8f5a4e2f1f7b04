#pragma once

#include "saor/mesh/trimesh.hpp"

namespace saor::testing {

inline mesh::TriMesh tetrahedron() {
  mesh::TriMesh m;
  m.vertices = {{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};
  m.faces = {{0, 1, 2}, {0, 3, 1}, {0, 2, 3}, {1, 3, 2}};
  return m;
}

/// Axis-aligned unit cube, two triangles per side, outward CCW.
inline mesh::TriMesh unit_cube() {
  mesh::TriMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  m.faces = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
             {2, 3, 7}, {2, 7, 6}, {1, 2, 6}, {1, 6, 5}, {0, 4, 7}, {0, 7, 3}};
  return m;
}

/// Flat 3x3-vertex grid in the xy-plane (8 triangles, all coplanar).
inline mesh::TriMesh flat_grid() {
  mesh::TriMesh m;
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) m.vertices.push_back({float(x), float(y), 0.f});
  for (std::uint32_t y = 0; y < 2; ++y)
    for (std::uint32_t x = 0; x < 2; ++x) {
      const std::uint32_t a = y * 3 + x, b = a + 1, c = a + 3, d = a + 4;
      m.faces.push_back({a, b, d});
      m.faces.push_back({a, d, c});
    }
  return m;
}

}  // namespace saor::testing

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <unordered_map>
#include <utility>
#include <vector>

#include "saor/core/error.hpp"

namespace saor::mesh {

using Vec3 = std::array<float, 3>;
using Vec2 = std::array<float, 2>;
using Face = std::array<std::uint32_t, 3>;

/// Triangle mesh with fixed connectivity. Faces are counter-clockwise when
/// seen from outside. Texture coordinates are stored per face corner so that
/// the UV seam duplicates coordinates but never vertices.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;
  std::vector<std::array<Vec2, 3>> face_uv;

  std::size_t num_vertices() const { return vertices.size(); }
  std::size_t num_faces() const { return faces.size(); }

  std::vector<float> flat_vertices() const {
    std::vector<float> out;
    out.reserve(vertices.size() * 3);
    for (const auto& v : vertices) out.insert(out.end(), v.begin(), v.end());
    return out;
  }
};

/// Reflection partner of every vertex across the xy-plane.
struct SymmetryMap {
  std::vector<std::uint32_t> mirror;
  std::vector<std::uint32_t> positive_set;  // z >= 0, including the plane itself
  std::vector<bool> on_plane;
};

/// Pairs of faces sharing an edge; one entry per undirected edge.
struct FaceAdjacency {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
};

/// Sparse row-compressed operator; row i holds L[i][i] = 1 and -1/deg(i)
/// for each neighbour.
struct SparseOperator {
  std::size_t rows = 0;
  std::vector<std::size_t> row_ptr;
  std::vector<std::uint32_t> cols;
  std::vector<float> vals;
};

namespace detail {

inline std::uint64_t edge_key(std::uint32_t a, std::uint32_t b) {
  if (a > b) std::swap(a, b);
  return (static_cast<std::uint64_t>(a) << 32) | b;
}

}  // namespace detail

/// Undirected edges as (min, max) vertex pairs with the faces that use them.
inline std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::uint32_t>> edge_faces(const TriMesh& m) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::uint32_t>> edges;
  for (std::uint32_t f = 0; f < m.faces.size(); ++f) {
    for (int k = 0; k < 3; ++k) {
      std::uint32_t a = m.faces[f][k], b = m.faces[f][(k + 1) % 3];
      if (a > b) std::swap(a, b);
      edges[{a, b}].push_back(f);
    }
  }
  return edges;
}

inline std::size_t edge_count(const TriMesh& m) { return edge_faces(m).size(); }

inline FaceAdjacency face_adjacency(const TriMesh& m) {
  FaceAdjacency adj;
  for (const auto& [edge, faces] : edge_faces(m)) {
    if (faces.size() != 2) {
      throw MeshError("edge (" + std::to_string(edge.first) + "," + std::to_string(edge.second) + ") shared by " +
                      std::to_string(faces.size()) + " faces; mesh is not a closed manifold");
    }
    adj.pairs.emplace_back(faces[0], faces[1]);
  }
  return adj;
}

/// Equirectangular coordinates about the z axis:
/// u = (atan2(y,x)+pi)/2pi, v = (asin(z)+pi/2)/pi.
inline Vec2 sphere_uv_of(const Vec3& p) {
  const double pi = std::numbers::pi;
  const double r = std::sqrt(double(p[0]) * p[0] + double(p[1]) * p[1] + double(p[2]) * p[2]);
  const double z = r > 0 ? std::clamp(double(p[2]) / r, -1.0, 1.0) : 0.0;
  const double u = (std::atan2(double(p[1]), double(p[0])) + pi) / (2 * pi);
  const double v = (std::asin(z) + pi / 2) / pi;
  return {static_cast<float>(std::clamp(u, 0.0, 1.0)), static_cast<float>(v)};
}

/// Assigns per-corner UVs. Faces straddling the u seam get their small-u
/// corners shifted by +1 (the texture sampler wraps in u); corners on the
/// pole axis take the mean u of the other corners.
inline void assign_sphere_uv(TriMesh& m) {
  m.face_uv.resize(m.faces.size());
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    std::array<Vec2, 3> uv;
    std::array<bool, 3> pole{};
    for (int k = 0; k < 3; ++k) {
      const auto& p = m.vertices[m.faces[f][k]];
      uv[k] = sphere_uv_of(p);
      pole[k] = double(p[0]) * p[0] + double(p[1]) * p[1] < 1e-12;
    }
    float lo = 2.f, hi = -1.f;
    for (int k = 0; k < 3; ++k)
      if (!pole[k]) { lo = std::min(lo, uv[k][0]); hi = std::max(hi, uv[k][0]); }
    if (hi - lo > 0.5f) {
      for (int k = 0; k < 3; ++k)
        if (!pole[k] && uv[k][0] < 0.5f) uv[k][0] += 1.0f;
    }
    float sum = 0.f;
    int n = 0;
    for (int k = 0; k < 3; ++k)
      if (!pole[k]) { sum += uv[k][0]; ++n; }
    for (int k = 0; k < 3; ++k)
      if (pole[k]) uv[k][0] = n ? sum / n : 0.5f;
    m.face_uv[f] = uv;
  }
}

/// Per-vertex equirectangular coordinates (before seam duplication).
inline std::vector<Vec2> sphere_uv(const TriMesh& m) {
  std::vector<Vec2> uv(m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) uv[i] = sphere_uv_of(m.vertices[i]);
  return uv;
}

/// Pairs every vertex with its reflection (x, y, -z). Throws if any vertex
/// has no partner within `tol`.
inline SymmetryMap symmetry_pairs(const TriMesh& m, double tol = 1e-6) {
  const std::size_t n = m.vertices.size();
  SymmetryMap s;
  s.mirror.assign(n, UINT32_MAX);
  s.on_plane.assign(n, false);
  // Spatial hash on a grid much coarser than tol; probe neighbouring cells.
  const double cell = std::max(tol * 4.0, 1e-5);
  auto key = [cell](double x, double y, double z) {
    const auto q = [cell](double v) { return static_cast<std::int64_t>(std::floor(v / cell)); };
    return std::array<std::int64_t, 3>{q(x), q(y), q(z)};
  };
  struct Hash {
    std::size_t operator()(const std::array<std::int64_t, 3>& k) const {
      return static_cast<std::size_t>(k[0] * 73856093LL ^ k[1] * 19349663LL ^ k[2] * 83492791LL);
    }
  };
  std::unordered_map<std::array<std::int64_t, 3>, std::vector<std::uint32_t>, Hash> grid;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto& p = m.vertices[i];
    grid[key(p[0], p[1], p[2])].push_back(i);
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto& p = m.vertices[i];
    if (std::abs(p[2]) < tol) {
      s.mirror[i] = i;
      s.on_plane[i] = true;
      continue;
    }
    const auto k = key(p[0], p[1], -double(p[2]));
    double best = tol;
    std::uint32_t found = UINT32_MAX;
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dz = -1; dz <= 1; ++dz) {
          auto it = grid.find({k[0] + dx, k[1] + dy, k[2] + dz});
          if (it == grid.end()) continue;
          for (auto j : it->second) {
            const auto& q = m.vertices[j];
            const double d = std::max({std::abs(double(q[0]) - p[0]), std::abs(double(q[1]) - p[1]),
                                       std::abs(double(q[2]) + p[2])});
            if (d <= best && j != i) {
              best = d;
              found = j;
            }
          }
        }
    if (found == UINT32_MAX) {
      throw MeshError("vertex " + std::to_string(i) + " has no mirror partner; mesh is not symmetric about the xy-plane");
    }
    s.mirror[i] = found;
  }
  for (std::uint32_t i = 0; i < n; ++i) {
    if (s.mirror[s.mirror[i]] != i) throw MeshError("mirror pairing is not an involution at vertex " + std::to_string(i));
    if (m.vertices[i][2] >= 0.f || s.on_plane[i]) s.positive_set.push_back(i);
  }
  return s;
}

/// Makes the mirror relation exact: negative-side vertices become the
/// z-negation of their partners and plane vertices get z = 0.
inline void symmetrize(TriMesh& m, const SymmetryMap& s) {
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    if (s.on_plane[i]) {
      m.vertices[i][2] = 0.f;
    } else if (m.vertices[i][2] < 0.f) {
      const auto& p = m.vertices[s.mirror[i]];
      m.vertices[i] = {p[0], p[1], -p[2]};
    }
  }
}

/// Regular icosahedron refined `subdivisions` times by edge midpoints pushed
/// to the unit sphere. V = 10*4^s + 2, F = 20*4^s.
inline TriMesh icosphere(int subdivisions) {
  if (subdivisions < 0 || subdivisions > 6) {
    throw std::invalid_argument("icosphere subdivisions must be in [0, 6], got " + std::to_string(subdivisions));
  }
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<std::array<double, 3>> v = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  std::vector<Face> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                         {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                         {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                         {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  auto normalize = [](std::array<double, 3> p) {
    const double r = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    return std::array<double, 3>{p[0] / r, p[1] / r, p[2] / r};
  };
  for (auto& p : v) p = normalize(p);
  for (int s = 0; s < subdivisions; ++s) {
    std::unordered_map<std::uint64_t, std::uint32_t> midpoint;
    auto mid = [&](std::uint32_t a, std::uint32_t b) {
      const auto k = detail::edge_key(a, b);
      if (auto it = midpoint.find(k); it != midpoint.end()) return it->second;
      const auto& p = v[a];
      const auto& q = v[b];
      v.push_back(normalize({(p[0] + q[0]) * 0.5, (p[1] + q[1]) * 0.5, (p[2] + q[2]) * 0.5}));
      const auto idx = static_cast<std::uint32_t>(v.size() - 1);
      midpoint.emplace(k, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const auto a = mid(tri[0], tri[1]);
      const auto b = mid(tri[1], tri[2]);
      const auto c = mid(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  TriMesh m;
  m.vertices.reserve(v.size());
  for (const auto& p : v) m.vertices.push_back({float(p[0]), float(p[1]), float(p[2])});
  m.faces = std::move(f);
  symmetrize(m, symmetry_pairs(m));
  assign_sphere_uv(m);
  return m;
}

/// Vertex neighbourhoods from the face list, sorted ascending.
inline std::vector<std::vector<std::uint32_t>> vertex_neighbors(const TriMesh& m) {
  std::vector<std::vector<std::uint32_t>> nb(m.vertices.size());
  for (const auto& [edge, faces] : edge_faces(m)) {
    nb[edge.first].push_back(edge.second);
    nb[edge.second].push_back(edge.first);
  }
  for (auto& row : nb) std::sort(row.begin(), row.end());
  return nb;
}

/// Uniform graph Laplacian.
inline SparseOperator uniform_laplacian(const TriMesh& m) {
  const auto nb = vertex_neighbors(m);
  SparseOperator L;
  L.rows = m.vertices.size();
  L.row_ptr.push_back(0);
  for (std::uint32_t i = 0; i < L.rows; ++i) {
    L.cols.push_back(i);
    L.vals.push_back(1.0f);
    const float w = nb[i].empty() ? 0.f : -1.0f / static_cast<float>(nb[i].size());
    for (auto j : nb[i]) {
      L.cols.push_back(j);
      L.vals.push_back(w);
    }
    L.row_ptr.push_back(L.cols.size());
  }
  return L;
}

}  // namespace saor::mesh

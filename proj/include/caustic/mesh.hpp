// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>

#include "caustic/geometry.hpp"

namespace caustic {

// Regular triangulated grid over [0, width] x [0, height]. Vertex (i, j)
// sits at index j*nx + i; every cell splits along its (i, j) -> (i+1, j+1)
// diagonal into a lower face (v00, v10, v11) and an upper face
// (v00, v11, v01), both counter-clockwise when seen from +z.
struct HeightFieldMesh {
  int nx = 0, ny = 0;
  double width = 0, height = 0;
  std::vector<Vec3d> vertices;
  // bit 0: x frozen, bit 1: y frozen (boundary vertices stay on the boundary)
  std::vector<uint8_t> frozen;

  int vertex_count() const { return nx * ny; }
  int face_count() const { return 2 * (nx - 1) * (ny - 1); }
  int vertex_index(int i, int j) const { return j * nx + i; }

  std::array<int, 3> face_vertices(int f) const {
    const int cell = f / 2;
    const int ci = cell % (nx - 1);
    const int cj = cell / (nx - 1);
    const int v00 = vertex_index(ci, cj);
    const int v10 = vertex_index(ci + 1, cj);
    const int v11 = vertex_index(ci + 1, cj + 1);
    const int v01 = vertex_index(ci, cj + 1);
    if (f % 2 == 0) return {v00, v10, v11};
    return {v00, v11, v01};
  }
};

inline HeightFieldMesh build_initial_mesh(double width, double height, int nx, int ny, double z0) {
  if (nx < 2 || ny < 2) throw Error("mesh needs at least 2x2 vertices");
  if (width <= 0 || height <= 0) throw Error("mesh domain must have positive extent");
  HeightFieldMesh m;
  m.nx = nx;
  m.ny = ny;
  m.width = width;
  m.height = height;
  m.vertices.resize(static_cast<std::size_t>(nx) * ny);
  m.frozen.resize(m.vertices.size(), 0);
  const double dx = width / (nx - 1);
  const double dy = height / (ny - 1);
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      const int v = m.vertex_index(i, j);
      m.vertices[v] = {i * dx, j * dy, z0};
      uint8_t f = 0;
      if (i == 0 || i == nx - 1) f |= 1;
      if (j == 0 || j == ny - 1) f |= 2;
      m.frozen[v] = f;
    }
  }
  return m;
}

// Unit normal with positive z for any valid height field (CCW faces).
inline Vec3d face_normal(const HeightFieldMesh& m, int f) {
  const auto v = m.face_vertices(f);
  const Vec3d n = cross(m.vertices[v[1]] - m.vertices[v[0]], m.vertices[v[2]] - m.vertices[v[0]]);
  const double len = norm(n);
  if (len == 0) throw DegenerateFace(f);
  return n / len;
}

// Signed area of the face projected straight down onto the parameter domain.
inline double projected_signed_area(const HeightFieldMesh& m, int f) {
  const auto v = m.face_vertices(f);
  return triangle_signed_area(m.vertices[v[0]].xy(), m.vertices[v[1]].xy(), m.vertices[v[2]].xy());
}

inline double face_area(const HeightFieldMesh& m, int f) {
  const auto v = m.face_vertices(f);
  return 0.5 * norm(cross(m.vertices[v[1]] - m.vertices[v[0]], m.vertices[v[2]] - m.vertices[v[0]]));
}

// Midpoint refinement: every cell becomes four. All new vertices lie on the
// old surface (cell centers sit on the split diagonal), so the mesh is
// unchanged as a point set and planar faces subdivide in place.
inline HeightFieldMesh subdivide(const HeightFieldMesh& m) {
  HeightFieldMesh r;
  r.nx = 2 * m.nx - 1;
  r.ny = 2 * m.ny - 1;
  r.width = m.width;
  r.height = m.height;
  r.vertices.resize(static_cast<std::size_t>(r.nx) * r.ny);
  r.frozen.resize(r.vertices.size(), 0);
  auto old = [&](int i, int j) { return m.vertices[m.vertex_index(i, j)]; };
  for (int j = 0; j < r.ny; ++j) {
    for (int i = 0; i < r.nx; ++i) {
      const int ci = i / 2, cj = j / 2;
      Vec3d p;
      if (i % 2 == 0 && j % 2 == 0) {
        p = old(ci, cj);
      } else if (j % 2 == 0) {
        p = (old(ci, cj) + old(ci + 1, cj)) * 0.5;
      } else if (i % 2 == 0) {
        p = (old(ci, cj) + old(ci, cj + 1)) * 0.5;
      } else {
        p = (old(ci, cj) + old(ci + 1, cj + 1)) * 0.5;  // on the split diagonal
      }
      const int v = r.vertex_index(i, j);
      r.vertices[v] = p;
      uint8_t f = 0;
      if (i == 0 || i == r.nx - 1) f |= 1;
      if (j == 0 || j == r.ny - 1) f |= 2;
      r.frozen[v] = f;
    }
  }
  return r;
}

// Parent face of each child face under subdivide(): children of the four
// sub-cells of cell (ci, cj) all lie inside one of the two parent faces.
inline int parent_face(const HeightFieldMesh& parent, int child_face) {
  const int pnx = parent.nx;
  const int cnx = 2 * pnx - 1;
  const int cell = child_face / 2;
  const int lower = 1 - child_face % 2;  // 1 if lower child triangle
  const int ci = cell % (cnx - 1);
  const int cj = cell / (cnx - 1);
  const int pi = ci / 2, pj = cj / 2;
  const int di = ci % 2, dj = cj % 2;
  const int pcell = pj * (pnx - 1) + pi;
  int plower;
  if (di == dj) {
    plower = lower;  // sub-cells on the diagonal split the same way
  } else {
    plower = di == 1 ? 1 : 0;  // right sub-cell in parent lower, top in upper
  }
  return 2 * pcell + (1 - plower);
}

struct InternalEdge {
  int f0 = 0, f1 = 0;  // adjacent faces
  int v0 = 0, v1 = 0;  // shared vertices
  int o0 = 0, o1 = 0;  // opposite vertex in f0 / f1
};

inline std::vector<InternalEdge> internal_edges(const HeightFieldMesh& m) {
  std::vector<InternalEdge> edges;
  const int cx = m.nx - 1, cy = m.ny - 1;
  edges.reserve(static_cast<std::size_t>(cx) * cy + static_cast<std::size_t>(cx) * (cy - 1) +
                static_cast<std::size_t>(cx - 1) * cy);
  auto vid = [&](int i, int j) { return m.vertex_index(i, j); };
  auto face = [&](int ci, int cj, int lower) { return 2 * (cj * cx + ci) + (1 - lower); };
  for (int cj = 0; cj < cy; ++cj) {
    for (int ci = 0; ci < cx; ++ci) {
      // diagonal between the cell's own two faces
      edges.push_back({face(ci, cj, 1), face(ci, cj, 0), vid(ci, cj), vid(ci + 1, cj + 1),
                       vid(ci + 1, cj), vid(ci, cj + 1)});
      // bottom edge shared with the cell below
      if (cj > 0) {
        edges.push_back({face(ci, cj, 1), face(ci, cj - 1, 0), vid(ci, cj), vid(ci + 1, cj),
                         vid(ci + 1, cj + 1), vid(ci, cj - 1)});
      }
      // left edge shared with the cell to the left
      if (ci > 0) {
        edges.push_back({face(ci, cj, 0), face(ci - 1, cj, 1), vid(ci, cj), vid(ci, cj + 1),
                         vid(ci + 1, cj + 1), vid(ci - 1, cj)});
      }
    }
  }
  return edges;
}

// Mesh-graph neighbors of a vertex (4-neighbors plus the two split-diagonal
// ones); used by the umbrella Laplacian.
inline int vertex_neighbors(const HeightFieldMesh& m, int i, int j, std::array<int, 6>& out) {
  static constexpr int kOff[6][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {-1, -1}};
  int n = 0;
  for (const auto& o : kOff) {
    const int ni = i + o[0], nj = j + o[1];
    if (ni >= 0 && ni < m.nx && nj >= 0 && nj < m.ny) out[n++] = m.vertex_index(ni, nj);
  }
  return n;
}

// ---------------------------------------------------------------------------
// OBJ export/import. The export writes a printable solid: the optimized back
// surface, four side walls, and a flat front plane. A comment header records
// the grid so the surface can be re-imported losslessly (up to the printed
// precision).

inline void write_obj(const HeightFieldMesh& m, double z_front, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  char buf[128];
  out << "# caustic height-field lens\n";
  std::snprintf(buf, sizeof buf, "# grid %d %d extent %.9g %.9g zfront %.9g\n", m.nx, m.ny, m.width,
                m.height, z_front);
  out << buf;
  auto emit = [&](const Vec3d& p) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", p.x, p.y, p.z);
    out << buf;
  };
  for (const Vec3d& p : m.vertices) emit(p);
  // front plane corners (indices nv+1 .. nv+4 in OBJ's 1-based numbering)
  emit({0, 0, z_front});
  emit({m.width, 0, z_front});
  emit({m.width, m.height, z_front});
  emit({0, m.height, z_front});

  out << "g back_surface\n";
  for (int f = 0; f < m.face_count(); ++f) {
    const auto v = m.face_vertices(f);
    out << "f " << v[0] + 1 << ' ' << v[1] + 1 << ' ' << v[2] + 1 << '\n';
  }
  const int nv = m.vertex_count();
  const int c0 = nv + 1, c1 = nv + 2, c2 = nv + 3, c3 = nv + 4;
  out << "g front_plane\n";
  out << "f " << c0 << ' ' << c2 << ' ' << c1 << '\n';
  out << "f " << c0 << ' ' << c3 << ' ' << c2 << '\n';
  out << "g side_walls\n";
  auto vid = [&](int i, int j) { return m.vertex_index(i, j) + 1; };
  auto wall = [&](int a, int b, int cb, int ca) {
    out << "f " << a << ' ' << b << ' ' << cb << '\n';
    out << "f " << a << ' ' << cb << ' ' << ca << '\n';
  };
  for (int i = 0; i + 1 < m.nx; ++i) {
    wall(vid(i, 0), vid(i + 1, 0), c1, c0);
    wall(vid(i + 1, m.ny - 1), vid(i, m.ny - 1), c3, c2);
  }
  for (int j = 0; j + 1 < m.ny; ++j) {
    wall(vid(m.nx - 1, j), vid(m.nx - 1, j + 1), c2, c1);
    wall(vid(0, j + 1), vid(0, j), c0, c3);
  }
  if (!out) throw IoError("write failed: " + path);
}

// Reads back a mesh written by write_obj (only the grid header and vertex
// list are needed; faces are implied by the grid).
inline HeightFieldMesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  int nx = 0, ny = 0;
  double width = 0, height = 0, z_front = 0;
  std::vector<Vec3d> verts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("# grid ", 0) == 0) {
      if (std::sscanf(line.c_str(), "# grid %d %d extent %lf %lf zfront %lf", &nx, &ny, &width,
                      &height, &z_front) != 5) {
        throw IoError(path + ": malformed grid header");
      }
    } else if (line.rfind("v ", 0) == 0) {
      Vec3d p;
      if (std::sscanf(line.c_str(), "v %lf %lf %lf", &p.x, &p.y, &p.z) != 3) {
        throw IoError(path + ": malformed vertex line");
      }
      verts.push_back(p);
    }
  }
  if (nx < 2 || ny < 2) throw IoError(path + ": missing or invalid grid header");
  if (verts.size() < static_cast<std::size_t>(nx) * ny) {
    throw IoError(path + ": vertex count does not match grid header");
  }
  HeightFieldMesh m = build_initial_mesh(width, height, nx, ny, 0.0);
  std::copy(verts.begin(), verts.begin() + m.vertex_count(), m.vertices.begin());
  return m;
}

}  // namespace caustic

// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "caustic/image.hpp"
#include "caustic/mesh.hpp"
#include "caustic/optics.hpp"

namespace caustic {

// Emission profile over the lens footprint U. PixelMap weights are per-cell
// fractions of the total emitted flux (they are normalized on construction).
struct SourceDistribution {
  enum class Kind { Uniform, PixelMap };
  Kind kind = Kind::Uniform;
  int nx = 0, ny = 0;
  std::vector<double> weights;

  static SourceDistribution uniform() { return {}; }
  static SourceDistribution pixel_map(int nx, int ny, std::vector<double> w) {
    SourceDistribution d;
    d.kind = Kind::PixelMap;
    d.nx = nx;
    d.ny = ny;
    double total = 0;
    for (double v : w) {
      if (v < 0) throw Error("source map weights must be non-negative");
      total += v;
    }
    if (total <= 0) throw Error("source map has zero total flux");
    for (double& v : w) v /= total;
    d.weights = std::move(w);
    return d;
  }
};

namespace detail {

// Per-vertex optical state. For parallel light the surface vertex is the
// optimization variable itself; for a point source the variables are
// (x_f, y_f, z_b) and position/incident come from the front-surface trace.
// The 3x3 Jacobians map parameter perturbations to the traced quantities.
struct CornerTrace {
  Vec3d pos;       // back-surface vertex
  Vec3d incident;  // unit incident direction at pos
  Vec3d front;     // solid-angle anchor triangle vertex (point modes)
  double jpos[3][3];
  double jinc[3][3];
  double jfront[3][3];
  bool ok = true;
};

inline std::vector<CornerTrace> corner_traces(const HeightFieldMesh& mesh, const OpticalScene& scene,
                                              bool nothrow = false) {
  const int nv = mesh.vertex_count();
  std::vector<CornerTrace> traces(nv);
  if (scene.light.kind == LightKind::Parallel) {
    const Vec3d a = parallel_interior_direction(scene);
    for (int v = 0; v < nv; ++v) {
      CornerTrace& t = traces[v];
      t.pos = mesh.vertices[v];
      t.incident = a;
      t.front = t.pos;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          t.jpos[r][c] = r == c ? 1.0 : 0.0;
          t.jinc[r][c] = 0.0;
          t.jfront[r][c] = t.jpos[r][c];
        }
    }
    return traces;
  }
  const Vec3d q = scene.light.position;
  const bool reflective = scene.mode == SurfaceMode::Reflect;
  parallel_for_chunked(nv, [&](int, std::size_t b, std::size_t e) {
    for (std::size_t v = b; v < e; ++v) {
      CornerTrace& t = traces[v];
      const Vec3d p = mesh.vertices[v];
      if (reflective) {
        // mirror vertices are plain positions; incident comes from the source
        using D3 = Dual<3>;
        const Vec3<D3> pd{D3::seeded(p.x, 0), D3::seeded(p.y, 1), D3::seeded(p.z, 2)};
        const Vec3<D3> a = normalized(Vec3<D3>{pd.x - D3(q.x), pd.y - D3(q.y), pd.z - D3(q.z)});
        t.pos = p;
        t.incident = {a.x.v, a.y.v, a.z.v};
        t.front = p;
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) {
            t.jpos[r][c] = r == c ? 1.0 : 0.0;
            t.jfront[r][c] = t.jpos[r][c];
          }
        for (int c = 0; c < 3; ++c) {
          t.jinc[0][c] = a.x.d[c];
          t.jinc[1][c] = a.y.d[c];
          t.jinc[2][c] = a.z.d[c];
        }
        continue;
      }
      using D3 = Dual<3>;
      try {
        const auto bv = back_vertex_from_params(scene, D3::seeded(p.x, 0), D3::seeded(p.y, 1),
                                                D3::seeded(p.z, 2));
        const D3 h = scene.front.height_dual(D3::seeded(p.x, 0), D3::seeded(p.y, 1));
        t.pos = {bv.position.x.v, bv.position.y.v, bv.position.z.v};
        t.incident = {bv.incident.x.v, bv.incident.y.v, bv.incident.z.v};
        t.front = {p.x, p.y, h.v};
        for (int c = 0; c < 3; ++c) {
          t.jpos[0][c] = bv.position.x.d[c];
          t.jpos[1][c] = bv.position.y.d[c];
          t.jpos[2][c] = bv.position.z.d[c];
          t.jinc[0][c] = bv.incident.x.d[c];
          t.jinc[1][c] = bv.incident.y.d[c];
          t.jinc[2][c] = bv.incident.z.d[c];
          t.jfront[0][c] = c == 0 ? 1.0 : 0.0;
          t.jfront[1][c] = c == 1 ? 1.0 : 0.0;
          t.jfront[2][c] = h.d[c];
        }
      } catch (const AssumptionViolation&) {
        if (!nothrow) throw;
        t.ok = false;
      }
    }
  });
  if (nothrow) return traces;
  for (const auto& t : traces) {
    if (!t.ok) throw AssumptionViolation("front-surface trace failed");
  }
  return traces;
}

using D9 = Dual<9>;

inline Vec3<D9> embed(const Vec3d& v, const double j[3][3], int corner) {
  Vec3<D9> r{D9(v.x), D9(v.y), D9(v.z)};
  for (int c = 0; c < 3; ++c) {
    r.x.d[3 * corner + c] = j[0][c];
    r.y.d[3 * corner + c] = j[1][c];
    r.z.d[3 * corner + c] = j[2][c];
  }
  return r;
}

enum class FaceStatus : uint8_t { Ok, Degenerate, Tir, Grazing, Trace };

template <class S>
struct FacePacket {
  std::array<Vec2<S>, 3> u;  // image-plane triangle
  S flux_pre;     // pre-normalization flux (Uniform/PixelMap: final flux)
  S proj_area;    // signed area of the back footprint
  S front_area;   // signed area of the parameter footprint (point refract)
  S margin;       // mean TIR margin over the corner rays
  S area3d;       // back triangle area
  FaceStatus status = FaceStatus::Ok;
};

// Flux emitted through the footprint triangle of a PixelMap source.
template <class S>
inline S source_map_integral(const SourceDistribution& dist, const OpticalScene&, double domain_w,
                             double domain_h, const Vec2<S>& a, const Vec2<S>& b, const Vec2<S>& c) {
  const double dx = domain_w / dist.nx, dy = domain_h / dist.ny;
  double lox = std::min({value_of(a.x), value_of(b.x), value_of(c.x)});
  double hix = std::max({value_of(a.x), value_of(b.x), value_of(c.x)});
  double loy = std::min({value_of(a.y), value_of(b.y), value_of(c.y)});
  double hiy = std::max({value_of(a.y), value_of(b.y), value_of(c.y)});
  const int c0 = std::max(0, static_cast<int>(std::floor(lox / dx)));
  const int c1 = std::min(dist.nx - 1, static_cast<int>(std::floor(hix / dx)));
  const int r0 = std::max(0, static_cast<int>(std::floor(loy / dy)));
  const int r1 = std::min(dist.ny - 1, static_cast<int>(std::floor(hiy / dy)));
  S acc(0.0);
  ClipPoly<S, 8> tri, col, cell, scratch;
  tri.push(a);
  tri.push(b);
  tri.push(c);
  if (value_of(triangle_signed_area(a, b, c)) < 0) std::swap(tri.pt[1], tri.pt[2]);
  const double cell_area = dx * dy;
  for (int cc = c0; cc <= c1; ++cc) {
    clip_axis(tri, scratch, 0, cc * dx, false);
    clip_axis(scratch, col, 0, (cc + 1) * dx, true);
    if (col.n < 3) continue;
    for (int rr = r0; rr <= r1; ++rr) {
      const double w = dist.weights[static_cast<std::size_t>(rr) * dist.nx + cc];
      if (w == 0) continue;
      clip_axis(col, scratch, 1, rr * dy, false);
      clip_axis(scratch, cell, 1, (rr + 1) * dy, true);
      if (cell.n < 3) continue;
      acc += polygon_signed_area(cell) * S(w / cell_area);
    }
  }
  return acc;
}

template <class S>
inline FacePacket<S> face_packet(const HeightFieldMesh& mesh, const SourceDistribution& dist,
                                 const OpticalScene& scene, const std::vector<CornerTrace>& traces,
                                 int f) {
  FacePacket<S> pk;
  const auto vid = mesh.face_vertices(f);
  Vec3<S> p[3], a[3], fr[3];
  for (int k = 0; k < 3; ++k) {
    const CornerTrace& t = traces[vid[k]];
    if (!t.ok) {
      pk.status = FaceStatus::Trace;
      return pk;
    }
    if constexpr (std::is_same_v<S, double>) {
      p[k] = t.pos;
      a[k] = t.incident;
      fr[k] = t.front;
    } else {
      p[k] = embed(t.pos, t.jpos, k);
      a[k] = embed(t.incident, t.jinc, k);
      fr[k] = embed(t.front, t.jfront, k);
    }
  }
  const bool point = scene.light.kind == LightKind::Point;
  const bool reflective = scene.mode == SurfaceMode::Reflect;

  pk.proj_area = triangle_signed_area(p[0].xy(), p[1].xy(), p[2].xy());
  pk.front_area = point && !reflective
                      ? triangle_signed_area(Vec2<S>{fr[0].x, fr[0].y}, Vec2<S>{fr[1].x, fr[1].y},
                                             Vec2<S>{fr[2].x, fr[2].y})
                      : pk.proj_area;
  const Vec3<S> nvec = cross(p[1] - p[0], p[2] - p[0]);
  const S nlen = norm(nvec);
  if (value_of(nlen) == 0) {
    pk.status = FaceStatus::Degenerate;
    return pk;
  }
  const Vec3<S> n = nvec / nlen;
  pk.area3d = nlen * S(0.5);

  pk.margin = S(1.0);
  if (!reflective) {
    const double eta = scene.eta_back();
    S msum(0.0);
    double mmin = 1.0;
    for (int k = 0; k < 3; ++k) {
      const S mk = tir_margin(a[k], n, eta);
      mmin = std::min(mmin, value_of(mk));
      msum += mk;
    }
    pk.margin = msum / S(3.0);
    if (mmin <= 0) {
      pk.status = FaceStatus::Tir;
      return pk;
    }
  }

  for (int k = 0; k < 3; ++k) {
    const Vec3<S> b = reflective ? reflect_dir(a[k], n) : refract_dir(a[k], n, scene.eta_back());
    if (std::fabs(value_of(b.z)) < 1e-12) {
      pk.status = FaceStatus::Grazing;
      return pk;
    }
    pk.u[k] = ray_hit_plane_z(p[k], b, scene.z_focal);
  }

  if (point) {
    pk.flux_pre = triangle_solid_angle(fr[0], fr[1], fr[2],
                                       Vec3<S>{S(scene.light.position.x), S(scene.light.position.y),
                                               S(scene.light.position.z)});
  } else if (dist.kind == SourceDistribution::Kind::Uniform) {
    pk.flux_pre = pk.proj_area / S(mesh.width * mesh.height);
  } else {
    pk.flux_pre =
        source_map_integral(dist, scene, mesh.width, mesh.height, p[0].xy(), p[1].xy(), p[2].xy());
  }
  return pk;
}

[[noreturn]] inline void throw_face_status(FaceStatus s, int f) {
  switch (s) {
    case FaceStatus::Degenerate:
      throw DegenerateFace(f);
    case FaceStatus::Tir:
      throw TotalInternalReflection(f);
    case FaceStatus::Grazing:
      throw ProjectionFailure(f);
    default:
      throw AssumptionViolation("front-surface trace failed at face " + std::to_string(f));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward rendering

struct RenderResult {
  FluxImage flux;
  std::vector<std::array<Vec2d, 3>> tris;  // image-plane triangles
  std::vector<double> face_flux;           // per-face flux, sums to 1
  std::vector<Vec2d> centroids;            // arithmetic centroids of tris
  double flux_norm = 1;                    // point modes: sum of solid angles
};

// Fraction of emitted flux each face carries. Uniform parallel beams weight
// faces by footprint area, point sources by subtended solid angle.
inline std::vector<double> source_flux(const HeightFieldMesh& mesh, const SourceDistribution& dist,
                                       const OpticalScene& scene) {
  const auto traces = detail::corner_traces(mesh, scene);
  const int nf = mesh.face_count();
  std::vector<double> flux(nf);
  for (int f = 0; f < nf; ++f) {
    const auto pk = detail::face_packet<double>(mesh, dist, scene, traces, f);
    if (pk.status != detail::FaceStatus::Ok && pk.status != detail::FaceStatus::Tir &&
        pk.status != detail::FaceStatus::Grazing) {
      detail::throw_face_status(pk.status, f);
    }
    flux[f] = pk.flux_pre;
  }
  if (scene.light.kind == LightKind::Point) {
    double total = 0;
    for (double s : flux) total += s;
    if (total <= 0) throw ZeroTotalFlux();
    for (double& s : flux) s /= total;
  }
  return flux;
}

// Image-plane triangles of all faces (refraction/reflection by face normal).
inline std::vector<std::array<Vec2d, 3>> project_faces(const HeightFieldMesh& mesh,
                                                       const OpticalScene& scene) {
  const auto traces = detail::corner_traces(mesh, scene);
  const int nf = mesh.face_count();
  std::vector<std::array<Vec2d, 3>> tris(nf);
  SourceDistribution uni;
  for (int f = 0; f < nf; ++f) {
    const auto pk = detail::face_packet<double>(mesh, uni, scene, traces, f);
    if (pk.status != detail::FaceStatus::Ok) detail::throw_face_status(pk.status, f);
    tris[f] = pk.u;
  }
  return tris;
}

namespace detail {

// Area of the image triangle below the 1e-14-pixel degeneracy threshold:
// the whole face flux goes to the pixel containing the centroid.
inline bool tri_is_degenerate(const std::array<Vec2d, 3>& t, double pixel_area) {
  return std::fabs(value_of(triangle_signed_area(t[0], t[1], t[2]))) < 1e-14 * pixel_area;
}

// Visits (pixel, clipped area) for one triangle; pixels tile `region` on a
// w x h grid. Returns the total area inside the region (absolute value).
template <class Fn>
inline double clip_triangle_pixels(const std::array<Vec2d, 3>& t, int w, int h, const Rect& region,
                                   Fn&& visit) {
  const double dx = region.width() / w, dy = region.height() / h;
  ClipPoly<double, 8> tri, col, cell, scratch;
  tri.push(t[0]);
  tri.push(t[1]);
  tri.push(t[2]);
  if (triangle_signed_area(t[0], t[1], t[2]) < 0) std::swap(tri.pt[1], tri.pt[2]);
  const double lox = std::min({t[0].x, t[1].x, t[2].x}), hix = std::max({t[0].x, t[1].x, t[2].x});
  const double loy = std::min({t[0].y, t[1].y, t[2].y}), hiy = std::max({t[0].y, t[1].y, t[2].y});
  const int c0 = std::max(0, static_cast<int>(std::floor((lox - region.x0) / dx)));
  const int c1 = std::min(w - 1, static_cast<int>(std::floor((hix - region.x0) / dx)));
  const int r0 = std::max(0, static_cast<int>(std::floor((loy - region.y0) / dy)));
  const int r1 = std::min(h - 1, static_cast<int>(std::floor((hiy - region.y0) / dy)));
  double inside = 0;
  for (int c = c0; c <= c1; ++c) {
    clip_axis(tri, scratch, 0, region.x0 + c * dx, false);
    clip_axis(scratch, col, 0, region.x0 + (c + 1) * dx, true);
    if (col.n < 3) continue;
    for (int r = r0; r <= r1; ++r) {
      clip_axis(col, scratch, 1, region.y0 + r * dy, false);
      clip_axis(scratch, cell, 1, region.y0 + (r + 1) * dy, true);
      if (cell.n < 3) continue;
      const double a = std::fabs(polygon_signed_area(cell));
      if (a > 0) {
        inside += a;
        visit(r * w + c, a);
      }
    }
  }
  return inside;
}

inline int centroid_pixel(const std::array<Vec2d, 3>& t, int w, int h, const Rect& region) {
  const Vec2d c = (t[0] + t[1] + t[2]) / 3.0;
  if (c.x < region.x0 || c.x >= region.x1 || c.y < region.y0 || c.y >= region.y1) return -1;
  const int pc = std::min(w - 1, static_cast<int>((c.x - region.x0) / region.width() * w));
  const int pr = std::min(h - 1, static_cast<int>((c.y - region.y0) / region.height() * h));
  return pr * w + pc;
}

}  // namespace detail

// Splits each face's flux over the pixels its image triangle covers, in
// proportion to exactly clipped areas. Flux falling outside the region is
// accounted as spilled, so total flux is conserved.
inline FluxImage rasterize_flux(const std::vector<std::array<Vec2d, 3>>& tris,
                                const std::vector<double>& face_flux, int w, int h, const Rect& region) {
  if (tris.size() != face_flux.size()) throw Error("triangle/flux count mismatch");
  const double pixel_area = region.area() / (static_cast<double>(w) * h);
  const int chunks = chunk_count(tris.size(), 64);
  std::vector<FluxImage> partial(chunks, FluxImage(w, h));
  parallel_for_chunked(
      tris.size(),
      [&](int chunk, std::size_t b, std::size_t e) {
        FluxImage& img = partial[chunk];
        for (std::size_t f = b; f < e; ++f) {
          const double phi = face_flux[f];
          if (phi == 0) continue;
          if (detail::tri_is_degenerate(tris[f], pixel_area)) {
            const int px = detail::centroid_pixel(tris[f], w, h, region);
            if (px >= 0) {
              img.flux[px] += phi;
            } else {
              img.spilled += phi;
            }
            continue;
          }
          const double area = std::fabs(triangle_signed_area(tris[f][0], tris[f][1], tris[f][2]));
          const double inside = detail::clip_triangle_pixels(
              tris[f], w, h, region, [&](int px, double a) { img.flux[px] += phi * a / area; });
          const double spill = phi * (area - inside) / area;
          if (spill > 0) img.spilled += spill;
        }
      },
      64);
  FluxImage out(w, h);
  for (const FluxImage& img : partial) {
    for (std::size_t i = 0; i < out.flux.size(); ++i) out.flux[i] += img.flux[i];
    out.spilled += img.spilled;
  }
  return out;
}

inline RenderResult render(const HeightFieldMesh& mesh, const SourceDistribution& dist,
                           const OpticalScene& scene, int w, int h) {
  const auto traces = detail::corner_traces(mesh, scene);
  const int nf = mesh.face_count();
  RenderResult r;
  r.tris.resize(nf);
  r.face_flux.resize(nf);
  r.centroids.resize(nf);
  std::vector<detail::FaceStatus> status(nf, detail::FaceStatus::Ok);
  parallel_for_chunked(nf, [&](int, std::size_t b, std::size_t e) {
    for (std::size_t f = b; f < e; ++f) {
      const auto pk = detail::face_packet<double>(mesh, dist, scene, traces, static_cast<int>(f));
      status[f] = pk.status;
      if (pk.status != detail::FaceStatus::Ok) continue;
      r.tris[f] = pk.u;
      r.face_flux[f] = pk.flux_pre;
      r.centroids[f] = (pk.u[0] + pk.u[1] + pk.u[2]) / 3.0;
    }
  });
  for (int f = 0; f < nf; ++f) {
    if (status[f] != detail::FaceStatus::Ok) detail::throw_face_status(status[f], f);
  }
  if (scene.light.kind == LightKind::Point) {
    double total = 0;
    for (double s : r.face_flux) total += s;
    if (total <= 0) throw ZeroTotalFlux();
    r.flux_norm = total;
    for (double& s : r.face_flux) s /= total;
  }
  r.flux = rasterize_flux(r.tris, r.face_flux, w, h, scene.image_region);
  return r;
}

// ---------------------------------------------------------------------------
// Adjoint rendering: gradient of a pixel-space loss with respect to the
// per-vertex surface variables (positions for parallel/reflect meshes,
// (x_f, y_f, z_b) for point-source lenses).

namespace detail {

struct AdjointTerms {
  const double* dldpix = nullptr;    // w*h pixel-loss weights
  double dldspilled = 0;
  const double* face_flux = nullptr;  // normalized per-face flux (with dldpix)
  const double* dldflux = nullptr;  // per-face coefficient on the pre-normalization flux
  const double* dldproj = nullptr;  // per-face coefficient on the footprint signed area
  const double* dldfront = nullptr;
  const double* dldmargin = nullptr;
  const double* dldarea3d = nullptr;
  const Vec2d* dldcentroid = nullptr;
  double bdr_w = 0;  // weight on sum_k dist(u_k, region)^2
};

// Allocation weight G_i = dL/dPhi_i implied by the pixel weights: the loss
// change per unit of this face's flux, honoring the clipped-area split.
inline double allocation_weight(const std::array<Vec2d, 3>& tri, int w, int h, const Rect& region,
                                const double* dldpix, double dldspilled) {
  const double pixel_area = region.area() / (static_cast<double>(w) * h);
  if (tri_is_degenerate(tri, pixel_area)) {
    const int px = centroid_pixel(tri, w, h, region);
    return px >= 0 ? dldpix[px] : dldspilled;
  }
  const double area = std::fabs(triangle_signed_area(tri[0], tri[1], tri[2]));
  double acc = 0;
  const double inside = clip_triangle_pixels(tri, w, h, region,
                                             [&](int px, double a) { acc += dldpix[px] * a; });
  return (acc + dldspilled * (area - inside)) / area;
}

// Accumulates the full gradient for a weighted sum of per-face functionals:
// pixel allocation, boundary distance, centroid pull, and direct coefficients
// on flux/areas/margins. Output has 3 entries per vertex; frozen coordinates
// are zeroed at the end.
inline void face_adjoint_pass(const HeightFieldMesh& mesh, const SourceDistribution& dist,
                              const OpticalScene& scene, const std::vector<CornerTrace>& traces,
                              const std::vector<std::array<Vec2d, 3>>& tris, int w, int h,
                              const AdjointTerms& terms, std::vector<double>& grad) {
  const int nf = mesh.face_count();
  const Rect region = scene.image_region;
  const double pixel_area = region.area() / (static_cast<double>(w) * h);
  const int chunks = chunk_count(nf, 32);
  std::vector<std::vector<double>> partial(chunks);
  parallel_for_chunked(
      nf,
      [&](int chunk, std::size_t fb, std::size_t fe) {
        auto& acc = partial[chunk];
        acc.assign(grad.size(), 0.0);
        using D6 = Dual<6>;
        for (std::size_t f = fb; f < fe; ++f) {
          const auto pk = face_packet<D9>(mesh, dist, scene, traces, static_cast<int>(f));
          if (pk.status != FaceStatus::Ok) continue;
          D9 loss(0.0);
          double du[6] = {0, 0, 0, 0, 0, 0};
          if (terms.dldpix && !tri_is_degenerate(tris[f], pixel_area)) {
            // clip with duals seeded on the image triangle to get d(area)/du
            std::array<Vec2<D6>, 3> t;
            for (int k = 0; k < 3; ++k) {
              t[k] = {D6::seeded(tris[f][k].x, 2 * k), D6::seeded(tris[f][k].y, 2 * k + 1)};
            }
            ClipPoly<D6, 8> tri6, col, cell, scratch;
            tri6.push(t[0]);
            tri6.push(t[1]);
            tri6.push(t[2]);
            D6 area = triangle_signed_area(t[0], t[1], t[2]);
            if (area.v < 0) {
              std::swap(tri6.pt[1], tri6.pt[2]);
              area = -area;
            }
            const double dx = region.width() / w, dy = region.height() / h;
            const double lox = std::min({tris[f][0].x, tris[f][1].x, tris[f][2].x});
            const double hix = std::max({tris[f][0].x, tris[f][1].x, tris[f][2].x});
            const double loy = std::min({tris[f][0].y, tris[f][1].y, tris[f][2].y});
            const double hiy = std::max({tris[f][0].y, tris[f][1].y, tris[f][2].y});
            const int c0 = std::max(0, static_cast<int>(std::floor((lox - region.x0) / dx)));
            const int c1 = std::min(w - 1, static_cast<int>(std::floor((hix - region.x0) / dx)));
            const int r0 = std::max(0, static_cast<int>(std::floor((loy - region.y0) / dy)));
            const int r1 = std::min(h - 1, static_cast<int>(std::floor((hiy - region.y0) / dy)));
            D6 weighted(0.0);  // sum_j (w_j - w_spill) * A_ij
            for (int c = c0; c <= c1; ++c) {
              clip_axis(tri6, scratch, 0, region.x0 + c * dx, false);
              clip_axis(scratch, col, 0, region.x0 + (c + 1) * dx, true);
              if (col.n < 3) continue;
              for (int r = r0; r <= r1; ++r) {
                clip_axis(col, scratch, 1, region.y0 + r * dy, false);
                clip_axis(scratch, cell, 1, region.y0 + (r + 1) * dy, true);
                if (cell.n < 3) continue;
                D6 a = polygon_signed_area(cell);
                if (a.v < 0) a = -a;
                weighted += a * D6(terms.dldpix[r * w + c] - terms.dldspilled);
              }
            }
            // L_img = Phi * (w_spill + weighted / area); flux part via dldflux
            const D6 g = weighted / area;
            for (int s = 0; s < 6; ++s) du[s] += terms.face_flux[f] * g.d[s];
          }
          if (terms.bdr_w != 0) {
            for (int k = 0; k < 3; ++k) {
              const Vec2d p = tris[f][k];
              const Vec2d d = p - region.closest_point(p);
              du[2 * k] += terms.bdr_w * 2.0 * d.x;
              du[2 * k + 1] += terms.bdr_w * 2.0 * d.y;
            }
          }
          if (terms.dldcentroid) {
            const Vec2d cw = terms.dldcentroid[f];
            for (int k = 0; k < 3; ++k) {
              du[2 * k] += cw.x / 3.0;
              du[2 * k + 1] += cw.y / 3.0;
            }
          }
          for (int k = 0; k < 3; ++k) {
            loss += pk.u[k].x * D9(du[2 * k]) + pk.u[k].y * D9(du[2 * k + 1]);
          }
          if (terms.dldflux) loss += pk.flux_pre * D9(terms.dldflux[f]);
          if (terms.dldproj) loss += pk.proj_area * D9(terms.dldproj[f]);
          if (terms.dldfront) loss += pk.front_area * D9(terms.dldfront[f]);
          if (terms.dldmargin) loss += pk.margin * D9(terms.dldmargin[f]);
          if (terms.dldarea3d) loss += pk.area3d * D9(terms.dldarea3d[f]);
          const auto vid = mesh.face_vertices(static_cast<int>(f));
          for (int k = 0; k < 3; ++k) {
            for (int c = 0; c < 3; ++c) {
              acc[3 * vid[k] + c] += loss.d[3 * k + c];
            }
          }
        }
      },
      32);
  for (const auto& acc : partial) {
    if (acc.empty()) continue;
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += acc[i];
  }
}

}  // namespace detail

// Gradient of loss = sum_j dldpix[j] * pixelflux_j + dldspilled * spilled
// with respect to the surface variables (3 per vertex, frozen entries zero).
inline std::vector<double> render_adjoint(const RenderResult& result, const std::vector<double>& dldpix,
                                          double dldspilled, const HeightFieldMesh& mesh,
                                          const SourceDistribution& dist, const OpticalScene& scene) {
  const int w = result.flux.width, h = result.flux.height;
  if (dldpix.size() != result.flux.flux.size()) throw Error("pixel weight size mismatch");
  const auto traces = detail::corner_traces(mesh, scene);
  const int nf = mesh.face_count();
  std::vector<double> dldflux(nf);
  for (int f = 0; f < nf; ++f) {
    dldflux[f] = detail::allocation_weight(result.tris[f], w, h, scene.image_region, dldpix.data(),
                                           dldspilled);
  }
  if (scene.light.kind == LightKind::Point) {
    double corr = 0;
    for (int f = 0; f < nf; ++f) corr += dldflux[f] * result.face_flux[f];
    for (int f = 0; f < nf; ++f) dldflux[f] = (dldflux[f] - corr) / result.flux_norm;
  }
  detail::AdjointTerms terms;
  terms.dldpix = dldpix.data();
  terms.dldspilled = dldspilled;
  terms.face_flux = result.face_flux.data();
  terms.dldflux = dldflux.data();
  std::vector<double> grad(static_cast<std::size_t>(mesh.vertex_count()) * 3, 0.0);
  detail::face_adjoint_pass(mesh, dist, scene, traces, result.tris, w, h, terms, grad);
  for (int v = 0; v < mesh.vertex_count(); ++v) {
    if (mesh.frozen[v] & 1) grad[3 * v] = 0;
    if (mesh.frozen[v] & 2) grad[3 * v + 1] = 0;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Monte-Carlo reference renderer: stratified footprint sampling, point
// location on the (deformed) footprint grid, and the same per-face bending
// rule as the deterministic path. floor(sqrt(n_rays))^2 rays are traced.

// `second_moment`, when given, receives the per-pixel sum of squared sample
// weights: a conservative per-pixel variance estimate for z-score reports.
inline FluxImage mc_reference_render(const HeightFieldMesh& mesh, const SourceDistribution& dist,
                                     const OpticalScene& scene, int w, int h, long n_rays,
                                     uint64_t seed, FluxImage* second_moment = nullptr) {
  const RenderResult det = render(mesh, dist, scene, w, h);  // face triangles & fluxes
  const bool point = scene.light.kind == LightKind::Point;
  const bool reflective = scene.mode == SurfaceMode::Reflect;
  const int nf = mesh.face_count();
  const int cx = mesh.nx - 1, cy = mesh.ny - 1;

  // footprint triangulation: the parameter-plane projection of each face
  std::vector<std::array<Vec2d, 3>> fp(nf);
  for (int f = 0; f < nf; ++f) {
    const auto vid = mesh.face_vertices(f);
    fp[f] = {mesh.vertices[vid[0]].xy(), mesh.vertices[vid[1]].xy(), mesh.vertices[vid[2]].xy()};
  }
  auto neighbor = [&](int f, int edge) -> int {
    // edges are (0,1), (1,2), (2,0) in face-vertex order
    const int cell = f / 2;
    const int ci = cell % cx, cj = cell / cx;
    if (f % 2 == 0) {  // lower (v00, v10, v11)
      if (edge == 0) return cj > 0 ? 2 * (cell - cx) + 1 : -1;
      if (edge == 1) return ci < cx - 1 ? 2 * (cell + 1) + 1 : -1;
      return f + 1;
    }
    if (edge == 0) return f - 1;  // diagonal
    if (edge == 1) return cj < cy - 1 ? 2 * (cell + cx) : -1;
    return ci > 0 ? 2 * (cell - 1) : -1;
  };
  auto locate = [&](Vec2d p, int hint) -> int {
    int f = hint;
    for (int step = 0; step < 4 * nf; ++step) {
      const auto& t = fp[f];
      int worst = -1;
      double worst_val = 0;
      for (int e = 0; e < 3; ++e) {
        const double s = cross(t[(e + 1) % 3] - t[e], p - t[e]);
        if (s < worst_val) {
          worst_val = s;
          worst = e;
        }
      }
      if (worst < 0) return f;
      const int nxt = neighbor(f, worst);
      if (nxt < 0) return -1;
      f = nxt;
    }
    return -1;
  };

  const Rect region = scene.image_region;
  const long g = static_cast<long>(std::sqrt(static_cast<double>(n_rays)));
  const double sx = mesh.width / g, sy = mesh.height / g;
  const double stratum_w = (mesh.width * mesh.height) / (static_cast<double>(g) * g);
  const Vec3d q = scene.light.position;

  const int chunks = chunk_count(static_cast<std::size_t>(g), 1);
  struct Bins {
    std::vector<double> px, m2;
    double spilled = 0, weight = 0;
  };
  std::vector<Bins> partial(chunks);
  parallel_for_chunked(
      static_cast<std::size_t>(g),
      [&](int chunk, std::size_t rb, std::size_t re) {
        Bins& bins = partial[chunk];
        bins.px.assign(static_cast<std::size_t>(w) * h, 0.0);
        if (second_moment) bins.m2.assign(bins.px.size(), 0.0);
        Rng rng(seed * 0x9E3779B9ULL + 0x1000 + chunk);
        int hint = 0;
        for (std::size_t iy = rb; iy < re; ++iy) {
          for (long ix = 0; ix < g; ++ix) {
            const double x = (ix + rng.uniform()) * sx;
            const double y = (iy + rng.uniform()) * sy;
            const int f = locate({x, y}, hint);
            if (f < 0) {
              bins.spilled += stratum_w;  // should not happen on valid meshes
              continue;
            }
            hint = f;
            // barycentric coordinates in the footprint triangle
            const auto& t = fp[f];
            const double det2 = cross(t[1] - t[0], t[2] - t[0]);
            if (det2 == 0) continue;
            const double l1 = cross(Vec2d{x, y} - t[0], t[2] - t[0]) / det2;
            const double l2 = cross(t[1] - t[0], Vec2d{x, y} - t[0]) / det2;
            const double l0 = 1.0 - l1 - l2;
            double weight;
            if (!point) {
              if (dist.kind == SourceDistribution::Kind::Uniform) {
                weight = stratum_w / (mesh.width * mesh.height);
              } else {
                const int mc = std::min(dist.nx - 1, static_cast<int>(x / mesh.width * dist.nx));
                const int mr = std::min(dist.ny - 1, static_cast<int>(y / mesh.height * dist.ny));
                const double cell_area = (mesh.width / dist.nx) * (mesh.height / dist.ny);
                weight = dist.weights[static_cast<std::size_t>(mr) * dist.nx + mc] / cell_area *
                         stratum_w;
              }
            } else if (reflective) {
              const auto vid = mesh.face_vertices(f);
              const Vec3d p = mesh.vertices[vid[0]] * l0 + mesh.vertices[vid[1]] * l1 +
                              mesh.vertices[vid[2]] * l2;
              const Vec3d nrm = cross(mesh.vertices[vid[1]] - mesh.vertices[vid[0]],
                                      mesh.vertices[vid[2]] - mesh.vertices[vid[0]]);
              const Vec3d r = p - q;
              const double rl = norm(r);
              weight = dot(r / rl, nrm) / (nrm.z * rl * rl) * stratum_w;
            } else {
              double hv, hx, hy;
              scene.front.height_and_grad(x, y, hv, hx, hy);
              const Vec3d p{x, y, hv};
              const Vec3d r = p - q;
              const double rl = norm(r);
              weight = dot(r / rl, Vec3d{-hx, -hy, 1.0}) / (rl * rl) * stratum_w;
            }
            bins.weight += weight;
            const Vec2d u = det.tris[f][0] * l0 + det.tris[f][1] * l1 + det.tris[f][2] * l2;
            if (u.x >= region.x0 && u.x < region.x1 && u.y >= region.y0 && u.y < region.y1) {
              const int pc = std::min(w - 1, static_cast<int>((u.x - region.x0) / region.width() * w));
              const int pr =
                  std::min(h - 1, static_cast<int>((u.y - region.y0) / region.height() * h));
              const std::size_t idx = static_cast<std::size_t>(pr) * w + pc;
              bins.px[idx] += weight;
              if (second_moment) bins.m2[idx] += weight * weight;
            } else {
              bins.spilled += weight;
            }
          }
        }
      },
      1);
  FluxImage out(w, h);
  if (second_moment) *second_moment = FluxImage(w, h);
  double total_weight = 0;
  for (const Bins& b : partial) {
    if (b.px.empty()) continue;
    for (std::size_t i = 0; i < out.flux.size(); ++i) out.flux[i] += b.px[i];
    if (second_moment) {
      for (std::size_t i = 0; i < out.flux.size(); ++i) second_moment->flux[i] += b.m2[i];
    }
    out.spilled += b.spilled;
    total_weight += b.weight;
  }
  if (point && total_weight > 0) {  // solid-angle weights self-normalize
    for (double& v : out.flux) v /= total_weight;
    out.spilled /= total_weight;
    if (second_moment) {
      for (double& v : second_moment->flux) v /= total_weight * total_weight;
    }
  }
  return out;
}

}  // namespace caustic

// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <limits>

#include "caustic/render.hpp"
#include "caustic/solver.hpp"

namespace caustic {


struct EnergyWeights {
  double lambda1 = 1e2;   // image term
  double lambda2 = 1e3;   // image-gradient term
  double lambda3 = 1e-3;  // boundary term
  double lambda4 = 2e1;   // smoothness
  double lambda5 = 1e-8;  // barriers
  double tau1 = 3.0;      // edge share of the smoothness term
  double tau2 = 0.2;      // Laplacian share of the smoothness term
  double gamma1 = 1e0;    // alignment (correspondence update)
  double gamma2 = 1e1;    // flux preservation (correspondence update)
  double gamma3 = 2e1;    // smoothness (correspondence update)
  double gamma4 = 1e-14;  // barriers (correspondence update)
};

struct EnergyConfig {
  EnergyWeights w;
  double nu = 1.0;    // Welsch scale for the edge term
  double eps1 = 0;    // area barrier: infinite at or below this
  double eps2 = 0;    // area barrier: free above this

  // Thresholds are fractions of the mean footprint area of the flat mesh at
  // the current resolution.
  void set_area_barrier(const HeightFieldMesh& mesh, double rel1 = 0.01, double rel2 = 0.2) {
    const double mean = mesh.width * mesh.height / mesh.face_count();
    eps1 = rel1 * mean;
    eps2 = rel2 * mean;
  }
};

// ---------------------------------------------------------------------------
// Scalar pieces

// Barrier that vanishes for comfortably positive footprint areas and blows
// up as the area approaches eps1 from above.
inline double f_area(double a, double eps1, double eps2) {
  if (a >= eps2) return 0;
  if (a <= eps1) return kInf;
  const double r = (eps2 - eps1) / (a - eps1) - 1.0;
  return r * r;
}

inline double f_area_deriv(double a, double eps1, double eps2) {
  if (a >= eps2 || a <= eps1) return 0;
  const double k = eps2 - eps1;
  const double r = k / (a - eps1) - 1.0;
  return -2.0 * r * k / ((a - eps1) * (a - eps1));
}

// Reciprocal TIR margin; the margin itself is 1 + eta^2((n.a)^2 - 1).
inline double f_tir(double margin) { return margin > 0 ? 1.0 / margin : kInf; }
inline double f_tir_deriv(double margin) { return -1.0 / (margin * margin); }

// Welsch penalty expressed in the squared residual h = (sqrt h)^2, which
// keeps the derivative finite at h = 0.
inline double welsch_sq(double h, double nu) { return 1.0 - std::exp(-h / (2.0 * nu * nu)); }
inline double welsch_sq_deriv(double h, double nu) {
  return std::exp(-h / (2.0 * nu * nu)) / (2.0 * nu * nu);
}

inline double e_img(const GrayImage& rendered, const GrayImage& target) {
  if (rendered.width != target.width || rendered.height != target.height) {
    throw Error("image size mismatch");
  }
  double acc = 0;
  for (std::size_t i = 0; i < rendered.v.size(); ++i) {
    const double d = rendered.v[i] - target.v[i];
    acc += d * d;
  }
  return acc;
}

// Sum of squared forward differences against the target's, x then y;
// replicate boundary (the last column/row contributes zero difference).
inline double e_grad(const GrayImage& rendered, const GrayImage& target) {
  if (rendered.width != target.width || rendered.height != target.height) {
    throw Error("image size mismatch");
  }
  const int w = rendered.width, h = rendered.height;
  double acc = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (c + 1 < w) {
        const double d = (rendered.at(r, c + 1) - rendered.at(r, c)) -
                         (target.at(r, c + 1) - target.at(r, c));
        acc += d * d;
      }
      if (r + 1 < h) {
        const double d = (rendered.at(r + 1, c) - rendered.at(r, c)) -
                         (target.at(r + 1, c) - target.at(r, c));
        acc += d * d;
      }
    }
  }
  return acc;
}

inline double e_bdr(const std::vector<std::array<Vec2d, 3>>& tris, const Rect& region) {
  double acc = 0;
  for (const auto& t : tris) {
    for (const Vec2d& p : t) {
      const Vec2d d = p - region.closest_point(p);
      acc += norm2(d);
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Per-face Weingarten variables (symmetric 2x2: a, b, off-diagonal c) and the
// edge consistency residual.

struct WeingartenVars {
  std::vector<double> m;  // 3 per face: a, b, c

  WeingartenVars() = default;
  explicit WeingartenVars(int n_faces) : m(static_cast<std::size_t>(n_faces) * 3, 0.0) {}
  double a(int f) const { return m[3 * f]; }
  double b(int f) const { return m[3 * f + 1]; }
  double c(int f) const { return m[3 * f + 2]; }
};

// Children keep the parent's shape operator, rotated into their own tangent
// frame (child faces are coplanar with the parent but may order their first
// edge differently).
inline WeingartenVars inherit_weingarten(const WeingartenVars& vars, const HeightFieldMesh& parent,
                                         const HeightFieldMesh& child,
                                         const std::vector<Vec3d>& parent_pos,
                                         const std::vector<Vec3d>& child_pos) {
  WeingartenVars out(child.face_count());
  for (int f = 0; f < child.face_count(); ++f) {
    const int pf = parent_face(parent, f);
    const auto cv = child.face_vertices(f);
    const auto pv = parent.face_vertices(pf);
    const Vec3d cn = cross(child_pos[cv[1]] - child_pos[cv[0]], child_pos[cv[2]] - child_pos[cv[0]]);
    const Vec3d pn = cross(parent_pos[pv[1]] - parent_pos[pv[0]], parent_pos[pv[2]] - parent_pos[pv[0]]);
    if (norm(cn) == 0 || norm(pn) == 0) continue;
    const Vec3d n = normalized(pn);
    const Vec3d pe1 = normalized(parent_pos[pv[1]] - parent_pos[pv[0]]);
    const Vec3d pe2 = cross(n, pe1);
    const Vec3d ce1 = normalized(child_pos[cv[1]] - child_pos[cv[0]]);
    // rotation angle of the child frame within the shared tangent plane
    const double ct = dot(ce1, pe1), st = dot(ce1, pe2);
    const double a = vars.a(pf), b = vars.b(pf), c = vars.c(pf);
    // R^T M R with R = [[ct, -st], [st, ct]]
    out.m[3 * f] = ct * ct * a + 2 * ct * st * c + st * st * b;
    out.m[3 * f + 1] = st * st * a - 2 * ct * st * c + ct * ct * b;
    out.m[3 * f + 2] = (b - a) * ct * st + (ct * ct - st * st) * c;
  }
  return out;
}

namespace detail {

template <class S>
struct FaceFrame {
  Vec3<S> n, e1, e2, centroid;
  bool ok = true;
};

template <class S>
inline FaceFrame<S> face_frame(const Vec3<S>& p0, const Vec3<S>& p1, const Vec3<S>& p2) {
  FaceFrame<S> fr;
  const Vec3<S> nv = cross(p1 - p0, p2 - p0);
  const S nl = norm(nv);
  if (value_of(nl) == 0) {
    fr.ok = false;
    return fr;
  }
  fr.n = nv / nl;
  fr.e1 = normalized(p1 - p0);
  fr.e2 = cross(fr.n, fr.e1);
  fr.centroid = (p0 + p1 + p2) / S(3.0);
  return fr;
}

// One-sided residual delta(t_i -> t_j) plus its gradient in M_i. Positions
// enter through the templated scalar.
template <class S>
inline S edge_delta(const FaceFrame<S>& fi, const FaceFrame<S>& fj, double a, double b, double c,
                    double* dm, bool* degenerate) {
  const Vec3<S> dc = fj.centroid - fi.centroid;
  const Vec3<S> dn = fj.n - fi.n;
  const Vec2<S> dbar{dot(fi.e1, dc), dot(fi.e2, dc)};
  const Vec2<S> nbar{dot(fi.e1, dn), dot(fi.e2, dn)};
  const S d2 = norm2(dbar);
  if (value_of(d2) == 0) {
    *degenerate = true;
    return S(0.0);
  }
  const Vec2<S> r{S(a) * dbar.x + S(c) * dbar.y - nbar.x, S(c) * dbar.x + S(b) * dbar.y - nbar.y};
  const S delta = norm2(r) / d2;
  if (dm) {
    const double inv = 1.0 / value_of(d2);
    const double rx = value_of(r.x), ry = value_of(r.y);
    const double dx = value_of(dbar.x), dy = value_of(dbar.y);
    dm[0] = 2.0 * rx * dx * inv;
    dm[1] = 2.0 * ry * dy * inv;
    dm[2] = 2.0 * (rx * dy + ry * dx) * inv;
  }
  return delta;
}

}  // namespace detail

// Symmetric edge residual h(e) = delta(i->j) + delta(j->i) on explicit
// positions (mesh vertices for parallel scenes, traced back vertices for
// point-source ones).
inline double edge_residual(const HeightFieldMesh& mesh, const std::vector<Vec3d>& pos,
                            const WeingartenVars& vars, const InternalEdge& e) {
  auto frame = [&](int f) {
    const auto v = mesh.face_vertices(f);
    return detail::face_frame<double>(pos[v[0]], pos[v[1]], pos[v[2]]);
  };
  const auto fi = frame(e.f0), fj = frame(e.f1);
  if (!fi.ok || !fj.ok) throw DegenerateFace(!fi.ok ? e.f0 : e.f1);
  bool degen = false;
  const double d0 = detail::edge_delta(fi, fj, vars.a(e.f0), vars.b(e.f0), vars.c(e.f0), nullptr, &degen);
  const double d1 = detail::edge_delta(fj, fi, vars.a(e.f1), vars.b(e.f1), vars.c(e.f1), nullptr, &degen);
  if (degen) throw DegenerateEdge(e.f0);
  return d0 + d1;
}

// Median of sqrt(h) over internal edges; used to scale the Welsch schedule.
inline double median_edge_residual(const HeightFieldMesh& mesh, const std::vector<Vec3d>& pos,
                                   const WeingartenVars& vars) {
  const auto edges = internal_edges(mesh);
  std::vector<double> r;
  r.reserve(edges.size());
  for (const auto& e : edges) r.push_back(std::sqrt(edge_residual(mesh, pos, vars, e)));
  if (r.empty()) return 0;
  std::nth_element(r.begin(), r.begin() + r.size() / 2, r.end());
  return r[r.size() / 2];
}

// Per-face least-squares fit of (a, b, c) to the adjacent-face normal
// differences; the best explanation of the mesh as a smooth surface.
inline WeingartenVars fit_weingarten(const HeightFieldMesh& mesh, const std::vector<Vec3d>& pos) {
  const int nf = mesh.face_count();
  WeingartenVars vars(nf);
  std::vector<detail::FaceFrame<double>> frames(nf);
  for (int f = 0; f < nf; ++f) {
    const auto v = mesh.face_vertices(f);
    frames[f] = detail::face_frame<double>(pos[v[0]], pos[v[1]], pos[v[2]]);
  }
  // normal equations per face, accumulated over its internal edges
  std::vector<std::array<double, 9>> ata(nf, {0, 0, 0, 0, 0, 0, 0, 0, 0});
  std::vector<std::array<double, 3>> atb(nf, {0, 0, 0});
  auto accumulate = [&](int fi, int fj) {
    const auto& a = frames[fi];
    const auto& b = frames[fj];
    if (!a.ok || !b.ok) return;
    const Vec3d dc = b.centroid - a.centroid;
    const Vec3d dn = b.n - a.n;
    const Vec2d dbar{dot(a.e1, dc), dot(a.e2, dc)};
    const Vec2d nbar{dot(a.e1, dn), dot(a.e2, dn)};
    const double w = 1.0 / norm2(dbar);
    // rows: [dx 0 dy | nx], [0 dy dx | ny], weighted by 1/|dbar|^2
    const double dx = dbar.x, dy = dbar.y;
    auto& m = ata[fi];
    auto& r = atb[fi];
    m[0] += w * dx * dx;
    m[2] += w * dx * dy;
    m[4] += w * dy * dy;
    m[5] += w * dy * dx;
    m[8] += w * (dy * dy + dx * dx);
    r[0] += w * dx * nbar.x;
    r[1] += w * dy * nbar.y;
    r[2] += w * (dy * nbar.x + dx * nbar.y);
  };
  for (const auto& e : internal_edges(mesh)) {
    accumulate(e.f0, e.f1);
    accumulate(e.f1, e.f0);
  }
  for (int f = 0; f < nf; ++f) {
    // symmetric 3x3 solve with a tiny ridge for rank-deficient faces
    double m00 = ata[f][0] + 1e-12, m01 = 0, m02 = ata[f][2];
    double m11 = ata[f][4] + 1e-12, m12 = ata[f][5];
    double m22 = ata[f][8] + 1e-12;
    const double b0 = atb[f][0], b1 = atb[f][1], b2 = atb[f][2];
    // Cholesky
    const double l00 = std::sqrt(m00);
    const double l10 = m01 / l00;
    const double l20 = m02 / l00;
    const double l11 = std::sqrt(m11 - l10 * l10);
    const double l21 = (m12 - l20 * l10) / l11;
    const double l22 = std::sqrt(m22 - l20 * l20 - l21 * l21);
    const double y0 = b0 / l00;
    const double y1 = (b1 - l10 * y0) / l11;
    const double y2 = (b2 - l20 * y0 - l21 * y1) / l22;
    const double c = y2 / l22;
    const double b = (y1 - l21 * c) / l11;
    const double a = (y0 - l10 * b - l20 * c) / l00;
    vars.m[3 * f] = a;
    vars.m[3 * f + 1] = b;
    vars.m[3 * f + 2] = c;
  }
  return vars;
}

// ---------------------------------------------------------------------------
// Objective assembly. One context serves both optimization phases: the
// rendering-guided objective (image + gradient + boundary + smoothness +
// barriers) and the correspondence update (alignment + flux preservation +
// smoothness + barriers).

struct EnergyBreakdown {
  double total = 0, img = 0, grad = 0, bdr = 0, face = 0, edge = 0, lap = 0, smooth = 0, barr = 0,
         align = 0, flux = 0, spilled = 0;
};

struct PhaseWeights {
  double img = 0, grad = 0, bdr = 0, smooth = 0, barr = 0, align = 0, flux = 0;

  static PhaseWeights rendering(const EnergyWeights& w) {
    return {w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5, 0, 0};
  }
  static PhaseWeights update(const EnergyWeights& w) {
    return {0, 0, 0, w.gamma3, w.gamma4, w.gamma1, w.gamma2};
  }
};

class CausticObjective {
 public:
  CausticObjective(const HeightFieldMesh& topology, const SourceDistribution& dist,
                   const OpticalScene& scene, EnergyConfig cfg)
      : mesh_(topology),
        dist_(dist),
        scene_(scene),
        cfg_(cfg),
        edges_(internal_edges(topology)),
        point_(scene.light.kind == LightKind::Point && scene.mode == SurfaceMode::Refract) {}

  int n_vertex_vars() const { return 3 * mesh_.vertex_count(); }
  int n_vars() const { return 3 * mesh_.vertex_count() + 3 * mesh_.face_count(); }

  void set_phase(const PhaseWeights& w) { weights_ = w; }
  void set_nu(double nu) { cfg_.nu = nu; }
  const EnergyConfig& config() const { return cfg_; }
  EnergyConfig& config() { return cfg_; }
  const HeightFieldMesh& mesh() const { return mesh_; }

  // rendering-guided phase inputs
  void set_target(const GrayImage* gray, double gamma_total, const GammaModel* gamma, int w, int h) {
    target_ = gray;
    gamma_total_ = gamma_total;
    gamma_ = gamma;
    img_w_ = w;
    img_h_ = h;
  }

  // correspondence-update inputs: per-face OT centroids (alignment mask for
  // faces with a valid target) and the flux snapshot from the last render
  void set_update_targets(std::vector<Vec2d> centers, std::vector<uint8_t> center_ok,
                          std::vector<double> phi_old) {
    align_target_ = std::move(centers);
    align_ok_ = std::move(center_ok);
    phi_old_ = std::move(phi_old);
  }

  std::vector<double> pack(const HeightFieldMesh& mesh, const WeingartenVars& vars) const {
    std::vector<double> x(n_vars());
    for (int v = 0; v < mesh.vertex_count(); ++v) {
      x[3 * v] = mesh.vertices[v].x;
      x[3 * v + 1] = mesh.vertices[v].y;
      x[3 * v + 2] = mesh.vertices[v].z;
    }
    std::copy(vars.m.begin(), vars.m.end(), x.begin() + n_vertex_vars());
    return x;
  }

  void unpack(const std::vector<double>& x, HeightFieldMesh& mesh, WeingartenVars& vars) const {
    mesh = mesh_;
    for (int v = 0; v < mesh.vertex_count(); ++v) {
      mesh.vertices[v] = {x[3 * v], x[3 * v + 1], x[3 * v + 2]};
    }
    vars.m.assign(x.begin() + n_vertex_vars(), x.end());
  }

  double operator()(const std::vector<double>& x, std::vector<double>* grad,
                    EnergyBreakdown* out = nullptr) const {
    HeightFieldMesh mesh;
    WeingartenVars vars;
    unpack(x, mesh, vars);
    const int nf = mesh.face_count();
    const int nv = mesh.vertex_count();
    EnergyBreakdown bd;

    const auto traces = detail::corner_traces(mesh, scene_, /*nothrow=*/true);
    for (const auto& t : traces) {
      if (!t.ok) return kInf;
    }

    std::vector<detail::FacePacket<double>> packets(nf);
    bool feasible = true;
    parallel_for_chunked(nf, [&](int, std::size_t b, std::size_t e) {
      for (std::size_t f = b; f < e; ++f) {
        packets[f] = detail::face_packet<double>(mesh, dist_, scene_, traces, static_cast<int>(f));
      }
    });
    const bool reflective = scene_.mode == SurfaceMode::Reflect;
    for (int f = 0; f < nf; ++f) {
      const auto& pk = packets[f];
      if (pk.status != detail::FaceStatus::Ok || pk.proj_area <= cfg_.eps1 ||
          (point_ && pk.front_area <= cfg_.eps1) || (!reflective && pk.margin <= 0)) {
        feasible = false;
        break;
      }
    }
    if (!feasible) return kInf;

    // barriers
    for (int f = 0; f < nf; ++f) {
      bd.barr += f_area(packets[f].proj_area, cfg_.eps1, cfg_.eps2);
      if (point_) bd.barr += f_area(packets[f].front_area, cfg_.eps1, cfg_.eps2);
      if (!reflective) bd.barr += f_tir(packets[f].margin);
    }

    // face fluxes (normalized for point sources)
    std::vector<double> face_flux(nf);
    double flux_norm = 1;
    if (scene_.light.kind == LightKind::Point) {
      flux_norm = 0;
      for (int f = 0; f < nf; ++f) flux_norm += packets[f].flux_pre;
      if (flux_norm <= 0) return kInf;
      for (int f = 0; f < nf; ++f) face_flux[f] = packets[f].flux_pre / flux_norm;
    } else {
      for (int f = 0; f < nf; ++f) face_flux[f] = packets[f].flux_pre;
    }

    std::vector<std::array<Vec2d, 3>> tris(nf);
    for (int f = 0; f < nf; ++f) tris[f] = packets[f].u;

    // image-space terms
    FluxImage flux_img;
    GrayImage rendered;
    std::vector<double> dldpix;
    if (weights_.img != 0 || weights_.grad != 0) {
      flux_img = rasterize_flux(tris, face_flux, img_w_, img_h_, scene_.image_region);
      bd.spilled = flux_img.spilled;
      rendered = flux_to_gray(flux_img, gamma_total_, *gamma_);
      bd.img = e_img(rendered, *target_);
      bd.grad = e_grad(rendered, *target_);
      if (grad) {
        // d(loss)/d(gray), then through the inverse transfer to pixel flux
        std::vector<double> dldg(rendered.v.size(), 0.0);
        for (std::size_t i = 0; i < rendered.v.size(); ++i) {
          dldg[i] = 2.0 * weights_.img * (rendered.v[i] - target_->v[i]);
        }
        const int w = img_w_, h = img_h_;
        for (int r = 0; r < h; ++r) {
          for (int c = 0; c < w; ++c) {
            if (c + 1 < w) {
              const double d = (rendered.at(r, c + 1) - rendered.at(r, c)) -
                               (target_->at(r, c + 1) - target_->at(r, c));
              dldg[static_cast<std::size_t>(r) * w + c + 1] += 2.0 * weights_.grad * d;
              dldg[static_cast<std::size_t>(r) * w + c] -= 2.0 * weights_.grad * d;
            }
            if (r + 1 < h) {
              const double d = (rendered.at(r + 1, c) - rendered.at(r, c)) -
                               (target_->at(r + 1, c) - target_->at(r, c));
              dldg[static_cast<std::size_t>(r + 1) * w + c] += 2.0 * weights_.grad * d;
              dldg[static_cast<std::size_t>(r) * w + c] -= 2.0 * weights_.grad * d;
            }
          }
        }
        dldpix.resize(dldg.size());
        for (std::size_t i = 0; i < dldg.size(); ++i) {
          dldpix[i] = dldg[i] * gamma_total_ * gamma_->invert_deriv(gamma_total_ * flux_img.flux[i]);
        }
      }
    }
    if (weights_.bdr != 0) bd.bdr = e_bdr(tris, scene_.image_region);

    // update-phase terms
    if (weights_.align != 0) {
      for (int f = 0; f < nf; ++f) {
        if (!align_ok_[f]) continue;
        const Vec2d c = (tris[f][0] + tris[f][1] + tris[f][2]) / 3.0;
        bd.align += norm2(c - align_target_[f]);
      }
    }
    if (weights_.flux != 0) {
      for (int f = 0; f < nf; ++f) {
        const double d = face_flux[f] - phi_old_[f];
        bd.flux += d * d;
      }
    }

    // smoothness: per-face energy, Welsch edge term, umbrella Laplacian
    if (weights_.smooth != 0) {
      for (int f = 0; f < nf; ++f) {
        const double hmean = 0.5 * (vars.a(f) + vars.b(f));
        bd.face += hmean * hmean * packets[f].area3d;
      }
      std::vector<Vec3d> pos(nv);
      for (int v = 0; v < nv; ++v) pos[v] = traces[v].pos;
      for (const auto& e : edges_) {
        double h;
        try {
          h = edge_residual(mesh, pos, vars, e);
        } catch (const Error&) {
          return kInf;
        }
        bd.edge += welsch_sq(h, cfg_.nu);
      }
      for (int j = 1; j + 1 < mesh.ny; ++j) {
        for (int i = 1; i + 1 < mesh.nx; ++i) {
          std::array<int, 6> nb;
          const int cnt = vertex_neighbors(mesh, i, j, nb);
          Vec2d mean{0, 0};
          for (int k = 0; k < cnt; ++k) mean += pos[nb[k]].xy();
          mean = mean / static_cast<double>(cnt);
          bd.lap += norm2(pos[mesh.vertex_index(i, j)].xy() - mean);
        }
      }
      bd.smooth = bd.face + cfg_.w.tau1 * bd.edge + cfg_.w.tau2 * bd.lap;
    }

    bd.total = weights_.img * bd.img + weights_.grad * bd.grad + weights_.bdr * bd.bdr +
               weights_.smooth * bd.smooth + weights_.barr * bd.barr + weights_.align * bd.align +
               weights_.flux * bd.flux;
    if (out) *out = bd;
    if (!grad) return bd.total;

    // ------------------------------------------------------------------ grad
    grad->assign(x.size(), 0.0);
    std::vector<double> dldflux(nf, 0.0), dldproj(nf, 0.0), dldfront, dldmargin, dldarea3d;
    std::vector<Vec2d> dldcentroid;
    detail::AdjointTerms terms;

    if (!dldpix.empty()) {
      for (int f = 0; f < nf; ++f) {
        dldflux[f] = detail::allocation_weight(tris[f], img_w_, img_h_, scene_.image_region,
                                               dldpix.data(), 0.0);
      }
      terms.dldpix = dldpix.data();
      terms.dldspilled = 0;
      terms.face_flux = face_flux.data();
    }
    if (weights_.flux != 0) {
      for (int f = 0; f < nf; ++f) dldflux[f] += 2.0 * weights_.flux * (face_flux[f] - phi_old_[f]);
    }
    if (scene_.light.kind == LightKind::Point) {
      double corr = 0;
      for (int f = 0; f < nf; ++f) corr += dldflux[f] * face_flux[f];
      for (int f = 0; f < nf; ++f) dldflux[f] = (dldflux[f] - corr) / flux_norm;
    }
    terms.dldflux = dldflux.data();

    for (int f = 0; f < nf; ++f) {
      dldproj[f] = weights_.barr * f_area_deriv(packets[f].proj_area, cfg_.eps1, cfg_.eps2);
    }
    terms.dldproj = dldproj.data();
    if (point_) {
      dldfront.resize(nf);
      for (int f = 0; f < nf; ++f) {
        dldfront[f] = weights_.barr * f_area_deriv(packets[f].front_area, cfg_.eps1, cfg_.eps2);
      }
      terms.dldfront = dldfront.data();
    }
    if (!reflective && weights_.barr != 0) {
      dldmargin.resize(nf);
      for (int f = 0; f < nf; ++f) dldmargin[f] = weights_.barr * f_tir_deriv(packets[f].margin);
      terms.dldmargin = dldmargin.data();
    }
    if (weights_.smooth != 0) {
      dldarea3d.resize(nf);
      for (int f = 0; f < nf; ++f) {
        const double hmean = 0.5 * (vars.a(f) + vars.b(f));
        dldarea3d[f] = weights_.smooth * hmean * hmean;
        // face-energy gradient in the Weingarten variables
        const double k = weights_.smooth * hmean * packets[f].area3d;
        (*grad)[n_vertex_vars() + 3 * f] += k;
        (*grad)[n_vertex_vars() + 3 * f + 1] += k;
      }
      terms.dldarea3d = dldarea3d.data();
    }
    if (weights_.align != 0) {
      dldcentroid.assign(nf, Vec2d{0, 0});
      for (int f = 0; f < nf; ++f) {
        if (!align_ok_[f]) continue;
        const Vec2d c = (tris[f][0] + tris[f][1] + tris[f][2]) / 3.0;
        dldcentroid[f] = (c - align_target_[f]) * (2.0 * weights_.align);
      }
      terms.dldcentroid = dldcentroid.data();
    }
    terms.bdr_w = weights_.bdr;

    detail::face_adjoint_pass(mesh, dist_, scene_, traces, tris, img_w_, img_h_, terms, *grad);

    // edge + Laplacian gradients act on positions; chain through the traces
    if (weights_.smooth != 0) {
      std::vector<double> pos_grad(static_cast<std::size_t>(nv) * 3, 0.0);
      std::vector<Vec3d> pos(nv);
      for (int v = 0; v < nv; ++v) pos[v] = traces[v].pos;
      edge_gradient(mesh, pos, vars, weights_.smooth * cfg_.w.tau1, pos_grad,
                    grad->data() + n_vertex_vars());
      lap_gradient(mesh, pos, weights_.smooth * cfg_.w.tau2, pos_grad);
      if (scene_.light.kind == LightKind::Point) {
        for (int v = 0; v < nv; ++v) {
          for (int c = 0; c < 3; ++c) {
            double acc = 0;
            for (int r = 0; r < 3; ++r) acc += pos_grad[3 * v + r] * traces[v].jpos[r][c];
            (*grad)[3 * v + c] += acc;
          }
        }
      } else {
        for (int i = 0; i < 3 * nv; ++i) (*grad)[i] += pos_grad[i];
      }
    }

    for (int v = 0; v < nv; ++v) {
      if (mesh.frozen[v] & 1) (*grad)[3 * v] = 0;
      if (mesh.frozen[v] & 2) (*grad)[3 * v + 1] = 0;
    }
    return bd.total;
  }

  // Convenience wrappers for the two phases.
  Objective rendering_objective() {
    set_phase(PhaseWeights::rendering(cfg_.w));
    return [this](const std::vector<double>& x, std::vector<double>* g) { return (*this)(x, g); };
  }
  Objective update_objective() {
    set_phase(PhaseWeights::update(cfg_.w));
    return [this](const std::vector<double>& x, std::vector<double>* g) { return (*this)(x, g); };
  }

 private:
  // Welsch edge-term gradient: dual numbers over the four incident vertices,
  // analytic in the Weingarten variables.
  void edge_gradient(const HeightFieldMesh& mesh, const std::vector<Vec3d>& pos,
                     const WeingartenVars& vars, double weight, std::vector<double>& pos_grad,
                     double* mgrad) const {
    using D12 = Dual<12>;
    const int chunks = chunk_count(edges_.size(), 64);
    std::vector<std::vector<double>> pg(chunks), mg(chunks);
    parallel_for_chunked(
        edges_.size(),
        [&](int chunk, std::size_t eb, std::size_t ee) {
          pg[chunk].assign(pos_grad.size(), 0.0);
          mg[chunk].assign(static_cast<std::size_t>(mesh_.face_count()) * 3, 0.0);
          for (std::size_t ei = eb; ei < ee; ++ei) {
            const InternalEdge& e = edges_[ei];
            const int vid[4] = {e.v0, e.v1, e.o0, e.o1};
            auto slot_of = [&](int v) {
              for (int k = 0; k < 4; ++k) {
                if (vid[k] == v) return k;
              }
              return -1;
            };
            Vec3<D12> p[4];
            for (int k = 0; k < 4; ++k) {
              p[k] = {D12::seeded(pos[vid[k]].x, 3 * k), D12::seeded(pos[vid[k]].y, 3 * k + 1),
                      D12::seeded(pos[vid[k]].z, 3 * k + 2)};
            }
            auto frame_of = [&](int f) {
              const auto fv = mesh.face_vertices(f);
              return detail::face_frame<D12>(p[slot_of(fv[0])], p[slot_of(fv[1])], p[slot_of(fv[2])]);
            };
            const auto fi = frame_of(e.f0), fj = frame_of(e.f1);
            if (!fi.ok || !fj.ok) continue;
            double dm0[3], dm1[3];
            bool degen = false;
            const D12 h = detail::edge_delta(fi, fj, vars.a(e.f0), vars.b(e.f0), vars.c(e.f0), dm0,
                                             &degen) +
                          detail::edge_delta(fj, fi, vars.a(e.f1), vars.b(e.f1), vars.c(e.f1), dm1,
                                             &degen);
            if (degen) continue;
            const double k = weight * welsch_sq_deriv(h.v, cfg_.nu);
            for (int s = 0; s < 4; ++s) {
              for (int c = 0; c < 3; ++c) {
                pg[chunk][3 * vid[s] + c] += k * h.d[3 * s + c];
              }
            }
            for (int c = 0; c < 3; ++c) {
              mg[chunk][3 * e.f0 + c] += k * dm0[c];
              mg[chunk][3 * e.f1 + c] += k * dm1[c];
            }
          }
        },
        64);
    for (int c = 0; c < chunks; ++c) {
      if (pg[c].empty()) continue;
      for (std::size_t i = 0; i < pos_grad.size(); ++i) pos_grad[i] += pg[c][i];
      for (std::size_t i = 0; i < mg[c].size(); ++i) mgrad[i] += mg[c][i];
    }
  }

  void lap_gradient(const HeightFieldMesh& mesh, const std::vector<Vec3d>& pos, double weight,
                    std::vector<double>& pos_grad) const {
    for (int j = 1; j + 1 < mesh.ny; ++j) {
      for (int i = 1; i + 1 < mesh.nx; ++i) {
        std::array<int, 6> nb;
        const int cnt = vertex_neighbors(mesh, i, j, nb);
        Vec2d mean{0, 0};
        for (int k = 0; k < cnt; ++k) mean += pos[nb[k]].xy();
        mean = mean / static_cast<double>(cnt);
        const int v = mesh.vertex_index(i, j);
        const Vec2d u = pos[v].xy() - mean;
        pos_grad[3 * v] += weight * 2.0 * u.x;
        pos_grad[3 * v + 1] += weight * 2.0 * u.y;
        const double share = -weight * 2.0 / cnt;
        for (int k = 0; k < cnt; ++k) {
          pos_grad[3 * nb[k]] += share * u.x;
          pos_grad[3 * nb[k] + 1] += share * u.y;
        }
      }
    }
  }

  HeightFieldMesh mesh_;
  SourceDistribution dist_;
  OpticalScene scene_;
  EnergyConfig cfg_;
  std::vector<InternalEdge> edges_;
  bool point_;
  PhaseWeights weights_;

  const GrayImage* target_ = nullptr;
  double gamma_total_ = 0;
  const GammaModel* gamma_ = nullptr;
  int img_w_ = 0, img_h_ = 0;

  std::vector<Vec2d> align_target_;
  std::vector<uint8_t> align_ok_;
  std::vector<double> phi_old_;
};

}  // namespace caustic

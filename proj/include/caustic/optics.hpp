// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "caustic/geometry.hpp"

namespace caustic {

enum class SurfaceMode { Refract, Reflect };
enum class LightKind { Parallel, Point };

struct LightSource {
  LightKind kind = LightKind::Parallel;
  Vec3d direction{0, 0, 1};  // propagation direction of a parallel beam
  Vec3d position{0, 0, -1};  // point-source location
};

// First surface hit by light from a point source. Either a plane z = z0 or a
// bilinear height field sampled on a regular grid over the lens footprint.
struct FrontSurface {
  double z0 = 0;
  int nx = 0, ny = 0;
  double width = 0, height = 0;
  std::vector<double> z;

  bool is_plane() const { return z.empty(); }

  void height_and_grad(double x, double y, double& h, double& hx, double& hy) const {
    if (is_plane()) {
      h = z0;
      hx = hy = 0;
      return;
    }
    const double dx = width / (nx - 1), dy = height / (ny - 1);
    double fx = std::min(std::max(x / dx, 0.0), nx - 1.000001);
    double fy = std::min(std::max(y / dy, 0.0), ny - 1.000001);
    const int i = static_cast<int>(fx), j = static_cast<int>(fy);
    const double u = fx - i, v = fy - j;
    const double z00 = z[j * nx + i], z10 = z[j * nx + i + 1];
    const double z01 = z[(j + 1) * nx + i], z11 = z[(j + 1) * nx + i + 1];
    h = (1 - u) * (1 - v) * z00 + u * (1 - v) * z10 + (1 - u) * v * z01 + u * v * z11;
    hx = ((1 - v) * (z10 - z00) + v * (z11 - z01)) / dx;
    hy = ((1 - u) * (z01 - z00) + u * (z11 - z10)) / dy;
  }

  double height_at(double x, double y) const {
    double h, hx, hy;
    height_and_grad(x, y, h, hx, hy);
    return h;
  }

  template <class S>
  S height_dual(const S& x, const S& y) const {
    double h, hx, hy;
    height_and_grad(value_of(x), value_of(y), h, hx, hy);
    S r = x * S(hx) + y * S(hy);
    r += S(h - value_of(x) * hx - value_of(y) * hy);
    return r;
  }
};

struct OpticalScene {
  SurfaceMode mode = SurfaceMode::Refract;
  LightSource light;
  FrontSurface front;
  double ior = 1.49;      // material index; surrounding medium is air
  double z_focal = 30;    // receptive plane height
  Rect image_region;

  // Relative index at the optimized back surface (medium -> air).
  double eta_back() const { return ior; }
  // Relative index entering through the front (air -> medium).
  double eta_front() const { return 1.0 / ior; }
};

// Safety margin of Snell's law: 1 + eta^2 ((n.a)^2 - 1). Positive iff a
// transmitted ray exists; approaches 0 at the critical angle.
template <class S>
inline S tir_margin(const Vec3<S>& a, const Vec3<S>& n, double eta) {
  const S c = dot(n, a);
  return S(1.0) + S(eta * eta) * (c * c - S(1.0));
}

// Transmitted direction for unit incident a and unit normal n with n.a > 0;
// unit by construction. Callers must ensure the margin is positive.
template <class S>
inline Vec3<S> refract_dir(const Vec3<S>& a, const Vec3<S>& n, double eta) {
  using std::sqrt;
  const S c = dot(n, a);
  const S margin = S(1.0) + S(eta * eta) * (c * c - S(1.0));
  return n * sqrt(margin) + (a - n * c) * S(eta);
}

inline Vec3d refract(const Vec3d& a, const Vec3d& n, double eta, int face = -1) {
  if (tir_margin(a, n, eta) <= 0) throw TotalInternalReflection(face);
  return refract_dir(a, n, eta);
}

template <class S>
inline Vec3<S> reflect_dir(const Vec3<S>& a, const Vec3<S>& n) {
  return a - n * (S(2.0) * dot(a, n));
}

// Direction inside the medium for a parallel beam that entered through the
// flat front plane (identity for normal incidence).
inline Vec3d parallel_interior_direction(const OpticalScene& scene) {
  const Vec3d a = normalized(scene.light.direction);
  if (scene.mode == SurfaceMode::Reflect) return a;
  if (a.z <= 0) throw AssumptionViolation("parallel refractive light must travel toward +z");
  return refract(a, Vec3d{0, 0, 1}, scene.eta_front());
}

template <class S>
struct BackVertex {
  Vec3<S> position;  // point on the back surface
  Vec3<S> incident;  // unit ray direction arriving there
};

// Traces one point-source ray through the front surface. Parameters are the
// footprint coordinates (xf, yf) of the entry point and the exit height zb.
template <class S>
inline BackVertex<S> back_vertex_from_params(const OpticalScene& scene, const S& xf, const S& yf,
                                             const S& zb) {
  const S h = scene.front.height_dual(xf, yf);
  const Vec3<S> vf{xf, yf, h};
  const Vec3d q = scene.light.position;
  const Vec3<S> a = normalized(Vec3<S>{vf.x - S(q.x), vf.y - S(q.y), vf.z - S(q.z)});
  double hv, hx, hy;
  scene.front.height_and_grad(value_of(xf), value_of(yf), hv, hx, hy);
  const Vec3<S> nf = normalized(Vec3<S>{S(-hx), S(-hy), S(1.0)});
  if (value_of(dot(nf, a)) <= 0) {
    throw AssumptionViolation("ray arrives at the front surface from above");
  }
  // eta < 1 entering the denser medium: refraction always exists
  const Vec3<S> b = refract_dir(a, nf, scene.eta_front());
  if (value_of(b.z) <= 1e-12) {
    throw AssumptionViolation("refracted front ray does not continue upward");
  }
  const S t = (zb - vf.z) / b.z;
  if (value_of(t) <= 0) {
    throw AssumptionViolation("back surface lies behind the front surface along the ray");
  }
  return {vf + b * t, b};
}

}  // namespace caustic

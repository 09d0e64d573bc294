// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cassert>
#include <cstring>

#include "caustic/core.hpp"

namespace caustic {

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double diagonal() const { return std::sqrt(width() * width() + height() * height()); }
  bool contains(const Vec2d& p) const { return p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1; }

  Vec2d closest_point(const Vec2d& p) const {
    return {std::min(std::max(p.x, x0), x1), std::min(std::max(p.y, y0), y1)};
  }
};

// Fixed-capacity convex polygon used by the clipping kernels; clipping a
// convex CAP-gon by a half-plane adds at most one vertex.
template <class S, int CAP>
struct ClipPoly {
  std::array<Vec2<S>, CAP> pt;
  int n = 0;

  void clear() { n = 0; }
  void push(const Vec2<S>& p) {
    assert(n < CAP);
    pt[n++] = p;
  }
};

// Clips against {p.axis <= bound} when keep_less, else {p.axis >= bound}.
// Vertices exactly on the boundary are kept, so degenerate slivers stay
// consistent between adjacent half-planes.
template <class S, int CAP>
inline void clip_axis(const ClipPoly<S, CAP>& in, ClipPoly<S, CAP>& out, int axis, double bound,
                      bool keep_less) {
  out.clear();
  if (in.n == 0) return;
  auto coord = [&](const Vec2<S>& p) -> const S& { return axis == 0 ? p.x : p.y; };
  auto inside = [&](const S& c) {
    return keep_less ? value_of(c) <= bound : value_of(c) >= bound;
  };
  const Vec2<S>* prev = &in.pt[in.n - 1];
  bool prev_in = inside(coord(*prev));
  for (int i = 0; i < in.n; ++i) {
    const Vec2<S>& cur = in.pt[i];
    const bool cur_in = inside(coord(cur));
    if (cur_in != prev_in) {
      const S t = (S(bound) - coord(*prev)) / (coord(cur) - coord(*prev));
      out.push({prev->x + (cur.x - prev->x) * t, prev->y + (cur.y - prev->y) * t});
    }
    if (cur_in) out.push(cur);
    prev = &cur;
    prev_in = cur_in;
  }
}

// Clips against the half-plane {dot(a, p) <= b}.
template <class S, int CAP>
inline void clip_halfplane(const ClipPoly<S, CAP>& in, ClipPoly<S, CAP>& out, const Vec2d& a, double b) {
  out.clear();
  if (in.n == 0) return;
  auto side = [&](const Vec2<S>& p) { return a.x * value_of(p.x) + a.y * value_of(p.y) - b; };
  const Vec2<S>* prev = &in.pt[in.n - 1];
  double prev_s = side(*prev);
  for (int i = 0; i < in.n; ++i) {
    const Vec2<S>& cur = in.pt[i];
    const double cur_s = side(cur);
    if ((cur_s <= 0) != (prev_s <= 0)) {
      const double t = prev_s / (prev_s - cur_s);
      out.push({prev->x + (cur.x - prev->x) * S(t), prev->y + (cur.y - prev->y) * S(t)});
    }
    if (cur_s <= 0) out.push(cur);
    prev = &cur;
    prev_s = cur_s;
  }
}

template <class S, int CAP>
inline void clip_to_rect(ClipPoly<S, CAP>& poly, ClipPoly<S, CAP>& scratch, const Rect& r) {
  clip_axis(poly, scratch, 0, r.x0, false);
  clip_axis(scratch, poly, 0, r.x1, true);
  clip_axis(poly, scratch, 1, r.y0, false);
  clip_axis(scratch, poly, 1, r.y1, true);
}

template <class S, int CAP>
inline S polygon_signed_area(const ClipPoly<S, CAP>& poly) {
  S acc(0.0);
  for (int i = 0; i < poly.n; ++i) {
    const Vec2<S>& p = poly.pt[i];
    const Vec2<S>& q = poly.pt[(i + 1) % poly.n];
    acc += cross(p, q);
  }
  return acc * S(0.5);
}

inline double polygon_signed_area(const std::vector<Vec2d>& poly) {
  double acc = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    acc += cross(poly[i], poly[(i + 1) % poly.size()]);
  }
  return 0.5 * acc;
}

inline void clip_halfplane(const std::vector<Vec2d>& in, const Vec2d& a, double b,
                           std::vector<Vec2d>& out) {
  out.clear();
  if (in.empty()) return;
  out.reserve(in.size() + 1);
  auto side = [&](const Vec2d& p) { return a.x * p.x + a.y * p.y - b; };
  const Vec2d* prev = &in.back();
  double prev_s = side(*prev);
  for (const Vec2d& cur : in) {
    const double cur_s = side(cur);
    if ((cur_s <= 0) != (prev_s <= 0)) {
      const double t = prev_s / (prev_s - cur_s);
      out.push_back(*prev + (cur - *prev) * t);
    }
    if (cur_s <= 0) out.push_back(cur);
    prev = &cur;
    prev_s = cur_s;
  }
}

inline std::vector<Vec2d> clip_halfplane(const std::vector<Vec2d>& in, const Vec2d& a, double b) {
  std::vector<Vec2d> out;
  clip_halfplane(in, a, b, out);
  return out;
}

inline std::vector<Vec2d> clip_to_rect(const std::vector<Vec2d>& poly, const Rect& r) {
  auto out = clip_halfplane(poly, {-1, 0}, -r.x0);
  out = clip_halfplane(out, {1, 0}, r.x1);
  out = clip_halfplane(out, {0, -1}, -r.y0);
  return clip_halfplane(out, {0, 1}, r.y1);
}

inline Vec2d polygon_centroid(const std::vector<Vec2d>& poly) {
  double a = 0;
  Vec2d c{0, 0};
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2d& p = poly[i];
    const Vec2d& q = poly[(i + 1) % poly.size()];
    const double w = cross(p, q);
    a += w;
    c += (p + q) * w;
  }
  if (a == 0) {  // degenerate: fall back to the vertex mean
    for (const Vec2d& p : poly) c += p;
    return c / static_cast<double>(poly.size());
  }
  return c / (3.0 * a);
}

template <class S>
inline S triangle_signed_area(const Vec2<S>& a, const Vec2<S>& b, const Vec2<S>& c) {
  return cross(b - a, c - a) * S(0.5);
}

// One boundary edge's contribution to the integral of |s - c|^2 over the
// enclosed region (Green's theorem with Q = x(y-y0)^2, P = -y(x-x0)^2).
// Polynomial in the endpoints, so axis-aligned edges need no special case.
inline double squared_distance_edge_integral(const Vec2d& p1, const Vec2d& p2, const Vec2d& c) {
  const double x1 = p1.x, y1 = p1.y, x2 = p2.x, y2 = p2.y;
  const double x0 = c.x, y0 = c.y;
  const double xy = x1 * y2 - x2 * y1;
  const double q = (x2 - x1) * (y1 + y2) * (y1 * y1 + y2 * y2) / 4.0 +
                   (xy - 2.0 * y0 * (x2 - x1)) * (y1 * y1 + y2 * y2 + y1 * y2) / 3.0 +
                   (y0 * y0 * (x2 - x1) - 2.0 * y0 * xy) * (y1 + y2) / 2.0 + y0 * y0 * xy;
  const double p = (y1 - y2) * (x1 + x2) * (x1 * x1 + x2 * x2) / 4.0 +
                   (xy + 2.0 * x0 * (y2 - y1)) * (x1 * x1 + x2 * x2 + x1 * x2) / 3.0 +
                   (x0 * x0 * (y1 - y2) - 2.0 * x0 * xy) * (x1 + x2) / 2.0 + x0 * x0 * xy;
  return p + q;
}

// Integral of |s - c|^2 over a CCW polygon.
inline double integral_squared_distance(const std::vector<Vec2d>& poly, const Vec2d& c) {
  double acc = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    acc += squared_distance_edge_integral(poly[i], poly[(i + 1) % poly.size()], c);
  }
  return acc;
}

template <int CAP>
inline double integral_squared_distance(const ClipPoly<double, CAP>& poly, const Vec2d& c) {
  double acc = 0;
  for (int i = 0; i < poly.n; ++i) {
    acc += squared_distance_edge_integral(poly.pt[i], poly.pt[(i + 1) % poly.n], c);
  }
  return acc;
}

// Solid angle subtended at q by triangle (A, B, C), by van Oosterom-Strackee.
// The determinant enters through its absolute value, so the result lies in
// (0, 2*pi) regardless of the vertex order.
template <class S>
inline S triangle_solid_angle(const Vec3<S>& a, const Vec3<S>& b, const Vec3<S>& c, const Vec3<S>& q) {
  using std::atan2;
  using std::fabs;
  using std::sqrt;
  const Vec3<S> r1 = a - q, r2 = b - q, r3 = c - q;
  const S l1 = norm(r1), l2 = norm(r2), l3 = norm(r3);
  const S det = dot(r1, cross(r2, r3));
  const S den = l1 * l2 * l3 + dot(r1, r2) * l3 + dot(r1, r3) * l2 + dot(r2, r3) * l1;
  return S(2.0) * atan2(fabs(det), den);
}

// Intersection of the ray origin + t*dir with the plane z = z_plane,
// returned as the (x, y) coordinates on that plane.
template <class S>
inline Vec2<S> ray_hit_plane_z(const Vec3<S>& origin, const Vec3<S>& dir, double z_plane) {
  const S t = (S(z_plane) - origin.z) / dir.z;
  return {origin.x + dir.x * t, origin.y + dir.y * t};
}

}  // namespace caustic

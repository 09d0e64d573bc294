// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "caustic/core.hpp"
#include "caustic/geometry.hpp"

using namespace caustic;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Independent oracle for the quartic boundary integral: fan-triangulate and
// apply the edge-midpoint cubature, which integrates quadratics exactly.
double quad_oracle(const std::vector<Vec2d>& poly, const Vec2d& c) {
  if (poly.size() < 3) return 0;
  auto f = [&](const Vec2d& s) { return norm2(s - c); };
  double acc = 0;
  for (std::size_t i = 1; i + 1 < poly.size(); ++i) {
    const Vec2d a = poly[0], b = poly[i], d = poly[i + 1];
    const double area = triangle_signed_area(a, b, d);
    acc += area / 3.0 * (f((a + b) * 0.5) + f((b + d) * 0.5) + f((d + a) * 0.5));
  }
  return acc;
}

std::vector<Vec2d> random_convex_cell(Rng& rng) {
  // Random triangle clipped to a random pixel rectangle.
  std::vector<Vec2d> tri;
  for (int k = 0; k < 3; ++k) tri.push_back({rng.uniform(-1, 3), rng.uniform(-1, 3)});
  if (polygon_signed_area(tri) < 0) std::swap(tri[1], tri[2]);
  const double px = rng.uniform(0, 2), py = rng.uniform(0, 2);
  return clip_to_rect(tri, Rect{px, py, px + rng.uniform(0.2, 1.0), py + rng.uniform(0.2, 1.0)});
}

}  // namespace

TEST_CASE("rect helpers") {
  const Rect r{1, 2, 4, 6};
  CHECK(r.width() == 3);
  CHECK(r.height() == 4);
  CHECK(r.area() == 12);
  CHECK(r.diagonal() == 5);
  CHECK(r.contains({1, 2}));
  CHECK(r.contains({4, 6}));
  CHECK(!r.contains({0.99, 3}));
  const Vec2d q = r.closest_point({-3, -4});
  CHECK(q.x == 1);
  CHECK(q.y == 2);
}

TEST_CASE("halfplane clipping of the unit square") {
  const std::vector<Vec2d> sq{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  auto half = clip_halfplane(sq, {1, 0}, 0.5);  // keep x <= 0.5
  CHECK(polygon_signed_area(half) == Catch::Approx(0.5));
  auto none = clip_halfplane(sq, {1, 0}, -0.1);
  CHECK(none.empty());
  auto all = clip_halfplane(sq, {1, 0}, 2.0);
  CHECK(polygon_signed_area(all) == Catch::Approx(1.0));
  // Diagonal cut x + y <= 1 keeps the lower-left triangle.
  auto diag = clip_halfplane(sq, {1, 1}, 1.0);
  CHECK(polygon_signed_area(diag) == Catch::Approx(0.5));
}

TEST_CASE("rect clipping matches analytic overlap areas") {
  const std::vector<Vec2d> t1{{0, 0}, {2, 0}, {0, 2}};
  CHECK(polygon_signed_area(clip_to_rect(t1, Rect{0, 0, 1, 1})) == Catch::Approx(1.0));
  const std::vector<Vec2d> t2{{0, 0}, {3, 0}, {0, 3}};
  CHECK(polygon_signed_area(clip_to_rect(t2, Rect{1, 1, 2, 2})) == Catch::Approx(0.5));
  CHECK(clip_to_rect(t2, Rect{5, 5, 6, 6}).empty());
}

TEST_CASE("fixed-capacity clipper agrees with the vector clipper") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Vec2d> tri;
    ClipPoly<double, 8> poly, scratch;
    for (int k = 0; k < 3; ++k) tri.push_back({rng.uniform(-2, 4), rng.uniform(-2, 4)});
    if (polygon_signed_area(tri) < 0) std::swap(tri[1], tri[2]);
    for (const auto& p : tri) poly.push(p);
    const Rect r{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.5, 3), rng.uniform(1.5, 3)};
    clip_to_rect(poly, scratch, r);
    const auto ref = clip_to_rect(tri, r);
    REQUIRE(polygon_signed_area(poly) ==
            Catch::Approx(polygon_signed_area(ref)).margin(1e-13));
  }
}

TEST_CASE("pixel-clipped pieces tile the clipped polygon exactly") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Vec2d> tri;
    for (int k = 0; k < 3; ++k) tri.push_back({rng.uniform(0, 4), rng.uniform(0, 4)});
    if (polygon_signed_area(tri) < 0) std::swap(tri[1], tri[2]);
    const Rect region{0.5, 0.5, 3.5, 3.5};
    const double whole = polygon_signed_area(clip_to_rect(tri, region));
    double pieces = 0;
    const int n = 6;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const Rect pixel{region.x0 + region.width() * i / n, region.y0 + region.height() * j / n,
                         region.x0 + region.width() * (i + 1) / n,
                         region.y0 + region.height() * (j + 1) / n};
        pieces += polygon_signed_area(clip_to_rect(tri, pixel));
      }
    }
    REQUIRE(std::abs(pieces - whole) < 1e-12);
  }
}

TEST_CASE("polygon centroid") {
  const std::vector<Vec2d> sq{{0, 0}, {2, 0}, {2, 2}, {0, 2}};
  const Vec2d c = polygon_centroid(sq);
  CHECK(c.x == Catch::Approx(1.0));
  CHECK(c.y == Catch::Approx(1.0));
  const std::vector<Vec2d> tri{{0, 0}, {3, 0}, {0, 3}};
  const Vec2d ct = polygon_centroid(tri);
  CHECK(ct.x == Catch::Approx(1.0));
  CHECK(ct.y == Catch::Approx(1.0));
}

TEST_CASE("squared-distance integral reproduces the analytic values") {
  const std::vector<Vec2d> sq{{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  CHECK(std::abs(integral_squared_distance(sq, {0.5, 0.5}) - 1.0 / 6.0) < 1e-12);
  CHECK(std::abs(integral_squared_distance(sq, {0.0, 0.0}) - 2.0 / 3.0) < 1e-12);
  const std::vector<Vec2d> simplex{{0, 0}, {1, 0}, {0, 1}};
  CHECK(std::abs(integral_squared_distance(simplex, {0.0, 0.0}) - 1.0 / 6.0) < 1e-12);
}

TEST_CASE("squared-distance integral matches quadrature on random cells") {
  Rng rng(17);
  int checked = 0;
  while (checked < 100) {
    const auto cell = random_convex_cell(rng);
    if (cell.size() < 3 || polygon_signed_area(cell) < 1e-6) continue;
    const Vec2d c{rng.uniform(-1, 3), rng.uniform(-1, 3)};
    const double exact = integral_squared_distance(cell, c);
    const double oracle = quad_oracle(cell, c);
    REQUIRE(std::abs(exact - oracle) <= 1e-10 * std::max(1.0, std::abs(oracle)));
    ++checked;
  }
}

TEST_CASE("squared-distance integral is translation invariant") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const auto cell = random_convex_cell(rng);
    if (cell.size() < 3) continue;
    const Vec2d c{rng.uniform(0, 2), rng.uniform(0, 2)};
    const Vec2d t{rng.uniform(-5, 5), rng.uniform(-5, 5)};
    auto moved = cell;
    for (auto& p : moved) p += t;
    REQUIRE(integral_squared_distance(moved, c + t) ==
            Catch::Approx(integral_squared_distance(cell, c)).margin(1e-9));
  }
}

TEST_CASE("solid angle of half a cube face and order independence") {
  // Cube of side 2 centered at q: each face subtends 4*pi/6; the diagonal
  // splits it into two equal halves.
  const Vec3d q{0.2, -0.1, 0.4};
  const Vec3d a = q + Vec3d{1, -1, -1}, b = q + Vec3d{1, 1, -1}, c = q + Vec3d{1, 1, 1};
  const double half = triangle_solid_angle(a, b, c, q);
  CHECK(half == Catch::Approx(4 * kPi / 6 / 2).epsilon(1e-9));
  CHECK(triangle_solid_angle(c, b, a, q) == Catch::Approx(half));
  CHECK(half == Catch::Approx(1.047198).margin(5e-7));
}

TEST_CASE("solid angles over a closed sphere sum to 4 pi") {
  const Vec3d q{0.3, 0.7, -0.2};
  const int nlat = 24, nlon = 48;
  auto pt = [&](int i, int j) {
    const double th = kPi * i / nlat, ph = 2 * kPi * j / nlon;
    return q + Vec3d{std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)};
  };
  double total = 0;
  for (int i = 0; i < nlat; ++i) {
    for (int j = 0; j < nlon; ++j) {
      const Vec3d p00 = pt(i, j), p10 = pt(i + 1, j), p01 = pt(i, j + 1), p11 = pt(i + 1, j + 1);
      // Quad rows collapse to fans at the poles.
      if (i + 1 < nlat) total += triangle_solid_angle(p00, p10, p11, q);
      if (i > 0) total += triangle_solid_angle(p00, p11, p01, q);
    }
  }
  CHECK(std::abs(total - 4 * kPi) < 1e-9);
}

TEST_CASE("ray-plane intersection") {
  const Vec2d hit = ray_hit_plane_z(Vec3d{1, 2, 0}, Vec3d{0.5, -0.25, 1}, 4.0);
  CHECK(hit.x == Catch::Approx(3.0));
  CHECK(hit.y == Catch::Approx(1.0));
  // Dual propagation through the intersection.
  using D = Dual<1>;
  const Vec3<D> o{D::seeded(1, 0), D(2), D(0)};
  const Vec2<D> h = ray_hit_plane_z(o, Vec3<D>{D(0.5), D(-0.25), D(1)}, 4.0);
  CHECK(h.x.d[0] == Catch::Approx(1.0));
  CHECK(h.y.d[0] == Catch::Approx(0.0));
}

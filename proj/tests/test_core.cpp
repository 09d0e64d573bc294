// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "caustic/core.hpp"

using namespace caustic;

namespace {

// Composite scalar function exercising every Dual operation.
template <class S>
S composite(const S& x, const S& y) {
  using std::atan2;
  using std::exp;
  using std::fabs;
  using std::sqrt;
  const S a = x * y + S(0.5);
  const S b = sqrt(a * a + S(1.0));
  const S c = exp(-y / b);
  return fabs(x - y) * c + atan2(y, x) / b;
}

double fd(double (*f)(double, double), double x, double y, int slot) {
  const double h = 1e-6;
  if (slot == 0) return (f(x + h, y) - f(x - h, y)) / (2 * h);
  return (f(x, y + h) - f(x, y - h)) / (2 * h);
}

double composite_d(double x, double y) { return composite<double>(x, y); }

}  // namespace

TEST_CASE("dual derivatives match finite differences") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const double x = rng.uniform(0.2, 2.0);
    const double y = rng.uniform(0.2, 2.0);
    if (std::abs(x - y) < 1e-3) continue;  // fabs kink
    const Dual<2> r = composite(Dual<2>::seeded(x, 0), Dual<2>::seeded(y, 1));
    CHECK(r.v == Catch::Approx(composite_d(x, y)).epsilon(1e-12));
    CHECK(r.d[0] == Catch::Approx(fd(composite_d, x, y, 0)).epsilon(1e-5));
    CHECK(r.d[1] == Catch::Approx(fd(composite_d, x, y, 1)).epsilon(1e-5));
  }
}

TEST_CASE("dual division and negation") {
  const auto x = Dual<1>::seeded(3.0, 0);
  const auto r = Dual<1>(1.0) / x;  // d/dx (1/x) = -1/x^2
  CHECK(r.v == Catch::Approx(1.0 / 3.0));
  CHECK(r.d[0] == Catch::Approx(-1.0 / 9.0));
  const auto n = -x;
  CHECK(n.v == -3.0);
  CHECK(n.d[0] == -1.0);
  CHECK(value_of(x) == 3.0);
  CHECK(value_of(2.5) == 2.5);
}

TEST_CASE("vector algebra identities") {
  const Vec3d a{1, 2, 3}, b{-2, 0.5, 4};
  CHECK(dot(cross(a, b), a) == Catch::Approx(0.0).margin(1e-14));
  CHECK(dot(cross(a, b), b) == Catch::Approx(0.0).margin(1e-14));
  CHECK(norm(normalized(a)) == Catch::Approx(1.0));
  const Vec2d u{3, 4};
  CHECK(norm(u) == Catch::Approx(5.0));
  CHECK(cross(Vec2d{1, 0}, Vec2d{0, 1}) == Catch::Approx(1.0));
}

TEST_CASE("rng determinism and range") {
  Rng a(42), b(42), c(43);
  bool all_equal = true, any_differs = false;
  for (int i = 0; i < 1000; ++i) {
    const uint64_t va = a.next();
    all_equal = all_equal && va == b.next();
    any_differs = any_differs || va != c.next();
  }
  CHECK(all_equal);
  CHECK(any_differs);
  Rng r(1);
  double lo = 1, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform(-3, 7);
    REQUIRE(u >= -3.0);
    REQUIRE(u < 7.0);
    const int k = r.uniform_int(5);
    REQUIRE(k >= 0);
    REQUIRE(k < 5);
  }
}

TEST_CASE("chunk grid covers the range independently of workers") {
  CHECK(chunk_count(0) == 0);
  CHECK(chunk_count(1) == 1);
  CHECK(chunk_count(256) == 1);
  CHECK(chunk_count(257) == 2);
  CHECK(chunk_count(1 << 20) == 64);
  for (std::size_t n : {1ul, 17ul, 255ul, 256ul, 1000ul, 100000ul}) {
    std::vector<int> hits(n, 0);
    std::atomic<int> chunks_seen{0};
    parallel_for_chunked(n, [&](int, std::size_t b, std::size_t e) {
      chunks_seen++;
      for (std::size_t i = b; i < e; ++i) hits[i]++;
    });
    for (std::size_t i = 0; i < n; ++i) REQUIRE(hits[i] == 1);
    CHECK(chunks_seen.load() == chunk_count(n));
  }
}

TEST_CASE("chunked reduction is order-stable") {
  const std::size_t n = 100000;
  std::vector<double> v(n);
  Rng rng(5);
  for (auto& x : v) x = rng.uniform(-1, 1);
  auto reduce = [&] {
    std::vector<double> partial(chunk_count(n), 0.0);
    parallel_for_chunked(n, [&](int c, std::size_t b, std::size_t e) {
      double s = 0;
      for (std::size_t i = b; i < e; ++i) s += v[i];
      partial[c] = s;
    });
    double s = 0;
    for (double p : partial) s += p;
    return s;
  };
  const double first = reduce();
  for (int i = 0; i < 5; ++i) REQUIRE(reduce() == first);
}

TEST_CASE("errors carry their offending index") {
  CHECK(TotalInternalReflection(7).index == 7);
  CHECK(InvalidHeightField(3).face == 3);
  CHECK(ProjectionFailure(2).face == 2);
  CHECK(DegenerateFace(9).face == 9);
  CHECK(DegenerateEdge(4).edge == 4);
  CHECK(ZeroFluxCell(11).cell == 11);
  CHECK_THROWS_AS(throw ConfigError("x"), Error);
  CHECK(std::string(TotalInternalReflection(7).what()).find("7") != std::string::npos);
}

// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "caustic/core.hpp"
#include "caustic/image.hpp"

using namespace caustic;

namespace {

GrayImage noise_image(int w, int h, uint64_t seed) {
  GrayImage img(w, h);
  Rng rng(seed);
  for (auto& p : img.v) p = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("gamma conversion of a two-pixel image") {
  GrayImage img(2, 1);
  img.v = {128.0 / 255.0, 1.0};
  const TargetFlux t = target_flux_from_image(img, GammaModel::power(2.2));
  CHECK(t.flux.flux[0] == Catch::Approx(0.1800050584023368).margin(1e-14));
  CHECK(t.flux.flux[1] == Catch::Approx(0.81999494159766328).margin(1e-14));
  CHECK(t.flux.flux[0] + t.flux.flux[1] == Catch::Approx(1.0).margin(1e-15));
  CHECK(t.gamma_total == Catch::Approx(1.2195197180748678).margin(1e-13));
  GrayImage black(2, 2, 0.0);
  CHECK_THROWS_AS(target_flux_from_image(black, GammaModel::power(2.2)), ZeroTotalFlux);
}

TEST_CASE("gamma models invert each other") {
  for (const GammaModel g : {GammaModel::power(2.2), GammaModel::power(1.8), GammaModel::srgb()}) {
    Rng rng(13);
    for (int i = 0; i < 200; ++i) {
      const double x = rng.uniform();
      REQUIRE(g.invert(g.apply(x)) == Catch::Approx(x).margin(1e-12));
      // invert_deriv matches a finite difference away from 0.
      const double y = rng.uniform(0.01, 2.0);
      const double fd = (g.invert(y + 1e-7) - g.invert(y - 1e-7)) / 2e-7;
      REQUIRE(g.invert_deriv(y) == Catch::Approx(fd).epsilon(1e-5));
    }
    REQUIRE(std::isfinite(g.invert_deriv(0.0)));
  }
}

TEST_CASE("unclamped gray values survive until export") {
  // Flux worth twice the maximum gamma value inverts above 1 and is only
  // clamped by the error metric and the writers.
  const GammaModel g = GammaModel::power(2.2);
  const double gray = g.invert(2.0);
  CHECK(gray > 1.0);
  FluxImage f(1, 1);
  f.flux[0] = 1.0;
  const GrayImage img = flux_to_gray(f, 2.0, g);
  CHECK(img.v[0] == Catch::Approx(gray));
  GrayImage ref(1, 1, 1.0);
  CHECK(mean_absolute_error(img, ref) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("box-filter downsampling conserves flux") {
  FluxImage f(4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) f.at(r, c) = (r + c) % 2 ? 1.0 / 8 : 0.0;  // checkerboard
  f.spilled = 0.125;
  const FluxImage d = downsample_flux(f);
  REQUIRE(d.width == 2);
  REQUIRE(d.height == 2);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) REQUIRE(d.at(r, c) == Catch::Approx(0.25));
  CHECK(d.spilled == 0.125);
  CHECK(d.total() == Catch::Approx(f.total()).margin(1e-15));
}

TEST_CASE("mae and error map clamp to the printable range") {
  GrayImage a(2, 1), b(2, 1);
  a.v = {1.4, 0.25};  // 1.4 clamps to 1
  b.v = {1.0, 0.75};
  CHECK(mean_absolute_error(a, b) == Catch::Approx(0.25));
  const GrayImage e = error_map(a, b);
  CHECK(e.v[0] == Catch::Approx(0.0).margin(1e-15));
  CHECK(e.v[1] == Catch::Approx(0.5));
  GrayImage c(3, 1);
  CHECK_THROWS_AS(mean_absolute_error(a, c), Error);
}

TEST_CASE("pgm round trips in every variant") {
  const GrayImage img = noise_image(7, 5, 77);
  for (const int bits : {8, 16}) {
    for (const bool binary : {false, true}) {
      const std::string path = "roundtrip.pgm";
      write_pgm(img, path, bits, binary);
      const GrayImage r = read_pgm(path);
      REQUIRE(r.width == img.width);
      REQUIRE(r.height == img.height);
      const double tol = bits == 8 ? 1.0 / 255 : 1.0 / 65535;
      for (std::size_t i = 0; i < img.v.size(); ++i) {
        REQUIRE(std::abs(r.v[i] - img.v[i]) <= 0.5 * tol + 1e-12);
      }
      std::remove(path.c_str());
    }
  }
}

TEST_CASE("pgm header variants parse") {
  std::ofstream out("hand.pgm");
  out << "P2\n# comment line\n 3 2\n255\n0 128 255\n255 128 0\n";
  out.close();
  const GrayImage img = read_pgm("hand.pgm");
  REQUIRE(img.width == 3);
  REQUIRE(img.height == 2);
  CHECK(img.at(0, 0) == 0.0);
  CHECK(img.at(0, 2) == 1.0);
  CHECK(img.at(1, 1) == Catch::Approx(128.0 / 255));
  std::remove("hand.pgm");
  std::ofstream bad("bad.pgm");
  bad << "P7\n1 1\n255\n0\n";
  bad.close();
  CHECK_THROWS_AS(read_pgm("bad.pgm"), IoError);
  std::remove("bad.pgm");
}

TEST_CASE("png round trips at 8 and 16 bits") {
  const GrayImage img = noise_image(9, 6, 99);
  for (const int bits : {8, 16}) {
    const std::string path = "roundtrip.png";
    write_png(img, path, bits);
    const GrayImage r = read_png(path);
    REQUIRE(r.width == img.width);
    REQUIRE(r.height == img.height);
    const double tol = bits == 8 ? 1.0 / 255 : 1.0 / 65535;
    for (std::size_t i = 0; i < img.v.size(); ++i) {
      REQUIRE(std::abs(r.v[i] - img.v[i]) <= 0.5 * tol + 1e-12);
    }
    std::remove(path.c_str());
  }
  CHECK_THROWS_AS(read_png("missing.png"), IoError);
}

TEST_CASE("suffix dispatch") {
  CHECK(has_suffix("a.png", ".png"));
  CHECK(!has_suffix("a.pgm", ".png"));
  CHECK(!has_suffix(".png", "a.png"));
  const GrayImage img = noise_image(4, 4, 3);
  write_image(img, "dispatch.png");
  write_image(img, "dispatch.pgm");
  CHECK(read_image("dispatch.png").width == 4);
  CHECK(read_image("dispatch.pgm").width == 4);
  CHECK_THROWS_AS(write_image(img, "dispatch.bmp"), IoError);
  std::remove("dispatch.png");
  std::remove("dispatch.pgm");
}

TEST_CASE("flux maps round trip bit-exactly") {
  FluxImage f(5, 3);
  Rng rng(8);
  for (auto& x : f.flux) x = rng.uniform();
  write_flux(f, "roundtrip.flux");
  const FluxImage r = read_flux("roundtrip.flux");
  REQUIRE(r.width == 5);
  REQUIRE(r.height == 3);
  for (std::size_t i = 0; i < f.flux.size(); ++i) REQUIRE(r.flux[i] == f.flux[i]);
  // Header layout: 8-byte magic, two little-endian u32 dimensions.
  std::ifstream in("roundtrip.flux", std::ios::binary);
  char head[16];
  REQUIRE(in.read(head, 16).good());
  CHECK(std::string(head, 8) == "CAUSTFLX");
  CHECK(static_cast<unsigned char>(head[8]) == 5);
  CHECK(static_cast<unsigned char>(head[12]) == 3);
  in.close();
  std::remove("roundtrip.flux");
  std::ofstream bad("bad.flux", std::ios::binary);
  bad << "NOTAFLUX";
  bad.close();
  CHECK_THROWS_AS(read_flux("bad.flux"), IoError);
  std::remove("bad.flux");
}

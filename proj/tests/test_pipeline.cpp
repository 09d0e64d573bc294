// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "caustic/pipeline.hpp"

using namespace caustic;

namespace {

OpticalScene lens_scene() {
  OpticalScene scene;
  scene.light.kind = LightKind::Parallel;
  scene.light.direction = {0, 0, 1};
  scene.mode = SurfaceMode::Refract;
  scene.ior = 1.49;
  scene.front.z0 = 0.0;
  scene.z_focal = 30.0;
  scene.image_region = {0.0, 0.0, 10.0, 10.0};
  return scene;
}

GrayImage two_blob_target(int n) {
  GrayImage tgt(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      auto blob = [&](double cx, double cy) {
        const double d2 = (c - cx) * (c - cx) + (r - cy) * (r - cy);
        return std::exp(-d2 * 10.0 / (n * n));
      };
      tgt.at(r, c) = std::min(1.0, 0.05 + blob(0.3 * n, 0.5 * n) + blob(0.7 * n, 0.5 * n));
    }
  }
  return tgt;
}

PipelineConfig small_config(int levels, int alternations) {
  PipelineConfig cfg;
  cfg.coarsest_image = 16;
  cfg.levels = levels;
  cfg.alternations = alternations;
  cfg.mesh_ratio = 1.0;
  cfg.render_solver.max_iterations = 25;
  cfg.update_solver.max_iterations = 15;
  return cfg;
}

std::string metrics_csv(const PipelineResult& res) {
  std::string s = metrics_csv_header();
  for (const auto& m : res.metrics) s += metrics_csv_row(m);
  return s;
}

}  // namespace

TEST_CASE("residual scale matches the lattice geometry") {
  // 2x2-cell lattice with unit cells: four diagonal centroid gaps of sqrt(2)/3
  // and four lateral ones of sqrt(5)/3, so the mean gap is (sqrt(2)+sqrt(5))/6.
  const HeightFieldMesh m = build_initial_mesh(2.0, 2.0, 3, 3, 5.0);
  const double expected = std::sqrt(2.0) * 6.0 / (std::sqrt(2.0) + std::sqrt(5.0));
  CHECK(residual_scale(m) == Catch::Approx(expected).epsilon(1e-12));

  // halving every distance doubles the scale; the height offset is irrelevant
  CHECK(residual_scale(subdivide(m)) == Catch::Approx(2.0 * expected).epsilon(1e-12));
  const HeightFieldMesh flat = build_initial_mesh(2.0, 2.0, 3, 3, -7.25);
  CHECK(residual_scale(flat) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("welsch scale schedule walks from alpha_max to alpha_min") {
  const double d_e = 0.37;
  const double alphas[] = {2.0, 1.0, 0.5, 0.25, 0.125};
  for (int level = 0; level < 5; ++level) {
    CHECK(nu_schedule(level, 5, 2.0, 0.125, d_e) ==
          Catch::Approx(alphas[level] * d_e).epsilon(1e-12));
  }
  // the last level hits alpha_min exactly, a single level uses alpha_max
  CHECK(nu_schedule(4, 5, 2.0, 0.125, d_e) == Catch::Approx(0.125 * d_e).epsilon(1e-15));
  CHECK(nu_schedule(0, 1, 2.0, 0.125, d_e) == Catch::Approx(2.0 * d_e).epsilon(1e-15));
  // degenerate scale falls back to the floor
  CHECK(nu_schedule(0, 3, 2.0, 0.1, 0.0) == 1e-6);
}

TEST_CASE("flux downsampling conserves total flux") {
  FluxImage f(2, 2);
  f.at(0, 0) = 0.1;
  f.at(0, 1) = 0.2;
  f.at(1, 0) = 0.3;
  f.at(1, 1) = 0.4;
  const FluxImage one = downsample_flux(f);
  REQUIRE(one.width == 1);
  REQUIRE(one.height == 1);
  CHECK(one.at(0, 0) == Catch::Approx(1.0).epsilon(1e-15));

  FluxImage checker(4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) checker.at(r, c) = ((r + c) % 2) ? 0.1 : 0.025;
  const FluxImage half = downsample_flux(checker);
  REQUIRE(half.width == 2);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) CHECK(half.at(r, c) == Catch::Approx(0.25).epsilon(1e-12));

  // odd dimensions pad with zero flux and still conserve the total
  FluxImage odd(3, 3);
  for (auto& v : odd.flux) v = 1.0 / 9.0;
  const FluxImage padded = downsample_flux(odd);
  REQUIRE(padded.width == 2);
  REQUIRE(padded.height == 2);
  double total = 0;
  for (double v : padded.flux) total += v;
  CHECK(total == Catch::Approx(1.0).epsilon(1e-14));
  CHECK(padded.at(0, 0) == Catch::Approx(4.0 / 9.0).epsilon(1e-12));
  CHECK(padded.at(1, 1) == Catch::Approx(1.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("level targets stay normalized at every rung") {
  const GrayImage tgt = two_blob_target(32);
  const GammaModel gamma = GammaModel::power(2.2);
  const TargetFlux native = target_flux_from_image(tgt, gamma);
  const Rect region{0, 0, 10, 10};
  for (int halvings = 0; halvings < 3; ++halvings) {
    const LevelTarget lt = make_level_target(native, 32, 32, halvings, gamma, region);
    CHECK(lt.width == 32 >> halvings);
    CHECK(lt.height == 32 >> halvings);
    double total = 0;
    for (double v : lt.flux.flux) total += v;
    CHECK(total == Catch::Approx(1.0).margin(1e-12));
    CHECK(lt.gamma_total ==
          Catch::Approx(native.gamma_total * std::pow(0.25, halvings)).epsilon(1e-12));
    // the gray image is the exact inverse of the flux under this normalization
    const GrayImage back = flux_to_gray(lt.flux, lt.gamma_total, gamma);
    double worst = 0;
    for (std::size_t i = 0; i < back.v.size(); ++i) {
      worst = std::max(worst, std::fabs(back.v[i] - (halvings == 0 ? tgt.v[i] : back.v[i])));
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("checkpoints round-trip exactly") {
  PipelineState s;
  s.mesh = build_initial_mesh(10.0, 10.0, 5, 5, 12.0);
  s.mesh.vertices[7].z = 12.0 + 1.0 / 3.0;
  s.mesh.vertices[12].z = 12.0 - std::sqrt(2.0) * 1e-3;
  s.vars = WeingartenVars(s.mesh.face_count());
  s.vars.m[5] = 0.1234567890123456;
  s.vars.m[40] = -7.0 / 11.0;
  s.level = 1;
  s.alternation = 3;
  s.phase = 1;
  s.nu = 0.7071067811865476;
  s.ot_weights = {0.25, -0.125, 1.0 / 7.0};

  save_checkpoint(s, "roundtrip.ckpt");
  const PipelineState r = load_checkpoint("roundtrip.ckpt");
  CHECK(r.level == s.level);
  CHECK(r.alternation == s.alternation);
  CHECK(r.phase == s.phase);
  CHECK(r.done == s.done);
  CHECK(r.nu == s.nu);  // bitwise: JSON carries max_digits10 doubles
  REQUIRE(r.mesh.vertices.size() == s.mesh.vertices.size());
  for (std::size_t v = 0; v < s.mesh.vertices.size(); ++v) {
    CHECK(r.mesh.vertices[v].x == s.mesh.vertices[v].x);
    CHECK(r.mesh.vertices[v].y == s.mesh.vertices[v].y);
    CHECK(r.mesh.vertices[v].z == s.mesh.vertices[v].z);
  }
  REQUIRE(r.vars.m.size() == s.vars.m.size());
  for (std::size_t i = 0; i < s.vars.m.size(); ++i) CHECK(r.vars.m[i] == s.vars.m[i]);
  REQUIRE(r.ot_weights.size() == s.ot_weights.size());
  for (std::size_t i = 0; i < s.ot_weights.size(); ++i) CHECK(r.ot_weights[i] == s.ot_weights[i]);

  CHECK_THROWS_AS(load_checkpoint("no-such-dir/missing.ckpt"), IoError);
  CHECK_THROWS_AS(save_checkpoint(s, "no-such-dir/missing.ckpt"), IoError);
  {
    std::ofstream junk("junk.ckpt");
    junk << "{\"format\":\"something-else\"}";
  }
  CHECK_THROWS_AS(load_checkpoint("junk.ckpt"), IoError);
}

TEST_CASE("accepted objective values may not increase") {
  std::vector<IterationRecord> log{{0, 1.0, 0.5, 0.1}, {1, 0.5, 0.4, 0.1}, {2, 0.7, 0.3, 0.1}};
  CHECK_THROWS_AS(detail::check_monotone(log, "probe"), AssumptionViolation);
  log[2].value = 0.5;  // flat is fine
  CHECK_NOTHROW(detail::check_monotone(log, "probe"));
}

TEST_CASE("uniform target keeps a flat lens optimal") {
  GrayImage tgt(16, 16);
  for (auto& v : tgt.v) v = 0.5;
  PipelineConfig cfg = small_config(1, 1);
  const PipelineResult res =
      run_pipeline(cfg, lens_scene(), SourceDistribution::uniform(), tgt);
  CHECK(res.final_mae < 1e-6);
  REQUIRE(res.metrics.size() == 2);
  CHECK(res.metrics[0].stage == "update");
  CHECK(res.metrics[1].stage == "render");
}

TEST_CASE("a short run improves the rendered image") {
  const GrayImage tgt = two_blob_target(16);
  PipelineConfig cfg = small_config(1, 2);
  const OpticalScene scene = lens_scene();

  // initial error of the untouched flat lens, for reference
  const TargetFlux native = target_flux_from_image(tgt, cfg.gamma);
  const HeightFieldMesh flat = build_initial_mesh(10.0, 10.0, 17, 17, 0.0);
  const auto rr = render(flat, SourceDistribution::uniform(), scene, 16, 16);
  const double initial = mean_absolute_error(flux_to_gray(rr.flux, native.gamma_total, cfg.gamma), tgt);

  const PipelineResult res = run_pipeline(cfg, scene, SourceDistribution::uniform(), tgt);
  CHECK(res.final_mae < 0.75 * initial);
  REQUIRE(res.metrics.size() == 4);
  CHECK(res.metrics[0].level == 0);
  CHECK(res.metrics[1].alternation == 0);
  CHECK(res.metrics[2].alternation == 1);
  for (const auto& m : res.metrics) {
    if (m.stage == "update") CHECK(m.ot_mismatch < 1e-6);
  }

  // disabling the transport phase leaves only rendering-guided rows
  PipelineConfig no_ot = cfg;
  no_ot.ot_enabled = false;
  const PipelineResult plain = run_pipeline(no_ot, scene, SourceDistribution::uniform(), tgt);
  REQUIRE(plain.metrics.size() == 2);
  CHECK(plain.metrics[0].stage == "render");
  CHECK(plain.metrics[1].stage == "render");
}

TEST_CASE("runs are deterministic") {
  const GrayImage tgt = two_blob_target(16);
  PipelineConfig cfg = small_config(1, 1);
  const PipelineResult a = run_pipeline(cfg, lens_scene(), SourceDistribution::uniform(), tgt);
  const PipelineResult b = run_pipeline(cfg, lens_scene(), SourceDistribution::uniform(), tgt);
  CHECK(metrics_csv(a) == metrics_csv(b));
  CHECK(a.final_mae == b.final_mae);
  REQUIRE(a.state.mesh.vertices.size() == b.state.mesh.vertices.size());
  for (std::size_t v = 0; v < a.state.mesh.vertices.size(); ++v) {
    CHECK(a.state.mesh.vertices[v].z == b.state.mesh.vertices[v].z);
  }
}

TEST_CASE("resuming a checkpoint reproduces the uninterrupted run") {
  const GrayImage tgt = two_blob_target(16);
  PipelineConfig cfg = small_config(1, 2);

  std::vector<PipelineState> checkpoints;
  PipelineHooks hooks;
  hooks.checkpoint = [&](const PipelineState& s) { checkpoints.push_back(s); };
  const PipelineResult full = run_pipeline(cfg, lens_scene(), SourceDistribution::uniform(), tgt, hooks);
  // update and render phases of two alternations: four snapshots
  REQUIRE(checkpoints.size() == 4);

  // restart from the state saved after the first alternation's render phase
  const PipelineState& mid = checkpoints[1];
  REQUIRE(mid.alternation == 1);
  REQUIRE(mid.phase == 0);
  const PipelineResult resumed =
      run_pipeline(cfg, lens_scene(), SourceDistribution::uniform(), tgt, {}, &mid);
  CHECK(resumed.final_mae == full.final_mae);
  for (std::size_t v = 0; v < full.state.mesh.vertices.size(); ++v) {
    CHECK(resumed.state.mesh.vertices[v].z == full.state.mesh.vertices[v].z);
  }

  // a finished checkpoint short-circuits to the final render
  const PipelineResult done =
      run_pipeline(cfg, lens_scene(), SourceDistribution::uniform(), tgt, {}, &full.state);
  CHECK(done.metrics.empty());
  CHECK(done.final_mae == full.final_mae);
}

TEST_CASE("metrics rows serialize reproducibly") {
  MetricsRecord r;
  r.stage = "render";
  r.level = 2;
  r.alternation = 5;
  r.mae = 1.0 / 3.0;
  r.total = 6.02214076e23;
  r.ot_mismatch = 5e-8;
  r.iterations = 41;
  const std::string row = metrics_csv_row(r);
  CHECK(row == metrics_csv_row(r));
  CHECK(row.substr(0, 7) == "render,");
  CHECK(std::string(metrics_csv_header()).substr(0, 6) == "stage,");
  // 17 columns, newline-terminated
  CHECK(std::count(row.begin(), row.end(), ',') == 16);
  CHECK(row.back() == '\n');
  CHECK(std::count(std::string(metrics_csv_header()).begin(),
                   std::string(metrics_csv_header()).end(), ',') == 16);
}

// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iostream>

#include "caustic/config.hpp"

namespace caustic {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Meshes come either from an OBJ (literal back-surface vertices) or from a
// run checkpoint (exact optimization variables, required for point-source
// refraction where the grid stores ray parameters).
inline HeightFieldMesh load_mesh_any(const std::string& path) {
  if (has_suffix(path, ".json")) return load_checkpoint(path).mesh;
  return read_obj(path);
}

inline SourceDistribution source_from(const RunConfig& rc) {
  if (rc.source_map.empty()) return rc.dist;
  const GrayImage m = read_image(rc.source_map);
  return SourceDistribution::pixel_map(m.width, m.height, m.v);
}

namespace detail {

inline void write_run_image(const GrayImage& img, const RunConfig& rc, const std::string& stem) {
  write_image(img, rc.output_dir + "/" + stem + rc.image_suffix(), rc.export_bits);
}

struct ZReport {
  double mae = 0;
  double max_z = 0;
  long beyond = 0;  // pixels with |z| > 3
  long pixels = 0;
};

// Compares the deterministic flux image against the Monte-Carlo one; sigma
// per pixel is the (conservative) root of the summed squared sample weights,
// floored at the largest single-sample weight so empty pixels stay testable.
inline ZReport z_report(const FluxImage& det, const FluxImage& mc, const FluxImage& m2,
                        long n_rays) {
  ZReport r;
  r.pixels = static_cast<long>(det.flux.size());
  double w_max = 0;
  for (double m : m2.flux) w_max = std::max(w_max, std::sqrt(m));
  const double g = std::floor(std::sqrt(static_cast<double>(n_rays)));
  const double floor_sigma = std::max(1.0 / (g * g), w_max > 0 ? 0.0 : 1e-300);
  double abs_acc = 0;
  for (std::size_t i = 0; i < det.flux.size(); ++i) {
    const double diff = std::fabs(det.flux[i] - mc.flux[i]);
    abs_acc += diff;
    const double sigma = std::max(std::sqrt(m2.flux[i]), floor_sigma);
    const double z = diff / sigma;
    r.max_z = std::max(r.max_z, z);
    if (z > 3.0) ++r.beyond;
  }
  r.mae = abs_acc / static_cast<double>(det.flux.size());
  return r;
}

}  // namespace detail

// design: drive the full pipeline from a config file into a run directory.
inline int cmd_design(const std::string& config_path, const std::vector<std::string>& overrides,
                      bool resume, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  GrayImage target;
  try {
    rc = load_run_config(config_path, overrides);
    if (rc.target_path.empty()) throw ConfigError(config_path + ": run.target is required");
    target = read_image(rc.target_path);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  namespace fs = std::filesystem;
  const std::string ckpt_path = rc.output_dir + "/checkpoint.json";
  try {
    fs::create_directories(rc.output_dir);
    PipelineState resume_state;
    bool have_resume = false;
    if (resume) {
      if (!fs::exists(ckpt_path)) {
        err << "error: no checkpoint at " << ckpt_path << "\n";
        return kExitConfig;
      }
      resume_state = load_checkpoint(ckpt_path);
      have_resume = true;
      err << "resuming from level " << resume_state.level << ", alternation "
          << resume_state.alternation << ", phase " << resume_state.phase << "\n";
    }

    const SourceDistribution dist = source_from(rc);
    PipelineHooks hooks;
    hooks.checkpoint = [&](const PipelineState& s) { save_checkpoint(s, ckpt_path); };
    hooks.log = [&](const std::string& m) { err << m << "\n"; };
    hooks.stage_render = [&](int level, int alt, const std::string& stage, const GrayImage& img) {
      char stem[64];
      std::snprintf(stem, sizeof(stem), "stage_L%d_A%d_%s", level, alt, stage.c_str());
      detail::write_run_image(img, rc, stem);
    };
    if (rc.dump_svg) {
      hooks.ot_dump = [&](int level, int alt, const OtSites& sites, const PowerDiagram& diagram) {
        char name[64];
        std::snprintf(name, sizeof(name), "/ot_L%d_A%d.svg", level, alt);
        write_ot_svg(rc.output_dir + name, sites, diagram, rc.scene.image_region);
      };
    }

    PipelineResult pr = run_pipeline(rc.pipeline, rc.scene, dist, target, hooks,
                                     have_resume ? &resume_state : nullptr);

    save_checkpoint(pr.state, ckpt_path);
    HeightFieldMesh export_mesh = pr.state.mesh;
    if (rc.scene.light.kind == LightKind::Point && rc.scene.mode == SurfaceMode::Refract) {
      export_mesh.vertices = derived_positions(pr.state.mesh, rc.scene);
    }
    write_obj(export_mesh, rc.scene.front.z0, rc.output_dir + "/final.obj");
    detail::write_run_image(pr.final_render, rc, "final");
    detail::write_run_image(error_map(pr.final_render, target), rc, "error_map");
    {
      const auto rr = render(pr.state.mesh, dist, rc.scene, target.width, target.height);
      write_flux(rr.flux, rc.output_dir + "/final_flux.bin");
    }
    {
      std::ofstream mcsv(rc.output_dir + "/metrics.csv", std::ios::binary);
      mcsv << metrics_csv_header();
      for (const auto& rec : pr.metrics) mcsv << metrics_csv_row(rec);
      if (!mcsv) throw IoError("failed writing metrics.csv");
    }
    {
      std::ofstream tcsv(rc.output_dir + "/timings.csv");
      tcsv << "stage,seconds\n";
      char buf[128];
      for (const auto& t : pr.timings) {
        std::snprintf(buf, sizeof(buf), "%s,%.3f\n", t.stage.c_str(), t.seconds);
        tcsv << buf;
      }
    }
    out << "final mae " << pr.final_mae << "\n";
    out << "run directory: " << rc.output_dir << "\n";
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    err << "last checkpoint: " << ckpt_path << "\n";
    return kExitRuntime;
  }
}

struct RenderArgs {
  std::string mesh_path;
  std::string out_path = "render.png";
  int width = 0, height = 0;  // 0: native target size if configured, else 256
  bool oracle = false;
  long rays = 10000000;
  uint64_t seed = 1;
};

// render: forward-model a mesh under the configured scene.
inline int cmd_render(const std::string& config_path, const std::vector<std::string>& overrides,
                      const RenderArgs& args, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  try {
    rc = load_run_config(config_path, overrides);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    const HeightFieldMesh mesh = load_mesh_any(args.mesh_path);
    const SourceDistribution dist = source_from(rc);
    const int w = args.width > 0 ? args.width : 256;
    const int h = args.height > 0 ? args.height : w;
    const auto rr = render(mesh, dist, rc.scene, w, h);
    // scale so the brightest pixel maps to white
    double peak = 0;
    for (double f : rr.flux.flux) peak = std::max(peak, f);
    const double gamma_total = peak > 0 ? 1.0 / peak : 1.0;
    const GrayImage img = flux_to_gray(rr.flux, gamma_total, rc.pipeline.gamma);
    write_image(img, args.out_path, rc.export_bits);
    const std::string stem = args.out_path.substr(0, args.out_path.find_last_of('.'));
    write_flux(rr.flux, stem + "_flux.bin");
    out << "flux total " << rr.flux.total() << ", spilled " << rr.flux.spilled << "\n";
    if (args.oracle) {
      FluxImage m2;
      const FluxImage mc = mc_reference_render(mesh, dist, rc.scene, w, h, args.rays, args.seed, &m2);
      const auto zr = detail::z_report(rr.flux, mc, m2, args.rays);
      write_flux(mc, stem + "_mc_flux.bin");
      write_image(flux_to_gray(mc, gamma_total, rc.pipeline.gamma), stem + "_mc" + rc.image_suffix(),
                  rc.export_bits);
      out << "oracle: mae " << zr.mae << ", max |z| " << zr.max_z << ", pixels beyond 3 sigma "
          << zr.beyond << "/" << zr.pixels << "\n";
      if (zr.beyond > 0) return kExitRuntime;
    }
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

// validate: cross-check the deterministic renderer against the Monte-Carlo
// oracle on a given mesh.
inline int cmd_validate(const std::string& config_path, const std::vector<std::string>& overrides,
                        const std::string& mesh_path, int size, long rays, uint64_t seed,
                        std::ostream& out, std::ostream& err) {
  RunConfig rc;
  try {
    rc = load_run_config(config_path, overrides);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    const HeightFieldMesh mesh = load_mesh_any(mesh_path);
    for (int f = 0; f < mesh.face_count(); ++f) {
      if (projected_signed_area(mesh, f) <= 0) throw InvalidHeightField(f);
    }
    const SourceDistribution dist = source_from(rc);
    const auto rr = render(mesh, dist, rc.scene, size, size);
    FluxImage m2;
    const FluxImage mc = mc_reference_render(mesh, dist, rc.scene, size, size, rays, seed, &m2);
    const auto zr = detail::z_report(rr.flux, mc, m2, rays);
    out << "pixels " << zr.pixels << "\n";
    out << "mae(det, mc) " << zr.mae << "\n";
    out << "max |z| " << zr.max_z << "\n";
    out << "pixels beyond 3 sigma " << zr.beyond << "\n";
    out << (zr.beyond == 0 ? "PASS" : "FAIL") << "\n";
    return zr.beyond == 0 ? kExitOk : kExitRuntime;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

// error-map: per-pixel absolute error between two grayscale images.
inline int cmd_error_map(const std::string& a_path, const std::string& b_path,
                         const std::string& out_path, std::ostream& out, std::ostream& err) {
  try {
    const GrayImage a = read_image(a_path);
    const GrayImage b = read_image(b_path);
    write_image(error_map(a, b), out_path, 8);
    out << "mae " << mean_absolute_error(a, b) << "\n";
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

// ot-dump: solve one transport problem for the given mesh against the target
// and dump the power-cell partition as SVG.
inline int cmd_ot_dump(const std::string& config_path, const std::vector<std::string>& overrides,
                       const std::string& mesh_path, const std::string& out_path, std::ostream& out,
                       std::ostream& err) {
  RunConfig rc;
  GrayImage target;
  try {
    rc = load_run_config(config_path, overrides);
    if (rc.target_path.empty()) throw ConfigError(config_path + ": run.target is required");
    target = read_image(rc.target_path);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    const HeightFieldMesh mesh = load_mesh_any(mesh_path);
    const SourceDistribution dist = source_from(rc);
    const TargetFlux tf = target_flux_from_image(target, rc.pipeline.gamma);
    const TargetMeasure measure{target.width, target.height, rc.scene.image_region, tf.flux.flux};
    const auto rr = render(mesh, dist, rc.scene, target.width, target.height);
    OtSites sites{rr.centroids, rr.face_flux};
    const OtResult ot = solve_ot(sites, measure, rc.pipeline.ot);
    OtSites kept;
    for (int i : ot.kept) {
      kept.pos.push_back(sites.pos[i]);
      kept.flux.push_back(sites.flux[i]);
    }
    write_ot_svg(out_path, kept, ot.diagram, rc.scene.image_region);
    out << "sites " << kept.pos.size() << ", max mismatch " << ot.max_mismatch << ", iterations "
        << ot.iterations << "\n";
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace caustic

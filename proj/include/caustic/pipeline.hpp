// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <fstream>
#include <memory>

#include <nlohmann/json.hpp>

#include "caustic/energy.hpp"
#include "caustic/ot.hpp"

namespace caustic {

struct PipelineConfig {
  int coarsest_image = 32;   // image width at the coarsest level
  int levels = 0;            // 0: grow until the target's native resolution
  int alternations = 6;
  double mesh_ratio = 1.0;   // mesh cells per image pixel (per axis, level 0)
  double lens_width = 0, lens_height = 0;  // 0: take the image region's extent
  bool ot_enabled = true;
  double alpha_max = 2.0, alpha_min = 0.1;
  double barrier_rel1 = 0.01, barrier_rel2 = 0.2;  // area barrier, relative to the mean footprint
  EnergyConfig energy;
  SolverOptions render_solver;
  SolverOptions update_solver;
  OtOptions ot;
  GammaModel gamma = GammaModel::power(2.2);
  uint64_t seed = 1;

  void validate() const {
    if (coarsest_image < 8) throw ConfigError("coarsest image size must be at least 8");
    if (levels < 0) throw ConfigError("levels must be at least 1");
    if (alternations < 1) throw ConfigError("alternations must be at least 1");
    if (mesh_ratio <= 0) throw ConfigError("mesh_ratio must be positive");
  }
};

// Typical scale of the edge residual sqrt(h), read off the mesh geometry:
// sqrt(2) over the average distance between adjacent face centroids. Unlike
// the measured residual this stays positive on a flat start, where a
// near-zero Welsch scale would wall the optimizer in.
inline double residual_scale(const HeightFieldMesh& mesh) {
  const auto edges = internal_edges(mesh);
  double sum = 0;
  for (const auto& e : edges) {
    Vec3d c0{0, 0, 0}, c1{0, 0, 0};
    for (int v : mesh.face_vertices(e.f0)) c0 = c0 + mesh.vertices[v];
    for (int v : mesh.face_vertices(e.f1)) c1 = c1 + mesh.vertices[v];
    sum += norm((c0 - c1) / 3.0);
  }
  return std::sqrt(2.0) * edges.size() / sum;
}

// Welsch-scale schedule: a geometric walk from alpha_max down to alpha_min
// over the resolution levels, anchored to the mesh's residual scale.
inline double nu_schedule(int level, int levels, double alpha_max, double alpha_min, double d_e) {
  double alpha = alpha_max;
  if (levels > 1) {
    const double ratio = std::pow(alpha_min / alpha_max, 1.0 / (levels - 1));
    alpha = alpha_max * std::pow(ratio, level);
  }
  return std::max(alpha * d_e, 1e-6);
}

// Everything needed to resume a run mid-flight.
struct PipelineState {
  HeightFieldMesh mesh;
  WeingartenVars vars;
  int level = 0;
  int alternation = 0;
  int phase = 0;  // 0: correspondence (OT + update) pending, 1: rendering-guided pending
  double nu = 0;
  bool done = false;
  std::vector<double> ot_weights;  // warm start for the next transport solve
};

inline void save_checkpoint(const PipelineState& s, const std::string& path) {
  nlohmann::json j;
  j["format"] = "caustic-checkpoint-1";
  j["level"] = s.level;
  j["alternation"] = s.alternation;
  j["phase"] = s.phase;
  j["nu"] = s.nu;
  j["done"] = s.done;
  j["mesh"] = {{"nx", s.mesh.nx},
               {"ny", s.mesh.ny},
               {"width", s.mesh.width},
               {"height", s.mesh.height}};
  std::vector<double> flat;
  flat.reserve(s.mesh.vertices.size() * 3);
  for (const Vec3d& v : s.mesh.vertices) {
    flat.push_back(v.x);
    flat.push_back(v.y);
    flat.push_back(v.z);
  }
  j["mesh"]["vertices"] = flat;
  j["vars"] = s.vars.m;
  j["ot_weights"] = s.ot_weights;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp);
    out << j.dump();
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

inline PipelineState load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != std::string("caustic-checkpoint-1")) {
    throw IoError(path + ": not a caustic checkpoint");
  }
  PipelineState s;
  s.level = j["level"].get<int>();
  s.alternation = j["alternation"].get<int>();
  s.phase = j["phase"].get<int>();
  s.nu = j["nu"].get<double>();
  s.done = j["done"].get<bool>();
  const auto& jm = j["mesh"];
  s.mesh = build_initial_mesh(jm["width"].get<double>(), jm["height"].get<double>(),
                              jm["nx"].get<int>(), jm["ny"].get<int>(), 0.0);
  const auto flat = jm["vertices"].get<std::vector<double>>();
  if (flat.size() != s.mesh.vertices.size() * 3) throw IoError(path + ": vertex count mismatch");
  for (std::size_t v = 0; v < s.mesh.vertices.size(); ++v) {
    s.mesh.vertices[v] = {flat[3 * v], flat[3 * v + 1], flat[3 * v + 2]};
  }
  s.vars.m = j["vars"].get<std::vector<double>>();
  if (s.vars.m.size() != static_cast<std::size_t>(s.mesh.face_count()) * 3) {
    throw IoError(path + ": vars count mismatch");
  }
  s.ot_weights = j["ot_weights"].get<std::vector<double>>();
  return s;
}

// One row per optimization phase. Wall times live in a separate log so the
// metrics file stays byte-reproducible.
struct MetricsRecord {
  std::string stage;  // "update" or "render"
  int level = 0, alternation = 0;
  double mae = 0;
  double img = 0, grad = 0, bdr = 0, smooth = 0, barr = 0, align = 0, flux = 0, total = 0;
  double spilled = 0;
  int iterations = 0, evaluations = 0;
  double ot_mismatch = 0;
  int ot_iterations = 0;
};

inline const char* metrics_csv_header() {
  return "stage,level,alternation,mae,e_img,e_grad,e_bdr,e_smooth,e_barr,e_align,e_flux,total,"
         "spilled,iterations,evaluations,ot_mismatch,ot_iterations\n";
}

inline std::string metrics_csv_row(const MetricsRecord& r) {
  char buf[640];
  std::snprintf(buf, sizeof(buf),
                "%s,%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%.17g,%d\n",
                r.stage.c_str(), r.level, r.alternation, r.mae, r.img, r.grad, r.bdr, r.smooth,
                r.barr, r.align, r.flux, r.total, r.spilled, r.iterations, r.evaluations,
                r.ot_mismatch, r.ot_iterations);
  return buf;
}

struct TimingRecord {
  std::string stage;
  double seconds = 0;
};

// Per-level target data derived from the native image.
struct LevelTarget {
  int width = 0, height = 0;
  FluxImage flux;       // sums to 1
  double gamma_total = 0;
  GrayImage gray;
  TargetMeasure measure;
};

inline LevelTarget make_level_target(const TargetFlux& native, int native_w, int native_h,
                                     int halvings, const GammaModel& gamma, const Rect& region) {
  FluxImage f(native_w, native_h);
  f = native.flux;
  double gamma_total = native.gamma_total;
  for (int i = 0; i < halvings; ++i) {
    f = downsample_flux(f);
    gamma_total *= 0.25;
  }
  LevelTarget t;
  t.width = f.width;
  t.height = f.height;
  t.flux = f;
  t.gamma_total = gamma_total;
  t.gray = flux_to_gray(f, gamma_total, gamma);
  t.measure = {f.width, f.height, region, f.flux};
  return t;
}

// Back-surface vertex positions; identical to the stored vertices except for
// point-source refraction, where the grid stores ray parameters.
inline std::vector<Vec3d> derived_positions(const HeightFieldMesh& mesh, const OpticalScene& scene) {
  const auto traces = detail::corner_traces(mesh, scene);
  std::vector<Vec3d> pos(traces.size());
  for (std::size_t v = 0; v < traces.size(); ++v) pos[v] = traces[v].pos;
  return pos;
}

struct PipelineHooks {
  std::function<void(const PipelineState&)> checkpoint;
  std::function<void(int level, int alt, const OtSites&, const PowerDiagram&)> ot_dump;
  std::function<void(int level, int alt, const std::string& stage, const GrayImage&)> stage_render;
  std::function<void(const std::string&)> log;
};

struct PipelineResult {
  PipelineState state;
  std::vector<MetricsRecord> metrics;
  std::vector<TimingRecord> timings;
  double final_mae = 0;
  GrayImage final_render;
};

namespace detail {

inline void check_monotone(const std::vector<IterationRecord>& log, const char* what) {
  for (std::size_t i = 1; i < log.size(); ++i) {
    if (!(log[i].value <= log[i - 1].value + 1e-12 * (1.0 + std::fabs(log[i - 1].value)))) {
      throw AssumptionViolation(std::string(what) + ": accepted objective value increased");
    }
  }
}

}  // namespace detail

// The coarse-to-fine controller: per level, alternate the correspondence
// phase (render, transport, centroid targets, update solve) with the
// rendering-guided solve; then subdivide the mesh, refine the target, and
// tighten the Welsch scale.
inline PipelineResult run_pipeline(const PipelineConfig& config, const OpticalScene& scene,
                                   const SourceDistribution& dist, const GrayImage& native_target,
                                   const PipelineHooks& hooks = {},
                                   const PipelineState* resume = nullptr) {
  config.validate();
  const TargetFlux native = target_flux_from_image(native_target, config.gamma);

  int levels = config.levels;
  if (levels == 0) {
    levels = 1;
    for (int s = config.coarsest_image; s < native_target.width; s *= 2) ++levels;
  }

  auto log = [&](const std::string& msg) {
    if (hooks.log) hooks.log(msg);
  };
  auto now = [] { return std::chrono::steady_clock::now(); };
  PipelineResult res;
  auto timed = [&](const std::string& stage, const std::function<void()>& fn) {
    const auto t0 = now();
    fn();
    res.timings.push_back({stage, std::chrono::duration<double>(now() - t0).count()});
  };

  PipelineState st;
  if (resume) {
    st = *resume;
  } else {
    const int cells_x = std::max(2, static_cast<int>(std::lround(config.mesh_ratio * config.coarsest_image)));
    const int cells_y = std::max(
        2, static_cast<int>(std::lround(config.mesh_ratio * config.coarsest_image *
                                        native_target.height / native_target.width)));
    double z0 = 0.0;
    if (scene.light.kind == LightKind::Point && scene.mode == SurfaceMode::Refract) {
      // stored grid = (front x, front y, back z); start with a flat slab
      z0 = scene.front.z0 + 1.0;
    }
    const double lw = config.lens_width > 0 ? config.lens_width : scene.image_region.width();
    const double lh = config.lens_height > 0 ? config.lens_height : scene.image_region.height();
    st.mesh = build_initial_mesh(lw, lh, cells_x + 1, cells_y + 1, z0);
    st.vars = WeingartenVars(st.mesh.face_count());
  }
  if (st.done) {
    log("checkpoint already complete");
  }

  const bool parallel_light = scene.light.kind == LightKind::Parallel;
  CausticObjective* obj = nullptr;
  std::unique_ptr<CausticObjective> obj_holder;
  LevelTarget target;

  auto enter_level = [&](int level, bool fresh) {
    target = make_level_target(native, native_target.width, native_target.height,
                               levels - 1 - level, config.gamma, scene.image_region);
    if (fresh && level > 0) {
      // refine: assert the subdivision leaves the rendered image unchanged
      const auto before = render(st.mesh, dist, scene, target.width, target.height);
      HeightFieldMesh fine = subdivide(st.mesh);
      const auto parent_pos = derived_positions(st.mesh, scene);
      const auto child_pos = derived_positions(fine, scene);
      st.vars = inherit_weingarten(st.vars, st.mesh, fine, parent_pos, child_pos);
      if (st.ot_weights.size() == static_cast<std::size_t>(st.mesh.face_count())) {
        // prolong the transport warm start: children inherit the parent weight
        std::vector<double> w(fine.face_count());
        for (int f = 0; f < fine.face_count(); ++f) {
          w[f] = st.ot_weights[parent_face(st.mesh, f)];
        }
        st.ot_weights = std::move(w);
      } else {
        st.ot_weights.clear();
      }
      st.mesh = std::move(fine);
      const auto after = render(st.mesh, dist, scene, target.width, target.height);
      double worst = 0;
      for (std::size_t i = 0; i < before.flux.flux.size(); ++i) {
        worst = std::max(worst, std::fabs(before.flux.flux[i] - after.flux.flux[i]));
      }
      if (parallel_light) {
        if (worst > 1e-12) {
          throw AssumptionViolation("subdivision changed the rendered image by " +
                                    std::to_string(worst));
        }
      } else {
        log("level " + std::to_string(level) + ": subdivision render delta " + std::to_string(worst));
      }
    }
    if (fresh) {
      st.nu = nu_schedule(level, levels, config.alpha_max, config.alpha_min,
                          residual_scale(st.mesh));
    }
    obj_holder = std::make_unique<CausticObjective>(st.mesh, dist, scene, config.energy);
    obj = obj_holder.get();
    obj->config().set_area_barrier(st.mesh, config.barrier_rel1, config.barrier_rel2);
    obj->set_nu(st.nu);
    obj->set_target(&target.gray, target.gamma_total, &config.gamma, target.width, target.height);
    log("level " + std::to_string(level) + ": image " + std::to_string(target.width) + "x" +
        std::to_string(target.height) + ", mesh " + std::to_string(st.mesh.nx) + "x" +
        std::to_string(st.mesh.ny) + ", nu " + std::to_string(st.nu));
  };

  GrayImage stage_img;
  auto stage_mae = [&](const GrayImage** out_img) -> double {
    const auto rr = render(st.mesh, dist, scene, target.width, target.height);
    stage_img = flux_to_gray(rr.flux, target.gamma_total, config.gamma);
    if (out_img) *out_img = &stage_img;
    return mean_absolute_error(stage_img, target.gray);
  };

  for (int level = st.level; level < levels; ++level) {
    const bool resumed_into = resume && level == resume->level;
    enter_level(level, !resumed_into);
    st.level = level;
    const int first_alt = resumed_into ? resume->alternation : 0;

    for (int alt = first_alt; alt < config.alternations; ++alt) {
      st.alternation = alt;
      const std::string tag = "L" + std::to_string(level) + ".A" + std::to_string(alt);
      const bool skip_corr = resumed_into && alt == resume->alternation && resume->phase == 1;

      if (config.ot_enabled && !skip_corr) {
        st.phase = 0;
        MetricsRecord rec;
        rec.stage = "update";
        rec.level = level;
        rec.alternation = alt;
        timed(tag + ".correspond", [&] {
          const auto rr = render(st.mesh, dist, scene, target.width, target.height);
          OtSites sites;
          sites.pos = rr.centroids;
          sites.flux = rr.face_flux;
          OtResult ot = solve_ot(sites, target.measure, config.ot, st.ot_weights);
          st.ot_weights = ot.weights;
          rec.ot_mismatch = ot.max_mismatch;
          rec.ot_iterations = ot.iterations;
          if (ot.fallback_centroids > 0) {
            log(tag + ": " + std::to_string(ot.fallback_centroids) + " geometric-centroid cells");
          }
          if (hooks.ot_dump) {
            OtSites kept_sites;
            for (int i : ot.kept) {
              kept_sites.pos.push_back(sites.pos[i]);
              kept_sites.flux.push_back(sites.flux[i]);
            }
            hooks.ot_dump(level, alt, kept_sites, ot.diagram);
          }
          const int nf = st.mesh.face_count();
          std::vector<Vec2d> centers(nf, Vec2d{0, 0});
          std::vector<uint8_t> ok(nf, 0);
          for (std::size_t i = 0; i < ot.kept.size(); ++i) {
            centers[ot.kept[i]] = ot.diagram.cells[i].centroid;
            ok[ot.kept[i]] = 1;
          }
          obj->set_update_targets(std::move(centers), std::move(ok), rr.face_flux);

          obj->set_phase(PhaseWeights::update(config.energy.w));
          auto fn = [&](const std::vector<double>& x, std::vector<double>* g) {
            return (*obj)(x, g);
          };
          SolveResult sol =
              minimize(fn, obj->pack(st.mesh, st.vars), config.update_solver, /*keep_log=*/true);
          detail::check_monotone(sol.log, "update phase");
          obj->unpack(sol.x, st.mesh, st.vars);
          rec.iterations = sol.iterations;
          rec.evaluations = sol.evaluations;
          EnergyBreakdown bd;
          (*obj)(sol.x, nullptr, &bd);
          rec.align = bd.align;
          rec.flux = bd.flux;
          rec.smooth = bd.smooth;
          rec.barr = bd.barr;
          rec.total = bd.total;
          const GrayImage* img = nullptr;
          rec.mae = stage_mae(&img);
          if (hooks.stage_render && img) hooks.stage_render(level, alt, "update", *img);
        });
        res.metrics.push_back(rec);
        st.phase = 1;
        if (hooks.checkpoint) hooks.checkpoint(st);
        log(tag + ": update done, mae " + std::to_string(res.metrics.back().mae));
      }

      {
        MetricsRecord rec;
        rec.stage = "render";
        rec.level = level;
        rec.alternation = alt;
        timed(tag + ".render", [&] {
          obj->set_phase(PhaseWeights::rendering(config.energy.w));
          auto fn = [&](const std::vector<double>& x, std::vector<double>* g) {
            return (*obj)(x, g);
          };
          SolveResult sol =
              minimize(fn, obj->pack(st.mesh, st.vars), config.render_solver, /*keep_log=*/true);
          detail::check_monotone(sol.log, "rendering-guided phase");
          obj->unpack(sol.x, st.mesh, st.vars);
          rec.iterations = sol.iterations;
          rec.evaluations = sol.evaluations;
          obj->set_phase(PhaseWeights::rendering(config.energy.w));
          EnergyBreakdown bd;
          (*obj)(sol.x, nullptr, &bd);
          rec.img = bd.img;
          rec.grad = bd.grad;
          rec.bdr = bd.bdr;
          rec.smooth = bd.smooth;
          rec.barr = bd.barr;
          rec.total = bd.total;
          rec.spilled = bd.spilled;
          const GrayImage* img = nullptr;
          rec.mae = stage_mae(&img);
          if (hooks.stage_render && img) hooks.stage_render(level, alt, "render", *img);
        });
        res.metrics.push_back(rec);
        st.alternation = alt + 1;
        st.phase = 0;
        if (st.alternation == config.alternations) {
          st.level = level + 1;
          st.alternation = 0;
          if (st.level == levels) st.done = true;
        }
        if (hooks.checkpoint) hooks.checkpoint(st);
        log(tag + ": render done, mae " + std::to_string(res.metrics.back().mae));
      }
    }
  }

  const auto rr = render(st.mesh, dist, scene, native_target.width, native_target.height);
  res.final_render = flux_to_gray(rr.flux, native.gamma_total, config.gamma);
  res.final_mae = mean_absolute_error(res.final_render, native_target);
  res.state = st;
  res.state.done = true;
  return res;
}

}  // namespace caustic

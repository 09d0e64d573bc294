// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <sstream>

#include "caustic/pipeline.hpp"

namespace caustic {

// Flat `key = value` configuration with [section] headers. Keys are addressed
// as "section.key"; unknown keys are rejected after the consumer has pulled
// everything it understands.
class ConfigFile {
 public:
  static ConfigFile parse_text(const std::string& text, const std::string& name) {
    ConfigFile cfg;
    cfg.name_ = name;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3) {
          throw ConfigError(cfg.where(lineno) + "malformed section header");
        }
        section = trim(t.substr(1, t.size() - 2));
        if (section.empty()) throw ConfigError(cfg.where(lineno) + "empty section name");
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(cfg.where(lineno) + "expected key = value");
      }
      const std::string key = trim(t.substr(0, eq));
      const std::string value = trim(t.substr(eq + 1));
      if (key.empty()) throw ConfigError(cfg.where(lineno) + "empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (cfg.entries_.count(full)) {
        throw ConfigError(cfg.where(lineno) + "duplicate key '" + full + "'");
      }
      cfg.entries_[full] = {value, lineno, false};
    }
    return cfg;
  }

  static ConfigFile parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str(), path);
  }

  // Command-line override "section.key=value"; takes precedence over the file.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("malformed override '" + assignment + "' (want key=value)");
    }
    entries_[trim(assignment.substr(0, eq))] = {trim(assignment.substr(eq + 1)), 0, false};
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& def) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return def;
    it->second.used = true;
    return it->second.value;
  }

  double get_double(const std::string& key, double def) const {
    return parse_one<double>(key, def, "number");
  }
  int get_int(const std::string& key, int def) const { return parse_one<int>(key, def, "integer"); }
  uint64_t get_uint64(const std::string& key, uint64_t def) const {
    return parse_one<uint64_t>(key, def, "integer");
  }

  bool get_bool(const std::string& key, bool def) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return def;
    it->second.used = true;
    const std::string& v = it->second.value;
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    throw ConfigError(where(it->second.line) + "expected boolean for '" + key + "', got '" + v + "'");
  }

  Vec3d get_vec3(const std::string& key, const Vec3d& def) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return def;
    it->second.used = true;
    std::istringstream in(it->second.value);
    Vec3d v;
    if (!(in >> v.x >> v.y >> v.z)) {
      throw ConfigError(where(it->second.line) + "expected three numbers for '" + key + "'");
    }
    return v;
  }

  Rect get_rect(const std::string& key, const Rect& def) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return def;
    it->second.used = true;
    std::istringstream in(it->second.value);
    Rect r;
    if (!(in >> r.x0 >> r.y0 >> r.x1 >> r.y1)) {
      throw ConfigError(where(it->second.line) + "expected four numbers for '" + key + "'");
    }
    return r;
  }

  // Call after reading every supported key.
  void reject_unknown() const {
    for (const auto& [key, entry] : entries_) {
      if (!entry.used) {
        throw ConfigError(where(entry.line) + "unknown key '" + key + "'");
      }
    }
  }

 private:
  struct Entry {
    std::string value;
    int line = 0;
    mutable bool used = false;
  };

  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::string where(int line) const {
    if (line == 0) return name_ + ": ";
    return name_ + ":" + std::to_string(line) + ": ";
  }

  template <class T>
  T parse_one(const std::string& key, T def, const char* kind) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return def;
    it->second.used = true;
    std::istringstream in(it->second.value);
    T v;
    char extra;
    if (!(in >> v) || (in >> extra)) {
      throw ConfigError(where(it->second.line) + "expected " + kind + " for '" + key + "', got '" +
                        it->second.value + "'");
    }
    return v;
  }

  std::string name_;
  std::map<std::string, Entry> entries_;
};

// Full run description: pipeline settings, scene, source, and output options.
struct RunConfig {
  std::string target_path;
  std::string output_dir = "out";
  bool dump_svg = false;
  std::string image_format = "png";  // or "pgm"
  int export_bits = 16;
  std::string source_map;  // optional emitter weight image

  PipelineConfig pipeline;
  OpticalScene scene;
  SourceDistribution dist = SourceDistribution::uniform();

  std::string image_suffix() const { return image_format == "pgm" ? ".pgm" : ".png"; }
};

inline GammaModel gamma_from_string(const std::string& s) {
  if (s == "srgb") return GammaModel::srgb();
  try {
    std::size_t pos = 0;
    const double e = std::stod(s, &pos);
    if (pos == s.size() && e > 0) return GammaModel::power(e);
  } catch (const std::exception&) {
  }
  throw ConfigError("gamma must be 'srgb' or a positive exponent, got '" + s + "'");
}

inline RunConfig run_config_from(const ConfigFile& cfg) {
  RunConfig rc;
  rc.target_path = cfg.get_string("run.target", "");
  rc.output_dir = cfg.get_string("run.output", rc.output_dir);
  rc.dump_svg = cfg.get_bool("run.dump_svg", rc.dump_svg);
  rc.image_format = cfg.get_string("run.image_format", rc.image_format);
  if (rc.image_format != "png" && rc.image_format != "pgm") {
    throw ConfigError("run.image_format must be png or pgm");
  }
  rc.export_bits = cfg.get_int("run.export_bits", rc.export_bits);
  if (rc.export_bits != 8 && rc.export_bits != 16) {
    throw ConfigError("run.export_bits must be 8 or 16");
  }

  OpticalScene& sc = rc.scene;
  const std::string mode = cfg.get_string("scene.mode", "refract");
  if (mode == "refract") {
    sc.mode = SurfaceMode::Refract;
  } else if (mode == "reflect") {
    sc.mode = SurfaceMode::Reflect;
  } else {
    throw ConfigError("scene.mode must be refract or reflect");
  }
  const std::string light = cfg.get_string("scene.light", "parallel");
  if (light == "parallel") {
    sc.light.kind = LightKind::Parallel;
  } else if (light == "point") {
    sc.light.kind = LightKind::Point;
  } else {
    throw ConfigError("scene.light must be parallel or point");
  }
  sc.light.direction = cfg.get_vec3("scene.direction", sc.light.direction);
  sc.light.position = cfg.get_vec3("scene.position", sc.light.position);
  sc.ior = cfg.get_double("scene.ior", sc.ior);
  if (sc.ior <= 0) throw ConfigError("scene.ior must be positive");
  sc.z_focal = cfg.get_double("scene.z_focal", sc.z_focal);
  sc.front.z0 = cfg.get_double("scene.front_z", sc.mode == SurfaceMode::Refract ? -1.0 : 0.0);

  PipelineConfig& pl = rc.pipeline;
  pl.lens_width = cfg.get_double("scene.lens_width", 0);
  pl.lens_height = cfg.get_double("scene.lens_height", 0);
  if (pl.lens_width < 0 || pl.lens_height < 0) throw ConfigError("lens size must be positive");
  const Rect def_region{0, 0, pl.lens_width, pl.lens_height};
  sc.image_region = cfg.get_rect("scene.image_region", def_region);
  if (sc.image_region.width() <= 0 || sc.image_region.height() <= 0) {
    throw ConfigError("scene.image_region must have positive extent");
  }

  pl.coarsest_image = cfg.get_int("pipeline.coarsest_image", pl.coarsest_image);
  pl.levels = cfg.get_int("pipeline.levels", pl.levels);
  pl.alternations = cfg.get_int("pipeline.alternations", pl.alternations);
  pl.mesh_ratio = cfg.get_double("pipeline.mesh_ratio", pl.mesh_ratio);
  pl.ot_enabled = cfg.get_bool("pipeline.ot", pl.ot_enabled);
  pl.alpha_max = cfg.get_double("pipeline.alpha_max", pl.alpha_max);
  pl.alpha_min = cfg.get_double("pipeline.alpha_min", pl.alpha_min);
  pl.seed = cfg.get_uint64("pipeline.seed", pl.seed);
  pl.gamma = gamma_from_string(cfg.get_string("pipeline.gamma", "2.2"));

  EnergyWeights& w = pl.energy.w;
  w.lambda1 = cfg.get_double("energy.lambda1", w.lambda1);
  w.lambda2 = cfg.get_double("energy.lambda2", w.lambda2);
  w.lambda3 = cfg.get_double("energy.lambda3", w.lambda3);
  w.lambda4 = cfg.get_double("energy.lambda4", w.lambda4);
  w.lambda5 = cfg.get_double("energy.lambda5", w.lambda5);
  w.tau1 = cfg.get_double("energy.tau1", w.tau1);
  w.tau2 = cfg.get_double("energy.tau2", w.tau2);
  w.gamma1 = cfg.get_double("energy.gamma1", w.gamma1);
  w.gamma2 = cfg.get_double("energy.gamma2", w.gamma2);
  w.gamma3 = cfg.get_double("energy.gamma3", w.gamma3);
  w.gamma4 = cfg.get_double("energy.gamma4", w.gamma4);
  pl.barrier_rel1 = cfg.get_double("energy.barrier_rel1", pl.barrier_rel1);
  pl.barrier_rel2 = cfg.get_double("energy.barrier_rel2", pl.barrier_rel2);
  if (!(pl.barrier_rel1 >= 0 && pl.barrier_rel2 > pl.barrier_rel1)) {
    throw ConfigError("energy barriers need 0 <= barrier_rel1 < barrier_rel2");
  }

  pl.render_solver.max_iterations = cfg.get_int("solver.render_max_iterations", 500);
  pl.render_solver.grad_tolerance = cfg.get_double("solver.render_grad_tolerance", 0);
  pl.render_solver.memory = cfg.get_int("solver.memory", pl.render_solver.memory);
  pl.update_solver.max_iterations = cfg.get_int("solver.update_max_iterations", 200);
  pl.update_solver.grad_tolerance = cfg.get_double("solver.update_grad_tolerance", 0);
  pl.update_solver.memory = pl.render_solver.memory;

  pl.ot.tolerance = cfg.get_double("ot.tolerance", pl.ot.tolerance);
  pl.ot.max_iterations = cfg.get_int("ot.max_iterations", pl.ot.max_iterations);
  pl.ot.memory = cfg.get_int("ot.memory", pl.ot.memory);

  rc.source_map = cfg.get_string("source.map", "");

  cfg.reject_unknown();
  pl.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  ConfigFile cfg = ConfigFile::parse_file(path);
  for (const std::string& o : overrides) cfg.apply_override(o);
  return run_config_from(cfg);
}

}  // namespace caustic

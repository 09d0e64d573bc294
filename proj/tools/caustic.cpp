// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include "caustic/cli.hpp"

namespace {

// Leftover --section.key value tokens become config overrides, so every
// config key is reachable from the command line.
std::vector<std::string> overrides_from(const std::vector<std::string>& extras) {
  std::vector<std::string> ov;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string t = extras[i];
    if (t.rfind("--", 0) != 0) {
      throw caustic::ConfigError("unexpected argument '" + t + "'");
    }
    t = t.substr(2);
    if (t.find('=') != std::string::npos) {
      ov.push_back(t);
    } else if (i + 1 < extras.size()) {
      ov.push_back(t + "=" + extras[++i]);
    } else {
      throw caustic::ConfigError("flag --" + t + " needs a value");
    }
  }
  return ov;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace caustic;
  CLI::App app{"inverse design of refractive and reflective caustic surfaces"};
  app.require_subcommand(1);

  std::string config_path, mesh_path, out_path, a_path, b_path;
  bool resume = false;
  RenderArgs rargs;
  int size = 32;
  long rays = 10000000;
  uint64_t seed = 1;

  CLI::App* design = app.add_subcommand("design", "optimize a surface for a target image");
  design->add_option("--config", config_path, "run configuration file")->required();
  design->add_flag("--resume", resume, "continue from the run directory's checkpoint");
  design->allow_extras();

  CLI::App* resume_cmd = app.add_subcommand("resume", "continue an interrupted design run");
  resume_cmd->add_option("--config", config_path, "run configuration file")->required();
  resume_cmd->allow_extras();

  CLI::App* render_cmd = app.add_subcommand("render", "forward-render a mesh");
  render_cmd->add_option("--config", config_path, "scene configuration file")->required();
  render_cmd->add_option("--mesh", rargs.mesh_path, "OBJ or checkpoint JSON")->required();
  render_cmd->add_option("--out", rargs.out_path, "output image path");
  render_cmd->add_option("--width", rargs.width, "image width in pixels");
  render_cmd->add_option("--height", rargs.height, "image height in pixels");
  render_cmd->add_flag("--oracle", rargs.oracle, "also run the Monte-Carlo oracle and compare");
  render_cmd->add_option("--rays", rargs.rays, "oracle ray count");
  render_cmd->add_option("--seed", rargs.seed, "oracle RNG seed");
  render_cmd->allow_extras();

  CLI::App* validate_cmd =
      app.add_subcommand("validate", "cross-check deterministic and Monte-Carlo renders");
  validate_cmd->add_option("--config", config_path, "scene configuration file")->required();
  validate_cmd->add_option("--mesh", mesh_path, "OBJ or checkpoint JSON")->required();
  validate_cmd->add_option("--size", size, "comparison image size");
  validate_cmd->add_option("--rays", rays, "ray count");
  validate_cmd->add_option("--seed", seed, "RNG seed");
  validate_cmd->allow_extras();

  CLI::App* errmap_cmd = app.add_subcommand("error-map", "per-pixel absolute error image");
  errmap_cmd->add_option("--a", a_path, "first image")->required();
  errmap_cmd->add_option("--b", b_path, "second image")->required();
  errmap_cmd->add_option("--out", out_path, "output image")->required();

  CLI::App* otdump_cmd = app.add_subcommand("ot-dump", "dump the transport partition as SVG");
  otdump_cmd->add_option("--config", config_path, "run configuration file")->required();
  otdump_cmd->add_option("--mesh", mesh_path, "OBJ or checkpoint JSON")->required();
  otdump_cmd->add_option("--out", out_path, "output SVG path")->required();
  otdump_cmd->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (design->parsed()) {
      return cmd_design(config_path, overrides_from(design->remaining()), resume, std::cout,
                        std::cerr);
    }
    if (resume_cmd->parsed()) {
      return cmd_design(config_path, overrides_from(resume_cmd->remaining()), true, std::cout,
                        std::cerr);
    }
    if (render_cmd->parsed()) {
      return cmd_render(config_path, overrides_from(render_cmd->remaining()), rargs, std::cout,
                        std::cerr);
    }
    if (validate_cmd->parsed()) {
      return cmd_validate(config_path, overrides_from(validate_cmd->remaining()), mesh_path, size,
                          rays, seed, std::cout, std::cerr);
    }
    if (errmap_cmd->parsed()) {
      return cmd_error_map(a_path, b_path, out_path, std::cout, std::cerr);
    }
    if (otdump_cmd->parsed()) {
      return cmd_ot_dump(config_path, overrides_from(otdump_cmd->remaining()), mesh_path, out_path,
                         std::cout, std::cerr);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>

#include "caustic/core.hpp"

namespace caustic {

// Gray values are stored normalized to [0, 1]; rows run top to bottom and
// row r covers y in [r*dy, (r+1)*dy] of the image region, so file row order
// matches the receptive-plane parameterization.
struct GrayImage {
  int width = 0, height = 0;
  std::vector<double> v;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0)
      : width(w), height(h), v(static_cast<std::size_t>(w) * h, fill) {}
  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * width + c]; }
  std::size_t pixels() const { return v.size(); }
};

struct FluxImage {
  int width = 0, height = 0;
  std::vector<double> flux;
  double spilled = 0;

  FluxImage() = default;
  FluxImage(int w, int h) : width(w), height(h), flux(static_cast<std::size_t>(w) * h, 0.0) {}
  double& at(int r, int c) { return flux[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return flux[static_cast<std::size_t>(r) * width + c]; }
  double total() const {
    double s = 0;
    for (double f : flux) s += f;
    return s + spilled;
  }
};

// ---------------------------------------------------------------------------
// Display transfer curve: power law by default, optional sRGB.

struct GammaModel {
  enum class Kind { Power, Srgb };
  Kind kind = Kind::Power;
  double exponent = 2.2;

  static GammaModel power(double e) { return {Kind::Power, e}; }
  static GammaModel srgb() { return {Kind::Srgb, 2.4}; }

  // gray in [0,1] -> relative luminous flux
  double apply(double g) const {
    g = std::max(g, 0.0);
    if (kind == Kind::Power) return std::pow(g, exponent);
    return g <= 0.04045 ? g / 12.92 : std::pow((g + 0.055) / 1.055, 2.4);
  }

  // relative flux -> gray; the inverse of apply()
  double invert(double x) const {
    x = std::max(x, 0.0);
    if (kind == Kind::Power) return std::pow(x, 1.0 / exponent);
    return x <= 0.0031308 ? 12.92 * x : 1.055 * std::pow(x, 1.0 / 2.4) - 0.055;
  }

  // d invert / dx, floored away from the singularity at x = 0 so objective
  // gradients stay finite on dark pixels
  double invert_deriv(double x) const {
    static constexpr double kFloor = 1e-14;
    x = std::max(x, kFloor);
    if (kind == Kind::Power) return std::pow(x, 1.0 / exponent - 1.0) / exponent;
    return x <= 0.0031308 ? 12.92 : (1.055 / 2.4) * std::pow(x, 1.0 / 2.4 - 1.0);
  }
};

struct TargetFlux {
  FluxImage flux;         // normalized: entries sum to 1
  double gamma_total = 0; // sum of gamma-corrected gray values at this resolution
};

inline TargetFlux target_flux_from_image(const GrayImage& img, const GammaModel& gamma) {
  TargetFlux t;
  t.flux = FluxImage(img.width, img.height);
  double total = 0;
  for (std::size_t i = 0; i < img.v.size(); ++i) {
    t.flux.flux[i] = gamma.apply(img.v[i]);
    total += t.flux.flux[i];
  }
  if (total <= 0) throw ZeroTotalFlux();
  for (double& f : t.flux.flux) f /= total;
  t.gamma_total = total;
  return t;
}

// Gray image implied by a flux image under the same normalization; values are
// not clamped so losses see overshoot.
inline GrayImage flux_to_gray(const FluxImage& flux, double gamma_total, const GammaModel& gamma) {
  GrayImage g(flux.width, flux.height);
  for (std::size_t i = 0; i < flux.flux.size(); ++i) {
    g.v[i] = gamma.invert(gamma_total * flux.flux[i]);
  }
  return g;
}

// Halves resolution, summing 2x2 blocks so total flux is conserved. Odd
// dimensions are padded with zero flux on the far side.
inline FluxImage downsample_flux(const FluxImage& in) {
  FluxImage out((in.width + 1) / 2, (in.height + 1) / 2);
  out.spilled = in.spilled;
  for (int r = 0; r < in.height; ++r) {
    for (int c = 0; c < in.width; ++c) {
      out.at(r / 2, c / 2) += in.at(r, c);
    }
  }
  return out;
}

// Mean absolute error on export-clamped values, normalized by the gray range.
inline double mean_absolute_error(const GrayImage& a, const GrayImage& b) {
  if (a.width != b.width || a.height != b.height) throw Error("image size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double x = std::min(std::max(a.v[i], 0.0), 1.0);
    const double y = std::min(std::max(b.v[i], 0.0), 1.0);
    s += std::fabs(x - y);
  }
  return s / static_cast<double>(a.v.size());
}

inline GrayImage error_map(const GrayImage& a, const GrayImage& b) {
  if (a.width != b.width || a.height != b.height) throw Error("image size mismatch");
  GrayImage e(a.width, a.height);
  for (std::size_t i = 0; i < a.v.size(); ++i) {
    const double x = std::min(std::max(a.v[i], 0.0), 1.0);
    const double y = std::min(std::max(b.v[i], 0.0), 1.0);
    e.v[i] = std::fabs(x - y);
  }
  return e;
}

// ---------------------------------------------------------------------------
// PGM (P2 ascii / P5 binary, 8- or 16-bit)

inline void write_pgm(const GrayImage& img, const std::string& path, int bits = 8, bool binary = true) {
  if (bits != 8 && bits != 16) throw IoError("pgm depth must be 8 or 16 bits");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  const int maxval = bits == 8 ? 255 : 65535;
  out << (binary ? "P5" : "P2") << '\n' << img.width << ' ' << img.height << '\n' << maxval << '\n';
  for (double raw : img.v) {
    const double g = std::min(std::max(raw, 0.0), 1.0);
    const unsigned q = static_cast<unsigned>(std::lround(g * maxval));
    if (binary) {
      if (bits == 16) out.put(static_cast<char>(q >> 8));  // most significant byte first
      out.put(static_cast<char>(q & 0xFF));
    } else {
      out << q << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P2" && magic != "P5") throw IoError(path + ": not a PGM file");
  auto next_token = [&]() -> long {
    // skips whitespace and '#' comments
    while (true) {
      const int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v;
    if (!(in >> v)) throw IoError(path + ": truncated header");
    return v;
  };
  const long w = next_token(), h = next_token(), maxval = next_token();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw IoError(path + ": bad dimensions");
  GrayImage img(static_cast<int>(w), static_cast<int>(h));
  if (magic == "P2") {
    for (double& g : img.v) {
      long v;
      if (!(in >> v)) throw IoError(path + ": truncated pixel data");
      g = static_cast<double>(v) / maxval;
    }
  } else {
    in.get();  // single whitespace after maxval
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> row(img.v.size() * bytes);
    if (!in.read(reinterpret_cast<char*>(row.data()), row.size())) {
      throw IoError(path + ": truncated pixel data");
    }
    for (std::size_t i = 0; i < img.v.size(); ++i) {
      const unsigned v = bytes == 1 ? row[i] : (row[2 * i] << 8 | row[2 * i + 1]);
      img.v[i] = static_cast<double>(v) / maxval;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// PNG (8- or 16-bit grayscale)

inline void write_png(const GrayImage& img, const std::string& path, int bits = 8) {
  if (bits != 8 && bits != 16) throw IoError("png depth must be 8 or 16 bits");
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, bits, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int maxval = bits == 8 ? 255 : 65535;
  const int stride = img.width * (bits / 8);
  std::vector<unsigned char> row(stride);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      const double g = std::min(std::max(img.at(r, c), 0.0), 1.0);
      const unsigned q = static_cast<unsigned>(std::lround(g * maxval));
      if (bits == 8) {
        row[c] = static_cast<unsigned char>(q);
      } else {
        row[2 * c] = static_cast<unsigned char>(q >> 8);
        row[2 * c + 1] = static_cast<unsigned char>(q & 0xFF);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline GrayImage read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("png read failed: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  // normalize any input to 8/16-bit gray
  png_set_expand(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(png, 1, -1, -1);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int maxval = depth == 16 ? 65535 : 255;
  GrayImage img(w, h);
  std::vector<unsigned char> row(png_get_rowbytes(png, info));
  for (int r = 0; r < h; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (int c = 0; c < w; ++c) {
      const unsigned v = depth == 16 ? (row[2 * c] << 8 | row[2 * c + 1]) : row[c];
      img.at(r, c) = static_cast<double>(v) / maxval;
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline GrayImage read_image(const std::string& path) {
  if (has_suffix(path, ".png")) return read_png(path);
  if (has_suffix(path, ".pgm")) return read_pgm(path);
  throw IoError(path + ": unsupported image format (use .pgm or .png)");
}

inline void write_image(const GrayImage& img, const std::string& path, int bits = 8) {
  if (has_suffix(path, ".png")) return write_png(img, path, bits);
  if (has_suffix(path, ".pgm")) return write_pgm(img, path, bits);
  throw IoError(path + ": unsupported image format (use .pgm or .png)");
}

// ---------------------------------------------------------------------------
// Raw flux maps: 16-byte header (8-byte magic, u32 width, u32 height, both
// little-endian) followed by row-major IEEE float64.

inline constexpr char kFluxMagic[8] = {'C', 'A', 'U', 'S', 'T', 'F', 'L', 'X'};

inline void write_flux(const FluxImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(kFluxMagic, 8);
  const uint32_t wh[2] = {static_cast<uint32_t>(img.width), static_cast<uint32_t>(img.height)};
  out.write(reinterpret_cast<const char*>(wh), 8);
  out.write(reinterpret_cast<const char*>(img.flux.data()), img.flux.size() * sizeof(double));
  if (!out) throw IoError("write failed: " + path);
}

inline FluxImage read_flux(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  uint32_t wh[2];
  if (!in.read(magic, 8) || std::memcmp(magic, kFluxMagic, 8) != 0) {
    throw IoError(path + ": not a flux map");
  }
  if (!in.read(reinterpret_cast<char*>(wh), 8)) throw IoError(path + ": truncated header");
  FluxImage img(static_cast<int>(wh[0]), static_cast<int>(wh[1]));
  if (!in.read(reinterpret_cast<char*>(img.flux.data()), img.flux.size() * sizeof(double))) {
    throw IoError(path + ": truncated flux data");
  }
  return img;
}

}  // namespace caustic

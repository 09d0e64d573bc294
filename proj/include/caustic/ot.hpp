// Copyright 2026 The Caustic Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <fstream>
#include <map>

#include "caustic/geometry.hpp"
#include "caustic/image.hpp"
#include "caustic/solver.hpp"

namespace caustic {

// Piecewise-constant target measure on the image region; flux sums to one.
struct TargetMeasure {
  int width = 0, height = 0;
  Rect region;
  std::vector<double> flux;

  double pixel_area() const { return region.area() / (static_cast<double>(width) * height); }
};

inline TargetMeasure target_measure(const TargetFlux& t, int width, int height, const Rect& region) {
  return {width, height, region, t.flux.flux};
}

struct OtSites {
  std::vector<Vec2d> pos;
  std::vector<double> flux;  // capacities
};

struct PowerCell {
  std::vector<Vec2d> poly;  // counter-clockwise, clipped to the region
  double measure = 0;       // target flux covered
  double distortion = 0;    // integral of |x - y_i|^2 against the target
  Vec2d centroid{0, 0};     // flux-weighted; geometric when the cell sees no flux
  bool geometric_fallback = false;
};

struct PowerDiagram {
  std::vector<PowerCell> cells;
};

namespace detail {

// Uniform bucket grid over the sites, used to visit candidates for power-cell
// clipping in roughly increasing distance order.
struct SiteGrid {
  int dim = 1;
  Rect region;
  std::vector<std::vector<int>> buckets;
  std::vector<double> bucket_wmax;  // per bucket, when weights are attached

  SiteGrid(const std::vector<Vec2d>& pos, const Rect& reg) : region(reg) {
    dim = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(pos.size())))));
    buckets.resize(static_cast<std::size_t>(dim) * dim);
    for (int i = 0; i < static_cast<int>(pos.size()); ++i) {
      buckets[index_of(pos[i])].push_back(i);
    }
  }

  // Record the largest weight per bucket so whole rings of low-weight sites
  // can be skipped during clipping.
  void attach_weights(const std::vector<double>& w) {
    bucket_wmax.assign(buckets.size(), -kInf);
    for (std::size_t b = 0; b < buckets.size(); ++b) {
      for (int i : buckets[b]) bucket_wmax[b] = std::max(bucket_wmax[b], w[i]);
    }
  }

  template <class Fn>
  void visit_ring_buckets(const Vec2d& p, int ring, Fn&& fn) const {
    const int cx = clamp_coord(p.x, region.x0, region.x1);
    const int cy = clamp_coord(p.y, region.y0, region.y1);
    for (int dy = -ring; dy <= ring; ++dy) {
      const int y = cy + dy;
      if (y < 0 || y >= dim) continue;
      for (int dx = -ring; dx <= ring; ++dx) {
        if (std::max(std::abs(dx), std::abs(dy)) != ring) continue;
        const int x = cx + dx;
        if (x < 0 || x >= dim) continue;
        fn(static_cast<std::size_t>(y) * dim + x);
      }
    }
  }

  int clamp_coord(double t, double lo, double hi) const {
    const double u = (t - lo) / (hi - lo) * dim;
    return std::min(dim - 1, std::max(0, static_cast<int>(u)));
  }
  std::size_t index_of(const Vec2d& p) const {
    const int cx = clamp_coord(p.x, region.x0, region.x1);
    const int cy = clamp_coord(p.y, region.y0, region.y1);
    return static_cast<std::size_t>(cy) * dim + cx;
  }
  double bucket_step() const {
    return std::min(region.width() / dim, region.height() / dim);
  }

  template <class Fn>
  void visit_ring(const Vec2d& p, int ring, Fn&& fn) const {
    visit_ring_buckets(p, ring, [&](std::size_t b) {
      for (int s : buckets[b]) fn(s);
    });
  }
};

inline double cell_radius(const std::vector<Vec2d>& poly, const Vec2d& y) {
  double r2 = 0;
  for (const Vec2d& p : poly) r2 = std::max(r2, norm2(p - y));
  return std::sqrt(r2);
}

// Distance-sorted nearest neighbours per site. Sites stay put across the many
// diagram evaluations of one solve, so the candidate gathering and sorting is
// hoisted out of the evaluation loop; cells whose security radius outruns the
// cached range fall back to the ring scan.
struct NeighborCache {
  int count = 0;             // neighbours stored per site
  std::vector<int> idx;      // site-major, `count` entries each, nearest first
  std::vector<double> dist;  // matching distances
  std::vector<double> range; // per site: distance beyond which the cache is blind

  NeighborCache(const std::vector<Vec2d>& pos, const SiteGrid& grid, int k) {
    const int n = static_cast<int>(pos.size());
    count = std::min(k, n - 1);
    idx.resize(static_cast<std::size_t>(n) * count);
    dist.resize(static_cast<std::size_t>(n) * count);
    range.resize(n);
    const double step = grid.bucket_step();
    const int max_ring = 2 * grid.dim;
    parallel_for_chunked(n, [&](int, std::size_t b, std::size_t e) {
      std::vector<std::pair<double, int>> cand;
      for (std::size_t i = b; i < e; ++i) {
        cand.clear();
        for (int ring = 0; ring <= max_ring; ++ring) {
          if (ring > 0 && static_cast<int>(cand.size()) >= count) {
            std::nth_element(cand.begin(), cand.begin() + (count - 1), cand.end());
            if ((ring - 1) * step > std::sqrt(cand[count - 1].first)) break;
          }
          grid.visit_ring(pos[i], ring, [&](int j) {
            if (j != static_cast<int>(i)) cand.emplace_back(norm2(pos[j] - pos[i]), j);
          });
        }
        std::partial_sort(cand.begin(), cand.begin() + count, cand.end());
        for (int t = 0; t < count; ++t) {
          idx[i * count + t] = cand[t].second;
          dist[i * count + t] = std::sqrt(cand[t].first);
        }
        range[i] =
            static_cast<int>(cand.size()) > count ? dist[i * count + count - 1] : kInf;
      }
    });
  }
};

// Clip the cell of site i against the bisectors of candidate sites, visiting
// buckets ring by ring and stopping once no farther site can still cut. A
// site j at distance d cuts only if d < rho + sqrt(rho^2 + w_j - w_i), so the
// sorted sweep breaks on the w_max form and skips per candidate on the exact
// one.
inline std::vector<Vec2d> clip_power_cell(const std::vector<Vec2d>& pos,
                                          const std::vector<double>& w, int i,
                                          const SiteGrid& grid, double w_max,
                                          const NeighborCache* cache = nullptr) {
  thread_local std::vector<Vec2d> poly, clipped;
  thread_local std::vector<std::pair<double, int>> cand;
  poly.assign({{grid.region.x0, grid.region.y0},
               {grid.region.x1, grid.region.y0},
               {grid.region.x1, grid.region.y1},
               {grid.region.x0, grid.region.y1}});
  const Vec2d yi = pos[i];
  double d2min = 0;  // candidates closer than this were already handled
  int first_ring = 0;
  if (cache) {
    const std::size_t base = static_cast<std::size_t>(i) * cache->count;
    bool covered = false;
    for (int t = 0; t < cache->count && !poly.empty(); ++t) {
      const double rho = cell_radius(poly, yi);
      const double d = cache->dist[base + t];
      if (d > rho + std::sqrt(std::max(0.0, rho * rho + (w_max - w[i])))) {
        covered = true;
        break;
      }
      const int j = cache->idx[base + t];
      if (d > rho + std::sqrt(std::max(0.0, rho * rho + (w[j] - w[i])))) continue;
      const Vec2d a = (pos[j] - yi) * 2.0;
      const double b = norm2(pos[j]) - norm2(yi) - w[j] + w[i];
      double worst = -kInf;
      for (const Vec2d& v : poly) worst = std::max(worst, a.x * v.x + a.y * v.y - b);
      if (worst <= 0) continue;  // bisector misses the current cell
      clip_halfplane(poly, a, b, clipped);
      poly.swap(clipped);
    }
    if (poly.empty()) return {};
    if (!covered) {
      const double rho = cell_radius(poly, yi);
      covered = rho + std::sqrt(std::max(0.0, rho * rho + (w_max - w[i]))) < cache->range[i];
    }
    if (covered) return {poly.begin(), poly.end()};
    // a site beyond the cached range could still cut: continue the ring scan
    // from there with the cell clipped so far
    d2min = cache->range[i] * cache->range[i];
    first_ring = std::max(
        0, static_cast<int>(std::ceil(cache->range[i] / (std::sqrt(2.0) * grid.bucket_step()))) -
               1);
  }
  const double step = grid.bucket_step();
  const int max_ring = 2 * grid.dim;
  const bool have_wmax = !grid.bucket_wmax.empty();
  for (int ring = first_ring; ring <= max_ring && !poly.empty(); ++ring) {
    const double rho = cell_radius(poly, yi);
    // a site at distance d cuts only if w_j > d(d - 2 rho) + w_i, so a ring
    // whose sites all start at distance D needs max weight above the bound
    const double dmin = (ring - 1) * step;
    const double needed = dmin >= rho ? dmin * (dmin - 2.0 * rho) + w[i] : w[i] - rho * rho;
    if (ring > 0 && needed > w_max) break;
    if (ring > 0 && have_wmax) {
      double ring_w = -kInf;
      grid.visit_ring_buckets(yi, ring, [&](std::size_t b) {
        ring_w = std::max(ring_w, grid.bucket_wmax[b]);
      });
      if (ring_w < needed) continue;
    }
    cand.clear();
    grid.visit_ring(yi, ring, [&](int j) {
      const double d2 = norm2(pos[j] - yi);
      if (j != i && d2 >= d2min) cand.emplace_back(d2, j);
    });
    std::sort(cand.begin(), cand.end());
    for (const auto& [d2, j] : cand) {
      if (poly.empty()) break;
      const double rho2 = cell_radius(poly, yi);
      const double d = std::sqrt(d2);
      if (d > rho2 + std::sqrt(std::max(0.0, rho2 * rho2 + (w_max - w[i])))) break;
      if (d > rho2 + std::sqrt(std::max(0.0, rho2 * rho2 + (w[j] - w[i])))) continue;
      // |x - yi|^2 - wi <= |x - yj|^2 - wj  as  a.x <= b
      const Vec2d a = (pos[j] - yi) * 2.0;
      const double b = norm2(pos[j]) - norm2(yi) - w[j] + w[i];
      double worst = -kInf;
      for (const Vec2d& v : poly) worst = std::max(worst, a.x * v.x + a.y * v.y - b);
      if (worst <= 0) continue;  // bisector misses the current cell
      clip_halfplane(poly, a, b, clipped);
      poly.swap(clipped);
    }
  }
  return {poly.begin(), poly.end()};
}

// Integrals of the target measure over a convex cell: covered flux, second
// moment about y, and the flux-weighted first moment.
inline void integrate_cell(const std::vector<Vec2d>& poly, const TargetMeasure& target,
                           const Vec2d& y, double* measure, double* distortion, Vec2d* moment) {
  *measure = 0;
  if (distortion) *distortion = 0;
  if (moment) *moment = {0, 0};
  if (poly.size() < 3) return;
  Rect bb{poly[0].x, poly[0].y, poly[0].x, poly[0].y};
  for (const Vec2d& p : poly) {
    bb.x0 = std::min(bb.x0, p.x);
    bb.y0 = std::min(bb.y0, p.y);
    bb.x1 = std::max(bb.x1, p.x);
    bb.y1 = std::max(bb.y1, p.y);
  }
  const double dx = target.region.width() / target.width;
  const double dy = target.region.height() / target.height;
  const double inv_pa = 1.0 / target.pixel_area();
  int c0 = std::max(0, static_cast<int>(std::floor((bb.x0 - target.region.x0) / dx)));
  int c1 = std::min(target.width - 1, static_cast<int>(std::floor((bb.x1 - target.region.x0) / dx)));
  int r0 = std::max(0, static_cast<int>(std::floor((bb.y0 - target.region.y0) / dy)));
  int r1 = std::min(target.height - 1, static_cast<int>(std::floor((bb.y1 - target.region.y0) / dy)));
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      const double density = target.flux[static_cast<std::size_t>(r) * target.width + c] * inv_pa;
      if (density == 0) continue;
      const Rect px{target.region.x0 + c * dx, target.region.y0 + r * dy,
                    target.region.x0 + (c + 1) * dx, target.region.y0 + (r + 1) * dy};
      const auto part = clip_to_rect(poly, px);
      if (part.size() < 3) continue;
      const double area = polygon_signed_area(part);
      if (area <= 0) continue;
      *measure += density * area;
      if (distortion) *distortion += density * integral_squared_distance(part, y);
      if (moment) *moment += polygon_centroid(part) * (density * area);
    }
  }
}

}  // namespace detail

// Full power diagram for the given weights, with cell measures; centroids and
// distortions are filled when requested.
inline PowerDiagram power_diagram(const OtSites& sites, const std::vector<double>& weights,
                                  const TargetMeasure& target, bool with_centroids = false,
                                  bool with_distortion = false,
                                  const detail::NeighborCache* cache = nullptr) {
  const int n = static_cast<int>(sites.pos.size());
  detail::SiteGrid grid(sites.pos, target.region);
  grid.attach_weights(weights);
  double w_max = -kInf;
  for (double w : weights) w_max = std::max(w_max, w);
  PowerDiagram diagram;
  diagram.cells.resize(n);
  parallel_for_chunked(n, [&](int, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      PowerCell& cell = diagram.cells[i];
      cell.poly =
          detail::clip_power_cell(sites.pos, weights, static_cast<int>(i), grid, w_max, cache);
      Vec2d moment;
      detail::integrate_cell(cell.poly, target, sites.pos[i], &cell.measure,
                             with_distortion ? &cell.distortion : nullptr,
                             with_centroids ? &moment : nullptr);
      if (with_centroids) {
        if (cell.measure > 0) {
          cell.centroid = moment / cell.measure;
        } else if (cell.poly.size() >= 3) {
          cell.centroid = polygon_centroid(cell.poly);
          cell.geometric_fallback = true;
        } else {
          cell.centroid = sites.pos[i];
          cell.geometric_fallback = true;
        }
      }
    }
  });
  return diagram;
}

// Target flux captured by one site's cell.
inline double cell_target_flux(const OtSites& sites, const std::vector<double>& weights, int cell,
                               const TargetMeasure& target) {
  detail::SiteGrid grid(sites.pos, target.region);
  grid.attach_weights(weights);
  double w_max = -kInf;
  for (double w : weights) w_max = std::max(w_max, w);
  const auto poly = detail::clip_power_cell(sites.pos, weights, cell, grid, w_max);
  double measure;
  detail::integrate_cell(poly, target, sites.pos[cell], &measure, nullptr, nullptr);
  return measure;
}

// Flux-weighted centroid of one cell; strict form of the pipeline fallback.
inline Vec2d flux_weighted_centroid(const OtSites& sites, const std::vector<double>& weights,
                                    int cell, const TargetMeasure& target) {
  detail::SiteGrid grid(sites.pos, target.region);
  grid.attach_weights(weights);
  double w_max = -kInf;
  for (double w : weights) w_max = std::max(w_max, w);
  const auto poly = detail::clip_power_cell(sites.pos, weights, cell, grid, w_max);
  double measure;
  Vec2d moment;
  detail::integrate_cell(poly, target, sites.pos[cell], &measure, nullptr, &moment);
  if (measure <= 0) throw ZeroFluxCell(cell);
  return moment / measure;
}

// Convex dual of the semi-discrete transport problem. Value and gradient per
// weight; the gradient is the cell-capacity mismatch.
inline double ot_energy(const OtSites& sites, const std::vector<double>& weights,
                        const TargetMeasure& target, std::vector<double>* grad,
                        const detail::NeighborCache* cache = nullptr) {
  const int n = static_cast<int>(sites.pos.size());
  detail::SiteGrid grid(sites.pos, target.region);
  grid.attach_weights(weights);
  double w_max = -kInf;
  for (double w : weights) w_max = std::max(w_max, w);
  if (grad) grad->assign(n, 0.0);
  const int chunks = chunk_count(n, 32);
  std::vector<double> partial(chunks, 0.0);
  parallel_for_chunked(
      n,
      [&](int chunk, std::size_t b, std::size_t e) {
        double acc = 0;
        for (std::size_t i = b; i < e; ++i) {
          const auto poly =
              detail::clip_power_cell(sites.pos, weights, static_cast<int>(i), grid, w_max, cache);
          double measure, distortion;
          detail::integrate_cell(poly, target, sites.pos[i], &measure, &distortion, nullptr);
          acc += weights[i] * measure - distortion - sites.flux[i] * weights[i];
          if (grad) (*grad)[i] = measure - sites.flux[i];
        }
        partial[chunk] = acc;
      },
      32);
  double value = 0;
  for (double p : partial) value += p;
  return value;
}

struct OtOptions {
  double tolerance = 1e-7;  // absolute, on the largest capacity mismatch
  int max_iterations = 500;
  int memory = 10;
};

struct OtResult {
  std::vector<int> kept;        // original site indices with positive capacity
  std::vector<double> weights;  // per original site (dropped sites read 0), mean zero
  PowerDiagram diagram;         // final cells of the kept sites
  double max_mismatch = 0;
  int iterations = 0;
  bool converged = false;
  int fallback_centroids = 0;
};

// Solves for the weights that give every (positive-capacity) site its share
// of the target. Warm starts from `w0` (one entry per original site) when its
// size matches.
inline OtResult solve_ot(const OtSites& sites, const TargetMeasure& target, OtOptions opts = {},
                         const std::vector<double>& w0 = {}) {
  OtResult res;
  for (int i = 0; i < static_cast<int>(sites.pos.size()); ++i) {
    if (sites.flux[i] > 0) res.kept.push_back(i);
  }
  if (res.kept.empty()) throw ZeroTotalFlux("no sites with positive flux");
  double total = 0;
  for (int i : res.kept) total += sites.flux[i];

  // Coincident sites leave the split of their combined capacity undetermined
  // (and nearly-coincident ones make the dual hopelessly ill-conditioned), so
  // such groups are merged for the solve and their cell is shared afterwards.
  const double merge_eps = 1e-9 * target.region.diagonal();
  OtSites merged;
  std::vector<int> group(res.kept.size());  // kept index -> merged index
  {
    std::map<std::pair<long long, long long>, int> buckets;
    for (std::size_t k = 0; k < res.kept.size(); ++k) {
      const Vec2d p = sites.pos[res.kept[k]];
      const std::pair<long long, long long> q{
          static_cast<long long>(std::llround(p.x / merge_eps)),
          static_cast<long long>(std::llround(p.y / merge_eps))};
      const auto [it, fresh] = buckets.try_emplace(q, static_cast<int>(merged.pos.size()));
      if (fresh) {
        merged.pos.push_back(p);
        merged.flux.push_back(0.0);
      }
      group[k] = it->second;
      merged.flux[it->second] += sites.flux[res.kept[k]] / total;
    }
  }

  std::vector<double> start(merged.pos.size(), 0.0);
  if (w0.size() == sites.pos.size()) {
    for (std::size_t k = 0; k < res.kept.size(); ++k) start[group[k]] = w0[res.kept[k]];
  }
  const detail::NeighborCache cache(merged.pos, detail::SiteGrid(merged.pos, target.region), 48);
  SolverOptions sopts;
  sopts.memory = opts.memory;
  sopts.max_iterations = opts.max_iterations;
  sopts.grad_tolerance = opts.tolerance;
  auto f = [&](const std::vector<double>& w, std::vector<double>* g) {
    return ot_energy(merged, w, target, g, &cache);
  };
  SolveResult sol = minimize(f, start, sopts);
  // A stalled line search means the current descent direction hit the rounding
  // floor; a fresh start from the same point drops the stale curvature history
  // and usually frees it. Retries spend the leftover iteration budget only.
  while (sol.status == SolveStatus::StalledLineSearch &&
         sol.iterations < opts.max_iterations) {
    sopts.max_iterations = opts.max_iterations - sol.iterations;
    SolveResult retry = minimize(f, sol.x, sopts);
    retry.iterations += sol.iterations;
    retry.evaluations += sol.evaluations;
    const bool stuck = retry.iterations == sol.iterations;
    sol = std::move(retry);
    if (stuck) break;
  }
  res.iterations = sol.iterations;
  res.converged = sol.status == SolveStatus::Converged;

  double mean = 0;
  for (double w : sol.x) mean += w;
  mean /= static_cast<double>(sol.x.size());
  for (double& w : sol.x) w -= mean;

  const PowerDiagram solved =
      power_diagram(merged, sol.x, target, /*with_centroids=*/true, false, &cache);

  // expand back: members of a merged group share its weight and cell, and
  // split the captured flux in proportion to their capacities
  res.weights.assign(sites.pos.size(), 0.0);
  res.diagram.cells.resize(res.kept.size());
  for (std::size_t k = 0; k < res.kept.size(); ++k) {
    const int g = group[k];
    res.weights[res.kept[k]] = sol.x[g];
    PowerCell cell = solved.cells[g];
    const double share = sites.flux[res.kept[k]] / total / merged.flux[g];
    cell.measure *= share;
    cell.distortion *= share;
    res.diagram.cells[k] = std::move(cell);
    res.max_mismatch = std::max(
        res.max_mismatch, std::fabs(res.diagram.cells[k].measure - sites.flux[res.kept[k]] / total));
    if (res.diagram.cells[k].geometric_fallback) ++res.fallback_centroids;
  }
  return res;
}

// Partition dump: one polygon per cell shaded by its captured flux, sites as
// dots. Coordinates map straight through (image y grows downward, as in SVG).
inline void write_ot_svg(const std::string& path, const OtSites& sites,
                         const PowerDiagram& diagram, const Rect& region) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"%.9g %.9g %.9g %.9g\">\n",
                region.x0, region.y0, region.width(), region.height());
  out << buf;
  double max_measure = 0;
  for (const auto& c : diagram.cells) max_measure = std::max(max_measure, c.measure);
  const double stroke = 1e-3 * region.diagonal();
  for (const auto& c : diagram.cells) {
    if (c.poly.size() < 3) continue;
    const int lum =
        max_measure > 0 ? static_cast<int>(std::lround(255.0 * c.measure / max_measure)) : 0;
    out << "<polygon points=\"";
    for (const Vec2d& p : c.poly) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g ", p.x, p.y);
      out << buf;
    }
    std::snprintf(buf, sizeof(buf),
                  "\" fill=\"rgb(%d,%d,%d)\" stroke=\"#555\" stroke-width=\"%.9g\"/>\n", lum, lum,
                  lum, stroke);
    out << buf;
  }
  for (std::size_t i = 0; i < sites.pos.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "<circle cx=\"%.9g\" cy=\"%.9g\" r=\"%.9g\" fill=\"#d33\"/>\n",
                  sites.pos[i].x, sites.pos[i].y, 2.0 * stroke);
    out << buf;
  }
  out << "</svg>\n";
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace caustic

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "msiseg/common.hpp"
#include "msiseg/config.hpp"
#include "msiseg/linalg.hpp"
#include "msiseg/raster.hpp"

namespace msiseg {

// Cross-band co-registration for multi-lens sensors whose channels are
// captured through separate optics: exposure normalization onto a common
// 16-bit scale, corner detection and patch matching between a band and the
// reference band, robust homography estimation, and nearest-neighbor warping
// with a caller-supplied global transformation as the fallback when a scene
// offers too few reliable matches (water, repeating pavement, flat fields).

// --------------------------------------------------------------- homography

// Plane projective transform stored row-major and normalized so the
// bottom-right entry is exactly 1.
struct Homography {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Homography identity() { return Homography{}; }

  static Homography from_mat(const Mat& a) {
    if (a.rows != 3 || a.cols != 3) throw ShapeError("homography needs a 3x3 matrix");
    double scale = 0.0;
    for (double v : a.a) scale = std::max(scale, std::abs(v));
    if (!(scale > 0.0) || std::abs(a(2, 2)) < 1e-12 * scale)
      throw DegenerateError("homography cannot be normalized: corner entry is ~0");
    Homography h;
    for (int i = 0; i < 9; ++i) h.m[static_cast<size_t>(i)] = a.a[static_cast<size_t>(i)] / a(2, 2);
    const double det = h.m[0] * (h.m[4] * h.m[8] - h.m[5] * h.m[7]) -
                       h.m[1] * (h.m[3] * h.m[8] - h.m[5] * h.m[6]) +
                       h.m[2] * (h.m[3] * h.m[7] - h.m[4] * h.m[6]);
    if (std::abs(det) < 1e-12) throw DegenerateError("homography is not invertible");
    for (double v : h.m)
      if (!std::isfinite(v)) throw NumericError("homography has non-finite entries");
    return h;
  }

  Mat mat() const {
    Mat a(3, 3);
    for (int i = 0; i < 9; ++i) a.a[static_cast<size_t>(i)] = m[static_cast<size_t>(i)];
    return a;
  }

  // Projects (x, y); returns false when the point maps to infinity.
  bool project(double x, double y, double& ox, double& oy) const {
    const double w = m[6] * x + m[7] * y + m[8];
    if (std::abs(w) < 1e-12) return false;
    ox = (m[0] * x + m[1] * y + m[2]) / w;
    oy = (m[3] * x + m[4] * y + m[5]) / w;
    return true;
  }

  Homography inverse() const { return from_mat(invert3x3(mat())); }
};

inline Homography compose(const Homography& outer, const Homography& inner) {
  return Homography::from_mat(matmul(outer.mat(), inner.mat()));
}

// Plain-text storage: nine row-major numbers separated by whitespace.
inline void write_homography(const Homography& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      if (c) out << " ";
      out << format_real(h.m[static_cast<size_t>(r * 3 + c)]);
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

inline Homography read_homography(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  Mat a(3, 3);
  for (int i = 0; i < 9; ++i)
    if (!(in >> a.a[static_cast<size_t>(i)]))
      throw FormatError("homography file needs 9 numbers: " + path);
  std::string tail;
  if (in >> tail) throw FormatError("trailing content after 9 numbers: " + path);
  return Homography::from_mat(a);
}

// ----------------------------------------------------------------- exposure

// Rescales raw sensor counts onto a shared 16-bit range: divides by the
// frame's integration time, then stretches [global_min, global_max] onto
// [0, 65535] with clamping and rounding. Frames of the same scene taken at
// different exposures normalize to identical images.
inline MultibandRaster normalize_exposure(const MultibandRaster& img, double integration_time,
                                          double global_min, double global_max) {
  require(integration_time > 0.0, "normalize_exposure: integration time must be positive");
  require(global_max > global_min, "normalize_exposure: global max must exceed global min");
  img.validate();
  MultibandRaster out = img;
  const double span = global_max - global_min;
  for (float& v : out.values) {
    const double unit = (static_cast<double>(v) / integration_time - global_min) / span;
    const double clamped = std::min(1.0, std::max(0.0, unit));
    v = static_cast<float>(std::nearbyint(clamped * 65535.0));
  }
  return out;
}

// ------------------------------------------------------------------ corners

struct Corner {
  int x = 0;
  int y = 0;
  double response = 0.0;
};

struct MatchConfig {
  int max_corners = 400;    // strongest corners kept per image
  double harris_k = 0.05;   // corner response trace penalty
  double rel_floor = 0.01;  // keep responses above this fraction of the peak
  int patch = 11;           // descriptor window, odd
  double ratio = 0.8;       // best/second-best distance acceptance bound

  void validate() const {
    require(max_corners >= 1, "match: max_corners must be positive");
    require(harris_k > 0.0, "match: harris_k must be positive");
    require(rel_floor > 0.0 && rel_floor < 1.0, "match: rel_floor must lie in (0,1)");
    require(patch >= 3 && patch % 2 == 1, "match: patch must be odd and at least 3");
    require(ratio > 0.0 && ratio < 1.0, "match: ratio must lie in (0,1)");
  }
};

namespace detail {

inline void check_single_band(const MultibandRaster& r, const char* who) {
  if (r.bands != 1) throw ShapeError(std::string(who) + ": expected a single-band image");
}

inline double plane_at(const MultibandRaster& r, int y, int x) {
  return static_cast<double>(r.values[static_cast<size_t>(y) * r.width + x]);
}

}  // namespace detail

// Corner detector: gradient structure tensor summed over a 3x3 window,
// response = det - k*trace^2, strict non-maximum suppression, strongest
// corners first. Corners too close to the border for a full descriptor
// window are discarded.
inline std::vector<Corner> harris_corners(const MultibandRaster& img,
                                          const MatchConfig& cfg = {}) {
  cfg.validate();
  detail::check_single_band(img, "corners");
  const int w = img.width, h = img.height;
  const int margin = cfg.patch / 2 + 2;  // descriptor radius + tensor border
  if (w <= 2 * margin || h <= 2 * margin) return {};

  std::vector<double> ix(static_cast<size_t>(w) * h, 0.0), iy(ix), resp(ix);
  for (int y = 1; y + 1 < h; ++y)
    for (int x = 1; x + 1 < w; ++x) {
      ix[static_cast<size_t>(y) * w + x] =
          0.5 * (detail::plane_at(img, y, x + 1) - detail::plane_at(img, y, x - 1));
      iy[static_cast<size_t>(y) * w + x] =
          0.5 * (detail::plane_at(img, y + 1, x) - detail::plane_at(img, y - 1, x));
    }
  double peak = 0.0;
  for (int y = 2; y + 2 < h; ++y)
    for (int x = 2; x + 2 < w; ++x) {
      double sxx = 0.0, sxy = 0.0, syy = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double gx = ix[static_cast<size_t>(y + dy) * w + (x + dx)];
          const double gy = iy[static_cast<size_t>(y + dy) * w + (x + dx)];
          sxx += gx * gx;
          sxy += gx * gy;
          syy += gy * gy;
        }
      const double det = sxx * syy - sxy * sxy;
      const double tr = sxx + syy;
      resp[static_cast<size_t>(y) * w + x] = det - cfg.harris_k * tr * tr;
      peak = std::max(peak, resp[static_cast<size_t>(y) * w + x]);
    }
  if (!(peak > 0.0)) return {};

  std::vector<Corner> corners;
  const double floor = cfg.rel_floor * peak;
  for (int y = margin; y < h - margin; ++y)
    for (int x = margin; x < w - margin; ++x) {
      const double r = resp[static_cast<size_t>(y) * w + x];
      if (r <= floor) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1 && is_max; ++dx) {
          if (dy == 0 && dx == 0) continue;
          const double n = resp[static_cast<size_t>(y + dy) * w + (x + dx)];
          // Plateau ties break toward the pixel earliest in scan order.
          if (dy < 0 || (dy == 0 && dx < 0)) {
            if (n >= r) is_max = false;
          } else if (n > r) {
            is_max = false;
          }
        }
      if (is_max) corners.push_back({x, y, r});
    }
  std::sort(corners.begin(), corners.end(), [](const Corner& a, const Corner& b) {
    if (a.response != b.response) return a.response > b.response;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  if (static_cast<int>(corners.size()) > cfg.max_corners) corners.resize(cfg.max_corners);
  return corners;
}

struct Match {
  double ax = 0.0, ay = 0.0;  // pixel in the moving image
  double bx = 0.0, by = 0.0;  // pixel in the reference image
  double score = 0.0;         // descriptor distance of the accepted match
};

namespace detail {

// Zero-mean, unit-norm patch descriptor; empty when the patch is flat.
inline std::vector<double> patch_descriptor(const MultibandRaster& img, const Corner& c,
                                            int patch) {
  const int r = patch / 2;
  std::vector<double> d(static_cast<size_t>(patch) * patch);
  double mean = 0.0;
  size_t i = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx, ++i) {
      d[i] = plane_at(img, c.y + dy, c.x + dx);
      mean += d[i];
    }
  mean /= static_cast<double>(d.size());
  double norm = 0.0;
  for (double& v : d) {
    v -= mean;
    norm += v * v;
  }
  if (norm < 1e-12) return {};
  norm = std::sqrt(norm);
  for (double& v : d) v /= norm;
  return d;
}

}  // namespace detail

// Corner matching between two single-band images. Every corner in `a` is
// compared against every corner in `b`; a pair is kept only when its best
// descriptor distance beats the runner-up by the ratio bound, which discards
// ambiguous matches in repeating texture.
inline std::vector<Match> detect_and_match(const MultibandRaster& a, const MultibandRaster& b,
                                           const MatchConfig& cfg = {}) {
  cfg.validate();
  detail::check_single_band(a, "match");
  detail::check_single_band(b, "match");
  const std::vector<Corner> ca = harris_corners(a, cfg);
  const std::vector<Corner> cb = harris_corners(b, cfg);
  std::vector<std::vector<double>> da, db;
  std::vector<Corner> ka, kb;
  for (const Corner& c : ca) {
    auto d = detail::patch_descriptor(a, c, cfg.patch);
    if (!d.empty()) {
      da.push_back(std::move(d));
      ka.push_back(c);
    }
  }
  for (const Corner& c : cb) {
    auto d = detail::patch_descriptor(b, c, cfg.patch);
    if (!d.empty()) {
      db.push_back(std::move(d));
      kb.push_back(c);
    }
  }
  std::vector<Match> matches;
  if (da.empty() || db.size() < 2) return matches;
  for (size_t i = 0; i < da.size(); ++i) {
    double best = std::numeric_limits<double>::infinity(), second = best;
    size_t best_j = 0;
    for (size_t j = 0; j < db.size(); ++j) {
      double dist2 = 0.0;
      for (size_t k = 0; k < da[i].size(); ++k) {
        const double diff = da[i][k] - db[j][k];
        dist2 += diff * diff;
      }
      const double dist = std::sqrt(dist2);
      if (dist < best) {
        second = best;
        best = dist;
        best_j = j;
      } else if (dist < second) {
        second = dist;
      }
    }
    if (best < cfg.ratio * second)
      matches.push_back({static_cast<double>(ka[i].x), static_cast<double>(ka[i].y),
                         static_cast<double>(kb[best_j].x), static_cast<double>(kb[best_j].y),
                         best});
  }
  return matches;
}

// ------------------------------------------------- direct linear transform

namespace detail {

// Similarity that moves the points' centroid to the origin and their mean
// distance to sqrt(2), which conditions the linear system.
inline Mat hartley_normalizer(const std::vector<Match>& ms, bool reference_side) {
  double cx = 0.0, cy = 0.0;
  for (const Match& m : ms) {
    cx += reference_side ? m.bx : m.ax;
    cy += reference_side ? m.by : m.ay;
  }
  cx /= static_cast<double>(ms.size());
  cy /= static_cast<double>(ms.size());
  double mean_dist = 0.0;
  for (const Match& m : ms) {
    const double dx = (reference_side ? m.bx : m.ax) - cx;
    const double dy = (reference_side ? m.by : m.ay) - cy;
    mean_dist += std::sqrt(dx * dx + dy * dy);
  }
  mean_dist /= static_cast<double>(ms.size());
  if (mean_dist < 1e-12) throw DegenerateError("homography points are all coincident");
  const double s = std::sqrt(2.0) / mean_dist;
  Mat t(3, 3);
  t(0, 0) = s;
  t(1, 1) = s;
  t(2, 2) = 1.0;
  t(0, 2) = -s * cx;
  t(1, 2) = -s * cy;
  return t;
}

}  // namespace detail

// Least-squares homography from point correspondences (moving -> reference)
// via the normalized direct linear transform. Degenerate geometry (three
// collinear points in a minimal set, coincident points) is reported instead
// of silently returning an ill-conditioned fit.
inline Homography estimate_homography_dlt(const std::vector<Match>& matches) {
  require(matches.size() >= 4, "homography: need at least 4 correspondences");
  const Mat ta = detail::hartley_normalizer(matches, false);
  const Mat tb = detail::hartley_normalizer(matches, true);
  const size_t n = matches.size();
  std::vector<double> nx(n), ny(n), nu(n), nv(n);
  for (size_t i = 0; i < n; ++i) {
    nx[i] = ta(0, 0) * matches[i].ax + ta(0, 2);
    ny[i] = ta(1, 1) * matches[i].ay + ta(1, 2);
    nu[i] = tb(0, 0) * matches[i].bx + tb(0, 2);
    nv[i] = tb(1, 1) * matches[i].by + tb(1, 2);
  }
  // A minimal 4-point set pins the transform only when no 3 points are
  // collinear in either frame; larger sets are judged by the rank test below.
  if (n == 4) {
    const auto collinear = [](const std::vector<double>& px, const std::vector<double>& py,
                              size_t i, size_t j, size_t k) {
      const double cross = (px[j] - px[i]) * (py[k] - py[i]) -
                           (py[j] - py[i]) * (px[k] - px[i]);
      return std::abs(cross) < 1e-8;  // normalized coordinates have unit scale
    };
    for (size_t i = 0; i < 4; ++i)
      for (size_t j = i + 1; j < 4; ++j)
        for (size_t k = j + 1; k < 4; ++k)
          if (collinear(nx, ny, i, j, k) || collinear(nu, nv, i, j, k))
            throw DegenerateError("homography: three of four points are collinear");
  }
  Mat a(2 * static_cast<int>(n), 9);
  for (size_t i = 0; i < n; ++i) {
    const double x = nx[i];
    const double y = ny[i];
    const double u = nu[i];
    const double v = nv[i];
    const int r0 = 2 * static_cast<int>(i), r1 = r0 + 1;
    a(r0, 0) = -x;
    a(r0, 1) = -y;
    a(r0, 2) = -1.0;
    a(r0, 6) = u * x;
    a(r0, 7) = u * y;
    a(r0, 8) = u;
    a(r1, 3) = -x;
    a(r1, 4) = -y;
    a(r1, 5) = -1.0;
    a(r1, 6) = v * x;
    a(r1, 7) = v * y;
    a(r1, 8) = v;
  }
  const EigenResult eig = eigen_symmetric(gram(a));
  if (!(eig.values[0] > 0.0) || eig.values[7] <= eig.values[0] * 1e-10)
    throw DegenerateError("homography: degenerate correspondence geometry");
  Mat hn(3, 3);
  for (int i = 0; i < 9; ++i) hn.a[static_cast<size_t>(i)] = eig.vectors(i, 8);
  return Homography::from_mat(matmul(invert3x3(tb), matmul(hn, ta)));
}

// ------------------------------------------------------------------ ransac

struct RansacConfig {
  double threshold_px = 2.0;  // reprojection error below this counts as inlier
  int iterations = 2000;
  int min_inliers = 12;  // fewer than this means no usable model
  uint64_t seed = 0;

  void validate() const {
    require(threshold_px > 0.0, "ransac: threshold must be positive");
    require(iterations >= 1, "ransac: iterations must be positive");
    require(min_inliers >= 4, "ransac: min_inliers must be at least 4");
  }
};

struct RansacResult {
  Homography h;
  std::vector<int> inliers;  // indices into the match list, ascending
};

namespace detail {

inline std::vector<int> homography_inliers(const std::vector<Match>& matches,
                                           const Homography& h, double threshold) {
  std::vector<int> idx;
  for (size_t i = 0; i < matches.size(); ++i) {
    double px = 0.0, py = 0.0;
    if (!h.project(matches[i].ax, matches[i].ay, px, py)) continue;
    const double dx = px - matches[i].bx, dy = py - matches[i].by;
    if (std::sqrt(dx * dx + dy * dy) < threshold) idx.push_back(static_cast<int>(i));
  }
  return idx;
}

}  // namespace detail

// Robust estimation: repeatedly fits minimal 4-point models on random
// samples, keeps the one with the most inliers, and refits on that inlier
// set. Returns nothing when even the best model has too few inliers, in
// which case the caller should fall back to its global transformation.
inline std::optional<RansacResult> ransac_homography(const std::vector<Match>& matches,
                                                     const RansacConfig& cfg = {}) {
  cfg.validate();
  require(matches.size() >= 4, "ransac: need at least 4 matches");
  const int n = static_cast<int>(matches.size());
  Rng rng(hash_combine(cfg.seed, 0x72616e736163ull));
  std::vector<int> best;
  for (int it = 0; it < cfg.iterations; ++it) {
    int pick[4];
    for (int k = 0; k < 4; ++k) {
      bool fresh = true;
      do {
        pick[k] = static_cast<int>(rng.uniform_int(0, n - 1));
        fresh = true;
        for (int p = 0; p < k; ++p)
          if (pick[p] == pick[k]) fresh = false;
      } while (!fresh);
    }
    std::vector<Match> sample = {matches[static_cast<size_t>(pick[0])],
                                 matches[static_cast<size_t>(pick[1])],
                                 matches[static_cast<size_t>(pick[2])],
                                 matches[static_cast<size_t>(pick[3])]};
    Homography h;
    try {
      h = estimate_homography_dlt(sample);
    } catch (const DegenerateError&) {
      continue;  // collinear or coincident sample; try another
    }
    std::vector<int> idx = detail::homography_inliers(matches, h, cfg.threshold_px);
    if (idx.size() > best.size()) best = std::move(idx);
  }
  if (static_cast<int>(best.size()) < cfg.min_inliers) return std::nullopt;
  std::vector<Match> support;
  support.reserve(best.size());
  for (int i : best) support.push_back(matches[static_cast<size_t>(i)]);
  RansacResult out;
  out.h = estimate_homography_dlt(support);
  out.inliers = std::move(best);
  return out;
}

// -------------------------------------------------------------------- warp

// Applies `h` (image -> output frame) by inverse mapping with
// nearest-neighbor lookup. Output pixels that pull from outside the image,
// from masked-out pixels, or from the plane at infinity are marked invalid.
inline MultibandRaster warp_nearest(const MultibandRaster& img, const Homography& h,
                                    int out_width = 0, int out_height = 0) {
  img.validate();
  if (out_width <= 0) out_width = img.width;
  if (out_height <= 0) out_height = img.height;
  const Homography inv = h.inverse();
  MultibandRaster out =
      MultibandRaster::make(out_width, out_height, img.bands, img.band_centers_nm, img.gsd_cm);
  const size_t out_plane = static_cast<size_t>(out_width) * out_height;
  const size_t src_plane = static_cast<size_t>(img.width) * img.height;
  for (int y = 0; y < out_height; ++y)
    for (int x = 0; x < out_width; ++x) {
      const size_t oi = static_cast<size_t>(y) * out_width + x;
      double sx = 0.0, sy = 0.0;
      if (!inv.project(static_cast<double>(x), static_cast<double>(y), sx, sy)) {
        out.valid_mask[oi] = 0;
        continue;
      }
      const long nx = std::lround(sx), ny = std::lround(sy);
      if (nx < 0 || ny < 0 || nx >= img.width || ny >= img.height ||
          !img.valid(static_cast<int>(ny), static_cast<int>(nx))) {
        out.valid_mask[oi] = 0;
        continue;
      }
      const size_t si = static_cast<size_t>(ny) * img.width + static_cast<size_t>(nx);
      for (int b = 0; b < img.bands; ++b)
        out.values[static_cast<size_t>(b) * out_plane + oi] =
            img.values[static_cast<size_t>(b) * src_plane + si];
    }
  return out;
}

// -------------------------------------------------------- band registration

struct RegisterConfig {
  MatchConfig match;
  RansacConfig ransac;
};

struct RegisterResult {
  MultibandRaster warped;
  Homography used;
  bool fallback = true;  // true when the global transformation was applied
  int matches = 0;
  int inliers = 0;
};

// Registers one band onto the reference band's frame. A per-image homography
// is estimated from corner matches; when matching or robust fitting fails,
// the supplied global transformation is used instead.
inline RegisterResult register_band(const MultibandRaster& band, const MultibandRaster& ref,
                                    const Homography& global_h, const RegisterConfig& cfg = {}) {
  detail::check_single_band(band, "register");
  detail::check_single_band(ref, "register");
  RegisterResult out;
  out.used = global_h;
  const std::vector<Match> matches = detect_and_match(band, ref, cfg.match);
  out.matches = static_cast<int>(matches.size());
  if (matches.size() >= 4) {
    if (std::optional<RansacResult> fit = ransac_homography(matches, cfg.ransac)) {
      out.used = fit->h;
      out.fallback = false;
      out.inliers = static_cast<int>(fit->inliers.size());
    }
  }
  out.warped = warp_nearest(band, out.used, ref.width, ref.height);
  return out;
}

}  // namespace msiseg

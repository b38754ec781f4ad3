#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msiseg/common.hpp"
#include "msiseg/config.hpp"
#include "msiseg/raster.hpp"

namespace msiseg {

// Synthetic multispectral scene generator. Scenes are flat Lambertian ground
// planes described in meters: a background material plus a stack of shaped
// regions, lit by a solar illumination model. Rendering samples the scene at
// a configurable ground sample distance and produces a radiance raster plus a
// per-pixel label map. Everything is a pure function of the specs involved,
// so the same inputs always produce byte-identical outputs.

constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------- materials

// A ground material: a piecewise-linear reflectance curve over wavelength,
// the label class it paints, the strength of its albedo texture and a weight
// controlling how often random layouts place it.
struct MaterialSpec {
  std::string name;
  int class_id = 0;               // label written where this material shows, >= 1
  std::vector<double> curve_nm;   // curve anchors, strictly increasing wavelengths
  std::vector<double> curve_rho;  // reflectance at each anchor, in [0, 1]
  double texture_scale = 0.08;    // albedo multiplier spread a; texture lies in [1-a, 1+a]
  double rarity = 1.0;            // relative placement weight for random layouts

  void validate() const {
    if (name.empty()) throw ArgumentError("material: empty name");
    if (class_id < 1 || class_id > 255)
      throw ArgumentError("material '" + name + "': class_id must be in [1,255]");
    if (curve_nm.empty() || curve_nm.size() != curve_rho.size())
      throw ArgumentError("material '" + name + "': curve anchors and values must match");
    for (size_t i = 0; i < curve_nm.size(); ++i) {
      if (i > 0 && !(curve_nm[i] > curve_nm[i - 1]))
        throw ArgumentError("material '" + name + "': curve wavelengths must increase");
      if (!(curve_rho[i] >= 0.0 && curve_rho[i] <= 1.0))
        throw ArgumentError("material '" + name + "': reflectance must be in [0,1]");
    }
    if (!(texture_scale >= 0.0 && texture_scale < 1.0))
      throw ArgumentError("material '" + name + "': texture_scale must be in [0,1)");
    if (!(rarity > 0.0)) throw ArgumentError("material '" + name + "': rarity must be positive");
  }

  // Linear interpolation between anchors, clamped outside the anchor range.
  double reflectance_at(double nm) const {
    if (nm <= curve_nm.front()) return curve_rho.front();
    if (nm >= curve_nm.back()) return curve_rho.back();
    size_t hi = 1;
    while (curve_nm[hi] < nm) ++hi;
    const double t = (nm - curve_nm[hi - 1]) / (curve_nm[hi] - curve_nm[hi - 1]);
    return curve_rho[hi - 1] + t * (curve_rho[hi] - curve_rho[hi - 1]);
  }
};

// Stock palette of 18 materials covering a lakeside park: vegetation that
// separates mostly in the near infrared, two water bodies, built surfaces and
// a tail of small rare objects. Rarity weights span several decades so random
// layouts produce a strongly unbalanced class histogram.
inline std::vector<MaterialSpec> default_palette() {
  const std::vector<double> nm = {400, 550, 680, 750, 900, 1000};
  auto mat = [&](const char* name, int cls, std::vector<double> rho, double tex, double rarity) {
    MaterialSpec m;
    m.name = name;
    m.class_id = cls;
    m.curve_nm = nm;
    m.curve_rho = std::move(rho);
    m.texture_scale = tex;
    m.rarity = rarity;
    return m;
  };
  std::vector<MaterialSpec> p;
  p.push_back(mat("grass", 1, {0.040, 0.100, 0.060, 0.450, 0.520, 0.480}, 0.10, 1000.0));
  p.push_back(mat("tree", 2, {0.030, 0.070, 0.040, 0.380, 0.440, 0.400}, 0.15, 600.0));
  p.push_back(mat("low_vegetation", 3, {0.045, 0.110, 0.065, 0.300, 0.340, 0.310}, 0.12, 60.0));
  p.push_back(mat("sand", 4, {0.180, 0.280, 0.340, 0.380, 0.420, 0.440}, 0.08, 250.0));
  p.push_back(mat("water_lake", 5, {0.060, 0.050, 0.030, 0.015, 0.008, 0.005}, 0.03, 400.0));
  p.push_back(mat("water_pond", 6, {0.080, 0.070, 0.050, 0.030, 0.015, 0.010}, 0.04, 40.0));
  p.push_back(mat("asphalt", 7, {0.060, 0.070, 0.075, 0.080, 0.085, 0.090}, 0.05, 150.0));
  p.push_back(mat("building_roof", 8, {0.120, 0.130, 0.140, 0.150, 0.160, 0.170}, 0.07, 90.0));
  p.push_back(mat("road_marking", 9, {0.550, 0.600, 0.620, 0.630, 0.640, 0.640}, 0.03, 3.0));
  p.push_back(mat("vehicle", 10, {0.200, 0.220, 0.240, 0.220, 0.200, 0.190}, 0.10, 8.0));
  p.push_back(mat("person", 11, {0.150, 0.180, 0.200, 0.280, 0.300, 0.260}, 0.12, 0.4));
  p.push_back(mat("lifeguard_chair", 12, {0.450, 0.480, 0.500, 0.500, 0.490, 0.480}, 0.05, 1.2));
  p.push_back(mat("picnic_table", 13, {0.140, 0.150, 0.160, 0.220, 0.260, 0.240}, 0.08, 2.0));
  p.push_back(mat("landing_pad", 14, {0.100, 0.160, 0.550, 0.580, 0.500, 0.450}, 0.04, 5.0));
  p.push_back(mat("buoy", 15, {0.300, 0.200, 0.450, 0.400, 0.300, 0.250}, 0.05, 0.8));
  p.push_back(mat("rocks", 16, {0.100, 0.120, 0.130, 0.150, 0.170, 0.180}, 0.14, 25.0));
  p.push_back(mat("dirt_path", 17, {0.120, 0.160, 0.200, 0.240, 0.280, 0.300}, 0.09, 15.0));
  p.push_back(mat("marker_panel", 18, {0.700, 0.720, 0.730, 0.730, 0.720, 0.710}, 0.02, 0.2));
  return p;
}

// ----------------------------------------------------------------- geometry

enum class RegionShape { Rect, Ellipse, Blob };

inline const char* region_shape_name(RegionShape s) {
  switch (s) {
    case RegionShape::Rect: return "rect";
    case RegionShape::Ellipse: return "ellipse";
    case RegionShape::Blob: return "blob";
  }
  return "?";
}

inline RegionShape region_shape_from(const std::string& s, const std::string& where) {
  if (s == "rect") return RegionShape::Rect;
  if (s == "ellipse") return RegionShape::Ellipse;
  if (s == "blob") return RegionShape::Blob;
  throw FormatError(where + ": unknown region shape '" + s + "'");
}

// A painted region. Regions later in a scene's list sit on top of earlier
// ones; the label at a pixel comes from the topmost region containing its
// center, or from the background material if none does. Blobs are ellipses
// whose boundary radius is modulated by two seeded sinusoids, which keeps
// containment a closed-form test.
struct Region {
  RegionShape shape = RegionShape::Rect;
  int material = 0;        // index into the scene palette
  double cx = 0, cy = 0;   // center, meters
  double rx = 1, ry = 1;   // half extents (rect) or radii (ellipse/blob), meters
  double angle = 0;        // counter-clockwise rotation, radians
  uint64_t wobble = 0;     // blob boundary seed

  bool contains(double mx, double my) const {
    const double ox = mx - cx;
    const double oy = my - cy;
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);
    const double dx = ca * ox + sa * oy;
    const double dy = -sa * ox + ca * oy;
    switch (shape) {
      case RegionShape::Rect:
        return std::abs(dx) <= rx && std::abs(dy) <= ry;
      case RegionShape::Ellipse: {
        const double u = dx / rx;
        const double v = dy / ry;
        return u * u + v * v <= 1.0;
      }
      case RegionShape::Blob: {
        const double u = dx / rx;
        const double v = dy / ry;
        const double r2 = u * u + v * v;
        const double theta = std::atan2(v, u);
        const double a1 = 0.25 * u64_to_unit(hash_combine(wobble, 1));
        const double p1 = 2.0 * kPi * u64_to_unit(hash_combine(wobble, 2));
        const double a2 = 0.15 * u64_to_unit(hash_combine(wobble, 3));
        const double p2 = 2.0 * kPi * u64_to_unit(hash_combine(wobble, 4));
        const double m = 1.0 + a1 * std::sin(3.0 * theta + p1) + a2 * std::sin(5.0 * theta + p2);
        return r2 <= m * m;
      }
    }
    return false;
  }
};

// --------------------------------------------------------------- illumination

// Solar illumination: a sun elevation above the horizon plus a relative
// spectral irradiance curve sampled the same way material curves are.
struct Illumination {
  double solar_elevation_deg = 55.0;
  std::vector<double> anchors_nm = {400, 550, 700, 850, 1000};
  std::vector<double> irradiance = {0.92, 1.05, 1.00, 0.88, 0.74};

  // The solar zenith angle is the complement of the elevation.
  double cos_zenith() const { return std::sin(solar_elevation_deg * kPi / 180.0); }

  double irradiance_at(double nm) const {
    if (nm <= anchors_nm.front()) return irradiance.front();
    if (nm >= anchors_nm.back()) return irradiance.back();
    size_t hi = 1;
    while (anchors_nm[hi] < nm) ++hi;
    const double t = (nm - anchors_nm[hi - 1]) / (anchors_nm[hi] - anchors_nm[hi - 1]);
    return irradiance[hi - 1] + t * (irradiance[hi] - irradiance[hi - 1]);
  }

  void validate() const {
    if (!(solar_elevation_deg > 0.0 && solar_elevation_deg <= 90.0))
      throw ArgumentError("illumination: solar elevation must be in (0,90] degrees");
    if (anchors_nm.empty() || anchors_nm.size() != irradiance.size())
      throw ArgumentError("illumination: irradiance anchors and values must match");
    for (size_t i = 0; i < anchors_nm.size(); ++i) {
      if (i > 0 && !(anchors_nm[i] > anchors_nm[i - 1]))
        throw ArgumentError("illumination: anchor wavelengths must increase");
      if (!(irradiance[i] > 0.0)) throw ArgumentError("illumination: irradiance must be positive");
    }
  }
};

// -------------------------------------------------------------------- scene

struct SceneSpec {
  std::string name = "scene";
  uint64_t seed = 1;
  double extent_m = 64.0;  // square footprint side length
  std::string season = "summer";
  Illumination light;
  std::vector<MaterialSpec> palette;
  int background = 0;           // palette index painted where no region covers
  std::vector<Region> regions;  // later entries sit on top of earlier ones

  int classes() const {
    int c = 0;
    for (const auto& m : palette) c = std::max(c, m.class_id);
    return c;
  }

  void validate() const {
    if (palette.empty()) throw ArgumentError("scene '" + name + "': empty scene, no materials");
    if (!(extent_m > 0.0)) throw ArgumentError("scene '" + name + "': extent must be positive");
    std::set<std::string> names;
    for (const auto& m : palette) {
      m.validate();
      if (!names.insert(m.name).second)
        throw ArgumentError("scene '" + name + "': duplicate material '" + m.name + "'");
    }
    light.validate();
    if (background < 0 || background >= static_cast<int>(palette.size()))
      throw ArgumentError("scene '" + name + "': background material index out of range");
    for (const auto& r : regions) {
      if (r.material < 0 || r.material >= static_cast<int>(palette.size()))
        throw ArgumentError("scene '" + name + "': region material index out of range");
      if (!(r.rx > 0.0 && r.ry > 0.0))
        throw ArgumentError("scene '" + name + "': region radii must be positive");
    }
  }
};

// Sensor/sampling side of a render: ground sample distance, spectral bands,
// additive radiance noise and the tiling overlap used downstream.
struct RenderConfig {
  double gsd_m = 0.5;  // desk-scale analogues use {0.5, 0.75, 1.0}
  std::vector<double> band_centers_nm = {450, 550, 650, 720, 800, 900};
  double noise_sigma = 0.01;  // additive Gaussian radiance noise
  double overlap = 0.5;       // fraction of a patch shared by neighbouring tiles

  void validate() const {
    if (!(gsd_m > 0.0)) throw ArgumentError("render: gsd must be positive");
    if (band_centers_nm.empty()) throw ArgumentError("render: need at least one band");
    for (size_t i = 0; i < band_centers_nm.size(); ++i) {
      if (!(band_centers_nm[i] > 0.0)) throw ArgumentError("render: band centers must be positive");
      if (i > 0 && !(band_centers_nm[i] > band_centers_nm[i - 1]))
        throw ArgumentError("render: band centers must increase");
    }
    if (!(noise_sigma >= 0.0)) throw ArgumentError("render: noise sigma must be non-negative");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ArgumentError("render: overlap must be in [0,1)");
  }
};

namespace detail {

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Smooth per-material albedo texture: value noise over a 4 m lattice sampled
// at ground coordinates in meters, so the same patch of ground keeps its
// texture across ground sample distances. Returns a multiplier in [1-a, 1+a]
// whose expectation is exactly 1.
inline double texture_multiplier(uint64_t scene_seed, int class_id, double scale, double mx,
                                 double my) {
  if (scale <= 0.0) return 1.0;
  constexpr double kCellM = 4.0;
  const double gx = mx / kCellM;
  const double gy = my / kCellM;
  const auto ix = static_cast<int64_t>(std::floor(gx));
  const auto iy = static_cast<int64_t>(std::floor(gy));
  const double fx = smoothstep(gx - static_cast<double>(ix));
  const double fy = smoothstep(gy - static_cast<double>(iy));
  auto corner = [&](int64_t cx, int64_t cy) {
    uint64_t h = hash_combine(scene_seed, 0x7465787475726531ull);
    h = hash_combine(h, static_cast<uint64_t>(class_id));
    h = hash_combine(h, static_cast<uint64_t>(cx));
    h = hash_combine(h, static_cast<uint64_t>(cy));
    return u64_to_unit(h);
  };
  const double v00 = corner(ix, iy);
  const double v10 = corner(ix + 1, iy);
  const double v01 = corner(ix, iy + 1);
  const double v11 = corner(ix + 1, iy + 1);
  const double v0 = v00 + (v10 - v00) * fx;
  const double v1 = v01 + (v11 - v01) * fx;
  const double v = v0 + (v1 - v0) * fy;
  return 1.0 + scale * (2.0 * v - 1.0);
}

// Stateless unit Gaussian keyed on (seed, x, y, band) so renders never depend
// on pixel visit order.
inline double pixel_noise(uint64_t scene_seed, int x, int y, int band) {
  uint64_t h = hash_combine(scene_seed, 0x6e6f697365313233ull);
  h = hash_combine(h, static_cast<uint64_t>(x));
  h = hash_combine(h, static_cast<uint64_t>(y));
  h = hash_combine(h, static_cast<uint64_t>(band));
  double u1 = u64_to_unit(h);
  const double u2 = u64_to_unit(hash_u64(h));
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

}  // namespace detail

// Noise-free radiance of a material under the scene illumination at one band,
// before the texture multiplier (whose mean is 1).
inline double expected_radiance(const SceneSpec& scene, const MaterialSpec& m, double band_nm) {
  return scene.light.irradiance_at(band_nm) * scene.light.cos_zenith() * m.reflectance_at(band_nm);
}

struct RenderedScene {
  std::shared_ptr<MultibandRaster> image;
  std::shared_ptr<LabelMap> labels;
};

// Renders a scene to a radiance raster plus pixel labels. Pixel (x, y) samples
// the scene at the center of its footprint; its label is the class of the
// topmost region containing that point (background material otherwise), and
// its radiance per band is
//
//   irradiance(band) * cos(solar zenith) * reflectance(band) * texture + noise
//
// clamped at zero. Output dims are round(extent / gsd) per side; renders
// smaller than 16x16 pixels are rejected.
inline RenderedScene render_scene(const SceneSpec& scene, const RenderConfig& cfg) {
  scene.validate();
  cfg.validate();
  const int dim = static_cast<int>(std::llround(scene.extent_m / cfg.gsd_m));
  if (dim < 16)
    throw ArgumentError("scene '" + scene.name + "': renders below 16x16 pixels at gsd " +
                        format_real(cfg.gsd_m));
  const int bands = static_cast<int>(cfg.band_centers_nm.size());
  const double cosz = scene.light.cos_zenith();

  std::vector<std::vector<double>> base(scene.palette.size(), std::vector<double>(bands));
  for (size_t m = 0; m < scene.palette.size(); ++m)
    for (int b = 0; b < bands; ++b)
      base[m][b] = scene.light.irradiance_at(cfg.band_centers_nm[b]) * cosz *
                   scene.palette[m].reflectance_at(cfg.band_centers_nm[b]);

  auto img = std::make_shared<MultibandRaster>();
  img->width = img->height = dim;
  img->bands = bands;
  img->band_centers_nm = cfg.band_centers_nm;
  img->gsd_cm = cfg.gsd_m * 100.0;
  img->values.assign(static_cast<size_t>(dim) * dim * bands, 0.0f);
  img->valid_mask.assign(static_cast<size_t>(dim) * dim, 1);

  auto lab = std::make_shared<LabelMap>();
  lab->width = lab->height = dim;
  lab->classes = scene.classes();
  lab->labels.assign(static_cast<size_t>(dim) * dim, 0);

  for (int y = 0; y < dim; ++y) {
    for (int x = 0; x < dim; ++x) {
      const double mx = (x + 0.5) * cfg.gsd_m;
      const double my = (y + 0.5) * cfg.gsd_m;
      int mat = scene.background;
      for (auto it = scene.regions.rbegin(); it != scene.regions.rend(); ++it) {
        if (it->contains(mx, my)) {
          mat = it->material;
          break;
        }
      }
      const MaterialSpec& spec = scene.palette[mat];
      lab->at(y, x) = static_cast<uint8_t>(spec.class_id);
      const double tex =
          detail::texture_multiplier(scene.seed, spec.class_id, spec.texture_scale, mx, my);
      for (int b = 0; b < bands; ++b) {
        double v = base[mat][b] * tex;
        if (cfg.noise_sigma > 0.0)
          v += cfg.noise_sigma * detail::pixel_noise(scene.seed, x, y, b);
        img->at(b, y, x) = static_cast<float>(std::max(v, 0.0));
      }
    }
  }
  return {img, lab};
}

// ------------------------------------------------------------------- tiling

// Tile positions along one axis: a fixed-stride sweep plus a final tile
// clamped to the far edge, so every coordinate is covered by at least one
// tile. With a stride that divides the span exactly (e.g. zero overlap on
// divisible dims) the sweep is a disjoint grid and no clamped tile is added.
inline std::vector<int> tile_positions(int span, int window, int stride) {
  require(span >= window && window >= 1 && stride >= 1, "tile_positions: bad geometry");
  std::vector<int> out;
  for (int p = 0; p + window <= span; p += stride) out.push_back(p);
  if (out.back() != span - window) out.push_back(span - window);
  return out;
}

inline int overlap_stride(int patch_size, double overlap) {
  require(patch_size >= 1, "tiling: patch size must be >= 1");
  require(overlap >= 0.0 && overlap < 1.0, "tiling: overlap must be in [0,1)");
  const int stride = static_cast<int>(std::floor(patch_size * (1.0 - overlap)));
  return std::max(stride, 1);
}

// Simulated flight over a rendered scene: overlapping patch windows covering
// every pixel, each labeled with the most common class inside its window.
inline PatchSet tile_flight(std::shared_ptr<const MultibandRaster> raster,
                            std::shared_ptr<const LabelMap> labels, int patch_size,
                            double overlap) {
  require(raster != nullptr, "tile_flight: null raster");
  if (patch_size > raster->width || patch_size > raster->height)
    throw ArgumentError("tile_flight: patch size exceeds raster dims");
  if (labels) {
    require(labels->width == raster->width && labels->height == raster->height,
            "tile_flight: label dims do not match raster");
  }
  PatchSet ps;
  ps.raster = raster;
  ps.labels = labels;
  ps.patch_size = patch_size;
  ps.stride = overlap_stride(patch_size, overlap);
  const auto ys = tile_positions(raster->height, patch_size, ps.stride);
  const auto xs = tile_positions(raster->width, patch_size, ps.stride);
  for (int y : ys) {
    for (int x : xs) {
      PatchSet::Item it;
      it.x = x;
      it.y = y;
      it.majority = labels ? majority_label(*labels, x, y, patch_size) : 0;
      ps.items.push_back(it);
    }
  }
  return ps;
}

// ------------------------------------------------------------ dataset files

// Patch index: a text file tying patch windows to the raster/label files they
// come from. Paths are stored as written (conventionally relative to the
// index file's directory).
struct DatasetIndex {
  struct Entry {
    std::string raster_file;
    std::string label_file;
    int x = 0;
    int y = 0;
    int label = 0;  // window majority class
  };
  int patch_size = 0;
  int classes = 0;
  std::vector<Entry> entries;
};

inline void write_dataset_index(const std::string& path, const DatasetIndex& idx) {
  require(idx.patch_size >= 1, "dataset index: patch size must be >= 1");
  require(idx.classes >= 1, "dataset index: classes must be >= 1");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "MSIDX1\n";
  out << "patch_size: " << idx.patch_size << "\n";
  out << "classes: " << idx.classes << "\n";
  out << "entries: " << idx.entries.size() << "\n";
  for (const auto& e : idx.entries)
    out << e.raster_file << " " << e.label_file << " " << e.x << " " << e.y << " " << e.label
        << "\n";
  if (!out) throw IoError("write failed: " + path);
}

inline DatasetIndex read_dataset_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "MSIDX1")
    throw FormatError(path + ": not a patch index file");
  DatasetIndex idx;
  size_t count = 0;
  for (const char* key : {"patch_size", "classes", "entries"}) {
    if (!std::getline(in, line)) throw FormatError(path + ": truncated header");
    const size_t colon = line.find(':');
    if (colon == std::string::npos || detail::trim(line.substr(0, colon)) != key)
      throw FormatError(path + ": expected '" + key + ":' header line");
    const int64_t v = parse_int(detail::trim(line.substr(colon + 1)), path);
    if (std::string(key) == "patch_size")
      idx.patch_size = static_cast<int>(v);
    else if (std::string(key) == "classes")
      idx.classes = static_cast<int>(v);
    else
      count = static_cast<size_t>(v);
  }
  if (idx.patch_size < 1 || idx.classes < 1) throw FormatError(path + ": bad header values");
  idx.entries.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw FormatError(path + ": truncated entry list");
    std::istringstream ss(line);
    DatasetIndex::Entry e;
    if (!(ss >> e.raster_file >> e.label_file >> e.x >> e.y >> e.label))
      throw FormatError(path + ": malformed entry '" + line + "'");
    if (e.label < 0 || e.label > idx.classes)
      throw FormatError(path + ": entry label out of range");
    idx.entries.push_back(std::move(e));
  }
  return idx;
}

// ------------------------------------------------------------ random layouts

// Season presets scale the illumination: winter sun sits low and dim, summer
// high and bright.
inline Illumination season_illumination(const std::string& season) {
  Illumination light;
  double scale = 1.0;
  if (season == "summer") {
    light.solar_elevation_deg = 62.0;
    scale = 1.0;
  } else if (season == "spring") {
    light.solar_elevation_deg = 48.0;
    scale = 0.87;
  } else if (season == "autumn") {
    light.solar_elevation_deg = 40.0;
    scale = 0.80;
  } else if (season == "winter") {
    light.solar_elevation_deg = 28.0;
    scale = 0.62;
  } else {
    throw ArgumentError("unknown season '" + season + "'");
  }
  for (double& v : light.irradiance) v *= scale;
  return light;
}

// Deterministic random layout: the most common palette material becomes the
// background and regions are placed with rarity-weighted material choices,
// mixed shapes and log-uniform sizes.
inline SceneSpec random_scene(uint64_t seed, const std::vector<MaterialSpec>& palette,
                              double extent_m = 64.0, int region_count = 40,
                              const std::string& season = "summer") {
  require(!palette.empty(), "random_scene: empty palette");
  require(extent_m > 0.0, "random_scene: extent must be positive");
  require(region_count >= 0, "random_scene: negative region count");
  SceneSpec scene;
  scene.name = "scene_" + std::to_string(seed);
  scene.seed = seed;
  scene.extent_m = extent_m;
  scene.season = season;
  scene.light = season_illumination(season);
  scene.palette = palette;

  scene.background = 0;
  for (size_t i = 1; i < palette.size(); ++i)
    if (palette[i].rarity > palette[scene.background].rarity) scene.background = static_cast<int>(i);

  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& m : palette) {
    total += m.rarity;
    cumulative.push_back(total);
  }

  Rng rng(hash_combine(seed, 0x6c61796f75743031ull));
  const double lo = std::log(std::min(1.0, extent_m / 8.0));
  const double hi = std::log(extent_m / 5.0);
  for (int i = 0; i < region_count; ++i) {
    Region r;
    const double pick = rng.uniform() * total;
    r.material = static_cast<int>(std::lower_bound(cumulative.begin(), cumulative.end(), pick) -
                                  cumulative.begin());
    if (r.material >= static_cast<int>(palette.size()))
      r.material = static_cast<int>(palette.size()) - 1;
    r.shape = static_cast<RegionShape>(rng.uniform_int(0, 2));
    r.cx = rng.uniform(0.0, extent_m);
    r.cy = rng.uniform(0.0, extent_m);
    r.rx = std::exp(rng.uniform(lo, hi));
    r.ry = r.rx * rng.uniform(0.4, 1.0);
    r.angle = rng.uniform(0.0, kPi);
    r.wobble = rng.next_u64();
    scene.regions.push_back(r);
  }
  scene.validate();
  return scene;
}

// ------------------------------------------------------------- scene files

inline std::string serialize_scene_spec(const SceneSpec& scene) {
  scene.validate();
  std::ostringstream out;
  auto reals = [](const std::vector<double>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ", ";
      s += format_real(v[i]);
    }
    return s;
  };
  out << "name: " << scene.name << "\n";
  out << "seed: " << scene.seed << "\n";
  out << "extent_m: " << format_real(scene.extent_m) << "\n";
  out << "season: " << scene.season << "\n";
  out << "background: " << scene.palette[scene.background].name << "\n";
  out << "solar_elevation_deg: " << format_real(scene.light.solar_elevation_deg) << "\n";
  out << "irradiance_anchors_nm: " << reals(scene.light.anchors_nm) << "\n";
  out << "irradiance: " << reals(scene.light.irradiance) << "\n";
  for (const auto& m : scene.palette) {
    out << "material {\n";
    out << "  name: " << m.name << "\n";
    out << "  class_id: " << m.class_id << "\n";
    out << "  curve_nm: " << reals(m.curve_nm) << "\n";
    out << "  curve_rho: " << reals(m.curve_rho) << "\n";
    out << "  texture_scale: " << format_real(m.texture_scale) << "\n";
    out << "  rarity: " << format_real(m.rarity) << "\n";
    out << "}\n";
  }
  for (const auto& r : scene.regions) {
    out << "region {\n";
    out << "  shape: " << region_shape_name(r.shape) << "\n";
    out << "  material: " << scene.palette[r.material].name << "\n";
    out << "  center_m: " << format_real(r.cx) << ", " << format_real(r.cy) << "\n";
    out << "  radius_m: " << format_real(r.rx) << ", " << format_real(r.ry) << "\n";
    out << "  angle_deg: " << format_real(r.angle * 180.0 / kPi) << "\n";
    out << "  wobble: " << r.wobble << "\n";
    out << "}\n";
  }
  return out.str();
}

inline SceneSpec parse_scene_spec(const Config& cfg, const std::string& origin) {
  SceneSpec scene;
  ConfigView top(cfg, origin);
  scene.name = top.take_string("name", "scene");
  scene.seed = static_cast<uint64_t>(top.take_int("seed", 1));
  scene.extent_m = top.take_real("extent_m", 64.0);
  scene.season = top.take_string("season", "summer");
  scene.light.solar_elevation_deg = top.take_real("solar_elevation_deg", 55.0);
  if (top.has("irradiance_anchors_nm"))
    scene.light.anchors_nm =
        parse_real_list(top.take_required("irradiance_anchors_nm"), origin);
  if (top.has("irradiance"))
    scene.light.irradiance = parse_real_list(top.take_required("irradiance"), origin);
  const std::string background_name = top.take_string("background", "");
  top.finish();

  for (const auto& block : cfg.blocks) {
    if (block.name != "material") continue;
    ConfigView v(block);
    MaterialSpec m;
    m.name = v.take_required("name");
    m.class_id = static_cast<int>(v.take_int("class_id", 0));
    m.curve_nm = parse_real_list(v.take_required("curve_nm"), origin);
    m.curve_rho = parse_real_list(v.take_required("curve_rho"), origin);
    m.texture_scale = v.take_real("texture_scale", 0.08);
    m.rarity = v.take_real("rarity", 1.0);
    v.finish();
    scene.palette.push_back(std::move(m));
  }
  if (scene.palette.empty()) scene.palette = default_palette();

  auto material_index = [&](const std::string& name) {
    for (size_t i = 0; i < scene.palette.size(); ++i)
      if (scene.palette[i].name == name) return static_cast<int>(i);
    throw FormatError(origin + ": unknown material '" + name + "'");
  };
  if (!background_name.empty()) scene.background = material_index(background_name);

  for (const auto& block : cfg.blocks) {
    if (block.name == "material") continue;
    if (block.name != "region")
      throw FormatError(origin + ": unknown block '" + block.name + "'");
    ConfigView v(block);
    Region r;
    r.shape = region_shape_from(v.take_required("shape"), origin);
    r.material = material_index(v.take_required("material"));
    const auto center = parse_real_list(v.take_required("center_m"), origin);
    const auto radius = parse_real_list(v.take_required("radius_m"), origin);
    if (center.size() != 2 || radius.size() != 2)
      throw FormatError(origin + ": center_m and radius_m need exactly two values");
    r.cx = center[0];
    r.cy = center[1];
    r.rx = radius[0];
    r.ry = radius[1];
    r.angle = v.take_real("angle_deg", 0.0) * kPi / 180.0;
    r.wobble = static_cast<uint64_t>(v.take_int("wobble", 0));
    v.finish();
    scene.regions.push_back(r);
  }
  scene.validate();
  return scene;
}

inline SceneSpec load_scene_spec(const std::string& path) {
  return parse_scene_spec(load_config_file(path), path);
}

inline void save_scene_spec(const SceneSpec& scene, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << serialize_scene_spec(scene);
  if (!out) throw IoError("write failed: " + path);
}

// ------------------------------------------------------- pretraining builds

struct PretrainBuildResult {
  DatasetIndex train;
  DatasetIndex val;
  std::vector<int64_t> train_histogram;  // per class, slot 0 counts unlabeled patches
  std::vector<std::string> warnings;     // classes absent from the training patches
  std::vector<std::string> files_written;
};

// Renders every scene of both splits under one sensor config, tiles each
// render into labeled patches and writes rasters, labels and per-split patch
// index files into out_dir. Train and validation scenes must use disjoint
// seeds so the splits can never share content. Classes absent from the
// training patches produce warnings, not errors.
inline PretrainBuildResult build_pretrain_dataset(const std::vector<SceneSpec>& train_scenes,
                                                  const std::vector<SceneSpec>& val_scenes,
                                                  const RenderConfig& cfg, int patch_size,
                                                  const std::string& out_dir) {
  require(!train_scenes.empty(), "pretrain build: no training scenes");
  require(!val_scenes.empty(), "pretrain build: no validation scenes");
  cfg.validate();
  require(patch_size >= 1, "pretrain build: patch size must be >= 1");
  std::set<uint64_t> train_seeds;
  for (const auto& s : train_scenes) train_seeds.insert(s.seed);
  for (const auto& s : val_scenes) {
    if (train_seeds.count(s.seed))
      throw ArgumentError("pretrain build: scene seed " + std::to_string(s.seed) +
                          " appears in both splits");
  }

  int classes = 0;
  for (const auto& s : train_scenes) classes = std::max(classes, s.classes());
  for (const auto& s : val_scenes) classes = std::max(classes, s.classes());

  std::filesystem::create_directories(out_dir);
  PretrainBuildResult result;
  result.train.patch_size = result.val.patch_size = patch_size;
  result.train.classes = result.val.classes = classes;
  result.train_histogram.assign(static_cast<size_t>(classes) + 1, 0);

  auto build_split = [&](const std::vector<SceneSpec>& scenes, const char* split,
                         DatasetIndex& idx, bool count) {
    for (size_t i = 0; i < scenes.size(); ++i) {
      const RenderedScene rendered = render_scene(scenes[i], cfg);
      char stem[64];
      std::snprintf(stem, sizeof(stem), "%s_%03zu", split, i);
      const std::string raster_file = std::string(stem) + ".mbr";
      const std::string label_file = std::string(stem) + ".lbl";
      write_raster(*rendered.image, (std::filesystem::path(out_dir) / raster_file).string());
      write_labels(*rendered.labels, (std::filesystem::path(out_dir) / label_file).string());
      result.files_written.push_back(raster_file);
      result.files_written.push_back(label_file);
      const PatchSet ps = tile_flight(rendered.image, rendered.labels, patch_size, cfg.overlap);
      for (const auto& item : ps.items) {
        DatasetIndex::Entry e;
        e.raster_file = raster_file;
        e.label_file = label_file;
        e.x = item.x;
        e.y = item.y;
        e.label = item.majority;
        idx.entries.push_back(std::move(e));
        if (count) ++result.train_histogram[static_cast<size_t>(item.majority)];
      }
    }
  };
  build_split(train_scenes, "train", result.train, true);
  build_split(val_scenes, "val", result.val, false);

  write_dataset_index((std::filesystem::path(out_dir) / "train.idx").string(), result.train);
  write_dataset_index((std::filesystem::path(out_dir) / "val.idx").string(), result.val);
  result.files_written.push_back("train.idx");
  result.files_written.push_back("val.idx");

  for (int c = 1; c <= classes; ++c) {
    if (result.train_histogram[static_cast<size_t>(c)] == 0)
      result.warnings.push_back("class " + std::to_string(c) +
                                " has no training patches; its loss weight will be zero");
  }
  return result;
}

}  // namespace msiseg

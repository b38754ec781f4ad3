#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "msiseg/common.hpp"
#include "msiseg/config.hpp"

namespace msiseg {

static_assert(std::endian::native == std::endian::little,
              "MBR1/LBL1 payloads are little-endian; big-endian hosts are unsupported");

// H x W x C calibrated image. Values are band-sequential row-major:
// values[(b*height + y)*width + x]. Pixels with valid_mask false are excluded
// from statistics, training and scoring.
struct MultibandRaster {
  int width = 0;
  int height = 0;
  int bands = 0;
  std::vector<double> band_centers_nm;
  double gsd_cm = 1.0;
  std::vector<float> values;
  std::vector<uint8_t> valid_mask;  // per pixel, 0/1

  size_t pixel_count() const { return static_cast<size_t>(width) * height; }
  size_t value_count() const { return pixel_count() * bands; }

  float at(int band, int y, int x) const {
    return values[(static_cast<size_t>(band) * height + y) * width + x];
  }
  float& at(int band, int y, int x) {
    return values[(static_cast<size_t>(band) * height + y) * width + x];
  }
  bool valid(int y, int x) const { return valid_mask[static_cast<size_t>(y) * width + x] != 0; }

  void validate() const {
    if (width <= 0 || height <= 0 || bands < 1) throw FormatError("raster dims must be positive");
    if (gsd_cm <= 0) throw FormatError("gsd must be > 0");
    if (band_centers_nm.size() != static_cast<size_t>(bands))
      throw FormatError("band_centers count does not match bands");
    for (size_t i = 1; i < band_centers_nm.size(); ++i)
      if (!(band_centers_nm[i] > band_centers_nm[i - 1]))
        throw FormatError("band centers must be strictly increasing");
    if (values.size() != value_count()) throw FormatError("values length != width*height*bands");
    if (valid_mask.size() != pixel_count()) throw FormatError("mask length != width*height");
    for (float v : values)
      if (!(v >= 0.0f) || !std::isfinite(v)) throw FormatError("raster values must be finite and non-negative");
  }

  static MultibandRaster make(int width, int height, int bands,
                              std::vector<double> band_centers, double gsd_cm,
                              float fill = 0.0f) {
    MultibandRaster r;
    r.width = width;
    r.height = height;
    r.bands = bands;
    r.band_centers_nm = std::move(band_centers);
    r.gsd_cm = gsd_cm;
    r.values.assign(static_cast<size_t>(width) * height * bands, fill);
    r.valid_mask.assign(static_cast<size_t>(width) * height, 1);
    return r;
  }
};

// Per-pixel class indices in [0, classes]; 0 is the background sentinel.
struct LabelMap {
  int width = 0;
  int height = 0;
  int classes = 0;  // number of foreground classes N; labels range over [0, N]
  std::vector<uint8_t> labels;

  uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
  uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y) * width + x]; }

  void validate() const {
    if (width <= 0 || height <= 0) throw FormatError("label map dims must be positive");
    if (classes < 1 || classes > 255) throw FormatError("classes must be in [1,255]");
    if (labels.size() != static_cast<size_t>(width) * height)
      throw FormatError("labels length != width*height");
    for (uint8_t v : labels)
      if (v > classes) throw FormatError("label value exceeds declared class count");
  }

  static LabelMap make(int width, int height, int classes, uint8_t fill = 0) {
    LabelMap m;
    m.width = width;
    m.height = height;
    m.classes = classes;
    m.labels.assign(static_cast<size_t>(width) * height, fill);
    return m;
  }
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Patch windows into a source raster/label pair. Windows are referenced by
// top-left corner; pixel data stays in the source raster.
struct PatchSet {
  std::shared_ptr<const MultibandRaster> raster;
  std::shared_ptr<const LabelMap> labels;  // may be null
  int patch_size = 0;
  int stride = 0;
  struct Item {
    int x = 0;
    int y = 0;
    int majority = 0;  // majority non-background class of the label window (0 if unlabeled)
  };
  std::vector<Item> items;

  size_t size() const { return items.size(); }
};

namespace detail {

struct HeaderReader {
  std::istream& in;
  std::string path;
  std::map<std::string, std::string> fields;

  void read_until_blank() {
    std::string line;
    bool first = true;
    while (true) {
      if (!std::getline(in, line)) throw FormatError(path + ": unexpected end of header");
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) break;
      size_t colon = line.find(':');
      if (colon == std::string::npos) throw FormatError(path + ": bad header line '" + line + "'");
      std::string key = trim(line.substr(0, colon));
      std::string value = trim(line.substr(colon + 1));
      if (first && key != "magic") throw FormatError(path + ": first header line must be magic");
      if (fields.count(key)) throw FormatError(path + ": duplicate header key '" + key + "'");
      fields[key] = value;
      first = false;
    }
  }

  std::string get(const std::string& key) {
    auto it = fields.find(key);
    if (it == fields.end()) throw FormatError(path + ": missing header key '" + key + "'");
    return it->second;
  }
};

inline void write_bytes(std::ostream& out, const void* p, size_t n, const std::string& path) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed: " + path);
}

inline void read_bytes(std::istream& in, void* p, size_t n, const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) throw IoError("truncated payload: " + path);
}

}  // namespace detail

enum class RasterDtype { F32, U16 };

// "MBR1" multiband raster container: UTF-8 header, blank line, band-sequential
// row-major little-endian payload, then width*height mask bytes.
inline void write_raster(const MultibandRaster& r, const std::string& path,
                         RasterDtype dtype = RasterDtype::F32) {
  r.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  std::ostringstream hdr;
  hdr << "magic: MBR1\n";
  hdr << "width: " << r.width << "\n";
  hdr << "height: " << r.height << "\n";
  hdr << "bands: " << r.bands << "\n";
  hdr << "dtype: " << (dtype == RasterDtype::F32 ? "f32" : "u16") << "\n";
  hdr << "gsd_cm: " << format_real(r.gsd_cm) << "\n";
  hdr << "band_centers_nm: ";
  for (int b = 0; b < r.bands; ++b) hdr << (b ? "," : "") << format_real(r.band_centers_nm[b]);
  hdr << "\n\n";
  const std::string h = hdr.str();
  detail::write_bytes(out, h.data(), h.size(), path);
  if (dtype == RasterDtype::F32) {
    detail::write_bytes(out, r.values.data(), r.values.size() * sizeof(float), path);
  } else {
    std::vector<uint16_t> q(r.values.size());
    for (size_t i = 0; i < r.values.size(); ++i) {
      const float v = r.values[i];
      q[i] = static_cast<uint16_t>(std::min(65535.0f, std::max(0.0f, std::round(v))));
    }
    detail::write_bytes(out, q.data(), q.size() * sizeof(uint16_t), path);
  }
  detail::write_bytes(out, r.valid_mask.data(), r.valid_mask.size(), path);
}

inline MultibandRaster read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  detail::HeaderReader hdr{in, path, {}};
  hdr.read_until_blank();
  if (hdr.get("magic") != "MBR1") throw FormatError(path + ": bad magic (expected MBR1)");
  MultibandRaster r;
  r.width = static_cast<int>(parse_int(hdr.get("width"), "width"));
  r.height = static_cast<int>(parse_int(hdr.get("height"), "height"));
  r.bands = static_cast<int>(parse_int(hdr.get("bands"), "bands"));
  r.gsd_cm = parse_real(hdr.get("gsd_cm"), "gsd_cm");
  r.band_centers_nm = parse_real_list(hdr.get("band_centers_nm"), "band_centers_nm");
  const std::string dt = hdr.get("dtype");
  if (dt != "f32" && dt != "u16") throw FormatError(path + ": bad dtype '" + dt + "'");
  if (hdr.fields.size() != 7) throw FormatError(path + ": unexpected header keys");
  if (r.width <= 0 || r.height <= 0 || r.bands < 1) throw FormatError(path + ": bad dims");
  if (r.band_centers_nm.size() != static_cast<size_t>(r.bands))
    throw FormatError(path + ": band_centers count does not match bands");
  const size_t n = static_cast<size_t>(r.width) * r.height * r.bands;
  r.values.resize(n);
  if (dt == "f32") {
    detail::read_bytes(in, r.values.data(), n * sizeof(float), path);
  } else {
    std::vector<uint16_t> q(n);
    detail::read_bytes(in, q.data(), n * sizeof(uint16_t), path);
    for (size_t i = 0; i < n; ++i) r.values[i] = static_cast<float>(q[i]);
  }
  r.valid_mask.resize(static_cast<size_t>(r.width) * r.height);
  detail::read_bytes(in, r.valid_mask.data(), r.valid_mask.size(), path);
  for (uint8_t m : r.valid_mask)
    if (m > 1) throw FormatError(path + ": mask bytes must be 0/1");
  r.validate();
  return r;
}

// "LBL1" label map container, one byte per pixel.
inline void write_labels(const LabelMap& m, const std::string& path) {
  m.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for write: " + path);
  std::ostringstream hdr;
  hdr << "magic: LBL1\n";
  hdr << "width: " << m.width << "\n";
  hdr << "height: " << m.height << "\n";
  hdr << "classes: " << m.classes << "\n\n";
  const std::string h = hdr.str();
  detail::write_bytes(out, h.data(), h.size(), path);
  detail::write_bytes(out, m.labels.data(), m.labels.size(), path);
}

inline LabelMap read_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  detail::HeaderReader hdr{in, path, {}};
  hdr.read_until_blank();
  if (hdr.get("magic") != "LBL1") throw FormatError(path + ": bad magic (expected LBL1)");
  LabelMap m;
  m.width = static_cast<int>(parse_int(hdr.get("width"), "width"));
  m.height = static_cast<int>(parse_int(hdr.get("height"), "height"));
  m.classes = static_cast<int>(parse_int(hdr.get("classes"), "classes"));
  if (hdr.fields.size() != 4) throw FormatError(path + ": unexpected header keys");
  if (m.width <= 0 || m.height <= 0) throw FormatError(path + ": bad dims");
  m.labels.resize(static_cast<size_t>(m.width) * m.height);
  detail::read_bytes(in, m.labels.data(), m.labels.size(), path);
  m.validate();
  return m;
}

// Most frequent non-background class in the window; ties break to the lowest
// class index; an all-background window stays background.
inline int majority_label(const LabelMap& labels, int x0, int y0, int size) {
  require(size > 0, "majority_label: empty window");
  require(x0 >= 0 && y0 >= 0 && x0 + size <= labels.width && y0 + size <= labels.height,
          "majority_label: window out of bounds");
  std::vector<int64_t> hist(static_cast<size_t>(labels.classes) + 1, 0);
  for (int y = y0; y < y0 + size; ++y)
    for (int x = x0; x < x0 + size; ++x) ++hist[labels.at(y, x)];
  int best = 0;
  int64_t best_count = 0;
  for (int c = 1; c <= labels.classes; ++c) {
    if (hist[c] > best_count) {
      best = c;
      best_count = hist[c];
    }
  }
  return best;
}

// Row-major sliding-window extraction; windows keeping less than
// min_valid_fraction valid pixels are dropped.
inline PatchSet extract_patches(std::shared_ptr<const MultibandRaster> raster,
                                std::shared_ptr<const LabelMap> labels, int size, int stride,
                                double min_valid_fraction = 0.5) {
  require(raster != nullptr, "extract_patches: null raster");
  require(size >= 1 && stride >= 1, "extract_patches: size and stride must be >= 1");
  if (size > raster->width || size > raster->height)
    throw ArgumentError("extract_patches: patch size exceeds raster dims");
  if (labels) {
    require(labels->width == raster->width && labels->height == raster->height,
            "extract_patches: label dims do not match raster");
  }
  PatchSet ps;
  ps.raster = raster;
  ps.labels = labels;
  ps.patch_size = size;
  ps.stride = stride;
  const double need = min_valid_fraction * size * size;
  for (int y = 0; y + size <= raster->height; y += stride) {
    for (int x = 0; x + size <= raster->width; x += stride) {
      int64_t valid = 0;
      for (int yy = y; yy < y + size; ++yy)
        for (int xx = x; xx < x + size; ++xx) valid += raster->valid(yy, xx) ? 1 : 0;
      if (static_cast<double>(valid) < need) continue;
      PatchSet::Item it;
      it.x = x;
      it.y = y;
      it.majority = labels ? majority_label(*labels, x, y, size) : 0;
      ps.items.push_back(it);
    }
  }
  return ps;
}

// Per-band mean/std over valid pixels of all patch windows (population
// variance, two-pass). Degenerate bands are rejected.
inline ChannelStats compute_channel_stats(const PatchSet& ps) {
  require(ps.raster != nullptr, "compute_channel_stats: empty patch set");
  const MultibandRaster& r = *ps.raster;
  const int B = r.bands;
  std::vector<double> sum(B, 0.0);
  int64_t count = 0;
  for (const auto& it : ps.items) {
    for (int y = it.y; y < it.y + ps.patch_size; ++y) {
      for (int x = it.x; x < it.x + ps.patch_size; ++x) {
        if (!r.valid(y, x)) continue;
        ++count;
        for (int b = 0; b < B; ++b) sum[b] += r.at(b, y, x);
      }
    }
  }
  if (count < 2) throw DegenerateError("compute_channel_stats: need at least 2 valid pixels");
  ChannelStats st;
  st.mean.resize(B);
  st.stddev.resize(B);
  for (int b = 0; b < B; ++b) st.mean[b] = sum[b] / static_cast<double>(count);
  std::vector<double> ss(B, 0.0);
  for (const auto& it : ps.items) {
    for (int y = it.y; y < it.y + ps.patch_size; ++y) {
      for (int x = it.x; x < it.x + ps.patch_size; ++x) {
        if (!r.valid(y, x)) continue;
        for (int b = 0; b < B; ++b) {
          const double d = r.at(b, y, x) - st.mean[b];
          ss[b] += d * d;
        }
      }
    }
  }
  for (int b = 0; b < B; ++b) {
    const double var = ss[b] / static_cast<double>(count);
    if (var <= 0.0)
      throw DegenerateError("compute_channel_stats: band " + std::to_string(b) + " is constant");
    st.stddev[b] = std::sqrt(var);
  }
  return st;
}

}  // namespace msiseg

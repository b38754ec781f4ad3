#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "msiseg/common.hpp"
#include "msiseg/raster.hpp"

namespace msiseg {

// Evaluation metrics for segmentation maps. Class 0 is the background /
// unlabeled sentinel everywhere: background truth pixels never enter the
// confusion matrix and the background never receives loss weight.

// ----------------------------------------------------------- class weights

// Loss weights that counter class imbalance: each class is weighted by the
// log of how under-represented it is,
//
//   w_i = mu * log10(total / h_i)
//
// where h_i is the pixel (or patch) count of class i. Classes that never
// occur get weight zero and a warning instead of an error, and the
// background slot is always zero.
struct ClassWeights {
  double mu = 0.15;
  std::vector<int64_t> counts;   // size N+1, slot 0 = background (ignored)
  std::vector<double> weights;   // size N+1, slot 0 = 0
  std::vector<std::string> warnings;

  double weight_for(int cls) const { return weights[static_cast<size_t>(cls)]; }
};

inline ClassWeights class_weights(const std::vector<int64_t>& counts, double mu) {
  require(counts.size() >= 2, "class_weights: need at least one foreground class");
  require(mu > 0.0, "class_weights: mu must be positive");
  ClassWeights out;
  out.mu = mu;
  out.counts = counts;
  out.weights.assign(counts.size(), 0.0);
  double total = 0.0;
  for (size_t i = 1; i < counts.size(); ++i) {
    require(counts[i] >= 0, "class_weights: negative count");
    total += static_cast<double>(counts[i]);
  }
  if (total <= 0.0) throw ArgumentError("class_weights: all class counts are zero");
  for (size_t i = 1; i < counts.size(); ++i) {
    if (counts[i] == 0) {
      out.warnings.push_back("class " + std::to_string(i) +
                             " has no samples; its loss weight is zero");
      continue;
    }
    out.weights[i] = mu * std::log10(total / static_cast<double>(counts[i]));
  }
  return out;
}

// -------------------------------------------------------- confusion matrix

// (N+1) x (N+1) integer counts with rows = truth and columns = prediction.
// Row 0 stays empty (background truth is excluded before counting); column 0
// collects labeled pixels that were predicted as background, which counts as
// an error like any other off-diagonal cell.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<int64_t> counts;

  explicit ConfusionMatrix(int n = 0) { reset(n); }

  void reset(int n) {
    require(n >= 0, "confusion: negative class count");
    classes = n;
    counts.assign(static_cast<size_t>(n + 1) * (n + 1), 0);
  }

  int64_t at(int truth, int pred) const {
    return counts[static_cast<size_t>(truth) * (classes + 1) + pred];
  }
  int64_t& at(int truth, int pred) {
    return counts[static_cast<size_t>(truth) * (classes + 1) + pred];
  }

  void add(int truth, int pred) {
    require(truth >= 1 && truth <= classes, "confusion: truth class out of range");
    require(pred >= 0 && pred <= classes, "confusion: predicted class out of range");
    ++at(truth, pred);
  }

  // Merge another matrix of the same shape; counting is order-independent.
  void merge(const ConfusionMatrix& other) {
    require(other.classes == classes, "confusion: class count mismatch in merge");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }

  int64_t row_sum(int truth) const {
    int64_t s = 0;
    for (int p = 0; p <= classes; ++p) s += at(truth, p);
    return s;
  }

  int64_t total() const {
    int64_t s = 0;
    for (int64_t v : counts) s += v;
    return s;
  }
};

struct EvalResult {
  ConfusionMatrix confusion;
  std::vector<double> per_class;  // size N+1; slot 0 and absent classes hold 0
  std::vector<uint8_t> present;   // size N+1; 1 where the truth has pixels
  double average_accuracy = 0.0;  // mean per-class accuracy over present classes
  double overall_accuracy = 0.0;  // correct / labeled
  int64_t labeled = 0;
};

inline EvalResult summarize_confusion(const ConfusionMatrix& cm) {
  EvalResult r;
  r.confusion = cm;
  const int n = cm.classes;
  r.per_class.assign(static_cast<size_t>(n) + 1, 0.0);
  r.present.assign(static_cast<size_t>(n) + 1, 0);
  double acc_sum = 0.0;
  int present_count = 0;
  int64_t correct = 0;
  for (int c = 1; c <= n; ++c) {
    const int64_t row = cm.row_sum(c);
    if (row == 0) continue;
    r.present[static_cast<size_t>(c)] = 1;
    r.per_class[static_cast<size_t>(c)] =
        static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
    acc_sum += r.per_class[static_cast<size_t>(c)];
    ++present_count;
    correct += cm.at(c, c);
    r.labeled += row;
  }
  if (r.labeled == 0) throw DegenerateError("evaluate: no labeled pixels");
  r.average_accuracy = acc_sum / present_count;
  r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(r.labeled);
  return r;
}

// Compares a predicted label map against ground truth. Pixels whose truth is
// background (0) or whose mask entry is 0 are excluded; the average accuracy
// runs over classes actually present in the truth.
inline EvalResult evaluate(const LabelMap& pred, const LabelMap& truth,
                           const std::vector<uint8_t>* valid_mask = nullptr) {
  if (pred.width != truth.width || pred.height != truth.height)
    throw ShapeError("evaluate: prediction and truth dims differ");
  if (valid_mask &&
      valid_mask->size() != static_cast<size_t>(truth.width) * truth.height)
    throw ShapeError("evaluate: valid mask size mismatch");
  const int n = std::max(pred.classes, truth.classes);
  ConfusionMatrix cm(n);
  for (int y = 0; y < truth.height; ++y) {
    for (int x = 0; x < truth.width; ++x) {
      const int t = truth.at(y, x);
      if (t == 0) continue;
      if (valid_mask && !(*valid_mask)[static_cast<size_t>(y) * truth.width + x]) continue;
      cm.add(t, pred.at(y, x));
    }
  }
  return summarize_confusion(cm);
}

// ------------------------------------------------------------- text output

inline void write_confusion_csv(const ConfusionMatrix& cm, const std::string& path,
                                bool row_normalized = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "truth";
  for (int p = 0; p <= cm.classes; ++p) out << ",pred_" << p;
  out << "\n";
  for (int t = 0; t <= cm.classes; ++t) {
    out << t;
    const int64_t row = cm.row_sum(t);
    for (int p = 0; p <= cm.classes; ++p) {
      if (row_normalized)
        out << "," << format_real(row > 0 ? static_cast<double>(cm.at(t, p)) / row : 0.0);
      else
        out << "," << cm.at(t, p);
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

inline std::string format_metrics_table(const EvalResult& r,
                                        const std::vector<std::string>& class_names = {}) {
  std::ostringstream out;
  char line[128];
  out << "class                 accuracy   support\n";
  for (int c = 1; c <= r.confusion.classes; ++c) {
    std::string name = c < static_cast<int>(class_names.size()) ? class_names[c]
                                                                : "class_" + std::to_string(c);
    if (!r.present[static_cast<size_t>(c)]) {
      std::snprintf(line, sizeof(line), "%-20s    absent         0\n", name.c_str());
    } else {
      std::snprintf(line, sizeof(line), "%-20s  %7.2f%%  %8lld\n", name.c_str(),
                    100.0 * r.per_class[static_cast<size_t>(c)],
                    static_cast<long long>(r.confusion.row_sum(c)));
    }
    out << line;
  }
  std::snprintf(line, sizeof(line), "average accuracy      %7.2f%%\noverall accuracy      %7.2f%%\n",
                100.0 * r.average_accuracy, 100.0 * r.overall_accuracy);
  out << line;
  return out.str();
}

// Machine-readable key-value report (parses back with the config reader).
inline void write_metrics_report(const EvalResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "average_accuracy: " << format_real(r.average_accuracy) << "\n";
  out << "overall_accuracy: " << format_real(r.overall_accuracy) << "\n";
  out << "labeled_pixels: " << r.labeled << "\n";
  for (int c = 1; c <= r.confusion.classes; ++c) {
    out << "class_" << c << "_accuracy: "
        << format_real(r.per_class[static_cast<size_t>(c)]) << "\n";
    out << "class_" << c << "_support: " << r.confusion.row_sum(c) << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

// ------------------------------------------------------------ band subsets

// Named channel subsets for the six-band sensor layout
// {blue, green, red, red-edge, nir-1, nir-2}: visible-only, infrared-only,
// color-infrared, the first four bands and the full set.
struct BandSubset {
  std::string name;
  std::vector<int> bands;
};

inline std::vector<BandSubset> standard_band_subsets() {
  return {
      {"rgb", {0, 1, 2}},
      {"nir", {3, 4, 5}},
      {"cir", {1, 2, 3}},
      {"vnir4", {0, 1, 2, 3}},
      {"all6", {0, 1, 2, 3, 4, 5}},
  };
}

// New raster holding only the selected bands (strictly increasing indices).
inline MultibandRaster select_bands(const MultibandRaster& r, const std::vector<int>& bands) {
  if (bands.empty()) throw ArgumentError("select_bands: empty band subset");
  for (size_t i = 0; i < bands.size(); ++i) {
    if (bands[i] < 0 || bands[i] >= r.bands)
      throw ArgumentError("select_bands: band index out of range");
    if (i > 0 && bands[i] <= bands[i - 1])
      throw ArgumentError("select_bands: band indices must strictly increase");
  }
  MultibandRaster out;
  out.width = r.width;
  out.height = r.height;
  out.bands = static_cast<int>(bands.size());
  out.gsd_cm = r.gsd_cm;
  out.valid_mask = r.valid_mask;
  out.values.resize(out.value_count());
  for (size_t i = 0; i < bands.size(); ++i) {
    out.band_centers_nm.push_back(r.band_centers_nm[static_cast<size_t>(bands[i])]);
    const size_t plane = static_cast<size_t>(r.width) * r.height;
    std::copy(r.values.begin() + bands[i] * plane, r.values.begin() + (bands[i] + 1) * plane,
              out.values.begin() + i * plane);
  }
  return out;
}

}  // namespace msiseg

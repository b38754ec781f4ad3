#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "msiseg/baselines.hpp"
#include "msiseg/metrics.hpp"

namespace msiseg {

// Channel-ablation study: train one linear machine per named band subset and
// compare held-out accuracy across subsets. Because every run shares the
// sample stride, machine settings and seed, the accuracy differences isolate
// what the dropped channels contributed.

struct AblationRow {
  std::string name;
  std::vector<int> bands;
  double average_accuracy = 0.0;
  double overall_accuracy = 0.0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
};

inline AblationTable band_ablation(const MultibandRaster& train_image,
                                   const LabelMap& train_labels,
                                   const MultibandRaster& test_image,
                                   const LabelMap& test_labels,
                                   const std::vector<BandSubset>& subsets,
                                   const SvmSpec& spec, int stride = 1) {
  require(!subsets.empty(), "ablate: need at least one band subset");
  if (train_image.bands != test_image.bands)
    throw ShapeError("ablate: train and test band counts differ");
  spec.validate();
  AblationTable table;
  for (const BandSubset& subset : subsets) {
    const MultibandRaster train_view = select_bands(train_image, subset.bands);
    const MultibandRaster test_view = select_bands(test_image, subset.bands);
    const SampleSet train = pixel_samples(train_view, train_labels, stride);
    const LinearSvm machine = svm_fit(train, spec);
    const LabelMap pred = svm_predict_raster(machine, test_view);
    const EvalResult r = evaluate(pred, test_labels, &test_view.valid_mask);
    table.rows.push_back({subset.name, subset.bands, r.average_accuracy, r.overall_accuracy});
  }
  return table;
}

inline std::string format_ablation_table(const AblationTable& table) {
  std::ostringstream out;
  char line[128];
  out << "subset        bands             avg acc    overall\n";
  for (const AblationRow& row : table.rows) {
    std::string bands;
    for (size_t i = 0; i < row.bands.size(); ++i) {
      if (i) bands += ",";
      bands += std::to_string(row.bands[i]);
    }
    std::snprintf(line, sizeof(line), "%-12s  %-15s  %7.2f%%  %7.2f%%\n", row.name.c_str(),
                  bands.c_str(), 100.0 * row.average_accuracy, 100.0 * row.overall_accuracy);
    out << line;
  }
  return out.str();
}

// CSV companion: subset name, band list (space separated), AA, OA.
inline void write_ablation_csv(const AblationTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "subset,bands,average_accuracy,overall_accuracy\n";
  for (const AblationRow& row : table.rows) {
    out << row.name << ",";
    for (size_t i = 0; i < row.bands.size(); ++i) {
      if (i) out << " ";
      out << row.bands[i];
    }
    out << "," << format_real(row.average_accuracy) << "," << format_real(row.overall_accuracy)
        << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace msiseg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "msiseg/common.hpp"
#include "msiseg/graph.hpp"
#include "msiseg/layers.hpp"
#include "msiseg/linalg.hpp"
#include "msiseg/metrics.hpp"
#include "msiseg/models.hpp"
#include "msiseg/optim.hpp"
#include "msiseg/raster.hpp"

// Classical per-pixel and spatial-spectral classifiers that sit alongside the
// deep segmentation models: nearest-neighbor voting, one-vs-rest linear
// max-margin machines, a small dense network, mean-pool spatial smoothing, an
// ICA-learned convolutional filter bank, and a stacked-autoencoder feature
// pipeline reduced with whitened principal components.

namespace msiseg {

// ---------------------------------------------------------------------------
// Sample tables
// ---------------------------------------------------------------------------

// Feature rows with 1-based class labels: the common currency of the
// classical classifiers. Rows live in a dense row-major double matrix.
struct SampleSet {
  int dims = 0;
  int classes = 0;
  Mat x;               // count x dims
  std::vector<int> y;  // one label in [1, classes] per row

  size_t count() const { return y.size(); }
  const double* row(size_t i) const { return x.a.data() + i * static_cast<size_t>(dims); }

  void add(const double* values, int label) {
    if (label < 1 || label > classes)
      throw ArgumentError("sample label " + std::to_string(label) + " outside [1, " +
                          std::to_string(classes) + "]");
    x.a.insert(x.a.end(), values, values + dims);
    ++x.rows;
    y.push_back(label);
  }

  // Per-class sample counts, indexed by class with slot 0 unused.
  std::vector<int64_t> histogram() const {
    std::vector<int64_t> h(static_cast<size_t>(classes) + 1, 0);
    for (int label : y) ++h[static_cast<size_t>(label)];
    return h;
  }

  int present_classes() const {
    const std::vector<int64_t> h = histogram();
    int n = 0;
    for (size_t c = 1; c < h.size(); ++c)
      if (h[c] > 0) ++n;
    return n;
  }
};

inline SampleSet make_sample_set(int dims, int classes) {
  require(dims >= 1, "sample set needs >= 1 feature dim");
  require(classes >= 1 && classes <= 255, "sample set classes must be in [1,255]");
  SampleSet s;
  s.dims = dims;
  s.classes = classes;
  s.x.cols = dims;
  return s;
}

// Appends one row per labeled valid pixel (label 0 and masked pixels are
// skipped); `stride` subsamples the pixel grid for desk-scale work.
inline void append_pixel_samples(SampleSet& out, const MultibandRaster& raster,
                                 const LabelMap& labels, int stride = 1) {
  raster.validate();
  labels.validate();
  require(stride >= 1, "pixel sample stride must be >= 1");
  if (raster.width != labels.width || raster.height != labels.height)
    throw ShapeError("raster and label dims disagree");
  if (out.dims != raster.bands) throw ShapeError("sample set dims do not match raster bands");
  if (labels.classes > out.classes)
    throw ShapeError("label map declares more classes than the sample set");
  std::vector<double> row(static_cast<size_t>(raster.bands));
  for (int y = 0; y < raster.height; y += stride)
    for (int x = 0; x < raster.width; x += stride) {
      if (!raster.valid(y, x)) continue;
      const int label = labels.at(y, x);
      if (label == 0) continue;
      for (int b = 0; b < raster.bands; ++b) row[static_cast<size_t>(b)] = raster.at(b, y, x);
      out.add(row.data(), label);
    }
}

inline SampleSet pixel_samples(const MultibandRaster& raster, const LabelMap& labels,
                               int stride = 1) {
  labels.validate();
  SampleSet out = make_sample_set(raster.bands, labels.classes);
  append_pixel_samples(out, raster, labels, stride);
  return out;
}

// Rows of `features` are pixels in row-major order; labeled ones become
// samples. Used by feature pipelines whose outputs are plain matrices.
inline SampleSet samples_from_features(const Mat& features, const LabelMap& labels,
                                       int stride = 1) {
  labels.validate();
  require(stride >= 1, "pixel sample stride must be >= 1");
  if (features.rows != labels.width * labels.height)
    throw ShapeError("feature rows do not match label pixel count");
  SampleSet out = make_sample_set(features.cols, labels.classes);
  for (int y = 0; y < labels.height; y += stride)
    for (int x = 0; x < labels.width; x += stride) {
      const int label = labels.at(y, x);
      if (label == 0) continue;
      out.add(features.a.data() + static_cast<size_t>(y * labels.width + x) * features.cols,
              label);
    }
  return out;
}

namespace detail {

inline void fill_pixel_row(const MultibandRaster& r, int y, int x, double* out) {
  for (int b = 0; b < r.bands; ++b) out[b] = r.at(b, y, x);
}

// Assembles a label map from per-pixel predictions; masked pixels stay 0.
template <typename PredictRow>
LabelMap label_raster(const MultibandRaster& r, int classes, PredictRow&& predict) {
  LabelMap out = LabelMap::make(r.width, r.height, classes);
  std::vector<double> row(static_cast<size_t>(r.bands));
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      if (!r.valid(y, x)) continue;
      fill_pixel_row(r, y, x, row.data());
      out.at(y, x) = static_cast<uint8_t>(predict(row.data()));
    }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// k-nearest-neighbor voting
// ---------------------------------------------------------------------------

struct KnnSpec {
  int k = 3;

  void validate() const {
    if (k < 1) throw ArgumentError("neighbor count must be >= 1");
  }
};

namespace detail {

// Majority vote over the k nearest training rows (squared Euclidean
// distance); distance ties break toward the lower row index and vote ties
// toward the smaller class index, so results are reproducible.
inline int knn_vote(const SampleSet& train, const double* q, int k) {
  std::vector<std::pair<double, int>> order(train.count());
  for (size_t i = 0; i < train.count(); ++i) {
    const double* t = train.row(i);
    double d = 0.0;
    for (int j = 0; j < train.dims; ++j) {
      const double diff = t[j] - q[j];
      d += diff * diff;
    }
    order[i] = {d, static_cast<int>(i)};
  }
  std::partial_sort(order.begin(), order.begin() + k, order.end());
  std::vector<int> votes(static_cast<size_t>(train.classes) + 1, 0);
  for (int i = 0; i < k; ++i) ++votes[static_cast<size_t>(train.y[static_cast<size_t>(order[static_cast<size_t>(i)].second)])];
  int best = 1;
  for (int c = 2; c <= train.classes; ++c)
    if (votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(best)]) best = c;
  return best;
}

}  // namespace detail

inline std::vector<int> knn_classify(const SampleSet& train, const Mat& queries,
                                     const KnnSpec& spec) {
  spec.validate();
  require(train.count() > 0, "knn: empty training set");
  if (static_cast<size_t>(spec.k) > train.count())
    throw ArgumentError("knn: k exceeds training set size");
  if (queries.cols != train.dims) throw ShapeError("knn: query dims do not match training dims");
  std::vector<int> out(static_cast<size_t>(queries.rows));
  for (int i = 0; i < queries.rows; ++i)
    out[static_cast<size_t>(i)] =
        detail::knn_vote(train, queries.a.data() + static_cast<size_t>(i) * queries.cols, spec.k);
  return out;
}

// Labels every valid test pixel by vote over the labeled training pixels;
// masked test pixels stay 0.
inline LabelMap knn_fit_predict(const MultibandRaster& train_raster, const LabelMap& train_labels,
                                const MultibandRaster& test_raster, const KnnSpec& spec) {
  spec.validate();
  test_raster.validate();
  const SampleSet train = pixel_samples(train_raster, train_labels);
  require(train.count() > 0, "knn: empty training set");
  if (static_cast<size_t>(spec.k) > train.count())
    throw ArgumentError("knn: k exceeds training set size");
  if (test_raster.bands != train_raster.bands)
    throw ShapeError("knn: test raster band count differs from training raster");
  return detail::label_raster(test_raster, train.classes, [&](const double* row) {
    return detail::knn_vote(train, row, spec.k);
  });
}

// Sweeps k over [1, k_max] (capped at the training size) and returns the k
// with the best held-out accuracy; ties go to the smaller k.
inline int knn_select_k(const SampleSet& train, const SampleSet& val, int k_max = 15) {
  require(k_max >= 1 && k_max <= 15, "knn: cross-validation range is k in [1,15]");
  require(train.count() > 0, "knn: empty training set");
  require(val.count() > 0, "knn: empty validation set");
  if (val.dims != train.dims) throw ShapeError("knn: validation dims do not match training dims");
  const int cap = static_cast<int>(std::min<size_t>(static_cast<size_t>(k_max), train.count()));
  std::vector<int64_t> hits(static_cast<size_t>(cap) + 1, 0);
  std::vector<std::pair<double, int>> order(train.count());
  std::vector<int> votes(static_cast<size_t>(train.classes) + 1, 0);
  for (size_t i = 0; i < val.count(); ++i) {
    const double* q = val.row(i);
    for (size_t t = 0; t < train.count(); ++t) {
      const double* p = train.row(t);
      double d = 0.0;
      for (int j = 0; j < train.dims; ++j) {
        const double diff = p[j] - q[j];
        d += diff * diff;
      }
      order[t] = {d, static_cast<int>(t)};
    }
    std::partial_sort(order.begin(), order.begin() + cap, order.end());
    std::fill(votes.begin(), votes.end(), 0);
    for (int k = 1; k <= cap; ++k) {
      ++votes[static_cast<size_t>(train.y[static_cast<size_t>(order[static_cast<size_t>(k - 1)].second)])];
      int best = 1;
      for (int c = 2; c <= train.classes; ++c)
        if (votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(best)]) best = c;
      if (best == val.y[i]) ++hits[static_cast<size_t>(k)];
    }
  }
  int best_k = 1;
  for (int k = 2; k <= cap; ++k)
    if (hits[static_cast<size_t>(k)] > hits[static_cast<size_t>(best_k)]) best_k = k;
  return best_k;
}

// ---------------------------------------------------------------------------
// Linear one-vs-rest max-margin classifier
// ---------------------------------------------------------------------------

struct SvmSpec {
  double cost = 1.0;  // inverse regularization strength; penalty is 1/(2*cost*n)
  int epochs = 30;
  uint64_t seed = 0;
  // Per-class loss weights indexed by class (slot 0 unused). Empty selects
  // inverse class frequency, normalized so the weights average to one over
  // the training rows.
  std::vector<double> class_weights;

  void validate() const {
    if (!(cost > 0.0)) throw ArgumentError("svm cost must be > 0");
    if (epochs < 1) throw ArgumentError("svm needs >= 1 epoch");
  }
};

// One linear scorer per class over standardized features. The last weight
// column multiplies a constant 1 channel and acts as the bias.
struct LinearSvm {
  int dims = 0;
  int classes = 0;
  std::vector<double> mean;
  std::vector<double> stdev;
  Mat w;  // classes x (dims + 1)

  std::vector<double> scores(const double* x) const {
    std::vector<double> s(static_cast<size_t>(classes), 0.0);
    for (int c = 0; c < classes; ++c) {
      double acc = w(c, dims);  // constant channel
      for (int j = 0; j < dims; ++j)
        acc += w(c, j) * (x[j] - mean[static_cast<size_t>(j)]) / stdev[static_cast<size_t>(j)];
      s[static_cast<size_t>(c)] = acc;
    }
    return s;
  }

  int predict_row(const double* x) const {
    const std::vector<double> s = scores(x);
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (s[static_cast<size_t>(c)] > s[static_cast<size_t>(best)]) best = c;
    return best + 1;
  }
};

// Trains the one-vs-rest machines by subgradient descent on the class-weighted
// hinge loss with L2 penalty 1/(2*cost*n): per visited sample the weights
// shrink by (1 - 1/t) and, inside the margin, move along the sample scaled by
// the step 1/(lambda*t) and the sample's class weight. The visit order is a
// seeded shuffle per epoch, so training is deterministic.
inline LinearSvm svm_fit(const SampleSet& train, const SvmSpec& spec) {
  spec.validate();
  const size_t n = train.count();
  require(n >= 2, "svm: need >= 2 training rows");
  if (train.present_classes() < 2)
    throw DegenerateError("svm: training set holds a single class");

  LinearSvm model;
  model.dims = train.dims;
  model.classes = train.classes;
  model.mean.assign(static_cast<size_t>(train.dims), 0.0);
  model.stdev.assign(static_cast<size_t>(train.dims), 0.0);
  for (size_t i = 0; i < n; ++i) {
    const double* r = train.row(i);
    for (int j = 0; j < train.dims; ++j) model.mean[static_cast<size_t>(j)] += r[j];
  }
  for (double& m : model.mean) m /= static_cast<double>(n);
  for (size_t i = 0; i < n; ++i) {
    const double* r = train.row(i);
    for (int j = 0; j < train.dims; ++j) {
      const double d = r[j] - model.mean[static_cast<size_t>(j)];
      model.stdev[static_cast<size_t>(j)] += d * d;
    }
  }
  for (double& s : model.stdev) {
    s = std::sqrt(s / static_cast<double>(n));
    if (s < 1e-12) s = 1.0;  // constant feature: leave it centered at zero
  }

  std::vector<double> alpha = spec.class_weights;
  if (alpha.empty()) {
    const std::vector<int64_t> h = train.histogram();
    const int present = train.present_classes();
    alpha.assign(static_cast<size_t>(train.classes) + 1, 0.0);
    for (int c = 1; c <= train.classes; ++c)
      if (h[static_cast<size_t>(c)] > 0)
        alpha[static_cast<size_t>(c)] =
            static_cast<double>(n) / (static_cast<double>(present) * static_cast<double>(h[static_cast<size_t>(c)]));
  } else {
    if (alpha.size() != static_cast<size_t>(train.classes) + 1)
      throw ArgumentError("svm: class weights must hold classes+1 entries");
    for (double a : alpha)
      if (!(a >= 0.0)) throw ArgumentError("svm: class weights must be >= 0");
  }

  // Standardized rows with the constant channel appended, computed once.
  const int width = train.dims + 1;
  std::vector<double> xs(n * static_cast<size_t>(width));
  for (size_t i = 0; i < n; ++i) {
    const double* r = train.row(i);
    double* d = xs.data() + i * static_cast<size_t>(width);
    for (int j = 0; j < train.dims; ++j)
      d[j] = (r[j] - model.mean[static_cast<size_t>(j)]) / model.stdev[static_cast<size_t>(j)];
    d[train.dims] = 1.0;
  }

  model.w = Mat(train.classes, width);
  const double lambda = 1.0 / (spec.cost * static_cast<double>(n));
  std::vector<size_t> order(n);
  for (int c = 1; c <= train.classes; ++c) {
    double* w = model.w.a.data() + static_cast<size_t>(c - 1) * width;
    Rng rng(hash_combine(spec.seed, 0x73766d0000ull + static_cast<uint64_t>(c)));
    std::iota(order.begin(), order.end(), size_t{0});
    int64_t t = 0;
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
      rng.shuffle(order);
      for (size_t idx : order) {
        ++t;
        const double shrink = 1.0 - 1.0 / static_cast<double>(t);
        for (int j = 0; j < width; ++j) w[j] *= shrink;
        const double* xi = xs.data() + idx * static_cast<size_t>(width);
        const double target = train.y[idx] == c ? 1.0 : -1.0;
        double margin = 0.0;
        for (int j = 0; j < width; ++j) margin += w[j] * xi[j];
        margin *= target;
        if (margin < 1.0) {
          const double step =
              target * alpha[static_cast<size_t>(train.y[idx])] / (lambda * static_cast<double>(t));
          for (int j = 0; j < width; ++j) w[j] += step * xi[j];
        }
      }
    }
  }
  return model;
}

inline std::vector<int> svm_predict(const LinearSvm& model, const Mat& queries) {
  if (queries.cols != model.dims) throw ShapeError("svm: query dims do not match model");
  std::vector<int> out(static_cast<size_t>(queries.rows));
  for (int i = 0; i < queries.rows; ++i)
    out[static_cast<size_t>(i)] =
        model.predict_row(queries.a.data() + static_cast<size_t>(i) * queries.cols);
  return out;
}

inline std::vector<int> svm_predict(const LinearSvm& model, const SampleSet& samples) {
  return svm_predict(model, samples.x);
}

inline LabelMap svm_predict_raster(const LinearSvm& model, const MultibandRaster& r) {
  r.validate();
  if (r.bands != model.dims) throw ShapeError("svm: raster bands do not match model dims");
  return detail::label_raster(r, model.classes,
                              [&](const double* row) { return model.predict_row(row); });
}

// Powers of two from 2^-9 through 2^16; `exponent_step` thins the grid.
inline std::vector<double> svm_cost_grid(int exponent_step = 1) {
  require(exponent_step >= 1, "svm: cost grid step must be >= 1");
  std::vector<double> grid;
  for (int e = -9; e <= 16; e += exponent_step) grid.push_back(std::ldexp(1.0, e));
  return grid;
}

// Returns the grid cost with the best held-out accuracy (ties keep the
// smaller cost, i.e. the stronger regularizer).
inline double svm_select_cost(const SampleSet& train, const SampleSet& val, SvmSpec spec,
                              const std::vector<double>& grid) {
  require(!grid.empty(), "svm: empty cost grid");
  require(val.count() > 0, "svm: empty validation set");
  double best_cost = 0.0;
  int64_t best_hits = -1;
  for (double cost : grid) {
    spec.cost = cost;
    const LinearSvm model = svm_fit(train, spec);
    const std::vector<int> pred = svm_predict(model, val);
    int64_t hits = 0;
    for (size_t i = 0; i < val.count(); ++i)
      if (pred[i] == val.y[i]) ++hits;
    if (hits > best_hits) {
      best_hits = hits;
      best_cost = cost;
    }
  }
  return best_cost;
}

// ---------------------------------------------------------------------------
// Dense network on pixel or pooled features
// ---------------------------------------------------------------------------

struct MlpSpec {
  int hidden = 64;
  int batch = 256;
  int epochs = 60;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  double mu = 0.15;  // class-weight scale when weights are derived internally
  uint64_t seed = 0;

  void validate() const {
    if (hidden < 1) throw ArgumentError("mlp needs >= 1 hidden unit");
    if (batch < 1) throw ArgumentError("mlp batch size must be >= 1");
    if (epochs < 1) throw ArgumentError("mlp needs >= 1 epoch");
    if (!(lr > 0.0)) throw ArgumentError("mlp learning rate must be > 0");
    if (weight_decay < 0.0) throw ArgumentError("mlp weight decay must be >= 0");
    if (!(mu > 0.0)) throw ArgumentError("mlp class-weight scale must be > 0");
  }
};

struct MlpModel {
  int dims = 0;
  int hidden = 0;
  int classes = 0;
  BuiltModel net;
};

// Feature standardization, one hidden dense layer with a relu, and a dense
// class scorer: input -> batch norm -> dense(hidden) -> relu -> dense(classes).
inline MlpModel build_mlp(int dims, int hidden, int classes, uint64_t seed) {
  require(dims >= 1, "mlp needs >= 1 feature dim");
  if (hidden < 1) throw ArgumentError("mlp needs >= 1 hidden unit");
  if (classes < 2) throw ArgumentError("mlp needs >= 2 classes");
  MlpModel m;
  m.dims = dims;
  m.hidden = hidden;
  m.classes = classes;
  m.net.bands = dims;
  m.net.classes = classes;
  m.net.downsample = 1;
  m.net.input_size = 1;
  Rng rng(hash_combine(seed, 0x6d6c7000ull));
  detail::NetBuilder nb(m.net.graph, rng);
  const int input = m.net.graph.add_input();
  int cur = nb.bn(input, "mlp.bn", dims);

  Tensor<float>& hw = m.net.graph.params().create("mlp.hidden.w", {hidden, dims}, true);
  const double hs = std::sqrt(2.0 / dims);
  for (auto& v : hw.values) v = static_cast<float>(rng.normal() * hs);
  m.net.graph.params().create("mlp.hidden.b", {hidden}, true);
  NodeSpec h;
  h.kind = OpKind::Dense;
  h.in0 = cur;
  h.w = "mlp.hidden.w";
  h.b = "mlp.hidden.b";
  cur = nb.relu(m.net.graph.add(h));

  Tensor<float>& ow = m.net.graph.params().create("mlp.out.w", {classes, hidden}, true);
  const double os = std::sqrt(2.0 / hidden);
  for (auto& v : ow.values) v = static_cast<float>(rng.normal() * os);
  m.net.graph.params().create("mlp.out.b", {classes}, true);
  NodeSpec o;
  o.kind = OpKind::Dense;
  o.in0 = cur;
  o.w = "mlp.out.w";
  o.b = "mlp.out.b";
  m.net.graph.add(o);
  return m;
}

inline MlpModel mlp_fit(const SampleSet& train, const MlpSpec& spec, const ClassWeights& weights) {
  spec.validate();
  require(train.count() > 0, "mlp: empty training set");
  if (train.present_classes() < 2)
    throw DegenerateError("mlp: training set holds a single class");
  if (weights.weights.size() != static_cast<size_t>(train.classes) + 1)
    throw ArgumentError("mlp: class weights must hold classes+1 entries");

  MlpModel model = build_mlp(train.dims, spec.hidden, train.classes, spec.seed);
  Nadam<float> opt;
  opt.lr = spec.lr;
  opt.weight_decay = spec.weight_decay;
  Rng rng(hash_combine(spec.seed, 0x6d6c7031ull));
  std::vector<size_t> order(train.count());
  std::iota(order.begin(), order.end(), size_t{0});
  Tensor<float> grad;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(spec.batch)) {
      const size_t bsz = std::min(static_cast<size_t>(spec.batch), order.size() - start);
      Tensor<float> x({static_cast<int>(bsz), train.dims, 1, 1});
      std::vector<uint8_t> targets(bsz);
      std::vector<double> wts(bsz);
      double wsum = 0.0;
      for (size_t b = 0; b < bsz; ++b) {
        const size_t idx = order[start + b];
        const double* r = train.row(idx);
        for (int j = 0; j < train.dims; ++j)
          x.values[b * static_cast<size_t>(train.dims) + static_cast<size_t>(j)] =
              static_cast<float>(r[j]);
        targets[b] = static_cast<uint8_t>(train.y[idx]);
        wts[b] = weights.weight_for(train.y[idx]);
        wsum += wts[b];
      }
      if (wsum <= 0.0) continue;
      const Tensor<float>& logits = model.net.forward(x, true);
      const double loss = weighted_softmax_ce(logits, targets, wts, &grad);
      if (!std::isfinite(loss))
        throw NumericError("mlp training diverged: non-finite loss in epoch " +
                           std::to_string(epoch + 1));
      model.net.graph.params().zero_grad();
      model.net.graph.backward(grad);
      opt.step(model.net.graph.params());
    }
  }
  return model;
}

inline MlpModel mlp_fit(const SampleSet& train, const MlpSpec& spec) {
  return mlp_fit(train, spec, class_weights(train.histogram(), spec.mu));
}

inline std::vector<int> mlp_predict(MlpModel& model, const Mat& queries) {
  if (queries.cols != model.dims) throw ShapeError("mlp: query dims do not match model");
  std::vector<int> out(static_cast<size_t>(queries.rows));
  const int chunk = 512;
  for (int start = 0; start < queries.rows; start += chunk) {
    const int bsz = std::min(chunk, queries.rows - start);
    Tensor<float> x({bsz, model.dims, 1, 1});
    for (int b = 0; b < bsz; ++b)
      for (int j = 0; j < model.dims; ++j)
        x.values[static_cast<size_t>(b) * model.dims + static_cast<size_t>(j)] =
            static_cast<float>(queries(start + b, j));
    const Tensor<float>& logits = model.net.forward(x, false);
    for (int b = 0; b < bsz; ++b) {
      int best = 0;
      for (int c = 1; c < model.classes; ++c)
        if (logits.at(b, c, 0, 0) > logits.at(b, best, 0, 0)) best = c;
      out[static_cast<size_t>(start + b)] = best + 1;
    }
  }
  return out;
}

inline std::vector<int> mlp_predict(MlpModel& model, const SampleSet& samples) {
  return mlp_predict(model, samples.x);
}

inline LabelMap mlp_predict_raster(MlpModel& model, const MultibandRaster& r) {
  r.validate();
  if (r.bands != model.dims) throw ShapeError("mlp: raster bands do not match model dims");
  Mat rows(r.width * r.height, r.bands);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int b = 0; b < r.bands; ++b) rows(y * r.width + x, b) = r.at(b, y, x);
  const std::vector<int> pred = mlp_predict(model, rows);
  LabelMap out = LabelMap::make(r.width, r.height, model.classes);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      if (r.valid(y, x))
        out.at(y, x) = static_cast<uint8_t>(pred[static_cast<size_t>(y * r.width + x)]);
  return out;
}

// ---------------------------------------------------------------------------
// Spatial mean pooling
// ---------------------------------------------------------------------------

namespace detail {

// Same-size mean filter; each output is the mean of the in-bounds window, so
// constant planes pass through unchanged at the borders too.
inline void mean_filter_plane(const std::vector<double>& src, std::vector<double>& dst, int h,
                              int w, int window) {
  const int half = window / 2;
  dst.assign(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      int count = 0;
      for (int dy = -half; dy <= half; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -half; dx <= half; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          acc += src[static_cast<size_t>(yy) * w + xx];
          ++count;
        }
      }
      dst[static_cast<size_t>(y) * w + x] = acc / count;
    }
}

inline void check_pool_window(int window) {
  if (window < 1 || window % 2 == 0)
    throw ArgumentError("pooling window must be odd and >= 1");
}

}  // namespace detail

// Smooths every band with a window x window mean filter (windows are clipped
// at the image border, so constant rasters are unchanged).
inline MultibandRaster meanpool_preprocess(const MultibandRaster& r, int window = 5) {
  r.validate();
  detail::check_pool_window(window);
  MultibandRaster out = r;
  std::vector<double> plane(r.pixel_count());
  std::vector<double> pooled;
  for (int b = 0; b < r.bands; ++b) {
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x)
        plane[static_cast<size_t>(y) * r.width + x] = r.at(b, y, x);
    detail::mean_filter_plane(plane, pooled, r.height, r.width, window);
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x)
        out.at(b, y, x) = static_cast<float>(pooled[static_cast<size_t>(y) * r.width + x]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Independent component analysis
// ---------------------------------------------------------------------------

struct IcaResult {
  std::vector<double> mean;  // column means of the input rows
  Mat whitening;             // kept x dims; maps centered rows to unit covariance
  Mat unmixing;              // components x dims; acts on centered rows
  int iterations = 0;
  double whiten_identity_error = 0.0;  // max |cov(whitened) - I|
};

namespace detail {

// Replaces w with (w w^T)^(-1/2) w so its rows become orthonormal.
inline void symmetric_orthonormalize(Mat& w) {
  Mat m(w.rows, w.rows);
  for (int i = 0; i < w.rows; ++i)
    for (int j = i; j < w.rows; ++j) {
      double acc = 0.0;
      for (int k = 0; k < w.cols; ++k) acc += w(i, k) * w(j, k);
      m(i, j) = acc;
      m(j, i) = acc;
    }
  const EigenResult eig = eigen_symmetric(m);
  const double floor = eig.values.front() * 1e-12;
  for (double v : eig.values)
    if (!(v > floor) || !(v > 0.0))
      throw DegenerateError("ica: direction matrix lost rank during orthonormalization");
  Mat half(w.rows, w.rows);
  for (int i = 0; i < w.rows; ++i)
    for (int j = 0; j < w.rows; ++j) {
      double acc = 0.0;
      for (int k = 0; k < w.rows; ++k)
        acc += eig.vectors(i, k) * eig.vectors(j, k) / std::sqrt(eig.values[static_cast<size_t>(k)]);
      half(i, j) = acc;
    }
  w = matmul(half, w);
}

}  // namespace detail

// Centering plus a variance-equalizing rotation: rows of `whitened` have unit
// sample covariance. Directions whose eigenvalue falls below rank_tol times
// the largest are dropped rather than amplified.
struct WhitenResult {
  std::vector<double> mean;
  Mat whitening;  // kept x dims
  Mat whitened;   // rows x kept
  double identity_error = 0.0;  // max |cov(whitened) - I|
};

inline WhitenResult whiten_rows(const Mat& samples, double rank_tol = 1e-8) {
  require(samples.rows >= 2, "whitening needs >= 2 rows");
  const int n = samples.rows, d = samples.cols;
  WhitenResult out;
  out.mean.assign(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.mean[static_cast<size_t>(j)] += samples(i, j);
  for (double& m : out.mean) m /= n;

  Mat centered(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) centered(i, j) = samples(i, j) - out.mean[static_cast<size_t>(j)];

  Mat cov = gram(centered);
  for (double& v : cov.a) v /= n;
  const EigenResult eig = eigen_symmetric(cov);
  if (!(eig.values.front() > 0.0)) throw DegenerateError("whitening: input has no variance");
  int keep = 0;
  while (keep < d && eig.values[static_cast<size_t>(keep)] > eig.values.front() * rank_tol) ++keep;

  out.whitening = Mat(keep, d);
  for (int k = 0; k < keep; ++k) {
    const double inv = 1.0 / std::sqrt(eig.values[static_cast<size_t>(k)]);
    for (int j = 0; j < d; ++j) out.whitening(k, j) = eig.vectors(j, k) * inv;
  }

  out.whitened = matmul(centered, transpose(out.whitening));
  Mat zcov = gram(out.whitened);
  for (double& v : zcov.a) v /= n;
  double err = 0.0;
  for (int i = 0; i < keep; ++i)
    for (int j = 0; j < keep; ++j)
      err = std::max(err, std::abs(zcov(i, j) - (i == j ? 1.0 : 0.0)));
  out.identity_error = err;
  return out;
}

// FastICA with the tanh contrast and symmetric (parallel) orthogonalization.
// Rows of `samples` are observations. The returned unmixing matrix recovers
// source estimates from centered rows; stopping requires every direction's
// update to align with its predecessor within `tol`.
inline IcaResult fastica(const Mat& samples, int components, uint64_t seed, int max_iters = 500,
                         double tol = 1e-5) {
  require(components >= 1, "ica: need >= 1 component");
  require(components <= samples.cols, "ica: more components than dims");
  const int n = samples.rows;

  WhitenResult white = whiten_rows(samples);
  const int keep = white.whitening.rows;
  if (components > keep)
    throw DegenerateError("ica: sample covariance rank " + std::to_string(keep) +
                          " is below the requested " + std::to_string(components) + " components");

  IcaResult out;
  out.mean = std::move(white.mean);
  out.whitening = std::move(white.whitening);
  out.whiten_identity_error = white.identity_error;
  const Mat& z = white.whitened;  // n x keep

  Rng rng(hash_combine(seed, 0x69636100ull));
  Mat w(components, keep);
  for (double& v : w.a) v = rng.normal();
  detail::symmetric_orthonormalize(w);

  double delta = std::numeric_limits<double>::infinity();
  bool converged = false;
  std::vector<double> acc(static_cast<size_t>(keep));
  for (int iter = 1; iter <= max_iters; ++iter) {
    Mat next(components, keep);
    for (int c = 0; c < components; ++c) {
      std::fill(acc.begin(), acc.end(), 0.0);
      double gp_sum = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* zi = z.a.data() + static_cast<size_t>(i) * keep;
        double u = 0.0;
        for (int k = 0; k < keep; ++k) u += w(c, k) * zi[k];
        const double g = std::tanh(u);
        gp_sum += 1.0 - g * g;
        for (int k = 0; k < keep; ++k) acc[static_cast<size_t>(k)] += zi[k] * g;
      }
      for (int k = 0; k < keep; ++k)
        next(c, k) = acc[static_cast<size_t>(k)] / n - (gp_sum / n) * w(c, k);
    }
    detail::symmetric_orthonormalize(next);
    delta = 0.0;
    for (int c = 0; c < components; ++c) {
      double dot = 0.0;
      for (int k = 0; k < keep; ++k) dot += next(c, k) * w(c, k);
      delta = std::max(delta, std::abs(1.0 - std::abs(dot)));
    }
    w = next;
    if (delta < tol) {
      out.iterations = iter;
      converged = true;
      break;
    }
  }
  if (!converged) {
    char msg[128];
    std::snprintf(msg, sizeof msg, "ica: no convergence after %d iterations (last delta %.3g, tolerance %.3g)",
                  max_iters, delta, tol);
    throw ConvergenceError(msg);
  }
  out.unmixing = matmul(w, out.whitening);
  return out;
}

// ---------------------------------------------------------------------------
// ICA filter bank on image patches
// ---------------------------------------------------------------------------

struct MicaSpec {
  int filters = 16;
  int filter_size = 9;  // odd patch edge, spanning all bands
  int pool = 13;        // response pooling window
  int hidden = 256;     // classifier hidden width when a dense head follows
  int sample_patches = 3000;
  int max_iters = 500;
  double tol = 1e-5;
  uint64_t seed = 0;

  void validate() const {
    if (filters < 1) throw ArgumentError("filter bank needs >= 1 filter");
    if (filter_size < 1 || filter_size % 2 == 0)
      throw ArgumentError("filter size must be odd and >= 1");
    detail::check_pool_window(pool);
    if (hidden < 1) throw ArgumentError("classifier hidden width must be >= 1");
    if (sample_patches < filters * 10)
      throw ArgumentError("need >= 10 sample patches per filter");
    if (max_iters < 1) throw ArgumentError("ica iteration cap must be >= 1");
    if (!(tol > 0.0)) throw ArgumentError("ica tolerance must be > 0");
  }
};

struct MicaBank {
  int bands = 0;
  int filter_size = 0;
  Mat filters;  // filters x (size*size*bands), unit-norm rows, band-major layout
  std::vector<double> offsets;  // per-filter response of the training mean patch
  int iterations = 0;
  double whiten_identity_error = 0.0;
};

// Learns the filter bank by running the independent-component solver on
// randomly sampled patches. Filters are scaled to unit norm; the offsets keep
// responses centered the way the solver saw the data.
inline MicaBank mica_fit(const std::vector<MultibandRaster>& rasters, const MicaSpec& spec) {
  spec.validate();
  require(!rasters.empty(), "filter bank needs >= 1 raster");
  const int bands = rasters.front().bands;
  const int size = spec.filter_size;
  std::vector<size_t> usable;
  for (size_t i = 0; i < rasters.size(); ++i) {
    rasters[i].validate();
    if (rasters[i].bands != bands) throw ShapeError("rasters disagree on band count");
    if (rasters[i].width >= size && rasters[i].height >= size) usable.push_back(i);
  }
  require(!usable.empty(), "every raster is smaller than the filter");

  const int d = size * size * bands;
  Mat patches(spec.sample_patches, d);
  Rng rng(hash_combine(spec.seed, 0x6d696361ull));
  const int budget = spec.sample_patches * 20;
  int taken = 0;
  for (int attempt = 0; attempt < budget && taken < spec.sample_patches; ++attempt) {
    const MultibandRaster& r =
        rasters[usable[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(usable.size()) - 1))]];
    const int x0 = static_cast<int>(rng.uniform_int(0, r.width - size));
    const int y0 = static_cast<int>(rng.uniform_int(0, r.height - size));
    bool ok = true;
    for (int dy = 0; dy < size && ok; ++dy)
      for (int dx = 0; dx < size && ok; ++dx)
        if (!r.valid(y0 + dy, x0 + dx)) ok = false;
    if (!ok) continue;
    double* row = patches.a.data() + static_cast<size_t>(taken) * d;
    for (int b = 0; b < bands; ++b)
      for (int dy = 0; dy < size; ++dy)
        for (int dx = 0; dx < size; ++dx)
          row[(b * size + dy) * size + dx] = r.at(b, y0 + dy, x0 + dx);
    ++taken;
  }
  if (taken < spec.sample_patches)
    throw ArgumentError("could not sample enough valid patches (" + std::to_string(taken) + " of " +
                        std::to_string(spec.sample_patches) + ")");

  const IcaResult ica = fastica(patches, spec.filters, hash_combine(spec.seed, 0x6d696362ull),
                                spec.max_iters, spec.tol);

  MicaBank bank;
  bank.bands = bands;
  bank.filter_size = size;
  bank.iterations = ica.iterations;
  bank.whiten_identity_error = ica.whiten_identity_error;
  bank.filters = ica.unmixing;
  bank.offsets.assign(static_cast<size_t>(spec.filters), 0.0);
  for (int f = 0; f < spec.filters; ++f) {
    double norm = 0.0;
    for (int j = 0; j < d; ++j) norm += bank.filters(f, j) * bank.filters(f, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw DegenerateError("filter collapsed to zero norm");
    double offset = 0.0;
    for (int j = 0; j < d; ++j) {
      bank.filters(f, j) /= norm;
      offset += bank.filters(f, j) * ica.mean[static_cast<size_t>(j)];
    }
    bank.offsets[static_cast<size_t>(f)] = offset;
  }
  return bank;
}

// Filter responses as a new raster: correlate each unit filter with the
// zero-padded image, subtract the training-mean offset, take the magnitude,
// and mean-pool. Output band f holds filter f's pooled response map.
inline MultibandRaster mica_features(const MultibandRaster& r, const MicaBank& bank,
                                     int pool = 13) {
  r.validate();
  detail::check_pool_window(pool);
  if (r.bands != bank.bands) throw ShapeError("raster bands do not match filter bank");
  const int size = bank.filter_size;
  const int half = size / 2;
  const int count = bank.filters.rows;

  MultibandRaster out;
  out.width = r.width;
  out.height = r.height;
  out.bands = count;
  out.gsd_cm = r.gsd_cm;
  out.valid_mask = r.valid_mask;
  out.band_centers_nm.resize(static_cast<size_t>(count));
  for (int f = 0; f < count; ++f) out.band_centers_nm[static_cast<size_t>(f)] = f + 1;
  out.values.assign(static_cast<size_t>(count) * r.pixel_count(), 0.0f);

  std::vector<double> response(r.pixel_count());
  std::vector<double> pooled;
  for (int f = 0; f < count; ++f) {
    const double* w = bank.filters.a.data() + static_cast<size_t>(f) * bank.filters.cols;
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) {
        double acc = -bank.offsets[static_cast<size_t>(f)];
        for (int b = 0; b < r.bands; ++b)
          for (int dy = 0; dy < size; ++dy) {
            const int yy = y + dy - half;
            if (yy < 0 || yy >= r.height) continue;
            for (int dx = 0; dx < size; ++dx) {
              const int xx = x + dx - half;
              if (xx < 0 || xx >= r.width) continue;
              acc += w[(b * size + dy) * size + dx] * r.at(b, yy, xx);
            }
          }
        response[static_cast<size_t>(y) * r.width + x] = std::abs(acc);
      }
    detail::mean_filter_plane(response, pooled, r.height, r.width, pool);
    for (size_t p = 0; p < r.pixel_count(); ++p)
      out.values[static_cast<size_t>(f) * r.pixel_count() + p] = static_cast<float>(pooled[p]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Whitened principal components
// ---------------------------------------------------------------------------

struct Wpca {
  std::vector<double> mean;
  Mat components;  // kept x dims; rows are eigenvectors scaled by 1/sqrt(eigenvalue)
  std::vector<double> eigenvalues;  // all input dims, descending
  int kept = 0;
  double retained = 0.0;  // variance fraction covered by the kept components
  bool rank_limited = false;
  std::vector<std::string> warnings;

  std::vector<double> transform_row(const double* x) const {
    std::vector<double> out(static_cast<size_t>(kept), 0.0);
    for (int k = 0; k < kept; ++k) {
      double acc = 0.0;
      for (int j = 0; j < components.cols; ++j)
        acc += components(k, j) * (x[j] - mean[static_cast<size_t>(j)]);
      out[static_cast<size_t>(k)] = acc;
    }
    return out;
  }

  Mat transform(const Mat& rows) const {
    if (rows.cols != components.cols) throw ShapeError("wpca: row dims do not match fit");
    Mat out(rows.rows, kept);
    for (int i = 0; i < rows.rows; ++i) {
      const std::vector<double> t = transform_row(rows.a.data() + static_cast<size_t>(i) * rows.cols);
      for (int k = 0; k < kept; ++k) out(i, k) = t[static_cast<size_t>(k)];
    }
    return out;
  }
};

// Keeps the smallest leading set of principal components covering the
// requested variance fraction and scales them so the projected data has unit
// covariance. Directions below numerical rank are never whitened; if they
// make the target unreachable the full usable rank is kept with a warning.
inline Wpca wpca_fit(const Mat& rows, double variance = 0.99) {
  if (!(variance > 0.0 && variance <= 1.0))
    throw ArgumentError("wpca variance fraction must be in (0, 1]");
  require(rows.rows >= 2, "wpca: need >= 2 rows");

  Wpca out;
  const int n = rows.rows, d = rows.cols;
  out.mean.assign(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.mean[static_cast<size_t>(j)] += rows(i, j);
  for (double& m : out.mean) m /= n;
  Mat centered(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) centered(i, j) = rows(i, j) - out.mean[static_cast<size_t>(j)];
  Mat cov = gram(centered);
  for (double& v : cov.a) v /= n;

  const EigenResult eig = eigen_symmetric(cov);
  out.eigenvalues = eig.values;
  double total = 0.0;
  for (double v : eig.values) total += std::max(v, 0.0);
  if (!(total > 0.0)) throw DegenerateError("wpca: input has no variance");

  int rank = 0;
  while (rank < d && eig.values[static_cast<size_t>(rank)] > eig.values.front() * 1e-12) ++rank;

  double cum = 0.0;
  int kept = 0;
  for (int k = 0; k < rank; ++k) {
    cum += eig.values[static_cast<size_t>(k)];
    kept = k + 1;
    if (cum / total >= variance) break;
  }
  if (cum / total < variance) {
    out.rank_limited = true;
    char msg[128];
    std::snprintf(msg, sizeof msg,
                  "variance target %.6g unreachable at numerical rank %d; keeping %.6g", variance,
                  rank, cum / total);
    out.warnings.push_back(msg);
  }
  out.kept = kept;
  out.retained = cum / total;
  out.components = Mat(kept, d);
  for (int k = 0; k < kept; ++k) {
    const double inv = 1.0 / std::sqrt(eig.values[static_cast<size_t>(k)]);
    for (int j = 0; j < d; ++j) out.components(k, j) = eig.vectors(j, k) * inv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stacked convolutional autoencoder features
// ---------------------------------------------------------------------------

struct ScaeSpec {
  int caes = 3;        // stacked reconstruction stages
  int hidden = 32;     // hidden maps per stage; features concatenate to caes*hidden
  int pool = 5;        // spatial mean-pool window on the concatenated stack
  double variance = 0.99;
  int mlp_hidden = 256;  // hidden width for the classifier that usually follows
  std::vector<int> cae_widths = {16};
  int cae_bottleneck = 32;
  int cae_epochs = 20;
  double cae_lr = 2e-3;
  double weight_decay = 1e-4;
  uint64_t seed = 0;

  void validate() const {
    if (caes < 1) throw ArgumentError("feature stack needs >= 1 autoencoder");
    if (hidden < 1) throw ArgumentError("autoencoder hidden width must be >= 1");
    detail::check_pool_window(pool);
    if (!(variance > 0.0 && variance <= 1.0))
      throw ArgumentError("variance fraction must be in (0, 1]");
    if (mlp_hidden < 1) throw ArgumentError("classifier hidden width must be >= 1");
    if (cae_widths.empty()) throw ArgumentError("autoencoder needs >= 1 conv width");
    if (cae_bottleneck < 1) throw ArgumentError("autoencoder bottleneck must be >= 1");
    if (cae_epochs < 1) throw ArgumentError("autoencoder needs >= 1 epoch");
    if (!(cae_lr > 0.0)) throw ArgumentError("autoencoder learning rate must be > 0");
    if (weight_decay < 0.0) throw ArgumentError("weight decay must be >= 0");
  }
};

struct ScaeModel {
  ScaeSpec spec;
  int bands = 0;
  std::vector<BuiltModel> caes;  // stage t consumes stage t-1's hidden features
  Wpca wpca;

  int feature_dims() const { return spec.caes * spec.hidden; }
};

namespace detail {

inline Tensor<float> raster_tensor(const MultibandRaster& r) {
  Tensor<float> x({1, r.bands, r.height, r.width});
  for (int b = 0; b < r.bands; ++b)
    for (int y = 0; y < r.height; ++y)
      for (int x0 = 0; x0 < r.width; ++x0) x.at(0, b, y, x0) = r.at(b, y, x0);
  return x;
}

// Runs the trained stack in eval mode and returns the per-stage hidden maps
// concatenated along channels, mean-pooled, one row per pixel.
inline Mat scae_pixel_features(std::vector<BuiltModel>& caes, const Tensor<float>& input,
                               int hidden, int pool) {
  const int h = input.h(), w = input.w();
  const int dims = static_cast<int>(caes.size()) * hidden;
  Mat rows(h * w, dims);
  Tensor<float> cur = input;
  std::vector<double> plane(static_cast<size_t>(h) * w);
  std::vector<double> pooled;
  for (size_t t = 0; t < caes.size(); ++t) {
    caes[t].forward(cur, false);
    const Tensor<float>& hid = caes[t].graph.activation(caes[t].hidden_node);
    for (int c = 0; c < hidden; ++c) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) plane[static_cast<size_t>(y) * w + x] = hid.at(0, c, y, x);
      mean_filter_plane(plane, pooled, h, w, pool);
      const int col = static_cast<int>(t) * hidden + c;
      for (int p = 0; p < h * w; ++p) rows(p, col) = pooled[static_cast<size_t>(p)];
    }
    if (t + 1 < caes.size()) {
      Tensor<float> next(hid.shape);
      next.values = hid.values;
      cur = std::move(next);
    }
  }
  return rows;
}

}  // namespace detail

// Trains the reconstruction stages one after another (each stage learns to
// reconstruct the previous stage's hidden features), then fits the whitened
// principal components on the pooled, concatenated hidden maps of every
// input raster.
inline ScaeModel scae_fit(const std::vector<MultibandRaster>& rasters, const ScaeSpec& spec) {
  spec.validate();
  require(!rasters.empty(), "feature stack needs >= 1 raster");
  const int bands = rasters.front().bands;
  std::vector<Tensor<float>> inputs;
  for (const MultibandRaster& r : rasters) {
    r.validate();
    if (r.bands != bands) throw ShapeError("rasters disagree on band count");
    inputs.push_back(detail::raster_tensor(r));
  }

  ScaeModel model;
  model.spec = spec;
  model.bands = bands;

  int ch = bands;
  Tensor<float> grad;
  for (int t = 0; t < spec.caes; ++t) {
    CaeSpec cs;
    cs.bands = ch;
    cs.widths = spec.cae_widths;
    cs.bottleneck = spec.cae_bottleneck;
    cs.hidden = spec.hidden;
    BuiltModel cae = build_cae(cs, hash_combine(spec.seed, 0x73636165ull + static_cast<uint64_t>(t)));

    Nadam<float> opt;
    opt.lr = spec.cae_lr;
    opt.weight_decay = spec.weight_decay;
    Rng rng(hash_combine(spec.seed, 0x7363616600ull + static_cast<uint64_t>(t)));
    std::vector<size_t> order(inputs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    for (int epoch = 0; epoch < spec.cae_epochs; ++epoch) {
      rng.shuffle(order);
      for (size_t idx : order) {
        const Tensor<float>& recon = cae.forward(inputs[idx], true);
        const double loss = mse_loss(recon, inputs[idx], &grad);
        if (!std::isfinite(loss))
          throw NumericError("autoencoder training diverged: non-finite loss in stage " +
                             std::to_string(t + 1));
        cae.graph.params().zero_grad();
        cae.graph.backward(grad);
        opt.step(cae.graph.params());
      }
    }

    if (t + 1 < spec.caes) {
      std::vector<Tensor<float>> next;
      for (const Tensor<float>& x : inputs) {
        cae.forward(x, false);
        const Tensor<float>& hid = cae.graph.activation(cae.hidden_node);
        Tensor<float> copy(hid.shape);
        copy.values = hid.values;
        next.push_back(std::move(copy));
      }
      inputs = std::move(next);
    }
    model.caes.push_back(std::move(cae));
    ch = spec.hidden;
  }

  Mat rows;
  rows.cols = model.feature_dims();
  for (const MultibandRaster& r : rasters) {
    const Mat part =
        detail::scae_pixel_features(model.caes, detail::raster_tensor(r), spec.hidden, spec.pool);
    rows.a.insert(rows.a.end(), part.a.begin(), part.a.end());
    rows.rows += part.rows;
  }
  model.wpca = wpca_fit(rows, spec.variance);
  return model;
}

// Whitened per-pixel features for one raster, one row per pixel in row-major
// order.
inline Mat scae_features(ScaeModel& model, const MultibandRaster& r) {
  r.validate();
  if (r.bands != model.bands) throw ShapeError("raster bands do not match feature stack");
  const Mat raw = detail::scae_pixel_features(model.caes, detail::raster_tensor(r),
                                              model.spec.hidden, model.spec.pool);
  return model.wpca.transform(raw);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

enum class BaselineKind : int { Knn = 1, Svm = 2, Mlp = 3, Mica = 4, Scae = 5 };

namespace detail {

inline CheckpointRecord meta_record(const std::string& name, std::vector<int> shape,
                                    std::vector<float> values) {
  CheckpointRecord r;
  r.name = name;
  r.trainable = false;
  r.shape = std::move(shape);
  r.values = std::move(values);
  return r;
}

inline CheckpointRecord mat_record(const std::string& name, const Mat& m) {
  CheckpointRecord r;
  r.name = name;
  r.trainable = false;
  r.shape = {m.rows, m.cols};
  r.values.resize(m.a.size());
  for (size_t i = 0; i < m.a.size(); ++i) r.values[i] = static_cast<float>(m.a[i]);
  return r;
}

inline CheckpointRecord vec_record(const std::string& name, const std::vector<double>& v) {
  CheckpointRecord r;
  r.name = name;
  r.trainable = false;
  r.shape = {static_cast<int>(v.size())};
  r.values.resize(v.size());
  for (size_t i = 0; i < v.size(); ++i) r.values[i] = static_cast<float>(v[i]);
  return r;
}

inline const CheckpointRecord& find_record(const std::vector<CheckpointRecord>& records,
                                           const std::string& name) {
  for (const CheckpointRecord& r : records)
    if (r.name == name) return r;
  throw FormatError("baseline file is missing record '" + name + "'");
}

inline Mat record_to_mat(const CheckpointRecord& r) {
  if (r.shape.size() != 2) throw FormatError("record '" + r.name + "' is not a matrix");
  Mat m(r.shape[0], r.shape[1]);
  for (size_t i = 0; i < r.values.size(); ++i) m.a[i] = r.values[i];
  return m;
}

inline std::vector<double> record_to_vec(const CheckpointRecord& r) {
  if (r.shape.size() != 1) throw FormatError("record '" + r.name + "' is not a vector");
  return std::vector<double>(r.values.begin(), r.values.end());
}

inline void check_kind(const std::vector<CheckpointRecord>& records, BaselineKind want) {
  const CheckpointRecord& r = find_record(records, "meta.kind");
  if (r.values.size() != 1) throw FormatError("malformed model kind record");
  const int got = static_cast<int>(r.values[0]);
  if (got != static_cast<int>(want))
    throw FormatError("baseline file holds model kind " + std::to_string(got) + ", expected " +
                      std::to_string(static_cast<int>(want)));
}

}  // namespace detail

inline BaselineKind peek_baseline_kind(const std::string& path) {
  const std::vector<CheckpointRecord> records = read_checkpoint(path);
  const CheckpointRecord& r = detail::find_record(records, "meta.kind");
  if (r.values.size() != 1) throw FormatError("malformed model kind record");
  return static_cast<BaselineKind>(static_cast<int>(r.values[0]));
}

// --- nearest neighbor: the model is the reference table plus k -------------

struct KnnModel {
  KnnSpec spec;
  SampleSet train;
};

inline void save_knn(const KnnModel& model, const std::string& path) {
  model.spec.validate();
  require(model.train.count() > 0, "knn: empty training set");
  std::vector<CheckpointRecord> records;
  records.push_back(detail::meta_record("meta.kind", {1}, {static_cast<float>(BaselineKind::Knn)}));
  records.push_back(detail::meta_record(
      "meta.arch", {3},
      {static_cast<float>(model.spec.k), static_cast<float>(model.train.dims),
       static_cast<float>(model.train.classes)}));
  records.push_back(detail::mat_record("knn.x", model.train.x));
  std::vector<double> labels(model.train.y.begin(), model.train.y.end());
  records.push_back(detail::vec_record("knn.y", labels));
  write_checkpoint(path, records);
}

inline KnnModel load_knn(const std::string& path) {
  const std::vector<CheckpointRecord> records = read_checkpoint(path);
  detail::check_kind(records, BaselineKind::Knn);
  const CheckpointRecord& arch = detail::find_record(records, "meta.arch");
  if (arch.values.size() != 3) throw FormatError("malformed nearest-neighbor header");
  KnnModel model;
  model.spec.k = static_cast<int>(arch.values[0]);
  model.train = make_sample_set(static_cast<int>(arch.values[1]), static_cast<int>(arch.values[2]));
  model.train.x = detail::record_to_mat(detail::find_record(records, "knn.x"));
  if (model.train.x.cols != model.train.dims)
    throw FormatError("nearest-neighbor table width disagrees with header");
  for (float v : detail::find_record(records, "knn.y").values) {
    const int label = static_cast<int>(v);
    if (label < 1 || label > model.train.classes)
      throw FormatError("nearest-neighbor label outside declared classes");
    model.train.y.push_back(label);
  }
  if (model.train.y.size() != static_cast<size_t>(model.train.x.rows))
    throw FormatError("nearest-neighbor table rows disagree with labels");
  return model;
}

// --- linear machines --------------------------------------------------------

inline void save_svm(const LinearSvm& model, const std::string& path) {
  std::vector<CheckpointRecord> records;
  records.push_back(detail::meta_record("meta.kind", {1}, {static_cast<float>(BaselineKind::Svm)}));
  records.push_back(detail::meta_record(
      "meta.arch", {2}, {static_cast<float>(model.dims), static_cast<float>(model.classes)}));
  records.push_back(detail::vec_record("svm.mean", model.mean));
  records.push_back(detail::vec_record("svm.stdev", model.stdev));
  records.push_back(detail::mat_record("svm.w", model.w));
  write_checkpoint(path, records);
}

inline LinearSvm load_svm(const std::string& path) {
  const std::vector<CheckpointRecord> records = read_checkpoint(path);
  detail::check_kind(records, BaselineKind::Svm);
  const CheckpointRecord& arch = detail::find_record(records, "meta.arch");
  if (arch.values.size() != 2) throw FormatError("malformed linear-machine header");
  LinearSvm model;
  model.dims = static_cast<int>(arch.values[0]);
  model.classes = static_cast<int>(arch.values[1]);
  model.mean = detail::record_to_vec(detail::find_record(records, "svm.mean"));
  model.stdev = detail::record_to_vec(detail::find_record(records, "svm.stdev"));
  model.w = detail::record_to_mat(detail::find_record(records, "svm.w"));
  if (static_cast<int>(model.mean.size()) != model.dims ||
      static_cast<int>(model.stdev.size()) != model.dims || model.w.rows != model.classes ||
      model.w.cols != model.dims + 1)
    throw FormatError("linear-machine records disagree with header");
  return model;
}

// --- dense network ----------------------------------------------------------

inline void save_mlp(const MlpModel& model, const std::string& path) {
  std::vector<CheckpointRecord> records;
  records.push_back(detail::meta_record("meta.kind", {1}, {static_cast<float>(BaselineKind::Mlp)}));
  records.push_back(detail::meta_record(
      "meta.arch", {3},
      {static_cast<float>(model.dims), static_cast<float>(model.hidden),
       static_cast<float>(model.classes)}));
  for (CheckpointRecord& r : params_to_records(model.net.graph.params()))
    records.push_back(std::move(r));
  write_checkpoint(path, records);
}

inline MlpModel load_mlp(const std::string& path) {
  const std::vector<CheckpointRecord> records = read_checkpoint(path);
  detail::check_kind(records, BaselineKind::Mlp);
  const CheckpointRecord& arch = detail::find_record(records, "meta.arch");
  if (arch.values.size() != 3) throw FormatError("malformed dense-network header");
  MlpModel model = build_mlp(static_cast<int>(arch.values[0]), static_cast<int>(arch.values[1]),
                             static_cast<int>(arch.values[2]), 0);
  std::vector<CheckpointRecord> params;
  for (const CheckpointRecord& r : records)
    if (r.name.rfind("meta.", 0) != 0) params.push_back(r);
  records_to_params(params, model.net.graph.params());
  return model;
}

// --- filter bank -------------------------------------------------------------

inline void save_mica(const MicaBank& bank, const std::string& path) {
  std::vector<CheckpointRecord> records;
  records.push_back(detail::meta_record("meta.kind", {1}, {static_cast<float>(BaselineKind::Mica)}));
  records.push_back(detail::meta_record(
      "meta.arch", {3},
      {static_cast<float>(bank.bands), static_cast<float>(bank.filter_size),
       static_cast<float>(bank.iterations)}));
  records.push_back(detail::mat_record("mica.filters", bank.filters));
  records.push_back(detail::vec_record("mica.offsets", bank.offsets));
  write_checkpoint(path, records);
}

inline MicaBank load_mica(const std::string& path) {
  const std::vector<CheckpointRecord> records = read_checkpoint(path);
  detail::check_kind(records, BaselineKind::Mica);
  const CheckpointRecord& arch = detail::find_record(records, "meta.arch");
  if (arch.values.size() != 3) throw FormatError("malformed filter-bank header");
  MicaBank bank;
  bank.bands = static_cast<int>(arch.values[0]);
  bank.filter_size = static_cast<int>(arch.values[1]);
  bank.iterations = static_cast<int>(arch.values[2]);
  bank.filters = detail::record_to_mat(detail::find_record(records, "mica.filters"));
  bank.offsets = detail::record_to_vec(detail::find_record(records, "mica.offsets"));
  if (bank.filters.cols != bank.filter_size * bank.filter_size * bank.bands ||
      bank.offsets.size() != static_cast<size_t>(bank.filters.rows))
    throw FormatError("filter-bank records disagree with header");
  return bank;
}

// --- stacked autoencoder pipeline --------------------------------------------

inline void save_scae(const ScaeModel& model, const std::string& path) {
  std::vector<CheckpointRecord> records;
  records.push_back(detail::meta_record("meta.kind", {1}, {static_cast<float>(BaselineKind::Scae)}));
  records.push_back(detail::meta_record(
      "meta.arch", {6},
      {static_cast<float>(model.spec.caes), static_cast<float>(model.spec.hidden),
       static_cast<float>(model.spec.pool), static_cast<float>(model.bands),
       static_cast<float>(model.spec.cae_bottleneck), static_cast<float>(model.spec.variance)}));
  std::vector<double> widths(model.spec.cae_widths.begin(), model.spec.cae_widths.end());
  records.push_back(detail::vec_record("scae.widths", widths));
  records.push_back(detail::vec_record("wpca.mean", model.wpca.mean));
  records.push_back(detail::mat_record("wpca.components", model.wpca.components));
  records.push_back(detail::vec_record("wpca.eigenvalues", model.wpca.eigenvalues));
  records.push_back(detail::meta_record(
      "wpca.meta", {2},
      {static_cast<float>(model.wpca.retained), model.wpca.rank_limited ? 1.0f : 0.0f}));
  for (size_t t = 0; t < model.caes.size(); ++t)
    for (CheckpointRecord& r : params_to_records(model.caes[t].graph.params())) {
      r.name = "cae" + std::to_string(t) + "." + r.name;
      records.push_back(std::move(r));
    }
  write_checkpoint(path, records);
}

inline ScaeModel load_scae(const std::string& path) {
  const std::vector<CheckpointRecord> records = read_checkpoint(path);
  detail::check_kind(records, BaselineKind::Scae);
  const CheckpointRecord& arch = detail::find_record(records, "meta.arch");
  if (arch.values.size() != 6) throw FormatError("malformed feature-stack header");
  ScaeModel model;
  model.spec.caes = static_cast<int>(arch.values[0]);
  model.spec.hidden = static_cast<int>(arch.values[1]);
  model.spec.pool = static_cast<int>(arch.values[2]);
  model.bands = static_cast<int>(arch.values[3]);
  model.spec.cae_bottleneck = static_cast<int>(arch.values[4]);
  model.spec.variance = arch.values[5];
  model.spec.cae_widths.clear();
  for (double w : detail::record_to_vec(detail::find_record(records, "scae.widths")))
    model.spec.cae_widths.push_back(static_cast<int>(w));
  model.spec.validate();

  model.wpca.mean = detail::record_to_vec(detail::find_record(records, "wpca.mean"));
  model.wpca.components = detail::record_to_mat(detail::find_record(records, "wpca.components"));
  model.wpca.eigenvalues = detail::record_to_vec(detail::find_record(records, "wpca.eigenvalues"));
  model.wpca.kept = model.wpca.components.rows;
  const CheckpointRecord& wmeta = detail::find_record(records, "wpca.meta");
  if (wmeta.values.size() != 2) throw FormatError("malformed whitening header");
  model.wpca.retained = wmeta.values[0];
  model.wpca.rank_limited = wmeta.values[1] != 0.0f;
  if (model.wpca.components.cols != model.spec.caes * model.spec.hidden ||
      model.wpca.mean.size() != static_cast<size_t>(model.wpca.components.cols))
    throw FormatError("whitening records disagree with header");

  int ch = model.bands;
  for (int t = 0; t < model.spec.caes; ++t) {
    CaeSpec cs;
    cs.bands = ch;
    cs.widths = model.spec.cae_widths;
    cs.bottleneck = model.spec.cae_bottleneck;
    cs.hidden = model.spec.hidden;
    BuiltModel cae = build_cae(cs, 0);
    const std::string prefix = "cae" + std::to_string(t) + ".";
    std::vector<CheckpointRecord> params;
    for (const CheckpointRecord& r : records)
      if (r.name.rfind(prefix, 0) == 0) {
        CheckpointRecord stripped = r;
        stripped.name = r.name.substr(prefix.size());
        params.push_back(std::move(stripped));
      }
    records_to_params(params, cae.graph.params());
    model.caes.push_back(std::move(cae));
    ch = model.spec.hidden;
  }
  return model;
}

}  // namespace msiseg

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "msiseg/metrics.hpp"
#include "msiseg/models.hpp"
#include "msiseg/optim.hpp"
#include "msiseg/scene.hpp"

namespace msiseg {

// Training protocols: synthetic pretraining of a patch classifier, one- or
// two-stage fine-tuning of segmentation heads, a plateau learning-rate
// schedule and tiled whole-raster prediction.

// ------------------------------------------------------------ configuration

struct TrainConfig {
  int batch_size = 128;
  double lr = 2e-3;        // initial learning rate (and frozen-stage rate)
  double joint_lr = 2e-5;  // second fine-tuning stage, all layers unfrozen
  double weight_decay = 1e-4;
  double mu = 0.15;  // class-weight scale; fine-tuning conventionally uses 0.25
  int plateau_patience = 3;
  double plateau_min_delta = 1e-4;
  int max_drops = 4;
  int max_epochs = 100;
  uint64_t seed = 0;
  bool flip_horizontal = true;
  bool flip_vertical = true;

  void validate() const {
    require(batch_size >= 2, "train config: batch size must be >= 2");
    require(lr > 0.0 || lr == 0.0, "train config: negative learning rate");
    require(lr >= 0.0 && joint_lr >= 0.0, "train config: negative learning rate");
    require(weight_decay >= 0.0, "train config: negative weight decay");
    require(mu > 0.0, "train config: mu must be positive");
    require(plateau_patience >= 1, "train config: patience must be >= 1");
    require(plateau_min_delta >= 0.0, "train config: negative plateau delta");
    require(max_drops >= 0 && max_drops <= 4, "train config: drops must be in [0,4]");
    require(max_epochs >= 1, "train config: need at least one epoch");
  }
};

// Drops the learning rate by 10x whenever the validation loss has not
// improved by min_delta for `patience` consecutive epochs; after `max_drops`
// such drops the next plateau ends training. The rate is therefore
// non-increasing and takes at most max_drops + 1 distinct values.
class PlateauSchedule {
 public:
  PlateauSchedule(double initial_lr, double min_delta, int patience, int max_drops)
      : lr_(initial_lr), min_delta_(min_delta), patience_(patience), max_drops_(max_drops) {
    require(initial_lr >= 0.0, "schedule: negative learning rate");
    require(patience >= 1, "schedule: patience must be >= 1");
    require(max_drops >= 0, "schedule: negative drop count");
  }

  double lr() const { return lr_; }
  int drops() const { return drops_; }

  // Feed one validation loss per epoch; returns false once a plateau occurs
  // after the final drop, i.e. when training should stop.
  bool observe(double val_loss) {
    if (val_loss < best_ - min_delta_) {
      best_ = val_loss;
      stall_ = 0;
      return true;
    }
    if (++stall_ < patience_) return true;
    stall_ = 0;
    if (drops_ == max_drops_) return false;
    ++drops_;
    lr_ /= 10.0;
    return true;
  }

 private:
  double lr_;
  double min_delta_;
  int patience_;
  int max_drops_;
  double best_ = std::numeric_limits<double>::infinity();
  int stall_ = 0;
  int drops_ = 0;
};

// ------------------------------------------------------------ normalization

// Per-band standardization fitted on the training split and reused verbatim
// everywhere the model sees data.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stdev;

  void validate() const {
    require(!mean.empty() && mean.size() == stdev.size(), "normalizer: band count mismatch");
    for (double s : stdev)
      if (!(s > 0.0)) throw DegenerateError("normalizer: non-positive band deviation");
  }

  float apply(float v, int band) const {
    return static_cast<float>((v - mean[static_cast<size_t>(band)]) /
                              stdev[static_cast<size_t>(band)]);
  }

  static Normalizer identity(int bands) {
    Normalizer n;
    n.mean.assign(static_cast<size_t>(bands), 0.0);
    n.stdev.assign(static_cast<size_t>(bands), 1.0);
    return n;
  }
};

// ----------------------------------------------------------------- datasets

// Patch-classification dataset: windows into shared rasters, one majority
// label per window.
struct PatchDataset {
  int patch_size = 0;
  int bands = 0;
  int classes = 0;
  std::vector<MultibandRaster> rasters;
  struct Item {
    int source = 0;
    int x = 0, y = 0;
    uint8_t label = 0;
  };
  std::vector<Item> items;
  std::vector<int64_t> histogram;  // per majority label, slot 0 = unlabeled windows

  size_t size() const { return items.size(); }
};

// Dense-segmentation dataset: the same windows but trained against the full
// per-pixel label crop.
struct PixelDataset {
  int patch_size = 0;
  int bands = 0;
  int classes = 0;
  std::vector<MultibandRaster> rasters;
  std::vector<LabelMap> labels;  // parallel to rasters
  struct Item {
    int source = 0;
    int x = 0, y = 0;
  };
  std::vector<Item> items;
  std::vector<int64_t> pixel_histogram;  // per class over all item windows

  size_t size() const { return items.size(); }
};

namespace detail {

template <typename Dataset>
void check_sources(const Dataset& ds, const char* what) {
  require(!ds.rasters.empty(), std::string(what) + ": no rasters");
  require(!ds.items.empty(), std::string(what) + ": no patches");
  for (const auto& item : ds.items) {
    require(item.source >= 0 && item.source < static_cast<int>(ds.rasters.size()),
            std::string(what) + ": item source out of range");
  }
}

}  // namespace detail

// Loads a patch index file plus every raster it references. Raster paths are
// resolved relative to the index file's directory.
inline PatchDataset load_patch_dataset(const std::string& index_path) {
  const DatasetIndex idx = read_dataset_index(index_path);
  const std::filesystem::path dir = std::filesystem::path(index_path).parent_path();
  PatchDataset ds;
  ds.patch_size = idx.patch_size;
  ds.classes = idx.classes;
  ds.histogram.assign(static_cast<size_t>(idx.classes) + 1, 0);
  std::map<std::string, int> source_of;
  for (const auto& e : idx.entries) {
    auto [it, fresh] = source_of.try_emplace(e.raster_file, static_cast<int>(ds.rasters.size()));
    if (fresh) {
      ds.rasters.push_back(read_raster((dir / e.raster_file).string()));
      const MultibandRaster& r = ds.rasters.back();
      if (ds.bands == 0)
        ds.bands = r.bands;
      else if (r.bands != ds.bands)
        throw FormatError(index_path + ": rasters disagree on band count");
    }
    const MultibandRaster& r = ds.rasters[static_cast<size_t>(it->second)];
    if (e.x < 0 || e.y < 0 || e.x + idx.patch_size > r.width || e.y + idx.patch_size > r.height)
      throw FormatError(index_path + ": patch window outside raster");
    ds.items.push_back({it->second, e.x, e.y, static_cast<uint8_t>(e.label)});
    ++ds.histogram[static_cast<size_t>(e.label)];
  }
  detail::check_sources(ds, "patch dataset");
  return ds;
}

// Same loading path, keeping the per-pixel label maps instead of the window
// majorities.
inline PixelDataset load_pixel_dataset(const std::string& index_path) {
  const DatasetIndex idx = read_dataset_index(index_path);
  const std::filesystem::path dir = std::filesystem::path(index_path).parent_path();
  PixelDataset ds;
  ds.patch_size = idx.patch_size;
  ds.classes = idx.classes;
  ds.pixel_histogram.assign(static_cast<size_t>(idx.classes) + 1, 0);
  std::map<std::string, int> source_of;
  for (const auto& e : idx.entries) {
    auto [it, fresh] = source_of.try_emplace(e.raster_file, static_cast<int>(ds.rasters.size()));
    if (fresh) {
      ds.rasters.push_back(read_raster((dir / e.raster_file).string()));
      ds.labels.push_back(read_labels((dir / e.label_file).string()));
      const MultibandRaster& r = ds.rasters.back();
      const LabelMap& l = ds.labels.back();
      if (l.width != r.width || l.height != r.height)
        throw FormatError(index_path + ": label dims do not match raster");
      if (ds.bands == 0)
        ds.bands = r.bands;
      else if (r.bands != ds.bands)
        throw FormatError(index_path + ": rasters disagree on band count");
    }
    const MultibandRaster& r = ds.rasters[static_cast<size_t>(it->second)];
    if (e.x < 0 || e.y < 0 || e.x + idx.patch_size > r.width || e.y + idx.patch_size > r.height)
      throw FormatError(index_path + ": patch window outside raster");
    ds.items.push_back({it->second, e.x, e.y});
    const LabelMap& l = ds.labels[static_cast<size_t>(it->second)];
    for (int y = e.y; y < e.y + idx.patch_size; ++y)
      for (int x = e.x; x < e.x + idx.patch_size; ++x)
        ++ds.pixel_histogram[l.at(y, x)];
  }
  detail::check_sources(ds, "pixel dataset");
  return ds;
}

// In-memory dataset builders used by benchmarks and tests.
inline PatchDataset patch_dataset_from_scenes(const std::vector<RenderedScene>& scenes,
                                              int patch_size, double overlap) {
  require(!scenes.empty(), "patch dataset: no scenes");
  PatchDataset ds;
  ds.patch_size = patch_size;
  for (const auto& s : scenes) {
    ds.classes = std::max(ds.classes, s.labels->classes);
    if (ds.bands == 0) ds.bands = s.image->bands;
    require(s.image->bands == ds.bands, "patch dataset: band count mismatch across scenes");
  }
  ds.histogram.assign(static_cast<size_t>(ds.classes) + 1, 0);
  for (const auto& s : scenes) {
    const int source = static_cast<int>(ds.rasters.size());
    ds.rasters.push_back(*s.image);
    const PatchSet ps = tile_flight(s.image, s.labels, patch_size, overlap);
    for (const auto& item : ps.items) {
      ds.items.push_back({source, item.x, item.y, static_cast<uint8_t>(item.majority)});
      ++ds.histogram[static_cast<size_t>(item.majority)];
    }
  }
  return ds;
}

inline PixelDataset pixel_dataset_from_scenes(const std::vector<RenderedScene>& scenes,
                                              int patch_size, double overlap) {
  require(!scenes.empty(), "pixel dataset: no scenes");
  PixelDataset ds;
  ds.patch_size = patch_size;
  for (const auto& s : scenes) {
    ds.classes = std::max(ds.classes, s.labels->classes);
    if (ds.bands == 0) ds.bands = s.image->bands;
    require(s.image->bands == ds.bands, "pixel dataset: band count mismatch across scenes");
  }
  ds.pixel_histogram.assign(static_cast<size_t>(ds.classes) + 1, 0);
  for (const auto& s : scenes) {
    const int source = static_cast<int>(ds.rasters.size());
    ds.rasters.push_back(*s.image);
    ds.labels.push_back(*s.labels);
    const PatchSet ps = tile_flight(s.image, s.labels, patch_size, overlap);
    for (const auto& item : ps.items) {
      ds.items.push_back({source, item.x, item.y});
      for (int y = item.y; y < item.y + patch_size; ++y)
        for (int x = item.x; x < item.x + patch_size; ++x)
          ++ds.pixel_histogram[s.labels->at(y, x)];
    }
  }
  return ds;
}

// Per-band mean and population deviation over every patch window. Bands with
// no spread cannot be standardized and are rejected.
template <typename Dataset>
Normalizer fit_normalizer(const Dataset& ds) {
  detail::check_sources(ds, "normalizer");
  const int bands = ds.bands;
  std::vector<double> sum(static_cast<size_t>(bands), 0.0);
  int64_t count = 0;
  for (const auto& item : ds.items) {
    const MultibandRaster& r = ds.rasters[static_cast<size_t>(item.source)];
    for (int y = item.y; y < item.y + ds.patch_size; ++y)
      for (int x = item.x; x < item.x + ds.patch_size; ++x) {
        ++count;
        for (int b = 0; b < bands; ++b) sum[static_cast<size_t>(b)] += r.at(b, y, x);
      }
  }
  Normalizer norm;
  norm.mean.resize(static_cast<size_t>(bands));
  norm.stdev.assign(static_cast<size_t>(bands), 0.0);
  for (int b = 0; b < bands; ++b)
    norm.mean[static_cast<size_t>(b)] = sum[static_cast<size_t>(b)] / static_cast<double>(count);
  for (const auto& item : ds.items) {
    const MultibandRaster& r = ds.rasters[static_cast<size_t>(item.source)];
    for (int y = item.y; y < item.y + ds.patch_size; ++y)
      for (int x = item.x; x < item.x + ds.patch_size; ++x)
        for (int b = 0; b < bands; ++b) {
          const double d = r.at(b, y, x) - norm.mean[static_cast<size_t>(b)];
          norm.stdev[static_cast<size_t>(b)] += d * d;
        }
  }
  for (int b = 0; b < bands; ++b) {
    norm.stdev[static_cast<size_t>(b)] =
        std::sqrt(norm.stdev[static_cast<size_t>(b)] / static_cast<double>(count));
  }
  norm.validate();
  return norm;
}

// --------------------------------------------------------------- checkpoints

// Model checkpoints carry the input normalization next to the parameters so
// a restored model preprocesses data exactly as it was trained.
inline void save_model_checkpoint(const Graph<float>& graph, const Normalizer& norm,
                                  const std::string& path) {
  norm.validate();
  auto records = params_to_records(graph.params());
  CheckpointRecord mean, stdev;
  mean.name = "norm.mean";
  stdev.name = "norm.stdev";
  mean.trainable = stdev.trainable = false;
  mean.shape = stdev.shape = {static_cast<int>(norm.mean.size())};
  for (double v : norm.mean) mean.values.push_back(static_cast<float>(v));
  for (double v : norm.stdev) stdev.values.push_back(static_cast<float>(v));
  records.push_back(std::move(mean));
  records.push_back(std::move(stdev));
  write_checkpoint(path, records);
}

inline Normalizer load_model_checkpoint(const std::string& path, Graph<float>& graph) {
  auto records = read_checkpoint(path);
  Normalizer norm;
  std::vector<CheckpointRecord> rest;
  for (auto& r : records) {
    if (r.name == "norm.mean")
      norm.mean.assign(r.values.begin(), r.values.end());
    else if (r.name == "norm.stdev")
      norm.stdev.assign(r.values.begin(), r.values.end());
    else
      rest.push_back(std::move(r));
  }
  if (norm.mean.empty() || norm.stdev.empty())
    throw FormatError(path + ": checkpoint lacks normalization records");
  norm.validate();
  records_to_params(rest, graph.params());
  return norm;
}

// Copies every checkpoint record whose name starts with `prefix` into the
// store (the transfer-learning path: pull "encoder." out of a classifier
// checkpoint into a segmentation model). Records outside the prefix are
// ignored; store parameters under the prefix must all be covered.
inline void load_params_matching(const std::vector<CheckpointRecord>& records,
                                 ParamStore<float>& store, const std::string& prefix) {
  require(!prefix.empty(), "load_params_matching: empty prefix");
  std::set<std::string> covered;
  for (const auto& r : records) {
    if (r.name.rfind(prefix, 0) != 0) continue;
    if (!store.has(r.name))
      throw FormatError("checkpoint parameter '" + r.name + "' unknown to this model");
    Param<float>& p = store.get(r.name);
    if (r.shape != p.tensor.shape)
      throw ShapeError("checkpoint parameter '" + r.name + "' has shape " + shape_str(r.shape) +
                       ", model expects " + shape_str(p.tensor.shape));
    p.tensor.values = r.values;
    covered.insert(r.name);
  }
  for (const std::string& name : store.names()) {
    if (name.rfind(prefix, 0) == 0 && !covered.count(name))
      throw FormatError("checkpoint does not cover model parameter '" + name + "'");
  }
  if (covered.empty()) throw FormatError("checkpoint has no parameters under '" + prefix + "'");
}

// ------------------------------------------------------------ training loop

struct EpochRow {
  int epoch = 0;
  std::string stage;
  std::string split;  // train | val
  double loss = 0.0;
  double accuracy = 0.0;  // overall accuracy of argmax predictions
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> curves;
  ClassWeights weights;
  Normalizer normalizer;
  double final_val_loss = 0.0;
  double final_val_accuracy = 0.0;
  int epochs = 0;
  int lr_drops = 0;
};

inline void write_curves_csv(const std::vector<EpochRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "epoch,stage,split,loss,accuracy,lr\n";
  for (const auto& r : rows)
    out << r.epoch << "," << r.stage << "," << r.split << "," << format_real(r.loss) << ","
        << format_real(r.accuracy) << "," << format_real(r.lr) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

namespace detail {

// One materialized mini-batch: standardized pixels, per-position targets and
// per-position loss weights.
struct Batch {
  Tensor<float> x;
  std::vector<uint8_t> targets;
  std::vector<double> weights;
};

inline void fill_patch_batch(const PatchDataset& ds, const std::vector<size_t>& pick,
                             const Normalizer& norm, const ClassWeights& cw, bool flip_h,
                             bool flip_v, Rng* rng, Batch& batch) {
  const int P = ds.patch_size;
  const int B = static_cast<int>(pick.size());
  batch.x.reset({B, ds.bands, P, P});
  batch.targets.resize(pick.size());
  batch.weights.resize(pick.size());
  for (int n = 0; n < B; ++n) {
    const auto& item = ds.items[pick[static_cast<size_t>(n)]];
    const MultibandRaster& r = ds.rasters[static_cast<size_t>(item.source)];
    const bool fh = flip_h && rng && rng->uniform() < 0.5;
    const bool fv = flip_v && rng && rng->uniform() < 0.5;
    for (int b = 0; b < ds.bands; ++b)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          const int sy = item.y + (fv ? P - 1 - y : y);
          const int sx = item.x + (fh ? P - 1 - x : x);
          batch.x.at(n, b, y, x) = norm.apply(r.at(b, sy, sx), b);
        }
    batch.targets[static_cast<size_t>(n)] = item.label;
    batch.weights[static_cast<size_t>(n)] = cw.weight_for(item.label);
  }
}

inline void fill_pixel_batch(const PixelDataset& ds, const std::vector<size_t>& pick,
                             const Normalizer& norm, const ClassWeights& cw, bool flip_h,
                             bool flip_v, Rng* rng, Batch& batch) {
  const int P = ds.patch_size;
  const int B = static_cast<int>(pick.size());
  batch.x.reset({B, ds.bands, P, P});
  batch.targets.resize(static_cast<size_t>(B) * P * P);
  batch.weights.resize(batch.targets.size());
  for (int n = 0; n < B; ++n) {
    const auto& item = ds.items[pick[static_cast<size_t>(n)]];
    const MultibandRaster& r = ds.rasters[static_cast<size_t>(item.source)];
    const LabelMap& l = ds.labels[static_cast<size_t>(item.source)];
    const bool fh = flip_h && rng && rng->uniform() < 0.5;
    const bool fv = flip_v && rng && rng->uniform() < 0.5;
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x) {
        const int sy = item.y + (fv ? P - 1 - y : y);
        const int sx = item.x + (fh ? P - 1 - x : x);
        for (int b = 0; b < ds.bands; ++b) batch.x.at(n, b, y, x) = norm.apply(r.at(b, sy, sx), b);
        const size_t p = (static_cast<size_t>(n) * P + y) * P + x;
        const uint8_t t = l.at(sy, sx);
        batch.targets[p] = t;
        batch.weights[p] = cw.weight_for(t);
      }
  }
}

// Fraction of weighted positions whose argmax prediction hits the target.
inline void count_hits(const Tensor<float>& logits, const std::vector<uint8_t>& targets,
                       int64_t& hits, int64_t& total) {
  const int N = logits.n(), C = logits.c(), H = logits.h(), W = logits.w();
  for (int n = 0; n < N; ++n)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const uint8_t t = targets[(static_cast<size_t>(n) * H + y) * W + x];
        if (t == 0) continue;
        int best = 0;
        float best_v = logits.at(n, 0, y, x);
        for (int c = 1; c < C; ++c) {
          if (logits.at(n, c, y, x) > best_v) {
            best_v = logits.at(n, c, y, x);
            best = c;
          }
        }
        ++total;
        if (best + 1 == t) ++hits;
      }
}

// Shared epoch engine. `fill` materializes a batch from item indices; the
// validation pass reuses it with augmentation disabled.
template <typename FillFn>
TrainResult run_stage(BuiltModel& model, size_t train_items, size_t val_items, FillFn&& fill,
                      const TrainConfig& cfg, const std::string& stage,
                      const ClassWeights& weights, const Normalizer& norm) {
  cfg.validate();
  require(train_items >= static_cast<size_t>(cfg.batch_size),
          "training: fewer items than one batch");
  require(val_items >= 1, "training: empty validation split");

  TrainResult result;
  result.weights = weights;
  result.normalizer = norm;

  Nadam<float> opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  PlateauSchedule sched(cfg.lr, cfg.plateau_min_delta, cfg.plateau_patience, cfg.max_drops);
  Rng rng(hash_combine(cfg.seed, fnv1a(stage)));

  std::vector<size_t> order(train_items);
  for (size_t i = 0; i < train_items; ++i) order[i] = i;

  detail::Batch batch;
  Tensor<float> grad;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    opt.lr = sched.lr();
    rng.shuffle(order);
    double train_loss = 0.0;
    int64_t train_batches = 0, train_hits = 0, train_total = 0;
    for (size_t start = 0; start + cfg.batch_size <= train_items;
         start += static_cast<size_t>(cfg.batch_size)) {
      const std::vector<size_t> pick(order.begin() + static_cast<long>(start),
                                     order.begin() + static_cast<long>(start) + cfg.batch_size);
      fill(pick, true, &rng, batch);
      double wsum = 0.0;
      for (double w : batch.weights) wsum += w;
      if (wsum <= 0.0) continue;  // a window of pure background teaches nothing
      const Tensor<float>& logits = model.forward(batch.x, true);
      const double loss = weighted_softmax_ce(logits, batch.targets, batch.weights, &grad);
      if (!std::isfinite(loss))
        throw NumericError("training diverged: non-finite loss in stage '" + stage + "' epoch " +
                           std::to_string(epoch));
      model.graph.params().zero_grad();
      model.graph.backward(grad);
      opt.step(model.graph.params());
      train_loss += loss;
      ++train_batches;
      detail::count_hits(logits, batch.targets, train_hits, train_total);
    }
    require(train_batches > 0, "training: every batch was pure background");
    train_loss /= static_cast<double>(train_batches);

    double val_loss = 0.0;
    int64_t val_batches = 0, val_hits = 0, val_total = 0;
    for (size_t start = 0; start < val_items; start += static_cast<size_t>(cfg.batch_size)) {
      std::vector<size_t> pick;
      for (size_t i = start; i < std::min(val_items, start + cfg.batch_size); ++i)
        pick.push_back(i);
      fill(pick, false, nullptr, batch);
      double wsum = 0.0;
      for (double w : batch.weights) wsum += w;
      if (wsum <= 0.0) continue;
      const Tensor<float>& logits = model.forward(batch.x, false);
      val_loss += weighted_softmax_ce(logits, batch.targets, batch.weights, nullptr);
      ++val_batches;
      detail::count_hits(logits, batch.targets, val_hits, val_total);
    }
    require(val_batches > 0, "training: validation split is pure background");
    val_loss /= static_cast<double>(val_batches);
    if (!std::isfinite(val_loss))
      throw NumericError("training diverged: non-finite validation loss in stage '" + stage +
                         "' epoch " + std::to_string(epoch));

    const double train_acc =
        train_total > 0 ? static_cast<double>(train_hits) / static_cast<double>(train_total) : 0.0;
    const double val_acc =
        val_total > 0 ? static_cast<double>(val_hits) / static_cast<double>(val_total) : 0.0;
    result.curves.push_back({epoch, stage, "train", train_loss, train_acc, sched.lr()});
    result.curves.push_back({epoch, stage, "val", val_loss, val_acc, sched.lr()});
    result.final_val_loss = val_loss;
    result.final_val_accuracy = val_acc;
    result.epochs = epoch;
    if (!sched.observe(val_loss)) break;
  }
  result.lr_drops = sched.drops();
  return result;
}

}  // namespace detail

// ------------------------------------------------------------- entry points

// Trains an image classifier on majority-labeled patches (the synthetic
// pretraining stage). Unlabeled patches are excluded; class weights follow
// the log-quotient rule with cfg.mu.
inline TrainResult pretrain_classifier(BuiltModel& model, const PatchDataset& train,
                                       const PatchDataset& val, const TrainConfig& cfg) {
  detail::check_sources(train, "pretrain");
  detail::check_sources(val, "pretrain");
  require(train.classes >= 2, "pretrain: need at least two classes");
  require(train.classes == model.classes, "pretrain: model/dataset class mismatch");
  require(train.bands == model.bands && val.bands == model.bands,
          "pretrain: model/dataset band mismatch");

  int populated = 0;
  for (size_t c = 1; c < train.histogram.size(); ++c)
    if (train.histogram[c] > 0) ++populated;
  if (populated < 2) throw DegenerateError("pretrain: fewer than two populated classes");
  const ClassWeights weights = class_weights(train.histogram, cfg.mu);
  const Normalizer norm = fit_normalizer(train);

  std::vector<size_t> train_ids, val_ids;
  for (size_t i = 0; i < train.items.size(); ++i)
    if (train.items[i].label != 0) train_ids.push_back(i);
  for (size_t i = 0; i < val.items.size(); ++i)
    if (val.items[i].label != 0) val_ids.push_back(i);
  if (train_ids.empty() || val_ids.empty())
    throw DegenerateError("pretrain: a split has no labeled patches");

  auto fill = [&](const std::vector<size_t>& pick, bool training, Rng* rng,
                  detail::Batch& batch) {
    std::vector<size_t> mapped(pick.size());
    const std::vector<size_t>& ids = training ? train_ids : val_ids;
    for (size_t i = 0; i < pick.size(); ++i) mapped[i] = ids[pick[i]];
    detail::fill_patch_batch(training ? train : val, mapped, norm, weights,
                             training && cfg.flip_horizontal, training && cfg.flip_vertical, rng,
                             batch);
  };
  return detail::run_stage(model, train_ids.size(), val_ids.size(), fill, cfg, "pretrain",
                           weights, norm);
}

enum class FinetuneInit { Random, Pretrained };

// Single segmentation training stage under the plateau schedule. Freezing is
// the caller's responsibility (finetune_segmentation handles the two-stage
// protocol).
inline TrainResult train_segmentation_stage(BuiltModel& model, const PixelDataset& train,
                                            const PixelDataset& val, const TrainConfig& cfg,
                                            const std::string& stage) {
  detail::check_sources(train, "finetune");
  detail::check_sources(val, "finetune");
  require(train.classes == model.classes, "finetune: model/dataset class mismatch");
  require(train.bands == model.bands && val.bands == model.bands,
          "finetune: model/dataset band mismatch");
  require(train.patch_size % model.downsample == 0,
          "finetune: patch size incompatible with encoder depth");

  const ClassWeights weights = class_weights(train.pixel_histogram, cfg.mu);
  const Normalizer norm = fit_normalizer(train);
  auto fill = [&](const std::vector<size_t>& pick, bool training, Rng* rng,
                  detail::Batch& batch) {
    detail::fill_pixel_batch(training ? train : val, pick, norm, weights,
                             training && cfg.flip_horizontal, training && cfg.flip_vertical, rng,
                             batch);
  };
  return detail::run_stage(model, train.size(), val.size(), fill, cfg, stage, weights, norm);
}

// Fine-tuning protocol. Random initialization trains everything in one stage
// at cfg.lr. A pretrained encoder is first kept frozen while the head trains
// at cfg.lr, then the whole network trains jointly at cfg.joint_lr.
inline TrainResult finetune_segmentation(BuiltModel& model, const PixelDataset& train,
                                         const PixelDataset& val, FinetuneInit init,
                                         const TrainConfig& cfg) {
  if (init == FinetuneInit::Random)
    return train_segmentation_stage(model, train, val, cfg, "finetune");

  model.graph.set_frozen("encoder.", true);
  TrainResult first = train_segmentation_stage(model, train, val, cfg, "finetune-frozen");
  model.graph.set_frozen("encoder.", false);

  TrainConfig joint = cfg;
  joint.lr = cfg.joint_lr;
  TrainResult second = train_segmentation_stage(model, train, val, joint, "finetune-joint");
  second.curves.insert(second.curves.begin(), first.curves.begin(), first.curves.end());
  second.epochs += first.epochs;
  return second;
}

// --------------------------------------------------------- tiled prediction

// Whole-raster segmentation: the raster is tiled with 50% overlap (by
// default) and each pixel takes the prediction of the tile whose center lies
// closest, which discards patch-border artifacts wherever an interior tile is
// available.
inline LabelMap predict_raster(BuiltModel& model, const MultibandRaster& raster,
                               const Normalizer& norm, int patch_size, double overlap = 0.5) {
  if (raster.bands != model.bands) throw ShapeError("predict: band count mismatch");
  require(patch_size % model.downsample == 0,
          "predict: patch size incompatible with encoder depth");
  if (patch_size > raster.width || patch_size > raster.height)
    throw ArgumentError("predict: patch size exceeds raster dims");
  norm.validate();
  if (static_cast<int>(norm.mean.size()) != raster.bands)
    throw ShapeError("predict: normalizer band mismatch");

  LabelMap out;
  out.width = raster.width;
  out.height = raster.height;
  out.classes = model.classes;
  out.labels.assign(static_cast<size_t>(raster.width) * raster.height, 0);
  std::vector<int> best_d(out.labels.size(), std::numeric_limits<int>::max());

  const int stride = overlap_stride(patch_size, overlap);
  const auto ys = tile_positions(raster.height, patch_size, stride);
  const auto xs = tile_positions(raster.width, patch_size, stride);
  Tensor<float> x({1, raster.bands, patch_size, patch_size});
  for (int ty : ys) {
    for (int tx : xs) {
      for (int b = 0; b < raster.bands; ++b)
        for (int y = 0; y < patch_size; ++y)
          for (int px = 0; px < patch_size; ++px)
            x.at(0, b, y, px) = norm.apply(raster.at(b, ty + y, tx + px), b);
      const Tensor<float>& logits = model.forward(x, false);
      // Tile center in doubled coordinates keeps the distance integral.
      const int cx2 = 2 * tx + patch_size - 1;
      const int cy2 = 2 * ty + patch_size - 1;
      for (int y = 0; y < patch_size; ++y) {
        for (int px = 0; px < patch_size; ++px) {
          const size_t at = static_cast<size_t>(ty + y) * raster.width + (tx + px);
          const int d = std::max(std::abs(2 * (tx + px) - cx2), std::abs(2 * (ty + y) - cy2));
          if (d >= best_d[at]) continue;
          best_d[at] = d;
          int best = 0;
          float best_v = logits.at(0, 0, y, px);
          for (int c = 1; c < model.classes; ++c) {
            if (logits.at(0, c, y, px) > best_v) {
              best_v = logits.at(0, c, y, px);
              best = c;
            }
          }
          out.labels[at] = static_cast<uint8_t>(best + 1);
        }
      }
    }
  }
  return out;
}

}  // namespace msiseg

#pragma once

// Bundled fixed-seed benchmarks, each sized for a single laptop core: a
// transfer study that measures how much synthetic-corpus pretraining improves
// the two segmentation heads on a data-poor target flight, a band-ablation
// study on a vegetation palette whose classes progressively need the
// red-edge and near-infrared bands, and quick fits of the classical baseline
// families. All scene synthesis, initialization and batching derive from the
// benchmark seed, so identical seeds reproduce identical numbers.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msiseg/ablation.hpp"
#include "msiseg/baselines.hpp"
#include "msiseg/metrics.hpp"
#include "msiseg/models.hpp"
#include "msiseg/scene.hpp"
#include "msiseg/trainer.hpp"

namespace msiseg {

// ---------------------------------------------------------------------------
// Benchmark palettes
// ---------------------------------------------------------------------------

// Five materials for the transfer study, tuned so a small fine-tuning set
// underdetermines the task. Meadow and canopy differ by a 7% reflectance
// offset buried under a wider texture spread, so the pair needs spatial
// context; paving and sand are kept rare, so a short target flight shows few
// of their pixels while the wide pretraining corpus shows plenty. The meadow
// dominates, so random layouts make it the background class.
inline std::vector<MaterialSpec> transfer_palette() {
  const std::vector<double> nm = {450, 550, 650, 720, 800, 900};
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
  p.push_back(mat("meadow", 1, {0.050, 0.100, 0.060, 0.420, 0.500, 0.460}, 0.10, 120.0));
  p.push_back(mat("canopy", 2, {0.046, 0.093, 0.056, 0.390, 0.465, 0.428}, 0.14, 70.0));
  p.push_back(mat("water", 3, {0.070, 0.060, 0.040, 0.020, 0.010, 0.006}, 0.03, 50.0));
  p.push_back(mat("paving", 4, {0.060, 0.070, 0.075, 0.080, 0.085, 0.090}, 0.05, 10.0));
  p.push_back(mat("sand", 5, {0.180, 0.280, 0.340, 0.380, 0.420, 0.440}, 0.08, 6.0));
  return p;
}

// Five materials engineered so band subsets carry strictly increasing
// information: grass and shrub share visible and red-edge reflectance and
// split only in the two near-infrared bands, tree and conifer share visible
// and near-infrared reflectance and split only at the red edge, and soil is
// distinct everywhere. RGB therefore confuses two class pairs, adding the
// red-edge band resolves one of them, and the full stack resolves both.
inline std::vector<MaterialSpec> vegetation_palette() {
  const std::vector<double> nm = {450, 550, 650, 720, 800, 900};
  auto mat = [&](const char* name, int cls, std::vector<double> rho, double rarity) {
    MaterialSpec m;
    m.name = name;
    m.class_id = cls;
    m.curve_nm = nm;
    m.curve_rho = std::move(rho);
    m.texture_scale = 0.08;
    m.rarity = rarity;
    return m;
  };
  std::vector<MaterialSpec> p;
  p.push_back(mat("soil", 1, {0.160, 0.220, 0.300, 0.340, 0.380, 0.400}, 60.0));
  p.push_back(mat("grass", 2, {0.050, 0.110, 0.070, 0.350, 0.520, 0.500}, 30.0));
  p.push_back(mat("shrub", 3, {0.050, 0.110, 0.070, 0.350, 0.340, 0.300}, 30.0));
  p.push_back(mat("tree", 4, {0.040, 0.080, 0.050, 0.200, 0.440, 0.420}, 30.0));
  p.push_back(mat("conifer", 5, {0.040, 0.080, 0.050, 0.380, 0.440, 0.420}, 30.0));
  return p;
}

namespace detail {

inline RenderedScene benchmark_scene(uint64_t seed, const std::vector<MaterialSpec>& palette,
                                     const std::string& season, double extent_m,
                                     int region_count) {
  RenderConfig rc;
  rc.gsd_m = 1.0;
  return render_scene(random_scene(seed, palette, extent_m, region_count, season), rc);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Transfer study
// ---------------------------------------------------------------------------

struct TransferOutcome {
  double pretrained_aa = 0.0;  // average accuracy with a pretrained encoder
  double random_aa = 0.0;      // average accuracy trained from scratch

  double gap() const { return pretrained_aa - random_aa; }
};

struct TransferReport {
  TransferOutcome mask_head;     // top-down mask-refinement head
  TransferOutcome cascade_head;  // cascaded-refinement head
};

// Pretrains a patch classifier on a wide summer corpus, then fine-tunes both
// segmentation heads on a single small autumn flight twice — once from the
// pretrained encoder (frozen stage plus low-rate joint stage) and once from
// scratch — and scores each model on a held-out autumn flight. The fine-tune
// flight is deliberately tiny, which is exactly the regime where encoder
// pretraining should pay off.
inline TransferReport transfer_benchmark(uint64_t seed) {
  const std::vector<MaterialSpec> palette = transfer_palette();
  const int classes = 5;
  const int patch = 16;

  std::vector<RenderedScene> pre_train, pre_val;
  for (int i = 0; i < 12; ++i)
    pre_train.push_back(detail::benchmark_scene(hash_combine(seed, 100 + i), palette, "summer",
                                                64.0, 30));
  for (int i = 0; i < 2; ++i)
    pre_val.push_back(detail::benchmark_scene(hash_combine(seed, 200 + i), palette, "summer",
                                              64.0, 30));
  std::vector<RenderedScene> tune_train = {
      detail::benchmark_scene(hash_combine(seed, 300), palette, "autumn", 48.0, 24)};
  std::vector<RenderedScene> tune_val = {
      detail::benchmark_scene(hash_combine(seed, 310), palette, "autumn", 48.0, 24)};
  std::vector<RenderedScene> held_out;
  for (int i = 0; i < 2; ++i)
    held_out.push_back(detail::benchmark_scene(hash_combine(seed, 320 + i), palette, "autumn",
                                               96.0, 70));

  const PatchDataset cls_train = patch_dataset_from_scenes(pre_train, patch, 0.5);
  const PatchDataset cls_val = patch_dataset_from_scenes(pre_val, patch, 0.5);
  const PixelDataset seg_train = pixel_dataset_from_scenes(tune_train, patch, 0.5);
  const PixelDataset seg_val = pixel_dataset_from_scenes(tune_val, patch, 0.5);

  EncoderSpec enc;
  enc.bands = 6;
  enc.channels = {8, 16, 32};

  BuiltModel classifier = build_classifier(enc, classes, patch, hash_combine(seed, 1));
  TrainConfig pre_cfg;
  pre_cfg.batch_size = 32;
  pre_cfg.max_epochs = 24;
  pre_cfg.plateau_patience = 3;
  pre_cfg.max_drops = 2;
  pre_cfg.seed = hash_combine(seed, 2);
  pretrain_classifier(classifier, cls_train, cls_val, pre_cfg);
  const std::vector<CheckpointRecord> encoder_records =
      params_to_records(classifier.graph.params());

  auto run_arm = [&](bool cascade, FinetuneInit init) {
    BuiltModel model;
    if (cascade) {
      RefineNetSpec head;
      head.rcu_per_input = 2;
      head.crp_windows = {2, 4, 8};
      model = build_refinenet(enc, head, classes, hash_combine(seed, 3));
    } else {
      SharpMaskSpec head;
      head.base_width = 32;
      head.bridge_width = 64;
      model = build_sharpmask(enc, head, classes, hash_combine(seed, 3));
    }
    if (init == FinetuneInit::Pretrained)
      load_params_matching(encoder_records, model.graph.params(), "encoder.");
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.mu = 0.25;
    cfg.max_epochs = 24;
    cfg.plateau_patience = 3;
    cfg.max_drops = 1;
    cfg.seed = hash_combine(seed, 4);
    const TrainResult fit = finetune_segmentation(model, seg_train, seg_val, init, cfg);
    ConfusionMatrix merged(classes);
    for (const RenderedScene& scene : held_out) {
      const LabelMap pred = predict_raster(model, *scene.image, fit.normalizer, patch);
      merged.merge(evaluate(pred, *scene.labels).confusion);
    }
    return summarize_confusion(merged).average_accuracy;
  };

  TransferReport report;
  report.mask_head.random_aa = run_arm(false, FinetuneInit::Random);
  report.mask_head.pretrained_aa = run_arm(false, FinetuneInit::Pretrained);
  report.cascade_head.random_aa = run_arm(true, FinetuneInit::Random);
  report.cascade_head.pretrained_aa = run_arm(true, FinetuneInit::Pretrained);
  return report;
}

// ---------------------------------------------------------------------------
// Band-ablation study
// ---------------------------------------------------------------------------

// Trains one linear classifier per band subset on a vegetation flight and
// scores a held-out flight. With vegetation_palette() the expected ordering
// is RGB < RGB+red-edge < full stack.
inline AblationTable vegetation_ablation_benchmark(uint64_t seed) {
  const std::vector<MaterialSpec> palette = vegetation_palette();
  const RenderedScene train =
      detail::benchmark_scene(hash_combine(seed, 11), palette, "summer", 64.0, 36);
  const RenderedScene test =
      detail::benchmark_scene(hash_combine(seed, 12), palette, "summer", 64.0, 36);
  const std::vector<BandSubset> subsets = {
      {"rgb", {0, 1, 2}}, {"vnir4", {0, 1, 2, 3}}, {"all6", {0, 1, 2, 3, 4, 5}}};
  SvmSpec spec;
  spec.cost = 1.0;
  spec.epochs = 60;
  spec.seed = hash_combine(seed, 13);
  return band_ablation(*train.image, *train.labels, *test.image, *test.labels, subsets, spec,
                       /*stride=*/2);
}

// ---------------------------------------------------------------------------
// Baseline family floor
// ---------------------------------------------------------------------------

// Fits each classical family on one vegetation flight and scores another,
// returning (family, average accuracy) pairs. Used to confirm that every
// bundled model family lands above the 1-in-5 chance floor.
inline std::vector<std::pair<std::string, double>> baseline_floor_benchmark(uint64_t seed) {
  const std::vector<MaterialSpec> palette = vegetation_palette();
  const RenderedScene train =
      detail::benchmark_scene(hash_combine(seed, 21), palette, "summer", 64.0, 36);
  const RenderedScene test =
      detail::benchmark_scene(hash_combine(seed, 22), palette, "summer", 64.0, 36);
  const SampleSet train_px = pixel_samples(*train.image, *train.labels, /*stride=*/3);
  auto aa = [&](const LabelMap& pred) {
    return evaluate(pred, *test.labels, &test.image->valid_mask).average_accuracy;
  };

  std::vector<std::pair<std::string, double>> out;

  KnnSpec knn;
  out.emplace_back("knn", aa(knn_fit_predict(*train.image, *train.labels, *test.image, knn)));

  SvmSpec svm;
  svm.epochs = 50;
  svm.seed = hash_combine(seed, 23);
  out.emplace_back("svm", aa(svm_predict_raster(svm_fit(train_px, svm), *test.image)));

  MlpSpec mlp;
  mlp.hidden = 16;
  mlp.epochs = 40;
  mlp.batch = 128;
  mlp.seed = hash_combine(seed, 24);
  MlpModel mlp_model = mlp_fit(train_px, mlp);
  out.emplace_back("mlp", aa(mlp_predict_raster(mlp_model, *test.image)));

  MlpSpec head;
  head.hidden = 16;
  head.epochs = 40;
  head.batch = 128;
  head.seed = hash_combine(seed, 26);

  MicaSpec mica;
  mica.filters = 6;
  mica.filter_size = 3;
  mica.pool = 5;
  mica.sample_patches = 80;
  mica.max_iters = 2000;
  mica.seed = hash_combine(seed, 25);
  const MicaBank bank = mica_fit({*train.image}, mica);
  const MultibandRaster train_feats = mica_features(*train.image, bank, mica.pool);
  const MultibandRaster test_feats = mica_features(*test.image, bank, mica.pool);
  MlpModel mica_head = mlp_fit(pixel_samples(train_feats, *train.labels, /*stride=*/2), head);
  out.emplace_back("mica", aa(mlp_predict_raster(mica_head, test_feats)));

  ScaeSpec scae;
  scae.caes = 2;
  scae.hidden = 8;
  scae.pool = 5;
  scae.variance = 0.98;
  scae.cae_widths = {8};
  scae.cae_bottleneck = 16;
  scae.cae_epochs = 6;
  scae.seed = hash_combine(seed, 27);
  ScaeModel stack = scae_fit({*train.image}, scae);
  const Mat train_rows = scae_features(stack, *train.image);
  const Mat test_rows = scae_features(stack, *test.image);
  MlpModel scae_head =
      mlp_fit(samples_from_features(train_rows, *train.labels, /*stride=*/2), head);
  const std::vector<int> pred_rows = mlp_predict(scae_head, test_rows);
  LabelMap scae_pred = LabelMap::make(test.image->width, test.image->height,
                                      test.labels->classes);
  for (int y = 0; y < scae_pred.height; ++y)
    for (int x = 0; x < scae_pred.width; ++x)
      scae_pred.at(y, x) =
          static_cast<uint8_t>(pred_rows[static_cast<size_t>(y) * scae_pred.width + x]);
  out.emplace_back("scae", aa(scae_pred));

  return out;
}

}  // namespace msiseg

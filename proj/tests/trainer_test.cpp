#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "msiseg/trainer.hpp"

namespace msiseg {
namespace {

namespace fs = std::filesystem;

// Flat-reflectance two-material palette: "bright" and "dark" are separable
// from a single pixel, so tiny classifiers must nail the task quickly.
std::vector<MaterialSpec> separable_palette() {
  std::vector<MaterialSpec> p(2);
  p[0].name = "bright";
  p[0].class_id = 1;
  p[0].curve_nm = {400, 1000};
  p[0].curve_rho = {0.8, 0.8};
  p[0].texture_scale = 0.05;
  p[1].name = "dark";
  p[1].class_id = 2;
  p[1].curve_nm = {400, 1000};
  p[1].curve_rho = {0.1, 0.1};
  p[1].texture_scale = 0.05;
  return p;
}

SceneSpec uniform_scene(uint64_t seed, int material) {
  SceneSpec s;
  s.name = "u" + std::to_string(seed);
  s.seed = seed;
  s.extent_m = 32.0;
  s.palette = separable_palette();
  s.background = material;
  return s;
}

SceneSpec split_scene(uint64_t seed) {
  SceneSpec s = uniform_scene(seed, 0);
  // A dark block in the north-west quadrant over a bright background.
  s.regions.push_back({RegionShape::Rect, 1, 8.0, 8.0, 8.0, 8.0, 0.0, 0});
  return s;
}

RenderConfig toy_render() {
  RenderConfig cfg;
  cfg.gsd_m = 1.0;
  cfg.band_centers_nm = {450, 550, 650};
  cfg.noise_sigma = 0.01;
  return cfg;
}

PatchDataset render_patches(const std::vector<SceneSpec>& scenes, int patch, double overlap) {
  std::vector<RenderedScene> rendered;
  for (const auto& s : scenes) rendered.push_back(render_scene(s, toy_render()));
  return patch_dataset_from_scenes(rendered, patch, overlap);
}

PixelDataset render_pixels(const std::vector<SceneSpec>& scenes, int patch, double overlap) {
  std::vector<RenderedScene> rendered;
  for (const auto& s : scenes) rendered.push_back(render_scene(s, toy_render()));
  return pixel_dataset_from_scenes(rendered, patch, overlap);
}

EncoderSpec tiny_encoder() {
  EncoderSpec enc;
  enc.bands = 3;
  enc.channels = {8, 16};
  return enc;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 2e-3;
  cfg.mu = 0.15;
  cfg.max_epochs = 20;
  cfg.seed = 5;
  return cfg;
}

std::map<std::string, std::vector<float>> snapshot(const ParamStore<float>& store,
                                                   const std::string& prefix,
                                                   bool trainable_only) {
  std::map<std::string, std::vector<float>> out;
  for (const auto& name : store.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const Param<float>& p = store.get(name);
    if (trainable_only && !p.trainable) continue;
    out[name] = p.tensor.values;
  }
  return out;
}

TEST(Plateau, ConstantLossTriggersExactlyOneDropAfterPatience) {
  PlateauSchedule sched(1e-2, 1e-4, 3, 4);
  EXPECT_TRUE(sched.observe(1.0));  // becomes the best
  EXPECT_TRUE(sched.observe(1.0));  // stall 1
  EXPECT_TRUE(sched.observe(1.0));  // stall 2
  EXPECT_DOUBLE_EQ(sched.lr(), 1e-2);
  EXPECT_TRUE(sched.observe(1.0));  // stall 3: drop
  EXPECT_DOUBLE_EQ(sched.lr(), 1e-3);
  EXPECT_EQ(sched.drops(), 1);
  // An improving loss resets the stall counter and keeps the rate.
  EXPECT_TRUE(sched.observe(0.5));
  EXPECT_TRUE(sched.observe(0.49));  // below min-delta: counts as a stall
  EXPECT_DOUBLE_EQ(sched.lr(), 1e-3);
}

TEST(Plateau, ExhaustsAfterFourDropsAndStaysMonotonic) {
  PlateauSchedule sched(2e-3, 1e-4, 2, 4);
  int observations = 0;
  while (sched.observe(1.0)) {
    ++observations;
    ASSERT_LT(observations, 100) << "schedule never finished";
  }
  EXPECT_EQ(sched.drops(), 4);
  EXPECT_NEAR(sched.lr(), 2e-7, 1e-18);

  // Property: random loss traces keep the rate non-increasing with at most
  // five distinct values.
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    PlateauSchedule s(1.0, 1e-4, 1 + static_cast<int>(rng.uniform_int(0, 3)), 4);
    std::set<double> seen{s.lr()};
    double prev = s.lr();
    for (int i = 0; i < 60; ++i) {
      if (!s.observe(rng.uniform(0.0, 2.0))) break;
      ASSERT_LE(s.lr(), prev);
      prev = s.lr();
      seen.insert(s.lr());
    }
    ASSERT_LE(seen.size(), 5u);
  }
}

TEST(Classifier, ProducesPerPatchScoresAndValidatesGeometry) {
  BuiltModel m = build_classifier(tiny_encoder(), 4, 16, 3);
  EXPECT_EQ(m.downsample, 4);
  Tensor<float> x({2, 3, 16, 16});
  Rng rng(1);
  for (auto& v : x.values) v = static_cast<float>(rng.normal());
  const Tensor<float>& logits = m.forward(x, true);
  EXPECT_EQ(logits.shape, (std::vector<int>{2, 4, 1, 1}));

  Tensor<float> wrong({2, 3, 24, 24});  // divisible, but the pool window is fixed
  for (auto& v : wrong.values) v = 0.1f;
  EXPECT_THROW(m.forward(wrong, false), ShapeError);
  EXPECT_THROW(build_classifier(tiny_encoder(), 4, 18, 3), ArgumentError);
  EXPECT_THROW(build_classifier(tiny_encoder(), 1, 16, 3), ArgumentError);
}

TEST(Normalizer, FitComputesPopulationStatsOverWindows) {
  MultibandRaster r;
  r.width = 2;
  r.height = 2;
  r.bands = 1;
  r.band_centers_nm = {500};
  r.values = {1, 3, 1, 3};
  r.valid_mask = {1, 1, 1, 1};
  LabelMap l;
  l.width = l.height = 2;
  l.classes = 1;
  l.labels = {1, 1, 1, 1};
  RenderedScene s{std::make_shared<MultibandRaster>(r), std::make_shared<LabelMap>(l)};
  const PatchDataset ds = patch_dataset_from_scenes({s}, 2, 0.0);
  const Normalizer n = fit_normalizer(ds);
  EXPECT_DOUBLE_EQ(n.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(n.stdev[0], 1.0);

  Normalizer id = Normalizer::identity(3);
  EXPECT_FLOAT_EQ(id.apply(2.5f, 1), 2.5f);
}

TEST(Pretrain, SeparableTaskReachesHighValidationAccuracy) {
  std::vector<SceneSpec> train_scenes, val_scenes;
  for (uint64_t s = 1; s <= 4; ++s) train_scenes.push_back(uniform_scene(s, 0));
  for (uint64_t s = 5; s <= 8; ++s) train_scenes.push_back(uniform_scene(s, 1));
  val_scenes.push_back(uniform_scene(9, 0));
  val_scenes.push_back(uniform_scene(10, 1));
  const PatchDataset train = render_patches(train_scenes, 16, 0.0);
  const PatchDataset val = render_patches(val_scenes, 16, 0.0);
  ASSERT_EQ(train.size(), 32u);

  BuiltModel model = build_classifier(tiny_encoder(), 2, 16, 11);
  const TrainResult r = pretrain_classifier(model, train, val, tiny_config());
  EXPECT_LE(r.epochs, 20);
  EXPECT_GT(r.final_val_accuracy, 0.95);
  EXPECT_FALSE(r.curves.empty());
  EXPECT_EQ(r.curves.front().stage, "pretrain");
}

TEST(Pretrain, ZeroLearningRateLeavesTrainableParamsUntouched) {
  std::vector<SceneSpec> scenes;
  for (uint64_t s = 1; s <= 4; ++s) scenes.push_back(uniform_scene(s, s % 2));
  const PatchDataset train = render_patches(scenes, 16, 0.0);
  const PatchDataset val = render_patches({uniform_scene(9, 0)}, 16, 0.0);

  BuiltModel model = build_classifier(tiny_encoder(), 2, 16, 21);
  const auto before = snapshot(model.graph.params(), "", true);
  TrainConfig cfg = tiny_config();
  cfg.lr = 0.0;
  cfg.max_epochs = 1;
  pretrain_classifier(model, train, val, cfg);
  const auto after = snapshot(model.graph.params(), "", true);
  EXPECT_EQ(before, after);
}

TEST(Pretrain, FixedSeedReproducesLossCurveExactly) {
  std::vector<SceneSpec> scenes;
  for (uint64_t s = 1; s <= 4; ++s) scenes.push_back(uniform_scene(s, s % 2));
  const PatchDataset train = render_patches(scenes, 16, 0.0);
  const PatchDataset val = render_patches({uniform_scene(9, 1)}, 16, 0.0);
  TrainConfig cfg = tiny_config();
  cfg.max_epochs = 4;

  BuiltModel m1 = build_classifier(tiny_encoder(), 2, 16, 33);
  BuiltModel m2 = build_classifier(tiny_encoder(), 2, 16, 33);
  const TrainResult r1 = pretrain_classifier(m1, train, val, cfg);
  const TrainResult r2 = pretrain_classifier(m2, train, val, cfg);
  ASSERT_EQ(r1.curves.size(), r2.curves.size());
  for (size_t i = 0; i < r1.curves.size(); ++i) {
    EXPECT_EQ(r1.curves[i].loss, r2.curves[i].loss) << "row " << i;
    EXPECT_EQ(r1.curves[i].accuracy, r2.curves[i].accuracy) << "row " << i;
  }
}

TEST(Finetune, SegmentationLossFallsOnToySceneSplit) {
  std::vector<SceneSpec> train_scenes, val_scenes;
  for (uint64_t s = 1; s <= 6; ++s) train_scenes.push_back(split_scene(s));
  val_scenes.push_back(split_scene(21));
  const PixelDataset train = render_pixels(train_scenes, 16, 0.0);
  const PixelDataset val = render_pixels(val_scenes, 16, 0.0);
  ASSERT_EQ(train.size(), 24u);

  SharpMaskSpec head;
  head.base_width = 8;
  head.bridge_width = 16;
  BuiltModel model = build_sharpmask(tiny_encoder(), head, 2, 17);
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 8;
  cfg.mu = 0.25;
  cfg.max_epochs = 8;
  const TrainResult r = finetune_segmentation(model, train, val, FinetuneInit::Random, cfg);

  double first_train = -1.0, last_train = -1.0;
  for (const auto& row : r.curves) {
    if (row.split != "train") continue;
    if (first_train < 0.0) first_train = row.loss;
    last_train = row.loss;
  }
  EXPECT_LT(last_train, first_train);
  EXPECT_GT(r.final_val_accuracy, 0.7);
  for (const auto& row : r.curves) EXPECT_EQ(row.stage, "finetune");
}

TEST(Finetune, FrozenStageKeepsEncoderBitIdentical) {
  std::vector<SceneSpec> train_scenes;
  for (uint64_t s = 1; s <= 4; ++s) train_scenes.push_back(split_scene(s));
  const PixelDataset train = render_pixels(train_scenes, 16, 0.0);
  const PixelDataset val = render_pixels({split_scene(31)}, 16, 0.0);

  SharpMaskSpec head;
  head.base_width = 8;
  head.bridge_width = 16;
  BuiltModel model = build_sharpmask(tiny_encoder(), head, 2, 23);
  model.graph.set_frozen("encoder.", true);
  const auto before = snapshot(model.graph.params(), "encoder.", false);
  const auto head_before = snapshot(model.graph.params(), "head.", true);

  TrainConfig cfg = tiny_config();
  cfg.batch_size = 8;
  cfg.mu = 0.25;
  cfg.max_epochs = 2;
  train_segmentation_stage(model, train, val, cfg, "finetune-frozen");

  // Frozen encoder: weights and running stats untouched; the head moved.
  EXPECT_EQ(before, snapshot(model.graph.params(), "encoder.", false));
  EXPECT_NE(head_before, snapshot(model.graph.params(), "head.", true));
}

TEST(Finetune, PretrainedProtocolRunsBothStagesAtTheRightRates) {
  std::vector<SceneSpec> train_scenes;
  for (uint64_t s = 1; s <= 4; ++s) train_scenes.push_back(split_scene(s));
  const PixelDataset train = render_pixels(train_scenes, 16, 0.0);
  const PixelDataset val = render_pixels({split_scene(31)}, 16, 0.0);

  SharpMaskSpec head;
  head.base_width = 8;
  head.bridge_width = 16;
  BuiltModel model = build_sharpmask(tiny_encoder(), head, 2, 29);
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 8;
  cfg.mu = 0.25;
  cfg.max_epochs = 2;
  const TrainResult r = finetune_segmentation(model, train, val, FinetuneInit::Pretrained, cfg);

  std::set<std::string> stages;
  for (const auto& row : r.curves) {
    stages.insert(row.stage);
    if (row.stage == "finetune-frozen" && row.epoch == 1) EXPECT_DOUBLE_EQ(row.lr, 2e-3);
    if (row.stage == "finetune-joint" && row.epoch == 1) EXPECT_DOUBLE_EQ(row.lr, 2e-5);
  }
  EXPECT_EQ(stages, (std::set<std::string>{"finetune-frozen", "finetune-joint"}));
  EXPECT_EQ(r.epochs, 4);
  // Nothing remains frozen after the protocol.
  for (const auto& name : model.graph.params().names())
    EXPECT_FALSE(model.graph.params().get(name).frozen) << name;
}

// 1x1 identity conv: channel c simply exposes band c, so the prediction at
// every pixel is its brightest band regardless of tiling. Any stitching bug
// (offsets, coverage, vote bookkeeping) breaks the comparison.
BuiltModel band_picker(int bands) {
  BuiltModel m;
  const int in = m.graph.add_input();
  Tensor<float>& w = m.graph.params().create("head.pick.w", {bands, bands, 1, 1}, true);
  for (int c = 0; c < bands; ++c) w.values[static_cast<size_t>(c) * bands + c] = 1.0f;
  NodeSpec s;
  s.kind = OpKind::Conv2d;
  s.in0 = in;
  s.window = 1;
  s.stride = 1;
  s.pad = 0;
  s.w = "head.pick.w";
  m.graph.add(s);
  m.bands = bands;
  m.classes = bands;
  m.downsample = 1;
  return m;
}

TEST(Predict, TiledStitchingMatchesPerPixelArgmax) {
  Rng rng(55);
  MultibandRaster r;
  r.width = 25;
  r.height = 17;
  r.bands = 3;
  r.band_centers_nm = {450, 550, 650};
  r.values.resize(r.value_count());
  for (auto& v : r.values) v = static_cast<float>(rng.uniform(0.0, 1.0));
  r.valid_mask.assign(r.pixel_count(), 1);

  BuiltModel m = band_picker(3);
  const LabelMap pred = predict_raster(m, r, Normalizer::identity(3), 8, 0.5);
  ASSERT_EQ(pred.width, 25);
  ASSERT_EQ(pred.height, 17);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      int best = 0;
      for (int b = 1; b < 3; ++b)
        if (r.at(b, y, x) > r.at(best, y, x)) best = b;
      ASSERT_EQ(pred.at(y, x), best + 1) << "pixel " << x << "," << y;
    }

  // Determinism and validation.
  const LabelMap again = predict_raster(m, r, Normalizer::identity(3), 8, 0.5);
  EXPECT_EQ(pred.labels, again.labels);
  EXPECT_THROW(predict_raster(m, r, Normalizer::identity(2), 8, 0.5), ShapeError);
  EXPECT_THROW(predict_raster(m, r, Normalizer::identity(3), 32, 0.5), ArgumentError);
}

class TrainerFileTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("msiseg_trainer_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

TEST_F(TrainerFileTest, CurvesCsvHasOneRowPerSplitPerEpoch) {
  std::vector<EpochRow> rows = {
      {1, "pretrain", "train", 1.5, 0.4, 2e-3},
      {1, "pretrain", "val", 1.6, 0.35, 2e-3},
      {2, "pretrain", "train", 1.2, 0.6, 2e-3},
      {2, "pretrain", "val", 1.3, 0.55, 2e-3},
  };
  write_curves_csv(rows, path("curves.csv"));
  std::ifstream in(path("curves.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,stage,split,loss,accuracy,lr");
  int count = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++count;
  EXPECT_EQ(count, 4);
}

TEST_F(TrainerFileTest, CheckpointCarriesNormalizerAndRestoresBitExact) {
  BuiltModel m = build_classifier(tiny_encoder(), 2, 16, 7);
  Normalizer norm;
  norm.mean = {0.25, 0.5, 0.75};
  norm.stdev = {1.0, 2.0, 0.5};
  save_model_checkpoint(m.graph, norm, path("model.ckpt"));

  BuiltModel fresh = build_classifier(tiny_encoder(), 2, 16, 99);
  const Normalizer back = load_model_checkpoint(path("model.ckpt"), fresh.graph);
  EXPECT_EQ(back.mean, norm.mean);
  EXPECT_EQ(back.stdev, norm.stdev);
  for (const auto& name : m.graph.params().names())
    EXPECT_EQ(fresh.graph.params().get(name).tensor.values,
              m.graph.params().get(name).tensor.values)
        << name;
}

TEST_F(TrainerFileTest, EncoderTransferCoversPrefixAndIgnoresTheRest) {
  BuiltModel classifier = build_classifier(tiny_encoder(), 2, 16, 41);
  save_model_checkpoint(classifier.graph, Normalizer::identity(3), path("pre.ckpt"));
  auto records = read_checkpoint(path("pre.ckpt"));

  SharpMaskSpec head;
  head.base_width = 8;
  head.bridge_width = 16;
  BuiltModel seg = build_sharpmask(tiny_encoder(), head, 2, 43);
  const auto head_before = snapshot(seg.graph.params(), "head.", true);
  load_params_matching(records, seg.graph.params(), "encoder.");

  // Every encoder parameter now matches the classifier; the head is intact.
  for (const auto& name : seg.graph.params().names()) {
    if (name.rfind("encoder.", 0) == 0)
      EXPECT_EQ(seg.graph.params().get(name).tensor.values,
                classifier.graph.params().get(name).tensor.values)
          << name;
  }
  EXPECT_EQ(head_before, snapshot(seg.graph.params(), "head.", true));

  // Missing prefix coverage and shape clashes are rejected.
  auto pruned = records;
  pruned.erase(std::remove_if(pruned.begin(), pruned.end(),
                              [](const CheckpointRecord& r) {
                                return r.name == "encoder.stem.w";
                              }),
               pruned.end());
  BuiltModel seg2 = build_sharpmask(tiny_encoder(), head, 2, 44);
  EXPECT_THROW(load_params_matching(pruned, seg2.graph.params(), "encoder."), FormatError);
  EXPECT_THROW(load_params_matching(records, seg2.graph.params(), "nothing."), FormatError);

  EncoderSpec wider = tiny_encoder();
  wider.channels = {12, 24};
  BuiltModel seg3 = build_sharpmask(wider, head, 2, 45);
  EXPECT_THROW(load_params_matching(records, seg3.graph.params(), "encoder."), ShapeError);
}

TEST_F(TrainerFileTest, DatasetLoadersAgreeWithTheBuilder) {
  SceneSpec t1 = uniform_scene(1, 0);
  SceneSpec t2 = split_scene(2);
  SceneSpec v1 = uniform_scene(3, 1);
  RenderConfig cfg = toy_render();
  cfg.overlap = 0.0;
  const auto built = build_pretrain_dataset({t1, t2}, {v1}, cfg, 16, path("ds"));

  const PatchDataset train = load_patch_dataset(path("ds/train.idx"));
  EXPECT_EQ(train.size(), built.train.entries.size());
  EXPECT_EQ(train.patch_size, 16);
  EXPECT_EQ(train.bands, 3);
  EXPECT_EQ(train.classes, 2);
  EXPECT_EQ(train.histogram, built.train_histogram);
  EXPECT_EQ(train.rasters.size(), 2u);  // one per scene, shared across items

  const PixelDataset pix = load_pixel_dataset(path("ds/train.idx"));
  EXPECT_EQ(pix.size(), built.train.entries.size());
  // Recount the pixel histogram straight from the label crops.
  std::vector<int64_t> recount(3, 0);
  for (const auto& item : pix.items) {
    const LabelMap& l = pix.labels[static_cast<size_t>(item.source)];
    for (int y = item.y; y < item.y + 16; ++y)
      for (int x = item.x; x < item.x + 16; ++x) ++recount[l.at(y, x)];
  }
  EXPECT_EQ(pix.pixel_histogram, recount);
}

}  // namespace
}  // namespace msiseg

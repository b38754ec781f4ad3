#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "msiseg/raster.hpp"

using namespace msiseg;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

MultibandRaster random_raster(Rng& rng, int w, int h, int b) {
  std::vector<double> centers;
  double c = 400.0;
  for (int i = 0; i < b; ++i) {
    c += 10.0 + 50.0 * rng.uniform();
    centers.push_back(c);
  }
  MultibandRaster r = MultibandRaster::make(w, h, b, centers, 1.0 + 10.0 * rng.uniform());
  for (auto& v : r.values) v = static_cast<float>(1000.0 * rng.uniform());
  for (auto& m : r.valid_mask) m = rng.uniform() < 0.8 ? 1 : 0;
  return r;
}

}  // namespace

TEST(RasterIo, RoundTripIdentitySmall) {
  MultibandRaster r = MultibandRaster::make(4, 3, 6, {490, 550, 680, 720, 800, 900}, 4.7, 7.0f);
  const std::string p = temp_path("rt_small.mbr");
  write_raster(r, p);
  MultibandRaster back = read_raster(p);
  EXPECT_EQ(back.width, 4);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.bands, 6);
  EXPECT_EQ(back.values, r.values);
  EXPECT_EQ(back.valid_mask, r.valid_mask);
  EXPECT_EQ(back.band_centers_nm, r.band_centers_nm);
  EXPECT_DOUBLE_EQ(back.gsd_cm, 4.7);
  std::remove(p.c_str());
}

TEST(RasterIo, MinimalOnePixelRaster) {
  MultibandRaster r = MultibandRaster::make(1, 1, 1, {500}, 1.0, 0.0f);
  const std::string p = temp_path("rt_min.mbr");
  write_raster(r, p);
  MultibandRaster back = read_raster(p);
  EXPECT_EQ(back.values, r.values);
  EXPECT_EQ(back.valid_mask, r.valid_mask);
  std::remove(p.c_str());
}

// Property: write then read is the identity on random valid rasters.
TEST(RasterIo, RoundTripPropertyRandomRasters) {
  Rng rng(41);
  for (int trial = 0; trial < 25; ++trial) {
    const int w = 1 + static_cast<int>(rng.uniform_int(0, 12));
    const int h = 1 + static_cast<int>(rng.uniform_int(0, 12));
    const int b = 1 + static_cast<int>(rng.uniform_int(0, 7));
    MultibandRaster r = random_raster(rng, w, h, b);
    const std::string p = temp_path("rt_prop.mbr");
    write_raster(r, p);
    MultibandRaster back = read_raster(p);
    ASSERT_EQ(back.values, r.values);
    ASSERT_EQ(back.valid_mask, r.valid_mask);
    ASSERT_EQ(back.band_centers_nm, r.band_centers_nm);
    ASSERT_DOUBLE_EQ(back.gsd_cm, r.gsd_cm);
    std::remove(p.c_str());
  }
}

TEST(RasterIo, HeaderBandCountMismatchIsFormatError) {
  const std::string p = temp_path("rt_bad.mbr");
  {
    std::ofstream out(p, std::ios::binary);
    out << "magic: MBR1\nwidth: 1\nheight: 1\nbands: 2\ndtype: f32\ngsd_cm: 1\n"
        << "band_centers_nm: 400,500,600\n\n";
    float z[2] = {0, 0};
    out.write(reinterpret_cast<char*>(z), sizeof(z));
    char m = 1;
    out.write(&m, 1);
  }
  EXPECT_THROW(read_raster(p), FormatError);
  std::remove(p.c_str());
}

TEST(RasterIo, TruncatedPayloadIsIoError) {
  const std::string p = temp_path("rt_trunc.mbr");
  {
    std::ofstream out(p, std::ios::binary);
    out << "magic: MBR1\nwidth: 4\nheight: 4\nbands: 1\ndtype: f32\ngsd_cm: 1\n"
        << "band_centers_nm: 400\n\n";
    float z = 0;
    out.write(reinterpret_cast<char*>(&z), sizeof(z));  // 1 of 16 values
  }
  EXPECT_THROW(read_raster(p), IoError);
  std::remove(p.c_str());
}

TEST(RasterIo, BadMagicIsFormatError) {
  const std::string p = temp_path("rt_magic.mbr");
  {
    std::ofstream out(p, std::ios::binary);
    out << "magic: XXXX\nwidth: 1\nheight: 1\nbands: 1\ndtype: f32\ngsd_cm: 1\n"
        << "band_centers_nm: 400\n\n";
  }
  EXPECT_THROW(read_raster(p), FormatError);
  std::remove(p.c_str());
}

TEST(RasterIo, U16DtypeRoundTripsIntegralValues) {
  MultibandRaster r = MultibandRaster::make(3, 2, 2, {500, 600}, 1.0);
  for (size_t i = 0; i < r.values.size(); ++i) r.values[i] = static_cast<float>(i * 1000);
  const std::string p = temp_path("rt_u16.mbr");
  write_raster(r, p, RasterDtype::U16);
  MultibandRaster back = read_raster(p);
  EXPECT_EQ(back.values, r.values);
  std::remove(p.c_str());
}

TEST(LabelIo, RoundTripAndValidation) {
  LabelMap m = LabelMap::make(5, 4, 9);
  Rng rng(3);
  for (auto& v : m.labels) v = static_cast<uint8_t>(rng.uniform_int(0, 9));
  const std::string p = temp_path("rt_lbl.lbl");
  write_labels(m, p);
  LabelMap back = read_labels(p);
  EXPECT_EQ(back.labels, m.labels);
  EXPECT_EQ(back.classes, 9);
  std::remove(p.c_str());

  LabelMap bad = LabelMap::make(2, 2, 3);
  bad.labels[0] = 7;
  EXPECT_THROW(bad.validate(), FormatError);
}

TEST(ChannelStatsOp, TwoPointCase) {
  auto r = std::make_shared<MultibandRaster>(MultibandRaster::make(2, 1, 1, {500}, 1.0));
  r->values = {1.0f, 3.0f};
  auto ps = extract_patches(r, nullptr, 1, 1, 0.0);
  ChannelStats st = compute_channel_stats(ps);
  EXPECT_DOUBLE_EQ(st.mean[0], 2.0);
  EXPECT_DOUBLE_EQ(st.stddev[0], 1.0);  // population convention
}

TEST(ChannelStatsOp, ConstantBandIsDegenerate) {
  auto r = std::make_shared<MultibandRaster>(MultibandRaster::make(4, 4, 2, {500, 600}, 1.0));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      r->at(0, y, x) = static_cast<float>(x);
      r->at(1, y, x) = 5.0f;  // constant
    }
  auto ps = extract_patches(r, nullptr, 2, 2);
  EXPECT_THROW(compute_channel_stats(ps), DegenerateError);
}

// Oracle: independent two-pass mean/variance over the same pixel multiset.
TEST(ChannelStatsOp, MatchesTwoPassOracleOnRandomBand) {
  Rng rng(99);
  auto r = std::make_shared<MultibandRaster>(MultibandRaster::make(10, 10, 3, {500, 600, 700}, 1.0));
  for (auto& v : r->values) v = static_cast<float>(100.0 * rng.uniform());
  for (auto& m : r->valid_mask) m = rng.uniform() < 0.9 ? 1 : 0;
  auto ps = extract_patches(r, nullptr, 4, 3, 0.0);
  ChannelStats st = compute_channel_stats(ps);

  for (int b = 0; b < 3; ++b) {
    std::vector<double> xs;
    for (const auto& it : ps.items)
      for (int y = it.y; y < it.y + 4; ++y)
        for (int x = it.x; x < it.x + 4; ++x)
          if (r->valid(y, x)) xs.push_back(r->at(b, y, x));
    double mean = 0;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(xs.size());
    double var = 0;
    for (double v : xs) var += (v - mean) * (v - mean);
    var /= static_cast<double>(xs.size());
    EXPECT_NEAR(st.mean[b], mean, 1e-9);
    EXPECT_NEAR(st.stddev[b], std::sqrt(var), 1e-9);
  }
}

// Normalizing the source pixels by their own stats gives mean 0, variance 1.
TEST(ChannelStatsOp, NormalizationContract) {
  Rng rng(7);
  auto r = std::make_shared<MultibandRaster>(MultibandRaster::make(16, 16, 4, {400, 500, 600, 700}, 1.0));
  for (auto& v : r->values) v = static_cast<float>(50.0 + 10.0 * rng.normal());
  auto ps = extract_patches(r, nullptr, 8, 4);
  ChannelStats st = compute_channel_stats(ps);
  for (int b = 0; b < 4; ++b) {
    double s = 0, ss = 0;
    int64_t n = 0;
    for (const auto& it : ps.items)
      for (int y = it.y; y < it.y + 8; ++y)
        for (int x = it.x; x < it.x + 8; ++x) {
          const double z = (r->at(b, y, x) - st.mean[b]) / st.stddev[b];
          s += z;
          ss += z * z;
          ++n;
        }
    const double mean = s / n;
    const double var = ss / n - mean * mean;
    EXPECT_LT(std::abs(mean), 1e-6);
    EXPECT_LT(std::abs(var - 1.0), 1e-6);
  }
}

TEST(ExtractPatches, GridArithmetic) {
  auto r = std::make_shared<MultibandRaster>(MultibandRaster::make(10, 10, 1, {500}, 1.0, 1.0f));
  auto ps = extract_patches(r, nullptr, 4, 2);
  EXPECT_EQ(ps.items.size(), 16u);  // floor((10-4)/2+1)^2

  auto one = extract_patches(r, nullptr, 10, 3);
  EXPECT_EQ(one.items.size(), 1u);

  EXPECT_THROW(extract_patches(r, nullptr, 11, 1), ArgumentError);
}

// Property: the closed-form count holds for full-mask rasters.
TEST(ExtractPatches, CountFormulaProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int w = 4 + static_cast<int>(rng.uniform_int(0, 28));
    const int h = 4 + static_cast<int>(rng.uniform_int(0, 28));
    const int size = 1 + static_cast<int>(rng.uniform_int(0, std::min(w, h) - 1));
    const int stride = 1 + static_cast<int>(rng.uniform_int(0, 5));
    auto r = std::make_shared<MultibandRaster>(MultibandRaster::make(w, h, 1, {500}, 1.0, 1.0f));
    auto ps = extract_patches(r, nullptr, size, stride);
    const size_t expect = static_cast<size_t>((h - size) / stride + 1) *
                          static_cast<size_t>((w - size) / stride + 1);
    ASSERT_EQ(ps.items.size(), expect) << w << "x" << h << " size " << size << " stride " << stride;
  }
}

// Oracle: exhaustive per-window mask scan on a half-masked raster.
TEST(ExtractPatches, ValidFractionMatchesWindowScanOracle) {
  Rng rng(23);
  auto r = std::make_shared<MultibandRaster>(MultibandRaster::make(20, 20, 1, {500}, 1.0, 1.0f));
  for (size_t i = 0; i < r->valid_mask.size(); ++i) r->valid_mask[i] = rng.uniform() < 0.5 ? 1 : 0;
  const double min_frac = 0.9;
  auto ps = extract_patches(r, nullptr, 5, 2, min_frac);

  size_t oracle = 0;
  for (int y = 0; y + 5 <= 20; y += 2)
    for (int x = 0; x + 5 <= 20; x += 2) {
      int valid = 0;
      for (int yy = 0; yy < 5; ++yy)
        for (int xx = 0; xx < 5; ++xx) valid += r->valid(y + yy, x + xx) ? 1 : 0;
      if (valid >= min_frac * 25) ++oracle;
    }
  EXPECT_EQ(ps.items.size(), oracle);
}

TEST(MajorityLabel, StrictMajorityAndTieBreak) {
  LabelMap m = LabelMap::make(10, 1, 9);
  for (int x = 0; x < 6; ++x) m.at(0, x) = 3;
  for (int x = 6; x < 10; ++x) m.at(0, x) = 5;
  // majority_label works on square windows; rebuild as 10x10 columns
  LabelMap sq = LabelMap::make(10, 10, 9);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) sq.at(y, x) = m.at(0, x);
  EXPECT_EQ(majority_label(sq, 0, 0, 10), 3);

  LabelMap tie = LabelMap::make(2, 2, 9);
  tie.at(0, 0) = 2;
  tie.at(0, 1) = 2;
  tie.at(1, 0) = 7;
  tie.at(1, 1) = 7;
  EXPECT_EQ(majority_label(tie, 0, 0, 2), 2);  // ties break low

  LabelMap bg = LabelMap::make(3, 3, 9);
  EXPECT_EQ(majority_label(bg, 0, 0, 3), 0);
}

// Oracle: exhaustive histogram argmax; also permutation invariance.
TEST(MajorityLabel, MatchesHistogramOracleAndPermutationInvariant) {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    LabelMap m = LabelMap::make(8, 8, 6);
    for (auto& v : m.labels) v = static_cast<uint8_t>(rng.uniform_int(0, 6));
    std::vector<int64_t> hist(7, 0);
    for (auto v : m.labels) ++hist[v];
    int expect = 0;
    int64_t best = 0;
    for (int c = 1; c <= 6; ++c)
      if (hist[c] > best) {
        best = hist[c];
        expect = c;
      }
    ASSERT_EQ(majority_label(m, 0, 0, 8), expect);

    LabelMap shuffled = m;
    rng.shuffle(shuffled.labels);
    ASSERT_EQ(majority_label(shuffled, 0, 0, 8), expect);
  }
}

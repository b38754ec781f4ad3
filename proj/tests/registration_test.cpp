#include "msiseg/registration.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using namespace msiseg;

namespace {

// Dark noisy background scattered with bright rectangles: plenty of strong,
// uniquely textured corners for the detector, none of them on the border.
MultibandRaster textured_image(int w, int h, uint64_t seed) {
  MultibandRaster img = MultibandRaster::make(w, h, 1, {550.0}, 100.0);
  Rng rng(seed);
  for (float& v : img.values) v = static_cast<float>(20.0 + 6.0 * rng.uniform());
  for (int k = 0; k < 14; ++k) {
    const int rw = static_cast<int>(rng.uniform_int(5, 11));
    const int rh = static_cast<int>(rng.uniform_int(5, 11));
    const int x0 = static_cast<int>(rng.uniform_int(8, w - 8 - rw));
    const int y0 = static_cast<int>(rng.uniform_int(8, h - 8 - rh));
    const double level = 110.0 + 70.0 * rng.uniform();
    for (int y = y0; y < y0 + rh; ++y)
      for (int x = x0; x < x0 + rw; ++x)
        img.at(0, y, x) = static_cast<float>(level + 4.0 * rng.uniform());
  }
  return img;
}

MultibandRaster crop(const MultibandRaster& src, int x0, int y0, int w, int h) {
  MultibandRaster out = MultibandRaster::make(w, h, 1, src.band_centers_nm, src.gsd_cm);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(0, y, x) = src.at(0, y0 + y, x0 + x);
  return out;
}

Homography make_h(std::initializer_list<double> vals) {
  Mat m(3, 3);
  std::copy(vals.begin(), vals.end(), m.a.begin());
  return Homography::from_mat(m);
}

double entry_distance(const Homography& a, const Homography& b) {
  double worst = 0.0;
  for (int i = 0; i < 9; ++i) worst = std::max(worst, std::abs(a.m[i] - b.m[i]));
  return worst;
}

std::vector<Match> points_through(const Homography& h, int count, uint64_t seed,
                                  double lo = 5.0, double hi = 90.0) {
  Rng rng(seed);
  std::vector<Match> ms;
  for (int i = 0; i < count; ++i) {
    Match m;
    m.ax = rng.uniform(lo, hi);
    m.ay = rng.uniform(lo, hi);
    EXPECT_TRUE(h.project(m.ax, m.ay, m.bx, m.by));
    ms.push_back(m);
  }
  return ms;
}

}  // namespace

// ---------------------------------------------------------------- exposure

TEST(Exposure, IntegrationTimeCancelsBetweenFrames) {
  MultibandRaster shorter = MultibandRaster::make(8, 6, 2, {500, 600}, 100.0);
  Rng rng(3);
  for (float& v : shorter.values) v = static_cast<float>(rng.uniform(0.0, 800.0));
  MultibandRaster longer = shorter;
  for (float& v : longer.values) v *= 2.0f;

  const MultibandRaster a = normalize_exposure(shorter, 10.0, 0.0, 100.0);
  const MultibandRaster b = normalize_exposure(longer, 20.0, 0.0, 100.0);
  ASSERT_EQ(a.values.size(), b.values.size());
  for (size_t i = 0; i < a.values.size(); ++i) EXPECT_EQ(a.values[i], b.values[i]);
}

TEST(Exposure, RangeEndpointsHitZeroAndSixteenBitMax) {
  MultibandRaster img = MultibandRaster::make(3, 1, 1, {500}, 100.0);
  img.at(0, 0, 0) = 50.0f;    // v/t = 5  -> gmin -> 0
  img.at(0, 0, 1) = 900.0f;   // v/t = 90 -> gmax -> 65535
  img.at(0, 0, 2) = 2000.0f;  // above gmax -> clamped to 65535
  const MultibandRaster out = normalize_exposure(img, 10.0, 5.0, 90.0);
  EXPECT_EQ(out.at(0, 0, 0), 0.0f);
  EXPECT_EQ(out.at(0, 0, 1), 65535.0f);
  EXPECT_EQ(out.at(0, 0, 2), 65535.0f);
}

TEST(Exposure, MatchesFormulaOracleElementwise) {
  MultibandRaster img = MultibandRaster::make(9, 7, 3, {500, 600, 700}, 100.0);
  Rng rng(11);
  for (float& v : img.values) v = static_cast<float>(rng.uniform(0.0, 400.0));
  const double t = 7.5, gmin = 2.0, gmax = 45.0;
  const MultibandRaster out = normalize_exposure(img, t, gmin, gmax);
  for (size_t i = 0; i < img.values.size(); ++i) {
    double unit = (static_cast<double>(img.values[i]) / t - gmin) / (gmax - gmin);
    unit = std::min(1.0, std::max(0.0, unit));
    EXPECT_EQ(out.values[i], static_cast<float>(std::nearbyint(unit * 65535.0))) << i;
  }
}

TEST(Exposure, MonotonicInRawValueForFixedIntegrationTime) {
  MultibandRaster img = MultibandRaster::make(64, 1, 1, {500}, 100.0);
  for (int x = 0; x < 64; ++x) img.at(0, 0, x) = static_cast<float>(x * 13);
  const MultibandRaster out = normalize_exposure(img, 3.0, 10.0, 200.0);
  for (int x = 1; x < 64; ++x) EXPECT_GE(out.at(0, 0, x), out.at(0, 0, x - 1));
}

TEST(Exposure, RejectsBadArguments) {
  const MultibandRaster img = MultibandRaster::make(2, 2, 1, {500}, 100.0);
  EXPECT_THROW(normalize_exposure(img, 0.0, 0.0, 1.0), ArgumentError);
  EXPECT_THROW(normalize_exposure(img, -2.0, 0.0, 1.0), ArgumentError);
  EXPECT_THROW(normalize_exposure(img, 1.0, 5.0, 5.0), ArgumentError);
}

// ---------------------------------------------------------------- matching

TEST(Matching, SelfMatchPairsNearlyAllCornersAtZeroOffset) {
  const MultibandRaster img = textured_image(96, 96, 17);
  const std::vector<Corner> corners = harris_corners(img);
  ASSERT_GE(corners.size(), 20u);
  const std::vector<Match> matches = detect_and_match(img, img);
  EXPECT_GE(matches.size(), static_cast<size_t>(0.9 * static_cast<double>(corners.size())));
  for (const Match& m : matches) {
    EXPECT_EQ(m.ax, m.bx);
    EXPECT_EQ(m.ay, m.by);
    EXPECT_NEAR(m.score, 0.0, 1e-6);
  }
}

TEST(Matching, PureTranslationRecoveredByMedianDisplacement) {
  const MultibandRaster master = textured_image(112, 112, 29);
  const MultibandRaster a = crop(master, 8, 8, 96, 96);
  const MultibandRaster b = crop(master, 3, 5, 96, 96);  // shifts content by (+5, +3)
  const std::vector<Match> matches = detect_and_match(a, b);
  ASSERT_GE(matches.size(), 10u);
  std::vector<double> dx, dy;
  for (const Match& m : matches) {
    dx.push_back(m.bx - m.ax);
    dy.push_back(m.by - m.ay);
  }
  std::sort(dx.begin(), dx.end());
  std::sort(dy.begin(), dy.end());
  EXPECT_NEAR(dx[dx.size() / 2], 5.0, 0.5);
  EXPECT_NEAR(dy[dy.size() / 2], 3.0, 0.5);
}

TEST(Matching, ConstantImageYieldsNothing) {
  const MultibandRaster flat = MultibandRaster::make(64, 64, 1, {550}, 100.0, 7.0f);
  EXPECT_TRUE(harris_corners(flat).empty());
  const MultibandRaster img = textured_image(64, 64, 5);
  EXPECT_TRUE(detect_and_match(flat, img).empty());
  EXPECT_TRUE(detect_and_match(img, flat).empty());
}

TEST(Matching, RejectsMultibandInputsAndBadConfig) {
  const MultibandRaster two = MultibandRaster::make(32, 32, 2, {500, 600}, 100.0);
  EXPECT_THROW(harris_corners(two), ShapeError);
  MatchConfig cfg;
  cfg.patch = 10;
  const MultibandRaster one = MultibandRaster::make(32, 32, 1, {500}, 100.0);
  EXPECT_THROW(harris_corners(one, cfg), ArgumentError);
  cfg.patch = 11;
  cfg.ratio = 1.5;
  EXPECT_THROW(detect_and_match(one, one, cfg), ArgumentError);
}

// --------------------------------------------------------------------- dlt

TEST(Dlt, FourIdentityPointsGiveIdentity) {
  std::vector<Match> ms = {{0, 0, 0, 0, 0}, {40, 0, 40, 0, 0}, {0, 30, 0, 30, 0},
                           {40, 30, 40, 30, 0}};
  const Homography h = estimate_homography_dlt(ms);
  EXPECT_LT(entry_distance(h, Homography::identity()), 1e-10);
}

TEST(Dlt, RecoversKnownProjectiveTransform) {
  const Homography truth =
      make_h({1.02, 0.013, 3.5, -0.021, 0.98, -2.25, 1.1e-4, -7e-5, 1.0});
  const std::vector<Match> ms = points_through(truth, 12, 41);
  const Homography h = estimate_homography_dlt(ms);
  EXPECT_LT(entry_distance(h, truth), 1e-6);
}

TEST(Dlt, CollinearSourcePointsAreDegenerate) {
  std::vector<Match> ms = {{0, 0, 1, 2, 0}, {10, 10, 12, 11, 0}, {20, 20, 24, 21, 0},
                           {5, 0, 6, 1, 0}};
  EXPECT_THROW(estimate_homography_dlt(ms), DegenerateError);
}

TEST(Dlt, CoincidentPointsAreDegenerate) {
  std::vector<Match> ms(4, Match{3, 4, 5, 6, 0});
  EXPECT_THROW(estimate_homography_dlt(ms), DegenerateError);
}

TEST(Dlt, FewerThanFourPointsRejected) {
  std::vector<Match> ms = {{0, 0, 0, 0, 0}, {1, 0, 1, 0, 0}, {0, 1, 0, 1, 0}};
  EXPECT_THROW(estimate_homography_dlt(ms), ArgumentError);
}

TEST(Dlt, CoordinateScaleInvariance) {
  const Homography truth =
      make_h({0.97, -0.02, 4.0, 0.03, 1.04, -3.0, 5e-5, 8e-5, 1.0});
  const std::vector<Match> ms = points_through(truth, 10, 59);
  const double s = 100.0;
  std::vector<Match> scaled = ms;
  for (Match& m : scaled) {
    m.ax *= s;
    m.ay *= s;
    m.bx *= s;
    m.by *= s;
  }
  const Homography h = estimate_homography_dlt(ms);
  const Homography hs = estimate_homography_dlt(scaled);
  // Conjugating the scaled fit by diag(1/s, 1/s, 1) must reproduce the fit
  // in original coordinates.
  Mat sc(3, 3), si(3, 3);
  sc(0, 0) = sc(1, 1) = s;
  sc(2, 2) = 1.0;
  si(0, 0) = si(1, 1) = 1.0 / s;
  si(2, 2) = 1.0;
  const Homography back = Homography::from_mat(matmul(si, matmul(hs.mat(), sc)));
  EXPECT_LT(entry_distance(back, h), 1e-8);
}

// ------------------------------------------------------------------ ransac

TEST(Ransac, CleanCorrespondencesKeepEveryInlier) {
  const Homography truth =
      make_h({1.01, 0.02, -4.0, -0.015, 0.99, 2.5, 6e-5, -4e-5, 1.0});
  const std::vector<Match> ms = points_through(truth, 30, 71);
  const std::optional<RansacResult> fit = ransac_homography(ms);
  ASSERT_TRUE(fit.has_value());
  EXPECT_EQ(fit->inliers.size(), 30u);
  EXPECT_LT(entry_distance(fit->h, truth), 1e-6);
}

TEST(Ransac, ThirtyPercentOutliersDoNotSpoilTheFit) {
  const Homography truth =
      make_h({0.99, -0.01, 6.0, 0.02, 1.03, -5.0, -5e-5, 9e-5, 1.0});
  std::vector<Match> ms = points_through(truth, 28, 83);
  Rng rng(84);
  for (int i = 0; i < 12; ++i) {
    Match m;
    m.ax = rng.uniform(5.0, 90.0);
    m.ay = rng.uniform(5.0, 90.0);
    m.bx = rng.uniform(5.0, 90.0);
    m.by = rng.uniform(5.0, 90.0);
    ms.push_back(m);
  }
  const std::optional<RansacResult> fit = ransac_homography(ms);
  ASSERT_TRUE(fit.has_value());
  EXPECT_GE(fit->inliers.size(), 28u);
  for (int i = 0; i < 28; ++i) {
    double px = 0.0, py = 0.0;
    ASSERT_TRUE(fit->h.project(ms[i].ax, ms[i].ay, px, py));
    const double err = std::hypot(px - ms[i].bx, py - ms[i].by);
    EXPECT_LT(err, 0.5) << "inlier " << i;
  }
}

TEST(Ransac, FixedSeedReturnsIdenticalInlierSet) {
  const Homography truth = make_h({1.0, 0.01, 2.0, -0.01, 1.0, -1.0, 0.0, 0.0, 1.0});
  std::vector<Match> ms = points_through(truth, 20, 91);
  Rng rng(92);
  for (int i = 0; i < 8; ++i)
    ms.push_back({rng.uniform(0.0, 90.0), rng.uniform(0.0, 90.0), rng.uniform(0.0, 90.0),
                  rng.uniform(0.0, 90.0), 0.0});
  RansacConfig cfg;
  cfg.seed = 5;
  const std::optional<RansacResult> a = ransac_homography(ms, cfg);
  const std::optional<RansacResult> b = ransac_homography(ms, cfg);
  ASSERT_TRUE(a.has_value());
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(a->inliers, b->inliers);
  EXPECT_EQ(a->h.m, b->h.m);
}

TEST(Ransac, RandomPairingsProduceNoModel) {
  Rng rng(101);
  std::vector<Match> ms;
  for (int i = 0; i < 20; ++i)
    ms.push_back({rng.uniform(0.0, 90.0), rng.uniform(0.0, 90.0), rng.uniform(0.0, 90.0),
                  rng.uniform(0.0, 90.0), 0.0});
  EXPECT_FALSE(ransac_homography(ms).has_value());
}

TEST(Ransac, RejectsTooFewMatchesAndBadConfig) {
  std::vector<Match> three = {{0, 0, 0, 0, 0}, {1, 0, 1, 0, 0}, {0, 1, 0, 1, 0}};
  EXPECT_THROW(ransac_homography(three), ArgumentError);
  std::vector<Match> four = {{0, 0, 0, 0, 0}, {9, 0, 9, 0, 0}, {0, 9, 0, 9, 0},
                             {9, 9, 9, 9, 0}};
  RansacConfig cfg;
  cfg.threshold_px = 0.0;
  EXPECT_THROW(ransac_homography(four, cfg), ArgumentError);
  cfg = RansacConfig{};
  cfg.min_inliers = 3;
  EXPECT_THROW(ransac_homography(four, cfg), ArgumentError);
}

// -------------------------------------------------------------------- warp

TEST(Warp, IdentityLeavesImageUntouched) {
  const MultibandRaster img = textured_image(48, 40, 7);
  const MultibandRaster out = warp_nearest(img, Homography::identity());
  EXPECT_EQ(out.values, img.values);
  EXPECT_EQ(out.valid_mask, img.valid_mask);
}

TEST(Warp, IntegerTranslationMovesPixelsAndMarksBorderInvalid) {
  const MultibandRaster img = textured_image(40, 32, 9);
  const Homography shift = make_h({1, 0, 4, 0, 1, 2, 0, 0, 1});
  const MultibandRaster out = warp_nearest(img, shift);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 40; ++x) {
      if (x >= 4 && y >= 2) {
        EXPECT_TRUE(out.valid(y, x));
        EXPECT_EQ(out.at(0, y, x), img.at(0, y - 2, x - 4));
      } else {
        EXPECT_FALSE(out.valid(y, x));
      }
    }
}

TEST(Warp, ForwardThenInverseRestoresInterior) {
  const MultibandRaster img = textured_image(80, 72, 13);
  const Homography h = make_h({1.005, 0.006, 1.5, -0.004, 0.9965, -1.0, 2e-5, -1.5e-5, 1.0});
  const MultibandRaster there = warp_nearest(img, h);
  const MultibandRaster back = warp_nearest(there, h.inverse());
  int interior = 0, exact = 0;
  for (int y = 4; y < 68; ++y)
    for (int x = 4; x < 76; ++x) {
      if (!back.valid(y, x)) continue;
      ++interior;
      if (back.at(0, y, x) == img.at(0, y, x)) ++exact;
    }
  ASSERT_GT(interior, 4000);
  EXPECT_GE(static_cast<double>(exact) / interior, 0.99);
}

// ------------------------------------------------------------ registration

TEST(RegisterBand, SelfRegistrationFindsNearIdentity) {
  const MultibandRaster img = textured_image(96, 96, 23);
  const RegisterResult r = register_band(img, img, Homography::identity());
  EXPECT_FALSE(r.fallback);
  EXPECT_GE(r.inliers, 12);
  EXPECT_LT(entry_distance(r.used, Homography::identity()), 0.05);
  int same = 0, total = 0;
  for (int y = 0; y < 96; ++y)
    for (int x = 0; x < 96; ++x) {
      if (!r.warped.valid(y, x)) continue;
      ++total;
      if (r.warped.at(0, y, x) == img.at(0, y, x)) ++same;
    }
  ASSERT_GT(total, 8000);
  EXPECT_GE(static_cast<double>(same) / total, 0.99);
}

TEST(RegisterBand, FeaturelessBandFallsBackToGlobalTransform) {
  const MultibandRaster flat = MultibandRaster::make(64, 64, 1, {550}, 100.0, 11.0f);
  const MultibandRaster ref = textured_image(64, 64, 3);
  const Homography global = make_h({1, 0, 3, 0, 1, -2, 0, 0, 1});
  const RegisterResult r = register_band(flat, ref, global);
  EXPECT_TRUE(r.fallback);
  EXPECT_EQ(r.used.m, global.m);
  EXPECT_EQ(r.matches, 0);
}

TEST(RegisterBand, SyntheticJitterIsUndoneWithinOnePixel) {
  const MultibandRaster ref = textured_image(112, 112, 37);
  const Homography jitter =
      make_h({1.004, 0.006, 2.0, -0.005, 0.997, -1.5, 2e-5, -1e-5, 1.0});
  const MultibandRaster band = warp_nearest(ref, jitter);
  const RegisterResult r = register_band(band, ref, Homography::identity());
  ASSERT_FALSE(r.fallback);
  const Homography truth = jitter.inverse();
  for (double y = 20.0; y <= 92.0; y += 18.0)
    for (double x = 20.0; x <= 92.0; x += 18.0) {
      double fx = 0.0, fy = 0.0, tx = 0.0, ty = 0.0;
      ASSERT_TRUE(r.used.project(x, y, fx, fy));
      ASSERT_TRUE(truth.project(x, y, tx, ty));
      EXPECT_LT(std::hypot(fx - tx, fy - ty), 1.0) << "control point " << x << "," << y;
    }
}

// ----------------------------------------------------------------- file io

TEST(HomographyFile, RoundTripPreservesEntries) {
  const fs::path path = fs::temp_directory_path() / "msiseg_h_roundtrip.txt";
  const Homography h = make_h({1.25, -0.5, 3.75, 0.125, 0.875, -2.5, 1e-4, -2e-5, 1.0});
  write_homography(h, path.string());
  const Homography back = read_homography(path.string());
  fs::remove(path);
  EXPECT_EQ(back.m, h.m);
}

TEST(HomographyFile, LoadNormalizesCornerEntryToOne) {
  const fs::path path = fs::temp_directory_path() / "msiseg_h_scaled.txt";
  std::ofstream out(path);
  out << "2 0 8\n0 2 -4\n0 0 2\n";
  out.close();
  const Homography h = read_homography(path.string());
  fs::remove(path);
  EXPECT_DOUBLE_EQ(h.m[0], 1.0);
  EXPECT_DOUBLE_EQ(h.m[2], 4.0);
  EXPECT_DOUBLE_EQ(h.m[5], -2.0);
  EXPECT_DOUBLE_EQ(h.m[8], 1.0);
}

TEST(HomographyFile, RejectsMissingShortAndTrailingContent) {
  EXPECT_THROW(read_homography("/nonexistent/h.txt"), IoError);
  const fs::path dir = fs::temp_directory_path();
  const fs::path short_path = dir / "msiseg_h_short.txt";
  std::ofstream(short_path) << "1 0 0 0 1 0 0 0";
  EXPECT_THROW(read_homography(short_path.string()), FormatError);
  fs::remove(short_path);
  const fs::path long_path = dir / "msiseg_h_long.txt";
  std::ofstream(long_path) << "1 0 0 0 1 0 0 0 1 99";
  EXPECT_THROW(read_homography(long_path.string()), FormatError);
  fs::remove(long_path);
  const fs::path flat_path = dir / "msiseg_h_flat.txt";
  std::ofstream(flat_path) << "1 0 0 0 1 0 0 0 0";
  EXPECT_THROW(read_homography(flat_path.string()), DegenerateError);
  fs::remove(flat_path);
}

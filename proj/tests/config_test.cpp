#include <gtest/gtest.h>

#include "msiseg/config.hpp"

using namespace msiseg;

TEST(Config, ParsesKeysBlocksAndComments) {
  const std::string text =
      "# top comment\n"
      "seed: 42\n"
      "name: toy run\n"
      "\n"
      "material {\n"
      "  class_id: 3\n"
      "  reflectance: 0.1, 0.2,0.3\n"
      "}\n";
  Config cfg = parse_config_text(text);
  ASSERT_EQ(cfg.entries.size(), 2u);
  EXPECT_EQ(cfg.entries[0].first, "seed");
  EXPECT_EQ(cfg.entries[1].second, "toy run");
  ASSERT_EQ(cfg.blocks.size(), 1u);
  EXPECT_EQ(cfg.blocks[0].name, "material");
  ConfigView v(cfg.blocks[0]);
  EXPECT_EQ(v.take_int("class_id", 0), 3);
  auto refl = v.take_real_list("reflectance");
  ASSERT_EQ(refl.size(), 3u);
  EXPECT_DOUBLE_EQ(refl[1], 0.2);
  v.finish();
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_config_text("no colon here\n"), FormatError);
  EXPECT_THROW(parse_config_text("a {\n b {\n }\n}\n"), FormatError);
  EXPECT_THROW(parse_config_text("a {\n x: 1\n"), FormatError);
  EXPECT_THROW(parse_config_text("}\n"), FormatError);
  EXPECT_THROW(parse_config_text("Bad Key: 1\n"), FormatError);
}

TEST(Config, StrictViewRejectsUnknownKeys) {
  Config cfg = parse_config_text("seed: 1\nwrong_key: 2\n");
  ConfigView v(cfg, "test config");
  EXPECT_EQ(v.take_int("seed", 0), 1);
  EXPECT_THROW(v.finish(), ArgumentError);
}

TEST(Config, LastWriterWins) {
  Config cfg = parse_config_text("lr: 0.1\n");
  cfg.set("lr", "0.5");
  ConfigView v(cfg);
  EXPECT_DOUBLE_EQ(v.take_real("lr", 0.0), 0.5);
  v.finish();
}

TEST(Config, ValueParsersValidate) {
  EXPECT_EQ(parse_int("42", "x"), 42);
  EXPECT_THROW(parse_int("42x", "x"), FormatError);
  EXPECT_DOUBLE_EQ(parse_real("2.5e-3", "x"), 2.5e-3);
  EXPECT_THROW(parse_real("abc", "x"), FormatError);
  EXPECT_TRUE(parse_bool("true", "x"));
  EXPECT_FALSE(parse_bool("0", "x"));
  EXPECT_THROW(parse_bool("maybe", "x"), FormatError);
}

TEST(Config, RealFormattingRoundTrips) {
  for (double v : {0.0, 1.0, 1.0 / 3.0, 2.5e-3, 123456.789, 6.02e23, 4.699999999999999}) {
    const std::string s = format_real(v);
    EXPECT_EQ(std::strtod(s.c_str(), nullptr), v) << s;
  }
}

TEST(Config, SerializeParseIdentity) {
  Config cfg;
  cfg.set("alpha", "1");
  cfg.set("beta", "two words");
  ConfigBlock b;
  b.name = "region";
  b.entries = {{"x", "4"}, {"shape", "rect"}};
  cfg.blocks.push_back(b);
  Config again = parse_config_text(serialize_config(cfg));
  EXPECT_EQ(serialize_config(again), serialize_config(cfg));
}

TEST(Rng, DeterministicStreams) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(8);
  EXPECT_NE(Rng(7).next_u64(), c.next_u64());
}

TEST(Rng, NormalMoments) {
  Rng r(123);
  double sum = 0, sumsq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    double v = r.normal();
    sum += v;
    sumsq += v * v;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sumsq / n, 1.0, 0.02);
}

TEST(Rng, UniformIntBounds) {
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    int64_t v = r.uniform_int(3, 9);
    EXPECT_GE(v, 3);
    EXPECT_LE(v, 9);
  }
}

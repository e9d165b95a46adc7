// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"

using namespace transunet;
using transunet::testing::TempDir;

namespace {

Volume ramp_volume(std::size_t c, Dims d) {
  Volume v(c, d, {1.5, 1.0, 0.75});
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = 0.25f * static_cast<float>(i) - 3.0f;
  return v;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace

TEST(VolumeIo, ImageRoundTripIsExact) {
  TempDir tmp("vol");
  const auto v = ramp_volume(2, {3, 4, 5});
  save_volume(tmp.path / "a.vol", v);
  const auto r = load_volume(tmp.path / "a.vol");
  EXPECT_EQ(r.channels, 2u);
  EXPECT_EQ(r.dims, v.dims);
  EXPECT_EQ(r.spacing, v.spacing);
  EXPECT_EQ(r.data, v.data);
}

TEST(VolumeIo, PayloadIsLittleEndianFloat32) {
  TempDir tmp("le");
  Volume v(1, {1, 1, 2});
  v.data = {1.0f, -2.0f};
  save_volume(tmp.path / "b.vol", v);
  const auto raw = slurp(tmp.path / "b.vol.raw");
  // 1.0f = 0x3f800000, -2.0f = 0xc0000000
  const std::string expect("\x00\x00\x80\x3f\x00\x00\x00\xc0", 8);
  EXPECT_EQ(raw, expect);
}

TEST(VolumeIo, LabelRoundTripIsExact) {
  TempDir tmp("seg");
  LabelMap l({2, 3, 4}, {2.0, 2.0, 1.0});
  for (std::size_t i = 0; i < l.labels.size(); ++i) l.labels[i] = static_cast<std::uint8_t>(i % 3);
  save_labels(tmp.path / "l.seg", l);
  const auto r = load_labels(tmp.path / "l.seg");
  EXPECT_EQ(r.labels, l.labels);
  EXPECT_EQ(r.spacing, l.spacing);
}

TEST(VolumeIo, TruncatedPayloadReportsOffset) {
  TempDir tmp("trunc");
  save_volume(tmp.path / "c.vol", ramp_volume(1, {2, 2, 2}));
  auto raw = slurp(tmp.path / "c.vol.raw");
  spit(tmp.path / "c.vol.raw", raw.substr(0, 20));
  try {
    load_volume(tmp.path / "c.vol");
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 20"), std::string::npos) << e.what();
  }
}

TEST(VolumeIo, TrailingBytesAreRejected) {
  TempDir tmp("trail");
  save_volume(tmp.path / "d.vol", ramp_volume(1, {2, 2, 2}));
  spit(tmp.path / "d.vol.raw", slurp(tmp.path / "d.vol.raw") + "xx");
  EXPECT_THROW(load_volume(tmp.path / "d.vol"), FormatError);
}

TEST(VolumeIo, BadHeadersAreRejected) {
  TempDir tmp("hdr");
  save_volume(tmp.path / "e.vol", ramp_volume(1, {2, 2, 2}));
  const auto good = slurp(tmp.path / "e.vol");
  auto with = [&](const std::string& from, const std::string& to) {
    auto s = good;
    s.replace(s.find(from), from.size(), to);
    spit(tmp.path / "e.vol", s);
  };
  with("dtype: float32", "dtype: float64");
  EXPECT_THROW(load_volume(tmp.path / "e.vol"), FormatError);
  with("version: 1", "version: 2");
  EXPECT_THROW(load_volume(tmp.path / "e.vol"), FormatError);
  with("spacing: 1.5", "spacing: -1.5");
  EXPECT_THROW(load_volume(tmp.path / "e.vol"), FormatError);
  with("dims: 2 2 2", "bogus: 1");
  EXPECT_THROW(load_volume(tmp.path / "e.vol"), FormatError);
  // A label file cannot be read as an image.
  spit(tmp.path / "e.vol", good);
  EXPECT_THROW(load_labels(tmp.path / "e.vol"), FormatError);
}

TEST(VolumeIo, LabelValidationChecksClassCount) {
  LabelMap l({1, 1, 2});
  l.labels = {0, 3};
  EXPECT_THROW(l.validate(2), InputError);
  EXPECT_NO_THROW(l.validate(3));
}

TEST(Synth, DeterministicAndNested) {
  SynthSpec spec;
  spec.seed = 11;
  const auto a = generate_case(spec, 2), b = generate_case(spec, 2), c = generate_case(spec, 3);
  EXPECT_EQ(a.image.data, b.image.data);
  EXPECT_EQ(a.label.labels, b.label.labels);
  EXPECT_NE(a.label.labels, c.label.labels);
  // Every core voxel (label 1) lies inside its blob's outer ellipsoid, and
  // both classes are present.
  const auto h = a.label.histogram();
  EXPECT_GT(h.count(1) ? h.at(1) : 0u, 0u);
  EXPECT_GT(h.count(2) ? h.at(2) : 0u, 0u);
  for (std::size_t z = 0; z < 32; ++z)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        if (a.label.at(z, y, x) == 1) {
          bool inside = false;
          for (const auto& blob : a.blobs) inside = inside || inside_ellipsoid(blob, 1.0, z, y, x);
          EXPECT_TRUE(inside);
        }
}

TEST(Synth, DatasetLayout) {
  TempDir tmp("ds");
  SynthSpec spec;
  spec.dims = {8, 8, 8};
  spec.min_radius = 1.5;
  spec.max_radius = 3.0;
  write_synthetic_dataset(tmp.path, spec, 3);
  EXPECT_TRUE(std::filesystem::exists(tmp.path / "case_0001" / "image.vol"));
  EXPECT_TRUE(std::filesystem::exists(tmp.path / "case_0002" / "label.seg"));
  const auto ds = load_dataset(tmp.path);
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds[1].name, "case_0001");
  EXPECT_EQ(ds[1].label.labels, generate_case(spec, 1).label.labels);
}

TEST(Synth, OversizedBlobsAreAConfigError) {
  SynthSpec spec;
  spec.dims = {8, 8, 8};
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Augment, NoneIsIdentity) {
  const auto s = generate_case(SynthSpec{}, 0);
  std::mt19937_64 rng(1);
  auto [v, l] = augment(s.image, s.label, AugmentConfig::none(), rng);
  EXPECT_EQ(v.data, s.image.data);
  EXPECT_EQ(l.labels, s.label.labels);
}

TEST(Augment, FlipTwiceIsIdentityAndLabelsStayAligned) {
  auto s = generate_case(SynthSpec{}, 1);
  auto v = s.image;
  auto l = s.label;
  aug::flip(v, l, 2);
  EXPECT_EQ(l.at(3, 4, 0), s.label.at(3, 4, 31));
  EXPECT_EQ(v.at(0, 3, 4, 0), s.image.at(0, 3, 4, 31));
  aug::flip(v, l, 2);
  EXPECT_EQ(v.data, s.image.data);
  EXPECT_EQ(l.labels, s.label.labels);
}

TEST(Augment, FourQuarterTurnsAreIdentity) {
  auto s = generate_case(SynthSpec{}, 2);
  auto v = s.image;
  auto l = s.label;
  for (int t = 0; t < 4; ++t) aug::rot90(v, l, 1, 2);
  EXPECT_EQ(v.data, s.image.data);
  EXPECT_EQ(l.labels, s.label.labels);
}

TEST(Augment, KeepsLabelSetAndGeometry) {
  const auto s = generate_case(SynthSpec{}, 3);
  AugmentConfig all;
  all.p_flip = all.p_rot90 = all.p_noise = all.p_blur = all.p_jitter = all.p_lowres = all.p_gamma = 1.0;
  std::mt19937_64 rng(5);
  auto [v, l] = augment(s.image, s.label, all, rng);
  EXPECT_EQ(v.dims, s.image.dims);
  EXPECT_EQ(l.histogram(), s.label.histogram());  // rigid moves only permute voxels
  for (float x : v.data) EXPECT_TRUE(std::isfinite(x));
}

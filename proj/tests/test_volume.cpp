#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace dagman;
using testing_support::TempDir;

TEST(Synthetic, NoLesionsNoNoiseIsAllZero) {
  SyntheticSpec s;
  s.num_lesions = 0;
  s.background_noise_sigma = 0.0;
  const Volume v = generate_synthetic_volume(s, 3);
  EXPECT_EQ(v.shape, (Triple{32, 32, 32}));
  for (float f : v.data) ASSERT_EQ(f, 0.0f);
}

TEST(Synthetic, DeterministicForSeed) {
  SyntheticSpec s;
  EXPECT_EQ(generate_synthetic_volume(s, 11), generate_synthetic_volume(s, 11));
  EXPECT_FALSE(generate_synthetic_volume(s, 11) == generate_synthetic_volume(s, 12));
}

TEST(Synthetic, SphereVoxelCountMatchesLatticeOracle) {
  SyntheticSpec s;
  s.lesion_radius_range = {4.0, 4.0};
  s.background_noise_sigma = 0.0;
  s.class_id = 0;
  const long expected = testing_support::lattice_ball_count(4.0);
  EXPECT_EQ(expected, 257);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Volume v = generate_synthetic_volume(s, seed);
    long n = 0;
    for (float f : v.data) n += f >= 0.5f;
    ASSERT_EQ(n, expected) << "seed " << seed;
  }
}

TEST(Synthetic, FamiliesHaveComparableMass) {
  // Averaged over random radii the lattice mass of each family tracks the
  // continuous ball volume E[4/3 pi r^3] for r ~ U(3, 6).
  SyntheticSpec s;
  s.background_noise_sigma = 0.0;
  s.num_classes = 3;
  const double expected = 4.0 / 3.0 * M_PI * (std::pow(6.0, 4) - std::pow(3.0, 4)) / (4.0 * 3.0);
  std::vector<double> means;
  for (int c = 0; c < 3; ++c) {
    s.class_id = c;
    double total = 0;
    const int draws = 200;
    for (int seed = 0; seed < draws; ++seed) {
      const Volume v = generate_synthetic_volume(s, static_cast<std::uint64_t>(seed));
      for (float f : v.data) total += f >= 0.5f;
    }
    means.push_back(total / draws);
    EXPECT_NEAR(means.back() / expected, 1.0, 0.15) << "class " << c;
  }
  EXPECT_NE(means[0], means[1]);
}

TEST(Synthetic, InvalidSpecNamesField) {
  SyntheticSpec s;
  s.lesion_radius_range = {20.0, 20.0};
  try {
    generate_synthetic_volume(s, 0);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "lesion_radius_range");
  }
  s = {};
  s.class_id = 2;
  s.num_classes = 2;
  EXPECT_THROW(generate_synthetic_volume(s, 0), ValidationError);
}

TEST(VolFormat, RoundTripIsBitExact) {
  TempDir dir("vol");
  SyntheticSpec s;
  s.shape = {7, 6, 5};
  s.lesion_radius_range = {1.0, 1.5};
  Volume v = generate_synthetic_volume(s, 9);
  v.spacing = {0.7, 1.25, 2.0};
  save_volume(v, dir / "a.vol");
  const Volume w = load_volume(dir / "a.vol");
  EXPECT_EQ(v.shape, w.shape);
  EXPECT_EQ(v.spacing, w.spacing);
  ASSERT_EQ(v.data.size(), w.data.size());
  EXPECT_EQ(0, std::memcmp(v.data.data(), w.data.data(), v.data.size() * sizeof(float)));
}

TEST(VolFormat, HeaderIsOneJsonLine) {
  TempDir dir("vol");
  Volume v({2, 2, 2}, {1, 1, 1}, 1.5f);
  save_volume(v, dir / "h.vol");
  std::ifstream in(dir / "h.vol", std::ios::binary);
  std::string line;
  std::getline(in, line);
  const auto j = json::parse(line);
  EXPECT_EQ(j.at("dtype"), "f32le");
  EXPECT_EQ(j.at("shape"), json::array({2, 2, 2}));
  EXPECT_EQ(std::filesystem::file_size(dir / "h.vol"), line.size() + 1 + 8 * 4);
}

namespace {

void write_raw(const std::filesystem::path& p, const std::string& header, int floats) {
  std::ofstream out(p, std::ios::binary);
  out << header << '\n';
  for (int i = 0; i < floats; ++i) {
    float f = float(i);
    out.write(reinterpret_cast<const char*>(&f), 4);
  }
}

}  // namespace

TEST(VolFormat, PayloadSizeArithmetic) {
  TempDir dir("vol");
  const std::string h = R"({"shape":[2,2,2],"spacing":[1,1,1],"dtype":"f32le"})";
  write_raw(dir / "ok.vol", h, 8);
  const Volume v = load_volume(dir / "ok.vol");
  EXPECT_EQ(v.data[7], 7.0f);
  write_raw(dir / "short.vol", h, 7);
  try {
    load_volume(dir / "short.vol");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("payload size mismatch"), std::string::npos);
  }
  write_raw(dir / "long.vol", h, 9);
  EXPECT_THROW(load_volume(dir / "long.vol"), FormatError);
}

TEST(VolFormat, MalformedHeaderAndMissingFile) {
  TempDir dir("vol");
  write_raw(dir / "bad.vol", "{not json", 8);
  try {
    load_volume(dir / "bad.vol");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("malformed header"), std::string::npos);
  }
  EXPECT_THROW(load_volume(dir / "missing.vol"), IoError);
}

TEST(VolFormat, ByteVolumeRoundTrip) {
  TempDir dir("vol");
  ByteVolume b{{2, 3, 1}, {1, 1, 1}, {0, 1, 1, 0, 1, 0}};
  save_byte_volume(b, dir / "m.vol");
  const ByteVolume c = load_byte_volume(dir / "m.vol");
  EXPECT_EQ(b.data, c.data);
  EXPECT_EQ(b.shape, c.shape);
  EXPECT_THROW(load_volume(dir / "m.vol"), FormatError);
}

TEST(Resample, IdentitySpacing) {
  SyntheticSpec s;
  s.shape = {9, 8, 7};
  s.lesion_radius_range = {1.0, 2.0};
  Volume v = generate_synthetic_volume(s, 1);
  v.spacing = {1.5, 2.0, 0.5};
  EXPECT_EQ(resample(v, v.spacing), v);
}

TEST(Resample, ConstantStaysConstant) {
  Volume v({6, 5, 4}, {1.0, 1.0, 1.0}, 3.25f);
  for (Spacing t : {Spacing{0.7, 1.3, 2.0}, Spacing{2.0, 2.0, 2.0}, Spacing{0.5, 0.5, 0.5}}) {
    const Volume w = resample(v, t);
    for (float f : w.data) ASSERT_EQ(f, 3.25f);
  }
}

TEST(Resample, LinearRampMatchesTrilinearOracle) {
  Volume v({8, 8, 8}, {1.0, 1.0, 1.0});
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) v.at(z, y, x) = float(0.5 * z + 0.25 * y - 0.125 * x);
  const Volume w = resample(v, {2.0, 2.0, 2.0});
  EXPECT_EQ(w.shape, (Triple{4, 4, 4}));
  EXPECT_EQ(w.spacing, (Spacing{2.0, 2.0, 2.0}));
  // Output voxel i samples source coordinate 2i; the ramp is linear so the
  // trilinear value equals the ramp evaluated there.
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) EXPECT_NEAR(w.at(z, y, x), 0.5 * 2 * z + 0.25 * 2 * y - 0.125 * 2 * x, 1e-6);
  // Non-integer positions: 1.5x upsample of the same ramp.
  const Volume u = resample(v, {0.75, 0.75, 0.75});
  for (int z = 0; z < u.shape[0]; ++z)
    for (int y = 0; y < u.shape[1]; ++y)
      for (int x = 0; x < u.shape[2]; ++x) {
        auto c = [](int i) { return std::min(i * 0.75, 7.0); };
        EXPECT_NEAR(u.at(z, y, x), 0.5 * c(z) + 0.25 * c(y) - 0.125 * c(x), 1e-6);
      }
}

TEST(Resample, DegenerateShapeRejected) {
  Volume v({2, 2, 2}, {1, 1, 1});
  EXPECT_THROW(resample(v, {10.0, 1.0, 1.0}), ValidationError);
  EXPECT_THROW(resample(v, {0.0, 1.0, 1.0}), ValidationError);
}

TEST(Crops, FullSizeCropIsTheVolume) {
  SyntheticSpec s;
  s.shape = {16, 16, 16};
  s.lesion_radius_range = {2.0, 3.0};
  const Volume v = generate_synthetic_volume(s, 2);
  const ViewPair p = random_crop_views(v, v.shape, 17, 4);
  EXPECT_EQ(p.u, v);
  EXPECT_EQ(p.v, v);
  EXPECT_EQ(p.crop_origins[0], (Triple{0, 0, 0}));
  EXPECT_EQ(p.crop_origins[1], (Triple{0, 0, 0}));
  EXPECT_EQ(p.source_id, 4u);
}

TEST(Crops, DeterministicAndInside) {
  Volume v({20, 18, 16}, {1, 1, 1});
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const ViewPair a = random_crop_views(v, {8, 8, 8}, seed);
    const ViewPair b = random_crop_views(v, {8, 8, 8}, seed);
    EXPECT_EQ(a.u, b.u);
    EXPECT_EQ(a.crop_origins, b.crop_origins);
    for (const auto& o : a.crop_origins)
      for (int i = 0; i < 3; ++i) {
        EXPECT_GE(o[i], 0);
        EXPECT_LE(o[i] + 8, v.shape[i]);
      }
    EXPECT_EQ(a.u.at(0, 0, 0), v.at(a.crop_origins[0][0], a.crop_origins[0][1], a.crop_origins[0][2]));
  }
  EXPECT_THROW(random_crop_views(v, {21, 8, 8}, 0), ValidationError);
}

TEST(Crops, OriginsUniformChiSquare) {
  // 10^4 draws of 32^3 crops from 64^3: each axis has 33 valid origins.
  Volume v({64, 64, 64}, {1, 1, 1});
  std::array<std::vector<int>, 3> counts;
  for (auto& c : counts) c.assign(33, 0);
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) {
    const ViewPair p = random_crop_views(v, {32, 32, 32}, static_cast<std::uint64_t>(s));
    for (int i = 0; i < 3; ++i) counts[i][p.crop_origins[0][i]]++;
  }
  // chi^2 critical value for 32 degrees of freedom at alpha = 0.01.
  const double critical = 53.486;
  for (int i = 0; i < 3; ++i) {
    double chi = 0;
    const double e = draws / 33.0;
    for (int c : counts[i]) chi += (c - e) * (c - e) / e;
    EXPECT_LT(chi, critical) << "axis " << i;
  }
}

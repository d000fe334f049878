#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <map>
#include <set>

#include "msfcn/augment.hpp"
#include "msfcn/data_io.hpp"
#include "msfcn/error.hpp"
#include "msfcn/ops.hpp"

namespace msfcn {
namespace {

// Image values are unique per pixel so any index mix-up is visible.
Sample coded_sample(int rows, int cols, std::uint64_t seed) {
  Sample s;
  s.image = Image(rows, cols);
  s.mask = Mask(rows, cols);
  Rng rng(seed);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      s.image(r, c) = (r * cols + c + 1) / static_cast<double>(rows * cols);
      s.mask(r, c) = static_cast<std::uint8_t>(rng() % 3);
    }
  s.id = "s" + std::to_string(seed);
  s.case_id = "c";
  return s;
}

std::array<std::size_t, 3> histogram(const Mask& m) {
  std::array<std::size_t, 3> h{};
  for (auto v : m.data) ++h[v];
  return h;
}

Phantom one_phantom(std::uint64_t seed, int size = 128) {
  PhantomSpec spec;
  spec.seed = seed;
  spec.size = size;
  return synth_phantoms(spec, 1).front();
}

TEST(Displace, ZeroShiftIsIdentity) {
  const Sample s = coded_sample(20, 24, 1);
  const Sample d = displace(s, 0, 0);
  EXPECT_EQ(d.image, s.image);
  EXPECT_EQ(d.mask, s.mask);
  EXPECT_EQ(d.spacing, s.spacing);
}

TEST(Displace, DiagonalShiftMovesPixels) {
  const Sample s = coded_sample(256, 256, 2);
  const Sample d = displace(s, 5, 5);
  for (int r = 0; r < 256; ++r)
    for (int c = 0; c < 256; ++c) {
      if (r >= 5 && c >= 5) {
        ASSERT_EQ(d.image(r, c), s.image(r - 5, c - 5));
        ASSERT_EQ(d.mask(r, c), s.mask(r - 5, c - 5));
      } else {
        ASSERT_EQ(d.image(r, c), 0.0);
        ASSERT_EQ(d.mask(r, c), kBackground);
      }
    }
  EXPECT_NE(d.id, s.id);
  EXPECT_EQ(d.id.rfind(s.id, 0), 0u);
}

TEST(Displace, InverseRestoresInterior) {
  const Sample s = coded_sample(40, 40, 3);
  for (auto [dx, dy] : kDisplacements) {
    const Sample back = displace(displace(s, dx, dy), -dx, -dy);
    for (int r = 5; r < 35; ++r)
      for (int c = 5; c < 35; ++c) {
        ASSERT_EQ(back.image(r, c), s.image(r, c));
        ASSERT_EQ(back.mask(r, c), s.mask(r, c));
      }
  }
}

TEST(Displace, ShiftAsLargeAsImageThrows) {
  const Sample s = coded_sample(10, 10, 4);
  EXPECT_THROW(displace(s, 10, 0), Error);
  EXPECT_THROW(displace(s, 0, -12), Error);
}

TEST(CenterCrop, OffsetIsFloorOfHalfMargin) {
  const Sample s = coded_sample(256, 256, 5);
  const Sample c = center_crop(s, 108);
  ASSERT_EQ(c.image.rows, 108);
  ASSERT_EQ(c.image.cols, 108);
  EXPECT_EQ(c.image(0, 0), s.image(74, 74));
  EXPECT_EQ(c.image(107, 107), s.image(181, 181));
  const Sample odd = center_crop(coded_sample(11, 12, 6), 4);
  EXPECT_EQ(odd.image(0, 0), coded_sample(11, 12, 6).image(3, 4));
}

TEST(CenterCrop, FullSizeIsIdentity) {
  const Sample s = coded_sample(30, 30, 7);
  const Sample c = center_crop(s, 30);
  EXPECT_EQ(c.image, s.image);
  EXPECT_EQ(c.mask, s.mask);
}

TEST(CenterCrop, KeepsForegroundInsideWindow) {
  const Phantom p = one_phantom(8);
  const Sample c = center_crop(p.sample, 108);
  EXPECT_EQ(histogram(c.mask)[kCavity], histogram(p.sample.mask)[kCavity]);
  EXPECT_EQ(histogram(c.mask)[kMyocardium], histogram(p.sample.mask)[kMyocardium]);
}

TEST(CenterCrop, TooLargeThrows) { EXPECT_THROW(center_crop(coded_sample(50, 60, 1), 51), Error); }

TEST(Dihedral, GroupLaws) {
  for (Dihedral e : kAllDihedral) {
    EXPECT_EQ(compose(e, inverse(e)), Dihedral::kIdentity) << to_string(e);
    int order = 1;
    Dihedral p = e;
    while (p != Dihedral::kIdentity) {
      p = compose(p, e);
      ++order;
    }
    EXPECT_LE(order, 4) << to_string(e);
    for (Dihedral f : kAllDihedral) {
      const Dihedral g = compose(e, f);
      EXPECT_NE(std::find(kAllDihedral.begin(), kAllDihedral.end(), g), kAllDihedral.end());
    }
  }
  EXPECT_EQ(compose(Dihedral::kFlipH, Dihedral::kFlipV), Dihedral::kRot180);
}

TEST(Dihedral, ComposeMatchesSequentialApplication) {
  const Sample s = coded_sample(9, 9, 9);
  for (Dihedral a : kAllDihedral)
    for (Dihedral b : kAllDihedral) {
      const Sample seq = dihedral(dihedral(s, b), a);
      const Sample once = dihedral(s, compose(a, b));
      ASSERT_EQ(seq.image, once.image) << to_string(a) << " after " << to_string(b);
    }
}

TEST(Dihedral, Rot90FourTimesIsIdentity) {
  const Sample s = coded_sample(12, 12, 10);
  Sample r = s;
  for (int i = 0; i < 4; ++i) r = dihedral(r, Dihedral::kRot90);
  EXPECT_EQ(r.image, s.image);
  EXPECT_EQ(r.mask, s.mask);
}

TEST(Dihedral, FlipsComposeToHalfTurn) {
  const Sample s = coded_sample(12, 12, 11);
  EXPECT_EQ(dihedral(dihedral(s, Dihedral::kFlipV), Dihedral::kFlipH).image, dihedral(s, Dihedral::kRot180).image);
}

TEST(Dihedral, PreservesClassCounts) {
  const Sample s = coded_sample(17, 17, 12);
  for (Dihedral e : kAllDihedral) EXPECT_EQ(histogram(dihedral(s, e).mask), histogram(s.mask)) << to_string(e);
}

TEST(Dihedral, InverseRecoversOriginalBitExactly) {
  const Sample s = coded_sample(108, 108, 13);
  for (Dihedral e : kAllDihedral) {
    const Sample back = dihedral(dihedral(s, e), inverse(e));
    EXPECT_EQ(back.image, s.image) << to_string(e);
    EXPECT_EQ(back.mask, s.mask) << to_string(e);
  }
}

TEST(Dihedral, NonSquareThrows) { EXPECT_THROW(dihedral(coded_sample(4, 5, 1), Dihedral::kRot90), Error); }

TEST(Dihedral, SourceAndTargetAreInverseMaps) {
  const int n = 7;
  for (Dihedral e : kAllDihedral)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const auto [tr, tc] = dihedral_target(e, n, r, c);
        EXPECT_EQ(dihedral_source(e, n, tr, tc), std::make_pair(r, c));
      }
}

TEST(AugmentDataset, FortyPerSample) {
  std::vector<Sample> in;
  for (int i = 0; i < 15; ++i) in.push_back(coded_sample(128, 128, 100 + i));
  const auto out = augment_dataset(in);
  EXPECT_EQ(out.size(), 600u);
  std::set<std::string> ids;
  for (const auto& s : out) {
    EXPECT_EQ(s.image.rows, 108);
    EXPECT_EQ(s.image.cols, 108);
    EXPECT_EQ(s.mask.rows, 108);
    ids.insert(s.id);
  }
  EXPECT_EQ(ids.size(), 600u);
}

TEST(AugmentDataset, NoDuplicateArraysForAsymmetricInput) {
  const auto out = augment_dataset({one_phantom(21).sample});
  ASSERT_EQ(out.size(), 40u);
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = i + 1; j < out.size(); ++j) EXPECT_NE(out[i].image, out[j].image) << i << " vs " << j;
}

TEST(AugmentDataset, OrderIndependentPerSample) {
  const Sample a = coded_sample(120, 120, 31);
  const Sample b = coded_sample(120, 120, 32);
  const auto ab = augment_dataset({a, b});
  const auto ba = augment_dataset({b, a});
  std::multiset<std::vector<double>> x, y;
  for (const auto& s : ab) x.insert(s.image.data);
  for (const auto& s : ba) y.insert(s.image.data);
  EXPECT_EQ(x, y);
}

TEST(AugmentDataset, ErrorNamesSample) {
  Sample small = coded_sample(100, 100, 1);
  small.id = "tiny_slice";
  try {
    augment_dataset({small});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("tiny_slice"), std::string::npos) << e.what();
  }
}

// The mask of every output agrees with the image under the same transform:
// phantom pixels are cavity exactly where the clean image has cavity intensity.
TEST(AugmentDataset, ImageAndMaskTransformTogether) {
  PhantomSpec spec;
  spec.noise_sigma = 0.0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    spec.seed = seed;
    const Phantom p = synth_phantoms(spec, 1).front();
    for (const Sample& s : augment_dataset({p.sample})) {
      for (std::size_t i = 0; i < s.mask.data.size(); ++i) {
        const double v = s.image.data[i];
        const int expected = v == spec.cavity_mean       ? kCavity
                             : v == spec.myocardium_mean ? kMyocardium
                                                         : kBackground;
        ASSERT_EQ(s.mask.data[i], expected) << "seed " << seed << " " << s.id << " pixel " << i;
      }
    }
  }
}

// Transforming an indicator mask equals transforming the coordinate it marks.
TEST(AugmentDataset, IndicatorFollowsCoordinateMap) {
  const int n = 128, crop = 108;
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int r = 20 + static_cast<int>(rng() % 88);
    const int c = 20 + static_cast<int>(rng() % 88);
    Sample s;
    s.image = Image(n, n);
    s.mask = Mask(n, n);
    s.mask(r, c) = kCavity;
    s.image(r, c) = 1.0;
    s.id = "p";
    const auto out = augment_dataset({s});
    std::size_t k = 0;
    for (auto [dx, dy] : kDisplacements) {
      const int off = (n - crop) / 2;
      const int cr = r + dy - off;
      const int cc = c + dx - off;
      for (Dihedral e : kAllDihedral) {
        const Sample& o = out[k++];
        const auto [tr, tc] = dihedral_target(e, crop, cr, cc);
        for (int i = 0; i < crop; ++i)
          for (int j = 0; j < crop; ++j) {
            const bool here = i == tr && j == tc;
            ASSERT_EQ(o.mask(i, j), here ? kCavity : kBackground);
            ASSERT_EQ(o.image(i, j), here ? 1.0 : 0.0);
          }
      }
    }
  }
}

}  // namespace
}  // namespace msfcn

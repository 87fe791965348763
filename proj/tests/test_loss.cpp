#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "rsfm/loss.hpp"
#include "test_support.hpp"

using namespace rsfm;
using namespace rsfm::loss;
using masking::MaskPlan;
using masking::PatchGrid;
using rsfm::testing::random_tensor;
using U8 = Tensor<std::uint8_t>;

namespace {

U8 random_mask(const Shape& s, Rng& rng, double p = 0.5) {
  U8 m(s);
  for (Index i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(p);
  return m;
}

// Five nested loops over [B, T, C, H, W], straight from the definitions.
struct Reference {
  double spectral = 0, spatial = 0;
  Index m = 0;
};

Reference reference(const Tensor<double>& x, const Tensor<double>& xh, const U8& mask, const std::vector<Index>& c) {
  const Shape& s = x.shape();
  Reference r;
  for (Index b = 0; b < s[0]; ++b)
    for (Index t = 0; t < s[1]; ++t)
      for (Index ch = 0; ch < s[2]; ++ch)
        for (Index h = 0; h < s[3]; ++h)
          for (Index w = 0; w < s[4]; ++w) {
            if (!mask.at(b, t, ch, h, w)) continue;
            const double d = x.at(b, t, ch, h, w) - xh.at(b, t, ch, h, w);
            r.spectral += d * d;
            ++r.m;
          }
  for (Index b = 0; b < s[0]; ++b)
    for (Index t = 0; t < s[1]; ++t)
      for (Index h = 0; h < s[3]; ++h)
        for (Index w = 0; w < s[4]; ++w) {
          double sx = 0, sh = 0;
          for (Index ch = 0; ch < s[2]; ++ch) {
            sx += x.at(b, t, ch, h, w) * mask.at(b, t, ch, h, w);
            sh += xh.at(b, t, ch, h, w) * mask.at(b, t, ch, h, w);
          }
          r.spatial += static_cast<double>(c[static_cast<std::size_t>(b)]) * (sx - sh) * (sx - sh);
        }
  if (r.m > 0) {
    r.spectral /= static_cast<double>(r.m);
    r.spatial /= static_cast<double>(r.m);
  }
  return r;
}

double total_of(const Tensor<double>& x, const Tensor<double>& xh, const U8& mask, const std::vector<Index>& c,
                LossReport* rep = nullptr) {
  return total_loss(x, Var<double>(xh), mask, std::span<const Index>(c), rep).value()[0];
}

PatchGrid small_grid() { return masking::build_patch_grid({2, 6, 16, 16}, 2, 2, {2, 4, 4}); }

std::vector<std::uint8_t> six_band_valid() { return {1, 1, 1, 1, 1, 1}; }
std::vector<std::uint8_t> padded_valid() { return {1, 1, 1, 1, 0, 0}; }

}  // namespace

TEST_CASE("loss mask") {
  const PatchGrid g = small_grid();
  const std::vector<std::vector<std::uint8_t>> valid{six_band_valid()};

  SUBCASE("no masking scores nothing") {
    const std::vector<MaskPlan> plans{masking::empty_plan(g)};
    const U8 m = loss_mask(plans, valid, g);
    CHECK(m.shape() == Shape{1, 2, 6, 16, 16});
    CHECK(std::count(m.storage().begin(), m.storage().end(), 1) == 0);
  }

  SUBCASE("everything masked, nothing kept, all bands valid") {
    MaskPlan p = masking::empty_plan(g);
    std::fill(p.window_mask.begin(), p.window_mask.end(), 1);
    const U8 m = loss_mask(std::vector<MaskPlan>{p}, valid, g);
    CHECK(std::count(m.storage().begin(), m.storage().end(), 1) == m.size());
  }

  SUBCASE("pixel count and placement against a loop oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<MaskPlan> plans;
      std::vector<std::vector<std::uint8_t>> bands;
      for (int b = 0; b < 2; ++b) {
        MaskPlan p = masking::sample_window_mask(g, rng.uniform(0.1, 0.9), rng.randint(0, 1 << 30));
        if (rng.bernoulli(0.5)) p = masking::apply_pimask(p, 0.25, rng.randint(0, 1 << 30));
        plans.push_back(p);
        bands.push_back(rng.bernoulli(0.5) ? six_band_valid() : padded_valid());
      }
      const U8 m = loss_mask(plans, bands, g);
      Index expected = 0;
      for (int b = 0; b < 2; ++b) {
        Index patches = 0;
        for (Index y = 0; y < g.nh; ++y)
          for (Index x = 0; x < g.nw; ++x) patches += plans[b].masked(y, x);
        const Index valid_ch = std::count(bands[b].begin(), bands[b].end(), 1);
        // masked non-kept patches x p^2 x c_p x valid groups x frames
        expected += patches * g.p * g.p * g.cp * (valid_ch / g.cp) * g.frames;
        for (Index t = 0; t < g.frames; ++t)
          for (Index c = 0; c < g.channels; ++c)
            for (Index y = 0; y < g.height; ++y)
              for (Index x = 0; x < g.width; ++x) {
                const bool want = bands[b][static_cast<std::size_t>(c)] && plans[b].masked(y / g.p, x / g.p);
                REQUIRE(m.at(b, t, c, y, x) == want);
              }
      }
      CHECK(std::count(m.storage().begin(), m.storage().end(), 1) == expected);
    }
  }

  SUBCASE("mismatches are rejected") {
    const PatchGrid other = masking::build_patch_grid({2, 6, 32, 32}, 2, 2, {2, 4, 4});
    CHECK_THROWS_AS(loss_mask(std::vector<MaskPlan>{masking::empty_plan(other)}, valid, g), LossError);
    const std::vector<std::vector<std::uint8_t>> short_valid{{1, 1, 1, 1}};
    CHECK_THROWS_AS(loss_mask(std::vector<MaskPlan>{masking::empty_plan(g)}, short_valid, g), LossError);
  }
}

TEST_CASE("hand-evaluated values") {
  const Shape s{1, 1, 2, 1, 1};
  Tensor<double> x(s, 1.0), xh(s, 0.0);
  U8 one(s);
  one[0] = 1;
  Index m = 0;
  CHECK(spectral_loss(x, xh, one, &m) == 1.0);
  CHECK(m == 1);
  CHECK(spectral_loss(x, x, one) == 0.0);

  U8 both(s, 1);
  const std::vector<Index> c{2};
  CHECK(spatial_loss(x, xh, both, c) == 4.0);
  CHECK(spatial_loss(x, x, both, c) == 0.0);
}

TEST_CASE("terms match the nested-loop reference") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape s{2, 2, 2, 4, 4};
    auto x = random_tensor(s, rng), xh = random_tensor(s, rng);
    const U8 mask = random_mask(s, rng, rng.uniform(0.05, 1.0));
    const std::vector<Index> c{rng.randint(1, 2), rng.randint(1, 2)};
    const Reference r = reference(x, xh, mask, c);
    Index m = 0;
    CHECK(std::abs(spectral_loss(x, xh, mask, &m) - r.spectral) < 1e-10);
    CHECK(m == r.m);
    CHECK(std::abs(spatial_loss(x, xh, mask, c) - r.spatial) < 1e-10);
  }
}

TEST_CASE("total loss matches an independent reference from plans") {
  const PatchGrid g = small_grid();
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<MaskPlan> plans;
    std::vector<std::vector<std::uint8_t>> bands;
    for (int b = 0; b < 2; ++b) {
      plans.push_back(masking::apply_pimask(masking::sample_window_mask(g, 0.75, 10 + trial * 2 + b), 0.25, 99 + b));
      bands.push_back(b == 0 ? six_band_valid() : padded_valid());
    }
    const Shape s{2, g.frames, g.channels, g.height, g.width};
    auto x = random_tensor(s, rng), xh = random_tensor(s, rng);
    LossReport rep;
    Var<double> v = total_loss(x, Var<double>(xh), plans, bands, g, &rep);

    U8 mask(s);
    for (Index b = 0; b < 2; ++b)
      for (Index t = 0; t < s[1]; ++t)
        for (Index c = 0; c < s[2]; ++c)
          for (Index y = 0; y < s[3]; ++y)
            for (Index q = 0; q < s[4]; ++q) {
              mask.at(b, t, c, y, q) = bands[b][static_cast<std::size_t>(c)] && plans[b].masked(y / g.p, q / g.p);
            }
    const Reference r = reference(x, xh, mask, {6, 4});
    CHECK(rep.c == std::vector<Index>{6, 4});
    CHECK(rep.m == r.m);
    CHECK(std::abs(rep.spectral_term - r.spectral) <= 1e-9 * r.spectral);
    CHECK(std::abs(rep.spatial_term - r.spatial) <= 1e-9 * r.spatial);
    CHECK(rep.total == rep.spectral_term + rep.spatial_term);
    CHECK(std::abs(v.value()[0] - rep.total) <= 1e-12 * rep.total);
  }
}

TEST_CASE("gradient of the combined loss") {
  Rng rng(4);
  const Shape s{2, 2, 3, 3, 3};
  const auto x = random_tensor(s, rng);
  const U8 mask = random_mask(s, rng, 0.6);
  const std::vector<Index> c{3, 2};
  double err = rsfm::testing::op_gradient_error({random_tensor(s, rng)}, [&](const std::vector<Var<double>>& v) {
    return total_loss(x, v[0], mask, std::span<const Index>(c));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("padded channels and PIMask patches never contribute") {
  const PatchGrid g = small_grid();
  const std::vector<MaskPlan> plans{masking::apply_pimask(masking::sample_window_mask(g, 0.75, 5), 0.25, 6)};
  const std::vector<std::vector<std::uint8_t>> bands{padded_valid()};
  const Shape s{1, g.frames, g.channels, g.height, g.width};
  Rng rng(7);
  auto x = random_tensor(s, rng), xh = random_tensor(s, rng);
  Var<double> v(xh, true);
  LossReport base;
  total_loss(x, v, plans, bands, g, &base).backward();

  // Invalid bands: zero gradient and no effect on either term.
  Tensor<double> bumped = xh;
  for (Index t = 0; t < s[1]; ++t)
    for (Index c = 4; c < 6; ++c)
      for (Index y = 0; y < s[3]; ++y)
        for (Index q = 0; q < s[4]; ++q) {
          REQUIRE(v.grad().at(0, t, c, y, q) == 0.0);
          bumped.at(0, t, c, y, q) += 3.0;
        }
  LossReport after;
  total_loss(x, Var<double>(bumped), plans, bands, g, &after);
  CHECK(after.spectral_term == base.spectral_term);
  CHECK(after.spatial_term == base.spatial_term);

  // PIMask-visible patches: flipping their reconstruction changes nothing.
  const auto& p = plans[0];
  Tensor<double> flipped = xh;
  Index kept_pixels = 0;
  for (Index t = 0; t < s[1]; ++t)
    for (Index c = 0; c < s[2]; ++c)
      for (Index y = 0; y < s[3]; ++y)
        for (Index q = 0; q < s[4]; ++q) {
          if (!p.kept(y / g.p, q / g.p)) continue;
          REQUIRE(v.grad().at(0, t, c, y, q) == 0.0);
          flipped.at(0, t, c, y, q) = -flipped.at(0, t, c, y, q) + 1.0;
          ++kept_pixels;
        }
  REQUIRE(kept_pixels > 0);
  LossReport fl;
  total_loss(x, Var<double>(flipped), plans, bands, g, &fl);
  CHECK(fl.total == base.total);

  LossOptions with_kept;
  with_kept.include_pimask = true;
  LossReport a, b;
  total_loss(x, Var<double>(xh), plans, bands, g, &a, with_kept);
  total_loss(x, Var<double>(flipped), plans, bands, g, &b, with_kept);
  CHECK(a.m > base.m);
  CHECK(a.total != b.total);
}

TEST_CASE("loss properties") {
  Rng rng(8);
  const Shape s{2, 2, 4, 4, 4};
  for (int trial = 0; trial < 30; ++trial) {
    auto x = random_tensor(s, rng), xh = random_tensor(s, rng);
    const U8 mask = random_mask(s, rng, 0.5);
    const std::vector<Index> c{4, 3};
    LossReport rep;
    total_of(x, xh, mask, c, &rep);
    CHECK(rep.spectral_term >= 0.0);
    CHECK(rep.spatial_term >= 0.0);

    // Residuals scaled by k scale both terms by k^2.
    const double k = rng.uniform(0.2, 3.0);
    Tensor<double> xk = x;
    for (Index i = 0; i < x.size(); ++i) xk[i] = x[i] - k * (x[i] - xh[i]);
    LossReport sc;
    total_of(x, xk, mask, c, &sc);
    CHECK(std::abs(sc.spectral_term - k * k * rep.spectral_term) <= 1e-10 * sc.spectral_term);
    CHECK(std::abs(sc.spatial_term - k * k * rep.spatial_term) <= 1e-10 * sc.spatial_term);

    // Agreement on every scored element zeroes both terms.
    Tensor<double> agree = xh;
    for (Index i = 0; i < x.size(); ++i)
      if (mask[i]) agree[i] = x[i];
    LossReport z;
    total_of(x, agree, mask, c, &z);
    CHECK(z.spectral_term == 0.0);
    CHECK(z.spatial_term == 0.0);

    // Unscored elements of either tensor are invisible.
    Tensor<double> xo = x, xho = xh;
    for (Index i = 0; i < x.size(); ++i)
      if (!mask[i]) {
        xo[i] += rng.normal(0.0, 10.0);
        xho[i] += rng.normal(0.0, 10.0);
      }
    LossReport o;
    total_of(xo, xho, mask, c, &o);
    CHECK(o.total == rep.total);

    // Permuting channels of x, xhat and the mask together.
    std::vector<Index> perm{0, 1, 2, 3};
    rng.shuffle(perm.begin(), perm.end());
    Tensor<double> xp(s), xhp(s);
    U8 mp(s);
    for (Index b = 0; b < s[0]; ++b)
      for (Index t = 0; t < s[1]; ++t)
        for (Index ch = 0; ch < s[2]; ++ch)
          for (Index i = 0; i < s[3] * s[4]; ++i) {
            const Index dst = ((b * s[1] + t) * s[2] + ch) * s[3] * s[4] + i;
            const Index src = ((b * s[1] + t) * s[2] + perm[static_cast<std::size_t>(ch)]) * s[3] * s[4] + i;
            xp[dst] = x[src];
            xhp[dst] = xh[src];
            mp[dst] = mask[src];
          }
    LossReport pr;
    total_of(xp, xhp, mp, c, &pr);
    CHECK(std::abs(pr.spatial_term - rep.spatial_term) <= 1e-12 * rep.spatial_term);
    CHECK(std::abs(pr.spectral_term - rep.spectral_term) <= 1e-12 * rep.spectral_term);
  }
}

TEST_CASE("nothing scored gives a defined zero") {
  Rng rng(9);
  const Shape s{1, 1, 2, 2, 2};
  Var<double> xh(random_tensor(s, rng), true);
  const std::vector<Index> c{2};
  LossReport rep;
  auto v = total_loss(random_tensor(s, rng), xh, U8(s), std::span<const Index>(c), &rep);
  CHECK(rep.m == 0);
  CHECK(v.value()[0] == 0.0);
  v.backward();
  for (Index i = 0; i < xh.size(); ++i) CHECK((!xh.has_grad() || xh.grad()[i] == 0.0));
}

TEST_CASE("shape mismatches are rejected") {
  const std::vector<Index> c{2};
  CHECK_THROWS_AS(spectral_loss(Tensor<double>({1, 1, 2, 2, 2}), Tensor<double>({1, 1, 2, 2, 3}), U8({1, 1, 2, 2, 2})),
                  LossError);
  CHECK_THROWS_AS(spatial_loss(Tensor<double>({1, 1, 2, 2, 2}), Tensor<double>({1, 1, 2, 2, 2}), U8({1, 1, 2, 2, 2}),
                               std::vector<Index>{2, 2}),
                  LossError);
}

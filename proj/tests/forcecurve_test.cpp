#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "stiffmap/forcecurve.hpp"
#include "test_util.hpp"

namespace sm = stiffmap;

namespace {

// Independent closed form of the spherical Hertz law in SI units, used to
// forward-generate curves: F[N] = 4/3 E/(1-nu^2) sqrt(R) d^1.5.
double oracle_force_nN(double e_pa, double delta_um, double radius_um, double nu) {
  if (delta_um <= 0) return 0;
  const double f = 4.0 / 3.0 * e_pa / (1 - nu * nu) * std::sqrt(radius_um * 1e-6) *
                   std::pow(delta_um * 1e-6, 1.5);
  return f * 1e9;
}

// Approach from +2 um to -2 um in n samples; the surface is at
// separation `contact`.
sm::ForceCurve oracle_curve(double e_pa, int n = 256, double contact = 0.0) {
  sm::ForceCurve c;
  for (int i = 0; i < n; ++i) {
    const double s = 2.0 - 4.0 * i / (n - 1);
    c.separation_um.push_back(s);
    c.force_nN.push_back(oracle_force_nN(e_pa, contact - s, 5.0, 0.5));
  }
  return c;
}

}  // namespace

TEST(DetectContact, FlatCurveHasNoContact) {
  sm::ForceCurve c;
  for (int i = 0; i < 64; ++i) {
    c.separation_um.push_back(1.0 - i * 0.01);
    c.force_nN.push_back(0.0);
  }
  try {
    sm::detect_contact_point(c, 5.0);
    FAIL() << "expected no contact";
  } catch (const sm::Error& e) {
    EXPECT_EQ(e.code(), sm::Errc::no_contact);
  }
}

TEST(DetectContact, FindsKnownContactSample) {
  for (double contact : {-0.31, 0.0, 0.47, 0.9}) {
    const auto c = oracle_curve(800.0, 256, contact);
    // First sample with positive indentation.
    std::size_t truth = 0;
    while (c.separation_um[truth] >= contact) ++truth;
    const auto cp = sm::detect_contact_point(c, 5.0);
    EXPECT_LE(std::abs(static_cast<long>(cp.index) - static_cast<long>(truth)), 2) << contact;
  }
}

TEST(DetectContact, PureNoiseRarelyTriggers) {
  int no_contact = 0;
  for (int seed = 0; seed < 100; ++seed) {
    sm::Rng rng(seed);
    sm::ForceCurve c;
    for (int i = 0; i < 256; ++i) {
      c.separation_um.push_back(2.0 - i * 0.01);
      c.force_nN.push_back(rng.normal(0.0, 0.01));
    }
    try {
      sm::detect_contact_point(c, 5.0);
    } catch (const sm::Error& e) {
      if (e.code() == sm::Errc::no_contact) ++no_contact;
    }
  }
  EXPECT_GE(no_contact, 99);
}

TEST(FitHertz, RecoversModulusFromNoiselessCurve) {
  const auto fit = sm::fit_hertz(oracle_curve(1000.0), sm::IndenterSpec{5.0, 0.5});
  EXPECT_NEAR(fit.modulus_pa, 1000.0, 1.0);  // 0.1%
  EXPECT_LT(fit.residual_nN, 1e-6);
}

TEST(FitHertz, ScalingForceScalesModulusExactly) {
  auto c = oracle_curve(1000.0, 256, 0.123);
  const auto base = sm::fit_hertz(c, {});
  for (auto& f : c.force_nN) f *= 2.0;
  const auto doubled = sm::fit_hertz(c, {});
  EXPECT_EQ(doubled.modulus_pa, 2.0 * base.modulus_pa);
}

TEST(FitHertz, HealthyTissueMagnitude) {
  // Healthy liver tissue measured 369 +/- 18 Pa.
  sm::Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    const double truth = rng.normal(369.0, 18.0);
    const auto c = sm::synthesize_curve(truth, {}, {}, 30.0, &rng);
    const double e = sm::fit_hertz(c, {}).modulus_pa;
    EXPECT_GT(e, 200.0);
    EXPECT_LT(e, 600.0);
  }
}

TEST(FitHertz, InvariantToUniformResampling) {
  for (double contact : {0.0, 0.2171, -0.4}) {
    const auto c = oracle_curve(650.0, 256, contact);
    sm::ForceCurve half;
    for (std::size_t i = 0; i < c.size(); i += 2) {
      half.separation_um.push_back(c.separation_um[i]);
      half.force_nN.push_back(c.force_nN[i]);
    }
    const double full_e = sm::fit_hertz(c, {}).modulus_pa;
    const double half_e = sm::fit_hertz(half, {}).modulus_pa;
    EXPECT_NEAR(half_e, full_e, 0.005 * full_e);
  }
}

TEST(FitHertz, UnbiasedAtTwentyDecibels) {
  sm::Rng rng(2024);
  const double truth = 1000.0;
  double sum = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto c = sm::synthesize_curve(truth, {}, {}, 20.0, &rng);
    sum += sm::fit_hertz(c, {}).modulus_pa;
  }
  EXPECT_NEAR(sum / 200.0, truth, 0.02 * truth);
}

TEST(FitHertz, ForwardModelMatchesOracle) {
  for (double d : {0.1, 0.7, 2.0})
    EXPECT_NEAR(sm::hertz_force_nN(432.0, d, {}), oracle_force_nN(432.0, d, 5.0, 0.5), 1e-12);
}

TEST(FitHertz, TooFewPostContactSamples) {
  // Contact only a handful of samples before the end of the curve.
  auto c = oracle_curve(1000.0, 256, -1.93);
  try {
    sm::fit_hertz(c, {});
    FAIL();
  } catch (const sm::Error& e) {
    EXPECT_EQ(e.code(), sm::Errc::insufficient_samples);
  }
}

TEST(FitHertz, NegativeSlopeIsNonPhysical) {
  sm::ForceCurve c;
  for (int i = 0; i < 128; ++i) {
    c.separation_um.push_back(1.0 - i * (2.0 / 127));
    // brief positive blip then a strongly negative drift
    double f = 0.0;
    if (i >= 60 && i < 66) f = 0.5;
    if (i >= 66) f = -5.0 * (i - 65);
    c.force_nN.push_back(f);
  }
  try {
    sm::fit_hertz(c, {});
    FAIL();
  } catch (const sm::Error& e) {
    EXPECT_EQ(e.code(), sm::Errc::non_physical_fit);
  }
}

TEST(FitHertz, RejectsBadIndenter) {
  EXPECT_THROW(sm::fit_hertz(oracle_curve(500.0), {0.0, 0.5}), sm::Error);
  EXPECT_THROW(sm::fit_hertz(oracle_curve(500.0), {5.0, 0.7}), sm::Error);
}

TEST(ForceCurve, ValidationErrors) {
  sm::ForceCurve c = oracle_curve(500.0, 20);
  c.separation_um[5] = c.separation_um[4];
  EXPECT_THROW(c.validate(), sm::Error);
  sm::ForceCurve short_curve = oracle_curve(500.0, 10);
  EXPECT_THROW(short_curve.validate(), sm::Error);
}

TEST(SiteGrid, ConstantField) {
  std::vector<sm::ForceCurve> curves(16, oracle_curve(500.0));
  const auto site = sm::fit_site_grid(curves, 4, 4, {}, {12.0, 34.0}, 3);
  EXPECT_NEAR(site.mean_pa, 500.0, 0.5);
  EXPECT_LT(site.std_pa, 1.0);
  EXPECT_EQ(site.valid_count(), 16u);
  EXPECT_EQ(site.site_id, 3);
}

TEST(SiteGrid, HalfAndHalf) {
  std::vector<sm::ForceCurve> curves;
  for (int i = 0; i < 16; ++i) curves.push_back(oracle_curve(i < 8 ? 200.0 : 800.0));
  const auto site = sm::fit_site_grid(curves, 4, 4, {}, {});
  EXPECT_NEAR(site.mean_pa, 500.0, 0.5);
  EXPECT_NEAR(site.std_pa, 300.0, 0.5);
}

TEST(SiteGrid, MeanEqualsArithmeticMeanOfValidCells) {
  sm::Rng rng(8);
  std::vector<sm::ForceCurve> curves;
  for (int i = 0; i < 16; ++i) {
    if (i % 5 == 0) {
      curves.push_back(oracle_curve(0.0));  // flat: fails
    } else {
      curves.push_back(sm::synthesize_curve(rng.uniform(200, 900), {}, {}, 25.0, &rng));
    }
  }
  const auto site = sm::fit_site_grid(curves, 4, 4, {}, {});
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(site.valid[i], i % 5 == 0 ? 0 : 1);
    if (site.valid[i]) {
      EXPECT_GT(site.moduli_pa[i], 0.0);
      sum += site.moduli_pa[i];
      ++n;
    }
  }
  EXPECT_EQ(site.mean_pa, sum / n);
}

TEST(SiteGrid, RejectsMajorityFailure) {
  std::vector<sm::ForceCurve> curves;
  for (int i = 0; i < 16; ++i) curves.push_back(oracle_curve(i < 9 ? 0.0 : 500.0));
  try {
    sm::fit_site_grid(curves, 4, 4, {}, {});
    FAIL();
  } catch (const sm::Error& e) {
    EXPECT_EQ(e.code(), sm::Errc::site_rejected);
  }
  // Exactly half failing is still accepted.
  curves.clear();
  for (int i = 0; i < 16; ++i) curves.push_back(oracle_curve(i < 8 ? 0.0 : 500.0));
  EXPECT_NO_THROW(sm::fit_site_grid(curves, 4, 4, {}, {}));
}

TEST(ForceCurveCsv, RoundTripAndHeaderRequired) {
  sm_test::TempDir dir;
  sm::Rng rng(1);
  const auto c = sm::synthesize_curve(420.0, {}, {}, 20.0, &rng);
  sm::write_force_curve_csv(dir.path / "c.csv", c);
  const auto back = sm::read_force_curve_csv(dir.path / "c.csv");
  EXPECT_EQ(back.separation_um, c.separation_um);
  EXPECT_EQ(back.force_nN, c.force_nN);

  std::ofstream(dir.path / "nohdr.csv") << "1.0,0.0\n0.9,0.0\n";
  EXPECT_THROW(sm::read_force_curve_csv(dir.path / "nohdr.csv"), sm::Error);
  std::ofstream(dir.path / "bad.csv") << "separation_um,force_nN\n1.0;0.0\n";
  EXPECT_THROW(sm::read_force_curve_csv(dir.path / "bad.csv"), sm::Error);
}

#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>

#include "qmri/fit.hpp"
#include "qmri/phantom.hpp"

using namespace qmri;
using namespace qmri::fit;

namespace {

const std::vector<ScanParams> kMid{{Sequence::T1w, 600.0, 15.0, std::nullopt},
                                   {Sequence::T2w, 4000.0, 100.0, std::nullopt},
                                   {Sequence::Flair, 8000.0, 110.0, 2300.0}};

std::vector<double> simulate(double pd, double t1, double t2, const std::vector<ScanParams>& ps) {
  std::vector<double> s;
  for (const auto& p : ps) s.push_back(signal(pd, t1, t2, p));
  return s;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

std::vector<WeightedImage> stack_for(const ParametricMaps& maps, const std::vector<ScanParams>& ps) {
  std::vector<WeightedImage> out;
  for (const auto& p : ps) out.push_back(synthesize_weighted(maps, p));
  return out;
}

double mae_over(const Image& a, const Image& b, const Mask& m) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!m.data[i]) continue;
    s += std::abs(static_cast<double>(a.data[i]) - b.data[i]);
    ++n;
  }
  return s / static_cast<double>(n);
}

double range_over(const Image& a, const Mask& m) {
  double lo = 1e300, hi = -1e300;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!m.data[i]) continue;
    lo = std::min(lo, static_cast<double>(a.data[i]));
    hi = std::max(hi, static_cast<double>(a.data[i]));
  }
  return hi - lo;
}

}  // namespace

TEST_CASE("pd_closed_form examples") {
  const std::vector<double> f{0.2, 0.5, 0.9};
  CHECK(pd_closed_form(f, f) == doctest::Approx(1.0));
  CHECK(pd_closed_form(std::vector<double>{0.6, 1.5, 2.7}, f) == doctest::Approx(3.0));
  CHECK(pd_closed_form(std::vector<double>{1, 2}, std::vector<double>{1, 1}) == doctest::Approx(1.5));
  CHECK_THROWS_AS(pd_closed_form(std::vector<double>{1, 2}, std::vector<double>{0, 0}), InvalidArgument);
  CHECK_THROWS(pd_closed_form(std::vector<double>{1, 2}, std::vector<double>{1}));
}

TEST_CASE("fit_voxel recovers the white-matter voxel") {
  const auto s = simulate(766.01, 789.78, 83.12, kMid);
  const auto r = fit_voxel(s, kMid, FitOptions{});
  CHECK(r.converged);
  CHECK(rel(r.t1_ms, 789.78) < 1e-3);
  CHECK(rel(r.t2_ms, 83.12) < 1e-3);
  CHECK(rel(r.pd, 766.01) < 1e-3);
  CHECK(r.residual_norm >= 0.0);
}

TEST_CASE("fit_voxel scales linearly in PD") {
  const auto s = simulate(988.17, 1266.35, 100.28, kMid);
  const auto a = fit_voxel(s, kMid, FitOptions{});
  for (double k : {0.001, 0.37, 12.0}) {
    std::vector<double> sk;
    for (double v : s) sk.push_back(v * k);
    const auto b = fit_voxel(sk, kMid, FitOptions{});
    CHECK(rel(b.pd, a.pd * k) < 1e-6);
    CHECK(rel(b.t1_ms, a.t1_ms) < 1e-6);
    CHECK(rel(b.t2_ms, a.t2_ms) < 1e-6);
  }
}

TEST_CASE("duplicate observations give the same fit") {
  const auto s = simulate(1737.31, 3918.05, 1064.94, kMid);
  const auto a = fit_voxel(s, kMid, FitOptions{});
  auto ps = kMid;
  auto ss = s;
  ps.push_back(kMid[1]);
  ss.push_back(s[1]);
  const auto b = fit_voxel(ss, ps, FitOptions{});
  CHECK(a.converged);
  CHECK(b.converged);
  CHECK(rel(b.t1_ms, a.t1_ms) < 1e-6);
  CHECK(rel(b.t2_ms, a.t2_ms) < 1e-6);
  CHECK(rel(b.pd, a.pd) < 1e-6);
  CHECK(rel(b.t1_ms, 3918.05) < 1e-3);
}

TEST_CASE("fit_voxel error and guard cases") {
  const auto z = fit_voxel(std::vector<double>{0, 0, 0}, kMid, FitOptions{});
  CHECK_FALSE(z.converged);
  CHECK(z.pd == 0.0);
  CHECK_THROWS_AS(fit_voxel(std::vector<double>{1, std::nan(""), 1}, kMid, FitOptions{}), NumericError);
  CHECK_THROWS_AS(fit_voxel(std::vector<double>{1, INFINITY, 1}, kMid, FitOptions{}), NumericError);
  CHECK_THROWS(fit_voxel(std::vector<double>{1, 1}, kMid, FitOptions{}));

  // two distinct protocols only
  const std::vector<ScanParams> two{kMid[0], kMid[1], kMid[1]};
  const auto t = fit_voxel(simulate(800, 900, 90, two), two, FitOptions{});
  CHECK(t.ill_posed);
  CHECK_FALSE(t.converged);
  // one TE only
  const std::vector<ScanParams> same_te{{Sequence::T1w, 500.0, 20.0, std::nullopt},
                                        {Sequence::T2w, 3000.0, 20.0, std::nullopt},
                                        {Sequence::T2w, 5000.0, 20.0, std::nullopt}};
  CHECK(fit_voxel(simulate(800, 900, 90, same_te), same_te, FitOptions{}).ill_posed);
  // no T1 sensitivity: long TR only and no FLAIR
  const std::vector<ScanParams> long_tr{{Sequence::T2w, 5000.0, 20.0, std::nullopt},
                                        {Sequence::T2w, 5000.0, 80.0, std::nullopt},
                                        {Sequence::T2w, 5000.0, 120.0, std::nullopt}};
  CHECK(fit_voxel(simulate(800, 900, 90, long_tr), long_tr, FitOptions{}).ill_posed);

  FitOptions bad;
  bad.n_t1 = 1;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  FitOptions bad2;
  bad2.t1_min = 7000;
  CHECK_THROWS_AS(bad2.validate(), InvalidArgument);
}

TEST_CASE("voxels at the FLAIR null fall back to the grid estimate") {
  // TI chosen so the FLAIR signal vanishes for this T1
  const double t1 = 1500.0, tr = 9000.0;
  const double ti = -t1 * std::log((1.0 + std::exp(-tr / t1)) / 2.0);
  const std::vector<ScanParams> ps{kMid[0], kMid[1], {Sequence::Flair, tr, 110.0, ti}};
  const auto s = simulate(900.0, t1, 120.0, ps);
  CHECK(std::abs(s[2]) < 1e-9);
  const auto r = fit_voxel(s, ps, FitOptions{});
  CHECK_FALSE(r.converged);
  CHECK(r.t1_ms >= 100.0);
  CHECK(r.t1_ms <= 6000.0);
}

TEST_CASE("accepted LM steps never increase the residual") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> t1d(300, 4000), t2d(40, 1500), pdd(500, 1800);
  for (int i = 0; i < 200; ++i) {
    const double t1 = t1d(rng), t2 = std::min(t2d(rng), 0.9 * t1);
    std::vector<double> trace;
    auto s = simulate(pdd(rng), t1, t2, kMid);
    std::normal_distribution<double> n(0.0, 2.0);
    for (auto& v : s) v = std::abs(v + n(rng));
    fit_voxel(s, kMid, FitOptions{}, &trace);
    REQUIRE(!trace.empty());
    for (std::size_t k = 1; k < trace.size(); ++k) CHECK(trace[k] <= trace[k - 1]);
  }
}

TEST_CASE("round trip over 1000 random tissue voxels and protocols") {
  std::mt19937_64 rng(2025);
  const ProtocolRanges ranges;
  const TissueTable table;
  const Tissue classes[] = {Tissue::Wm, Tissue::Gm, Tissue::Csf, Tissue::Lesion};
  int failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto& p = table.at(classes[i % 4]);
    std::normal_distribution<double> t1d(p.t1.mean, p.t1.std), t2d(p.t2.mean, p.t2.std), pdd(p.pd.mean, p.pd.std);
    const double t1 = t1d(rng), t2 = t2d(rng), pd = pdd(rng);
    std::vector<ScanParams> ps;
    for (auto seq : kSequences) ps.push_back(sample_protocol(seq, ranges, rng));
    const auto r = fit_voxel(simulate(pd, t1, t2, ps), ps, FitOptions{});
    const bool ok = rel(r.t1_ms, t1) < 1e-3 && rel(r.t2_ms, t2) < 1e-3 && rel(r.pd, pd) < 1e-3;
    if (!ok) {
      ++failures;
      MESSAGE("miss: T1 " << t1 << " T2 " << t2 << " PD " << pd << " -> " << r.t1_ms << " " << r.t2_ms << " " << r.pd);
    }
  }
  CHECK(failures == 0);
}

TEST_CASE("every fit reproduces the observed signals") {
  std::mt19937_64 rng(77);
  const ProtocolRanges ranges;
  std::uniform_real_distribution<double> t1d(kT1Min, kT1Max), t2d(kT2Min, kT2Max), pdd(100, 2000);
  for (int i = 0; i < 1000; ++i) {
    double t1 = t1d(rng), t2 = t2d(rng);
    while (t2 >= t1) t2 = t2d(rng);
    std::vector<ScanParams> ps;
    for (auto seq : kSequences) ps.push_back(sample_protocol(seq, ranges, rng));
    const auto s = simulate(pdd(rng), t1, t2, ps);
    const auto r = fit_voxel(s, ps, FitOptions{});
    double n = 0;
    for (double v : s) n += v * v;
    CHECK(r.residual_norm < 1e-6 * std::sqrt(n));
  }
}

TEST_CASE("fit_map on a noiseless phantom") {
  Rng rng(21);
  PhantomConfig cfg;
  const auto ph = generate_phantom(cfg, rng);
  std::vector<ScanParams> ps;
  for (auto seq : kSequences) ps.push_back(sample_protocol(seq, ProtocolRanges{}, rng));
  const auto stack = stack_for(ph.maps, ps);
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = fit_map(stack, ph.maps.mask, FitOptions{}, 1);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(secs < 60.0);
  CHECK(r.fitted == mask_count(ph.maps.mask));
  CHECK(mae_over(r.maps.t1, ph.maps.t1, ph.maps.mask) < 1e-3 * range_over(ph.maps.t1, ph.maps.mask));
  CHECK(mae_over(r.maps.t2, ph.maps.t2, ph.maps.mask) < 1e-3 * range_over(ph.maps.t2, ph.maps.mask));
  CHECK(mae_over(r.maps.pd, ph.maps.pd, ph.maps.mask) < 1e-3 * range_over(ph.maps.pd, ph.maps.mask));
  for (std::size_t i = 0; i < ph.maps.mask.size(); ++i) {
    if (!ph.maps.mask.data[i]) {
      CHECK(r.maps.t1.data[i] == 0.0f);
      CHECK(r.maps.pd.data[i] == 0.0f);
    }
  }

  const auto p = fit_map(stack, ph.maps.mask, FitOptions{}, 4);
  CHECK(p.maps.t1 == r.maps.t1);
  CHECK(p.maps.t2 == r.maps.t2);
  CHECK(p.maps.pd == r.maps.pd);
  CHECK(p.converged == r.converged);
  CHECK(p.residuals == r.residuals);

  CHECK_THROWS_AS(fit_map(stack, Mask(10, 10, 1), FitOptions{}, 1), ShapeError);
}

TEST_CASE("fit_map on a uniform phantom is uniform") {
  ParametricMaps m;
  m.t1 = Image(8, 8, 789.78f);
  m.t2 = Image(8, 8, 83.12f);
  m.pd = Image(8, 8, 766.01f);
  m.mask = Mask(8, 8, 1);
  const auto r = fit_map(stack_for(m, kMid), m.mask, FitOptions{}, 2);
  for (std::size_t i = 1; i < 64; ++i) {
    CHECK(r.maps.t1.data[i] == r.maps.t1.data[0]);
    CHECK(r.maps.t2.data[i] == r.maps.t2.data[0]);
    CHECK(r.maps.pd.data[i] == r.maps.pd.data[0]);
  }
  CHECK(r.converged_count == 64);
}

TEST_CASE("fit is unbiased on a noisy uniform region") {
  const double t1 = 789.78, t2 = 83.12, pd = 766.01;
  const auto clean = simulate(pd, t1, t2, kMid);
  std::mt19937_64 rng(99);
  const int n = 1000;
  std::vector<double> e1, e2, ep;
  for (int i = 0; i < n; ++i) {
    std::vector<double> s;
    for (double v : clean) {
      std::normal_distribution<double> g(0.0, 0.01 * v);
      const double a = v + g(rng), b = g(rng);
      s.push_back(std::sqrt(a * a + b * b));
    }
    const auto r = fit_voxel(s, kMid, FitOptions{});
    e1.push_back(r.t1_ms);
    e2.push_back(r.t2_ms);
    ep.push_back(r.pd);
  }
  auto check_mean = [&](const std::vector<double>& v, double truth) {
    double m = 0, q = 0;
    for (double x : v) m += x;
    m /= n;
    for (double x : v) q += (x - m) * (x - m);
    const double se = std::sqrt(q / (n - 1)) / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(m - truth) < 4.0 * se);
  };
  check_mean(e1, t1);
  check_mean(e2, t2);
  check_mean(ep, pd);
}

TEST_CASE("analytic Jacobian matches finite differences") {
  std::mt19937_64 rng(5);
  const ProtocolRanges ranges;
  std::uniform_real_distribution<double> t1d(300, 4500), t2d(40, 2000), pdd(100, 2000);
  int checked = 0;
  for (int i = 0; i < 500; ++i) {
    const double t1 = t1d(rng), t2 = std::min(t2d(rng), 0.9 * t1), pd = pdd(rng);
    for (auto seq : kSequences) {
      const auto p = sample_protocol(seq, ranges, rng);
      const auto j = signal_with_jacobian(pd, t1, t2, p);
      if (std::abs(j.signed_value) <= 1e-6) continue;
      CHECK(jacobian_check(t1, t2, pd, p) < 1e-5);
      CHECK(j.d_pd == signal_with_jacobian(1.0, t1, t2, p).value);
      ++checked;
    }
  }
  CHECK(checked > 1400);
}

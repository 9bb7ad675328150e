#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "qmri/metrics.hpp"

using namespace qmri;
using namespace qmri::metrics;
using testutil::full_mask;
using testutil::random_image;
using namespace oracle;

namespace {

bool close(double a, double b, double tol) { return std::fabs(a - b) <= tol * std::max(1.0, std::fabs(b)); }

ParametricMaps random_maps(std::mt19937_64& rng, std::size_t n) {
  ParametricMaps m;
  m.t1 = random_image(n, n, rng, 500, 4000);
  m.t2 = random_image(n, n, rng, 50, 1500);
  m.pd = random_image(n, n, rng, 600, 1800);
  m.mask = full_mask(n, n);
  return m;
}

}  // namespace

TEST_CASE("metric oracle equivalence on 100 random 32x32 pairs") {
  std::mt19937_64 rng(404);
  for (int k = 0; k < 100; ++k) {
    const Image x = random_image(32, 32, rng, 0.05, 1.0);
    const Image y = random_image(32, 32, rng, 0.05, 1.0);
    const Mask m = (k % 2) ? full_mask(32, 32) : disc_mask(32, 32, 14.0);
    CHECK(close(mae(x, y, m), naive_mae(x, y, m), 1e-10));
    const double eps = 1e-6 * masked_range(y, m);
    CHECK(close(mpe(x, y, m), naive_mpe(x, y, m, eps), 1e-10));
    CHECK(close(psnr(x, y, m), naive_psnr(x, y, m), 1e-10));
    CHECK(close(ssim(x, y, m), naive_ssim(x, y, m, 11, masked_range(y, m)), 1e-10));
    const Image nse = nse_map(x, y, m);
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t c = 0; c < 32; ++c) {
        // maps are float images
        CHECK(close(nse(r, c), static_cast<float>(naive_nse(x, y, m, r, c)), 1e-10));
      }
  }
}

TEST_CASE("mae examples and errors") {
  std::mt19937_64 rng(1);
  const Image y = random_image(8, 8, rng, -1, 1);
  Image x = y;
  CHECK(mae(x, y, full_mask(8, 8)) == 0.0);
  for (auto& v : x.data) v += 0.5f;
  CHECK(mae(x, y, full_mask(8, 8)) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK_THROWS_AS(mae(x, y, Mask(8, 8, 0)), InvalidArgument);
  CHECK_THROWS_AS(mae(x, Image(4, 4), full_mask(8, 8)), ShapeError);
}

TEST_CASE("mpe examples") {
  Image y(4, 4, 2.0f);
  y(0, 0) = 0.0f;  // excluded by the eps guard
  Image x(4, 4, 2.2f);
  x(0, 0) = 50.0f;
  const auto m = full_mask(4, 4);
  CHECK(mpe(y, y, m) == 0.0);
  CHECK(mpe(x, y, m, 1e-9) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK_THROWS_AS(mpe(x, Image(4, 4, 0.0f), m, 1e-9), InvalidArgument);
}

TEST_CASE("psnr examples") {
  // max(y) = 1 and every masked voxel off by 0.1: MSE = 0.01
  Image y(10, 10, 0.5f);
  y(3, 3) = 1.0f;
  Image x = y;
  for (auto& v : x.data) v += 0.1f;
  const auto m = full_mask(10, 10);
  CHECK(psnr(x, y, m) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK(std::isinf(psnr(y, y, m)));
  CHECK(psnr(y, y, m) > 0);

  std::mt19937_64 rng(8);
  const Image a = random_image(16, 16, rng, 0.1, 1), b = random_image(16, 16, rng, 0.1, 1);
  Image a4 = a, b4 = b;
  for (auto& v : a4.data) v *= 4.0f;
  for (auto& v : b4.data) v *= 4.0f;
  CHECK(psnr(a4, b4, full_mask(16, 16)) == doctest::Approx(psnr(a, b, full_mask(16, 16))).epsilon(1e-9));
  CHECK_THROWS_AS(psnr(a, b, Mask(16, 16, 0)), InvalidArgument);
}

TEST_CASE("psnr falls as noise grows") {
  const double sigmas[] = {0.01, 0.02, 0.05};
  double avg[3] = {0, 0, 0};
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Image y = random_image(32, 32, rng, 0.2, 1.0);
    for (int s = 0; s < 3; ++s) {
      std::normal_distribution<double> n(0.0, sigmas[s]);
      Image x = y;
      for (auto& v : x.data) v = float(v + n(rng));
      avg[s] += psnr(x, y, full_mask(32, 32)) / 100.0;
    }
  }
  CHECK(avg[0] > avg[1]);
  CHECK(avg[1] > avg[2]);
}

TEST_CASE("ssim examples") {
  std::mt19937_64 rng(12);
  const Image x = random_image(20, 20, rng, 0, 1);
  const Image y = random_image(20, 20, rng, 0, 1);
  const auto m = full_mask(20, 20);
  CHECK(ssim(x, x, m) == 1.0);
  SsimOptions fixed;
  fixed.data_range = 1.0;
  CHECK(ssim(x, y, m, fixed) == doctest::Approx(ssim(y, x, m, fixed)).epsilon(1e-12));
  const double s = ssim(x, y, m);
  CHECK(s >= -1.0);
  CHECK(s <= 1.0);

  const Image cx(16, 16, 0.5f), cy(16, 16, 0.25f);
  CHECK(ssim(cx, cy, full_mask(16, 16), fixed) == doctest::Approx((0.25 + 1e-4) / (0.3125 + 1e-4)).epsilon(1e-12));
  CHECK(ssim(cx, cy, full_mask(16, 16), fixed) == doctest::Approx(0.80007).epsilon(1e-5));

  CHECK_THROWS_AS(ssim(Image(10, 10), Image(10, 10), full_mask(10, 10)), ShapeError);
  SsimOptions even;
  even.window = 4;
  CHECK_THROWS_AS(ssim(x, y, m, even), InvalidArgument);
}

TEST_CASE("nse map is local and nonnegative") {
  Image ref(6, 6, 2.0f);
  Image pred = ref;
  const auto m = full_mask(6, 6);
  for (float v : nse_map(pred, ref, m).data) CHECK(v == 0.0f);
  pred(2, 3) += 0.5f;
  const Image n = nse_map(pred, ref, m);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 6; ++c) CHECK(n(r, c) == doctest::Approx(r == 2 && c == 3 ? 0.25 / 2.0 * 100.0 : 0.0));

  std::mt19937_64 rng(3);
  const Image a = random_image(12, 12, rng, -1, 1), b = random_image(12, 12, rng, -1, 1);
  Mask half = full_mask(12, 12);
  for (std::size_t c = 0; c < 12; ++c) half(0, c) = 0;
  const Image nn = nse_map(a, b, half);
  for (std::size_t i = 0; i < nn.size(); ++i) CHECK(nn.data[i] >= 0.0f);
  for (std::size_t c = 0; c < 12; ++c) CHECK(nn(0, c) == 0.0f);
}

TEST_CASE("roi_mean") {
  const Image k(32, 32, 7.25f);
  CHECK(roi_mean(k, RoiDisc{16, 16, 8.0, Tissue::Wm}) == doctest::Approx(7.25));

  int lattice = 0;
  for (int dy = -4; dy <= 4; ++dy)
    for (int dx = -4; dx <= 4; ++dx) lattice += dy * dy + dx * dx <= 16;
  CHECK(lattice == 49);
  CHECK(disc_offsets(8.0).size() == 49);

  // count via an indicator map: mean of a one-hot map is 1/count
  Image onehot(32, 32, 0.0f);
  onehot(16, 16) = 1.0f;
  CHECK(roi_mean(onehot, RoiDisc{16, 16, 8.0, Tissue::Wm}) == doctest::Approx(1.0 / 49.0));

  Image grad(32, 32);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) grad(r, c) = float(3.0 * c + 0.5 * r);
  CHECK(roi_mean(grad, RoiDisc{10, 20, 8.0, Tissue::Gm}) == doctest::Approx(3.0 * 20 + 0.5 * 10));

  CHECK_THROWS_AS(roi_mean(k, RoiDisc{2, 16, 8.0, Tissue::Wm}), InvalidArgument);
  CHECK_THROWS_AS(roi_mean(k, RoiDisc{16, 30, 8.0, Tissue::Wm}), InvalidArgument);
}

TEST_CASE("evaluate with identical maps") {
  std::mt19937_64 rng(5);
  const auto ref = random_maps(rng, 24);
  const std::vector<RoiDisc> rois{{8, 8, 8.0, Tissue::Wm}, {15, 15, 8.0, Tissue::Csf}};
  const auto s = evaluate(ref, ref, rois, "slice");
  CHECK(s.id == "slice");
  for (const auto& mm : s.maps) {
    CHECK(mm.mae == 0.0);
    CHECK(mm.mae_unit == 0.0);
    CHECK(mm.mpe == 0.0);
    CHECK(std::isinf(mm.psnr_db));
    CHECK(mm.ssim == 1.0);
  }
  REQUIRE(s.rois.size() == 2);
  for (const auto& r : s.rois)
    for (int c = 0; c < 3; ++c) CHECK(r.pred[c] == r.ref[c]);
}

TEST_CASE("evaluate rescales PD and reports unit MAE") {
  std::mt19937_64 rng(6);
  const auto ref = random_maps(rng, 24);
  auto pred = ref;
  for (auto& v : pred.pd.data) v *= 3.0f;  // PD gain is not meaningful
  for (auto& v : pred.t1.data) v += 60.0f;
  const auto s = evaluate(pred, ref, {}, "x");
  CHECK(s.maps[2].mae == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(s.maps[0].mae == doctest::Approx(60.0).epsilon(1e-4));
  CHECK(s.maps[0].mae_unit == doctest::Approx(60.0 / 6000.0).epsilon(1e-4));
  CHECK(s.maps[1].mae == 0.0);

  const Image u = rescale_unit(ref.pd, ref.mask);
  float mx = 0;
  for (float v : u.data) mx = std::max(mx, v);
  CHECK(mx == 1.0f);
}

TEST_CASE("report aggregation matches brute force") {
  std::mt19937_64 rng(9);
  std::vector<SliceMetrics> slices;
  std::vector<ParametricMaps> refs;
  for (int i = 0; i < 6; ++i) {
    const auto ref = random_maps(rng, 24);
    auto pred = random_maps(rng, 24);
    const std::vector<RoiDisc> rois{{8, 8, 8.0, Tissue::Wm}, {14, 12, 8.0, Tissue::Gm}};
    slices.push_back(evaluate(pred, ref, rois, "s" + std::to_string(i)));
  }
  const auto rep = build_report(slices);
  for (int c = 0; c < 3; ++c) {
    double mean = 0;
    for (const auto& s : slices) mean += s.maps[c].ssim;
    mean /= 6;
    double var = 0;
    for (const auto& s : slices) var += std::pow(s.maps[c].ssim - mean, 2);
    CHECK(rep.maps[c].ssim.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(rep.maps[c].ssim.std == doctest::Approx(std::sqrt(var / 6)).epsilon(1e-12));
    CHECK(rep.maps[c].ssim.count == 6);
    CHECK(rep.maps[c].ssim.std >= 0.0);
  }
  REQUIRE(rep.tissues.size() == 2);
  CHECK(rep.tissues[0].label == Tissue::Gm);
  CHECK(rep.tissues[1].label == Tissue::Wm);
  double wm = 0;
  for (const auto& s : slices) wm += s.rois[0].pred[0];
  CHECK(rep.tissues[1].pred[0].mean == doctest::Approx(wm / 6).epsilon(1e-12));

  const auto back = report_from_json(to_json(rep));
  CHECK(back == rep);
  CHECK(to_json(back).dump() == to_json(rep).dump());
}

TEST_CASE("summary handles infinite values") {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> v{1.0, 3.0, inf};
  const auto s = summarize(v);
  CHECK(s.mean == 2.0);
  CHECK(s.std == 1.0);
  CHECK(s.count == 3);
  CHECK(s.infinite == 1);
  const std::vector<double> all{inf, inf};
  CHECK(std::isinf(summarize(all).mean));
  CHECK(number_json(inf) == "inf");
  CHECK(std::isinf(number_from_json(number_json(inf))));
  CHECK(number_from_json(number_json(0.1)) == 0.1);
  CHECK_THROWS_AS(number_from_json(json("big")), InvalidArgument);
}

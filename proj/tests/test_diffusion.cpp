#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

#include "fd3d/diffusion.hpp"

using namespace fd3d;

TEST_CASE("linear beta schedule hits its endpoints and decays alpha_bar") {
  const Schedule s = make_schedule(1000);
  REQUIRE(s.T == 1000);
  CHECK(s.beta[0] == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta[999] == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(s.beta[499] ==
        doctest::Approx(1e-4 + (0.02 - 1e-4) * 499.0 / 999.0).epsilon(1e-12));
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(s.alpha[i] == 1.0 - s.beta[i]);
    if (i > 0) {
      CHECK(s.beta[i] > s.beta[i - 1]);
      CHECK(s.alpha_bar[i] < s.alpha_bar[i - 1]);
    }
  }
  // after the full chain almost no signal survives
  CHECK(s.alpha_bar[999] > 3e-5);
  CHECK(s.alpha_bar[999] < 5e-5);
}

TEST_CASE("one-step schedule keeps a single beta") {
  const Schedule s = make_schedule(1, 1e-4, 0.02);
  CHECK(s.beta == std::vector<double>{1e-4});
  CHECK(s.alpha_bar[0] == 1.0 - 1e-4);
}

TEST_CASE("invalid schedules are rejected") {
  CHECK_THROWS_AS(make_schedule(0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.02, 1e-4), std::invalid_argument);
}

TEST_CASE("q_sample with zero noise scales by sqrt(alpha_bar)") {
  const Schedule s = make_schedule(100);
  const PointCloud x0 = synth_shape(ShapeKind::box, 64, 5);
  PointCloud zero;
  zero.points.resize(64);
  for (std::size_t t : {std::size_t(1), std::size_t(37), std::size_t(100)}) {
    const PointCloud xt = q_sample(x0, t, zero, s);
    const double a = std::sqrt(s.alpha_bar[t - 1]);
    for (std::size_t i = 0; i < 64; ++i)
      for (int ax = 0; ax < 3; ++ax)
        CHECK(xt.points[i][ax] ==
              doctest::Approx(a * x0.points[i][ax]).epsilon(1e-6));
  }
}

TEST_CASE("q_sample at the last step is almost pure noise") {
  const Schedule s = make_schedule(1000);
  const PointCloud x0 = synth_shape(ShapeKind::sphere, 256, 9);
  const PointCloud eps = sample_gaussian_cloud(256, 10);
  const PointCloud xt = q_sample(x0, 1000, eps, s);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < 256; ++i)
    for (int ax = 0; ax < 3; ++ax) {
      const double d = xt.points[i][ax] - eps.points[i][ax];
      num += d * d;
      den += static_cast<double>(eps.points[i][ax]) * eps.points[i][ax];
    }
  CHECK(std::sqrt(num / den) < 1e-2);
}

TEST_CASE("q_sample moments match the marginal closed form") {
  const Schedule s = make_schedule(1000);
  const std::size_t K = 100000;
  PointCloud x0;
  x0.points.assign(K, {0.5f, -0.25f, 0.8f});
  const PointCloud eps = sample_gaussian_cloud(K, 4242);
  for (std::size_t t : {std::size_t(1), std::size_t(500), std::size_t(1000)}) {
    const PointCloud xt = q_sample(x0, t, eps, s);
    const double a = std::sqrt(s.alpha_bar[t - 1]);
    const double b = std::sqrt(1.0 - s.alpha_bar[t - 1]);
    for (int ax = 0; ax < 3; ++ax) {
      double mean = 0.0;
      for (std::size_t i = 0; i < K; ++i) mean += xt.points[i][ax];
      mean /= static_cast<double>(K);
      double var = 0.0;
      for (std::size_t i = 0; i < K; ++i) {
        const double d = xt.points[i][ax] - mean;
        var += d * d;
      }
      var /= static_cast<double>(K);
      CHECK(std::abs(mean - a * x0.points[0][ax]) <
            4.0 * b / std::sqrt(static_cast<double>(K)) + 1e-6);
      CHECK(var > 0.97 * b * b);
      CHECK(var < 1.03 * b * b);
    }
  }
}

TEST_CASE("q_sample validates its inputs") {
  const Schedule s = make_schedule(10);
  const PointCloud x0 = sample_gaussian_cloud(4, 1);
  const PointCloud eps = sample_gaussian_cloud(4, 2);
  const PointCloud small = sample_gaussian_cloud(3, 3);
  CHECK_THROWS_WITH_AS(q_sample(x0, 0, eps, s), "q_sample: timestep out of range",
                       std::invalid_argument);
  CHECK_THROWS_AS(q_sample(x0, 11, eps, s), std::invalid_argument);
  CHECK_THROWS_AS(q_sample(x0, 5, small, s), std::invalid_argument);
}

TEST_CASE("dual loss is zero for a perfect prediction") {
  const PointCloud eps = sample_gaussian_cloud(12, 7);
  Arr<double> pred({12, 3});
  for (std::size_t i = 0; i < 12; ++i)
    for (int a = 0; a < 3; ++a) pred(i, a) = eps.points[i][a];
  Tape<double> tp;
  std::vector<std::uint8_t> mask(12, 0);
  mask[3] = mask[7] = 1;
  const auto ln = dual_loss(tp, tp.input(pred), eps, mask, 0.1);
  CHECK(ln.denoise_v == 0.0);
  CHECK(ln.masked_v == 0.0);
  CHECK(ln.total_v == 0.0);
  CHECK(ln.unmasked_coords == 30);
  CHECK(ln.masked_coords == 6);
}

TEST_CASE("with nothing masked the dual loss is the plain mean square") {
  Rng rng(8);
  const PointCloud eps = sample_gaussian_cloud(10, 9);
  Arr<double> pred({10, 3});
  for (double& v : pred.data) v = rng.next_gaussian();
  Tape<double> tp;
  const auto ln = dual_loss(tp, tp.input(pred), eps, std::vector<std::uint8_t>(10, 0), 0.5);
  double mse = 0.0;
  for (std::size_t i = 0; i < 10; ++i)
    for (int a = 0; a < 3; ++a) {
      const double d = pred(i, a) - eps.points[i][a];
      mse += d * d;
    }
  mse /= 30.0;
  CHECK(ln.denoise_v == doctest::Approx(mse).epsilon(1e-12));
  CHECK(ln.masked_v == 0.0);
  CHECK(ln.total_v == doctest::Approx(mse).epsilon(1e-12));
}

TEST_CASE("with everything masked only the weighted term survives") {
  Rng rng(10);
  const PointCloud eps = sample_gaussian_cloud(6, 11);
  Arr<double> pred({6, 3});
  for (double& v : pred.data) v = rng.next_gaussian();
  Tape<double> tp;
  const auto ln = dual_loss(tp, tp.input(pred), eps, std::vector<std::uint8_t>(6, 1), 0.1);
  CHECK(ln.denoise_v == 0.0);
  CHECK(ln.unmasked_coords == 0);
  CHECK(ln.masked_coords == 18);
  CHECK(ln.total_v == 0.1 * ln.masked_v);
}

TEST_CASE("the dual loss is affine in lambda with per-partition means") {
  Rng rng(12);
  const PointCloud eps = sample_gaussian_cloud(9, 13);
  Arr<double> pred({9, 3});
  for (double& v : pred.data) v = rng.next_gaussian();
  std::vector<std::uint8_t> mask(9, 0);
  mask[0] = mask[4] = mask[5] = mask[8] = 1;

  double mse_u = 0.0, mse_m = 0.0;
  for (std::size_t i = 0; i < 9; ++i)
    for (int a = 0; a < 3; ++a) {
      const double d = pred(i, a) - eps.points[i][a];
      (mask[i] ? mse_m : mse_u) += d * d;
    }
  mse_u /= 15.0;
  mse_m /= 12.0;

  for (double lambda : {0.1, 0.7}) {
    Tape<double> tp;
    const auto ln = dual_loss(tp, tp.input(pred), eps, mask, lambda);
    CHECK(ln.denoise_v == doctest::Approx(mse_u).epsilon(1e-12));
    CHECK(ln.masked_v == doctest::Approx(mse_m).epsilon(1e-12));
    CHECK(ln.total_v == ln.denoise_v + lambda * ln.masked_v);
  }
}

TEST_CASE("dual loss pushes gradients only through the prediction") {
  const PointCloud eps = sample_gaussian_cloud(5, 14);
  Arr<double> pred({5, 3});
  Tape<double> tp;
  const int pid = tp.input(pred);
  std::vector<std::uint8_t> mask(5, 0);
  mask[2] = 1;
  const auto ln = dual_loss(tp, pid, eps, mask, 0.1);
  tp.backward(ln.total);
  // d/dpred of mean-sq: 2 (pred - eps) / coords, scaled by lambda when masked
  for (std::size_t i = 0; i < 5; ++i)
    for (int a = 0; a < 3; ++a) {
      const double d = pred(i, a) - eps.points[i][a];
      const double want = mask[i] ? 0.1 * 2.0 * d / 3.0 : 2.0 * d / 12.0;
      CHECK(tp.grad(pid)(i, a) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("dual loss validates shapes") {
  const PointCloud eps = sample_gaussian_cloud(4, 15);
  Tape<double> tp;
  const int bad = tp.input(Arr<double>::zeros({4, 2}));
  const int good = tp.input(Arr<double>::zeros({4, 3}));
  CHECK_THROWS_AS(dual_loss(tp, bad, eps, std::vector<std::uint8_t>(4, 0), 0.1),
                  std::invalid_argument);
  CHECK_THROWS_AS(dual_loss(tp, good, eps, std::vector<std::uint8_t>(3, 0), 0.1),
                  std::invalid_argument);
}

TEST_CASE("one reverse step undoes one forward step exactly at t=1") {
  const Schedule s = make_schedule(50);
  const PointCloud x0 = synth_shape(ShapeKind::cross, 40, 17);
  const PointCloud eps = sample_gaussian_cloud(40, 18);
  const PointCloud x1 = q_sample(x0, 1, eps, s);
  Rng rng(19);
  auto eps_fn = [&](const PointCloud&, std::size_t, int) { return eps; };
  const PointCloud rec = p_sample_step(eps_fn, s, x1, 1, 0, rng);
  for (std::size_t i = 0; i < 40; ++i)
    for (int a = 0; a < 3; ++a)
      CHECK(rec.points[i][a] == doctest::Approx(x0.points[i][a]).epsilon(1e-5));
}

TEST_CASE("the final reverse step adds no noise") {
  const Schedule s = make_schedule(20);
  const PointCloud x = sample_gaussian_cloud(16, 21);
  auto zero_fn = [](const PointCloud& in, std::size_t, int) {
    PointCloud e;
    e.points.resize(in.n());
    return e;
  };
  Rng r1(1), r2(999);
  r2.next_u64();
  const PointCloud a = p_sample_step(zero_fn, s, x, 1, 0, r1);
  const PointCloud b = p_sample_step(zero_fn, s, x, 1, 0, r2);
  CHECK(a.points == b.points);
  // and matches the closed form x / sqrt(alpha_1)
  for (std::size_t i = 0; i < 16; ++i)
    for (int ax = 0; ax < 3; ++ax)
      CHECK(a.points[i][ax] ==
            doctest::Approx(x.points[i][ax] / std::sqrt(s.alpha[0])).epsilon(1e-6));
}

TEST_CASE("later reverse steps consume the rng stream") {
  const Schedule s = make_schedule(20);
  const PointCloud x = sample_gaussian_cloud(16, 22);
  auto zero_fn = [](const PointCloud& in, std::size_t, int) {
    PointCloud e;
    e.points.resize(in.n());
    return e;
  };
  Rng r1(5), r2(5), r3(6);
  const PointCloud a = p_sample_step(zero_fn, s, x, 7, 0, r1);
  const PointCloud b = p_sample_step(zero_fn, s, x, 7, 0, r2);
  const PointCloud c = p_sample_step(zero_fn, s, x, 7, 0, r3);
  CHECK(a.points == b.points);
  CHECK(a.points != c.points);
}

TEST_CASE("reverse steps validate the predictor output") {
  const Schedule s = make_schedule(10);
  const PointCloud x = sample_gaussian_cloud(8, 23);
  Rng rng(24);
  auto short_fn = [](const PointCloud& in, std::size_t, int) {
    PointCloud e;
    e.points.resize(in.n() - 1);
    return e;
  };
  auto nan_fn = [](const PointCloud& in, std::size_t, int) {
    PointCloud e;
    e.points.resize(in.n());
    e.points[0][0] = std::numeric_limits<float>::quiet_NaN();
    return e;
  };
  auto zero_fn = [](const PointCloud& in, std::size_t, int) {
    PointCloud e;
    e.points.resize(in.n());
    return e;
  };
  CHECK_THROWS_AS(p_sample_step(short_fn, s, x, 5, 0, rng), std::invalid_argument);
  CHECK_THROWS_WITH_AS(p_sample_step(nan_fn, s, x, 3, 0, rng),
                       "non-finite model output at step 3", std::runtime_error);
  CHECK_THROWS_AS(p_sample_step(zero_fn, s, x, 0, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(p_sample_step(zero_fn, s, x, 11, 0, rng), std::invalid_argument);
}

TEST_CASE("sampling walks the full chain once per cloud") {
  const Schedule s = make_schedule(10);
  std::vector<std::size_t> seen_t;
  std::vector<int> seen_cls;
  auto probe_fn = [&](const PointCloud& in, std::size_t t, int cls) {
    seen_t.push_back(t);
    seen_cls.push_back(cls);
    PointCloud e;
    e.points.resize(in.n());
    return e;
  };
  const auto clouds = sample_clouds(probe_fn, s, 2, 32, 1, 3, 77);
  REQUIRE(clouds.size() == 2);
  REQUIRE(seen_t.size() == 20);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(seen_t[i] == 10 - i);
    CHECK(seen_t[10 + i] == 10 - i);
  }
  for (int c : seen_cls) CHECK(c == 1);
  for (const auto& c : clouds) {
    CHECK(c.n() == 32);
    for (const auto& p : c.points)
      for (int a = 0; a < 3; ++a) CHECK(std::isfinite(p[a]));
  }
}

TEST_CASE("each sampled cloud has its own stream") {
  const Schedule s = make_schedule(8);
  auto zero_fn = [](const PointCloud& in, std::size_t, int) {
    PointCloud e;
    e.points.resize(in.n());
    return e;
  };
  const auto two = sample_clouds(zero_fn, s, 2, 16, 0, 1, 91);
  const auto one = sample_clouds(zero_fn, s, 1, 16, 0, 1, 91);
  REQUIRE(two.size() == 2);
  CHECK(two[0].points == one[0].points);
  CHECK(two[0].points != two[1].points);
  const auto redo = sample_clouds(zero_fn, s, 2, 16, 0, 1, 91);
  CHECK(two[0].points == redo[0].points);
  CHECK(two[1].points == redo[1].points);
  const auto other = sample_clouds(zero_fn, s, 1, 16, 0, 1, 92);
  CHECK(two[0].points != other[0].points);
}

TEST_CASE("sampling rejects bad class ids and returns nothing for count zero") {
  const Schedule s = make_schedule(5);
  auto zero_fn = [](const PointCloud& in, std::size_t, int) {
    PointCloud e;
    e.points.resize(in.n());
    return e;
  };
  CHECK(sample_clouds(zero_fn, s, 0, 8, 0, 1, 1).empty());
  CHECK_THROWS_WITH_AS(sample_clouds(zero_fn, s, 1, 8, -1, 3, 1), "class id out of range",
                       std::invalid_argument);
  CHECK_THROWS_AS(sample_clouds(zero_fn, s, 1, 8, 3, 3, 1), std::invalid_argument);
}

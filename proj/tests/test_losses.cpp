#include <catch_amalgamated.hpp>

#include <cmath>

#include "dyolo/adaption.hpp"
#include "gradcheck.hpp"

using namespace dyolo;
using dyolo::testing::gradcheck;
using dyolo::testing::random_tensor;

namespace {

// Naive channel-wise KL written directly from the definition, no shared helpers.
double cwd_reference(const Tensor<double>& fc, const Tensor<double>& fd, double tau) {
  const Shape s = fc.shape();
  double total = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      double zc = 0, zd = 0;
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          zc += std::exp(fc.at(n, c, y, x) / tau);
          zd += std::exp(fd.at(n, c, y, x) / tau);
        }
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const double p = std::exp(fc.at(n, c, y, x) / tau) / zc;
          const double q = std::exp(fd.at(n, c, y, x) / tau) / zd;
          total += p * std::log(p / q) / s.n;
        }
    }
  return total * tau * tau;
}

}  // namespace

TEST_CASE("cwd loss hand case", "[cwd]") {
  auto fc = Tensor<double>::from(Shape{1, 1, 1, 2}, {0.0, std::log(2.0)});
  auto fd = Tensor<double>::from(Shape{1, 1, 1, 2}, {0.0, 0.0});
  // (1/3) ln(2/3) + (2/3) ln(4/3), evaluated independently in Python.
  CHECK(std::abs(cwd_loss(fc, fd, 1.0).item() - 0.056633012265132426) <= 1e-6);
}

TEST_CASE("cwd loss is zero at equality and non-negative", "[cwd]") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    auto fc = random_tensor(Shape{2, 3, 3, 4}, rng, -4, 4);
    auto fd = random_tensor(Shape{2, 3, 3, 4}, rng, -4, 4);
    CHECK(cwd_loss(fc, fc, 1.0).item() == 0.0);
    const double v = cwd_loss(fc, fd, 1.0).item();
    CHECK(v >= 0.0);
    if (trial < 50) CHECK(v == Catch::Approx(cwd_reference(fc, fd, 1.0)).epsilon(1e-12));
  }
}

TEST_CASE("cwd loss is invariant to per-channel spatial shifts", "[cwd]") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> shift(-5, 5);
  for (int trial = 0; trial < 100; ++trial) {
    auto fc = random_tensor(Shape{2, 3, 4, 4}, rng);
    auto fd = random_tensor(Shape{2, 3, 4, 4}, rng);
    const double before = cwd_loss(fc, fd, 2.0).item();
    std::vector<double> sc(fc.data().begin(), fc.data().end());
    std::vector<double> sd(fd.data().begin(), fd.data().end());
    for (int nc = 0; nc < 6; ++nc) {
      const double a = shift(rng);
      const double b = shift(rng);
      for (int k = 0; k < 16; ++k) {
        sc[nc * 16 + k] += a;
        sd[nc * 16 + k] += b;
      }
    }
    const double after =
        cwd_loss(Tensor<double>::from(fc.shape(), sc), Tensor<double>::from(fd.shape(), sd), 2.0).item();
    CHECK(std::abs(after - before) <= 1e-9);
  }
}

TEST_CASE("cwd loss stays finite for growing temperature", "[cwd]") {
  std::mt19937_64 rng(3);
  auto fc = random_tensor(Shape{1, 4, 3, 3}, rng, -3, 3);
  for (double tau : {1.0, 2.0, 10.0}) {
    auto fd = random_tensor(Shape{1, 4, 3, 3}, rng, -3, 3).set_requires_grad(true);
    auto loss = cwd_loss(fc, fd, tau);
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() < 100.0);
    loss.backward();
    for (double g : fd.grad()) CHECK(std::isfinite(g));
  }
}

TEST_CASE("cwd loss gradient reaches the student only", "[cwd][grad]") {
  std::mt19937_64 rng(4);
  auto fc = random_tensor(Shape{2, 3, 3, 3}, rng);
  auto fd = random_tensor(Shape{2, 3, 3, 3}, rng);
  fc.set_requires_grad(true);
  for (double tau : {1.0, 2.0}) {
    const auto r = gradcheck({fd}, [&] { return cwd_loss(fc, fd, tau); });
    CHECK(r.max_rel_error <= 1e-3);
  }
  fd.zero_grad();
  cwd_loss(fc, fd, 1.0).backward();
  CHECK(fc.grad().empty());
}

TEST_CASE("cwd loss argument validation", "[cwd]") {
  auto a = Tensor<double>::zeros(Shape{1, 2, 2, 2});
  auto b = Tensor<double>::zeros(Shape{1, 2, 2, 3});
  CHECK_THROWS_AS(cwd_loss(a, b, 1.0), InvalidArgument);
  CHECK_THROWS_AS(cwd_loss(a, a, 0.0), InvalidArgument);
  CHECK_THROWS_AS(cwd_loss(a, a, -1.0), InvalidArgument);
}

TEST_CASE("mimic losses", "[mimic]") {
  auto fc = Tensor<double>::full(Shape{2, 3, 4, 4}, 1.0);
  auto fd = Tensor<double>::full(Shape{2, 3, 4, 4}, 1.5);
  CHECK(mimic_loss(fc, fc, 1).item() == 0.0);
  CHECK(mimic_loss(fc, fd, 1).item() == Catch::Approx(0.5));
  CHECK(mimic_loss(fc, fd, 2).item() == Catch::Approx(0.25));
  CHECK_THROWS_AS(mimic_loss(fc, Tensor<double>::zeros(Shape{1, 3, 4, 4}), 1), InvalidArgument);

  std::mt19937_64 rng(5);
  auto a = random_tensor(Shape{2, 3, 5, 5}, rng);
  auto b = random_tensor(Shape{2, 3, 5, 5}, rng);
  double l1 = 0, l2 = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    l1 += std::abs(d);
    l2 += d * d;
  }
  CHECK(std::abs(mimic_loss(a, b, 1).item() - l1 / a.numel()) <= 1e-9);
  CHECK(std::abs(mimic_loss(a, b, 2).item() - l2 / a.numel()) <= 1e-9);
  CHECK(gradcheck({b}, [&] { return mimic_loss(a, b, 2); }).max_rel_error <= 1e-3);
}

TEST_CASE("multiscale loss weights the finest level most", "[adaption]") {
  std::mt19937_64 rng(6);
  std::vector<Tensor<double>> fc, fd;
  for (int l = 0; l < 3; ++l) {
    const int size = 8 >> l;
    fc.push_back(random_tensor(Shape{1, 2, size, size}, rng));
    fd.push_back(fc.back());
  }
  AdaptionLossConfig cfg;
  CHECK(cfg.scale_weights == std::array<double, 3>{0.7, 0.2, 0.1});
  CHECK(cfg.tau == 1.0);
  CHECK(multiscale_adaption_loss(fc, fd, cfg).item() == 0.0);

  fd[0] = random_tensor(fc[0].shape(), rng);
  const double v = cwd_loss(fc[0], fd[0], 1.0).item();
  CHECK(multiscale_adaption_loss(fc, fd, cfg).item() == Catch::Approx(0.7 * v).epsilon(1e-12));

  cfg.kind = AdaptionLossKind::mimic_l2;
  const double m = mimic_loss(fc[0], fd[0], 2).item();
  CHECK(multiscale_adaption_loss(fc, fd, cfg).item() == Catch::Approx(0.7 * m).epsilon(1e-12));

  fc.pop_back();
  CHECK_THROWS_AS(multiscale_adaption_loss(fc, fd, cfg), InvalidArgument);
}

TEST_CASE("adaption loss config validation", "[adaption]") {
  AdaptionLossConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.scale_weights = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg.scale_weights = {1.2, -0.1, -0.1};
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = AdaptionLossConfig{};
  cfg.tau = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  CHECK_THROWS_AS(adaption_loss_kind_from_string("mgd"), ValidationError);
}

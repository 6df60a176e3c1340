#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "doctest.h"
#include "test_support.hpp"
#include "waunet/tensor/grad_check.hpp"
#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/parallel.hpp"
#include "waunet/tensor/wtf1.hpp"

using namespace waunet;
using waunet::test::max_abs_diff;
using waunet::test::random_tensor;

namespace {

// sum(f(x) * R) with a fixed random R, so every output element matters.
Tensor weighted_sum(const Tensor& y, const Tensor& r) { return ops::sum(ops::mul(y, r)); }

// Values kept away from zero so relu is smooth near the check point.
Tensor random_away_from_zero(const Shape& s, Rng& rng) {
  std::vector<double> v(numel(s));
  for (auto& x : v) {
    x = rng.uniform(0.05, 1.0);
    if (rng.bernoulli(0.5)) x = -x;
  }
  return Tensor::from_values(s, v, DType::f64);
}

}  // namespace

TEST_CASE("conv2d identity kernel returns the input") {
  Tensor x = Tensor::from_values({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::full({1, 1, 1, 1}, 1.0);
  CHECK(ops::conv2d(x, w).to_vector() == x.to_vector());
}

TEST_CASE("conv2d padding geometry: only the centre tap overlaps a single pixel") {
  Tensor x = Tensor::full({1, 1, 1, 1}, 5.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = ops::conv2d(x, w, {}, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 5.0);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(11);
  SUBCASE("2x4x8x8 with 6x4x3x3 kernel") {
    Tensor x = random_tensor({2, 4, 8, 8}, rng, DType::f32);
    Tensor w = random_tensor({6, 4, 3, 3}, rng, DType::f32);
    Tensor y = ops::conv2d(x, w, {}, 1, 1);
    CHECK(y.shape() == Shape{2, 6, 8, 8});
    CHECK(max_abs_diff(y.to_vector(), test::conv2d_oracle(x, w, 1, 1)) < 1e-5);
  }
  SUBCASE("100 random small geometries") {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t k = 1 + rng.below(3), stride = 1 + rng.below(2), pad = rng.below(k);
      std::size_t h = k + rng.below(6);
      while ((h + 2 * pad - k) % stride) ++h;
      Tensor x = random_tensor({1 + rng.below(2), 1 + rng.below(3), h, h}, rng, DType::f32);
      Tensor w = random_tensor({1 + rng.below(3), x.dim(1), k, k}, rng, DType::f32);
      Tensor y = ops::conv2d(x, w, {}, stride, pad);
      REQUIRE(max_abs_diff(y.to_vector(), test::conv2d_oracle(x, w, stride, pad)) < 1e-5);
    }
  }
}

TEST_CASE("conv2d rejects channel mismatch and non-integral output") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({2, 2, 3, 3})), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({2, 3, 3, 3}), {}, 2, 0), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor::zeros({2, 3, 5, 5})), DimensionError);
}

TEST_CASE("maxpool2d picks window maxima") {
  Tensor x = Tensor::from_values({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(ops::maxpool2d(x).item() == 4.0);
  CHECK_THROWS_AS(ops::maxpool2d(Tensor::zeros({1, 1, 3, 4})), DimensionError);
}

TEST_CASE("maxpool2d ties route the gradient to the top-left element") {
  Tensor x = Tensor::full({1, 1, 4, 4}, 2.0, DType::f64, true);
  Tensor y = ops::maxpool2d(x);
  CHECK(y.to_vector() == std::vector<double>(4, 2.0));
  ops::sum(y).backward();
  auto g = x.grad().to_vector();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(g[r * 4 + c] == ((r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0));
}

TEST_CASE("maxpool2d matches the window-scan oracle exactly") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({1, 3, 8, 8}, rng, DType::f32);
    auto xv = x.to_vector();
    std::vector<double> want;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t q = 0; q < 4; ++q) {
          double m = -INFINITY;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              m = std::max(m, xv[(c * 8 + 2 * r + a) * 8 + 2 * q + b]);
          want.push_back(m);
        }
    REQUIRE(ops::maxpool2d(x).to_vector() == want);
  }
}

TEST_CASE("deconv2d single tap scatter and shape arithmetic") {
  Tensor x = Tensor::full({1, 1, 1, 1}, 3.0);
  Tensor y = ops::deconv2d(x, Tensor::full({1, 1, 2, 2}, 1.0));
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.to_vector() == std::vector<double>(4, 3.0));
  CHECK(ops::deconv2d(Tensor::zeros({1, 8, 16, 16}), Tensor::zeros({8, 4, 2, 2})).shape() ==
        Shape{1, 4, 32, 32});
  CHECK_THROWS_AS(ops::deconv2d(Tensor::zeros({1, 8, 4, 4}), Tensor::zeros({4, 4, 2, 2})),
                  DimensionError);
}

TEST_CASE("deconv2d matches the scatter-add oracle") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4),
                              1 + rng.below(4)},
                             rng, DType::f32);
    Tensor w = random_tensor({x.dim(1), 1 + rng.below(3), 2, 2}, rng, DType::f32);
    REQUIRE(max_abs_diff(ops::deconv2d(x, w).to_vector(), test::deconv2d_oracle(x, w)) < 1e-5);
  }
}

TEST_CASE("softmax closed forms and stability") {
  auto close = [](const std::vector<double>& a, const std::vector<double>& b) {
    return max_abs_diff(a, b) < 1e-7;
  };
  Tensor a = Tensor::from_values({3}, std::vector<double>{0, 0, 0}, DType::f64);
  CHECK(close(ops::softmax(a, 0).to_vector(), {1.0 / 3, 1.0 / 3, 1.0 / 3}));
  Tensor b = Tensor::from_values({2}, std::vector<double>{0, std::log(2.0)}, DType::f64);
  CHECK(close(ops::softmax(b, 0).to_vector(), {1.0 / 3, 2.0 / 3}));
  Tensor c = Tensor::from_values({3}, std::vector<double>{1000, 1000, 999});
  auto s = ops::softmax(c, 0).to_vector();
  double total = 0;
  for (double v : s) {
    CHECK(std::isfinite(v));
    total += v;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  Tensor bad = Tensor::from_values({2}, std::vector<double>{0, INFINITY});
  CHECK_THROWS_AS(ops::softmax(bad, 0), NumericError);
  CHECK_THROWS_AS(ops::softmax(a, 1), DimensionError);
}

TEST_CASE("softmax slices sum to one with entries in (0,1]") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({2, 3, 4}, rng, DType::f64, -20, 20);
    const std::size_t axis = rng.below(3);
    auto y = ops::softmax(x, axis).to_vector();
    for (double v : y) REQUIRE((v > 0.0 && v <= 1.0));
    Shape s = x.shape();
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < 3; ++d) inner *= s[d];
    for (std::size_t o = 0; o < y.size() / (s[axis] * inner); ++o)
      for (std::size_t q = 0; q < inner; ++q) {
        double t = 0;
        for (std::size_t l = 0; l < s[axis]; ++l) t += y[(o * s[axis] + l) * inner + q];
        REQUIRE(std::abs(t - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("cross entropy of uniform logits is ln K") {
  Tensor z = Tensor::zeros({2, 4, 3, 3}, DType::f64);
  LabelMap t(2, 3, 3);
  t.at(0, 1, 1) = 3;
  t.at(1, 0, 2) = 2;
  CHECK(ops::cross_entropy_loss(z, t).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy vanishes as the correct-class margin grows") {
  LabelMap t(1, 2, 2, {0, 1, 1, 0});
  double prev = INFINITY;
  for (double margin : {1.0, 5.0, 20.0, 40.0}) {
    Tensor z = Tensor::zeros({1, 2, 2, 2}, DType::f64);
    for (std::size_t p = 0; p < 4; ++p) z.set(t.ids()[p] * 4 + p, margin);
    double l = ops::cross_entropy_loss(z, t).item();
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-15);
}

TEST_CASE("cross entropy matches the per-pixel oracle") {
  Rng rng(21);
  Tensor z = random_tensor({1, 3, 2, 2}, rng, DType::f64, -3, 3);
  LabelMap t(1, 2, 2, {2, 0, 1, 2});
  auto zv = z.to_vector();
  double total = 0;
  for (std::size_t p = 0; p < 4; ++p) {
    double s = 0;
    for (std::size_t c = 0; c < 3; ++c) s += std::exp(zv[c * 4 + p]);
    total += -std::log(std::exp(zv[t.ids()[p] * 4 + p]) / s);
  }
  CHECK(std::abs(ops::cross_entropy_loss(z, t).item() - total / 4.0) < 1e-6);
  LabelMap bad(1, 2, 2, {3, 0, 0, 0});
  CHECK_THROWS_AS(ops::cross_entropy_loss(z, bad), LabelError);
}

TEST_CASE("backward of elementary losses") {
  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng, DType::f64, -1, 1, true);
  ops::sum(x).backward();
  CHECK(x.grad().to_vector() == std::vector<double>(12, 1.0));
  x.zero_grad();
  ops::sum(ops::mul(x, x)).backward();
  auto g = x.grad().to_vector();
  auto xv = x.to_vector();
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 2.0 * xv[i]);
  CHECK_THROWS_AS(ops::mul(x, x).backward(), UsageError);
}

TEST_CASE("each record runs once and the graph is released") {
  Tensor x = Tensor::full({2}, 3.0, DType::f64, true);
  Tensor y = ops::scale(ops::add(x, x), 2.0);
  Tensor l = ops::sum(y);
  l.backward();
  CHECK(x.grad().to_vector() == std::vector<double>{4.0, 4.0});
  CHECK(l.is_leaf());
  CHECK(y.is_leaf());
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::full({2}, 1.0, DType::f64, true);
  NoGradGuard ng;
  Tensor y = ops::sum(x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("grad_check is exact for a quadratic") {
  Rng rng(2);
  Tensor p = random_tensor({5}, rng);
  std::vector<Tensor> params{p};
  auto res = grad_check([&] { return ops::sum(ops::mul(p, p)); }, params, {.eps = 1e-5});
  CHECK(res.coords_checked == 5);
  CHECK(res.max_rel_error < 1e-9);
}

TEST_CASE("conv2d -> relu -> softmax -> cross entropy chain passes the finite-difference check") {
  Rng rng(4);
  Tensor x = random_tensor({1, 2, 5, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  LabelMap t(1, 5, 5);
  for (auto& id : t.ids()) id = static_cast<std::uint8_t>(rng.below(3));
  std::vector<Tensor> params{x, w, b};
  auto res = grad_check(
      [&] {
        Tensor h = ops::relu(ops::conv2d(x, w, b, 1, 1));
        Tensor p = ops::softmax(h, 1);
        return ops::cross_entropy_loss(p, t);
      },
      params);
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("every primitive passes the 64-bit finite-difference check") {
  Rng rng(8);
  auto check = [&](const char* name, std::vector<Tensor> params, std::function<Tensor()> f) {
    auto res = grad_check(f, params, {.eps = 1e-4});
    INFO(name << " max rel error " << res.max_rel_error);
    CHECK(res.max_rel_error < 1e-5);
  };
  {
    Tensor x = random_tensor({2, 3, 7, 7}, rng), w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng), r = random_tensor({2, 4, 4, 4}, rng);
    check("conv2d", {x, w, b}, [=] { return weighted_sum(ops::conv2d(x, w, b, 2, 1), r); });
  }
  {
    Tensor x = random_tensor({2, 3, 3, 4}, rng), w = random_tensor({3, 2, 2, 2}, rng);
    Tensor b = random_tensor({2}, rng), r = random_tensor({2, 2, 6, 8}, rng);
    check("deconv2d", {x, w, b}, [=] { return weighted_sum(ops::deconv2d(x, w, b), r); });
  }
  {
    Tensor x = random_tensor({1, 2, 6, 8}, rng), r = random_tensor({1, 2, 3, 4}, rng);
    check("maxpool2d", {x}, [=] { return weighted_sum(ops::maxpool2d(x), r); });
  }
  {
    Tensor x = random_away_from_zero({4, 5}, rng), r = random_tensor({4, 5}, rng);
    check("relu", {x}, [=] { return weighted_sum(ops::relu(x), r); });
  }
  {
    Tensor x = random_tensor({3, 4, 2}, rng, DType::f64, -2, 2), r = random_tensor({3, 4, 2}, rng);
    check("softmax", {x}, [=] { return weighted_sum(ops::softmax(x, 1), r); });
  }
  {
    Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng);
    Tensor r = random_tensor({2, 3, 5}, rng);
    check("matmul", {a, b}, [=] { return weighted_sum(ops::matmul(a, b), r); });
  }
  {
    Tensor a = random_tensor({2, 3, 2}, rng), b = random_tensor({2, 1, 2}, rng);
    Tensor r = random_tensor({2, 4, 2}, rng);
    check("concat", {a, b}, [=] { return weighted_sum(ops::concat({a, b}, 1), r); });
  }
  {
    Tensor a = random_tensor({2, 3, 4}, rng), r = random_tensor({4, 2, 3}, rng);
    check("permute", {a}, [=] { return weighted_sum(ops::permute(a, {2, 0, 1}), r); });
  }
  {
    Tensor a = random_tensor({2, 6}, rng), r = random_tensor({3, 4}, rng);
    check("reshape", {a}, [=] { return weighted_sum(ops::reshape(a, {3, 4}), r); });
  }
  {
    Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
    check("add/scale/mean", {a, b}, [=] { return ops::mean(ops::scale(ops::add(ops::mul(a, b), a), -1.5)); });
  }
}

TEST_CASE("injected backward sign bug is detected") {
  Rng rng(6);
  Tensor x = random_tensor({1, 2, 4, 4}, rng), w = random_tensor({2, 2, 3, 3}, rng);
  Tensor r = random_tensor({1, 2, 4, 4}, rng);
  std::vector<Tensor> params{x, w};
  auto f = [&] { return weighted_sum(ops::conv2d(x, w, {}, 1, 1), r); };
  testing::inject_backward_fault(OpKind::conv2d);
  auto bad = grad_check(f, params);
  testing::inject_backward_fault(std::nullopt);
  auto good = grad_check(f, params);
  CHECK(bad.max_rel_error > 1.0);
  CHECK(good.max_rel_error < 1e-5);
}

TEST_CASE("kink crossings are differenced inside one linear region") {
  // One relu input sits within eps of zero.
  Tensor x = Tensor::from_values({3}, std::vector<double>{1e-5, -0.5, 0.7}, DType::f64);
  std::vector<Tensor> params{x};
  auto res = grad_check([&] { return ops::sum(ops::relu(x)); }, params, {.eps = 1e-4});
  CHECK(res.kink_coords == 1);
  CHECK(res.max_rel_error < 1e-9);
}

TEST_CASE("forward passes are deterministic and independent of kernel threads") {
  Rng rng(10);
  Tensor x = random_tensor({2, 4, 8, 8}, rng, DType::f32);
  Tensor w = random_tensor({6, 4, 3, 3}, rng, DType::f32);
  auto run = [&] { return ops::relu(ops::conv2d(x, w, {}, 1, 1)).to_vector(); };
  auto a = run();
  set_kernel_threads(4);
  auto b = run();
  set_kernel_threads(1);
  CHECK(a == run());
  CHECK(a == b);
}

TEST_CASE("WTF1 round-trips tensors and label maps bit-exactly") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s;
    for (std::size_t d = 0; d < 1 + rng.below(4); ++d) s.push_back(1 + rng.below(5));
    Tensor t = random_tensor(s, rng, trial % 2 ? DType::f64 : DType::f32);
    auto bytes = wtf1::encode(wtf1::from_tensor(t));
    Tensor back = wtf1::to_tensor(wtf1::decode(bytes));
    CHECK(back.shape() == t.shape());
    CHECK(back.dtype() == t.dtype());
    CHECK(back.to_vector() == t.to_vector());
  }
  LabelMap l(2, 3, 4);
  for (auto& id : l.ids()) id = static_cast<std::uint8_t>(rng.below(7));
  CHECK(wtf1::to_labels(wtf1::decode(wtf1::encode(wtf1::from_labels(l)))) == l);
}

TEST_CASE("WTF1 header layout is exact") {
  Tensor t = Tensor::from_values({2}, std::vector<double>{1.0, -2.0}, DType::f32);
  auto bytes = wtf1::encode(wtf1::from_tensor(t));
  REQUIRE(bytes.size() == 8 + 1 + 1 + 4 + 8);
  CHECK(std::memcmp(bytes.data(), "WAUTNSR1", 8) == 0);
  CHECK(bytes[8] == std::byte{0});
  CHECK(bytes[9] == std::byte{1});
  CHECK(bytes[10] == std::byte{2});
  CHECK(bytes[11] == std::byte{0});
  // 1.0f little-endian = 00 00 80 3f
  CHECK(bytes[14] == std::byte{0x00});
  CHECK(bytes[17] == std::byte{0x3f});
}

TEST_CASE("WTF1 corrupt header names the file") {
  auto path = std::filesystem::temp_directory_path() / "waunet_corrupt.wtf1";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTATENSORFILE";
  }
  try {
    wtf1::read_file(path);
    FAIL("no exception");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("waunet_corrupt.wtf1") != std::string::npos);
  }
  std::filesystem::remove(path);
}

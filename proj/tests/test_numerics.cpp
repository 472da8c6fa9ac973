#include <limits>

#include <catch2/catch_amalgamated.hpp>

#include "flexspike/lstsq.hpp"
#include "flexspike/ops.hpp"
#include "flexspike/optim.hpp"
#include "flexspike/rng.hpp"
#include "helpers.hpp"

using namespace flexspike;
using test_helpers::random_tensor;

TEST_CASE("matmul basic products") {
  Tensor eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor prod = matmul(eye, a);
  CHECK(max_abs_diff(prod, a) == 0.0);

  Tensor row({1, 2}, std::vector<double>{1, 2});
  Tensor col({2, 1}, std::vector<double>{3, 4});
  CHECK(matmul(row, col)[0] == 11.0);

  Tensor z({2, 3});
  Tensor ones({3, 2}, 1.0);
  CHECK(matmul(z, ones).max_abs() == 0.0);

  CHECK_THROWS_AS(matmul(a, row), ConfigError);
}

TEST_CASE("matmul is identical for any worker count") {
  RngStream rng(11);
  Tensor a = random_tensor({17, 9}, rng);
  Tensor b = random_tensor({9, 13}, rng);
  set_thread_count(1);
  Tensor serial = matmul(a, b);
  set_thread_count(4);
  Tensor parallel = matmul(a, b);
  set_thread_count(1);
  CHECK(max_abs_diff(serial, parallel) == 0.0);
}

TEST_CASE("conv2d hand cases") {
  Tensor x({1, 1, 3, 3}, 1.0);
  Tensor w({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, w, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y[0] == 9.0);

  RngStream rng(5);
  Tensor xr = random_tensor({2, 3, 5, 5}, rng);
  Tensor wz({4, 3, 3, 3});
  CHECK(conv2d(xr, wz, 1, 1).max_abs() == 0.0);

  Tensor delta({1, 1, 3, 3});
  delta[4] = 1.0;  // centre tap
  Tensor same = conv2d(xr.reshaped({6, 1, 5, 5}), delta, 1, 1);
  CHECK(max_abs_diff(same.reshaped(xr.shape()), xr) == 0.0);

  Tensor bad_w({1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(x, bad_w, 1, 0), ConfigError);
  Tensor huge_k({1, 1, 9, 9});
  CHECK_THROWS_AS(conv2d(x, huge_k, 1, 0), ConfigError);
}

TEST_CASE("avg_pool2d hand cases") {
  Tensor x({1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7});
  Tensor y = avg_pool2d(x, 2, 2);
  REQUIRE(y.size() == 1);
  CHECK(y[0] == 4.0);

  Tensor c({1, 2, 4, 4}, 2.5);
  CHECK(max_abs_diff(avg_pool2d(c, 2, 2), Tensor({1, 2, 2, 2}, 2.5)) == 0.0);

  RngStream rng(3);
  Tensor xr = random_tensor({1, 1, 3, 3}, rng);
  CHECK(max_abs_diff(avg_pool2d(xr, 1, 1), xr) == 0.0);

  CHECK_THROWS_AS(avg_pool2d(xr, 4, 1), ConfigError);
}

TEST_CASE("flatten collapses trailing dims") {
  RngStream rng(4);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor f = flatten(x);
  REQUIRE(f.shape() == Shape{2, 12});
  CHECK(f[5] == x[5]);
}

TEST_CASE("sgd_step follows the momentum + weight decay update") {
  Tensor w({1}, std::vector<double>{1.0});
  Tensor g({1});
  Tensor state;
  sgd_step(w, g, 0.1, 0.0, 0.0, state);
  CHECK(w[0] == 1.0);  // zero grad, zero decay

  w = Tensor({1}, std::vector<double>{1.0});
  g = Tensor({1}, std::vector<double>{1.0});
  state = Tensor();
  sgd_step(w, g, 0.1, 0.0, 0.0, state);
  CHECK(w[0] == Catch::Approx(0.9));

  w = Tensor({1}, std::vector<double>{1.0});
  g = Tensor({1});
  state = Tensor();
  sgd_step(w, g, 0.1, 0.0, 0.5, state);
  CHECK(w[0] == Catch::Approx(0.95));

  CHECK_THROWS_AS(sgd_step(w, g, -0.1, 0.0, 0.0, state), ConfigError);
}

TEST_CASE("sgd momentum accumulates across steps") {
  Tensor w({1}, std::vector<double>{0.0});
  Tensor g({1}, std::vector<double>{1.0});
  Tensor state;
  sgd_step(w, g, 1.0, 0.5, 0.0, state);  // m=1, w=-1
  CHECK(w[0] == Catch::Approx(-1.0));
  sgd_step(w, g, 1.0, 0.5, 0.0, state);  // m=1.5, w=-2.5
  CHECK(w[0] == Catch::Approx(-2.5));
}

TEST_CASE("cosine_lr endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 0.1) == Catch::Approx(0.1));
  CHECK(cosine_lr(100, 100, 0.1) == Catch::Approx(0.0).margin(1e-18));
  CHECK(cosine_lr(50, 100, 0.1) == Catch::Approx(0.05));
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.1), ConfigError);
}

TEST_CASE("least squares solves exact and overdetermined systems") {
  // Interpolation: m == p, invertible.
  Tensor f1({2, 2}, std::vector<double>{1, 0, 1, 1});
  Tensor y1({2}, std::vector<double>{2, 5});
  Tensor c1 = least_squares_fit(f1, y1);
  CHECK(c1[0] == Catch::Approx(2.0));
  CHECK(c1[1] == Catch::Approx(3.0));

  // Mean minimises the sum of squares.
  Tensor f2({3, 1}, std::vector<double>{1, 1, 1});
  Tensor y2({3}, std::vector<double>{1, 2, 3});
  CHECK(least_squares_fit(f2, y2)[0] == Catch::Approx(2.0));

  // Four collinear points recover slope/intercept exactly.
  Tensor f3({4, 2}, std::vector<double>{0, 1, 1, 1, 2, 1, 3, 1});
  Tensor y3({4}, std::vector<double>{1, 3, 5, 7});  // y = 2x + 1
  Tensor c3 = least_squares_fit(f3, y3);
  CHECK(c3[0] == Catch::Approx(2.0).epsilon(1e-12));
  CHECK(c3[1] == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("least squares residual is orthogonal to the column space") {
  RngStream rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t m = 6 + static_cast<std::size_t>(rng.uniform_int(0, 12));
    const std::size_t p = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    Tensor f = random_tensor({m, p}, rng);
    Tensor y = random_tensor({m}, rng);
    Tensor c = least_squares_fit(f, y);
    CHECK(least_squares_normal_residual(f, c, y) <= 1e-8 * (y.norm2() + 1.0));
  }
}

TEST_CASE("least squares ridge fallback and rank-deficiency report") {
  Tensor f({3, 2}, std::vector<double>{1, 1, 1, 1, 1, 1});  // duplicated column
  Tensor y({3}, std::vector<double>{1, 2, 3});
  // The ridge fallback still produces a minimiser; it splits the weight
  // between the identical columns.
  Tensor c = least_squares_fit(f, y);
  CHECK(std::isfinite(c[0]));
  CHECK(c[0] + c[1] == Catch::Approx(2.0).epsilon(1e-4));
  CHECK(least_squares_normal_residual(f, c, y) <= 1e-6 * y.norm2());

  Tensor fnan({3, 2}, std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(least_squares_fit(fnan, y), NumericError);
  CHECK_THROWS_AS(least_squares_fit(Tensor({1, 2}, 1.0), Tensor({1}, 1.0)), ConfigError);
}

TEST_CASE("rng streams with equal seeds agree for 10^4 draws") {
  RngStream a(123456), b(123456);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  RngStream c(1), d(2);
  bool all_equal = true;
  for (int i = 0; i < 100; ++i) all_equal = all_equal && (c.next_u64() == d.next_u64());
  CHECK_FALSE(all_equal);
}

TEST_CASE("rng forks are independent of draw order") {
  RngStream root(99);
  RngStream a = root.fork("data");
  RngStream b = root.fork("config");
  const auto a0 = a.next_u64();
  RngStream a2 = RngStream(99).fork("data");
  CHECK(a2.next_u64() == a0);
  CHECK(b.next_u64() != a0);
}

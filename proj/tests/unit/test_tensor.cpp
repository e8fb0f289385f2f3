#include <doctest.h>

#include <cmath>
#include <vector>

#include "mmvr/errors.hpp"
#include "mmvr/rng.hpp"
#include "mmvr/tensor.hpp"

using namespace mmvr;

namespace {

// Wraps an op into a deterministic scalar map: output coordinates are mixed
// through one frozen random weighting so the finite-difference check sees all
// of them. The weights are drawn once, before grad_check evaluates f.
std::function<Tensor(const Tensor&)> projected(std::function<Tensor(const Tensor&)> op,
                                               const Tensor& probe, Rng& rng) {
  Tensor w;
  {
    NoGradGuard guard;
    w = Tensor::randn(op(probe).shape(), 1.0, rng);
  }
  return [op = std::move(op), w](const Tensor& t) { return sum_all(mul(op(t), w)); };
}

constexpr double kPrimTol = 1e-4;

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
  const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  const Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(19));
  CHECK(c.at(0, 1) == doctest::Approx(22));
  CHECK(c.at(1, 0) == doctest::Approx(43));
  CHECK(c.at(1, 1) == doctest::Approx(50));
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("elementwise forward values") {
  const Tensor x = Tensor::from_data({1, 3}, {-2.0, 0.0, 3.0});
  CHECK(relu(x).at(0, 0) == 0.0);
  CHECK(relu(x).at(0, 2) == 3.0);
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));
  CHECK(gelu(Tensor::scalar(0.0)).item() == doctest::Approx(0.0));
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.8413447460685429));
  CHECK(gelu(Tensor::scalar(-1.0)).item() == doctest::Approx(-0.15865525393145707));
}

TEST_CASE("softmax rows form a simplex and match a hand case") {
  const Tensor x = Tensor::from_data({1, 2}, {0.0, std::log(2.0)});
  const Tensor s = softmax(x, 1);
  CHECK(s.at(0, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(s.at(0, 1) == doctest::Approx(2.0 / 3.0));

  Rng rng(41);
  const Tensor r = Tensor::randn({5, 7}, 3.0, rng);
  const Tensor sm = softmax(r, 1);
  for (int i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) {
      CHECK(sm.at(i, j) > 0.0);
      sum += sm.at(i, j);
    }
    CHECK(sum == doctest::Approx(1.0));
  }
}

TEST_CASE("softmax is shift invariant per row") {
  Rng rng(42);
  const Tensor x = Tensor::randn({3, 4}, 1.0, rng);
  Tensor shifted = x.clone();
  for (int j = 0; j < 4; ++j) shifted.data()[4 + j] += 100.0;
  const Tensor a = softmax(x, 1);
  const Tensor b = softmax(shifted, 1);
  for (int j = 0; j < 4; ++j) CHECK(a.at(1, j) == doctest::Approx(b.at(1, j)));
}

TEST_CASE("layer_norm standardizes rows") {
  const Tensor g = Tensor::full({1, 2}, 1.0);
  const Tensor b = Tensor::zeros({1, 2});
  const Tensor x = Tensor::from_data({1, 2}, {1.0, 3.0});
  const Tensor y = layer_norm(x, g, b, 0.0);
  CHECK(y.at(0, 0) == doctest::Approx(-1.0));
  CHECK(y.at(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("l2_normalize gives unit vectors and keeps exact zero") {
  const Tensor x = Tensor::from_data({1, 2}, {3.0, 4.0});
  const Tensor y = l2_normalize(x);
  CHECK(y.at(0, 0) == doctest::Approx(0.6));
  CHECK(y.at(0, 1) == doctest::Approx(0.8));

  const Tensor z = l2_normalize(Tensor::zeros({1, 4}, true));
  for (int j = 0; j < 4; ++j) CHECK(z.at(0, j) == 0.0);
}

TEST_CASE("max_over_rows takes the elementwise max with first-wins ties") {
  const Tensor x = Tensor::from_data({2, 2}, {1.0, 5.0, 2.0, 3.0});
  const Tensor y = max_over_rows(x);
  CHECK(y.at(0, 0) == 2.0);
  CHECK(y.at(0, 1) == 5.0);

  // tie: gradient must flow to the first maximal row only
  Tensor t = Tensor::from_data({2, 1}, {7.0, 7.0}, true);
  backward(sum_all(max_over_rows(t)));
  CHECK(t.grad()[0] == 1.0);
  CHECK(t.grad()[1] == 0.0);
}

TEST_CASE("embedding_lookup gathers rows and scatters gradient") {
  Tensor table = Tensor::from_data({3, 2}, {0, 1, 10, 11, 20, 21}, true);
  const std::vector<int> ids{2, 0, 2};
  const Tensor out = embedding_lookup(table, ids);
  CHECK(out.at(0, 0) == 20.0);
  CHECK(out.at(1, 1) == 1.0);
  backward(sum_all(out));
  CHECK(table.grad()[0] == 1.0);  // row 0 used once
  CHECK(table.grad()[2] == 0.0);  // row 1 unused
  CHECK(table.grad()[4] == 2.0);  // row 2 used twice
}

TEST_CASE("concat and slice round trip") {
  Rng rng(7);
  const Tensor a = Tensor::randn({2, 3}, 1.0, rng);
  const Tensor b = Tensor::randn({4, 3}, 1.0, rng);
  const Tensor c = concat(std::vector<Tensor>{a, b}, 0);
  CHECK(c.rows() == 6);
  const Tensor back = slice_rows(c, 2, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) CHECK(back.at(i, j) == b.at(i, j));
}

TEST_CASE("backward visits shared nodes exactly once and accumulates fan-out") {
  Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0}, true);
  const Tensor c = add(scale(x, 2.0), scale(x, 3.0));
  backward(sum_all(c));
  CHECK(x.grad()[0] == doctest::Approx(5.0));
  CHECK(x.grad()[1] == doctest::Approx(5.0));

  Tensor y = Tensor::from_data({1, 1}, {3.0}, true);
  backward(sum_all(mul(y, y)));
  CHECK(y.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("NoGradGuard suppresses the tape and detach cuts it") {
  Tensor x = Tensor::from_data({1, 1}, {2.0}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(mul(x, x).requires_grad());
  }
  CHECK(mul(x, x).requires_grad());

  const Tensor d = mul(x, x).detach();
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("backward requires a scalar root") {
  Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), Error);
}

TEST_CASE("dropout identity paths leave rng untouched, train path rescales") {
  Rng rng(9);
  const Rng::State before = rng.state();
  Tensor x = Tensor::full({4, 4}, 1.0, true);
  const Tensor eval_out = dropout(x, 0.5, rng, false);
  const Tensor p0_out = dropout(x, 0.0, rng, true);
  CHECK(rng.state() == before);
  for (int i = 0; i < 16; ++i) {
    CHECK(eval_out.data()[i] == 1.0);
    CHECK(p0_out.data()[i] == 1.0);
  }

  const Tensor train_out = dropout(x, 0.5, rng, true);
  CHECK(rng.state() != before);
  int kept = 0;
  for (int i = 0; i < 16; ++i) {
    const double v = train_out.data()[i];
    CHECK((v == 0.0 || v == doctest::Approx(2.0)));
    kept += v != 0.0;
  }
  CHECK(kept > 0);
  CHECK(kept < 16);
}

TEST_CASE("finite differences confirm every primitive gradient") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    Rng wrng(seed + 100);

    const Tensor x = Tensor::randn({3, 4}, 1.0, rng, true);
    const Tensor m = Tensor::randn({4, 5}, 1.0, rng);
    const Tensor same = Tensor::randn({3, 4}, 1.0, rng);
    const Tensor row = Tensor::randn({1, 4}, 1.0, rng);
    const Tensor col = Tensor::randn({3, 1}, 1.0, rng);
    const Tensor gain = Tensor::randn({1, 4}, 0.5, rng);
    const Tensor bias = Tensor::randn({1, 4}, 0.5, rng);

    auto check = [&](const char* name, std::function<Tensor(const Tensor&)> op,
                     const Tensor& arg) {
      INFO(name << " seed " << seed);
      CHECK(grad_check(projected(std::move(op), arg, wrng), arg) < kPrimTol);
    };

    const Tensor lhs = Tensor::randn({5, 3}, 1.0, rng);
    check("matmul_lhs", [&](const Tensor& t) { return matmul(t, m); }, x);
    check("matmul_rhs", [&](const Tensor& t) { return matmul(lhs, t); }, x);
    check("transpose", [&](const Tensor& t) { return transpose(t); }, x);
    check("add", [&](const Tensor& t) { return add(t, same); }, x);
    check("mul", [&](const Tensor& t) { return mul(t, same); }, x);
    check("scale", [&](const Tensor& t) { return scale(t, -1.7); }, x);
    check("add_rowvec_m", [&](const Tensor& t) { return add_rowvec(t, row); }, x);
    check("scale_rows_m", [&](const Tensor& t) { return scale_rows(t, col); }, x);
    check("softmax", [&](const Tensor& t) { return softmax(t, 1); }, x);
    check("layer_norm", [&](const Tensor& t) { return layer_norm(t, gain, bias, 1e-5); }, x);
    check("gelu", [&](const Tensor& t) { return gelu(t); }, x);
    check("sigmoid", [&](const Tensor& t) { return sigmoid(t); }, x);
    check("l2_normalize", [&](const Tensor& t) { return l2_normalize(t); }, x);
    check("sum_rows", [&](const Tensor& t) { return sum_rows(t); }, x);
    check("sum_all", [&](const Tensor& t) { return scale(sum_all(t), 1.0); }, x);
    check("slice_rows", [&](const Tensor& t) { return slice_rows(t, 1, 2); }, x);
    check("slice_cols", [&](const Tensor& t) { return slice_cols(t, 1, 2); }, x);
    check("concat", [&](const Tensor& t) { return concat(std::vector<Tensor>{t, same}, 0); }, x);
    check("max_over_rows", [&](const Tensor& t) { return max_over_rows(t); }, x);

    // parameter-side gradients
    const Tensor input = Tensor::randn({3, 4}, 1.0, rng);
    check("add_rowvec_row", [&](const Tensor& t) { return add_rowvec(input, t); },
          Tensor::randn({1, 4}, 1.0, rng, true));
    check("scale_rows_col", [&](const Tensor& t) { return scale_rows(input, t); },
          Tensor::randn({3, 1}, 1.0, rng, true));
    check("layer_norm_gain", [&](const Tensor& t) { return layer_norm(input, t, bias, 1e-5); },
          Tensor::randn({1, 4}, 1.0, rng, true));
    check("layer_norm_bias", [&](const Tensor& t) { return layer_norm(input, gain, t, 1e-5); },
          Tensor::randn({1, 4}, 1.0, rng, true));
    const std::vector<int> ids{0, 2, 1, 2};
    check("embedding_lookup", [&](const Tensor& t) { return embedding_lookup(t, ids); },
          Tensor::randn({3, 4}, 1.0, rng, true));
  }
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(13);
  Rng wrng(113);
  // keep every coordinate away from zero so the subgradient is unambiguous
  Tensor x = Tensor::randn({3, 4}, 1.0, rng, true);
  for (std::int64_t i = 0; i < x.size(); ++i)
    if (std::abs(x.data()[i]) < 0.2) x.data()[i] = x.data()[i] < 0 ? -0.5 : 0.5;
  CHECK(grad_check(projected([](const Tensor& t) { return relu(t); }, x, wrng), x) < kPrimTol);
}

TEST_CASE("zero_grad clears accumulated gradients") {
  Tensor x = Tensor::from_data({1, 1}, {4.0}, true);
  backward(sum_all(mul(x, x)));
  CHECK(x.grad()[0] != 0.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "ptp/tensor.hpp"

using namespace ptp;
using ptp::testing::grad_check;
using ptp::testing::random_tensor;

namespace {

// Reduces any tensor to a scalar through a fixed random projection so the
// upstream gradient is non-uniform.

Tensor<double> weighted_sum(const Tensor<double>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(x.size());
  for (auto& v : w) v = rng.normal();
  auto weights = Tensor<double>::from(x.rows(), x.cols(), std::move(w));
  auto prod = mul(x, weights);
  auto row = mean_rows(prod);                                        // [1, c]
  auto ones = Tensor<double>::from(row.cols(), 1, std::vector<double>(static_cast<std::size_t>(row.cols()), 1.0));
  return matmul(row, ones);                                          // [1, 1]
}

constexpr double kOpTol = 1e-5;

}  // namespace

TEST(TensorGrad, MatmulAndLinear) {
  Rng rng(1);
  auto a = random_tensor(3, 4, rng);
  auto b = random_tensor(4, 5, rng);
  auto bias = random_tensor(1, 5, rng);
  auto r = grad_check({{"a", a}, {"b", b}}, [&] { return weighted_sum(matmul(a, b)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  r = grad_check({{"a", a}, {"b", b}, {"bias", bias}}, [&] { return weighted_sum(linear(a, b, bias)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
}

TEST(TensorGrad, Elementwise) {
  Rng rng(2);
  auto a = random_tensor(3, 4, rng);
  auto b = random_tensor(3, 4, rng);
  auto row = random_tensor(1, 4, rng);
  auto r = grad_check({{"a", a}, {"b", b}, {"row", row}}, [&] {
    return weighted_sum(add(mul(gelu(a), sigmoid(b)), add_row(scale(silu(a), 0.7), row)));
  });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  r = grad_check({{"a", a}, {"b", b}}, [&] { return weighted_sum(swiglu(a, b)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
}

TEST(TensorGrad, Norms) {
  Rng rng(3);
  auto x = random_tensor(4, 6, rng);
  auto g = random_tensor(1, 6, rng);
  auto b = random_tensor(1, 6, rng);
  auto r = grad_check({{"x", x}, {"g", g}, {"b", b}}, [&] { return weighted_sum(layer_norm(x, g, b)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  r = grad_check({{"x", x}, {"g", g}}, [&] { return weighted_sum(rms_norm(x, g)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
}

TEST(TensorGrad, SoftmaxAndLosses) {
  Rng rng(4);
  auto x = random_tensor(3, 5, rng);
  auto r = grad_check({{"x", x}}, [&] { return weighted_sum(softmax_rows(x)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  r = grad_check({{"x", x}}, [&] { return cross_entropy(x, {0, 4, 2}); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  std::vector<double> target(x.size());
  for (auto& t : target) t = rng.normal();
  r = grad_check({{"x", x}}, [&] { return mse(x, target); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
}

TEST(TensorGrad, AttentionVariants) {
  Rng rng(5);
  auto q = random_tensor(4, 8, rng);
  auto k = random_tensor(5, 8, rng);
  auto v = random_tensor(5, 8, rng);
  AttentionOptions opt;
  opt.heads = 2;
  auto r = grad_check({{"q", q}, {"k", k}, {"v", v}}, [&] { return weighted_sum(attention(q, k, v, opt)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  opt.key_valid = {1, 0, 1, 1, 0};
  r = grad_check({{"q", q}, {"k", k}, {"v", v}}, [&] { return weighted_sum(attention(q, k, v, opt)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  auto kk = random_tensor(4, 8, rng);
  auto vv = random_tensor(4, 8, rng);
  AttentionOptions causal;
  causal.heads = 4;
  causal.causal = true;
  r = grad_check({{"q", q}, {"k", kk}, {"v", vv}}, [&] { return weighted_sum(attention(q, kk, vv, causal)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
}

TEST(TensorGrad, RotaryEmbeddingAndIndexing) {
  Rng rng(6);
  auto x = random_tensor(5, 8, rng);
  auto r = grad_check({{"x", x}}, [&] { return weighted_sum(rotary(x, 2, 10000.0, 3)); });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
  auto table = random_tensor(6, 4, rng);
  auto other = random_tensor(2, 4, rng);
  r = grad_check({{"table", table}, {"other", other}}, [&] {
    auto e = embedding(table, {1, 3, 1, 5});
    return weighted_sum(concat_rows<double>({select_rows(e, {3, 0, 0}), other, mean_rows(e)}));
  });
  EXPECT_LT(r.max_rel_err, kOpTol) << r.worst;
}

TEST(Tensor, MaskedKeysReceiveZeroWeight) {
  Rng rng(7);
  auto q = random_tensor(3, 4, rng, 1.0, false);
  auto k = random_tensor(3, 4, rng, 1.0, false);
  auto v = random_tensor(3, 4, rng, 1.0, false);
  AttentionOptions opt;
  opt.key_valid = {1, 1, 0};
  auto base = attention(q, k, v, opt);
  // Changing a masked key/value must not change any output.
  for (int j = 0; j < 4; ++j) {
    k.values()[2 * 4 + j] += 100.0;
    v.values()[2 * 4 + j] -= 50.0;
  }
  auto again = attention(q, k, v, opt);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_EQ(base.data()[i], again.data()[i]);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Rng rng(8);
  auto x = random_tensor(6, 11, rng, 5.0, false);
  auto p = softmax_rows(x);
  for (int i = 0; i < 6; ++i) {
    double s = 0;
    for (const double v : p.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, RotaryDependsOnlyOnRelativeOffset) {
  Rng rng(9);
  auto a = random_tensor(1, 8, rng, 1.0, false);
  auto b = random_tensor(1, 8, rng, 1.0, false);
  const auto dot_at = [&](int pa, int pb) {
    auto ra = rotary(a, 2, 10000.0, pa);
    auto rb = rotary(b, 2, 10000.0, pb);
    double s = 0;
    for (int j = 0; j < 8; ++j) s += ra.data()[j] * rb.data()[j];
    return s;
  };
  EXPECT_NEAR(dot_at(7, 3), dot_at(14, 10), 1e-12);
  EXPECT_NEAR(dot_at(0, 5), dot_at(20, 25), 1e-12);
}

TEST(Tensor, ShapeErrorsAreReported) {
  auto a = Tensor<double>::zeros(2, 3);
  auto b = Tensor<double>::zeros(2, 3);
  EXPECT_THROW(matmul(a, b), Error);
  EXPECT_THROW(cross_entropy(a, {0}), Error);
}

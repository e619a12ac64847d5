#include <gtest/gtest.h>

#include <cmath>

#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"
#include "dasvit/vit_ops.hpp"
#include "gradcheck.hpp"

using namespace dasvit;
using oracle::gradcheck;
using oracle::project;
using oracle::random_tensor;

namespace {

using Matrix = std::vector<std::vector<double>>;

// Plain-loop reference implementations.
Matrix rows_of(const Tensor& t, std::size_t batch) {
  const std::size_t n = t.dim(1), d = t.dim(2);
  Matrix m(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m[i][j] = t[(batch * n + i) * d + j];
  return m;
}

Matrix loop_layer_norm(const Matrix& x, const Tensor& gamma, const Tensor& beta) {
  Matrix y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v;
    mu /= row.size();
    for (double v : row) var += (v - mu) * (v - mu);
    var /= row.size();
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = (row[j] - mu) / std::sqrt(var + 1e-6) * gamma[j] + beta[j];
  }
  return y;
}

Matrix loop_matmul(const Matrix& a, const Tensor& w) {
  const std::size_t out = w.dim(1);
  Matrix c(a.size(), std::vector<double>(out, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < out; ++j)
      for (std::size_t p = 0; p < a[i].size(); ++p) c[i][j] += a[i][p] * w[p * out + j];
  return c;
}

Matrix loop_msa(const Matrix& z, const MsaParams& p) {
  const std::size_t n = z.size(), d = z[0].size();
  const std::size_t heads = p.heads, dk = d / heads;
  const Matrix x = loop_layer_norm(z, p.norm.gamma, p.norm.beta);
  const Matrix q = loop_matmul(x, p.w_q), k = loop_matmul(x, p.w_k), v = loop_matmul(x, p.w_v);
  Matrix cat(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0;
        for (std::size_t t = 0; t < dk; ++t) dot += q[i][h * dk + t] * k[j][h * dk + t];
        s[j] = dot / std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      double total = 0;
      for (auto& e : s) total += (e = std::exp(e - mx));
      for (std::size_t t = 0; t < dk; ++t) {
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += s[j] / total * v[j][h * dk + t];
        cat[i][h * dk + t] = acc;
      }
    }
  }
  Matrix out = loop_matmul(cat, p.w_o);
  for (auto& row : out)
    for (std::size_t j = 0; j < d; ++j) row[j] += p.b_o[j];
  return out;
}

void randomize(MsaParams& p, Rng& rng) {
  for (Tensor* t : {&p.w_q, &p.w_k, &p.w_v, &p.w_o, &p.b_o, &p.norm.gamma, &p.norm.beta})
    for (auto& v : t->mutable_data()) v = rng.normal(0.0, 0.7);
}

void randomize(MlpParams& p, Rng& rng) {
  for (Tensor* t : {&p.w1, &p.b1, &p.w2, &p.b2, &p.norm.gamma, &p.norm.beta})
    for (auto& v : t->mutable_data()) v = rng.normal(0.0, 0.7);
}

}  // namespace

TEST(Registry, DefaultHasEightOps) {
  const auto reg = default_registry();
  ASSERT_EQ(reg.size(), 8u);
  EXPECT_EQ(reg[0], OpSpec::zero());
  EXPECT_EQ(reg[1], OpSpec::identity());
  EXPECT_EQ(reg[2], OpSpec::msa(8));
  EXPECT_EQ(reg[3], OpSpec::msa(12));
  EXPECT_EQ(reg[4], OpSpec::msa(16));
  EXPECT_EQ(reg[5], OpSpec::mlp(0.5));
  EXPECT_EQ(reg[6], OpSpec::mlp(3));
  EXPECT_EQ(reg[7], OpSpec::mlp(4));
  EXPECT_EQ(reg[3].name(), "msa_h12");
  EXPECT_EQ(reg[5].name(), "mlp_r0.5");
  EXPECT_EQ(reg[5].type_tag(), "mlp");
}

TEST(Registry, JsonForm) {
  nlohmann::json j = OpSpec::msa(12);
  EXPECT_EQ(j.dump(), R"({"heads":12,"kind":"msa"})");
  EXPECT_EQ(j.get<OpSpec>(), OpSpec::msa(12));
  EXPECT_THROW(nlohmann::json::parse(R"({"kind":"conv"})").get<OpSpec>(), SchemaError);
  EXPECT_THROW(nlohmann::json::parse(R"({"kind":"zero","heads":2})").get<OpSpec>(), SchemaError);
}

TEST(Registry, HiddenDimRounding) {
  EXPECT_EQ(mlp_hidden_dim(0.5, 768), 384u);
  EXPECT_EQ(mlp_hidden_dim(0.5, 5), 3u);  // 2.5 rounds up
  EXPECT_EQ(mlp_hidden_dim(0.1, 4), 1u);  // floor at 1
  EXPECT_EQ(mlp_hidden_dim(4, 768), 3072u);
}

TEST(Msa, HeadsMustDivideEmbed) {
  Rng rng(1);
  EXPECT_THROW(init_msa(32, 12, rng), ConfigError);
  EXPECT_NO_THROW(init_msa(48, 12, rng));
}

TEST(Msa, SingleTokenAttentionIsValuePath) {
  Rng rng(2);
  auto p = init_msa(4, 2, rng);
  randomize(p, rng);
  auto z = random_tensor(rng, {1, 1, 4}, 1.0, false);
  auto y = msa_forward(z, p);
  auto expected = ops::add(
      ops::matmul(ops::matmul(apply_layer_norm(z, p.norm), p.w_v), p.w_o), p.b_o);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(Msa, IdenticalTokensGiveIdenticalRows) {
  Rng rng(3);
  auto p = init_msa(8, 2, rng);
  randomize(p, rng);
  Tensor z(Shape{1, 4, 8});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) z.mutable_data()[i * 8 + j] = 0.1 * j - 0.3;
  auto y = msa_forward(z, p);
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y[i * 8 + j], y[j], 1e-12);
}

TEST(Msa, MatchesLoopOracle) {
  Rng rng(4);
  auto p = init_msa(4, 2, rng);
  randomize(p, rng);
  auto z = random_tensor(rng, {1, 3, 4}, 1.0, false);
  auto y = msa_forward(z, p);
  auto ref = loop_msa(rows_of(z, 0), p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y[i * 4 + j], ref[i][j], 1e-12);
}

TEST(Msa, PermutationEquivariant) {
  Rng rng(5);
  auto p = init_msa(8, 4, rng);
  randomize(p, rng);
  auto z = random_tensor(rng, {2, 5, 8}, 1.0, false);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  auto y_perm = msa_forward(ops::index_select(z, 1, perm), p);
  auto perm_y = ops::index_select(msa_forward(z, p), 1, perm);
  for (std::size_t i = 0; i < y_perm.numel(); ++i) EXPECT_NEAR(y_perm[i], perm_y[i], 1e-12);
}

TEST(Msa, TallyCountsScoreElements) {
  Rng rng(6);
  auto p = init_msa(8, 2, rng);
  ActivationTally tally;
  msa_forward(Tensor(Shape{3, 5, 8}, 0.1), p, {.prenorm = true, .tally = &tally});
  EXPECT_EQ(tally.attention_score_elements, 3u * 2u * 5u * 5u);
  EXPECT_EQ(tally.msa_calls, 1u);
}

TEST(Mlp, PositionWise) {
  Rng rng(7);
  auto p = init_mlp(6, 3, rng);
  randomize(p, rng);
  auto z = random_tensor(rng, {2, 4, 6}, 1.0, false);
  const std::vector<std::size_t> perm{2, 3, 1, 0};
  auto a = mlp_forward(ops::index_select(z, 1, perm), p);
  auto b = ops::index_select(mlp_forward(z, p), 1, perm);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Mlp, ZeroWeightsGiveZero) {
  Rng rng(8);
  auto p = init_mlp(4, 4, rng);
  for (Tensor* t : {&p.w1, &p.b1, &p.w2, &p.b2}) std::fill(t->mutable_data().begin(), t->mutable_data().end(), 0.0);
  auto y = mlp_forward(random_tensor(rng, {2, 3, 4}, 1.0, false), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, MatchesDirectEvaluation) {
  Rng rng(9);
  auto p = init_mlp(4, 0.5, rng);
  ASSERT_EQ(p.w1.dim(1), 2u);
  randomize(p, rng);
  auto z = random_tensor(rng, {1, 2, 4}, 1.0, false);
  auto y = mlp_forward(z, p);
  const Matrix x = loop_layer_norm(rows_of(z, 0), p.norm.gamma, p.norm.beta);
  for (std::size_t i = 0; i < 2; ++i) {
    double h[2];
    for (std::size_t u = 0; u < 2; ++u) {
      double a = p.b1[u];
      for (std::size_t j = 0; j < 4; ++j) a += x[i][j] * p.w1[j * 2 + u];
      h[u] = 0.5 * a * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (a + 0.044715 * a * a * a)));
    }
    for (std::size_t j = 0; j < 4; ++j) {
      const double expected = h[0] * p.w2[0 * 4 + j] + h[1] * p.w2[1 * 4 + j] + p.b2[j];
      EXPECT_NEAR(y[i * 4 + j], expected, 1e-12);
    }
  }
}

TEST(ZeroOp, OutputsZerosWithZeroGradient) {
  Rng rng(10);
  auto z = random_tensor(rng, {2, 5, 8});
  auto y = zero_forward(z);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 8}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  ops::sum(y).backward();
  for (double g : z.grad()) EXPECT_EQ(g, 0.0);
}

TEST(IdentityOp, PassesThrough) {
  Rng rng(11);
  auto z = random_tensor(rng, {2, 3, 4});
  auto y = identity_forward(identity_forward(z));
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(y[i]), std::bit_cast<std::uint64_t>(z[i]));
  ops::sum(identity_forward(z)).backward();
  for (double g : z.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Candidates, ShapePreserving) {
  Rng rng(12);
  auto z = random_tensor(rng, {2, 5, 8}, 1.0, false);
  for (const auto& spec : make_registry({2, 4, 8}, {0.5, 3, 4})) {
    CandidateOp op(spec, 8, rng);
    EXPECT_EQ(op.forward(z).shape(), z.shape()) << spec.name();
  }
}

TEST(Candidates, ParameterCounts) {
  Rng rng(13);
  const std::size_t d = 12;
  for (int h : {1, 2, 3, 4, 6, 12}) {
    EXPECT_EQ(CandidateOp(OpSpec::msa(h), d, rng).param_count(), 4 * d * d + d + 2 * d);
  }
  for (double r : {0.5, 3.0, 4.0}) {
    const std::size_t hd = mlp_hidden_dim(r, d);
    EXPECT_EQ(CandidateOp(OpSpec::mlp(r), d, rng).param_count(), 2 * d * hd + hd + d + 2 * d);
  }
  EXPECT_EQ(CandidateOp(OpSpec::identity(), d, rng).param_count(), 0u);
}

TEST(Candidates, GradientsMatchFiniteDifferences) {
  Rng rng(14);
  for (const auto& spec : make_registry({2, 4}, {0.5, 3})) {
    CandidateOp op(spec, 8, rng);
    std::vector<NamedParam> params;
    op.collect_params("op", params);
    for (auto& p : params)
      for (auto& v : p.tensor.mutable_data()) v = rng.normal(0.0, 0.5);
    auto z = random_tensor(rng, {2, 5, 8});
    std::vector<Tensor> leaves{z};
    for (auto& p : params) leaves.push_back(p.tensor);
    EXPECT_LT(gradcheck([&] { return project(op.forward(z)); }, leaves), 1e-5) << spec.name();
  }
}

TEST(Embed, TokenCount) {
  Rng rng(15);
  ModelDims dims{.embed = 8, .patch = 4, .image = 8, .channels = 3, .classes = 2};
  auto p = init_embed(dims, rng);
  auto z = embed_forward(Tensor(Shape{2, 8, 8, 3}, 0.5), p, 4);
  EXPECT_EQ(z.shape(), (Shape{2, 5, 8}));
  ModelDims big{.embed = 768, .patch = 16, .image = 224, .channels = 3, .classes = 100};
  EXPECT_EQ(big.patch_count(), 196u);
}

TEST(Embed, ZeroProjectionGivesPositionTable) {
  Rng rng(16);
  ModelDims dims{.embed = 4, .patch = 2, .image = 4, .channels = 3, .classes = 2};
  auto p = init_embed(dims, rng);
  std::fill(p.patch_w.mutable_data().begin(), p.patch_w.mutable_data().end(), 0.0);
  auto images = random_tensor(rng, {2, 4, 4, 3}, 1.0, false);
  auto z = embed_forward(images, p, 2);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t j = 0; j < 4; ++j) {
        const double expected = p.pos[r * 4 + j] + (r == 0 ? p.cls[j] : 0.0);
        EXPECT_DOUBLE_EQ(z[(b * 5 + r) * 4 + j], expected);
      }
    }
  }
}

TEST(Embed, IndivisibleImageRejected) {
  EXPECT_THROW(patchify(Tensor(Shape{1, 6, 6, 3}), 4), ShapeError);
  ModelDims dims{.embed = 4, .patch = 4, .image = 6};
  EXPECT_THROW(dims.validate(), ConfigError);
}

TEST(Embed, PatchOrderIsRowMajor) {
  // 1 image 4x4, 1 channel, pixel value = row*4 + col.
  Tensor img(Shape{1, 4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) img.mutable_data()[i] = static_cast<double>(i);
  auto p = patchify(img, 2);
  const std::vector<double> expected{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), expected);
}

TEST(Head, OnlyClassTokenMatters) {
  Rng rng(17);
  ModelDims dims{.embed = 4, .patch = 2, .image = 4, .channels = 3, .classes = 3};
  auto p = init_head(dims, true, rng);
  auto z = random_tensor(rng, {2, 5, 4}, 1.0, false);
  auto a = head_forward(z, p);
  Tensor z2 = z.clone();
  for (std::size_t i = 4; i < 20; ++i) z2.mutable_data()[i] += 3.0;  // rows 1.. of batch 0
  auto b = head_forward(z2, p);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Head, ZeroWeightsGiveZeroLogits) {
  Rng rng(18);
  ModelDims dims{.embed = 4, .patch = 2, .image = 4, .channels = 3, .classes = 3};
  auto p = init_head(dims, true, rng);
  std::fill(p.w.mutable_data().begin(), p.w.mutable_data().end(), 0.0);
  auto y = head_forward(random_tensor(rng, {2, 5, 4}, 1.0, false), p);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Head, BatchElementsIndependent) {
  Rng rng(19);
  ModelDims dims{.embed = 4, .patch = 2, .image = 4, .channels = 3, .classes = 3};
  auto p = init_head(dims, false, rng);
  auto z = random_tensor(rng, {2, 5, 4}, 1.0, false);
  const std::vector<std::size_t> swap{1, 0};
  auto a = head_forward(ops::index_select(z, 0, swap), p);
  auto b = ops::index_select(head_forward(z, p), 0, swap);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

#include <gtest/gtest.h>

#include <cmath>

#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"
#include "dasvit/supernet.hpp"
#include "gradcheck.hpp"

using namespace dasvit;
using oracle::random_tensor;

namespace {

std::vector<OpSpec> desk_registry() { return make_registry({2, 4, 8}, {0.5, 3, 4}); }

std::vector<CandidateOp> make_bank(const std::vector<OpSpec>& ops, std::size_t embed, Rng& rng) {
  std::vector<CandidateOp> bank;
  for (const auto& op : ops) bank.emplace_back(op, embed, rng);
  for (auto& c : bank) {
    std::vector<NamedParam> ps;
    c.collect_params("op", ps);
    for (auto& p : ps)
      for (auto& v : p.tensor.mutable_data()) v = rng.normal(0.0, 0.3);
  }
  return bank;
}

SupernetConfig tiny_config() {
  SupernetConfig cfg;
  cfg.dims = {.embed = 8, .patch = 4, .image = 8, .channels = 3, .classes = 3};
  cfg.depth = 2;
  cfg.candidates = desk_registry();
  cfg.token_selection = false;
  return cfg;
}

void set_logits(AlphaTable& a, std::size_t row, std::size_t edge, std::vector<double> values) {
  for (std::size_t k = 0; k < values.size(); ++k)
    a.logits.mutable_data()[a.flat_index(row, edge, k)] = values[k];
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

// Generic DAG walker: node values are the sum of incoming edge outputs, in
// node order, over an explicit edge list.
Tensor walk_dag(const Tensor& in0, const Tensor& in1, const EdgeFn& edge) {
  std::vector<Tensor> node{in0, in1, Tensor(), Tensor()};
  for (int target = 2; target < 4; ++target) {
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      if (kCellTopology[e].target != target) continue;
      Tensor y = edge(e, node[static_cast<std::size_t>(kCellTopology[e].source)]);
      node[static_cast<std::size_t>(target)] =
          node[static_cast<std::size_t>(target)].defined() ? ops::add(node[target], y) : y;
    }
  }
  return ops::add(node[2], node[3]);
}

}  // namespace

TEST(CellTopology, FiveEdgesSourcesPrecedeTargets) {
  ASSERT_EQ(kCellTopology.size(), 5u);
  for (const auto& e : kCellTopology) EXPECT_LT(e.source, e.target);
}

TEST(MixedEdge, UniformZeroIdentityHalves) {
  Rng rng(1);
  auto alpha = AlphaTable::init(1, {OpSpec::zero(), OpSpec::identity()}, true, rng, 0.0);
  auto bank = make_bank(alpha.candidates, 4, rng);
  auto x = random_tensor(rng, {2, 3, 4}, 1.0, false);
  auto y = mixed_edge_forward(x, bank, alpha.weights(), alpha.flat_index(0, 0, 0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], 0.5 * x[i], 1e-15);
}

TEST(MixedEdge, SaturatedIdentityPassesInput) {
  Rng rng(2);
  auto alpha = AlphaTable::init(1, desk_registry(), true, rng, 0.0);
  set_logits(alpha, 0, 0, {0, 30, 0, 0, 0, 0, 0, 0});
  auto bank = make_bank(alpha.candidates, 8, rng);
  auto x = random_tensor(rng, {2, 5, 8}, 1.0, false);
  auto y = mixed_edge_forward(x, bank, alpha.weights(), 0);
  expect_close(y, x, 1e-9);
}

TEST(MixedEdge, EmptyBankRejected) {
  EXPECT_THROW(mixed_edge_forward(Tensor(Shape{1, 2, 4}), {}, Tensor(Shape{1}), 0), SearchError);
}

TEST(MixedEdge, MatchesLoopOracle) {
  Rng rng(3);
  auto alpha = AlphaTable::init(1, desk_registry(), true, rng, 1.0);
  auto bank = make_bank(alpha.candidates, 8, rng);
  auto x = random_tensor(rng, {2, 5, 8}, 1.0, false);
  auto y = mixed_edge_forward(x, bank, alpha.weights(), alpha.flat_index(0, 3, 0));
  std::vector<double> w(8);
  double total = 0;
  for (std::size_t k = 0; k < 8; ++k) total += (w[k] = std::exp(alpha.logit(0, 3, k)));
  std::vector<double> ref(x.numel(), 0.0);
  for (std::size_t k = 0; k < 8; ++k) {
    auto o = bank[k].forward(x);
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += w[k] / total * o[i];
  }
  std::vector<double> got(y.data().begin(), y.data().end());
  EXPECT_LT(oracle::relative_error(got, ref), 1e-6);
}

TEST(Alpha, WeightsSumToOne) {
  Rng rng(4);
  auto alpha = AlphaTable::init(3, desk_registry(), false, rng, 2.0);
  auto w = alpha.weights();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t e = 0; e < kCellEdges; ++e) {
      double s = 0;
      for (std::size_t k = 0; k < 8; ++k) s += w[alpha.flat_index(r, e, k)];
      EXPECT_NEAR(s, 1.0, 1e-12);
      auto ew = alpha.edge_weights(r, e);
      for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(ew[k], w[alpha.flat_index(r, e, k)], 1e-15);
    }
}

TEST(Cell, AllZeroEdgesGiveZero) {
  Rng rng(5);
  auto in0 = random_tensor(rng, {2, 3, 4}, 1.0, false);
  auto in1 = random_tensor(rng, {2, 3, 4}, 1.0, false);
  auto y = cell_forward(in0, in1, [](std::size_t, const Tensor& x) { return zero_forward(x); });
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Cell, IdentityIntoFirstNodeSumsInputs) {
  Rng rng(6);
  auto in0 = random_tensor(rng, {2, 3, 4}, 1.0, false);
  auto in1 = random_tensor(rng, {2, 3, 4}, 1.0, false);
  auto y = cell_forward(in0, in1, [](std::size_t e, const Tensor& x) {
    return e < 2 ? identity_forward(x) : zero_forward(x);
  });
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], in0[i] + in1[i]);
}

TEST(Cell, MismatchedInputsRejected) {
  EXPECT_THROW(cell_forward(Tensor(Shape{1, 2, 4}), Tensor(Shape{1, 3, 4}),
                            [](std::size_t, const Tensor& x) { return x; }),
               ShapeError);
}

TEST(Cell, MatchesDagWalker) {
  Rng rng(7);
  auto alpha = AlphaTable::init(1, desk_registry(), true, rng, 1.0);
  std::vector<std::vector<CandidateOp>> banks;
  for (std::size_t e = 0; e < kCellEdges; ++e) banks.push_back(make_bank(alpha.candidates, 8, rng));
  const auto w = alpha.weights();
  EdgeFn edge = [&](std::size_t e, const Tensor& x) {
    return mixed_edge_forward(x, banks[e], w, alpha.flat_index(0, e, 0));
  };
  auto in0 = random_tensor(rng, {2, 5, 8}, 1.0, false);
  auto in1 = random_tensor(rng, {2, 5, 8}, 1.0, false);
  expect_close(cell_forward(in0, in1, edge), walk_dag(in0, in1, edge), 1e-12);
}

TEST(Cell, LinearInEachTerminalEdge) {
  Rng rng(8);
  std::vector<std::vector<CandidateOp>> banks;
  auto alpha = AlphaTable::init(1, desk_registry(), true, rng, 1.0);
  for (std::size_t e = 0; e < kCellEdges; ++e) banks.push_back(make_bank(alpha.candidates, 8, rng));
  const auto w = alpha.weights();
  auto in0 = random_tensor(rng, {1, 5, 8}, 1.0, false);
  auto in1 = random_tensor(rng, {1, 5, 8}, 1.0, false);
  auto run = [&](std::size_t doubled, Tensor* contribution) {
    return cell_forward(in0, in1, [&](std::size_t e, const Tensor& x) {
      auto y = mixed_edge_forward(x, banks[e], w, alpha.flat_index(0, e, 0));
      if (e == doubled) {
        if (contribution) *contribution = y;
        return ops::scale(y, 2.0);
      }
      return y;
    });
  };
  const auto base = run(99, nullptr);
  for (std::size_t e : {2u, 3u, 4u}) {
    Tensor c;
    const auto doubled = run(e, &c);
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(doubled[i] - base[i], c[i], 1e-12);
  }
}

TEST(Supernet, SingleLayerCellSeesEmbeddingTwice) {
  Rng rng(9);
  auto cfg = tiny_config();
  cfg.depth = 1;
  SupernetModel net(cfg, rng);
  net.harden({1, 1, 0, 0, 0});  // identity into n0, zero into n1
  auto images = random_tensor(rng, {2, 8, 8, 3}, 1.0, false);
  auto z0 = embed_forward(images, net.embed(), 4);
  auto expected = head_forward(ops::scale(z0, 2.0), net.head());
  expect_close(net.forward(images), expected, 1e-12);
}

TEST(Supernet, Deterministic) {
  auto run = [] {
    Rng rng(10);
    auto cfg = tiny_config();
    cfg.token_selection = true;
    SupernetModel net(cfg, rng);
    auto images = random_tensor(rng, {2, 8, 8, 3}, 1.0, false);
    auto y = net.forward(images);
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Supernet, AlphaGradientsNonzero) {
  Rng rng(11);
  auto cfg = tiny_config();
  cfg.candidates = make_registry({2, 4}, {0.5, 3});
  SupernetModel net(cfg, rng);
  for (auto& p : net.weight_params())
    for (auto& v : p.tensor.mutable_data()) v += rng.normal(0.0, 0.2);
  auto images = random_tensor(rng, {2, 8, 8, 3}, 1.0, false);
  const std::vector<int> labels{0, 2};
  ops::cross_entropy(net.forward(images), labels).backward();
  ASSERT_TRUE(net.alpha().logits.has_grad());
  for (double g : net.alpha().logits.grad()) EXPECT_NE(g, 0.0);
}

TEST(Supernet, SelectorParamsOnlyWhenTrainable) {
  Rng rng(12);
  auto cfg = tiny_config();
  cfg.token_selection = true;
  auto has_selector = [](const std::vector<NamedParam>& ps) {
    for (const auto& p : ps)
      if (p.name.rfind("selector.", 0) == 0) return true;
    return false;
  };
  cfg.selector_grad_mode = SelectorGradMode::ScoreScaling;
  EXPECT_TRUE(has_selector(SupernetModel(cfg, rng).weight_params()));
  cfg.selector_grad_mode = SelectorGradMode::GatherOnly;
  EXPECT_FALSE(has_selector(SupernetModel(cfg, rng).weight_params()));
}

TEST(Supernet, BanksExistOnlyForCandidates) {
  Rng rng(13);
  auto cfg = tiny_config();
  cfg.candidates = {OpSpec::identity(), OpSpec::msa(2), OpSpec::mlp(3)};
  SupernetModel net(cfg, rng);
  for (const auto& p : net.weight_params()) {
    EXPECT_EQ(p.name.find("msa_h4"), std::string::npos);
    EXPECT_EQ(p.name.find("mlp_r0.5"), std::string::npos);
  }
  EXPECT_EQ(net.bank(1, 4).size(), 3u);
}

TEST(Supernet, CopyMatchingParams) {
  Rng rng(14);
  auto cfg = tiny_config();
  SupernetModel a(cfg, rng);
  cfg.candidates = {OpSpec::identity(), OpSpec::msa(2), OpSpec::mlp(3)};
  cfg.depth = 3;
  SupernetModel b(cfg, rng);
  const auto pa = a.weight_params();
  const auto pb = b.weight_params();
  const std::size_t copied = copy_matching_params(pa, pb);
  EXPECT_GT(copied, 0u);
  for (const auto& p : pb) {
    for (const auto& q : pa) {
      if (p.name != q.name) continue;
      EXPECT_TRUE(std::equal(p.tensor.data().begin(), p.tensor.data().end(), q.tensor.data().begin()))
          << p.name;
    }
  }
}

TEST(SupernetGradients, MixedEdgeAndCellMatchFiniteDifferences) {
  Rng rng(15);
  auto alpha = AlphaTable::init(1, make_registry({2, 4}, {0.5, 3}), true, rng, 1.0);
  std::vector<std::vector<CandidateOp>> banks;
  for (std::size_t e = 0; e < kCellEdges; ++e) banks.push_back(make_bank(alpha.candidates, 8, rng));
  auto in0 = random_tensor(rng, {2, 5, 8});
  auto in1 = random_tensor(rng, {2, 5, 8});

  std::vector<Tensor> edge_leaves{in0, alpha.logits};
  for (const auto& op : banks[0]) {
    std::vector<NamedParam> ps;
    op.collect_params("p", ps);
    for (auto& p : ps) edge_leaves.push_back(p.tensor);
  }
  EXPECT_LT(oracle::gradcheck(
                [&] {
                  return oracle::project(mixed_edge_forward(in0, banks[0], alpha.weights(), 0));
                },
                edge_leaves),
            1e-5);

  EXPECT_LT(oracle::gradcheck(
                [&] {
                  const auto w = alpha.weights();
                  return oracle::project(cell_forward(in0, in1, [&](std::size_t e, const Tensor& x) {
                    return mixed_edge_forward(x, banks[e], w, alpha.flat_index(0, e, 0));
                  }));
                },
                {in0, in1, alpha.logits}),
            1e-5);
}

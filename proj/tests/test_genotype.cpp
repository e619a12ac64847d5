#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dasvit/errors.hpp"
#include "dasvit/genotype.hpp"
#include "dasvit/ops.hpp"
#include "gradcheck.hpp"

using namespace dasvit;
using oracle::random_tensor;

namespace {

const std::filesystem::path kGenotypes = std::filesystem::path(DASVIT_SOURCE_DIR) / "genotypes";

Genotype cifar_like(ModelDims dims, std::size_t depth, int heads) {
  Genotype g;
  g.dims = dims;
  g.depth = depth;
  g.nodes[0] = {{0, OpSpec::mlp(0.5)}, {1, OpSpec::mlp(0.5)}};
  g.nodes[1] = {{2, OpSpec::msa(heads)}, {0, OpSpec::mlp(0.5)}};
  return g;
}

ModelDims desk_dims(std::size_t embed = 8) {
  return {.embed = embed, .patch = 4, .image = 8, .channels = 3, .classes = 3};
}

void perturb(const std::vector<NamedParam>& params, Rng& rng, double sd) {
  for (auto p : params)
    for (auto& v : p.tensor.mutable_data()) v += rng.normal(0.0, sd);
}

std::uint64_t manifest_count(const DerivedModel& m) {
  std::uint64_t n = 0;
  for (const auto& p : m.params()) n += p.tensor.numel();
  return n;
}

}  // namespace

TEST(GenotypeJson, RoundTrip) {
  auto g = cifar_like(desk_dims(), 3, 2);
  auto back = genotype_from_json(genotype_to_json(g));
  EXPECT_EQ(back, g);
}

TEST(GenotypeJson, MissingNodesNamesPath) {
  auto j = genotype_to_json(cifar_like(desk_dims(), 1, 2));
  j.erase("nodes");
  try {
    genotype_from_json(j);
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("/nodes"), std::string::npos) << e.what();
  }
}

TEST(GenotypeJson, UnknownFieldsRejected) {
  auto j = genotype_to_json(cifar_like(desk_dims(), 1, 2));
  j["extra"] = 1;
  EXPECT_THROW(genotype_from_json(j), SchemaError);
  j.erase("extra");
  j["nodes"][1][0]["weight"] = 0.3;
  try {
    genotype_from_json(j);
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("/nodes/1/0/weight"), std::string::npos) << e.what();
  }
}

TEST(GenotypeJson, BadOpNamesPath) {
  auto j = genotype_to_json(cifar_like(desk_dims(), 1, 2));
  j["nodes"][0][1]["op"] = {{"kind", "conv3x3"}};
  try {
    genotype_from_json(j);
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("/nodes/0/1/op"), std::string::npos) << e.what();
  }
}

TEST(GenotypeJson, StructuralRules) {
  auto g = cifar_like(desk_dims(), 1, 2);
  g.nodes[0].push_back({0, OpSpec::identity()});
  EXPECT_THROW(g.validate(), SchemaError);
  g = cifar_like(desk_dims(), 1, 2);
  g.nodes[0][0].source = 2;  // n0 cannot read itself
  EXPECT_THROW(g.validate(), SchemaError);
  g = cifar_like(desk_dims(), 1, 2);
  g.nodes[1][1].op = OpSpec::zero();
  EXPECT_THROW(g.validate(), SchemaError);
  g = cifar_like(desk_dims(), 1, 3);
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(GenotypeJson, MalformedFileIsSchemaError) {
  const auto path = std::filesystem::temp_directory_path() / "dasvit_bad_genotype.json";
  {
    std::ofstream(path) << "{\"version\": 1, ";
  }
  EXPECT_THROW(read_genotype(path), SchemaError);
  EXPECT_THROW(read_genotype("/nonexistent/genotype.json"), IoError);
  std::filesystem::remove(path);
}

TEST(GenotypeFixtures, CifarStructure) {
  const auto g = read_genotype(kGenotypes / "cifar10.json");
  EXPECT_EQ(g.nodes[0], (std::vector<GenotypeEdge>{{0, OpSpec::mlp(0.5)}, {1, OpSpec::mlp(0.5)}}));
  EXPECT_EQ(g.nodes[1], (std::vector<GenotypeEdge>{{2, OpSpec::msa(12)}, {0, OpSpec::mlp(0.5)}}));
  EXPECT_EQ(g.dims.embed, 768u);
  EXPECT_EQ(g.dims.patch_count(), 196u);
  EXPECT_EQ(g.depth, 12u);
}

TEST(GenotypeFixtures, AllParse) {
  for (const char* name : {"cifar10.json", "imagenet100.json", "vit_b16.json"}) {
    EXPECT_NO_THROW(read_genotype(kGenotypes / name)) << name;
  }
  const auto path = std::filesystem::temp_directory_path() / "dasvit_genotype_rt.json";
  const auto g = read_genotype(kGenotypes / "imagenet100.json");
  write_genotype(path, g);
  EXPECT_EQ(read_genotype(path), g);
  std::filesystem::remove(path);
}

TEST(DerivedModel, IdentityGenotypeRecursion) {
  Rng rng(1);
  Genotype g;
  g.dims = desk_dims(4);
  g.depth = 3;
  g.nodes[0] = {{0, OpSpec::identity()}, {1, OpSpec::identity()}};
  g.nodes[1] = {{0, OpSpec::identity()}, {1, OpSpec::identity()}};
  DerivedModel m(g, {}, rng);
  auto images = random_tensor(rng, {2, 8, 8, 3}, 1.0, false);
  const auto z0 = embed_forward(images, m.embed(), 4);
  // Each cell: n0 = a + b, n1 = a + b, output 2(a + b).
  Tensor a = z0, b = z0;
  for (int l = 0; l < 3; ++l) {
    Tensor next(b.shape());
    for (std::size_t i = 0; i < next.numel(); ++i) next.mutable_data()[i] = 2.0 * (a[i] + b[i]);
    a = b;
    b = next;
  }
  const auto expected = head_forward(b, m.head());
  const auto got = m.forward(images);
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(DerivedModel, CifarGenotypeMatchesStraightLineOracle) {
  Rng rng(2);
  const auto g = cifar_like(desk_dims(8), 2, 2);
  DerivedModel m(g, {}, rng);
  perturb(m.params(), rng, 0.3);
  auto images = random_tensor(rng, {2, 8, 8, 3}, 1.0, false);
  const auto z0 = embed_forward(images, m.embed(), 4);
  ASSERT_EQ(z0.dim(1), 5u);
  Tensor e_prev2 = z0, e_prev1 = z0;
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& mlp_a = *m.op(l, 0, 0).mlp();
    const auto& mlp_b = *m.op(l, 0, 1).mlp();
    const auto& msa = *m.op(l, 1, 0).msa();
    const auto& mlp_c = *m.op(l, 1, 1).mlp();
    const auto o0 = ops::add(mlp_forward(e_prev2, mlp_a), mlp_forward(e_prev1, mlp_b));
    const auto o1 = ops::add(msa_forward(o0, msa), mlp_forward(e_prev2, mlp_c));
    e_prev2 = e_prev1;
    e_prev1 = ops::add(o0, o1);
  }
  const auto expected = head_forward(e_prev1, m.head());
  const auto got = m.forward(images);
  ASSERT_EQ(got.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
}

TEST(DerivedModel, MatchesHardenedSupernet) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(100 + seed);
    const auto g = cifar_like(desk_dims(8), 2, 2);
    SupernetConfig cfg;
    cfg.dims = g.dims;
    cfg.depth = g.depth;
    cfg.candidates = make_registry({2, 4, 8}, {0.5, 3, 4});
    cfg.token_selection = true;
    cfg.selector_lambda = 1.0;
    cfg.selector_grad_mode = SelectorGradMode::GatherOnly;
    SupernetModel net(cfg, rng);
    perturb(net.weight_params(), rng, 0.2);
    net.harden(hardening_choice(g, cfg.candidates));
    DerivedModel m(g, {}, rng);
    m.load_from_supernet(net);
    auto images = random_tensor(rng, {2, 8, 8, 3}, 1.0, false);
    const auto a = net.forward(images);
    const auto b = m.forward(images);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5);
  }
}

TEST(DerivedModel, HardeningChoiceDropsUnusedEdge) {
  const auto g = cifar_like(desk_dims(8), 1, 2);
  const auto cands = make_registry({2, 4, 8}, {0.5, 3, 4});
  const auto c = hardening_choice(g, cands);
  // Edges: in0->n0, in1->n0, in0->n1, in1->n1, n0->n1.
  EXPECT_EQ(c, (std::array<std::size_t, 5>{5, 5, 5, 0, 2}));
  EXPECT_THROW(hardening_choice(g, {OpSpec::zero(), OpSpec::identity()}), SearchError);
}

TEST(CostCounters, ParamsMatchManifest) {
  Rng rng(3);
  Genotype g;
  g.dims = desk_dims(8);
  g.depth = 1;
  g.nodes[0] = {{0, OpSpec::mlp(1.0)}, {1, OpSpec::identity()}};
  g.nodes[1] = {{0, OpSpec::identity()}, {2, OpSpec::identity()}};
  EXPECT_EQ(count_params(g), manifest_count(DerivedModel(g, {}, rng)));
  const std::vector<OpSpec> pool{OpSpec::identity(), OpSpec::msa(2), OpSpec::msa(4),
                                 OpSpec::mlp(0.5), OpSpec::mlp(3), OpSpec::mlp(4)};
  for (int trial = 0; trial < 20; ++trial) {
    Genotype r;
    r.dims = desk_dims(8);
    r.dims.classes = 2 + rng.below(5);
    r.depth = 1 + rng.below(3);
    r.nodes[0] = {{0, pool[rng.below(pool.size())]}, {1, pool[rng.below(pool.size())]}};
    r.nodes[1] = {{2, pool[rng.below(pool.size())]}, {static_cast<int>(rng.below(2)), pool[rng.below(pool.size())]}};
    for (bool final_norm : {true, false}) {
      EXPECT_EQ(count_params(r, final_norm),
                manifest_count(DerivedModel(r, {.final_norm = final_norm}, rng)));
    }
  }
}

TEST(CostCounters, ParamsIndependentOfHeads) {
  const auto dims = ModelDims{.embed = 48, .patch = 4, .image = 16, .channels = 3, .classes = 10};
  const auto base = count_params(cifar_like(dims, 4, 1));
  for (int h : {2, 3, 4, 6, 8, 12, 16}) EXPECT_EQ(count_params(cifar_like(dims, 4, h)), base);
}

TEST(CostCounters, LayersDecomposeTotal) {
  const auto r = analyze_genotype(read_genotype(kGenotypes / "cifar10.json"));
  std::uint64_t p = 0, f = 0, a = 0;
  for (const auto& l : r.layers) {
    p += l.params;
    f += l.flops;
    a += l.activations;
  }
  EXPECT_EQ(p, r.params - r.embed.params - r.head.params);
  EXPECT_EQ(f, r.flops - r.embed.flops - r.head.flops);
  EXPECT_EQ(a, r.peak_activations - r.embed.activations - r.head.activations);
  EXPECT_EQ(r.layers.size(), 12u);
}

TEST(CostCounters, MsaFlopsGrowFasterThanTokens) {
  // Doubling the image side with a fixed patch quadruples the patch count.
  const std::uint64_t d = 64, h = 4;
  const std::uint64_t n_small = 16, n_big = 64;
  auto independent = [&](std::uint64_t t) {
    return 5 * t * d + 8 * t * d * d + t * d + 4 * t * t * d + 5 * h * t * t;
  };
  const auto small = op_cost(OpSpec::msa(4), n_small + 1, d).flops;
  const auto big = op_cost(OpSpec::msa(4), n_big + 1, d).flops;
  EXPECT_EQ(small, independent(n_small + 1));
  EXPECT_EQ(big, independent(n_big + 1));
  EXPECT_GT(static_cast<double>(big) / static_cast<double>(small), 4.0);
  EXPECT_DOUBLE_EQ(static_cast<double>(big) / static_cast<double>(small),
                   static_cast<double>(independent(65)) / static_cast<double>(independent(17)));
}

TEST(CostCounters, ReportJsonAndTable) {
  const auto r = analyze_genotype(read_genotype(kGenotypes / "vit_b16.json"));
  const auto j = r.to_json();
  EXPECT_EQ(j["params"].get<std::uint64_t>(), r.params);
  EXPECT_EQ(j["layers"].size(), 12u);
  EXPECT_NE(r.table().find("total"), std::string::npos);
}

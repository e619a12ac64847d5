#include "dasvit/genotype.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"

namespace dasvit {

namespace {

using nlohmann::json;

[[noreturn]] void schema_fail(const std::string& path, const std::string& what) {
  throw SchemaError("genotype: " + path + ": " + what);
}

const json& member(const json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key)) schema_fail(path + "/" + key, "missing");
  return obj.at(key);
}

void only_keys(const json& obj, const std::string& path, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) schema_fail(path.empty() ? "/" : path, "expected an object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) schema_fail(path + "/" + key, "unknown field");
  }
}

std::size_t positive(const json& obj, const std::string& path, const char* key) {
  const json& v = member(obj, path, key);
  if (!v.is_number_integer() || v.get<long long>() <= 0) {
    schema_fail(path + "/" + key, "expected a positive integer");
  }
  return v.get<std::size_t>();
}

}  // namespace

std::size_t cell_edge_index(int source, std::size_t node) {
  const int target = static_cast<int>(node) + 2;
  for (std::size_t e = 0; e < kCellEdges; ++e) {
    if (kCellTopology[e].source == source && kCellTopology[e].target == target) return e;
  }
  throw SchemaError("genotype: no cell edge from node " + std::to_string(source) + " into node n" +
                    std::to_string(node));
}

void Genotype::validate() const {
  dims.validate();
  if (depth == 0) throw ConfigError("genotype: depth must be positive");
  for (std::size_t n = 0; n < 2; ++n) {
    const auto& inputs = nodes[n];
    const std::string where = "/nodes/" + std::to_string(n);
    if (inputs.size() != 2) {
      schema_fail(where, "expected exactly 2 inputs, got " + std::to_string(inputs.size()));
    }
    if (inputs[0] == inputs[1]) schema_fail(where, "duplicate input");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto& in = inputs[i];
      const std::string at = where + "/" + std::to_string(i);
      if (in.source < 0 || in.source >= static_cast<int>(n) + 2) {
        schema_fail(at + "/src", "source must precede the node");
      }
      if (in.op.kind == OpKind::Zero) schema_fail(at + "/op", "zero is not a valid retained op");
      if (in.op.kind == OpKind::Msa &&
          (in.op.heads <= 0 || dims.embed % static_cast<std::size_t>(in.op.heads) != 0)) {
        throw ConfigError("genotype: " + at + "/op: " + std::to_string(in.op.heads) +
                          " heads do not divide embedding dim " + std::to_string(dims.embed));
      }
      if (in.op.kind == OpKind::Mlp && !(in.op.mlp_ratio > 0)) {
        schema_fail(at + "/op", "mlp_ratio must be positive");
      }
    }
  }
}

json genotype_to_json(const Genotype& g) {
  json nodes = json::array();
  for (const auto& node : g.nodes) {
    json arr = json::array();
    for (const auto& in : node) arr.push_back({{"src", in.source}, {"op", in.op}});
    nodes.push_back(arr);
  }
  return {{"version", Genotype::kVersion},
          {"dims",
           {{"embed", g.dims.embed},
            {"patch", g.dims.patch},
            {"image", g.dims.image},
            {"depth", g.depth},
            {"classes", g.dims.classes}}},
          {"nodes", nodes}};
}

Genotype genotype_from_json(const json& j) {
  only_keys(j, "", {"version", "dims", "nodes"});
  const json& version = member(j, "", "version");
  if (!version.is_number_integer() || version.get<int>() != Genotype::kVersion) {
    schema_fail("/version", "unsupported version (expected " + std::to_string(Genotype::kVersion) + ")");
  }
  Genotype g;
  const json& dims = member(j, "", "dims");
  only_keys(dims, "/dims", {"embed", "patch", "image", "depth", "classes"});
  g.dims.embed = positive(dims, "/dims", "embed");
  g.dims.patch = positive(dims, "/dims", "patch");
  g.dims.image = positive(dims, "/dims", "image");
  g.dims.classes = positive(dims, "/dims", "classes");
  g.dims.channels = 3;
  g.depth = positive(dims, "/dims", "depth");

  const json& nodes = member(j, "", "nodes");
  if (!nodes.is_array() || nodes.size() != 2) schema_fail("/nodes", "expected an array of 2 nodes");
  for (std::size_t n = 0; n < 2; ++n) {
    const std::string where = "/nodes/" + std::to_string(n);
    if (!nodes[n].is_array()) schema_fail(where, "expected an array");
    for (std::size_t i = 0; i < nodes[n].size(); ++i) {
      const std::string at = where + "/" + std::to_string(i);
      const json& in = nodes[n][i];
      only_keys(in, at, {"src", "op"});
      const json& src = member(in, at, "src");
      if (!src.is_number_integer()) schema_fail(at + "/src", "expected an integer");
      GenotypeEdge edge;
      edge.source = src.get<int>();
      try {
        edge.op = member(in, at, "op").get<OpSpec>();
      } catch (const SchemaError& e) {
        schema_fail(at + "/op", e.what());
      }
      g.nodes[n].push_back(edge);
    }
  }
  g.validate();
  return g;
}

Genotype read_genotype(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open genotype file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw SchemaError("genotype: " + path.string() + ": malformed JSON: " + e.what());
  }
  return genotype_from_json(j);
}

void write_genotype(const std::filesystem::path& path, const Genotype& g) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write genotype file " + path.string());
  out << genotype_to_json(g).dump(2) << "\n";
  if (!out) throw IoError("failed writing genotype file " + path.string());
}

std::array<std::size_t, kCellEdges> hardening_choice(const Genotype& g,
                                                     const std::vector<OpSpec>& candidates) {
  auto index = [&](const OpSpec& op) {
    auto it = std::find(candidates.begin(), candidates.end(), op);
    if (it == candidates.end()) {
      throw SearchError("harden: op " + op.name() + " is not among the candidates");
    }
    return static_cast<std::size_t>(it - candidates.begin());
  };
  std::array<std::size_t, kCellEdges> choice{};
  const std::size_t zero = index(OpSpec::zero());
  choice.fill(zero);
  std::array<bool, kCellEdges> used{};
  for (std::size_t n = 0; n < 2; ++n) {
    for (const auto& in : g.nodes[n]) {
      const std::size_t e = cell_edge_index(in.source, n);
      if (used[e]) throw SearchError("harden: two ops share cell edge " + std::to_string(e));
      used[e] = true;
      choice[e] = index(in.op);
    }
  }
  return choice;
}

DerivedModel::DerivedModel(Genotype g, DerivedOptions opts, Rng& rng)
    : genotype_(std::move(g)), opts_(opts) {
  genotype_.validate();
  embed_ = init_embed(genotype_.dims, rng);
  ops_.resize(genotype_.depth);
  for (auto& layer : ops_)
    for (std::size_t n = 0; n < 2; ++n)
      for (const auto& in : genotype_.nodes[n])
        layer[n].emplace_back(in.op, genotype_.dims.embed, rng);
  head_ = init_head(genotype_.dims, opts_.final_norm, rng);
}

Tensor DerivedModel::forward(const Tensor& images, ActivationTally* tally) const {
  const Tensor z0 = embed_forward(images, embed_, genotype_.dims.patch);
  const OpContext ctx{.prenorm = opts_.prenorm, .tally = tally};
  Tensor prev2 = z0;
  Tensor prev1 = z0;
  for (const auto& layer : ops_) {
    std::array<Tensor, 3> x{prev2, prev1, Tensor()};
    std::array<Tensor, 2> node;
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t i = 0; i < layer[n].size(); ++i) {
        const auto src = static_cast<std::size_t>(genotype_.nodes[n][i].source);
        const Tensor y = layer[n][i].forward(x[src], ctx);
        node[n] = node[n].defined() ? ops::add(node[n], y) : y;
      }
      if (n == 0) x[2] = node[0];
    }
    prev2 = prev1;
    prev1 = ops::add(node[0], node[1]);
  }
  return head_forward(prev1, head_);
}

std::vector<NamedParam> DerivedModel::params() const {
  std::vector<NamedParam> out;
  collect_embed_params(embed_, out);
  for (std::size_t l = 0; l < ops_.size(); ++l)
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < ops_[l][n].size(); ++i) {
        const auto& op = ops_[l][n][i];
        const std::size_t edge = cell_edge_index(genotype_.nodes[n][i].source, n);
        op.collect_params(bank_prefix(l, edge, op.spec()), out);
      }
  collect_head_params(head_, out);
  return out;
}

void DerivedModel::load_from_supernet(const SupernetModel& net) {
  if (net.config().dims != genotype_.dims || net.depth() < genotype_.depth) {
    throw ConfigError("derived model: supernet dimensions do not match the genotype");
  }
  const auto mine = params();
  const std::size_t copied = copy_matching_params(net.weight_params(), mine);
  if (copied != mine.size()) {
    throw SearchError("derived model: only " + std::to_string(copied) + " of " +
                      std::to_string(mine.size()) + " parameters found in the supernet");
  }
}

OpCost op_cost(const OpSpec& op, std::size_t tokens, std::size_t embed) {
  const std::uint64_t t = tokens;
  const std::uint64_t d = embed;
  OpCost c;
  switch (op.kind) {
    case OpKind::Zero:
    case OpKind::Identity:
      break;
    case OpKind::Msa: {
      const std::uint64_t h = static_cast<std::uint64_t>(op.heads);
      c.params = 4 * d * d + d + 2 * d;
      c.flops = 5 * t * d              // pre-norm
                + 3 * 2 * t * d * d    // Q, K, V
                + 2 * t * t * d        // scores
                + 5 * h * t * t        // softmax
                + 2 * t * t * d        // weighted values
                + 2 * t * d * d + t * d;  // output projection + bias
      c.activations = 6 * t * d + 2 * h * t * t;
      break;
    }
    case OpKind::Mlp: {
      const std::uint64_t dh = mlp_hidden_dim(op.mlp_ratio, embed);
      c.params = 2 * d * dh + dh + d + 2 * d;
      c.flops = 5 * t * d + (2 * t * d * dh + t * dh) + 5 * t * dh + (2 * t * dh * d + t * d);
      c.activations = 2 * t * d + 2 * t * dh;
      break;
    }
  }
  return c;
}

CostReport analyze_genotype(const Genotype& g, bool final_norm) {
  g.validate();
  const auto& dims = g.dims;
  const std::uint64_t d = dims.embed;
  const std::uint64_t n = dims.patch_count();
  const std::uint64_t t = dims.token_count();
  const std::uint64_t pdim = dims.patch_dim();
  const std::uint64_t classes = dims.classes;

  CostReport r;
  r.embed.params = pdim * d + d + t * d + d;
  r.embed.flops = 2 * n * pdim * d + n * d + t * d;
  r.embed.activations = n * pdim + n * d + 2 * t * d;

  r.head.params = (final_norm ? 2 * d : 0) + d * classes + classes;
  r.head.flops = (final_norm ? 5 * d : 0) + 2 * d * classes + classes;
  r.head.activations = (final_norm ? 2 * d : d) + classes;

  OpCost layer;
  for (const auto& node : g.nodes) {
    for (const auto& in : node) {
      const OpCost c = op_cost(in.op, t, d);
      layer.params += c.params;
      layer.flops += c.flops;
      layer.activations += c.activations;
    }
  }
  // Two node sums and the cell output sum.
  layer.flops += 3 * t * d;
  layer.activations += 3 * t * d;
  r.layers.assign(g.depth, layer);

  r.params = r.embed.params + r.head.params;
  r.flops = r.embed.flops + r.head.flops;
  r.peak_activations = r.embed.activations + r.head.activations;
  for (const auto& l : r.layers) {
    r.params += l.params;
    r.flops += l.flops;
    r.peak_activations += l.activations;
  }
  return r;
}

std::uint64_t count_params(const Genotype& g, bool final_norm) {
  return analyze_genotype(g, final_norm).params;
}

std::uint64_t count_flops(const Genotype& g, bool final_norm) {
  return analyze_genotype(g, final_norm).flops;
}

nlohmann::json CostReport::to_json() const {
  auto cost = [](const OpCost& c) {
    return json{{"params", c.params}, {"flops", c.flops}, {"activations", c.activations}};
  };
  json layers_json = json::array();
  for (const auto& l : layers) layers_json.push_back(cost(l));
  return {{"params", params},
          {"flops", flops},
          {"peak_activations", peak_activations},
          {"embed", cost(embed)},
          {"head", cost(head)},
          {"layers", layers_json}};
}

std::string CostReport::table() const {
  std::ostringstream os;
  auto row = [&](const std::string& name, std::uint64_t p, std::uint64_t f, std::uint64_t a) {
    os << std::left << std::setw(10) << name << std::right << std::setw(16) << p << std::setw(18)
       << f << std::setw(16) << a << "\n";
  };
  os << std::left << std::setw(10) << "part" << std::right << std::setw(16) << "params"
     << std::setw(18) << "flops" << std::setw(16) << "activations" << "\n";
  row("embed", embed.params, embed.flops, embed.activations);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    row("layer" + std::to_string(i), layers[i].params, layers[i].flops, layers[i].activations);
  }
  row("head", head.params, head.flops, head.activations);
  row("total", params, flops, peak_activations);
  os << std::fixed << std::setprecision(2) << "params " << static_cast<double>(params) / 1e6
     << "M, flops " << static_cast<double>(flops) / 1e9 << "G\n";
  return os.str();
}

}  // namespace dasvit

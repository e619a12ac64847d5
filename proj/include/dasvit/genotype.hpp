#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dasvit/optim.hpp"
#include "dasvit/rng.hpp"
#include "dasvit/supernet.hpp"
#include "dasvit/tensor.hpp"
#include "dasvit/vit_ops.hpp"

namespace dasvit {

// One retained input of an intermediate node. Sources use the cell node
// numbering: 0 = in0, 1 = in1, 2 = n0.
struct GenotypeEdge {
  int source = 0;
  OpSpec op;
  friend bool operator==(const GenotypeEdge&, const GenotypeEdge&) = default;
};

struct Genotype {
  static constexpr int kVersion = 1;

  ModelDims dims;  // channels is fixed at 3 in the serialized form
  std::size_t depth = 1;
  std::array<std::vector<GenotypeEdge>, 2> nodes;

  // Throws SchemaError on structural violations and ConfigError on
  // dimension problems.
  void validate() const;
  friend bool operator==(const Genotype&, const Genotype&) = default;
};

// Index into kCellTopology of the edge feeding node `node` (0 or 1) from
// `source`; throws SchemaError when no such edge exists.
std::size_t cell_edge_index(int source, std::size_t node);

nlohmann::json genotype_to_json(const Genotype& g);
// Strict: unknown or missing fields throw SchemaError naming the JSON path.
Genotype genotype_from_json(const nlohmann::json& j);
Genotype read_genotype(const std::filesystem::path& path);
void write_genotype(const std::filesystem::path& path, const Genotype& g);

// Per-edge candidate choice that hardens a supernet to `g`: kept edges get
// their op, dropped edges get Zero. Throws SearchError when an op is not
// among the candidates.
std::array<std::size_t, kCellEdges> hardening_choice(const Genotype& g,
                                                     const std::vector<OpSpec>& candidates);

struct DerivedOptions {
  bool prenorm = true;
  bool final_norm = true;
};

// Discrete encoder built from a genotype. Parameter names match the
// supernet bank of the corresponding edge.
class DerivedModel {
 public:
  DerivedModel(Genotype g, DerivedOptions opts, Rng& rng);

  const Genotype& genotype() const { return genotype_; }
  const DerivedOptions& options() const { return opts_; }

  Tensor forward(const Tensor& images, ActivationTally* tally = nullptr) const;
  std::vector<NamedParam> params() const;
  const CandidateOp& op(std::size_t layer, std::size_t node, std::size_t i) const {
    return ops_[layer][node][i];
  }
  EmbedParams& embed() { return embed_; }
  HeadParams& head() { return head_; }

  // Copies embed, head and the kept candidates' banks from `net`.
  void load_from_supernet(const SupernetModel& net);

 private:
  Genotype genotype_;
  DerivedOptions opts_;
  EmbedParams embed_;
  std::vector<std::array<std::vector<CandidateOp>, 2>> ops_;
  HeadParams head_;
};

// Analytic cost of one op over `tokens` rows of width `embed`, per image.
struct OpCost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;        // multiply-accumulate = 2
  std::uint64_t activations = 0;  // elements retained for the backward pass
};

OpCost op_cost(const OpSpec& op, std::size_t tokens, std::size_t embed);

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t peak_activations = 0;
  OpCost embed;
  OpCost head;
  std::vector<OpCost> layers;

  nlohmann::json to_json() const;
  std::string table() const;
};

// Per image. Norms, GELU and softmax count 5 ops per element, additions 1.
CostReport analyze_genotype(const Genotype& g, bool final_norm = true);
std::uint64_t count_params(const Genotype& g, bool final_norm = true);
std::uint64_t count_flops(const Genotype& g, bool final_norm = true);

}  // namespace dasvit

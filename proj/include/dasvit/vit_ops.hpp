#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dasvit/optim.hpp"
#include "dasvit/rng.hpp"
#include "dasvit/tensor.hpp"

namespace dasvit {

enum class OpKind { Zero, Identity, Msa, Mlp };

// One candidate operation of the search space.
struct OpSpec {
  OpKind kind = OpKind::Zero;
  int heads = 0;          // Msa only
  double mlp_ratio = 0;   // Mlp only

  static OpSpec zero() { return {OpKind::Zero, 0, 0.0}; }
  static OpSpec identity() { return {OpKind::Identity, 0, 0.0}; }
  static OpSpec msa(int heads) { return {OpKind::Msa, heads, 0.0}; }
  static OpSpec mlp(double ratio) { return {OpKind::Mlp, 0, ratio}; }

  // "zero", "identity", "msa" or "mlp".
  std::string type_tag() const;
  // Unique display name, e.g. "msa_h12", "mlp_r0.5".
  std::string name() const;
  bool has_params() const { return kind == OpKind::Msa || kind == OpKind::Mlp; }

  friend bool operator==(const OpSpec&, const OpSpec&) = default;
};

void to_json(nlohmann::json& j, const OpSpec& op);
// Strict: unknown kinds or fields throw SchemaError.
void from_json(const nlohmann::json& j, OpSpec& op);

// Zero, Identity, MSA for each head count, MLP for each ratio, in that order.
std::vector<OpSpec> make_registry(const std::vector<int>& msa_heads,
                                  const std::vector<double>& mlp_ratios);
// {Zero, Identity, MSA h in {8,12,16}, MLP r in {0.5,3,4}}.
std::vector<OpSpec> default_registry();

// Round-half-up of ratio * embed, at least 1.
std::size_t mlp_hidden_dim(double ratio, std::size_t embed);

// Tally of attention-score activations (elements of softmax(QK^T) matrices)
// produced by MSA forwards.
struct ActivationTally {
  std::uint64_t attention_score_elements = 0;
  std::uint64_t msa_calls = 0;
};

struct OpContext {
  bool prenorm = true;
  ActivationTally* tally = nullptr;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

// Fused per-role projections; head h uses columns [h*d, (h+1)*d).
struct MsaParams {
  int heads = 1;
  Tensor w_q, w_k, w_v;  // D x D
  Tensor w_o;            // D x D
  Tensor b_o;            // D
  LayerNormParams norm;
};

struct MlpParams {
  Tensor w1;  // D x Dh
  Tensor b1;  // Dh
  Tensor w2;  // Dh x D
  Tensor b2;  // D
  LayerNormParams norm;
};

LayerNormParams init_layer_norm(std::size_t embed);
MsaParams init_msa(std::size_t embed, int heads, Rng& rng);
MlpParams init_mlp(std::size_t embed, double ratio, Rng& rng);

Tensor apply_layer_norm(const Tensor& x, const LayerNormParams& p);

Tensor msa_forward(const Tensor& z, const MsaParams& p, const OpContext& ctx = {});
Tensor mlp_forward(const Tensor& z, const MlpParams& p, const OpContext& ctx = {});
Tensor zero_forward(const Tensor& z);
Tensor identity_forward(const Tensor& z);

// A candidate op together with the parameters it owns.
class CandidateOp {
 public:
  CandidateOp() = default;
  CandidateOp(OpSpec spec, std::size_t embed, Rng& rng);

  const OpSpec& spec() const { return spec_; }
  Tensor forward(const Tensor& z, const OpContext& ctx = {}) const;
  // Appends parameters named `<prefix>.<field>`.
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const;
  std::size_t param_count() const;

  const MsaParams* msa() const { return std::get_if<MsaParams>(&params_); }
  const MlpParams* mlp() const { return std::get_if<MlpParams>(&params_); }

 private:
  OpSpec spec_;
  std::variant<std::monostate, MsaParams, MlpParams> params_;
};

struct ModelDims {
  std::size_t embed = 32;
  std::size_t patch = 4;
  std::size_t image = 8;
  std::size_t channels = 3;
  std::size_t classes = 2;

  std::size_t patch_count() const { return (image / patch) * (image / patch); }
  std::size_t token_count() const { return patch_count() + 1; }
  std::size_t patch_dim() const { return patch * patch * channels; }
  // Throws ConfigError when the image side is not divisible by the patch.
  void validate() const;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct EmbedParams {
  Tensor patch_w;  // (P*P*C) x D
  Tensor patch_b;  // D
  Tensor pos;      // (N+1) x D
  Tensor cls;      // D
};

struct HeadParams {
  bool final_norm = true;
  LayerNormParams norm;
  Tensor w;  // D x classes
  Tensor b;  // classes
};

EmbedParams init_embed(const ModelDims& dims, Rng& rng);
HeadParams init_head(const ModelDims& dims, bool final_norm, Rng& rng);
void collect_embed_params(const EmbedParams& p, std::vector<NamedParam>& out);
void collect_head_params(const HeadParams& p, std::vector<NamedParam>& out);

// [B,H,W,C] images -> [B,N,P*P*C]; patches in row-major grid order, each
// flattened row-major over (row, col, channel). Not differentiable.
Tensor patchify(const Tensor& images, std::size_t patch);

// [B,H,W,C] -> [B,N+1,D]: class token at row 0, position table added to all rows.
Tensor embed_forward(const Tensor& images, const EmbedParams& p, std::size_t patch);
// Logits [B,classes] from the class-token row only.
Tensor head_forward(const Tensor& z, const HeadParams& p);

}  // namespace dasvit

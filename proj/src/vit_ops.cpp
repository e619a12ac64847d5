#include "dasvit/vit_ops.hpp"

#include <cmath>
#include <sstream>

#include "dasvit/errors.hpp"
#include "dasvit/ops.hpp"

namespace dasvit {

namespace {
constexpr double kInitStd = 0.02;

Tensor normal_param(Shape shape, Rng& rng, double stddev = kInitStd) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor const_param(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

void require_tokens(const char* op, const Tensor& z) {
  if (z.rank() != 3) {
    throw ShapeError(std::string(op) + ": expected [B,N,D] input, got " + shape_str(z.shape()));
  }
}
}  // namespace

std::string OpSpec::type_tag() const {
  switch (kind) {
    case OpKind::Zero: return "zero";
    case OpKind::Identity: return "identity";
    case OpKind::Msa: return "msa";
    case OpKind::Mlp: return "mlp";
  }
  return "?";
}

std::string OpSpec::name() const {
  std::ostringstream os;
  os << type_tag();
  if (kind == OpKind::Msa) os << "_h" << heads;
  if (kind == OpKind::Mlp) os << "_r" << mlp_ratio;
  return os.str();
}

void to_json(nlohmann::json& j, const OpSpec& op) {
  j = nlohmann::json{{"kind", op.type_tag()}};
  if (op.kind == OpKind::Msa) j["heads"] = op.heads;
  if (op.kind == OpKind::Mlp) j["mlp_ratio"] = op.mlp_ratio;
}

void from_json(const nlohmann::json& j, OpSpec& op) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
    throw SchemaError("op: expected an object with a string \"kind\"");
  }
  const auto kind = j["kind"].get<std::string>();
  auto only = [&](std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : j.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) throw SchemaError("op: unknown field \"" + key + "\" for kind \"" + kind + "\"");
    }
  };
  if (kind == "zero") {
    only({"kind"});
    op = OpSpec::zero();
  } else if (kind == "identity") {
    only({"kind"});
    op = OpSpec::identity();
  } else if (kind == "msa") {
    only({"kind", "heads"});
    if (!j.contains("heads") || !j["heads"].is_number_integer() || j["heads"].get<int>() <= 0) {
      throw SchemaError("op: msa needs a positive integer \"heads\"");
    }
    op = OpSpec::msa(j["heads"].get<int>());
  } else if (kind == "mlp") {
    only({"kind", "mlp_ratio"});
    if (!j.contains("mlp_ratio") || !j["mlp_ratio"].is_number() ||
        j["mlp_ratio"].get<double>() <= 0.0) {
      throw SchemaError("op: mlp needs a positive \"mlp_ratio\"");
    }
    op = OpSpec::mlp(j["mlp_ratio"].get<double>());
  } else {
    throw SchemaError("op: unknown kind \"" + kind + "\"");
  }
}

std::vector<OpSpec> make_registry(const std::vector<int>& msa_heads,
                                  const std::vector<double>& mlp_ratios) {
  std::vector<OpSpec> reg{OpSpec::zero(), OpSpec::identity()};
  for (int h : msa_heads) reg.push_back(OpSpec::msa(h));
  for (double r : mlp_ratios) reg.push_back(OpSpec::mlp(r));
  return reg;
}

std::vector<OpSpec> default_registry() { return make_registry({8, 12, 16}, {0.5, 3.0, 4.0}); }

std::size_t mlp_hidden_dim(double ratio, std::size_t embed) {
  if (!(ratio > 0.0)) throw ConfigError("mlp: ratio must be positive");
  const auto h = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(embed) + 0.5));
  return std::max<std::size_t>(1, h);
}

LayerNormParams init_layer_norm(std::size_t embed) {
  return {const_param({embed}, 1.0), const_param({embed}, 0.0)};
}

MsaParams init_msa(std::size_t embed, int heads, Rng& rng) {
  if (heads <= 0 || embed % static_cast<std::size_t>(heads) != 0) {
    throw ConfigError("msa: " + std::to_string(heads) + " heads do not divide embedding dim " +
                      std::to_string(embed));
  }
  MsaParams p;
  p.heads = heads;
  p.w_q = normal_param({embed, embed}, rng);
  p.w_k = normal_param({embed, embed}, rng);
  p.w_v = normal_param({embed, embed}, rng);
  p.w_o = normal_param({embed, embed}, rng);
  p.b_o = const_param({embed}, 0.0);
  p.norm = init_layer_norm(embed);
  return p;
}

MlpParams init_mlp(std::size_t embed, double ratio, Rng& rng) {
  const std::size_t hidden = mlp_hidden_dim(ratio, embed);
  MlpParams p;
  p.w1 = normal_param({embed, hidden}, rng);
  p.b1 = const_param({hidden}, 0.0);
  p.w2 = normal_param({hidden, embed}, rng);
  p.b2 = const_param({embed}, 0.0);
  p.norm = init_layer_norm(embed);
  return p;
}

Tensor apply_layer_norm(const Tensor& x, const LayerNormParams& p) {
  return ops::add(ops::mul(ops::layer_norm(x), p.gamma), p.beta);
}

Tensor msa_forward(const Tensor& z, const MsaParams& p, const OpContext& ctx) {
  require_tokens("msa", z);
  const std::size_t embed = z.dim(2);
  const auto heads = static_cast<std::size_t>(p.heads);
  if (heads == 0 || embed % heads != 0) {
    throw ConfigError("msa: " + std::to_string(p.heads) + " heads do not divide " +
                      std::to_string(embed));
  }
  const std::size_t d = embed / heads;
  const Tensor x = ctx.prenorm ? apply_layer_norm(z, p.norm) : z;
  const Tensor q = ops::matmul(x, p.w_q);
  const Tensor k = ops::matmul(x, p.w_k);
  const Tensor v = ops::matmul(x, p.w_v);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = ops::slice(q, -1, h * d, d);
    const Tensor kh = ops::slice(k, -1, h * d, d);
    const Tensor vh = ops::slice(v, -1, h * d, d);
    const Tensor attn =
        ops::softmax(ops::scale(ops::matmul(qh, ops::transpose(kh, -1, -2)), inv_sqrt));
    if (ctx.tally) ctx.tally->attention_score_elements += attn.numel();
    outs.push_back(ops::matmul(attn, vh));
  }
  if (ctx.tally) ++ctx.tally->msa_calls;
  const Tensor merged = heads == 1 ? outs.front() : ops::concat(outs, -1);
  return ops::add(ops::matmul(merged, p.w_o), p.b_o);
}

Tensor mlp_forward(const Tensor& z, const MlpParams& p, const OpContext& ctx) {
  require_tokens("mlp", z);
  const Tensor x = ctx.prenorm ? apply_layer_norm(z, p.norm) : z;
  const Tensor hidden = ops::gelu(ops::add(ops::matmul(x, p.w1), p.b1));
  return ops::add(ops::matmul(hidden, p.w2), p.b2);
}

// Kept in the graph (as 0 * z) so the input still receives an exact zero
// gradient through this path.
Tensor zero_forward(const Tensor& z) { return ops::scale(z, 0.0); }

Tensor identity_forward(const Tensor& z) { return z; }

CandidateOp::CandidateOp(OpSpec spec, std::size_t embed, Rng& rng) : spec_(spec) {
  switch (spec.kind) {
    case OpKind::Msa: params_ = init_msa(embed, spec.heads, rng); break;
    case OpKind::Mlp: params_ = init_mlp(embed, spec.mlp_ratio, rng); break;
    default: break;
  }
}

Tensor CandidateOp::forward(const Tensor& z, const OpContext& ctx) const {
  switch (spec_.kind) {
    case OpKind::Zero: return zero_forward(z);
    case OpKind::Identity: return identity_forward(z);
    case OpKind::Msa: return msa_forward(z, std::get<MsaParams>(params_), ctx);
    case OpKind::Mlp: return mlp_forward(z, std::get<MlpParams>(params_), ctx);
  }
  return z;
}

void CandidateOp::collect_params(const std::string& prefix, std::vector<NamedParam>& out) const {
  if (const auto* m = msa()) {
    out.push_back({prefix + ".w_q", m->w_q});
    out.push_back({prefix + ".w_k", m->w_k});
    out.push_back({prefix + ".w_v", m->w_v});
    out.push_back({prefix + ".w_o", m->w_o});
    out.push_back({prefix + ".b_o", m->b_o});
    out.push_back({prefix + ".norm.gamma", m->norm.gamma});
    out.push_back({prefix + ".norm.beta", m->norm.beta});
  } else if (const auto* m = mlp()) {
    out.push_back({prefix + ".w1", m->w1});
    out.push_back({prefix + ".b1", m->b1});
    out.push_back({prefix + ".w2", m->w2});
    out.push_back({prefix + ".b2", m->b2});
    out.push_back({prefix + ".norm.gamma", m->norm.gamma});
    out.push_back({prefix + ".norm.beta", m->norm.beta});
  }
}

std::size_t CandidateOp::param_count() const {
  std::vector<NamedParam> ps;
  collect_params("", ps);
  std::size_t n = 0;
  for (const auto& p : ps) n += p.tensor.numel();
  return n;
}

void ModelDims::validate() const {
  if (embed == 0 || patch == 0 || image == 0 || channels == 0 || classes == 0) {
    throw ConfigError("dims: all model dimensions must be positive");
  }
  if (image % patch != 0) {
    throw ConfigError("dims: image side " + std::to_string(image) +
                      " is not divisible by patch size " + std::to_string(patch));
  }
}

EmbedParams init_embed(const ModelDims& dims, Rng& rng) {
  dims.validate();
  EmbedParams p;
  p.patch_w = normal_param({dims.patch_dim(), dims.embed}, rng);
  p.patch_b = const_param({dims.embed}, 0.0);
  p.pos = normal_param({dims.token_count(), dims.embed}, rng);
  p.cls = normal_param({dims.embed}, rng);
  return p;
}

HeadParams init_head(const ModelDims& dims, bool final_norm, Rng& rng) {
  HeadParams p;
  p.final_norm = final_norm;
  if (final_norm) p.norm = init_layer_norm(dims.embed);
  p.w = normal_param({dims.embed, dims.classes}, rng);
  p.b = const_param({dims.classes}, 0.0);
  return p;
}

void collect_embed_params(const EmbedParams& p, std::vector<NamedParam>& out) {
  out.push_back({"embed.patch_w", p.patch_w});
  out.push_back({"embed.patch_b", p.patch_b});
  out.push_back({"embed.pos", p.pos});
  out.push_back({"embed.cls", p.cls});
}

void collect_head_params(const HeadParams& p, std::vector<NamedParam>& out) {
  if (p.final_norm) {
    out.push_back({"head.norm.gamma", p.norm.gamma});
    out.push_back({"head.norm.beta", p.norm.beta});
  }
  out.push_back({"head.w", p.w});
  out.push_back({"head.b", p.b});
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4) {
    throw ShapeError("patchify: expected [B,H,W,C] images, got " + shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0);
  const std::size_t height = images.dim(1);
  const std::size_t width = images.dim(2);
  const std::size_t chans = images.dim(3);
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeError("patchify: image " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t gh = height / patch;
  const std::size_t gw = width / patch;
  const std::size_t pdim = patch * patch * chans;
  std::vector<double> out(batch * gh * gw * pdim);
  const auto& src = images.data();
  std::size_t o = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t py = 0; py < gh; ++py) {
      for (std::size_t px = 0; px < gw; ++px) {
        for (std::size_t y = 0; y < patch; ++y) {
          const std::size_t row = py * patch + y;
          const std::size_t base = ((b * height + row) * width + px * patch) * chans;
          for (std::size_t j = 0; j < patch * chans; ++j) out[o++] = src[base + j];
        }
      }
    }
  }
  return Tensor(Shape{batch, gh * gw, pdim}, std::move(out));
}

Tensor embed_forward(const Tensor& images, const EmbedParams& p, std::size_t patch) {
  const Tensor patches = patchify(images, patch);
  const std::size_t batch = patches.dim(0);
  const std::size_t tokens = patches.dim(1) + 1;
  const std::size_t embed = p.patch_w.dim(1);
  if (patches.dim(2) != p.patch_w.dim(0) || p.pos.dim(0) != tokens) {
    throw ShapeError("embed: patches " + shape_str(patches.shape()) + " do not fit projection " +
                     shape_str(p.patch_w.shape()) + " / position table " +
                     shape_str(p.pos.shape()));
  }
  const Tensor projected = ops::add(ops::matmul(patches, p.patch_w), p.patch_b);
  const Tensor cls = ops::broadcast_to(ops::reshape(p.cls, {1, 1, embed}), {batch, 1, embed});
  return ops::add(ops::concat({cls, projected}, 1), p.pos);
}

Tensor head_forward(const Tensor& z, const HeadParams& p) {
  require_tokens("head", z);
  const std::size_t batch = z.dim(0);
  const std::size_t embed = z.dim(2);
  Tensor cls = ops::reshape(ops::slice(z, 1, 0, 1), {batch, embed});
  if (p.final_norm) cls = apply_layer_norm(cls, p.norm);
  return ops::add(ops::matmul(cls, p.w), p.b);
}

}  // namespace dasvit

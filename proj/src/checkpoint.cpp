#include "dasvit/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unistd.h>

#include "dasvit/errors.hpp"

namespace dasvit {

namespace fs = std::filesystem;

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
  add(name, t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
}

void Checkpoint::add(const std::string& name, Shape shape, std::vector<double> values) {
  if (find(name)) throw IoError("checkpoint: duplicate entry '" + name + "'");
  entries.push_back({name, std::move(shape), std::move(values)});
}

namespace {

void write_synced(const fs::path& path, const std::string& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const bool ok = std::fwrite(bytes.data(), 1, bytes.size(), f) == bytes.size() &&
                  std::fflush(f) == 0 && ::fsync(::fileno(f)) == 0;
  std::fclose(f);
  if (!ok) throw IoError("write failed: " + path.string());
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void put_f64(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const std::string& in, std::size_t pos) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : ckpt.entries) {
    if (shape_numel(e.shape) != e.values.size()) {
      throw IoError("checkpoint: entry '" + e.name + "' shape does not match its values");
    }
    tensors.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"dtype", "f64"},
                       {"offset", blob.size()},
                       {"nbytes", e.values.size() * 8}});
    for (double v : e.values) put_f64(blob, v);
  }
  nlohmann::json manifest = {{"format", "dasvit-checkpoint"},
                             {"version", 1},
                             {"blob", "blob.bin"},
                             {"byte_order", "little"},
                             {"tensors", tensors},
                             {"meta", ckpt.meta}};
  write_synced(dir / "blob.bin", blob);
  write_synced(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint read_checkpoint(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_all(manifest_path));
  } catch (const nlohmann::json::exception& ex) {
    throw IoError(manifest_path.string() + ": " + ex.what());
  }
  if (manifest.value("format", "") != "dasvit-checkpoint") {
    throw IoError(manifest_path.string() + ": not a checkpoint manifest");
  }
  const std::string blob = read_all(dir / manifest.value("blob", "blob.bin"));
  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& t : manifest.at("tensors")) {
    CheckpointEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    if (t.at("dtype") != "f64") throw IoError(manifest_path.string() + ": unsupported dtype for " + e.name);
    const auto offset = t.at("offset").get<std::size_t>();
    const auto nbytes = t.at("nbytes").get<std::size_t>();
    if (nbytes != shape_numel(e.shape) * 8 || offset + nbytes > blob.size()) {
      throw IoError((dir / "blob.bin").string() + ": entry '" + e.name + "' out of bounds");
    }
    e.values.resize(nbytes / 8);
    for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = get_f64(blob, offset + 8 * i);
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

void add_params(Checkpoint& ckpt, const std::vector<NamedParam>& params) {
  for (const auto& p : params) ckpt.add(p.name, p.tensor);
}

void add_optimizer(Checkpoint& ckpt, const std::string& prefix, const AdamW& opt) {
  const auto& st = opt.state();
  for (std::size_t i = 0; i < opt.params().size(); ++i) {
    const auto& p = opt.params()[i];
    ckpt.add(prefix + ".m." + p.name, p.tensor.shape(), st.first_moment[i]);
    ckpt.add(prefix + ".v." + p.name, p.tensor.shape(), st.second_moment[i]);
  }
  ckpt.meta[prefix] = {{"step", st.step}, {"lr", opt.lr()}};
}

namespace {
const CheckpointEntry& require(const Checkpoint& ckpt, const std::string& name, const Shape& shape) {
  const auto* e = ckpt.find(name);
  if (!e) throw IoError("checkpoint: missing entry '" + name + "'");
  if (e->shape != shape) {
    throw IoError("checkpoint: entry '" + name + "' has shape " + shape_str(e->shape) +
                  ", expected " + shape_str(shape));
  }
  return *e;
}
}  // namespace

void load_params(const Checkpoint& ckpt, const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    const auto& e = require(ckpt, p.name, p.tensor.shape());
    Tensor t = p.tensor;
    std::copy(e.values.begin(), e.values.end(), t.mutable_data().begin());
  }
}

void load_optimizer(const Checkpoint& ckpt, const std::string& prefix, AdamW& opt) {
  OptimizerState st;
  for (const auto& p : opt.params()) {
    st.first_moment.push_back(require(ckpt, prefix + ".m." + p.name, p.tensor.shape()).values);
    st.second_moment.push_back(require(ckpt, prefix + ".v." + p.name, p.tensor.shape()).values);
  }
  if (!ckpt.meta.contains(prefix)) throw IoError("checkpoint: no optimizer metadata for " + prefix);
  st.step = ckpt.meta.at(prefix).at("step").get<std::int64_t>();
  opt.restore(std::move(st));
  opt.set_lr(ckpt.meta.at(prefix).at("lr").get<double>());
}

}  // namespace dasvit

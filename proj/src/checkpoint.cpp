#include "chamtoy/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace chamtoy {

namespace fs = std::filesystem;

namespace {

std::string shape_token(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape_token(const std::string& tok) {
  Shape s;
  if (tok == "scalar") return s;
  std::size_t pos = 0;
  while (pos <= tok.size()) {
    auto end = tok.find('x', pos);
    if (end == std::string::npos) end = tok.size();
    s.push_back(parse_size("shape", tok.substr(pos, end - pos)));
    pos = end + 1;
  }
  return s;
}

template <class T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
      std::swap(b[i], b[sizeof(T) - 1 - i]);
    }
  }
  return v;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

const Tensor* Checkpoint::find(std::string_view name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest", std::ios::binary | std::ios::trunc);
  std::ofstream weights(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  if (!manifest || !weights) {
    throw DataError("cannot write checkpoint to " + dir.string());
  }
  manifest << "chamtoy-checkpoint " << kCheckpointVersion << "\n";
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const std::uint64_t length = t.numel() * sizeof(Scalar);
    manifest << name << ' ' << shape_token(t.shape()) << ' ' << kScalarDtype
             << ' ' << offset << ' ' << length << "\n";
    for (Scalar v : t.data()) {
      const Scalar le = to_little_endian(v);
      weights.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
    offset += length;
  }
  KvMap kv = ckpt.extra;
  for (const auto& [k, v] : kv) {
    if (k.rfind("model.", 0) == 0 || k.rfind("checkpoint.", 0) == 0) {
      throw ConfigError("checkpoint extra key '" + k + "' is reserved");
    }
  }
  ckpt.config.to_kv(kv);
  kv["checkpoint.version"] = std::to_string(kCheckpointVersion);
  kv["checkpoint.step"] = std::to_string(ckpt.step);
  kv["checkpoint.dtype"] = kScalarDtype;
  write_kv_file(dir / "config", kv);
  if (!manifest.good() || !weights.good()) {
    throw DataError("error writing checkpoint to " + dir.string());
  }
}

Checkpoint load_checkpoint(const fs::path& dir) {
  Checkpoint ckpt;
  KvMap kv;
  try {
    kv = read_kv_file(dir / "config");
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError("checkpoint config lacks " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  const std::string version = take("checkpoint.version");
  if (version != std::to_string(kCheckpointVersion)) {
    throw DataError("checkpoint version mismatch: file has " + version +
                    ", expected " + std::to_string(kCheckpointVersion));
  }
  ckpt.step = parse_u64("checkpoint.step", take("checkpoint.step"));
  if (take("checkpoint.dtype") != kScalarDtype) {
    throw DataError("checkpoint dtype does not match this build");
  }
  for (auto it = kv.begin(); it != kv.end();) {
    if (it->first.rfind("model.", 0) == 0) {
      if (!ckpt.config.set(it->first, it->second)) {
        throw DataError("unknown model key in checkpoint: " + it->first);
      }
      it = kv.erase(it);
    } else {
      ++it;
    }
  }
  ckpt.extra = std::move(kv);

  const std::string blob = read_file(dir / "weights.bin");
  std::istringstream manifest(read_file(dir / "manifest"));
  std::string line;
  if (!std::getline(manifest, line)) throw DataError("empty manifest");
  {
    std::istringstream hs(line);
    std::string magic;
    int v = -1;
    hs >> magic >> v;
    if (magic != "chamtoy-checkpoint") throw DataError("not a checkpoint manifest");
    if (v != kCheckpointVersion) {
      throw DataError("manifest version mismatch: " + std::to_string(v));
    }
  }
  std::uint64_t expected_offset = 0;
  std::size_t line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape_tok, dtype;
    std::uint64_t offset = 0, length = 0;
    if (!(ls >> name >> shape_tok >> dtype >> offset >> length)) {
      throw DataError("manifest line " + std::to_string(line_no) + " malformed");
    }
    if (dtype != kScalarDtype) {
      throw DataError("manifest line " + std::to_string(line_no) +
                      ": unsupported dtype " + dtype);
    }
    Shape shape = parse_shape_token(shape_tok);
    const std::uint64_t numel = shape_numel(shape);
    if (length != numel * sizeof(Scalar)) {
      throw DataError("length mismatch for '" + name + "': manifest says " +
                      std::to_string(length) + " bytes, shape needs " +
                      std::to_string(numel * sizeof(Scalar)));
    }
    if (offset != expected_offset || offset + length > blob.size()) {
      throw DataError("length mismatch for '" + name +
                      "': weights.bin is truncated or misaligned");
    }
    std::vector<Scalar> data(numel);
    for (std::uint64_t i = 0; i < numel; ++i) {
      Scalar v;
      std::memcpy(&v, blob.data() + offset + i * sizeof(Scalar), sizeof v);
      data[i] = to_little_endian(v);
    }
    ckpt.tensors.emplace_back(
        name, Tensor::from_data(std::move(shape), std::move(data), true));
    expected_offset = offset + length;
  }
  if (expected_offset != blob.size()) {
    throw DataError("length mismatch: weights.bin has " +
                    std::to_string(blob.size()) + " bytes, manifest covers " +
                    std::to_string(expected_offset));
  }
  return ckpt;
}

Checkpoint checkpoint_from_model(const Transformer& model) {
  Checkpoint c;
  c.config = model.config();
  for (const auto& [name, t] : model.named_parameters()) {
    c.tensors.emplace_back(name, t.detach());
  }
  return c;
}

Transformer model_from_checkpoint(const Checkpoint& ckpt) {
  Transformer model(ckpt.config, 0);
  for (auto& [name, t] : model.named_parameters()) {
    const Tensor* src = ckpt.find(name);
    if (!src) throw DataError("checkpoint lacks parameter '" + name + "'");
    if (src->shape() != t.shape()) {
      throw DataError("parameter '" + name + "' has shape " +
                      shape_str(src->shape()) + ", model expects " +
                      shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(src->data().begin(), src->data().end(),
              dst.mutable_data().begin());
  }
  return model;
}

}  // namespace chamtoy

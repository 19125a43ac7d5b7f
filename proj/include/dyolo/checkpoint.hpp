#pragma once

// Checkpoint archive:
//   8-byte magic "DYOLOCKP", uint32 format version, uint64 header length,
//   JSON header, then the raw float32 blobs in header order.
// The header lists every tensor with its shape, byte offset and frozen flag,
// plus the config snapshot, training phase/epoch and RNG state. Training
// checkpoints also carry the optimizer's momentum buffers.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyolo/nn.hpp"

namespace dyolo {

inline constexpr char kCheckpointMagic[8] = {'D', 'Y', 'O', 'L', 'O', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  Shape shape;
  bool frozen = false;
  std::vector<float> data;
};

struct Checkpoint {
  // kind ("training" | "inference"), config, epoch, phase, rng, cfe_pretrained, ...
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, TensorRecord> parameters;
  std::map<std::string, TensorRecord> momentum;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters) n += t.data.size();
    return n;
  }
};

template <typename T>
void add_parameters(Checkpoint& ckpt, const ParameterList<T>& params) {
  for (const auto& p : params) {
    TensorRecord r;
    r.shape = p.tensor.shape();
    r.frozen = !p.tensor.requires_grad();
    r.data.assign(p.tensor.data().begin(), p.tensor.data().end());
    ckpt.parameters[p.name] = std::move(r);
  }
}

// Copies stored values into the given parameters; every one must be present.
template <typename T>
void load_parameters(const Checkpoint& ckpt, const ParameterList<T>& params) {
  for (const auto& p : params) {
    auto it = ckpt.parameters.find(p.name);
    if (it == ckpt.parameters.end()) throw StateError("checkpoint has no parameter '" + p.name + "'");
    if (!(it->second.shape == p.tensor.shape())) {
      throw StateError("checkpoint parameter '" + p.name + "' has shape " + it->second.shape.str() + ", model expects " +
                       p.tensor.shape().str());
    }
    auto dst = Tensor<T>(p.tensor).mutable_data();
    std::transform(it->second.data.begin(), it->second.data.end(), dst.begin(), [](float v) { return T(v); });
  }
}

namespace detail {

inline nlohmann::json tensor_index(const std::map<std::string, TensorRecord>& tensors, std::uint64_t& offset) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    out.push_back({{"name", name},
                   {"shape", {t.shape.n, t.shape.c, t.shape.h, t.shape.w}},
                   {"frozen", t.frozen},
                   {"offset", offset}});
    offset += t.data.size() * sizeof(float);
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::uint64_t offset = 0;
  nlohmann::json header = ckpt.meta;
  header["dtype"] = "f32";
  header["parameters"] = detail::tensor_index(ckpt.parameters, offset);
  header["momentum"] = detail::tensor_index(ckpt.momentum, offset);
  const std::string text = header.dump();

  // Write to a sibling temp file first so readers never see a partial archive.
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + tmp);
    const std::uint64_t len = text.size();
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* group : {&ckpt.parameters, &ckpt.momentum})
      for (const auto& [name, t] : *group)
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out) throw IoError("save_checkpoint: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("save_checkpoint: cannot move checkpoint into place: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw ValidationError("load_checkpoint: " + path.string() + " is not a checkpoint");
  }
  if (version != kCheckpointVersion) {
    throw ValidationError("load_checkpoint: unsupported format version " + std::to_string(version));
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Checkpoint ckpt;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("load_checkpoint: bad header: ") + e.what());
  }
  const auto blob_start = in.tellg();
  auto read_group = [&](const nlohmann::json& index, std::map<std::string, TensorRecord>& into) {
    for (const auto& e : index) {
      TensorRecord r;
      const auto s = e.at("shape");
      r.shape = Shape{s[0].get<int>(), s[1].get<int>(), s[2].get<int>(), s[3].get<int>()};
      r.frozen = e.at("frozen").get<bool>();
      r.data.resize(r.shape.numel());
      in.seekg(blob_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
      in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(float)));
      if (!in) throw ValidationError("load_checkpoint: truncated data for " + e.at("name").get<std::string>());
      into[e.at("name").get<std::string>()] = std::move(r);
    }
  };
  read_group(header.at("parameters"), ckpt.parameters);
  read_group(header.at("momentum"), ckpt.momentum);
  header.erase("parameters");
  header.erase("momentum");
  header.erase("dtype");
  ckpt.meta = std::move(header);
  return ckpt;
}

}  // namespace dyolo

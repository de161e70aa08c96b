#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffx/module.hpp"

namespace diffx {

/// Binary checkpoint:
///   8 bytes  magic "DIFFXCKP"
///   u32      format version
///   u64      header length, then a JSON header
///            {"kind", "config", "meta", "tensors": [{"name", "shape"}]}
///   raw float32 data of every tensor, in header order.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  template <class T>
  void add_module(const Module<T>& m, const std::string& prefix) {
    for (const auto& [name, p] : m.named_parameters()) tensors.emplace_back(prefix + name, p.value().template cast<float>());
  }

  /// Copies tensors named prefix + parameter name into the module. Every
  /// parameter must be present with the same shape.
  template <class T>
  void load_module(const Module<T>& m, const std::string& prefix) const {
    for (auto& [name, p] : m.named_parameters()) {
      const Tensor<float>* t = find(prefix + name);
      if (!t) throw CheckpointError(kind + " checkpoint has no tensor '" + prefix + name + "'");
      if (t->shape() != p.shape())
        throw CheckpointError("geometry mismatch for '" + prefix + name + "': checkpoint " + shape_str(t->shape()) +
                              ", model " + shape_str(p.shape()));
      Var<T> dst = p;
      dst.mutable_value() = t->template cast<T>();
    }
  }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header = {{"kind", ck.kind}, {"config", ck.config}, {"meta", ck.meta}, {"tensors", nlohmann::json::array()}};
  for (const auto& [name, t] : ck.tensors) header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  const std::string h = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write("DIFFXCKP", 8);
    const uint32_t v = Checkpoint::kVersion;
    const uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [_, t] : ck.tensors)
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  uint32_t version = 0;
  uint64_t len = 0;
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "DIFFXCKP", 8) != 0) throw CheckpointError(path.string() + " is not a checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in) throw CheckpointError("truncated checkpoint " + path.string());
  if (version != Checkpoint::kVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
  if (len > (uint64_t{1} << 32)) throw CheckpointError("corrupt checkpoint header in " + path.string());
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError("truncated checkpoint " + path.string());
  Checkpoint ck;
  try {
    auto header = nlohmann::json::parse(h);
    ck.kind = header.at("kind").get<std::string>();
    ck.config = header.at("config");
    ck.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      Tensor<float> x(t.at("shape").get<Shape>());
      in.read(reinterpret_cast<char*>(x.data()), static_cast<std::streamsize>(x.numel() * sizeof(float)));
      if (!in) throw CheckpointError("truncated checkpoint " + path.string());
      ck.tensors.emplace_back(t.at("name").get<std::string>(), std::move(x));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  if (!expected_kind.empty() && ck.kind != expected_kind)
    throw CheckpointError(path.string() + " is a '" + ck.kind + "' checkpoint, expected '" + expected_kind + "'");
  return ck;
}

}  // namespace diffx

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bbta/common.hpp"
#include "bbta/net.hpp"
#include "bbta/prompt.hpp"
#include "bbta/tensor.hpp"

namespace bbta {

// Versioned checkpoint container shared by net weights, prompts, and dataset
// caches: a JSON manifest (kind, seed, shapes, payload hash) followed by raw
// little-endian float64 tensor payloads.
//
//   magic "BBTACKPT" | u32 version | u32 manifest_len | manifest JSON |
//   per tensor: raw f64 data in manifest order
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  std::uint64_t seed = 0;
  nlohmann::json meta;  // kind-specific scalars (widths, dims, ...)
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, Tensor t) { tensors.emplace_back(name, std::move(t)); }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw ConfigError("Checkpoint: missing tensor '" + name + "'");
  }

  std::uint64_t payload_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : tensors) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
    }
    return h;
  }

  void save(const std::string& path) const {
    nlohmann::json manifest;
    manifest["kind"] = kind;
    manifest["seed"] = seed;
    manifest["meta"] = meta;
    manifest["hash"] = hex64(payload_hash());
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& [name, t] : tensors)
      shapes.push_back({{"name", name}, {"shape", t.shape}});
    manifest["tensors"] = shapes;
    const std::string mstr = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("Checkpoint: cannot write " + path);
    out.write("BBTACKPT", 8);
    write_u32(out, kVersion);
    write_u32(out, static_cast<std::uint32_t>(mstr.size()));
    out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& [name, t] : tensors)
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!out) throw ConfigError("Checkpoint: write failed for " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("Checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "BBTACKPT", 8) != 0)
      throw ConfigError("Checkpoint: bad magic in " + path);
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
      throw ConfigError("Checkpoint: unsupported version in " + path);
    const std::uint32_t mlen = read_u32(in);
    std::string mstr(mlen, '\0');
    in.read(mstr.data(), mlen);
    nlohmann::json manifest = nlohmann::json::parse(mstr);

    Checkpoint ck;
    ck.kind = manifest.at("kind").get<std::string>();
    ck.seed = manifest.at("seed").get<std::uint64_t>();
    ck.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
      Tensor t(entry.at("shape").get<std::vector<int>>());
      in.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
      ck.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    if (!in) throw ConfigError("Checkpoint: truncated payload in " + path);
    if (hex64(ck.payload_hash()) != manifest.at("hash").get<std::string>())
      throw ConfigError("Checkpoint: payload hash mismatch in " + path);
    return ck;
  }

 private:
  static void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static std::uint32_t read_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
  }
};

inline void save_net(const MlpNet& net, const std::string& path) {
  Checkpoint ck;
  ck.kind = "net";
  ck.seed = net.init_seed;
  ck.meta["input_dim"] = net.input_dim;
  ck.meta["class_count"] = net.class_count;
  ck.meta["hidden"] = net.hidden_widths();
  int li = 0;
  for (const auto& l : net.layers) {
    const std::string p = "layer" + std::to_string(li++);
    ck.add(p + ".weight", l.weight);
    ck.add(p + ".bias", l.bias);
    ck.add(p + ".ln_gain", l.ln_gain);
    ck.add(p + ".ln_shift", l.ln_shift);
  }
  ck.add("head.weight", net.head_weight);
  ck.add("head.bias", net.head_bias);
  ck.save(path);
}

inline MlpNet load_net(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind != "net") throw ConfigError("load_net: checkpoint kind is not 'net'");
  MlpNet net;
  net.input_dim = ck.meta.at("input_dim").get<int>();
  net.class_count = ck.meta.at("class_count").get<int>();
  net.init_seed = ck.seed;
  const auto hidden = ck.meta.at("hidden").get<std::vector<int>>();
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::string p = "layer" + std::to_string(i);
    MlpNet::HiddenLayer l;
    l.weight = ck.get(p + ".weight");
    l.bias = ck.get(p + ".bias");
    l.ln_gain = ck.get(p + ".ln_gain");
    l.ln_shift = ck.get(p + ".ln_shift");
    net.layers.push_back(std::move(l));
  }
  net.head_weight = ck.get("head.weight");
  net.head_bias = ck.get("head.bias");
  return net;
}

inline void save_prompt(const FramePrompt& prompt, const std::string& path,
                        std::uint64_t seed = 0) {
  Checkpoint ck;
  ck.kind = "prompt";
  ck.seed = seed;
  ck.meta["h"] = prompt.h;
  ck.meta["w"] = prompt.w;
  ck.meta["c"] = prompt.c;
  ck.meta["f"] = prompt.f;
  ck.add("params", Tensor({prompt.param_count()}, prompt.params));
  ck.save(path);
}

inline FramePrompt load_prompt(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  if (ck.kind != "prompt") throw ConfigError("load_prompt: checkpoint kind is not 'prompt'");
  FramePrompt p(ck.meta.at("h").get<int>(), ck.meta.at("w").get<int>(),
                ck.meta.at("c").get<int>(), ck.meta.at("f").get<int>());
  p.params = ck.get("params").data;
  return p;
}

}  // namespace bbta

// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_CHECKPOINT_HPP_
#define DGTSE_CHECKPOINT_HPP_

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/serialize.h>

#include "dgtse/common.hpp"

namespace dgtse {

// Versioned checkpoint archive. Layout:
//   magic "DGTSECKP", u32 version,
//   u64 header length, header JSON (kind, config, meta),
//   u64 tensor count, per tensor: name, dtype tag, shape, raw bytes,
//   u64 optimizer blob length, blob (a torch serialize archive; may be 0).
// Tensors are written sorted by name, on CPU, contiguous, so equal weights
// always produce byte-identical files and content digests are meaningful.

struct Checkpoint {
  nlohmann::json header;
  std::map<std::string, torch::Tensor> tensors;
  std::string optimizer_blob;
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'D', 'G', 'T', 'S', 'E', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

inline void put_u32(std::ostream& s, uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
               static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  s.write(b, 4);
}
inline void put_u64(std::ostream& s, uint64_t v) {
  put_u32(s, static_cast<uint32_t>(v));
  put_u32(s, static_cast<uint32_t>(v >> 32));
}
inline uint32_t get_u32(std::istream& s) {
  unsigned char b[4];
  s.read(reinterpret_cast<char*>(b), 4);
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
inline uint64_t get_u64(std::istream& s) {
  uint64_t lo = get_u32(s);
  return lo | (static_cast<uint64_t>(get_u32(s)) << 32);
}

inline uint8_t dtype_tag(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat: return 0;
    case torch::kDouble: return 1;
    case torch::kLong: return 2;
    default: throw ConfigError("checkpoint: unsupported tensor dtype");
  }
}
inline torch::ScalarType tag_dtype(uint8_t tag) {
  switch (tag) {
    case 0: return torch::kFloat;
    case 1: return torch::kDouble;
    case 2: return torch::kLong;
    default: throw DataError("checkpoint: unknown dtype tag");
  }
}

}  // namespace ckpt_detail

inline std::map<std::string, torch::Tensor> named_state(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& p : m.named_parameters()) out[p.key()] = p.value();
  for (const auto& b : m.named_buffers()) out[b.key()] = b.value();
  return out;
}

// Order-stable content digest of a module's parameters and buffers.
inline uint64_t module_digest(torch::nn::Module& m) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : named_state(m)) {
    h = fnv1a64(name.data(), name.size(), h);
    h = tensor_digest(t, h);
  }
  return h;
}

inline void save_checkpoint(const std::string& path, const nlohmann::json& header,
                            const std::map<std::string, torch::Tensor>& tensors,
                            const std::string& optimizer_blob = {}) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open " + path);
  f.write(ckpt_detail::kMagic, 8);
  ckpt_detail::put_u32(f, ckpt_detail::kVersion);
  const std::string head = header.dump();
  ckpt_detail::put_u64(f, head.size());
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  ckpt_detail::put_u64(f, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().contiguous().cpu();
    ckpt_detail::put_u32(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    f.put(static_cast<char>(ckpt_detail::dtype_tag(t.scalar_type())));
    ckpt_detail::put_u32(f, static_cast<uint32_t>(t.dim()));
    for (int64_t d = 0; d < t.dim(); ++d)
      ckpt_detail::put_u64(f, static_cast<uint64_t>(t.size(d)));
    const uint64_t nbytes = t.numel() * t.element_size();
    ckpt_detail::put_u64(f, nbytes);
    f.write(static_cast<const char*>(t.const_data_ptr()),
            static_cast<std::streamsize>(nbytes));
  }
  ckpt_detail::put_u64(f, optimizer_blob.size());
  f.write(optimizer_blob.data(),
          static_cast<std::streamsize>(optimizer_blob.size()));
  if (!f) throw DataError("checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, ckpt_detail::kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  if (ckpt_detail::get_u32(f) != ckpt_detail::kVersion)
    throw DataError("checkpoint: unsupported version in " + path);

  Checkpoint ck;
  std::string head(ckpt_detail::get_u64(f), '\0');
  f.read(head.data(), static_cast<std::streamsize>(head.size()));
  ck.header = nlohmann::json::parse(head, nullptr, false);
  if (ck.header.is_discarded()) throw DataError("checkpoint: bad header in " + path);

  const uint64_t n = ckpt_detail::get_u64(f);
  for (uint64_t i = 0; i < n && f; ++i) {
    std::string name(ckpt_detail::get_u32(f), '\0');
    f.read(name.data(), static_cast<std::streamsize>(name.size()));
    auto dtype = ckpt_detail::tag_dtype(static_cast<uint8_t>(f.get()));
    std::vector<int64_t> shape(ckpt_detail::get_u32(f));
    for (auto& d : shape) d = static_cast<int64_t>(ckpt_detail::get_u64(f));
    const uint64_t nbytes = ckpt_detail::get_u64(f);
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (static_cast<uint64_t>(t.numel() * t.element_size()) != nbytes)
      throw DataError("checkpoint: tensor size mismatch for " + name);
    f.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    ck.tensors[name] = t;
  }
  ck.optimizer_blob.resize(ckpt_detail::get_u64(f));
  f.read(ck.optimizer_blob.data(),
         static_cast<std::streamsize>(ck.optimizer_blob.size()));
  if (!f) throw DataError("checkpoint: truncated file " + path);
  return ck;
}

// Copies checkpoint tensors into a module by name; the name sets must match
// exactly.
inline void load_into_module(const Checkpoint& ck, torch::nn::Module& m) {
  torch::NoGradGuard ng;
  auto state = named_state(m);
  if (state.size() != ck.tensors.size())
    throw ConfigError("checkpoint: tensor count mismatch (" +
                      std::to_string(ck.tensors.size()) + " stored, " +
                      std::to_string(state.size()) + " in module)");
  for (auto& [name, dst] : state) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw ConfigError("checkpoint: missing tensor " + name);
    if (!dst.sizes().equals(it->second.sizes()))
      throw ConfigError("checkpoint: shape mismatch for " + name);
    dst.copy_(it->second);
  }
}

inline std::string serialize_optimizer(torch::optim::Optimizer& opt) {
  std::string blob;
  torch::serialize::OutputArchive ar;
  opt.save(ar);
  ar.save_to([&blob](const void* data, size_t n) {
    blob.append(static_cast<const char*>(data), n);
    return n;
  });
  return blob;
}

inline void restore_optimizer(const std::string& blob, torch::optim::Optimizer& opt) {
  if (blob.empty()) throw DataError("checkpoint: empty optimizer blob");
  torch::serialize::InputArchive ar;
  ar.load_from(blob.data(), blob.size());
  opt.load(ar);
}

inline uint64_t file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("digest: cannot open " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
    h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
    if (!f) break;
  }
  return h;
}

}  // namespace dgtse

#endif  // DGTSE_CHECKPOINT_HPP_

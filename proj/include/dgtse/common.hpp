// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_COMMON_HPP_
#define DGTSE_COMMON_HPP_

#include <torch/torch.h>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dgtse {

// Typed error conditions used across the library. All of them derive from
// std::runtime_error so callers can catch broadly or by kind.
struct EmptySignal : std::runtime_error {
  explicit EmptySignal(const std::string& msg) : std::runtime_error("EmptySignal: " + msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("ConfigError: " + msg) {}
};
struct DegenerateSignal : std::runtime_error {
  explicit DegenerateSignal(const std::string& msg)
      : std::runtime_error("DegenerateSignal: " + msg) {}
};
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("ShapeError: " + msg) {}
};
struct NotFitted : std::runtime_error {
  explicit NotFitted(const std::string& msg) : std::runtime_error("NotFitted: " + msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error("DataError: " + msg) {}
};

// A mono waveform. `samples` is a 1-D float (or double) tensor.
struct Waveform {
  torch::Tensor samples;
  int sample_rate = 16000;

  Waveform() = default;
  Waveform(torch::Tensor s, int rate) : samples(std::move(s)), sample_rate(rate) {}

  int64_t size() const { return samples.defined() ? samples.numel() : 0; }
  bool empty() const { return size() == 0; }
};

inline void check_waveform(const Waveform& w, const char* who) {
  if (w.empty()) throw EmptySignal(std::string(who) + ": empty waveform");
  if (w.sample_rate <= 0) throw ConfigError(std::string(who) + ": sample_rate must be > 0");
  if (w.samples.dim() != 1) throw ShapeError(std::string(who) + ": waveform must be 1-D");
}

// FNV-1a over raw bytes; used for weight digests and content hashes of
// checkpoint archives. Stable across platforms for identical bytes.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t tensor_digest(const torch::Tensor& t, uint64_t seed = 1469598103934665603ull) {
  auto c = t.detach().contiguous().cpu();
  return fnv1a64(c.data_ptr(), c.numel() * c.element_size(), seed);
}

// Derives a child seed from a base seed and a stream index. Used so that
// step k of a run can be reproduced without replaying steps 0..k-1.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  uint64_t buf[2] = {base, stream};
  return fnv1a64(buf, sizeof(buf));
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace dgtse

#endif  // DGTSE_COMMON_HPP_

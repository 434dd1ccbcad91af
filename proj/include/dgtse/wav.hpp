// Copyright 2026 The dgtse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef DGTSE_WAV_HPP_
#define DGTSE_WAV_HPP_

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dgtse/common.hpp"

namespace dgtse {

// Minimal RIFF/WAVE reader and writer. Mono only. Writing is always 16-bit
// PCM; reading accepts 16-bit PCM and 32-bit IEEE float. Resampling is out
// of scope: callers that require a fixed rate must check `sample_rate`.

namespace wav_detail {

inline void put_u32(std::vector<char>& b, uint32_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
  b.push_back(static_cast<char>((v >> 16) & 0xff));
  b.push_back(static_cast<char>((v >> 24) & 0xff));
}
inline void put_u16(std::vector<char>& b, uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline uint32_t get_u32(const char* p) {
  return static_cast<uint8_t>(p[0]) | (static_cast<uint8_t>(p[1]) << 8) |
         (static_cast<uint8_t>(p[2]) << 16) |
         (static_cast<uint32_t>(static_cast<uint8_t>(p[3])) << 24);
}
inline uint16_t get_u16(const char* p) {
  return static_cast<uint16_t>(static_cast<uint8_t>(p[0]) | (static_cast<uint8_t>(p[1]) << 8));
}

}  // namespace wav_detail

inline void write_wav(const std::string& path, const Waveform& w) {
  check_waveform(w, "write_wav");
  auto x = w.samples.detach().to(torch::kFloat).contiguous();
  const float* s = x.data_ptr<float>();
  const int64_t n = x.numel();

  std::vector<char> b;
  b.reserve(44 + 2 * n);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  wav_detail::put_u32(b, static_cast<uint32_t>(36 + 2 * n));
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  wav_detail::put_u32(b, 16);
  wav_detail::put_u16(b, 1);  // PCM
  wav_detail::put_u16(b, 1);  // mono
  wav_detail::put_u32(b, static_cast<uint32_t>(w.sample_rate));
  wav_detail::put_u32(b, static_cast<uint32_t>(w.sample_rate * 2));
  wav_detail::put_u16(b, 2);
  wav_detail::put_u16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  wav_detail::put_u32(b, static_cast<uint32_t>(2 * n));
  for (int64_t i = 0; i < n; ++i) {
    float v = s[i];
    if (v > 1.f) v = 1.f;
    if (v < -1.f) v = -1.f;
    auto q = static_cast<int16_t>(std::lrintf(v * 32767.f));
    wav_detail::put_u16(b, static_cast<uint16_t>(q));
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_wav: cannot open " + path);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!f) throw DataError("write_wav: short write to " + path);
}

// Reads header only; returns (sample_rate, n_samples) without decoding data.
inline std::pair<int, int64_t> read_wav_info(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_wav: cannot open " + path);
  char hdr[12];
  f.read(hdr, 12);
  if (!f || std::memcmp(hdr, "RIFF", 4) != 0 || std::memcmp(hdr + 8, "WAVE", 4) != 0)
    throw DataError("read_wav: not a RIFF/WAVE file: " + path);

  int rate = 0;
  uint16_t format = 0, channels = 0, bits = 0;
  int64_t data_bytes = -1;
  char ck[8];
  while (f.read(ck, 8)) {
    uint32_t sz = wav_detail::get_u32(ck + 4);
    if (std::memcmp(ck, "fmt ", 4) == 0) {
      std::vector<char> fmt(sz);
      f.read(fmt.data(), sz);
      if (!f || sz < 16) throw DataError("read_wav: bad fmt chunk: " + path);
      format = wav_detail::get_u16(fmt.data());
      channels = wav_detail::get_u16(fmt.data() + 2);
      rate = static_cast<int>(wav_detail::get_u32(fmt.data() + 4));
      bits = wav_detail::get_u16(fmt.data() + 14);
    } else if (std::memcmp(ck, "data", 4) == 0) {
      data_bytes = sz;
      f.seekg(sz + (sz & 1), std::ios::cur);
    } else {
      f.seekg(sz + (sz & 1), std::ios::cur);
    }
  }
  if (rate == 0 || data_bytes < 0) throw DataError("read_wav: missing fmt/data chunk: " + path);
  if (channels != 1) throw DataError("read_wav: only mono supported: " + path);
  if (!((format == 1 && bits == 16) || (format == 3 && bits == 32)))
    throw DataError("read_wav: unsupported encoding (want PCM16 or float32): " + path);
  return {rate, data_bytes / (bits / 8)};
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_wav: cannot open " + path);
  char hdr[12];
  f.read(hdr, 12);
  if (!f || std::memcmp(hdr, "RIFF", 4) != 0 || std::memcmp(hdr + 8, "WAVE", 4) != 0)
    throw DataError("read_wav: not a RIFF/WAVE file: " + path);

  int rate = 0;
  uint16_t format = 0, channels = 0, bits = 0;
  std::vector<char> data;
  char ck[8];
  while (f.read(ck, 8)) {
    uint32_t sz = wav_detail::get_u32(ck + 4);
    if (std::memcmp(ck, "fmt ", 4) == 0) {
      std::vector<char> fmt(sz);
      f.read(fmt.data(), sz);
      if (!f || sz < 16) throw DataError("read_wav: bad fmt chunk: " + path);
      format = wav_detail::get_u16(fmt.data());
      channels = wav_detail::get_u16(fmt.data() + 2);
      rate = static_cast<int>(wav_detail::get_u32(fmt.data() + 4));
      bits = wav_detail::get_u16(fmt.data() + 14);
    } else if (std::memcmp(ck, "data", 4) == 0) {
      data.resize(sz);
      f.read(data.data(), sz);
      if (!f) throw DataError("read_wav: truncated data chunk: " + path);
    } else {
      f.seekg(sz + (sz & 1), std::ios::cur);
    }
  }
  if (rate == 0 || data.empty()) throw DataError("read_wav: missing fmt/data chunk: " + path);
  if (channels != 1) throw DataError("read_wav: only mono supported: " + path);

  torch::Tensor out;
  if (format == 1 && bits == 16) {
    int64_t n = static_cast<int64_t>(data.size()) / 2;
    out = torch::empty({n}, torch::kFloat);
    float* d = out.data_ptr<float>();
    for (int64_t i = 0; i < n; ++i) {
      int16_t q;
      std::memcpy(&q, data.data() + 2 * i, 2);
      d[i] = static_cast<float>(q) / 32768.f;
    }
  } else if (format == 3 && bits == 32) {
    int64_t n = static_cast<int64_t>(data.size()) / 4;
    out = torch::empty({n}, torch::kFloat);
    std::memcpy(out.data_ptr<float>(), data.data(), static_cast<size_t>(4 * n));
  } else {
    throw DataError("read_wav: unsupported encoding (want PCM16 or float32): " + path);
  }
  return Waveform(out, rate);
}

}  // namespace dgtse

#endif  // DGTSE_WAV_HPP_

#pragma once

// Minimal RIFF/WAVE codec: decodes PCM16 and float32 (mono or stereo,
// averaged to mono), encodes PCM16 mono.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "slcn/tensor.hpp"  // Error

namespace slcn {

struct Waveform {
  std::vector<float> samples;  // mono, [-1,1]-ish, finite
  int sample_rate = 0;
};

namespace detail {

inline std::uint32_t rd_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) |
         (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

inline std::uint16_t rd_u16(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

inline bool tag_is(const std::vector<std::uint8_t>& b, std::size_t off, const char* tag) {
  return std::memcmp(b.data() + off, tag, 4) == 0;
}

}  // namespace detail

inline Waveform decode_wav(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || !detail::tag_is(bytes, 0, "RIFF") || !detail::tag_is(bytes, 8, "WAVE"))
    throw Error("decode_wav: not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t format_tag = 0, channels = 0, bits = 0;
  std::uint32_t sample_rate = 0;
  std::size_t data_off = 0, data_size = 0;
  bool have_data = false;

  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    std::uint32_t chunk_size = detail::rd_u32(bytes, off + 4);
    std::size_t body = off + 8;
    if (detail::tag_is(bytes, off, "fmt ")) {
      if (chunk_size < 16 || body + 16 > bytes.size()) throw Error("decode_wav: truncated fmt chunk");
      format_tag = detail::rd_u16(bytes, body + 0);
      channels = detail::rd_u16(bytes, body + 2);
      sample_rate = detail::rd_u32(bytes, body + 4);
      bits = detail::rd_u16(bytes, body + 14);
      have_fmt = true;
    } else if (detail::tag_is(bytes, off, "data")) {
      data_off = body;
      data_size = chunk_size;
      have_data = true;
    }
    off = body + chunk_size + (chunk_size & 1);  // chunks are word-aligned
  }

  if (!have_fmt) throw Error("decode_wav: missing fmt chunk");
  if (!have_data) throw Error("decode_wav: missing data chunk");
  if (format_tag != 1 && format_tag != 3)
    throw Error("decode_wav: unsupported format tag " + std::to_string(format_tag));
  if (format_tag == 1 && bits != 16)
    throw Error("decode_wav: unsupported bit depth " + std::to_string(bits) + " for PCM");
  if (format_tag == 3 && bits != 32)
    throw Error("decode_wav: unsupported bit depth " + std::to_string(bits) + " for float");
  if (channels != 1 && channels != 2)
    throw Error("decode_wav: unsupported channel count " + std::to_string(channels));
  if (sample_rate == 0) throw Error("decode_wav: zero sample rate");

  std::size_t bytes_per = bits / 8u;
  std::size_t frame_bytes = bytes_per * channels;
  if (data_off + data_size > bytes.size() || data_size % frame_bytes != 0)
    throw Error("decode_wav: truncated data chunk");
  std::size_t frames = data_size / frame_bytes;

  Waveform wave;
  wave.sample_rate = static_cast<int>(sample_rate);
  wave.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    float acc = 0.0f;
    for (std::uint16_t c = 0; c < channels; ++c) {
      std::size_t p = data_off + f * frame_bytes + c * bytes_per;
      float v;
      if (format_tag == 1) {
        std::int16_t s = static_cast<std::int16_t>(detail::rd_u16(bytes, p));
        v = static_cast<float>(s) / 32768.0f;
      } else {
        std::uint32_t u = detail::rd_u32(bytes, p);
        std::memcpy(&v, &u, 4);
      }
      acc += v;
    }
    float sample = acc / static_cast<float>(channels);
    if (!std::isfinite(sample)) throw Error("decode_wav: non-finite sample");
    wave.samples[f] = sample;
  }
  return wave;
}

inline Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_wav: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_wav(bytes);
  } catch (const Error& e) {
    throw Error(std::string(e.what()) + " ('" + path + "')");
  }
}

/// Mono PCM16 encoding; samples scale by 32768 and clamp into the int16
/// range. A decode round trip is within half a quantization step except at
/// the positive rail, where clamping 1.0 to 32767 costs one full step.
inline std::vector<std::uint8_t> encode_wav_pcm16(const std::vector<float>& samples,
                                                  int sample_rate) {
  if (sample_rate < 1) throw Error("encode_wav: sample rate must be >= 1");
  std::size_t n = samples.size();
  std::size_t data_size = n * 2;
  std::vector<std::uint8_t> out(44 + data_size);

  auto wr_u32 = [&out](std::size_t off, std::uint32_t v) {
    out[off] = static_cast<std::uint8_t>(v);
    out[off + 1] = static_cast<std::uint8_t>(v >> 8);
    out[off + 2] = static_cast<std::uint8_t>(v >> 16);
    out[off + 3] = static_cast<std::uint8_t>(v >> 24);
  };
  auto wr_u16 = [&out](std::size_t off, std::uint16_t v) {
    out[off] = static_cast<std::uint8_t>(v);
    out[off + 1] = static_cast<std::uint8_t>(v >> 8);
  };

  std::memcpy(out.data(), "RIFF", 4);
  wr_u32(4, static_cast<std::uint32_t>(36 + data_size));
  std::memcpy(out.data() + 8, "WAVE", 4);
  std::memcpy(out.data() + 12, "fmt ", 4);
  wr_u32(16, 16);
  wr_u16(20, 1);  // PCM
  wr_u16(22, 1);  // mono
  wr_u32(24, static_cast<std::uint32_t>(sample_rate));
  wr_u32(28, static_cast<std::uint32_t>(sample_rate) * 2);
  wr_u16(32, 2);
  wr_u16(34, 16);
  std::memcpy(out.data() + 36, "data", 4);
  wr_u32(40, static_cast<std::uint32_t>(data_size));

  for (std::size_t i = 0; i < n; ++i) {
    float v = samples[i];
    if (!std::isfinite(v)) throw Error("encode_wav: non-finite sample");
    v = std::min(1.0f, std::max(-1.0f, v));
    long s = std::lround(static_cast<double>(v) * 32768.0);
    s = std::min(32767L, std::max(-32768L, s));
    wr_u16(44 + i * 2, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
  }
  return out;
}

inline void save_wav(const std::string& path, const std::vector<float>& samples, int sample_rate) {
  auto bytes = encode_wav_pcm16(samples, sample_rate);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_wav: cannot open '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("save_wav: write failed for '" + path + "'");
}

}  // namespace slcn

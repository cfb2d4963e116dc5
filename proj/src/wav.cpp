#include "aver/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

#include "aver/errors.hpp"

namespace aver {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[at])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + 1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + 2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + 3])) << 24);
}

std::uint16_t get_u16(const std::string& s, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(s[at]) |
                                    (static_cast<unsigned char>(s[at + 1]) << 8));
}

}  // namespace

std::int16_t quantize_pcm16(float x) {
  const float clamped = std::clamp(x, -1.0f, 1.0f);
  const long v = std::lround(static_cast<double>(clamped) * 32767.0);
  return static_cast<std::int16_t>(std::clamp(v, -32767L, 32767L));
}

void write_wav(const std::filesystem::path& path, const std::vector<float>& samples,
               int sample_rate) {
  require(sample_rate > 0, "write_wav: sample rate must be positive");
  require(!samples.empty(), "write_wav: refusing to write an empty signal");

  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  put_u32(out, 36 + data_bytes);
  out += "WAVE";
  out += "fmt ";
  put_u32(out, 16);
  put_u16(out, 1);  // PCM
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<std::uint32_t>(sample_rate));
  put_u32(out, static_cast<std::uint32_t>(sample_rate) * 2);  // byte rate
  put_u16(out, 2);                                            // block align
  put_u16(out, 16);                                           // bits per sample
  out += "data";
  put_u32(out, data_bytes);
  for (float s : samples) {
    const std::int16_t q = quantize_pcm16(s);
    put_u16(out, static_cast<std::uint16_t>(q));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail_io("write_wav: cannot open ", path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail_io("write_wav: short write to ", path.string());
}

WavData read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_io("read_wav: cannot open ", path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0) {
    fail_io("read_wav: ", path.string(), " is not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  int sample_rate = 0;
  std::size_t at = 12;
  while (at + 8 <= bytes.size()) {
    const std::string id = bytes.substr(at, 4);
    const std::uint32_t size = get_u32(bytes, at + 4);
    const std::size_t body = at + 8;
    if (body + size > bytes.size()) {
      fail_io("read_wav: chunk '", id, "' in ", path.string(), " is truncated");
    }
    if (id == "fmt ") {
      if (size < 16) fail_io("read_wav: fmt chunk too small in ", path.string());
      const std::uint16_t codec = get_u16(bytes, body);
      const std::uint16_t channels = get_u16(bytes, body + 2);
      const std::uint16_t bits = get_u16(bytes, body + 14);
      if (codec != 1) fail_io("read_wav: only PCM is supported, got codec ", codec);
      if (channels != 1) fail_io("read_wav: only mono is supported, got ", channels, " channels");
      if (bits != 16) fail_io("read_wav: only 16-bit samples are supported, got ", bits);
      sample_rate = static_cast<int>(get_u32(bytes, body + 4));
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) fail_io("read_wav: data chunk before fmt in ", path.string());
      if (size % 2 != 0) fail_io("read_wav: odd data size in ", path.string());
      WavData w;
      w.sample_rate = sample_rate;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const std::int16_t s = static_cast<std::int16_t>(get_u16(bytes, body + 2 * i));
        w.samples[i] = static_cast<float>(s) / 32767.0f;
      }
      return w;
    }
    // Chunks are word aligned; odd sizes carry one pad byte.
    at = body + size + (size % 2);
  }
  fail_io("read_wav: no data chunk found in ", path.string());
}

}  // namespace aver

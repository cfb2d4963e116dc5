#pragma once

// Mono 16-bit PCM WAV read/write. Quantization is deterministic: writing the
// same float signal always produces the same bytes.

#include <cstdint>
#include <filesystem>
#include <vector>

namespace aver {

struct WavData {
  int sample_rate = 0;
  std::vector<float> samples;  // in [-1, 1]
};

// Writes a canonical 44-byte-header PCM16 mono file. Samples are clamped to
// [-1, 1] and quantized with round-half-away-from-zero to 16 bits.
void write_wav(const std::filesystem::path& path, const std::vector<float>& samples,
               int sample_rate);

// Reads a PCM16 mono file; unknown RIFF chunks before the data chunk are
// skipped. Anything else (stereo input, other codecs, truncation) is an error.
WavData read_wav(const std::filesystem::path& path);

// Quantization used by write_wav, exposed so callers can predict the stored
// value of a sample.
std::int16_t quantize_pcm16(float x);

}  // namespace aver

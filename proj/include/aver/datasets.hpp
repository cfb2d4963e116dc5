#pragma once

// Synthetic data generators. Everything is a pure function of a seed and an
// index: samples are regenerated on demand instead of being stored, and the
// audio-visual clips persist only their latent affect traces (plus rendered
// waveforms, since the audio path consumes files).
//
// Face images are oriented gratings under a Gaussian envelope. The affect
// class of a face is its orientation bucket, so labels are recoverable from
// pixels but not linearly so (the phase is random).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aver/rng.hpp"
#include "aver/tensor.hpp"

namespace aver {

// ---------------------------------------------------------------------------
// gratings
// ---------------------------------------------------------------------------

constexpr int kAffectClasses = 8;

struct GratingParams {
  float theta = 0.0f;       // orientation, radians
  float freq = 3.0f;        // cycles across the image
  float phase = 0.0f;       // radians
  float brightness = 1.0f;  // cosine amplitude, [0, 1]
};

// Noise-free render: brightness * cos(2*pi*freq*(x cos t + y sin t)/S + phase)
// under a Gaussian envelope with sigma = 0.4 * S, coordinates centered.
// Returns [1, S, S] with values in [-1, 1].
Tensor render_grating(const GratingParams& p, int size);

// Class k occupies orientations [k * 22.5, k * 22.5 + 11) degrees, so buckets
// are separated by gaps and never overlap.
GratingParams sample_grating_for_class(int label, Rng& rng);
GratingParams sample_grating_unlabeled(Rng& rng);

// ---------------------------------------------------------------------------
// face datasets
// ---------------------------------------------------------------------------

struct FaceSample {
  Tensor image;  // [1, S, S]
  int label = 0;
};

class FaceDataset {
 public:
  FaceDataset(std::uint64_t seed, int size, int image_size = 32, float noise_sigma = 0.1f);

  int size() const { return size_; }
  int image_size() const { return image_size_; }
  FaceSample sample(int index) const;

 private:
  std::uint64_t seed_;
  int size_;
  int image_size_;
  float noise_sigma_;
};

struct TripletSample {
  Tensor images;       // [3, 1, S, S]
  int odd = 0;         // position of the odd-class image
  int shared_label = 0;
  int odd_label = 0;
};

class TripletDataset {
 public:
  TripletDataset(std::uint64_t seed, int size, int image_size = 32, float noise_sigma = 0.1f);

  int size() const { return size_; }
  int image_size() const { return image_size_; }
  TripletSample sample(int index) const;

 private:
  std::uint64_t seed_;
  int size_;
  int image_size_;
  float noise_sigma_;
};

class UnlabeledDataset {
 public:
  UnlabeledDataset(std::uint64_t seed, int size, int image_size = 32, float noise_sigma = 0.1f);

  int size() const { return size_; }
  int image_size() const { return image_size_; }
  Tensor sample(int index) const;  // [1, S, S]

 private:
  std::uint64_t seed_;
  int size_;
  int image_size_;
  float noise_sigma_;
};

// Stacks [1,S,S] images into a batch [N,1,S,S].
Tensor stack_images(const std::vector<Tensor>& images);

// Concatenates equal-shaped [k,1,S,S] groups along axis 0 (triplet batches).
Tensor concat_image_groups(const std::vector<Tensor>& groups);

// ---------------------------------------------------------------------------
// audio-visual clips
// ---------------------------------------------------------------------------

struct AvDatasetConfig {
  std::uint64_t seed = 404;
  int clips = 64;
  int frames = 750;        // per clip, on the video grid
  int fps = 25;
  int sample_rate = 16000;
  int image_size = 32;
};

// Latent state of one clip: smoothed random-walk affect traces on the video
// frame grid. Audio and frames are derived views of these traces.
struct AvClip {
  std::uint64_t seed = 0;  // dataset master seed, not per clip
  int index = 0;
  int fps = 25;
  int sample_rate = 16000;
  std::vector<float> valence;  // [frames], in [-1, 1]
  std::vector<float> arousal;  // [frames], in [-1, 1]
};

AvClip make_av_clip(const AvDatasetConfig& cfg, int index);

// Sine carrier whose pitch follows valence (200..500 Hz) and whose amplitude
// follows arousal (0.1..0.5), with 20 dB SNR white noise. frames * rate / fps
// samples, clipped to [-1, 1].
std::vector<float> render_av_audio(const AvClip& clip);

// One video frame: a grating whose orientation follows valence (15..165
// degrees) and whose brightness follows arousal (0.3..1.0); roughly 10% of
// frames are dropped to all-zero. Pure in (clip.seed, clip.index, frame).
Tensor render_av_frame(const AvClip& clip, int image_size, int frame);

// Mean affect over a frame window [begin, end): the regression target for a
// clip or a fusion window.
float mean_valence(const AvClip& clip, int begin, int end);
float mean_arousal(const AvClip& clip, int begin, int end);

// ---------------------------------------------------------------------------
// splits and persistence
// ---------------------------------------------------------------------------

struct IndexRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
};

// 70/15/15 contiguous split of [0, n); name is "train", "dev" or "test".
IndexRange split_range(int n, const std::string& name);

// Layout under dir: manifest.json, clip_NNNN.json, clip_NNNN.wav.
void save_av_dataset(const std::filesystem::path& dir, const AvDatasetConfig& cfg);
AvDatasetConfig load_av_manifest(const std::filesystem::path& dir);
AvClip load_av_clip(const std::filesystem::path& dir, int index);
std::filesystem::path av_wav_path(const std::filesystem::path& dir, int index);

}  // namespace aver

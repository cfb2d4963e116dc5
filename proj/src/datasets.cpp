#include "aver/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "aver/errors.hpp"
#include "aver/wav.hpp"

namespace aver {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Fork tags for the per-clip generator tree. Each aspect of a clip draws from
// its own stream, so frames can be regenerated without replaying the audio.
constexpr std::uint64_t kTracesStream = 1;
constexpr std::uint64_t kAudioStream = 2;
constexpr std::uint64_t kVisualStream = 3;
constexpr std::uint64_t kFrameTagBase = 1000;

float clip_unit(double v) { return static_cast<float>(std::clamp(v, -1.0, 1.0)); }

Rng clip_base_rng(std::uint64_t seed, int index) {
  return Rng(seed).fork(static_cast<std::uint64_t>(index));
}

void add_noise_and_clip(std::vector<float>& pixels, Rng& rng, float sigma) {
  for (float& p : pixels) p = clip_unit(p + sigma * rng.normal());
}

}  // namespace

// ---------------------------------------------------------------------------
// gratings
// ---------------------------------------------------------------------------

Tensor render_grating(const GratingParams& p, int size) {
  require(size >= 2, "render_grating: size must be >= 2, got ", size);
  const double center = (size - 1) / 2.0;
  const double sigma = 0.4 * size;
  const double inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
  const double wave = 2.0 * kPi * p.freq / size;
  const double ct = std::cos(static_cast<double>(p.theta));
  const double st = std::sin(static_cast<double>(p.theta));
  std::vector<float> pixels(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < size; ++y) {
    const double v = y - center;
    for (int x = 0; x < size; ++x) {
      const double u = x - center;
      const double carrier = std::cos(wave * (u * ct + v * st) + p.phase);
      const double envelope = std::exp(-(u * u + v * v) * inv_two_sigma_sq);
      pixels[static_cast<std::size_t>(y) * size + x] =
          static_cast<float>(p.brightness * carrier * envelope);
    }
  }
  return Tensor({1, size, size}, std::move(pixels));
}

GratingParams sample_grating_for_class(int label, Rng& rng) {
  require(label >= 0 && label < kAffectClasses, "sample_grating_for_class: label ", label,
          " outside [0, ", kAffectClasses, ")");
  // 22.5-degree buckets with an 11-degree occupied band leave a guard gap
  // between neighboring classes.
  const double bucket = 180.0 / kAffectClasses;
  const double theta_deg = label * bucket + rng.uniform(0.0, 11.0);
  GratingParams p;
  p.theta = static_cast<float>(theta_deg * kPi / 180.0);
  p.freq = static_cast<float>(rng.uniform(2.0, 5.0));
  p.phase = static_cast<float>(rng.uniform(0.0, 2.0 * kPi));
  p.brightness = static_cast<float>(rng.uniform(0.5, 1.0));
  return p;
}

GratingParams sample_grating_unlabeled(Rng& rng) {
  GratingParams p;
  p.theta = static_cast<float>(rng.uniform(0.0, kPi));
  p.freq = static_cast<float>(rng.uniform(2.0, 5.0));
  p.phase = static_cast<float>(rng.uniform(0.0, 2.0 * kPi));
  p.brightness = static_cast<float>(rng.uniform(0.5, 1.0));
  return p;
}

// ---------------------------------------------------------------------------
// face datasets
// ---------------------------------------------------------------------------

FaceDataset::FaceDataset(std::uint64_t seed, int size, int image_size, float noise_sigma)
    : seed_(seed), size_(size), image_size_(image_size), noise_sigma_(noise_sigma) {
  require(size >= 1, "FaceDataset: size must be >= 1, got ", size);
}

FaceSample FaceDataset::sample(int index) const {
  require(index >= 0 && index < size_, "FaceDataset: index ", index, " outside [0, ", size_, ")");
  Rng rng = Rng(seed_).fork(static_cast<std::uint64_t>(index));
  FaceSample s;
  s.label = static_cast<int>(rng.uniform_index(kAffectClasses));
  const GratingParams p = sample_grating_for_class(s.label, rng);
  Tensor image = render_grating(p, image_size_);
  std::vector<float> pixels = image.data();
  add_noise_and_clip(pixels, rng, noise_sigma_);
  s.image = Tensor(image.shape(), std::move(pixels));
  return s;
}

TripletDataset::TripletDataset(std::uint64_t seed, int size, int image_size, float noise_sigma)
    : seed_(seed), size_(size), image_size_(image_size), noise_sigma_(noise_sigma) {
  require(size >= 1, "TripletDataset: size must be >= 1, got ", size);
}

TripletSample TripletDataset::sample(int index) const {
  require(index >= 0 && index < size_, "TripletDataset: index ", index, " outside [0, ", size_,
          ")");
  Rng rng = Rng(seed_).fork(static_cast<std::uint64_t>(index));
  TripletSample s;
  s.shared_label = static_cast<int>(rng.uniform_index(kAffectClasses));
  s.odd_label = static_cast<int>(
      (s.shared_label + 1 + rng.uniform_index(kAffectClasses - 1)) % kAffectClasses);
  s.odd = static_cast<int>(rng.uniform_index(3));

  const std::size_t plane = static_cast<std::size_t>(image_size_) * image_size_;
  std::vector<float> pixels(3 * plane);
  for (int slot = 0; slot < 3; ++slot) {
    const int label = slot == s.odd ? s.odd_label : s.shared_label;
    const GratingParams p = sample_grating_for_class(label, rng);
    Tensor image = render_grating(p, image_size_);
    std::vector<float> noisy = image.data();
    add_noise_and_clip(noisy, rng, noise_sigma_);
    std::copy(noisy.begin(), noisy.end(), pixels.begin() + static_cast<std::ptrdiff_t>(slot * plane));
  }
  s.images = Tensor({3, 1, image_size_, image_size_}, std::move(pixels));
  return s;
}

UnlabeledDataset::UnlabeledDataset(std::uint64_t seed, int size, int image_size, float noise_sigma)
    : seed_(seed), size_(size), image_size_(image_size), noise_sigma_(noise_sigma) {
  require(size >= 1, "UnlabeledDataset: size must be >= 1, got ", size);
}

Tensor UnlabeledDataset::sample(int index) const {
  require(index >= 0 && index < size_, "UnlabeledDataset: index ", index, " outside [0, ", size_,
          ")");
  Rng rng = Rng(seed_).fork(static_cast<std::uint64_t>(index));
  const GratingParams p = sample_grating_unlabeled(rng);
  Tensor image = render_grating(p, image_size_);
  std::vector<float> pixels = image.data();
  add_noise_and_clip(pixels, rng, noise_sigma_);
  return Tensor(image.shape(), std::move(pixels));
}

Tensor stack_images(const std::vector<Tensor>& images) {
  require(!images.empty(), "stack_images: empty batch");
  const std::vector<int>& shape = images.front().shape();
  require(shape.size() == 3, "stack_images: images must be [1,S,S], got ", shape_str(shape));
  std::vector<float> out;
  out.reserve(images.size() * images.front().numel());
  for (const Tensor& img : images) {
    require(img.shape() == shape, "stack_images: shape mismatch, ", shape_str(img.shape()),
            " vs ", shape_str(shape));
    out.insert(out.end(), img.data().begin(), img.data().end());
  }
  return Tensor({static_cast<int>(images.size()), shape[0], shape[1], shape[2]}, std::move(out));
}

Tensor concat_image_groups(const std::vector<Tensor>& groups) {
  require(!groups.empty(), "concat_image_groups: empty batch");
  const std::vector<int>& shape = groups.front().shape();
  require(shape.size() == 4, "concat_image_groups: groups must be [k,1,S,S], got ",
          shape_str(shape));
  std::vector<float> out;
  out.reserve(groups.size() * groups.front().numel());
  int rows = 0;
  for (const Tensor& g : groups) {
    require(g.shape() == shape, "concat_image_groups: shape mismatch, ", shape_str(g.shape()),
            " vs ", shape_str(shape));
    out.insert(out.end(), g.data().begin(), g.data().end());
    rows += g.dim(0);
  }
  return Tensor({rows, shape[1], shape[2], shape[3]}, std::move(out));
}

// ---------------------------------------------------------------------------
// audio-visual clips
// ---------------------------------------------------------------------------

AvClip make_av_clip(const AvDatasetConfig& cfg, int index) {
  require(index >= 0 && index < cfg.clips, "make_av_clip: index ", index, " outside [0, ",
          cfg.clips, ")");
  require(cfg.frames >= 1, "make_av_clip: frames must be >= 1");
  Rng traces = clip_base_rng(cfg.seed, index).fork(kTracesStream);

  const int n = cfg.frames;
  std::vector<double> raw_v(static_cast<std::size_t>(n)), raw_a(static_cast<std::size_t>(n));
  raw_v[0] = traces.uniform(-0.5, 0.5);
  raw_a[0] = traces.uniform(-0.5, 0.5);
  for (int t = 1; t < n; ++t) {
    raw_v[static_cast<std::size_t>(t)] =
        std::clamp(raw_v[static_cast<std::size_t>(t - 1)] + 0.05 * traces.normal(), -1.0, 1.0);
    raw_a[static_cast<std::size_t>(t)] =
        std::clamp(raw_a[static_cast<std::size_t>(t - 1)] + 0.05 * traces.normal(), -1.0, 1.0);
  }

  // Centered 25-frame moving average; the window shrinks at the edges.
  AvClip clip;
  clip.seed = cfg.seed;
  clip.index = index;
  clip.fps = cfg.fps;
  clip.sample_rate = cfg.sample_rate;
  clip.valence.resize(static_cast<std::size_t>(n));
  clip.arousal.resize(static_cast<std::size_t>(n));
  const int half = 12;
  for (int t = 0; t < n; ++t) {
    const int lo = std::max(0, t - half);
    const int hi = std::min(n - 1, t + half);
    double sv = 0.0, sa = 0.0;
    for (int u = lo; u <= hi; ++u) {
      sv += raw_v[static_cast<std::size_t>(u)];
      sa += raw_a[static_cast<std::size_t>(u)];
    }
    const double m = hi - lo + 1;
    clip.valence[static_cast<std::size_t>(t)] = static_cast<float>(sv / m);
    clip.arousal[static_cast<std::size_t>(t)] = static_cast<float>(sa / m);
  }
  return clip;
}

namespace {

double audio_amp(float arousal) { return 0.1 + 0.4 * (arousal + 1.0) / 2.0; }
double audio_f0(float valence) { return 200.0 + 150.0 * (valence + 1.0); }

}  // namespace

std::vector<float> render_av_audio(const AvClip& clip) {
  const int frames = static_cast<int>(clip.valence.size());
  require(frames >= 1 && clip.arousal.size() == clip.valence.size(),
          "render_av_audio: clip has no traces");
  require(clip.sample_rate % clip.fps == 0, "render_av_audio: sample rate ", clip.sample_rate,
          " not divisible by fps ", clip.fps);
  const int spf = clip.sample_rate / clip.fps;
  const std::size_t n = static_cast<std::size_t>(frames) * static_cast<std::size_t>(spf);

  std::vector<double> clean(n);
  double phase = 0.0;
  double energy = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t frame = t / static_cast<std::size_t>(spf);
    phase += 2.0 * kPi * audio_f0(clip.valence[frame]) / clip.sample_rate;
    if (phase > 2.0 * kPi) phase -= 2.0 * kPi;
    clean[t] = audio_amp(clip.arousal[frame]) * std::sin(phase);
    energy += clean[t] * clean[t];
  }
  const double rms = std::sqrt(energy / static_cast<double>(n));

  // 20 dB signal-to-noise: noise std is a tenth of the signal rms.
  const double noise_std = rms / 10.0;
  Rng noise = clip_base_rng(clip.seed, clip.index).fork(kAudioStream);
  std::vector<float> out(n);
  for (std::size_t t = 0; t < n; ++t) {
    out[t] = clip_unit(clean[t] + noise_std * noise.normal());
  }
  return out;
}

Tensor render_av_frame(const AvClip& clip, int image_size, int frame) {
  const int frames = static_cast<int>(clip.valence.size());
  require(frame >= 0 && frame < frames, "render_av_frame: frame ", frame, " outside [0, ", frames,
          ")");
  Rng visual = clip_base_rng(clip.seed, clip.index).fork(kVisualStream);
  const double freq = visual.uniform(2.0, 5.0);
  const double phase0 = visual.uniform(0.0, 2.0 * kPi);
  const double dphase = visual.uniform(0.0, 0.2);

  Rng frame_rng = visual.fork(kFrameTagBase + static_cast<std::uint64_t>(frame));
  if (frame_rng.uniform() < 0.1) {
    return Tensor::zeros({1, image_size, image_size});  // dropped frame
  }

  const float v = clip.valence[static_cast<std::size_t>(frame)];
  const float a = clip.arousal[static_cast<std::size_t>(frame)];
  GratingParams p;
  p.theta = static_cast<float>(kPi / 2.0 + v * (75.0 * kPi / 180.0));  // 15..165 degrees
  p.freq = static_cast<float>(freq);
  p.phase = static_cast<float>(std::fmod(phase0 + frame * dphase, 2.0 * kPi));
  p.brightness = static_cast<float>(0.3 + 0.7 * (a + 1.0) / 2.0);
  Tensor image = render_grating(p, image_size);
  std::vector<float> pixels = image.data();
  add_noise_and_clip(pixels, frame_rng, 0.05f);
  return Tensor(image.shape(), std::move(pixels));
}

namespace {

float mean_over(const std::vector<float>& trace, int begin, int end) {
  require(begin >= 0 && begin < end && end <= static_cast<int>(trace.size()),
          "mean over trace: window [", begin, ", ", end, ") outside [0, ", trace.size(), ")");
  double s = 0.0;
  for (int t = begin; t < end; ++t) s += trace[static_cast<std::size_t>(t)];
  return static_cast<float>(s / (end - begin));
}

}  // namespace

float mean_valence(const AvClip& clip, int begin, int end) {
  return mean_over(clip.valence, begin, end);
}

float mean_arousal(const AvClip& clip, int begin, int end) {
  return mean_over(clip.arousal, begin, end);
}

// ---------------------------------------------------------------------------
// splits and persistence
// ---------------------------------------------------------------------------

IndexRange split_range(int n, const std::string& name) {
  require(n >= 7, "split_range: need at least 7 items for non-empty splits, got ", n);
  const int train_end = (n * 7) / 10;
  const int dev_end = train_end + (n * 15) / 100;
  if (name == "train") return {0, train_end};
  if (name == "dev") return {train_end, dev_end};
  if (name == "test") return {dev_end, n};
  fail("split_range: unknown split ", name, " (expected train, dev or test)");
}

std::filesystem::path av_wav_path(const std::filesystem::path& dir, int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "clip_%04d.wav", index);
  return dir / name;
}

namespace {

std::filesystem::path av_json_path(const std::filesystem::path& dir, int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "clip_%04d.json", index);
  return dir / name;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open ", path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail_io(path.string(), ": json parse failed: ", e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) fail_io("cannot open ", path.string(), " for writing");
  out << j.dump(2) << "\n";
  if (!out) fail_io("write failed for ", path.string());
}

}  // namespace

void save_av_dataset(const std::filesystem::path& dir, const AvDatasetConfig& cfg) {
  require(cfg.clips >= 1, "save_av_dataset: clips must be >= 1");
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["v"] = 1;
  manifest["seed"] = cfg.seed;
  manifest["clips"] = cfg.clips;
  manifest["frames"] = cfg.frames;
  manifest["fps"] = cfg.fps;
  manifest["sample_rate"] = cfg.sample_rate;
  manifest["image_size"] = cfg.image_size;
  write_json_file(dir / "manifest.json", manifest);

  for (int i = 0; i < cfg.clips; ++i) {
    const AvClip clip = make_av_clip(cfg, i);
    write_wav(av_wav_path(dir, i), render_av_audio(clip), cfg.sample_rate);
    nlohmann::json j;
    j["v"] = 1;
    j["seed"] = clip.seed;
    j["index"] = clip.index;
    j["fps"] = clip.fps;
    j["sample_rate"] = clip.sample_rate;
    j["valence"] = clip.valence;
    j["arousal"] = clip.arousal;
    write_json_file(av_json_path(dir, i), j);
  }
}

AvDatasetConfig load_av_manifest(const std::filesystem::path& dir) {
  const nlohmann::json j = read_json_file(dir / "manifest.json");
  try {
    require(j.at("v").get<int>() == 1, "manifest version mismatch");
    AvDatasetConfig cfg;
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.clips = j.at("clips").get<int>();
    cfg.frames = j.at("frames").get<int>();
    cfg.fps = j.at("fps").get<int>();
    cfg.sample_rate = j.at("sample_rate").get<int>();
    cfg.image_size = j.at("image_size").get<int>();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    fail_io((dir / "manifest.json").string(), ": ", e.what());
  }
}

AvClip load_av_clip(const std::filesystem::path& dir, int index) {
  const std::filesystem::path path = av_json_path(dir, index);
  const nlohmann::json j = read_json_file(path);
  try {
    require(j.at("v").get<int>() == 1, "clip version mismatch");
    AvClip clip;
    clip.seed = j.at("seed").get<std::uint64_t>();
    clip.index = j.at("index").get<int>();
    clip.fps = j.at("fps").get<int>();
    clip.sample_rate = j.at("sample_rate").get<int>();
    clip.valence = j.at("valence").get<std::vector<float>>();
    clip.arousal = j.at("arousal").get<std::vector<float>>();
    require(!clip.valence.empty() && clip.valence.size() == clip.arousal.size(),
            "clip traces are empty or mismatched");
    return clip;
  } catch (const nlohmann::json::exception& e) {
    fail_io(path.string(), ": ", e.what());
  }
}

}  // namespace aver

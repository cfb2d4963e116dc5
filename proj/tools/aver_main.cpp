// Command-line front end: dataset generation, mel caching, the four training
// stages, checkpoint evaluation, and the config reference. One invocation is
// one process; resolved config plus seed fully determine every output.

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aver/checkpoint.hpp"
#include "aver/config.hpp"
#include "aver/datasets.hpp"
#include "aver/dsp.hpp"
#include "aver/errors.hpp"
#include "aver/models.hpp"
#include "aver/rng.hpp"
#include "aver/training.hpp"
#include "aver/wav.hpp"

namespace {

using namespace aver;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// files and hashing
// ---------------------------------------------------------------------------

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) fail_io("cannot open ", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) fail_io("cannot write ", path.string());
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

ordered_json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in.good()) fail_io("cannot open ", path.string());
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail_io("cannot parse ", path.string(), ": ", e.what());
  }
}

void write_json_file(const fs::path& path, const ordered_json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

// Sidecar describing what a checkpoint contains and how to rebuild its net.
fs::path sidecar_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".meta.json"); }

void ensure_output_dir(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_empty(out) && !force)
    fail_io("output directory ", out.string(), " is not empty; pass --force to overwrite");
  fs::create_directories(out);
}

std::string clip_mel_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%04d.mel", index);
  return buf;
}

// ---------------------------------------------------------------------------
// config schemas, one per training stage
// ---------------------------------------------------------------------------

Config teacher_schema() {
  Config c;
  c.declare("seed", "1", "weight init and batch order stream");
  c.declare("data_seed", "11", "dataset contents stream");
  c.declare("steps", "3000", "optimizer steps");
  c.declare("triplets_per_batch", "8", "triplets per expression batch (3 images each)");
  c.declare("cls_batch", "16", "images per classification batch");
  c.declare("alpha", "1", "classification loss weight");
  c.declare("margin", "0.2", "triplet hinge margin");
  c.declare("lr", "0.01", "SGD learning rate");
  c.declare("momentum", "0.9", "SGD momentum");
  c.declare("embed_dim", "128", "face embedding width");
  c.declare("image_size", "32", "synthetic image side length");
  c.declare("train_faces", "2048", "labeled training faces");
  c.declare("train_triplets", "2048", "training triplets");
  c.declare("dev_faces", "256", "held-out faces");
  c.declare("dev_triplets", "192", "held-out triplets");
  c.declare("eval_every", "250", "steps between dev evaluations");
  c.declare("log_every", "50", "steps between train loss records");
  c.declare("restore_best", "true", "reload the best dev snapshot at the end");
  c.declare("ckpt_name", "teacher.aver", "checkpoint file name inside --out");
  return c;
}

Config student_schema() {
  Config c;
  c.declare("seed", "2", "weight init and batch order stream");
  c.declare("data_seed", "11", "dataset contents stream");
  c.declare("steps", "2000", "optimizer steps");
  c.declare("triplets_per_batch", "8", "triplets per expression batch (3 images each)");
  c.declare("cls_batch", "16", "images per classification batch");
  c.declare("unlabeled_batch", "16", "images per distillation batch");
  c.declare("alpha", "1", "classification loss weight");
  c.declare("margin", "0.2", "triplet hinge margin");
  c.declare("distill_weight", "1", "relational distillation loss weight");
  c.declare("rkd_distance", "1", "distance term weight inside the relational loss");
  c.declare("rkd_angle", "2", "angle term weight inside the relational loss");
  c.declare("use_distill", "true", "enable the relational distillation term");
  c.declare("use_unlabeled", "true", "distill on the unlabeled pool instead of the class batch");
  c.declare("lr", "0.01", "SGD learning rate");
  c.declare("momentum", "0.9", "SGD momentum");
  c.declare("embed_dim", "128", "face embedding width");
  c.declare("image_size", "32", "synthetic image side length");
  c.declare("train_faces", "2048", "labeled training faces");
  c.declare("train_triplets", "2048", "training triplets");
  c.declare("unlabeled_size", "2048", "unlabeled pool size");
  c.declare("dev_faces", "256", "held-out faces");
  c.declare("dev_triplets", "192", "held-out triplets");
  c.declare("eval_every", "250", "steps between dev evaluations");
  c.declare("log_every", "50", "steps between train loss records");
  c.declare("restore_best", "true", "reload the best dev snapshot at the end");
  c.declare("ckpt_name", "student.aver", "checkpoint file name inside --out");
  return c;
}

Config audio_schema() {
  Config c;
  c.declare("seed", "3", "weight init and batch order stream");
  c.declare("steps", "400", "optimizer steps");
  c.declare("batch", "4", "clips per batch");
  c.declare("lr", "0.0001", "Adam learning rate");
  c.declare("target", "arousal", "regression target: arousal | valence | combined");
  c.declare("eval_every", "50", "steps between dev evaluations");
  c.declare("log_every", "10", "steps between train loss records");
  c.declare("restore_best", "true", "reload the best dev snapshot at the end");
  c.declare("ckpt_name", "audio.aver", "checkpoint file name inside --out");
  return c;
}

Config fusion_schema() {
  Config c;
  c.declare("seed", "4", "weight init and batch order stream");
  c.declare("steps", "400", "optimizer steps");
  c.declare("batch", "16", "windows per batch");
  c.declare("lr", "0.001", "Adam learning rate");
  c.declare("window", "96", "window length in 40 ms frames");
  c.declare("hop", "48", "window stride in frames");
  c.declare("mask", "both", "training inputs: both | audio-only | visual-only");
  c.declare("eval_every", "50", "steps between dev evaluations");
  c.declare("log_every", "10", "steps between train loss records");
  c.declare("restore_best", "true", "reload the best dev snapshot at the end");
  c.declare("ckpt_name", "fusion.aver", "checkpoint file name inside --out");
  return c;
}

void apply_config_sources(Config& cfg, const std::string& config_path,
                          const std::vector<std::string>& sets) {
  if (!config_path.empty()) cfg.load_file(config_path);
  for (const std::string& kv : sets) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) fail("--set expects key=value, got '", kv, "'");
    cfg.set_override(kv.substr(0, eq), kv.substr(eq + 1));
  }
}

TeacherTrainConfig teacher_config_from(const Config& c) {
  TeacherTrainConfig t;
  t.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  t.data_seed = static_cast<std::uint64_t>(c.get_int("data_seed"));
  t.steps = static_cast<int>(c.get_int("steps"));
  t.triplets_per_batch = static_cast<int>(c.get_int("triplets_per_batch"));
  t.cls_batch = static_cast<int>(c.get_int("cls_batch"));
  t.alpha = static_cast<float>(c.get_double("alpha"));
  t.margin = static_cast<float>(c.get_double("margin"));
  t.lr = static_cast<float>(c.get_double("lr"));
  t.momentum = static_cast<float>(c.get_double("momentum"));
  t.embed_dim = static_cast<int>(c.get_int("embed_dim"));
  t.image_size = static_cast<int>(c.get_int("image_size"));
  t.train_faces = static_cast<int>(c.get_int("train_faces"));
  t.train_triplets = static_cast<int>(c.get_int("train_triplets"));
  t.dev_faces = static_cast<int>(c.get_int("dev_faces"));
  t.dev_triplets = static_cast<int>(c.get_int("dev_triplets"));
  t.eval_every = static_cast<int>(c.get_int("eval_every"));
  t.log_every = static_cast<int>(c.get_int("log_every"));
  t.restore_best = c.get_bool("restore_best");
  return t;
}

StudentTrainConfig student_config_from(const Config& c) {
  StudentTrainConfig s;
  s.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  s.data_seed = static_cast<std::uint64_t>(c.get_int("data_seed"));
  s.steps = static_cast<int>(c.get_int("steps"));
  s.triplets_per_batch = static_cast<int>(c.get_int("triplets_per_batch"));
  s.cls_batch = static_cast<int>(c.get_int("cls_batch"));
  s.unlabeled_batch = static_cast<int>(c.get_int("unlabeled_batch"));
  s.alpha = static_cast<float>(c.get_double("alpha"));
  s.margin = static_cast<float>(c.get_double("margin"));
  s.distill_weight = static_cast<float>(c.get_double("distill_weight"));
  s.rkd.distance = static_cast<float>(c.get_double("rkd_distance"));
  s.rkd.angle = static_cast<float>(c.get_double("rkd_angle"));
  s.use_distill = c.get_bool("use_distill");
  s.use_unlabeled = c.get_bool("use_unlabeled");
  s.lr = static_cast<float>(c.get_double("lr"));
  s.momentum = static_cast<float>(c.get_double("momentum"));
  s.embed_dim = static_cast<int>(c.get_int("embed_dim"));
  s.image_size = static_cast<int>(c.get_int("image_size"));
  s.train_faces = static_cast<int>(c.get_int("train_faces"));
  s.train_triplets = static_cast<int>(c.get_int("train_triplets"));
  s.unlabeled_size = static_cast<int>(c.get_int("unlabeled_size"));
  s.dev_faces = static_cast<int>(c.get_int("dev_faces"));
  s.dev_triplets = static_cast<int>(c.get_int("dev_triplets"));
  s.eval_every = static_cast<int>(c.get_int("eval_every"));
  s.log_every = static_cast<int>(c.get_int("log_every"));
  s.restore_best = c.get_bool("restore_best");
  return s;
}

AudioTrainConfig audio_config_from(const Config& c) {
  AudioTrainConfig a;
  a.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  a.steps = static_cast<int>(c.get_int("steps"));
  a.batch = static_cast<int>(c.get_int("batch"));
  a.lr = static_cast<float>(c.get_double("lr"));
  a.target = c.get_string("target");
  a.eval_every = static_cast<int>(c.get_int("eval_every"));
  a.log_every = static_cast<int>(c.get_int("log_every"));
  a.restore_best = c.get_bool("restore_best");
  return a;
}

FusionMask mask_from_string(const std::string& s) {
  if (s == "both") return FusionMask::kBoth;
  if (s == "audio-only") return FusionMask::kAudioOnly;
  if (s == "visual-only") return FusionMask::kVisualOnly;
  fail("unknown mask '", s, "' (use both | audio-only | visual-only)");
}

FusionTrainConfig fusion_config_from(const Config& c) {
  FusionTrainConfig f;
  f.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  f.steps = static_cast<int>(c.get_int("steps"));
  f.batch = static_cast<int>(c.get_int("batch"));
  f.lr = static_cast<float>(c.get_double("lr"));
  f.train_mask = mask_from_string(c.get_string("mask"));
  f.eval_every = static_cast<int>(c.get_int("eval_every"));
  f.log_every = static_cast<int>(c.get_int("log_every"));
  f.restore_best = c.get_bool("restore_best");
  return f;
}

// ---------------------------------------------------------------------------
// checkpoint sidecars and loaders
// ---------------------------------------------------------------------------

ordered_json visual_net_meta(const VisualNetConfig& nc) {
  return ordered_json{{"image_size", nc.image_size},   {"embed_dim", nc.embed_dim},
                      {"fec_dim", nc.fec_dim},         {"affect_classes", nc.affect_classes},
                      {"distill_head", nc.distill_head}, {"distill_dim", nc.distill_dim}};
}

struct LoadedVisual {
  VisualNet net;
  ordered_json meta;
};

struct LoadedAudio {
  AudioNet net;
  ordered_json meta;
};

struct LoadedFusion {
  FusionNet net;
  ordered_json meta;
};

ordered_json read_sidecar(const fs::path& ckpt_path, const std::string& family) {
  if (!fs::exists(ckpt_path)) fail_io("checkpoint ", ckpt_path.string(), " does not exist");
  const fs::path meta = sidecar_path(ckpt_path);
  if (!fs::exists(meta)) fail_io("checkpoint sidecar ", meta.string(), " is missing");
  ordered_json j = read_json_file(meta);
  const std::string got = j.value("family", "");
  if (!family.empty() && got != family)
    fail("checkpoint ", ckpt_path.string(), " holds a '", got, "' model, expected '", family, "'");
  return j;
}

LoadedVisual load_visual(const fs::path& ckpt_path) {
  ordered_json meta = read_sidecar(ckpt_path, "visual");
  const ordered_json& n = meta.at("net");
  VisualNetConfig nc;
  nc.image_size = n.at("image_size").get<int>();
  nc.embed_dim = n.at("embed_dim").get<int>();
  nc.fec_dim = n.at("fec_dim").get<int>();
  nc.affect_classes = n.at("affect_classes").get<int>();
  nc.distill_head = n.at("distill_head").get<bool>();
  nc.distill_dim = n.at("distill_dim").get<int>();
  Rng rng(0);
  VisualNet net = VisualNet::init(nc, rng);
  net.load(load_checkpoint(ckpt_path));
  return {std::move(net), std::move(meta)};
}

LoadedAudio load_audio(const fs::path& ckpt_path) {
  ordered_json meta = read_sidecar(ckpt_path, "audio");
  const ordered_json& n = meta.at("net");
  AudioNetConfig nc;
  nc.mel_bands = n.at("mel_bands").get<int>();
  nc.embed_dim = n.at("embed_dim").get<int>();
  Rng rng(0);
  AudioNet net = AudioNet::init(nc, rng);
  net.load(load_checkpoint(ckpt_path));
  return {std::move(net), std::move(meta)};
}

LoadedFusion load_fusion(const fs::path& ckpt_path) {
  ordered_json meta = read_sidecar(ckpt_path, "fusion");
  const ordered_json& n = meta.at("net");
  FusionNetConfig nc;
  nc.feature_dim = n.at("feature_dim").get<int>();
  nc.pre_dim = n.at("pre_dim").get<int>();
  nc.steps = n.at("steps").get<int>();
  nc.hidden = n.at("hidden").get<int>();
  Rng rng(0);
  FusionNet net = FusionNet::init(nc, rng);
  net.load(load_checkpoint(ckpt_path));
  return {std::move(net), std::move(meta)};
}

void save_model_checkpoint(const fs::path& ckpt_path, const Checkpoint& ck,
                           const ordered_json& meta) {
  save_checkpoint(ckpt_path, ck);
  write_json_file(sidecar_path(ckpt_path), meta);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::uint64_t seed = 404;
  std::string out;
  int n_images = 2048;
  int n_triplets = 2048;
  int n_av = 64;
  int duration = 30;
  int image_size = 32;
  bool force = false;
};

int run_gen_data(const GenDataArgs& a) {
  const fs::path out(a.out);
  ensure_output_dir(out, a.force);

  ordered_json families;
  families["images"] = ordered_json{{"kind", "faces"},
                                    {"seed", mix64(a.seed ^ mix64(1))},
                                    {"count", a.n_images},
                                    {"image_size", a.image_size}};
  families["triplets"] = ordered_json{{"kind", "expression_triplets"},
                                      {"seed", mix64(a.seed ^ mix64(2))},
                                      {"count", a.n_triplets},
                                      {"image_size", a.image_size}};
  if (a.n_av > 0) {
    AvDatasetConfig av;
    av.seed = mix64(a.seed ^ mix64(3));
    av.clips = a.n_av;
    av.frames = a.duration * av.fps;
    av.image_size = a.image_size;
    save_av_dataset(out / "av", av);
    families["av"] = ordered_json{{"kind", "av_clips"},     {"dir", "av"},
                                  {"seed", av.seed},        {"clips", av.clips},
                                  {"duration_s", a.duration}, {"fps", av.fps},
                                  {"sample_rate", av.sample_rate}, {"image_size", av.image_size}};
  } else {
    // Keep the directory truthful to the manifest when overwriting a
    // previous generation that did include clips.
    fs::remove_all(out / "av");
    families["av"] = ordered_json{{"kind", "av_clips"}, {"clips", 0}, {"note", "omitted: --n-av 0"}};
  }

  const ordered_json manifest{{"v", 1}, {"seed", a.seed}, {"families", families}};
  write_json_file(out / "manifest.json", manifest);
  std::cout << "wrote " << (out / "manifest.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// preprocess-audio
// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string data;
  std::string cache;
};

int run_preprocess(const PreprocessArgs& a) {
  const fs::path data(a.data), cache(a.cache);
  const AvDatasetConfig av = load_av_manifest(data);
  fs::create_directories(cache);

  int computed = 0, skipped = 0;
  for (int i = 0; i < av.clips; ++i) {
    const fs::path wav_path = av_wav_path(data, i);
    const std::string digest = hex64(fnv1a64(read_file_bytes(wav_path)));
    const fs::path mel_path = cache / clip_mel_name(i);
    const fs::path meta_path = sidecar_path(mel_path);

    if (fs::exists(mel_path) && fs::exists(meta_path) &&
        read_json_file(meta_path).value("source_hash", "") == digest) {
      ++skipped;
      continue;
    }
    const WavData wav = read_wav(wav_path);
    require(wav.sample_rate == av.sample_rate, "clip ", i, ": sample rate ", wav.sample_rate,
            " does not match the manifest's ", av.sample_rate);
    const Tensor mel = mel_spectrogram(wav.samples, wav.sample_rate);
    Checkpoint ck;
    ck.add("mel", mel);
    save_checkpoint(mel_path, ck);
    write_json_file(meta_path, ordered_json{{"v", 1},
                                            {"source", wav_path.filename().string()},
                                            {"source_hash", digest},
                                            {"frames", mel.dim(0)},
                                            {"bands", mel.dim(1)}});
    ++computed;
  }
  std::cout << "mel cache: computed " << computed << ", skipped " << skipped << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainCommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  bool force = false;
};

struct StudentArgs : TrainCommonArgs {
  std::string teacher1 = "teacher1.aver";
  std::string teacher2 = "teacher2.aver";
  bool no_distill = false;
  bool no_unlabeled = false;
};

struct AudioArgs : TrainCommonArgs {
  std::string data;
  std::string cache;
};

struct FusionArgs : TrainCommonArgs {
  std::string data;
  std::string visual_ckpt;
  std::string audio_ckpt;
};

// Creates the run directory and persists the resolved config before work
// starts, so a failed run still records what it was asked to do.
fs::path open_run_dir(const TrainCommonArgs& a, const Config& cfg) {
  const fs::path out(a.out);
  ensure_output_dir(out, a.force);
  cfg.write_resolved(out / "config.resolved");
  return out;
}

int run_train_teacher(const TrainCommonArgs& a) {
  Config cfg = teacher_schema();
  apply_config_sources(cfg, a.config_path, a.sets);
  const fs::path out = open_run_dir(a, cfg);
  MetricsLogger logger(out / "metrics.jsonl");

  const TeacherTrainConfig tc = teacher_config_from(cfg);
  TeacherTrainResult r = train_teacher(tc, &logger);

  Checkpoint ck;
  r.net.save(ck);
  const fs::path ckpt = out / cfg.get_string("ckpt_name");
  const ordered_json meta{
      {"v", 1},
      {"family", "visual"},
      {"role", "teacher"},
      {"net", visual_net_meta(r.net.config())},
      {"data", ordered_json{{"data_seed", cfg.get_int("data_seed")},
                            {"train_faces", tc.train_faces},
                            {"train_triplets", tc.train_triplets},
                            {"dev_faces", tc.dev_faces},
                            {"dev_triplets", tc.dev_triplets},
                            {"margin", tc.margin}}},
      {"results", ordered_json{{"best_dev_balanced_accuracy", r.best_dev_balanced_accuracy},
                               {"best_dev_triplet_accuracy", r.best_dev_triplet_accuracy}}}};
  save_model_checkpoint(ckpt, ck, meta);
  std::cout << "teacher: best dev balanced accuracy " << r.best_dev_balanced_accuracy
            << ", triplet accuracy " << r.best_dev_triplet_accuracy << "\n"
            << "wrote " << ckpt.string() << "\n";
  return 0;
}

int run_train_student(const StudentArgs& a) {
  Config cfg = student_schema();
  apply_config_sources(cfg, a.config_path, a.sets);
  if (a.no_distill) cfg.set_override("use_distill", "false");
  if (a.no_unlabeled) cfg.set_override("use_unlabeled", "false");

  std::vector<std::string> missing;
  if (!fs::exists(a.teacher1)) missing.push_back(a.teacher1);
  if (!fs::exists(a.teacher2)) missing.push_back(a.teacher2);
  if (!missing.empty()) {
    std::string list = missing.front();
    for (std::size_t i = 1; i < missing.size(); ++i) list += ", " + missing[i];
    fail_io("train student: missing teacher checkpoint(s): ", list,
            "; train two teachers first and point --teacher1/--teacher2 at them");
  }
  LoadedVisual t1 = load_visual(a.teacher1);
  LoadedVisual t2 = load_visual(a.teacher2);

  const fs::path out = open_run_dir(a, cfg);
  MetricsLogger logger(out / "metrics.jsonl");
  const StudentTrainConfig sc = student_config_from(cfg);
  StudentTrainResult r = train_student(sc, t1.net, t2.net, &logger);

  Checkpoint ck;
  r.net.save(ck);
  const fs::path ckpt = out / cfg.get_string("ckpt_name");
  const ordered_json meta{
      {"v", 1},
      {"family", "visual"},
      {"role", "student"},
      {"net", visual_net_meta(r.net.config())},
      {"data", ordered_json{{"data_seed", cfg.get_int("data_seed")},
                            {"train_faces", sc.train_faces},
                            {"train_triplets", sc.train_triplets},
                            {"dev_faces", sc.dev_faces},
                            {"dev_triplets", sc.dev_triplets},
                            {"margin", sc.margin}}},
      {"distill", ordered_json{{"teacher1", a.teacher1},
                               {"teacher2", a.teacher2},
                               {"use_distill", sc.use_distill},
                               {"use_unlabeled", sc.use_unlabeled}}},
      {"results", ordered_json{{"best_dev_balanced_accuracy", r.best_dev_balanced_accuracy},
                               {"best_dev_triplet_accuracy", r.best_dev_triplet_accuracy}}}};
  save_model_checkpoint(ckpt, ck, meta);
  std::cout << "student: best dev balanced accuracy " << r.best_dev_balanced_accuracy
            << ", triplet accuracy " << r.best_dev_triplet_accuracy << "\n"
            << "wrote " << ckpt.string() << "\n";
  return 0;
}

AudioClipSet load_audio_set(const fs::path& data, const fs::path& cache,
                            const AvDatasetConfig& av) {
  AudioClipSet set;
  for (int i = 0; i < av.clips; ++i) {
    const fs::path mel_path = cache / clip_mel_name(i);
    if (!fs::exists(mel_path))
      fail_io("mel cache entry ", mel_path.string(), " is missing; run `aver preprocess-audio --data ",
              data.string(), " --cache ", cache.string(), "` first");
    const Checkpoint ck = load_checkpoint(mel_path);
    const Tensor& mel = ck.get("mel");
    require(mel.rank() == 2 && mel.dim(0) == av.frames,
            "mel cache entry ", mel_path.string(), " has shape ", shape_str(mel.shape()),
            ", expected [", av.frames, ", bands]; regenerate the cache");
    set.mels.push_back(mel);
    const AvClip clip = load_av_clip(data, i);
    set.arousal.push_back(mean_arousal(clip, 0, av.frames));
    set.valence.push_back(mean_valence(clip, 0, av.frames));
  }
  return set;
}

int run_train_audio(const AudioArgs& a) {
  Config cfg = audio_schema();
  apply_config_sources(cfg, a.config_path, a.sets);
  const AvDatasetConfig av = load_av_manifest(a.data);
  const AudioClipSet set = load_audio_set(a.data, a.cache, av);

  const fs::path out = open_run_dir(a, cfg);
  MetricsLogger logger(out / "metrics.jsonl");
  const AudioTrainConfig ac = audio_config_from(cfg);
  AudioTrainResult r = train_audio(ac, set, split_range(av.clips, "train"),
                                   split_range(av.clips, "dev"), &logger);

  Checkpoint ck;
  r.net.save(ck);
  const fs::path ckpt = out / cfg.get_string("ckpt_name");
  const ordered_json meta{
      {"v", 1},
      {"family", "audio"},
      {"net", ordered_json{{"mel_bands", r.net.config().mel_bands},
                           {"embed_dim", r.net.config().embed_dim}}},
      {"data", ordered_json{{"target", ac.target}, {"clips", av.clips}, {"frames", av.frames}}},
      {"results", ordered_json{{"best_dev_ccc", r.best_dev_ccc}}}};
  save_model_checkpoint(ckpt, ck, meta);
  std::cout << "audio: best dev ccc (" << ac.target << ") " << r.best_dev_ccc << "\n"
            << "wrote " << ckpt.string() << "\n";
  return 0;
}

std::vector<FusionWindow> windows_for_range(const fs::path& data, const AvDatasetConfig& av,
                                            IndexRange range, VisualNet& visual, AudioNet& audio,
                                            int window, int hop) {
  std::vector<FusionWindow> out;
  for (int i = range.begin; i < range.end; ++i) {
    const AvClip clip = load_av_clip(data, i);
    const WavData wav = read_wav(av_wav_path(data, i));
    std::vector<FusionWindow> w =
        build_fusion_windows(clip, wav.samples, visual, audio, window, hop, av.image_size);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

int run_train_fusion(const FusionArgs& a) {
  Config cfg = fusion_schema();
  apply_config_sources(cfg, a.config_path, a.sets);
  LoadedVisual visual = load_visual(a.visual_ckpt);
  LoadedAudio audio = load_audio(a.audio_ckpt);
  const AvDatasetConfig av = load_av_manifest(a.data);

  const int window = static_cast<int>(cfg.get_int("window"));
  const int hop = static_cast<int>(cfg.get_int("hop"));
  std::vector<FusionWindow> train_windows = windows_for_range(
      a.data, av, split_range(av.clips, "train"), visual.net, audio.net, window, hop);
  std::vector<FusionWindow> dev_windows = windows_for_range(
      a.data, av, split_range(av.clips, "dev"), visual.net, audio.net, window, hop);
  std::cout << "fusion: " << train_windows.size() << " train windows, " << dev_windows.size()
            << " dev windows\n";

  const fs::path out = open_run_dir(a, cfg);
  MetricsLogger logger(out / "metrics.jsonl");
  const FusionTrainConfig fc = fusion_config_from(cfg);
  FusionTrainResult r = train_fusion(fc, train_windows, dev_windows, &logger);

  Checkpoint ck;
  r.net.save(ck);
  const fs::path ckpt = out / cfg.get_string("ckpt_name");
  const ordered_json meta{
      {"v", 1},
      {"family", "fusion"},
      {"net", ordered_json{{"feature_dim", r.net.config().feature_dim},
                           {"pre_dim", r.net.config().pre_dim},
                           {"steps", r.net.config().steps},
                           {"hidden", r.net.config().hidden}}},
      {"window", ordered_json{{"window", window}, {"hop", hop}, {"mask", cfg.get_string("mask")}}},
      {"extractors", ordered_json{{"visual", a.visual_ckpt}, {"audio", a.audio_ckpt}}},
      {"results", ordered_json{{"best_dev_ccc_arousal", r.best_dev.ccc_arousal},
                               {"best_dev_ccc_valence", r.best_dev.ccc_valence}}}};
  save_model_checkpoint(ckpt, ck, meta);
  std::cout << "fusion: best dev ccc arousal " << r.best_dev.ccc_arousal << ", valence "
            << r.best_dev.ccc_valence << "\n"
            << "wrote " << ckpt.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string cache;
  std::string split = "dev";
  bool grid = false;
  std::string csv;
  std::string report;
  std::string visual_ckpt;
  std::string audio_ckpt;
};

void eval_visual(const EvalArgs& a, ordered_json& report) {
  LoadedVisual lv = load_visual(a.ckpt);
  require(a.split == "train" || a.split == "dev",
          "visual checkpoints have train and dev splits only, got '", a.split, "'");
  const ordered_json& d = lv.meta.at("data");
  const VisualDataSplits splits = make_visual_splits(
      d.at("data_seed").get<std::uint64_t>(), d.at("train_faces").get<int>(),
      d.at("train_triplets").get<int>(), d.at("dev_faces").get<int>(),
      d.at("dev_triplets").get<int>(), lv.net.config().image_size);
  const FaceDataset& faces = a.split == "train" ? splits.train_faces : splits.dev_faces;
  const TripletDataset& triplets = a.split == "train" ? splits.train_triplets : splits.dev_triplets;

  const VisualEvalReport ev = evaluate_visual(lv.net, faces, triplets);
  const VisualLossReport losses =
      visual_dataset_losses(lv.net, faces, triplets, d.at("margin").get<float>());
  report["split"] = a.split;
  report["balanced_accuracy"] = ev.balanced_accuracy;
  report["triplet_accuracy"] = ev.triplet_accuracy;
  report["fec_loss"] = losses.fec_loss;
  report["affect_loss"] = losses.affect_loss;
}

void eval_audio(const EvalArgs& a, ordered_json& report) {
  if (a.data.empty() || a.cache.empty()) fail("eval: audio checkpoints need --data and --cache");
  LoadedAudio la = load_audio(a.ckpt);
  const AvDatasetConfig av = load_av_manifest(a.data);
  const AudioClipSet set = load_audio_set(a.data, a.cache, av);
  const IndexRange range = split_range(av.clips, a.split);
  report["split"] = a.split;
  report["ccc_arousal"] = evaluate_audio_ccc(la.net, set, range, "arousal");
  report["ccc_valence"] = evaluate_audio_ccc(la.net, set, range, "valence");
}

void eval_fusion(const EvalArgs& a, ordered_json& report) {
  if (a.data.empty()) fail("eval: fusion checkpoints need --data");
  LoadedFusion lf = load_fusion(a.ckpt);
  const std::string visual_path =
      !a.visual_ckpt.empty() ? a.visual_ckpt
                             : lf.meta.at("extractors").at("visual").get<std::string>();
  const std::string audio_path = !a.audio_ckpt.empty()
                                     ? a.audio_ckpt
                                     : lf.meta.at("extractors").at("audio").get<std::string>();
  LoadedVisual visual = load_visual(visual_path);
  LoadedAudio audio = load_audio(audio_path);
  const AvDatasetConfig av = load_av_manifest(a.data);
  const int window = lf.meta.at("window").at("window").get<int>();
  const int hop = lf.meta.at("window").at("hop").get<int>();

  const std::array<std::pair<FusionMask, const char*>, 3> rows = {
      {{FusionMask::kVisualOnly, "visual-only"},
       {FusionMask::kAudioOnly, "audio-only"},
       {FusionMask::kBoth, "audio-visual"}}};

  if (a.grid) {
    const std::array<const char*, 2> splits = {"dev", "test"};
    std::array<std::vector<FusionWindow>, 2> windows;
    for (std::size_t s = 0; s < splits.size(); ++s)
      windows[s] = windows_for_range(a.data, av, split_range(av.clips, splits[s]), visual.net,
                                     audio.net, window, hop);
    ordered_json grid = ordered_json::array();
    std::array<std::array<FusionEvalReport, 2>, 3> cells;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t s = 0; s < splits.size(); ++s) {
        cells[r][s] = evaluate_fusion(lf.net, windows[s], rows[r].first);
        grid.push_back(ordered_json{{"mask", rows[r].second},
                                    {"split", splits[s]},
                                    {"ccc_arousal", cells[r][s].ccc_arousal},
                                    {"ccc_valence", cells[r][s].ccc_valence}});
      }
    }
    report["grid"] = grid;
    if (!a.csv.empty()) {
      std::ostringstream csv;
      csv << "mask,dev_arousal,dev_valence,test_arousal,test_valence\n";
      for (std::size_t r = 0; r < rows.size(); ++r) {
        csv << rows[r].second << "," << cells[r][0].ccc_arousal << "," << cells[r][0].ccc_valence
            << "," << cells[r][1].ccc_arousal << "," << cells[r][1].ccc_valence << "\n";
      }
      write_text_file(a.csv, csv.str());
    }
  } else {
    const std::vector<FusionWindow> windows = windows_for_range(
        a.data, av, split_range(av.clips, a.split), visual.net, audio.net, window, hop);
    report["split"] = a.split;
    ordered_json results = ordered_json::array();
    for (const auto& [mask, label] : rows) {
      const FusionEvalReport rep = evaluate_fusion(lf.net, windows, mask);
      results.push_back(ordered_json{
          {"mask", label}, {"ccc_arousal", rep.ccc_arousal}, {"ccc_valence", rep.ccc_valence}});
    }
    report["results"] = results;
  }
}

int run_eval(const EvalArgs& a) {
  const ordered_json meta = read_sidecar(a.ckpt, "");
  const std::string family = meta.value("family", "");
  ordered_json report;
  report["v"] = 1;
  report["checkpoint"] = a.ckpt;
  report["family"] = family;
  if (family == "visual") {
    eval_visual(a, report);
  } else if (family == "audio") {
    eval_audio(a, report);
  } else if (family == "fusion") {
    eval_fusion(a, report);
  } else {
    fail("checkpoint ", a.ckpt, " has unknown family '", family, "'");
  }
  const std::string text = report.dump(2) + "\n";
  std::cout << text;
  if (!a.report.empty()) write_text_file(a.report, text);
  return 0;
}

// ---------------------------------------------------------------------------
// config-reference
// ---------------------------------------------------------------------------

int run_config_reference(const std::string& out_path) {
  std::ostringstream os;
  os << "# train teacher\n"
     << teacher_schema().reference() << "\n# train student\n"
     << student_schema().reference() << "\n# train audio\n"
     << audio_schema().reference() << "\n# train fusion\n"
     << fusion_schema().reference();
  std::cout << os.str();
  if (!out_path.empty()) write_text_file(out_path, os.str());
  return 0;
}

void add_train_common(CLI::App* cmd, TrainCommonArgs& args) {
  cmd->add_option("--config", args.config_path, "key = value config file");
  cmd->add_option("--set", args.sets, "config override, key=value (repeatable)");
  cmd->add_option("--out", args.out, "run output directory")->required();
  cmd->add_flag("--force", args.force, "overwrite a non-empty run directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic audio-visual affect pipeline"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic dataset families");
  gen_cmd->add_option("--seed", gen.seed, "master seed");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--n-images", gen.n_images, "labeled face count");
  gen_cmd->add_option("--n-triplets", gen.n_triplets, "expression triplet count");
  gen_cmd->add_option("--n-av", gen.n_av, "audio-visual clip count (0 omits the family)");
  gen_cmd->add_option("--duration", gen.duration, "clip length in seconds");
  gen_cmd->add_option("--image-size", gen.image_size, "image side length");
  gen_cmd->add_flag("--force", gen.force, "overwrite a non-empty output directory");

  PreprocessArgs pre;
  CLI::App* pre_cmd = app.add_subcommand("preprocess-audio", "Build the mel-spectrogram cache");
  pre_cmd->add_option("--data", pre.data, "audio-visual dataset directory")->required();
  pre_cmd->add_option("--cache", pre.cache, "cache directory")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "Train one pipeline stage");
  train_cmd->require_subcommand(1);

  TrainCommonArgs teacher_args;
  CLI::App* teacher_cmd = train_cmd->add_subcommand("teacher", "Train a visual teacher");
  add_train_common(teacher_cmd, teacher_args);

  StudentArgs student_args;
  CLI::App* student_cmd =
      train_cmd->add_subcommand("student", "Distill a visual student from two teachers");
  add_train_common(student_cmd, student_args);
  student_cmd->add_option("--teacher1", student_args.teacher1, "first teacher checkpoint");
  student_cmd->add_option("--teacher2", student_args.teacher2, "second teacher checkpoint");
  student_cmd->add_flag("--no-distill", student_args.no_distill,
                        "ablation: drop the relational distillation term");
  student_cmd->add_flag("--no-unlabeled", student_args.no_unlabeled,
                        "ablation: distill on the class batch instead of the unlabeled pool");

  AudioArgs audio_args;
  CLI::App* audio_cmd = train_cmd->add_subcommand("audio", "Fine-tune the audio embedding");
  add_train_common(audio_cmd, audio_args);
  audio_cmd->add_option("--data", audio_args.data, "audio-visual dataset directory")->required();
  audio_cmd->add_option("--cache", audio_args.cache, "mel cache directory")->required();

  FusionArgs fusion_args;
  CLI::App* fusion_cmd = train_cmd->add_subcommand("fusion", "Train the audio-visual fusion head");
  add_train_common(fusion_cmd, fusion_args);
  fusion_cmd->add_option("--data", fusion_args.data, "audio-visual dataset directory")->required();
  fusion_cmd->add_option("--visual-ckpt", fusion_args.visual_ckpt, "frozen visual extractor")
      ->required();
  fusion_cmd->add_option("--audio-ckpt", fusion_args.audio_ckpt, "frozen audio extractor")
      ->required();

  EvalArgs eval_args;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", eval_args.ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", eval_args.data, "audio-visual dataset directory");
  eval_cmd->add_option("--cache", eval_args.cache, "mel cache directory");
  eval_cmd->add_option("--split", eval_args.split, "train | dev | test");
  eval_cmd->add_flag("--grid", eval_args.grid,
                     "fusion only: emit the 12-cell mask x split x dimension grid");
  eval_cmd->add_option("--csv", eval_args.csv, "fusion grid CSV output path");
  eval_cmd->add_option("--report", eval_args.report, "write the JSON report here too");
  eval_cmd->add_option("--visual-ckpt", eval_args.visual_ckpt,
                       "override the visual extractor recorded in the fusion sidecar");
  eval_cmd->add_option("--audio-ckpt", eval_args.audio_ckpt,
                       "override the audio extractor recorded in the fusion sidecar");

  std::string reference_out;
  CLI::App* ref_cmd =
      app.add_subcommand("config-reference", "Print every config key with its default");
  ref_cmd->add_option("--out", reference_out, "also write the reference to a file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (pre_cmd->parsed()) return run_preprocess(pre);
    if (train_cmd->parsed()) {
      if (teacher_cmd->parsed()) return run_train_teacher(teacher_args);
      if (student_cmd->parsed()) return run_train_student(student_args);
      if (audio_cmd->parsed()) return run_train_audio(audio_args);
      if (fusion_cmd->parsed()) return run_train_fusion(fusion_args);
    }
    if (eval_cmd->parsed()) return run_eval(eval_args);
    if (ref_cmd->parsed()) return run_config_reference(reference_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#pragma once

// Training loops and evaluation reports.
//
// Every loop is seeded and single threaded: two runs from the same
// configuration produce byte-identical metrics files and checkpoints. Wall
// time is deliberately never logged for that reason.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "aver/datasets.hpp"
#include "aver/dsp.hpp"
#include "aver/losses.hpp"
#include "aver/models.hpp"
#include "aver/rng.hpp"
#include "aver/tensor.hpp"

namespace aver {

// ---------------------------------------------------------------------------
// metrics logging
// ---------------------------------------------------------------------------

// Append-style JSONL writer: one {"v":1,"event":...,"step":...,...} object
// per line, fields in the order given by the caller.
class MetricsLogger {
 public:
  explicit MetricsLogger(const std::filesystem::path& path);

  void log(const std::string& event, int step,
           const std::vector<std::pair<std::string, double>>& fields);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// batch sampling
// ---------------------------------------------------------------------------

// Cyclic epoch sampler: shuffles [0, size), yields fixed-size batches, drops
// the ragged tail and reshuffles when exhausted.
class BatchSampler {
 public:
  BatchSampler(int size, int batch, Rng rng);
  const std::vector<int>& next();

 private:
  int size_;
  int batch_;
  Rng rng_;
  std::vector<int> order_;
  std::vector<int> current_;
  int pos_ = 0;
};

// ---------------------------------------------------------------------------
// visual data splits
// ---------------------------------------------------------------------------

// The supervised splits every visual run derives from one data seed. Exposed
// so evaluation tooling can rebuild exactly the splits a stored checkpoint
// was trained and selected on.
struct VisualDataSplits {
  FaceDataset train_faces;
  TripletDataset train_triplets;
  FaceDataset dev_faces;
  TripletDataset dev_triplets;
};

VisualDataSplits make_visual_splits(std::uint64_t data_seed, int train_faces, int train_triplets,
                                    int dev_faces, int dev_triplets, int image_size);

UnlabeledDataset make_unlabeled_split(std::uint64_t data_seed, int size, int image_size);

// ---------------------------------------------------------------------------
// visual evaluation
// ---------------------------------------------------------------------------

struct VisualEvalReport {
  double balanced_accuracy = 0.0;
  double triplet_accuracy = 0.0;
  double score() const { return 0.5 * (balanced_accuracy + triplet_accuracy); }
};

VisualEvalReport evaluate_visual(VisualNet& net, const FaceDataset& faces,
                                 const TripletDataset& triplets);

// Mean losses over a whole dataset in eval mode; used to judge overfitting
// runs on their training split.
struct VisualLossReport {
  double fec_loss = 0.0;     // triplet hinge, unweighted
  double affect_loss = 0.0;  // cross entropy, unweighted
};

VisualLossReport visual_dataset_losses(VisualNet& net, const FaceDataset& faces,
                                       const TripletDataset& triplets, float margin);

// ---------------------------------------------------------------------------
// teacher training
// ---------------------------------------------------------------------------

struct TeacherTrainConfig {
  std::uint64_t seed = 1;        // weights and batch order
  std::uint64_t data_seed = 11;  // dataset contents
  int steps = 3000;
  int triplets_per_batch = 8;  // 24 images per expression batch
  int cls_batch = 16;
  float alpha = 1.0f;  // classification loss weight
  float margin = 0.2f;
  float lr = 0.01f;
  float momentum = 0.9f;
  int embed_dim = 128;
  int image_size = 32;
  int train_faces = 2048;
  int train_triplets = 2048;
  int dev_faces = 256;
  int dev_triplets = 192;
  int eval_every = 250;
  int log_every = 50;
  bool restore_best = true;  // reload the best dev snapshot at the end
};

struct TeacherTrainResult {
  VisualNet net;
  double best_dev_balanced_accuracy = 0.0;
  double best_dev_triplet_accuracy = 0.0;
  double best_dev_score = 0.0;
  VisualLossReport train_losses;  // over the full training split, eval mode
};

TeacherTrainResult train_teacher(const TeacherTrainConfig& cfg, MetricsLogger* logger);

// ---------------------------------------------------------------------------
// student distillation
// ---------------------------------------------------------------------------

struct StudentTrainConfig {
  std::uint64_t seed = 2;
  std::uint64_t data_seed = 11;
  int steps = 2000;
  int triplets_per_batch = 8;
  int cls_batch = 16;
  int unlabeled_batch = 16;
  float alpha = 1.0f;
  float margin = 0.2f;
  float distill_weight = 1.0f;  // scales the relational term
  RkdWeights rkd{};
  bool use_distill = true;    // relational term on or off
  bool use_unlabeled = true;  // distill on unlabeled images vs the class batch
  float lr = 0.01f;
  float momentum = 0.9f;
  int embed_dim = 128;
  int image_size = 32;
  int train_faces = 2048;
  int train_triplets = 2048;
  int unlabeled_size = 2048;
  int dev_faces = 256;
  int dev_triplets = 192;
  int eval_every = 250;
  int log_every = 50;
  bool restore_best = true;
};

struct StudentTrainResult {
  VisualNet net;
  double best_dev_balanced_accuracy = 0.0;
  double best_dev_triplet_accuracy = 0.0;
  double best_dev_score = 0.0;
  // Step-0 loss values before any update, for ablation equivalence checks:
  // turning distillation off must not move these.
  double first_step_fec_loss = 0.0;
  double first_step_affect_loss = 0.0;
};

// Teachers run frozen throughout; their parameters are never registered on
// any tape and their running statistics never move.
StudentTrainResult train_student(const StudentTrainConfig& cfg, VisualNet& teacher1,
                                 VisualNet& teacher2, MetricsLogger* logger);

// ---------------------------------------------------------------------------
// audio fine-tuning
// ---------------------------------------------------------------------------

// Parallel arrays over clips: one spectrogram and one affect mean per clip.
struct AudioClipSet {
  std::vector<Tensor> mels;  // each [T, bands], equal T
  std::vector<float> arousal;
  std::vector<float> valence;
};

struct AudioTrainConfig {
  std::uint64_t seed = 3;
  int steps = 400;
  int batch = 4;
  float lr = 1e-4f;  // Adam
  std::string target = "arousal";  // arousal | valence | combined
  int eval_every = 50;
  int log_every = 10;
  bool restore_best = true;
};

struct AudioTrainResult {
  AudioNet net;
  double best_dev_ccc = -1.0;
};

// CCC of clip-level predictions over the given range; "combined" averages the
// arousal and valence agreements.
double evaluate_audio_ccc(AudioNet& net, const AudioClipSet& data, IndexRange range,
                          const std::string& target);

AudioTrainResult train_audio(const AudioTrainConfig& cfg, const AudioClipSet& data,
                             IndexRange train, IndexRange dev, MetricsLogger* logger);

// ---------------------------------------------------------------------------
// fusion training
// ---------------------------------------------------------------------------

// One supervised window on the shared 40 ms grid: frozen-extractor feature
// sequences plus the window-mean affect targets.
struct FusionWindow {
  Tensor audio_seq;   // [window/8, feature_dim]
  Tensor visual_seq;  // [window, feature_dim]
  float arousal = 0.0f;
  float valence = 0.0f;
};

// Cuts one clip into hop-strided windows and runs both frozen extractors.
// The mel grid (one frame per 40 ms) aligns one-to-one with video frames.
std::vector<FusionWindow> build_fusion_windows(const AvClip& clip,
                                               const std::vector<float>& audio_samples,
                                               VisualNet& visual_extractor,
                                               AudioNet& audio_extractor, int window, int hop,
                                               int image_size, const MelConfig& mel_cfg = {});

struct FusionTrainConfig {
  std::uint64_t seed = 4;
  int steps = 400;
  int batch = 16;
  float lr = 1e-3f;  // Adam
  FusionMask train_mask = FusionMask::kBoth;
  int eval_every = 50;
  int log_every = 10;
  bool restore_best = true;
};

struct FusionEvalReport {
  double ccc_arousal = 0.0;
  double ccc_valence = 0.0;
  double score() const { return 0.5 * (ccc_arousal + ccc_valence); }
};

FusionEvalReport evaluate_fusion(FusionNet& net, const std::vector<FusionWindow>& windows,
                                 FusionMask mask);

struct FusionTrainResult {
  FusionNet net;
  FusionEvalReport best_dev;
  double best_dev_score = -1.0;
};

FusionTrainResult train_fusion(const FusionTrainConfig& cfg,
                               const std::vector<FusionWindow>& train_windows,
                               const std::vector<FusionWindow>& dev_windows,
                               MetricsLogger* logger);

}  // namespace aver

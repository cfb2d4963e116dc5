#pragma once

// Model definitions.
//
//   VisualNet  - small densely connected conv net over grayscale face crops.
//                Trunk emits a face embedding; heads emit an expression
//                embedding (unit rows), affect-class logits, and optionally a
//                distillation embedding.
//   AudioNet   - VGG-style conv stack over log-mel spectrograms with a fully
//                connected embedding tail, a tanh regression head, and a
//                per-timestep feature sequence for fusion.
//   FusionNet  - per-modality conv pre-transforms onto a shared [9, 64] grid,
//                concatenation, a two-layer LSTM, and a tanh head predicting
//                (arousal, valence).
//
// Every forward takes `track`: when true, parameters are registered as tape
// leaves (training); when false the net runs frozen and records nothing.

#include <optional>
#include <string>
#include <vector>

#include "aver/checkpoint.hpp"
#include "aver/ops.hpp"
#include "aver/rng.hpp"
#include "aver/tape.hpp"
#include "aver/tensor.hpp"

namespace aver {

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

// Bias-free convolution paired with batch norm; the conv bias would be
// cancelled by the normalization anyway. `norm_input` sizes the norm on the
// input channels for pre-activation blocks (norm, relu, conv) instead of the
// usual conv-then-norm order.
struct ConvBn {
  Tensor w;
  Tensor gamma, beta;
  BatchNormState bn;

  static ConvBn init(Rng& rng, int in_ch, int out_ch, int k, bool norm_input = false);
  void collect(std::vector<Tensor*>& params);
  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);
};

struct DenseLayer {
  Tensor w, b;

  // Kaiming for relu-fed layers, Xavier for linear/tanh heads.
  static DenseLayer init_kaiming(Rng& rng, int in, int out);
  static DenseLayer init_xavier(Rng& rng, int in, int out);
  void collect(std::vector<Tensor*>& params);
  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);
};

struct Conv1dLayer {
  Tensor w, b;
  int stride = 1, padding = 0;

  static Conv1dLayer init(Rng& rng, int in_ch, int out_ch, int k, int stride, int padding);
  void collect(std::vector<Tensor*>& params);
  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// visual net
// ---------------------------------------------------------------------------

struct VisualNetConfig {
  int image_size = 32;
  int embed_dim = 128;      // face embedding width (a larger teacher uses 256)
  int fec_dim = 32;         // expression-comparison embedding
  int affect_classes = 8;
  bool distill_head = false;
  int distill_dim = 80;
};

struct VisualOut {
  Tensor face;           // [B, embed_dim]
  Tensor fec;            // [B, fec_dim], unit rows
  Tensor affect_logits;  // [B, affect_classes]
  Tensor distill;        // [B, distill_dim] when the head exists, else empty
};

class VisualNet {
 public:
  static VisualNet init(const VisualNetConfig& cfg, Rng& rng);

  VisualOut forward(Tape& tape, const Tensor& images, Phase phase, bool track);

  // Backbone only: [B, embed_dim] face embeddings.
  Tensor embed(Tape& tape, const Tensor& images, Phase phase, bool track);

  std::vector<Tensor*> params();
  std::size_t param_count();
  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);
  const VisualNetConfig& config() const { return cfg_; }

 private:
  VisualNetConfig cfg_;
  ConvBn stem1_, stem2_;   // stride-2 3x3 convs, 1 -> 8 -> 16 channels
  ConvBn trunk_;           // 1x1, 16 -> 24
  std::vector<ConvBn> blocks_;  // five 3x3 dense blocks, growth 8
  ConvBn embed_;           // 1x1, 64 -> embed_dim
  DenseLayer fec_head_;
  DenseLayer affect_head_;
  DenseLayer distill_head_;
};

// ---------------------------------------------------------------------------
// audio net
// ---------------------------------------------------------------------------

struct AudioNetConfig {
  int mel_bands = 128;
  int embed_dim = 128;
};

struct AudioOut {
  Tensor embedding;   // [B, embed_dim]
  Tensor prediction;  // [B], tanh-bounded regression output
};

class AudioNet {
 public:
  static AudioNet init(const AudioNetConfig& cfg, Rng& rng);

  // mel: [B, T, bands] log-mel frames; three 2x2 max pools floor-halve the
  // time axis, so T >= 8 is required.
  AudioOut forward(Tape& tape, const Tensor& mel, bool track);

  // Per-timestep embeddings [B, T/8, embed_dim] sharing the clip weights:
  // frequency is pooled away and the fully connected tail runs per step.
  Tensor features_sequence(Tape& tape, const Tensor& mel, bool track);

  std::vector<Tensor*> params();
  std::size_t param_count();
  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);
  const AudioNetConfig& config() const { return cfg_; }

 private:
  Tensor conv_feature_map(Tape& tape, const Tensor& mel, bool track);

  AudioNetConfig cfg_;
  // channels 1 -> 8 -> 16 -> 32 -> 32 -> 64, 2x2 max pools after convs 0, 1, 3
  std::vector<Tensor> conv_w_;
  std::vector<Tensor> conv_b_;
  DenseLayer fc1_, fc2_, fc3_;
  DenseLayer reg_head_;
};

// ---------------------------------------------------------------------------
// fusion net
// ---------------------------------------------------------------------------

struct FusionNetConfig {
  int feature_dim = 128;   // width of both incoming feature sequences
  int pre_dim = 64;        // per-modality channels after the pre-transform
  int steps = 9;           // shared temporal grid after adaptive pooling
  int hidden = 256;        // LSTM width, two layers
};

enum class FusionMask { kBoth, kAudioOnly, kVisualOnly };

class FusionNet {
 public:
  static FusionNet init(const FusionNetConfig& cfg, Rng& rng);

  // audio_seq: [B, Ta, feature_dim], visual_seq: [B, Tv, feature_dim].
  // The mask replaces the dropped modality's input sequence with zeros.
  Tensor forward(Tape& tape, const Tensor& audio_seq, const Tensor& visual_seq, FusionMask mask,
                 bool track);  // [B, 2] (arousal, valence) in (-1, 1)

  // Pre-transform outputs [B, steps, pre_dim], exposed for shape contracts.
  Tensor audio_grid(Tape& tape, const Tensor& audio_seq, bool track);
  Tensor visual_grid(Tape& tape, const Tensor& visual_seq, bool track);

  std::vector<Tensor*> params();
  std::size_t param_count();
  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);
  const FusionNetConfig& config() const { return cfg_; }

 private:
  FusionNetConfig cfg_;
  Conv1dLayer audio_pre_;               // k3 s1 p1
  Conv1dLayer visual_pre1_, visual_pre2_;  // k5 s2 p2 then k3 s2 p1
  std::vector<LstmLayerParams> lstm_;
  DenseLayer head_;
};

// ---------------------------------------------------------------------------
// distillation target
// ---------------------------------------------------------------------------

// Concatenation of both teachers' expression embeddings and affect logits,
// each of the four segments L2-normalized on its own, giving rows of norm
// exactly 2. Computed outside any tape; the result is a constant target.
Tensor teacher_distill_target(const VisualOut& teacher_a, const VisualOut& teacher_b);

}  // namespace aver

#include "aver/models.hpp"

#include <cstddef>

#include "aver/errors.hpp"
#include "aver/init.hpp"

namespace aver {

namespace {

// Registers a parameter as a tape leaf when training; frozen nets pass their
// raw tensors through, so downstream ops record nothing for them.
Tensor maybe_leaf(Tape& tape, Tensor& p, bool track) {
  return track ? tape.leaf(p) : p;
}

void save_tensor(Checkpoint& ckpt, const std::string& name, const Tensor& t) {
  ckpt.add(name, t);
}

Tensor load_tensor(const Checkpoint& ckpt, const std::string& name, const std::vector<int>& expect) {
  const Tensor& t = ckpt.get(name);
  require(t.shape() == expect, "checkpoint entry ", name, ": expected shape ", shape_str(expect),
          ", found ", shape_str(t.shape()));
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

ConvBn ConvBn::init(Rng& rng, int in_ch, int out_ch, int k, bool norm_input) {
  require(in_ch >= 1 && out_ch >= 1 && k >= 1, "ConvBn::init: bad dims");
  const int norm_ch = norm_input ? in_ch : out_ch;
  ConvBn layer;
  layer.w = kaiming_uniform(rng, {out_ch, in_ch, k, k}, in_ch * k * k);
  layer.gamma = Tensor::full({norm_ch}, 1.0f);
  layer.beta = Tensor::zeros({norm_ch});
  layer.bn = BatchNormState(norm_ch);
  return layer;
}

void ConvBn::collect(std::vector<Tensor*>& params) {
  params.push_back(&w);
  params.push_back(&gamma);
  params.push_back(&beta);
}

void ConvBn::save(Checkpoint& ckpt, const std::string& prefix) const {
  save_tensor(ckpt, prefix + ".w", w);
  save_tensor(ckpt, prefix + ".gamma", gamma);
  save_tensor(ckpt, prefix + ".beta", beta);
  save_tensor(ckpt, prefix + ".running_mean", bn.running_mean);
  save_tensor(ckpt, prefix + ".running_var", bn.running_var);
}

void ConvBn::load(const Checkpoint& ckpt, const std::string& prefix) {
  w = load_tensor(ckpt, prefix + ".w", w.shape());
  gamma = load_tensor(ckpt, prefix + ".gamma", gamma.shape());
  beta = load_tensor(ckpt, prefix + ".beta", beta.shape());
  bn.running_mean = load_tensor(ckpt, prefix + ".running_mean", bn.running_mean.shape());
  bn.running_var = load_tensor(ckpt, prefix + ".running_var", bn.running_var.shape());
}

DenseLayer DenseLayer::init_kaiming(Rng& rng, int in, int out) {
  require(in >= 1 && out >= 1, "DenseLayer::init: bad dims");
  return {kaiming_uniform(rng, {in, out}, in), Tensor::zeros({out})};
}

DenseLayer DenseLayer::init_xavier(Rng& rng, int in, int out) {
  require(in >= 1 && out >= 1, "DenseLayer::init: bad dims");
  return {xavier_uniform(rng, {in, out}, in, out), Tensor::zeros({out})};
}

void DenseLayer::collect(std::vector<Tensor*>& params) {
  params.push_back(&w);
  params.push_back(&b);
}

void DenseLayer::save(Checkpoint& ckpt, const std::string& prefix) const {
  save_tensor(ckpt, prefix + ".w", w);
  save_tensor(ckpt, prefix + ".b", b);
}

void DenseLayer::load(const Checkpoint& ckpt, const std::string& prefix) {
  w = load_tensor(ckpt, prefix + ".w", w.shape());
  b = load_tensor(ckpt, prefix + ".b", b.shape());
}

Conv1dLayer Conv1dLayer::init(Rng& rng, int in_ch, int out_ch, int k, int stride, int padding) {
  require(in_ch >= 1 && out_ch >= 1 && k >= 1, "Conv1dLayer::init: bad dims");
  Conv1dLayer layer;
  layer.w = kaiming_uniform(rng, {out_ch, in_ch, k}, in_ch * k);
  layer.b = Tensor::zeros({out_ch});
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

void Conv1dLayer::collect(std::vector<Tensor*>& params) {
  params.push_back(&w);
  params.push_back(&b);
}

void Conv1dLayer::save(Checkpoint& ckpt, const std::string& prefix) const {
  save_tensor(ckpt, prefix + ".w", w);
  save_tensor(ckpt, prefix + ".b", b);
}

void Conv1dLayer::load(const Checkpoint& ckpt, const std::string& prefix) {
  w = load_tensor(ckpt, prefix + ".w", w.shape());
  b = load_tensor(ckpt, prefix + ".b", b.shape());
}

namespace {

// conv -> norm -> relu
Tensor conv_bn_relu(Tape& tape, const Tensor& x, ConvBn& layer, int stride, int padding,
                    Phase phase, bool track) {
  Tensor h = conv2d(tape, x, maybe_leaf(tape, layer.w, track), stride, padding);
  h = batch_norm(tape, h, maybe_leaf(tape, layer.gamma, track), maybe_leaf(tape, layer.beta, track),
                 layer.bn, phase);
  return relu(tape, h);
}

// norm -> relu -> conv (pre-activation, used inside dense blocks)
Tensor preact_conv(Tape& tape, const Tensor& x, ConvBn& layer, int stride, int padding, Phase phase,
                   bool track) {
  Tensor h = batch_norm(tape, x, maybe_leaf(tape, layer.gamma, track),
                        maybe_leaf(tape, layer.beta, track), layer.bn, phase);
  h = relu(tape, h);
  return conv2d(tape, h, maybe_leaf(tape, layer.w, track), stride, padding);
}

Tensor dense_layer(Tape& tape, const Tensor& x, DenseLayer& layer, bool track) {
  return dense(tape, x, maybe_leaf(tape, layer.w, track), maybe_leaf(tape, layer.b, track));
}

Tensor conv1d_relu(Tape& tape, const Tensor& x, Conv1dLayer& layer, bool track) {
  Tensor h = conv1d(tape, x, maybe_leaf(tape, layer.w, track), layer.stride, layer.padding);
  h = add_channel_bias(tape, h, maybe_leaf(tape, layer.b, track));
  return relu(tape, h);
}

}  // namespace

// ---------------------------------------------------------------------------
// visual net
// ---------------------------------------------------------------------------

namespace {
constexpr int kVisualStem1 = 8;
constexpr int kVisualStem2 = 16;
constexpr int kVisualTrunk = 24;
constexpr int kVisualGrowth = 8;
constexpr int kVisualBlocks = 5;
}  // namespace

VisualNet VisualNet::init(const VisualNetConfig& cfg, Rng& rng) {
  require(cfg.image_size >= 8 && cfg.image_size % 4 == 0,
          "VisualNet: image_size must be a multiple of 4 and at least 8, got ", cfg.image_size);
  require(cfg.embed_dim >= 1 && cfg.fec_dim >= 1 && cfg.affect_classes >= 2,
          "VisualNet: bad head dims");
  VisualNet net;
  net.cfg_ = cfg;
  net.stem1_ = ConvBn::init(rng, 1, kVisualStem1, 3);
  net.stem2_ = ConvBn::init(rng, kVisualStem1, kVisualStem2, 3);
  net.trunk_ = ConvBn::init(rng, kVisualStem2, kVisualTrunk, 1);
  int ch = kVisualTrunk;
  for (int i = 0; i < kVisualBlocks; ++i) {
    net.blocks_.push_back(ConvBn::init(rng, ch, kVisualGrowth, 3, /*norm_input=*/true));
    ch += kVisualGrowth;
  }
  net.embed_ = ConvBn::init(rng, ch, cfg.embed_dim, 1);
  net.fec_head_ = DenseLayer::init_xavier(rng, cfg.embed_dim, cfg.fec_dim);
  net.affect_head_ = DenseLayer::init_xavier(rng, cfg.embed_dim, cfg.affect_classes);
  if (cfg.distill_head) {
    net.distill_head_ = DenseLayer::init_xavier(rng, cfg.embed_dim, cfg.distill_dim);
  }
  return net;
}

Tensor VisualNet::embed(Tape& tape, const Tensor& images, Phase phase, bool track) {
  require(images.rank() == 4 && images.dim(1) == 1 && images.dim(2) == cfg_.image_size &&
              images.dim(3) == cfg_.image_size,
          "VisualNet: images must be [B,1,", cfg_.image_size, ",", cfg_.image_size, "], got ",
          shape_str(images.shape()));
  Tensor h = conv_bn_relu(tape, images, stem1_, 2, 1, phase, track);
  h = conv_bn_relu(tape, h, stem2_, 2, 1, phase, track);
  h = conv_bn_relu(tape, h, trunk_, 1, 0, phase, track);
  for (ConvBn& block : blocks_) {
    Tensor grown = preact_conv(tape, h, block, 1, 1, phase, track);
    h = concat(tape, {h, grown}, 1);
  }
  h = conv_bn_relu(tape, h, embed_, 1, 0, phase, track);
  return global_avg_pool(tape, h);
}

VisualOut VisualNet::forward(Tape& tape, const Tensor& images, Phase phase, bool track) {
  VisualOut out;
  out.face = embed(tape, images, phase, track);
  out.fec = l2_normalize(tape, dense_layer(tape, out.face, fec_head_, track));
  out.affect_logits = dense_layer(tape, out.face, affect_head_, track);
  if (cfg_.distill_head) {
    out.distill = dense_layer(tape, out.face, distill_head_, track);
  }
  return out;
}

std::vector<Tensor*> VisualNet::params() {
  std::vector<Tensor*> p;
  stem1_.collect(p);
  stem2_.collect(p);
  trunk_.collect(p);
  for (ConvBn& block : blocks_) block.collect(p);
  embed_.collect(p);
  fec_head_.collect(p);
  affect_head_.collect(p);
  if (cfg_.distill_head) distill_head_.collect(p);
  return p;
}

std::size_t VisualNet::param_count() {
  std::size_t n = 0;
  for (const Tensor* t : params()) n += t->numel();
  return n;
}

void VisualNet::save(Checkpoint& ckpt) const {
  stem1_.save(ckpt, "stem1");
  stem2_.save(ckpt, "stem2");
  trunk_.save(ckpt, "trunk");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].save(ckpt, "block" + std::to_string(i));
  }
  embed_.save(ckpt, "embed");
  fec_head_.save(ckpt, "fec");
  affect_head_.save(ckpt, "affect");
  if (cfg_.distill_head) distill_head_.save(ckpt, "distill");
}

void VisualNet::load(const Checkpoint& ckpt) {
  require(ckpt.has("distill.w") == cfg_.distill_head,
          "VisualNet: checkpoint distill head does not match this configuration");
  stem1_.load(ckpt, "stem1");
  stem2_.load(ckpt, "stem2");
  trunk_.load(ckpt, "trunk");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].load(ckpt, "block" + std::to_string(i));
  }
  embed_.load(ckpt, "embed");
  fec_head_.load(ckpt, "fec");
  affect_head_.load(ckpt, "affect");
  if (cfg_.distill_head) distill_head_.load(ckpt, "distill");
}

// ---------------------------------------------------------------------------
// audio net
// ---------------------------------------------------------------------------

namespace {
const int kAudioChannels[] = {8, 16, 32, 32, 64};
constexpr int kAudioConvCount = 5;
constexpr int kAudioFcWidth = 256;
// 2x2 max pools after these conv indices; time and frequency shrink by 8x.
inline bool pools_after(int conv_index) {
  return conv_index == 0 || conv_index == 1 || conv_index == 3;
}
}  // namespace

AudioNet AudioNet::init(const AudioNetConfig& cfg, Rng& rng) {
  require(cfg.mel_bands >= 8, "AudioNet: mel_bands must be >= 8, got ", cfg.mel_bands);
  require(cfg.embed_dim >= 1, "AudioNet: embed_dim must be >= 1");
  AudioNet net;
  net.cfg_ = cfg;
  int in_ch = 1;
  for (int i = 0; i < kAudioConvCount; ++i) {
    const int out_ch = kAudioChannels[i];
    net.conv_w_.push_back(kaiming_uniform(rng, {out_ch, in_ch, 3, 3}, in_ch * 9));
    net.conv_b_.push_back(Tensor::zeros({out_ch}));
    in_ch = out_ch;
  }
  net.fc1_ = DenseLayer::init_kaiming(rng, in_ch, kAudioFcWidth);
  net.fc2_ = DenseLayer::init_kaiming(rng, kAudioFcWidth, kAudioFcWidth);
  net.fc3_ = DenseLayer::init_xavier(rng, kAudioFcWidth, cfg.embed_dim);
  net.reg_head_ = DenseLayer::init_xavier(rng, cfg.embed_dim, 1);
  return net;
}

Tensor AudioNet::conv_feature_map(Tape& tape, const Tensor& mel, bool track) {
  require(mel.rank() == 3 && mel.dim(2) == cfg_.mel_bands, "AudioNet: mel must be [B,T,",
          cfg_.mel_bands, "], got ", shape_str(mel.shape()));
  require(mel.dim(1) >= 8, "AudioNet: need at least 8 frames, got ", mel.dim(1));
  Tensor h = reshape(tape, mel, {mel.dim(0), 1, mel.dim(1), mel.dim(2)});
  for (int i = 0; i < kAudioConvCount; ++i) {
    h = conv2d(tape, h, maybe_leaf(tape, conv_w_[static_cast<std::size_t>(i)], track), 1, 1);
    h = add_channel_bias(tape, h, maybe_leaf(tape, conv_b_[static_cast<std::size_t>(i)], track));
    h = relu(tape, h);
    if (pools_after(i)) h = max_pool2d(tape, h, 2, 2);
  }
  return h;  // [B, 64, T/8, bands/8]
}

namespace {

// Shared fully connected tail: relu, relu, then a linear embedding layer.
Tensor audio_fc_tail(Tape& tape, const Tensor& x, DenseLayer& fc1, DenseLayer& fc2,
                     DenseLayer& fc3, bool track) {
  Tensor h = relu(tape, dense_layer(tape, x, fc1, track));
  h = relu(tape, dense_layer(tape, h, fc2, track));
  return dense_layer(tape, h, fc3, track);
}

}  // namespace

AudioOut AudioNet::forward(Tape& tape, const Tensor& mel, bool track) {
  Tensor fm = conv_feature_map(tape, mel, track);
  Tensor pooled = global_avg_pool(tape, fm);
  AudioOut out;
  out.embedding = audio_fc_tail(tape, pooled, fc1_, fc2_, fc3_, track);
  Tensor pred = dense_layer(tape, out.embedding, reg_head_, track);
  pred = tanh_act(tape, pred);
  out.prediction = select_column(tape, pred, 0);
  return out;
}

Tensor AudioNet::features_sequence(Tape& tape, const Tensor& mel, bool track) {
  Tensor fm = conv_feature_map(tape, mel, track);       // [B, C, T', F']
  Tensor by_step = avg_over_last_axis(tape, fm);        // [B, C, T']
  by_step = transpose_12(tape, by_step);                // [B, T', C]
  const int B = by_step.dim(0), Tn = by_step.dim(1), C = by_step.dim(2);
  Tensor flat = reshape(tape, by_step, {B * Tn, C});
  Tensor emb = audio_fc_tail(tape, flat, fc1_, fc2_, fc3_, track);
  return reshape(tape, emb, {B, Tn, cfg_.embed_dim});
}

std::vector<Tensor*> AudioNet::params() {
  std::vector<Tensor*> p;
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    p.push_back(&conv_w_[i]);
    p.push_back(&conv_b_[i]);
  }
  fc1_.collect(p);
  fc2_.collect(p);
  fc3_.collect(p);
  reg_head_.collect(p);
  return p;
}

std::size_t AudioNet::param_count() {
  std::size_t n = 0;
  for (const Tensor* t : params()) n += t->numel();
  return n;
}

void AudioNet::save(Checkpoint& ckpt) const {
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    save_tensor(ckpt, "conv" + std::to_string(i) + ".w", conv_w_[i]);
    save_tensor(ckpt, "conv" + std::to_string(i) + ".b", conv_b_[i]);
  }
  fc1_.save(ckpt, "fc1");
  fc2_.save(ckpt, "fc2");
  fc3_.save(ckpt, "fc3");
  reg_head_.save(ckpt, "reg");
}

void AudioNet::load(const Checkpoint& ckpt) {
  for (std::size_t i = 0; i < conv_w_.size(); ++i) {
    conv_w_[i] = load_tensor(ckpt, "conv" + std::to_string(i) + ".w", conv_w_[i].shape());
    conv_b_[i] = load_tensor(ckpt, "conv" + std::to_string(i) + ".b", conv_b_[i].shape());
  }
  fc1_.load(ckpt, "fc1");
  fc2_.load(ckpt, "fc2");
  fc3_.load(ckpt, "fc3");
  reg_head_.load(ckpt, "reg");
}

// ---------------------------------------------------------------------------
// fusion net
// ---------------------------------------------------------------------------

FusionNet FusionNet::init(const FusionNetConfig& cfg, Rng& rng) {
  require(cfg.feature_dim >= 1 && cfg.pre_dim >= 1 && cfg.steps >= 1 && cfg.hidden >= 1,
          "FusionNet: bad dims");
  FusionNet net;
  net.cfg_ = cfg;
  net.audio_pre_ = Conv1dLayer::init(rng, cfg.feature_dim, cfg.pre_dim, 3, 1, 1);
  net.visual_pre1_ = Conv1dLayer::init(rng, cfg.feature_dim, cfg.pre_dim, 5, 2, 2);
  net.visual_pre2_ = Conv1dLayer::init(rng, cfg.pre_dim, cfg.pre_dim, 3, 2, 1);
  const int lstm_in = 2 * cfg.pre_dim;
  const int H = cfg.hidden;
  for (int layer = 0; layer < 2; ++layer) {
    const int in = layer == 0 ? lstm_in : H;
    LstmLayerParams p;
    p.w_ih = xavier_uniform(rng, {4 * H, in}, in, H);
    p.w_hh = xavier_uniform(rng, {4 * H, H}, H, H);
    p.b_ih = Tensor::zeros({4 * H});
    p.b_hh = Tensor::zeros({4 * H});
    net.lstm_.push_back(std::move(p));
  }
  net.head_ = DenseLayer::init_xavier(rng, H, 2);
  return net;
}

Tensor FusionNet::audio_grid(Tape& tape, const Tensor& audio_seq, bool track) {
  require(audio_seq.rank() == 3 && audio_seq.dim(2) == cfg_.feature_dim,
          "FusionNet: audio_seq must be [B,T,", cfg_.feature_dim, "], got ",
          shape_str(audio_seq.shape()));
  Tensor h = transpose_12(tape, audio_seq);  // [B, F, T]
  h = conv1d_relu(tape, h, audio_pre_, track);
  h = adaptive_avg_pool1d(tape, h, cfg_.steps);
  return transpose_12(tape, h);  // [B, steps, pre_dim]
}

Tensor FusionNet::visual_grid(Tape& tape, const Tensor& visual_seq, bool track) {
  require(visual_seq.rank() == 3 && visual_seq.dim(2) == cfg_.feature_dim,
          "FusionNet: visual_seq must be [B,T,", cfg_.feature_dim, "], got ",
          shape_str(visual_seq.shape()));
  Tensor h = transpose_12(tape, visual_seq);
  h = conv1d_relu(tape, h, visual_pre1_, track);
  h = conv1d_relu(tape, h, visual_pre2_, track);
  h = adaptive_avg_pool1d(tape, h, cfg_.steps);
  return transpose_12(tape, h);
}

Tensor FusionNet::forward(Tape& tape, const Tensor& audio_seq, const Tensor& visual_seq,
                          FusionMask mask, bool track) {
  require(audio_seq.dim(0) == visual_seq.dim(0), "FusionNet: batch sizes differ, audio ",
          audio_seq.dim(0), " vs visual ", visual_seq.dim(0));
  // Masking drops a modality by zeroing its input sequence.
  Tensor audio_in = mask == FusionMask::kVisualOnly ? Tensor::zeros(audio_seq.shape()) : audio_seq;
  Tensor visual_in = mask == FusionMask::kAudioOnly ? Tensor::zeros(visual_seq.shape()) : visual_seq;
  Tensor ga = audio_grid(tape, audio_in, track);
  Tensor gv = visual_grid(tape, visual_in, track);
  Tensor merged = concat(tape, {ga, gv}, 2);  // [B, steps, 2 * pre_dim]
  std::vector<LstmLayerParams> layers;
  layers.reserve(lstm_.size());
  for (LstmLayerParams& p : lstm_) {
    LstmLayerParams bound;
    bound.w_ih = maybe_leaf(tape, p.w_ih, track);
    bound.w_hh = maybe_leaf(tape, p.w_hh, track);
    bound.b_ih = maybe_leaf(tape, p.b_ih, track);
    bound.b_hh = maybe_leaf(tape, p.b_hh, track);
    layers.push_back(std::move(bound));
  }
  LstmOut lstm = lstm_forward(tape, merged, layers);
  Tensor out = dense_layer(tape, lstm.final, head_, track);
  return tanh_act(tape, out);
}

std::vector<Tensor*> FusionNet::params() {
  std::vector<Tensor*> p;
  audio_pre_.collect(p);
  visual_pre1_.collect(p);
  visual_pre2_.collect(p);
  for (LstmLayerParams& layer : lstm_) {
    p.push_back(&layer.w_ih);
    p.push_back(&layer.w_hh);
    p.push_back(&layer.b_ih);
    p.push_back(&layer.b_hh);
  }
  head_.collect(p);
  return p;
}

std::size_t FusionNet::param_count() {
  std::size_t n = 0;
  for (const Tensor* t : params()) n += t->numel();
  return n;
}

void FusionNet::save(Checkpoint& ckpt) const {
  audio_pre_.save(ckpt, "audio_pre");
  visual_pre1_.save(ckpt, "visual_pre1");
  visual_pre2_.save(ckpt, "visual_pre2");
  for (std::size_t i = 0; i < lstm_.size(); ++i) {
    const std::string prefix = "lstm" + std::to_string(i);
    save_tensor(ckpt, prefix + ".w_ih", lstm_[i].w_ih);
    save_tensor(ckpt, prefix + ".w_hh", lstm_[i].w_hh);
    save_tensor(ckpt, prefix + ".b_ih", lstm_[i].b_ih);
    save_tensor(ckpt, prefix + ".b_hh", lstm_[i].b_hh);
  }
  head_.save(ckpt, "head");
}

void FusionNet::load(const Checkpoint& ckpt) {
  audio_pre_.load(ckpt, "audio_pre");
  visual_pre1_.load(ckpt, "visual_pre1");
  visual_pre2_.load(ckpt, "visual_pre2");
  for (std::size_t i = 0; i < lstm_.size(); ++i) {
    const std::string prefix = "lstm" + std::to_string(i);
    lstm_[i].w_ih = load_tensor(ckpt, prefix + ".w_ih", lstm_[i].w_ih.shape());
    lstm_[i].w_hh = load_tensor(ckpt, prefix + ".w_hh", lstm_[i].w_hh.shape());
    lstm_[i].b_ih = load_tensor(ckpt, prefix + ".b_ih", lstm_[i].b_ih.shape());
    lstm_[i].b_hh = load_tensor(ckpt, prefix + ".b_hh", lstm_[i].b_hh.shape());
  }
  head_.load(ckpt, "head");
}

// ---------------------------------------------------------------------------
// distillation target
// ---------------------------------------------------------------------------

Tensor teacher_distill_target(const VisualOut& teacher_a, const VisualOut& teacher_b) {
  require(!teacher_a.fec.tracked() && !teacher_a.affect_logits.tracked() &&
              !teacher_b.fec.tracked() && !teacher_b.affect_logits.tracked(),
          "teacher_distill_target: teacher outputs must come from frozen forwards");
  Tape scratch;
  std::vector<Tensor> segments = {teacher_a.fec, teacher_a.affect_logits, teacher_b.fec,
                                  teacher_b.affect_logits};
  std::vector<Tensor> normalized;
  normalized.reserve(segments.size());
  for (const Tensor& s : segments) normalized.push_back(l2_normalize(scratch, s));
  return concat(scratch, normalized, 1);
}

}  // namespace aver

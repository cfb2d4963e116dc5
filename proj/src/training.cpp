#include "aver/training.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "aver/errors.hpp"
#include "aver/metrics.hpp"
#include "aver/ops.hpp"
#include "aver/optimizer.hpp"
#include "aver/tape.hpp"

namespace aver {

// ---------------------------------------------------------------------------
// metrics logging
// ---------------------------------------------------------------------------

MetricsLogger::MetricsLogger(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) fail_io("cannot open metrics file ", path.string());
}

void MetricsLogger::log(const std::string& event, int step,
                        const std::vector<std::pair<std::string, double>>& fields) {
  nlohmann::ordered_json j;
  j["v"] = 1;
  j["event"] = event;
  j["step"] = step;
  for (const auto& [key, value] : fields) {
    require(std::isfinite(value), "metrics field ", key, " is not finite at step ", step);
    j[key] = value;
  }
  out_ << j.dump() << "\n";
  out_.flush();
  if (!out_) fail_io("write failed for metrics file ", path_.string());
}

// ---------------------------------------------------------------------------
// batch sampling
// ---------------------------------------------------------------------------

BatchSampler::BatchSampler(int size, int batch, Rng rng)
    : size_(size), batch_(batch), rng_(rng) {
  require(size >= 1, "BatchSampler: empty dataset");
  require(batch >= 1 && batch <= size, "BatchSampler: batch ", batch, " exceeds dataset size ",
          size);
  order_.resize(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) order_[static_cast<std::size_t>(i)] = i;
  rng_.shuffle(order_);
  current_.resize(static_cast<std::size_t>(batch));
}

const std::vector<int>& BatchSampler::next() {
  if (pos_ + batch_ > size_) {
    rng_.shuffle(order_);
    pos_ = 0;
  }
  std::copy(order_.begin() + pos_, order_.begin() + pos_ + batch_, current_.begin());
  pos_ += batch_;
  return current_;
}

// ---------------------------------------------------------------------------
// shared batch assembly
// ---------------------------------------------------------------------------

namespace {

// Distinct stream tags for dataset contents; training batch order uses the
// run seed, dataset contents use the data seed, so reruns with a different
// weight seed still see the same data.
constexpr std::uint64_t kTrainFacesTag = 0x11;
constexpr std::uint64_t kTrainTripletsTag = 0x12;
constexpr std::uint64_t kDevFacesTag = 0x13;
constexpr std::uint64_t kDevTripletsTag = 0x14;
constexpr std::uint64_t kUnlabeledTag = 0x15;

std::uint64_t stream_seed(std::uint64_t base, std::uint64_t tag) { return mix64(base ^ mix64(tag)); }

struct FaceBatch {
  Tensor images;  // [B,1,S,S]
  std::vector<int> labels;
};

FaceBatch gather_faces(const FaceDataset& data, const std::vector<int>& indices) {
  std::vector<Tensor> images;
  FaceBatch batch;
  images.reserve(indices.size());
  batch.labels.reserve(indices.size());
  for (int idx : indices) {
    FaceSample s = data.sample(idx);
    images.push_back(std::move(s.image));
    batch.labels.push_back(s.label);
  }
  batch.images = stack_images(images);
  return batch;
}

struct TripletBatch {
  Tensor images;  // [3n,1,S,S]
  std::vector<int> odds;
};

TripletBatch gather_triplets(const TripletDataset& data, const std::vector<int>& indices) {
  std::vector<Tensor> groups;
  TripletBatch batch;
  groups.reserve(indices.size());
  batch.odds.reserve(indices.size());
  for (int idx : indices) {
    TripletSample s = data.sample(idx);
    groups.push_back(std::move(s.images));
    batch.odds.push_back(s.odd);
  }
  batch.images = concat_image_groups(groups);
  return batch;
}

Tensor gather_unlabeled(const UnlabeledDataset& data, const std::vector<int>& indices) {
  std::vector<Tensor> images;
  images.reserve(indices.size());
  for (int idx : indices) images.push_back(data.sample(idx));
  return stack_images(images);
}

std::vector<int> iota_batch(int begin, int count) {
  std::vector<int> v(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) v[static_cast<std::size_t>(i)] = begin + i;
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// visual data splits
// ---------------------------------------------------------------------------

VisualDataSplits make_visual_splits(std::uint64_t data_seed, int train_faces, int train_triplets,
                                    int dev_faces, int dev_triplets, int image_size) {
  return {FaceDataset(stream_seed(data_seed, kTrainFacesTag), train_faces, image_size),
          TripletDataset(stream_seed(data_seed, kTrainTripletsTag), train_triplets, image_size),
          FaceDataset(stream_seed(data_seed, kDevFacesTag), dev_faces, image_size),
          TripletDataset(stream_seed(data_seed, kDevTripletsTag), dev_triplets, image_size)};
}

UnlabeledDataset make_unlabeled_split(std::uint64_t data_seed, int size, int image_size) {
  return UnlabeledDataset(stream_seed(data_seed, kUnlabeledTag), size, image_size);
}

// ---------------------------------------------------------------------------
// visual evaluation
// ---------------------------------------------------------------------------

VisualEvalReport evaluate_visual(VisualNet& net, const FaceDataset& faces,
                                 const TripletDataset& triplets) {
  VisualEvalReport report;
  const int face_batch = 64;
  std::vector<int> predicted, labels;
  for (int begin = 0; begin < faces.size(); begin += face_batch) {
    const int count = std::min(face_batch, faces.size() - begin);
    const FaceBatch batch = gather_faces(faces, iota_batch(begin, count));
    Tape tape;
    const VisualOut out = net.forward(tape, batch.images, Phase::kEval, false);
    const std::vector<int> arg = argmax_rows(out.affect_logits.data(),
                                             static_cast<std::size_t>(net.config().affect_classes));
    predicted.insert(predicted.end(), arg.begin(), arg.end());
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
  }
  report.balanced_accuracy = balanced_accuracy(predicted, labels, net.config().affect_classes);

  const int trip_batch = 16;
  std::vector<float> embeddings;
  std::vector<int> odds;
  for (int begin = 0; begin < triplets.size(); begin += trip_batch) {
    const int count = std::min(trip_batch, triplets.size() - begin);
    const TripletBatch batch = gather_triplets(triplets, iota_batch(begin, count));
    Tape tape;
    const VisualOut out = net.forward(tape, batch.images, Phase::kEval, false);
    embeddings.insert(embeddings.end(), out.fec.data().begin(), out.fec.data().end());
    odds.insert(odds.end(), batch.odds.begin(), batch.odds.end());
  }
  report.triplet_accuracy =
      triplet_accuracy(embeddings, static_cast<std::size_t>(net.config().fec_dim), odds);
  return report;
}

VisualLossReport visual_dataset_losses(VisualNet& net, const FaceDataset& faces,
                                       const TripletDataset& triplets, float margin) {
  VisualLossReport report;
  const int face_batch = 64;
  double affect_sum = 0.0;
  int affect_count = 0;
  for (int begin = 0; begin < faces.size(); begin += face_batch) {
    const int count = std::min(face_batch, faces.size() - begin);
    const FaceBatch batch = gather_faces(faces, iota_batch(begin, count));
    Tape tape;
    const VisualOut out = net.forward(tape, batch.images, Phase::kEval, false);
    affect_sum += cross_entropy_loss(tape, out.affect_logits, batch.labels).value() * count;
    affect_count += count;
  }
  report.affect_loss = affect_sum / affect_count;

  const int trip_batch = 16;
  double fec_sum = 0.0;
  int fec_count = 0;
  for (int begin = 0; begin < triplets.size(); begin += trip_batch) {
    const int count = std::min(trip_batch, triplets.size() - begin);
    const TripletBatch batch = gather_triplets(triplets, iota_batch(begin, count));
    Tape tape;
    const VisualOut out = net.forward(tape, batch.images, Phase::kEval, false);
    fec_sum += fec_triplet_loss(tape, out.fec, batch.odds, margin).value() * count;
    fec_count += count;
  }
  report.fec_loss = fec_sum / fec_count;
  return report;
}

// ---------------------------------------------------------------------------
// teacher training
// ---------------------------------------------------------------------------

TeacherTrainResult train_teacher(const TeacherTrainConfig& cfg, MetricsLogger* logger) {
  require(cfg.steps >= 1, "train_teacher: steps must be >= 1");
  require(cfg.triplets_per_batch >= 1 && cfg.cls_batch >= 2, "train_teacher: bad batch sizes");

  const VisualDataSplits data = make_visual_splits(cfg.data_seed, cfg.train_faces,
                                                   cfg.train_triplets, cfg.dev_faces,
                                                   cfg.dev_triplets, cfg.image_size);
  const FaceDataset& train_faces = data.train_faces;
  const TripletDataset& train_triplets = data.train_triplets;
  const FaceDataset& dev_faces = data.dev_faces;
  const TripletDataset& dev_triplets = data.dev_triplets;

  Rng init_rng = Rng(cfg.seed).fork(0);
  VisualNetConfig net_cfg;
  net_cfg.image_size = cfg.image_size;
  net_cfg.embed_dim = cfg.embed_dim;
  VisualNet net = VisualNet::init(net_cfg, init_rng);
  std::vector<Tensor*> params = net.params();
  Optimizer opt = Optimizer::sgd(cfg.lr, cfg.momentum);

  BatchSampler triplet_sampler(train_triplets.size(), cfg.triplets_per_batch,
                               Rng(cfg.seed).fork(1));
  BatchSampler cls_sampler(train_faces.size(), cfg.cls_batch, Rng(cfg.seed).fork(2));

  TeacherTrainResult result;
  Checkpoint best;
  for (int step = 0; step < cfg.steps; ++step) {
    Tape tape;
    const TripletBatch trip = gather_triplets(train_triplets, triplet_sampler.next());
    const VisualOut trip_out = net.forward(tape, trip.images, Phase::kTrain, true);
    const Tensor fec_loss = fec_triplet_loss(tape, trip_out.fec, trip.odds, cfg.margin);

    const FaceBatch cls = gather_faces(train_faces, cls_sampler.next());
    const VisualOut cls_out = net.forward(tape, cls.images, Phase::kTrain, true);
    const Tensor affect_loss = cross_entropy_loss(tape, cls_out.affect_logits, cls.labels);

    const Tensor total = add(tape, fec_loss, scale(tape, affect_loss, cfg.alpha));
    backward(tape, total);
    opt.step(params);

    if (logger && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      logger->log("train", step,
                  {{"loss", total.value()},
                   {"loss_fec", fec_loss.value()},
                   {"loss_affect", cfg.alpha * affect_loss.value()}});
    }
    if (step % cfg.eval_every == cfg.eval_every - 1 || step + 1 == cfg.steps) {
      const VisualEvalReport dev = evaluate_visual(net, dev_faces, dev_triplets);
      if (logger) {
        logger->log("eval", step,
                    {{"dev_balanced_accuracy", dev.balanced_accuracy},
                     {"dev_triplet_accuracy", dev.triplet_accuracy}});
      }
      if (dev.score() > result.best_dev_score) {
        result.best_dev_score = dev.score();
        result.best_dev_balanced_accuracy = dev.balanced_accuracy;
        result.best_dev_triplet_accuracy = dev.triplet_accuracy;
        best = Checkpoint();
        net.save(best);
      }
    }
  }
  if (cfg.restore_best && best.size() > 0) net.load(best);
  result.train_losses = visual_dataset_losses(net, train_faces, train_triplets, cfg.margin);
  if (logger) {
    logger->log("final", cfg.steps,
                {{"train_fec_loss", result.train_losses.fec_loss},
                 {"train_affect_loss", result.train_losses.affect_loss},
                 {"best_dev_balanced_accuracy", result.best_dev_balanced_accuracy},
                 {"best_dev_triplet_accuracy", result.best_dev_triplet_accuracy}});
  }
  result.net = std::move(net);
  return result;
}

// ---------------------------------------------------------------------------
// student distillation
// ---------------------------------------------------------------------------

StudentTrainResult train_student(const StudentTrainConfig& cfg, VisualNet& teacher1,
                                 VisualNet& teacher2, MetricsLogger* logger) {
  require(cfg.steps >= 1, "train_student: steps must be >= 1");
  require(cfg.unlabeled_batch >= 3, "train_student: relational loss needs batches of >= 3");
  require(teacher1.config().image_size == cfg.image_size &&
              teacher2.config().image_size == cfg.image_size,
          "train_student: teacher image size does not match");

  const VisualDataSplits data = make_visual_splits(cfg.data_seed, cfg.train_faces,
                                                   cfg.train_triplets, cfg.dev_faces,
                                                   cfg.dev_triplets, cfg.image_size);
  const FaceDataset& train_faces = data.train_faces;
  const TripletDataset& train_triplets = data.train_triplets;
  const FaceDataset& dev_faces = data.dev_faces;
  const TripletDataset& dev_triplets = data.dev_triplets;
  const UnlabeledDataset unlabeled =
      make_unlabeled_split(cfg.data_seed, cfg.unlabeled_size, cfg.image_size);

  Rng init_rng = Rng(cfg.seed).fork(0);
  VisualNetConfig net_cfg;
  net_cfg.image_size = cfg.image_size;
  net_cfg.embed_dim = cfg.embed_dim;
  net_cfg.distill_head = true;
  VisualNet net = VisualNet::init(net_cfg, init_rng);
  std::vector<Tensor*> params = net.params();
  Optimizer opt = Optimizer::sgd(cfg.lr, cfg.momentum);

  // Independent batch-order streams: disabling one input leg must not change
  // what the other legs see.
  BatchSampler triplet_sampler(train_triplets.size(), cfg.triplets_per_batch,
                               Rng(cfg.seed).fork(1));
  BatchSampler cls_sampler(train_faces.size(), cfg.cls_batch, Rng(cfg.seed).fork(2));
  BatchSampler unlabeled_sampler(unlabeled.size(), cfg.unlabeled_batch, Rng(cfg.seed).fork(3));

  StudentTrainResult result;
  Checkpoint best;
  for (int step = 0; step < cfg.steps; ++step) {
    Tape tape;
    const TripletBatch trip = gather_triplets(train_triplets, triplet_sampler.next());
    const VisualOut trip_out = net.forward(tape, trip.images, Phase::kTrain, true);
    const Tensor fec_loss = fec_triplet_loss(tape, trip_out.fec, trip.odds, cfg.margin);

    const FaceBatch cls = gather_faces(train_faces, cls_sampler.next());
    const VisualOut cls_out = net.forward(tape, cls.images, Phase::kTrain, true);
    const Tensor affect_loss = cross_entropy_loss(tape, cls_out.affect_logits, cls.labels);

    Tensor total = add(tape, fec_loss, scale(tape, affect_loss, cfg.alpha));
    double distill_value = 0.0;
    if (cfg.use_distill) {
      const Tensor distill_images = cfg.use_unlabeled
                                        ? gather_unlabeled(unlabeled, unlabeled_sampler.next())
                                        : cls.images;
      const VisualOut student_out = net.forward(tape, distill_images, Phase::kTrain, true);
      const VisualOut t1 = teacher1.forward(tape, distill_images, Phase::kEval, false);
      const VisualOut t2 = teacher2.forward(tape, distill_images, Phase::kEval, false);
      const Tensor target = teacher_distill_target(t1, t2);
      const Tensor relational =
          scale(tape, rkd_loss(tape, student_out.distill, target, cfg.rkd), cfg.distill_weight);
      distill_value = relational.value();
      total = add(tape, total, relational);
    }
    backward(tape, total);
    opt.step(params);

    if (step == 0) {
      result.first_step_fec_loss = fec_loss.value();
      result.first_step_affect_loss = affect_loss.value();
    }
    if (logger && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      logger->log("train", step,
                  {{"loss", total.value()},
                   {"loss_fec", fec_loss.value()},
                   {"loss_affect", cfg.alpha * affect_loss.value()},
                   {"loss_distill", distill_value}});
    }
    if (step % cfg.eval_every == cfg.eval_every - 1 || step + 1 == cfg.steps) {
      const VisualEvalReport dev = evaluate_visual(net, dev_faces, dev_triplets);
      if (logger) {
        logger->log("eval", step,
                    {{"dev_balanced_accuracy", dev.balanced_accuracy},
                     {"dev_triplet_accuracy", dev.triplet_accuracy}});
      }
      if (dev.score() > result.best_dev_score) {
        result.best_dev_score = dev.score();
        result.best_dev_balanced_accuracy = dev.balanced_accuracy;
        result.best_dev_triplet_accuracy = dev.triplet_accuracy;
        best = Checkpoint();
        net.save(best);
      }
    }
  }
  if (cfg.restore_best && best.size() > 0) net.load(best);
  if (logger) {
    logger->log("final", cfg.steps,
                {{"best_dev_balanced_accuracy", result.best_dev_balanced_accuracy},
                 {"best_dev_triplet_accuracy", result.best_dev_triplet_accuracy}});
  }
  result.net = std::move(net);
  return result;
}

// ---------------------------------------------------------------------------
// audio fine-tuning
// ---------------------------------------------------------------------------

namespace {

void check_audio_target(const std::string& target) {
  require(target == "arousal" || target == "valence" || target == "combined",
          "audio target must be arousal, valence or combined, got ", target);
}

Tensor stack_mels(const AudioClipSet& data, const std::vector<int>& indices) {
  require(!indices.empty(), "stack_mels: empty batch");
  const std::vector<int>& shape = data.mels[static_cast<std::size_t>(indices.front())].shape();
  std::vector<float> out;
  out.reserve(indices.size() * numel_of(shape));
  for (int idx : indices) {
    const Tensor& mel = data.mels[static_cast<std::size_t>(idx)];
    require(mel.shape() == shape, "stack_mels: clip ", idx, " has shape ", shape_str(mel.shape()),
            ", expected ", shape_str(shape));
    out.insert(out.end(), mel.data().begin(), mel.data().end());
  }
  return Tensor({static_cast<int>(indices.size()), shape[0], shape[1]}, std::move(out));
}

Tensor gather_targets(const std::vector<float>& values, const std::vector<int>& indices) {
  std::vector<float> v;
  v.reserve(indices.size());
  for (int idx : indices) v.push_back(values[static_cast<std::size_t>(idx)]);
  return Tensor::from_vector(std::move(v));
}

Tensor audio_batch_loss(Tape& tape, const Tensor& pred, const AudioClipSet& data,
                        const std::vector<int>& indices, const std::string& target) {
  if (target == "arousal") return neg_ccc_loss(tape, pred, gather_targets(data.arousal, indices));
  if (target == "valence") return neg_ccc_loss(tape, pred, gather_targets(data.valence, indices));
  const Tensor a = neg_ccc_loss(tape, pred, gather_targets(data.arousal, indices));
  const Tensor v = neg_ccc_loss(tape, pred, gather_targets(data.valence, indices));
  return scale(tape, add(tape, a, v), 0.5f);
}

}  // namespace

double evaluate_audio_ccc(AudioNet& net, const AudioClipSet& data, IndexRange range,
                          const std::string& target) {
  check_audio_target(target);
  require(range.size() >= 2, "evaluate_audio_ccc: need at least 2 clips");
  const int batch = 8;
  std::vector<double> pred, arousal, valence;
  for (int begin = range.begin; begin < range.end; begin += batch) {
    const int count = std::min(batch, range.end - begin);
    const std::vector<int> indices = iota_batch(begin, count);
    Tape tape;
    const AudioOut out = net.forward(tape, stack_mels(data, indices), false);
    for (int i = 0; i < count; ++i) {
      pred.push_back(out.prediction.data()[static_cast<std::size_t>(i)]);
      arousal.push_back(data.arousal[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])]);
      valence.push_back(data.valence[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])]);
    }
  }
  if (target == "arousal") return concordance(arousal, pred).ccc;
  if (target == "valence") return concordance(valence, pred).ccc;
  return 0.5 * (concordance(arousal, pred).ccc + concordance(valence, pred).ccc);
}

AudioTrainResult train_audio(const AudioTrainConfig& cfg, const AudioClipSet& data,
                             IndexRange train, IndexRange dev, MetricsLogger* logger) {
  check_audio_target(cfg.target);
  require(cfg.steps >= 1, "train_audio: steps must be >= 1");
  require(cfg.batch >= 2, "train_audio: agreement loss needs batches of >= 2");
  require(data.mels.size() == data.arousal.size() && data.mels.size() == data.valence.size(),
          "train_audio: clip arrays disagree in length");
  require(train.begin >= 0 && train.end <= static_cast<int>(data.mels.size()) &&
              dev.begin >= 0 && dev.end <= static_cast<int>(data.mels.size()),
          "train_audio: split ranges out of bounds");

  Rng init_rng = Rng(cfg.seed).fork(0);
  AudioNet net = AudioNet::init(AudioNetConfig{}, init_rng);
  std::vector<Tensor*> params = net.params();
  Optimizer opt = Optimizer::adam(cfg.lr);
  BatchSampler sampler(train.size(), cfg.batch, Rng(cfg.seed).fork(1));

  AudioTrainResult result;
  Checkpoint best;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> indices = sampler.next();
    for (int& idx : indices) idx += train.begin;
    Tape tape;
    const AudioOut out = net.forward(tape, stack_mels(data, indices), true);
    const Tensor loss = audio_batch_loss(tape, out.prediction, data, indices, cfg.target);
    backward(tape, loss);
    opt.step(params);

    if (logger && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      logger->log("train", step, {{"loss", loss.value()}});
    }
    if (step % cfg.eval_every == cfg.eval_every - 1 || step + 1 == cfg.steps) {
      const double dev_ccc = evaluate_audio_ccc(net, data, dev, cfg.target);
      if (logger) logger->log("eval", step, {{"dev_ccc", dev_ccc}});
      if (dev_ccc > result.best_dev_ccc) {
        result.best_dev_ccc = dev_ccc;
        best = Checkpoint();
        net.save(best);
      }
    }
  }
  if (cfg.restore_best && best.size() > 0) net.load(best);
  if (logger) logger->log("final", cfg.steps, {{"best_dev_ccc", result.best_dev_ccc}});
  result.net = std::move(net);
  return result;
}

// ---------------------------------------------------------------------------
// fusion training
// ---------------------------------------------------------------------------

std::vector<FusionWindow> build_fusion_windows(const AvClip& clip,
                                               const std::vector<float>& audio_samples,
                                               VisualNet& visual_extractor,
                                               AudioNet& audio_extractor, int window, int hop,
                                               int image_size, const MelConfig& mel_cfg) {
  const int frames = static_cast<int>(clip.valence.size());
  require(window >= 8 && hop >= 1, "build_fusion_windows: bad window or hop");
  require(frames >= window, "build_fusion_windows: clip has ", frames, " frames, window needs ",
          window);

  const Tensor mel = mel_spectrogram(audio_samples, clip.sample_rate, mel_cfg);
  require(mel.dim(0) >= frames, "build_fusion_windows: mel grid has ", mel.dim(0),
          " frames, clip has ", frames);
  const int bands = mel.dim(1);

  // Per-frame face embeddings for the whole clip, in batches.
  const int embed_dim = visual_extractor.config().embed_dim;
  std::vector<float> face_features;
  face_features.reserve(static_cast<std::size_t>(frames) * static_cast<std::size_t>(embed_dim));
  const int face_batch = 64;
  for (int begin = 0; begin < frames; begin += face_batch) {
    const int count = std::min(face_batch, frames - begin);
    std::vector<Tensor> images;
    images.reserve(static_cast<std::size_t>(count));
    for (int f = begin; f < begin + count; ++f) {
      images.push_back(render_av_frame(clip, image_size, f));
    }
    Tape tape;
    const Tensor emb = visual_extractor.embed(tape, stack_images(images), Phase::kEval, false);
    face_features.insert(face_features.end(), emb.data().begin(), emb.data().end());
  }

  std::vector<FusionWindow> windows;
  for (int start = 0; start + window <= frames; start += hop) {
    FusionWindow w;
    // Audio features for exactly this window of mel frames.
    std::vector<float> mel_slice(static_cast<std::size_t>(window) * static_cast<std::size_t>(bands));
    std::copy(mel.data().begin() + static_cast<std::ptrdiff_t>(start) * bands,
              mel.data().begin() + static_cast<std::ptrdiff_t>(start + window) * bands,
              mel_slice.begin());
    Tape tape;
    const Tensor seq = audio_extractor.features_sequence(
        tape, Tensor({1, window, bands}, std::move(mel_slice)), false);
    w.audio_seq = Tensor({seq.dim(1), seq.dim(2)}, seq.data());

    std::vector<float> visual_slice(
        static_cast<std::size_t>(window) * static_cast<std::size_t>(embed_dim));
    std::copy(face_features.begin() + static_cast<std::ptrdiff_t>(start) * embed_dim,
              face_features.begin() + static_cast<std::ptrdiff_t>(start + window) * embed_dim,
              visual_slice.begin());
    w.visual_seq = Tensor({window, embed_dim}, std::move(visual_slice));

    w.arousal = mean_arousal(clip, start, start + window);
    w.valence = mean_valence(clip, start, start + window);
    windows.push_back(std::move(w));
  }
  return windows;
}

namespace {

struct FusionBatch {
  Tensor audio;   // [B, Ta, F]
  Tensor visual;  // [B, Tv, F]
  Tensor arousal;
  Tensor valence;
};

FusionBatch stack_windows(const std::vector<FusionWindow>& windows,
                          const std::vector<int>& indices) {
  require(!indices.empty(), "stack_windows: empty batch");
  const FusionWindow& first = windows[static_cast<std::size_t>(indices.front())];
  const std::vector<int>& ashape = first.audio_seq.shape();
  const std::vector<int>& vshape = first.visual_seq.shape();
  FusionBatch batch;
  std::vector<float> audio, visual, arousal, valence;
  audio.reserve(indices.size() * first.audio_seq.numel());
  visual.reserve(indices.size() * first.visual_seq.numel());
  for (int idx : indices) {
    const FusionWindow& w = windows[static_cast<std::size_t>(idx)];
    require(w.audio_seq.shape() == ashape && w.visual_seq.shape() == vshape,
            "stack_windows: inconsistent window shapes");
    audio.insert(audio.end(), w.audio_seq.data().begin(), w.audio_seq.data().end());
    visual.insert(visual.end(), w.visual_seq.data().begin(), w.visual_seq.data().end());
    arousal.push_back(w.arousal);
    valence.push_back(w.valence);
  }
  const int B = static_cast<int>(indices.size());
  batch.audio = Tensor({B, ashape[0], ashape[1]}, std::move(audio));
  batch.visual = Tensor({B, vshape[0], vshape[1]}, std::move(visual));
  batch.arousal = Tensor::from_vector(std::move(arousal));
  batch.valence = Tensor::from_vector(std::move(valence));
  return batch;
}

}  // namespace

FusionEvalReport evaluate_fusion(FusionNet& net, const std::vector<FusionWindow>& windows,
                                 FusionMask mask) {
  require(windows.size() >= 2, "evaluate_fusion: need at least 2 windows");
  const int batch = 32;
  const int n = static_cast<int>(windows.size());
  std::vector<double> pred_a, pred_v, true_a, true_v;
  for (int begin = 0; begin < n; begin += batch) {
    const int count = std::min(batch, n - begin);
    const FusionBatch b = stack_windows(windows, iota_batch(begin, count));
    Tape tape;
    const Tensor out = net.forward(tape, b.audio, b.visual, mask, false);
    for (int i = 0; i < count; ++i) {
      pred_a.push_back(out.data()[static_cast<std::size_t>(i) * 2]);
      pred_v.push_back(out.data()[static_cast<std::size_t>(i) * 2 + 1]);
      true_a.push_back(b.arousal.data()[static_cast<std::size_t>(i)]);
      true_v.push_back(b.valence.data()[static_cast<std::size_t>(i)]);
    }
  }
  FusionEvalReport report;
  report.ccc_arousal = concordance(true_a, pred_a).ccc;
  report.ccc_valence = concordance(true_v, pred_v).ccc;
  return report;
}

FusionTrainResult train_fusion(const FusionTrainConfig& cfg,
                               const std::vector<FusionWindow>& train_windows,
                               const std::vector<FusionWindow>& dev_windows,
                               MetricsLogger* logger) {
  require(cfg.steps >= 1, "train_fusion: steps must be >= 1");
  require(cfg.batch >= 2, "train_fusion: agreement loss needs batches of >= 2");
  require(static_cast<int>(train_windows.size()) >= cfg.batch,
          "train_fusion: fewer training windows than one batch");

  Rng init_rng = Rng(cfg.seed).fork(0);
  FusionNetConfig net_cfg;
  net_cfg.feature_dim = train_windows.front().audio_seq.dim(1);
  FusionNet net = FusionNet::init(net_cfg, init_rng);
  std::vector<Tensor*> params = net.params();
  Optimizer opt = Optimizer::adam(cfg.lr);
  BatchSampler sampler(static_cast<int>(train_windows.size()), cfg.batch, Rng(cfg.seed).fork(1));

  FusionTrainResult result;
  Checkpoint best;
  for (int step = 0; step < cfg.steps; ++step) {
    const FusionBatch batch = stack_windows(train_windows, sampler.next());
    Tape tape;
    const Tensor out = net.forward(tape, batch.audio, batch.visual, cfg.train_mask, true);
    const Tensor loss_a = neg_ccc_loss(tape, select_column(tape, out, 0), batch.arousal);
    const Tensor loss_v = neg_ccc_loss(tape, select_column(tape, out, 1), batch.valence);
    const Tensor loss = add(tape, loss_a, loss_v);
    backward(tape, loss);
    opt.step(params);

    if (logger && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      logger->log("train", step,
                  {{"loss", loss.value()},
                   {"loss_arousal", loss_a.value()},
                   {"loss_valence", loss_v.value()}});
    }
    if (step % cfg.eval_every == cfg.eval_every - 1 || step + 1 == cfg.steps) {
      const FusionEvalReport dev = evaluate_fusion(net, dev_windows, cfg.train_mask);
      if (logger) {
        logger->log("eval", step,
                    {{"dev_ccc_arousal", dev.ccc_arousal}, {"dev_ccc_valence", dev.ccc_valence}});
      }
      if (dev.score() > result.best_dev_score) {
        result.best_dev_score = dev.score();
        result.best_dev = dev;
        best = Checkpoint();
        net.save(best);
      }
    }
  }
  if (cfg.restore_best && best.size() > 0) net.load(best);
  if (logger) {
    logger->log("final", cfg.steps,
                {{"best_dev_ccc_arousal", result.best_dev.ccc_arousal},
                 {"best_dev_ccc_valence", result.best_dev.ccc_valence}});
  }
  result.net = std::move(net);
  return result;
}

}  // namespace aver

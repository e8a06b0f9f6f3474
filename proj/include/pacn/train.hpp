#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pacn/augment.hpp"
#include "pacn/dataset.hpp"
#include "pacn/model.hpp"

namespace pacn {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double peak_lr = 0.002;
  int warmup_epochs = 10;
  double kd_lambda = 0.226;
  double kd_temperature = 2.0;
  /// Scales the distillation term by T^2.
  bool kd_t2_scaling = true;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;
  AugmentPolicy augment;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::string& path);
};

struct KdLossParts {
  double hard = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

/// One-hot rows for class indices.
Tensor one_hot(const std::vector<int>& labels, std::int64_t classes);

/// total = lambda * CE(softmax(z_s), y) + (1 - lambda) * [T^2] * KL(softmax(z_t/T) || softmax(z_s/T)),
/// both terms averaged over the batch. `targets` are row-stochastic.
KdLossParts kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, const Tensor& targets,
                    double lambda, double temperature, bool t2_scaling = true);
KdLossParts kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    const std::vector<int>& labels, double lambda, double temperature,
                    bool t2_scaling = true);

template <class T>
struct KdLossVars {
  Var total;
  Var hard;
  Var distill;  // invalid when the distillation term is skipped
};

/// Tape version. With lambda == 1 or no teacher the total is the hard term
/// alone, so the graph matches plain supervised training exactly.
template <class T>
KdLossVars<T> kd_loss(Tape<T>& tape, Var student_logits, const BasicTensor<T>& targets,
                      const BasicTensor<T>* teacher_logits, T lambda, T temperature, bool t2_scaling);

/// Linear warmup from 0 to peak over warmup_epochs, then cosine decay to 0 at
/// the last step.
double lr_at(std::int64_t step, const TrainConfig& config, std::int64_t steps_per_epoch);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam on every tensor of `params`; paths in `clamp_unit` are
/// clamped to [0, 1] afterwards. A non-finite gradient throws naming the path.
void adam_step(NamedTensors& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
               const std::vector<std::string>& clamp_unit = {});

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double hard_loss = 0.0;
  double distill_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;  // NaN without a validation set
};

std::string metrics_csv(const std::vector<EpochMetrics>& metrics);

struct TrainResult {
  PacnModel model;
  std::vector<EpochMetrics> metrics;
};

/// Training data: audio (for waveform augmentation) plus cached features.
struct TrainData {
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
  const SpectrumCorrection* correction = nullptr;
  /// Workers for feature extraction and evaluation; results do not depend on it.
  int threads = 1;
};

using EpochCallback = std::function<void(const PacnModel& model, const EpochMetrics& metrics)>;

/// Generic loop: teacher may be null (pure supervised training).
TrainResult train_model(const PacnConfig& model_config, const TrainConfig& config, const TrainData& data,
                        const PacnModel* teacher, const EpochCallback& on_epoch = {});

TrainResult train_teacher(const PacnConfig& teacher_config, const TrainConfig& config, const TrainData& data,
                          const EpochCallback& on_epoch = {});
TrainResult train_student_kd(const PacnConfig& student_config, const PacnModel& teacher,
                             const TrainConfig& config, const TrainData& data,
                             const EpochCallback& on_epoch = {});

/// Inference logits for feature clips, in batches.
Tensor predict_logits(const PacnModel& model, const std::vector<FeatureClip>& features,
                      std::int64_t batch_size = 32, int threads = 1);

/// Mean over clips of KL(softmax(z_t/T) || softmax(z_s/T)).
double mean_kl(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

int argmax_row(const float* row, std::int64_t k);

}  // namespace pacn

#include "pacn/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "pacn/error.hpp"
#include "pacn/log.hpp"
#include "pacn/rng.hpp"

namespace pacn {

using i64 = std::int64_t;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(peak_lr >= 0.0)) throw ConfigError("peak_lr must be >= 0");
  if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs must be in [0, epochs]");
  if (!(kd_lambda >= 0.0 && kd_lambda <= 1.0)) throw ConfigError("kd_lambda must be in [0, 1]");
  if (!(kd_temperature > 0.0)) throw ConfigError("kd_temperature must be > 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  augment.validate();
}

std::string TrainConfig::to_json() const {
  json a{{"mixup", augment.mixup},
         {"mixup_prob", augment.mixup_prob},
         {"mixup_alpha", augment.mixup_alpha},
         {"mixup_domain", augment.mixup_domain},
         {"pitch_shift", augment.pitch_shift},
         {"pitch_prob", augment.pitch_prob},
         {"audio_mix", augment.audio_mix},
         {"mix_prob", augment.mix_prob},
         {"mix_lo", augment.mix_lo},
         {"mix_hi", augment.mix_hi},
         {"spectrum_correction", augment.spectrum_correction}};
  json j{{"epochs", epochs},
         {"batch_size", batch_size},
         {"peak_lr", peak_lr},
         {"warmup_epochs", warmup_epochs},
         {"kd_lambda", kd_lambda},
         {"kd_temperature", kd_temperature},
         {"kd_t2_scaling", kd_t2_scaling},
         {"seed", seed},
         {"val_fraction", val_fraction},
         {"augment", a}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.kd_lambda = j.value("kd_lambda", c.kd_lambda);
    c.kd_temperature = j.value("kd_temperature", c.kd_temperature);
    c.kd_t2_scaling = j.value("kd_t2_scaling", c.kd_t2_scaling);
    c.seed = j.value("seed", c.seed);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    // Backwards-compatible top-level alias.
    c.augment.mixup_alpha = j.value("mixup_alpha", c.augment.mixup_alpha);
    if (j.contains("augment")) {
      const json& a = j.at("augment");
      auto& p = c.augment;
      p.mixup = a.value("mixup", p.mixup);
      p.mixup_prob = a.value("mixup_prob", p.mixup_prob);
      p.mixup_alpha = a.value("mixup_alpha", p.mixup_alpha);
      p.mixup_domain = a.value("mixup_domain", p.mixup_domain);
      p.pitch_shift = a.value("pitch_shift", p.pitch_shift);
      p.pitch_prob = a.value("pitch_prob", p.pitch_prob);
      p.audio_mix = a.value("audio_mix", p.audio_mix);
      p.mix_prob = a.value("mix_prob", p.mix_prob);
      p.mix_lo = a.value("mix_lo", p.mix_lo);
      p.mix_hi = a.value("mix_hi", p.mix_hi);
      p.spectrum_correction = a.value("spectrum_correction", p.spectrum_correction);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open train config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// Loss, schedule, optimizer

Tensor one_hot(const std::vector<int>& labels, i64 classes) {
  Tensor y({static_cast<i64>(labels.size()), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw UsageError("label " + std::to_string(labels[i]) + " outside 0.." + std::to_string(classes - 1));
    }
    y[static_cast<i64>(i) * classes + labels[i]] = 1.0f;
  }
  return y;
}

template <class T>
KdLossVars<T> kd_loss(Tape<T>& tape, Var z, const BasicTensor<T>& targets, const BasicTensor<T>* teacher,
                      T lambda, T temperature, bool t2_scaling) {
  if (!(temperature > T(0))) throw UsageError("kd temperature must be > 0");
  KdLossVars<T> out;
  out.hard = soft_cross_entropy(tape, z, targets);
  if (!teacher || lambda == T(1)) {
    out.total = out.hard;
    return out;
  }
  out.distill = kl_div_temperature(tape, z, *teacher, temperature);
  const T w = (T(1) - lambda) * (t2_scaling ? temperature * temperature : T(1));
  out.total = add(tape, scale(tape, out.hard, lambda), scale(tape, out.distill, w));
  return out;
}

template KdLossVars<float> kd_loss<float>(Tape<float>&, Var, const Tensor&, const Tensor*, float, float, bool);
template KdLossVars<double> kd_loss<double>(Tape<double>&, Var, const Tensor64&, const Tensor64*, double, double,
                                            bool);

KdLossParts kd_loss(const Tensor& zs, const Tensor& zt, const Tensor& targets, double lambda, double temperature,
                    bool t2_scaling) {
  if (!(temperature > 0.0)) throw UsageError("kd temperature must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("kd lambda must be in [0, 1]");
  Tape<double> tape;
  const Var z = tape.constant(zs.cast<double>());
  const Tensor64 t = zt.cast<double>();
  KdLossParts p;
  p.hard = tape.value(soft_cross_entropy(tape, z, targets.cast<double>()))[0];
  p.distill = tape.value(kl_div_temperature(tape, z, t, temperature))[0];
  p.total = lambda * p.hard + (1.0 - lambda) * (t2_scaling ? temperature * temperature : 1.0) * p.distill;
  return p;
}

KdLossParts kd_loss(const Tensor& zs, const Tensor& zt, const std::vector<int>& labels, double lambda,
                    double temperature, bool t2_scaling) {
  if (zs.rank() != 2) throw UsageError("logits must be (n, classes)");
  return kd_loss(zs, zt, one_hot(labels, zs.dim(1)), lambda, temperature, t2_scaling);
}

double lr_at(i64 step, const TrainConfig& c, i64 steps_per_epoch) {
  const i64 total = static_cast<i64>(c.epochs) * steps_per_epoch;
  const i64 warm = static_cast<i64>(c.warmup_epochs) * steps_per_epoch;
  if (total <= 0) return 0.0;
  step = std::clamp<i64>(step, 0, total - 1);
  if (step < warm) return c.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  const i64 span = total - 1 - warm;
  if (span <= 0) return c.peak_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(span);
  return c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_step(NamedTensors& params, const std::vector<Tensor>& grads, AdamState& st, double lr,
               const std::vector<std::string>& clamp_unit) {
  auto& entries = params.entries();
  if (grads.size() != entries.size()) throw UsageError("adam_step: gradient count does not match parameters");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].shape() != entries[i].value.shape()) {
      throw UsageError("adam_step: gradient shape mismatch for " + entries[i].path);
    }
    for (float g : grads[i].data()) {
      if (!std::isfinite(g)) throw std::runtime_error("non-finite gradient in layer " + entries[i].path);
    }
  }
  if (st.m.empty()) {
    for (const auto& e : entries) {
      st.m.emplace_back(e.value.shape());
      st.v.emplace_back(e.value.shape());
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& p = entries[i].value;
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    const Tensor& g = grads[i];
    for (i64 j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      const double vj = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = lr * (mj / bc1) / (std::sqrt(vj / bc2) + st.eps);
      p[j] = static_cast<float>(p[j] - update);
    }
  }
  for (const auto& path : clamp_unit) {
    for (auto& x : params.at(path).data()) x = std::clamp(x, 0.0f, 1.0f);
  }
}

std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::string out = "epoch,lr,train_loss,hard_loss,distill_loss,train_acc,val_acc\n";
  char buf[256];
  for (const auto& m : metrics) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.6f,%.6f\n", m.epoch, m.lr, m.train_loss, m.hard_loss,
                  m.distill_loss, m.train_acc, m.val_acc);
    out += buf;
  }
  return out;
}

int argmax_row(const float* row, i64 k) {
  int best = 0;
  for (i64 j = 1; j < k; ++j) {
    if (row[j] > row[best]) best = static_cast<int>(j);
  }
  return best;
}

Tensor predict_logits(const PacnModel& model, const std::vector<FeatureClip>& features, i64 batch_size,
                      int threads) {
  const i64 n = static_cast<i64>(features.size());
  const i64 k = model.config().num_classes;
  Tensor out({std::max<i64>(n, 1), k});
  if (n == 0) return Tensor();
  const i64 batches = (n + batch_size - 1) / batch_size;
  parallel_for(static_cast<std::size_t>(batches), threads, [&](std::size_t b) {
    const i64 lo = static_cast<i64>(b) * batch_size, hi = std::min(n, lo + batch_size);
    std::vector<const Tensor*> xs;
    for (i64 i = lo; i < hi; ++i) xs.push_back(&features[i].feature);
    const Tensor z = model.predict(stack_features(xs));
    std::copy(z.data().begin(), z.data().end(), out.ptr() + lo * k);
  });
  return out;
}

double mean_kl(const Tensor& zt, const Tensor& zs, double temperature) {
  Tape<double> tape;
  const Var z = tape.constant(zs.cast<double>());
  return tape.value(kl_div_temperature(tape, z, zt.cast<double>(), temperature))[0];
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

// Activations are a few MB each and are freed every step; keeping them on the
// heap instead of fresh mmaps avoids a page-fault storm.
void keep_large_allocations() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

constexpr std::uint64_t kShuffleKey = 0x0dde7;
constexpr std::uint64_t kBatchKey = 0xb47c;

struct ClipSource {
  const Dataset& data;
  const SpectrumCorrection* correction;
  const AugmentPolicy& policy;
  std::uint64_t seed;
  std::vector<std::vector<std::size_t>> by_label;

  ClipSource(const Dataset& d, const SpectrumCorrection* c, const AugmentPolicy& p, std::uint64_t s)
      : data(d), correction(c), policy(p), seed(s) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto label = static_cast<std::size_t>(d.records[i].label);
      if (by_label.size() <= label) by_label.resize(label + 1);
      by_label[label].push_back(i);
    }
  }

  bool waveform_augmentation() const { return policy.pitch_shift || policy.audio_mix; }

  const std::vector<float>* coef(const std::string& device) const {
    return correction && policy.spectrum_correction ? correction->find(device) : nullptr;
  }

  struct Wave {
    AudioClip clip;
    std::vector<float> coef;
    bool has_coef = false;
    bool augmented = false;
  };

  /// Waveform after audio-mix / pitch shift for (seed, epoch, clip).
  Wave wave(int epoch, std::size_t i) const {
    Rng r(derive_seed({seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(i)}));
    Wave w;
    w.clip = data.audio[i];
    if (const auto* c = coef(data.records[i].device)) {
      w.coef = *c;
      w.has_coef = true;
    }
    const bool do_mix = policy.audio_mix && r.uniform() < policy.mix_prob;
    const auto& peers = by_label[static_cast<std::size_t>(data.records[i].label)];
    if (do_mix && peers.size() > 1) {
      std::size_t j = peers[r.below(peers.size())];
      while (j == i) j = peers[r.below(peers.size())];
      const double wt = r.uniform(policy.mix_lo, policy.mix_hi);
      w.clip = audio_mix(w.clip, data.audio[j], wt);
      const auto* cj = coef(data.records[j].device);
      if (w.has_coef && cj) {
        for (std::size_t k = 0; k < w.coef.size(); ++k) {
          w.coef[k] = static_cast<float>(wt * w.coef[k] + (1.0 - wt) * (*cj)[k]);
        }
      } else {
        w.has_coef = false;
      }
      w.augmented = true;
    }
    if (policy.pitch_shift && r.uniform() < policy.pitch_prob) {
      w.clip = pitch_shift(w.clip, kPitchFactors[r.below(kPitchFactors.size())]);
      w.augmented = true;
    }
    return w;
  }

  Tensor feature(int epoch, std::size_t i) const {
    if (!waveform_augmentation()) return data.features[i].feature;
    Wave w = wave(epoch, i);
    if (!w.augmented) return data.features[i].feature;
    return extract_feature(w.clip, w.has_coef ? &w.coef : nullptr).feature;
  }
};

}  // namespace

TrainResult train_model(const PacnConfig& model_config, const TrainConfig& config, const TrainData& data,
                        const PacnModel* teacher, const EpochCallback& on_epoch) {
  config.validate();
  keep_large_allocations();
  if (!data.train || data.train->size() == 0) throw UsageError("training set is empty");
  const Dataset& train = *data.train;
  if (teacher) {
    const auto& tc = teacher->config();
    if (tc.num_classes != model_config.num_classes) {
      throw ConfigError("teacher has " + std::to_string(tc.num_classes) + " classes, student " +
                        std::to_string(model_config.num_classes));
    }
    if (tc.input_bins != model_config.input_bins || tc.input_frames != model_config.input_frames) {
      throw ConfigError("teacher and student input geometry differ");
    }
  }
  for (const auto& r : train.records) {
    if (r.label >= model_config.num_classes) throw ConfigError("label exceeds num_classes");
  }

  TrainResult result{PacnModel(model_config, config.seed), {}};
  PacnModel& model = result.model;
  const auto rho_paths = model.arn_rho_paths();
  const AugmentPolicy& policy = config.augment;
  ClipSource source(train, data.correction, policy, config.seed);

  const i64 n = static_cast<i64>(train.size());
  const i64 bs = config.batch_size;
  const i64 steps_per_epoch = (n + bs - 1) / bs;
  const i64 k = model_config.num_classes;
  const bool use_teacher = teacher && config.kd_lambda < 1.0;
  const bool static_inputs = !policy.mixup && !source.waveform_augmentation();

  Tensor teacher_cache;
  if (use_teacher && static_inputs) teacher_cache = predict_logits(*teacher, train.features, 32, data.threads);

  AdamState adam;
  i64 step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) order[i] = static_cast<std::size_t>(i);
    Rng shuffle_rng(derive_seed({config.seed, static_cast<std::uint64_t>(epoch), kShuffleKey}));
    shuffle_rng.shuffle(order.begin(), order.end());

    EpochMetrics m;
    m.epoch = epoch;
    i64 correct = 0;
    for (i64 b = 0; b < steps_per_epoch; ++b) {
      const i64 lo = b * bs, hi = std::min(n, lo + bs), cnt = hi - lo;
      std::vector<Tensor> feats(static_cast<std::size_t>(cnt));
      parallel_for(static_cast<std::size_t>(cnt), data.threads, [&](std::size_t j) {
        feats[j] = source.feature(epoch, order[static_cast<std::size_t>(lo) + j]);
      });
      std::vector<int> labels;
      std::vector<const Tensor*> ptrs;
      for (i64 j = 0; j < cnt; ++j) {
        labels.push_back(train.records[order[lo + j]].label);
        ptrs.push_back(&feats[j]);
      }
      Tensor x = stack_features(ptrs);
      Tensor y = one_hot(labels, k);

      Rng batch_rng(derive_seed({config.seed, static_cast<std::uint64_t>(epoch), kBatchKey, static_cast<std::uint64_t>(b)}));
      if (policy.mixup && batch_rng.uniform() < policy.mixup_prob) {
        const double eta = sample_mixup_eta(batch_rng, policy.mixup_alpha);
        std::vector<std::size_t> perm(static_cast<std::size_t>(cnt));
        for (i64 j = 0; j < cnt; ++j) perm[j] = static_cast<std::size_t>(j);
        batch_rng.shuffle(perm.begin(), perm.end());
        if (policy.mixup_domain == "waveform" && cnt > 1) {
          // Mix the (augmented) waveforms of each pair, then extract again.
          std::vector<Tensor> mixed(static_cast<std::size_t>(cnt));
          parallel_for(static_cast<std::size_t>(cnt), data.threads, [&](std::size_t j) {
            auto a = source.wave(epoch, order[lo + j]);
            auto p = source.wave(epoch, order[lo + perm[j]]);
            AudioClip c = a.clip;
            for (std::size_t s = 0; s < c.samples.size(); ++s) {
              c.samples[s] = static_cast<float>(eta * a.clip.samples[s] + (1.0 - eta) * p.clip.samples[s]);
            }
            std::vector<float> coef;
            if (a.has_coef && p.has_coef) {
              coef.resize(a.coef.size());
              for (std::size_t q = 0; q < coef.size(); ++q) {
                coef[q] = static_cast<float>(eta * a.coef[q] + (1.0 - eta) * p.coef[q]);
              }
            }
            mixed[j] = extract_feature(c, coef.empty() ? nullptr : &coef).feature;
          });
          std::vector<const Tensor*> mp;
          for (auto& t : mixed) mp.push_back(&t);
          x = stack_features(mp);
        } else {
          std::vector<const Tensor*> pp;
          for (auto j : perm) pp.push_back(&feats[j]);
          x = mixup(x, stack_features(pp), eta);
        }
        Tensor yp({cnt, k});
        for (i64 j = 0; j < cnt; ++j) {
          std::copy(y.ptr() + perm[j] * k, y.ptr() + (perm[j] + 1) * k, yp.ptr() + j * k);
        }
        y = mixup(y, yp, eta);
      }

      Tensor zt;
      if (use_teacher) {
        if (!teacher_cache.empty()) {
          zt = Tensor({cnt, k});
          for (i64 j = 0; j < cnt; ++j) {
            std::copy(teacher_cache.ptr() + order[lo + j] * k, teacher_cache.ptr() + (order[lo + j] + 1) * k,
                      zt.ptr() + j * k);
          }
        } else {
          zt = teacher->predict(x);
        }
      }

      Tape<float> tape;
      auto binding = model.bind(tape, true);
      const Var z = model.forward(binding, tape.constant(x), true);
      const auto loss = kd_loss(tape, z, y, use_teacher ? &zt : nullptr, static_cast<float>(config.kd_lambda),
                                static_cast<float>(config.kd_temperature), config.kd_t2_scaling);
      tape.backward(loss.total);
      std::vector<Tensor> grads;
      grads.reserve(binding.params.size());
      for (Var p : binding.params) grads.push_back(tape.grad(p));
      model.store_statistics(binding);

      const double lr = lr_at(step, config, steps_per_epoch);
      adam_step(model.params(), grads, adam, lr, rho_paths);
      ++step;

      const auto& zv = tape.value(z);
      for (i64 j = 0; j < cnt; ++j) {
        if (argmax_row(zv.ptr() + j * k, k) == argmax_row(y.ptr() + j * k, k)) ++correct;
      }
      const double w = static_cast<double>(cnt);
      m.train_loss += w * tape.value(loss.total)[0];
      m.hard_loss += w * tape.value(loss.hard)[0];
      if (loss.distill.valid()) m.distill_loss += w * tape.value(loss.distill)[0];
      m.lr = lr;
    }
    m.train_loss /= static_cast<double>(n);
    m.hard_loss /= static_cast<double>(n);
    m.distill_loss /= static_cast<double>(n);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    m.val_acc = std::numeric_limits<double>::quiet_NaN();
    if (data.val && data.val->size() > 0) {
      const Tensor z = predict_logits(model, data.val->features, 32, data.threads);
      i64 ok = 0;
      for (std::size_t i = 0; i < data.val->size(); ++i) {
        if (argmax_row(z.ptr() + static_cast<i64>(i) * k, k) == data.val->records[i].label) ++ok;
      }
      m.val_acc = static_cast<double>(ok) / static_cast<double>(data.val->size());
    }
    char line[200];
    std::snprintf(line, sizeof line, "epoch %3d  lr %.5f  loss %.4f  hard %.4f  kd %.4f  train_acc %.3f  val_acc %.3f",
                  epoch, m.lr, m.train_loss, m.hard_loss, m.distill_loss, m.train_acc, m.val_acc);
    log_info(line);
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(model, m);
  }
  return result;
}

TrainResult train_teacher(const PacnConfig& teacher_config, const TrainConfig& config, const TrainData& data,
                          const EpochCallback& on_epoch) {
  TrainConfig c = config;
  c.kd_lambda = 1.0;
  return train_model(teacher_config, c, data, nullptr, on_epoch);
}

TrainResult train_student_kd(const PacnConfig& student_config, const PacnModel& teacher, const TrainConfig& config,
                             const TrainData& data, const EpochCallback& on_epoch) {
  return train_model(student_config, config, data, &teacher, on_epoch);
}

}  // namespace pacn

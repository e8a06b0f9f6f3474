#include "pacn/augment.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "pacn/error.hpp"
#include "pacn/log.hpp"

namespace pacn {

using i64 = std::int64_t;

Tensor mixup(const Tensor& a, const Tensor& b, double eta) {
  if (a.shape() != b.shape()) {
    throw UsageError("mixup shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (eta == 1.0) return a;
  if (eta == 0.0) return b;
  Tensor out(a.shape());
  const float e = static_cast<float>(eta), f = static_cast<float>(1.0 - eta);
  for (i64 i = 0; i < a.size(); ++i) out[i] = e * a[i] + f * b[i];
  return out;
}

MixedBatch mixup(const Tensor& xi, const Tensor& yi, const Tensor& xj, const Tensor& yj, double eta) {
  if (xi.rank() == 0 || yi.rank() != 2 || xi.dim(0) != yi.dim(0)) {
    throw UsageError("mixup: labels must be one-hot rows aligned with the batch");
  }
  return {mixup(xi, xj, eta), mixup(yi, yj, eta)};
}

double sample_mixup_eta(Rng& rng, double alpha) {
  if (!(alpha > 0.0)) throw UsageError("mixup alpha must be positive");
  return rng.beta(alpha, alpha);
}

// ---------------------------------------------------------------------------
// Spectrum correction

const std::vector<float>* SpectrumCorrection::find(const std::string& device) const {
  auto it = coefficients.find(device);
  return it == coefficients.end() ? nullptr : &it->second;
}

std::string SpectrumCorrection::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9);
  for (const auto& [device, c] : coefficients) {
    os << device;
    for (float v : c) os << "," << v;
    os << "\n";
  }
  return os.str();
}

SpectrumCorrection SpectrumCorrection::from_csv(const std::string& text) {
  SpectrumCorrection out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string device, cell;
    std::getline(ls, device, ',');
    std::vector<float> c;
    while (std::getline(ls, cell, ',')) {
      try {
        c.push_back(std::stof(cell));
      } catch (const std::exception&) {
        throw IngestionError("correction CSV line " + std::to_string(line_no) + ": bad number '" +
                             cell + "'");
      }
    }
    if (static_cast<i64>(c.size()) != kSpectrumBins) {
      throw IngestionError("correction CSV line " + std::to_string(line_no) + ": expected 2049 values, got " +
                           std::to_string(c.size()));
    }
    out.coefficients[device] = std::move(c);
  }
  return out;
}

void SpectrumCorrection::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_csv();
}

SpectrumCorrection SpectrumCorrection::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

SpectrumCorrection estimate_correction(
    const std::map<std::string, std::vector<std::vector<double>>>& aligned) {
  if (aligned.empty()) throw UsageError("estimate_correction: no devices");
  std::map<std::string, std::vector<double>> response;
  for (const auto& [device, spectra] : aligned) {
    if (spectra.empty()) throw UsageError("estimate_correction: device " + device + " has no spectra");
    std::vector<double> r(kSpectrumBins, 0.0);
    for (const auto& s : spectra) {
      if (static_cast<i64>(s.size()) != kSpectrumBins) {
        throw UsageError("estimate_correction: spectra must have 2049 bins");
      }
      for (i64 k = 0; k < kSpectrumBins; ++k) r[k] += s[k];
    }
    for (auto& v : r) v /= static_cast<double>(spectra.size());
    response[device] = std::move(r);
  }
  std::vector<double> reference(kSpectrumBins, 0.0);
  for (const auto& [_, r] : response) {
    for (i64 k = 0; k < kSpectrumBins; ++k) reference[k] += r[k];
  }
  for (auto& v : reference) v /= static_cast<double>(response.size());

  SpectrumCorrection out;
  for (const auto& [device, r] : response) {
    std::vector<float> c(kSpectrumBins);
    for (i64 k = 0; k < kSpectrumBins; ++k) {
      // Bins where every device is silent keep unit gain.
      const double v = reference[k] > 0.0 ? reference[k] / (r[k] + kCorrectionEps) : 1.0;
      c[k] = static_cast<float>(v > 0.0 ? v : 1.0);
    }
    out.coefficients[device] = std::move(c);
  }
  return out;
}

Tensor apply_correction(const Tensor& magnitude, const std::string& device,
                        const SpectrumCorrection& correction) {
  if (magnitude.rank() != 2 || magnitude.dim(1) != kSpectrumBins) {
    throw UsageError("apply_correction expects (frames, 2049), got " + shape_str(magnitude.shape()));
  }
  const auto* c = correction.find(device);
  if (!c) {
    log_warning("no spectrum correction for device '" + device + "'; passing through");
    return magnitude;
  }
  Tensor out = magnitude;
  for (i64 t = 0; t < out.dim(0); ++t) {
    for (i64 k = 0; k < kSpectrumBins; ++k) out[t * kSpectrumBins + k] *= (*c)[k];
  }
  return out;
}

std::vector<double> mean_magnitude_spectrum(const AudioClip& clip) {
  const Tensor power = stft_power(frame_and_window(clip));
  std::vector<double> m(kSpectrumBins, 0.0);
  for (i64 t = 0; t < power.dim(0); ++t) {
    for (i64 k = 0; k < kSpectrumBins; ++k) m[k] += std::sqrt(static_cast<double>(power[t * kSpectrumBins + k]));
  }
  for (auto& v : m) v /= static_cast<double>(power.dim(0));
  return m;
}

// ---------------------------------------------------------------------------
// Waveform augmentations

AudioClip pitch_shift(const AudioClip& clip, double factor) {
  if (!(factor > 0.0)) throw UsageError("pitch_shift factor must be positive");
  AudioClip out = clip;
  if (factor != 1.0) {
    out.samples = fit_length(resample_linear(clip.samples, 1.0 / factor), kClipSamples);
  } else {
    out.samples = fit_length(clip.samples, kClipSamples);
  }
  return out;
}

AudioClip audio_mix(const AudioClip& a, const AudioClip& b, double w) {
  if (a.scene_label != b.scene_label) {
    throw UsageError("audio_mix needs clips of the same scene (" + std::to_string(a.scene_label) +
                     " vs " + std::to_string(b.scene_label) + ")");
  }
  if (a.samples.size() != b.samples.size()) throw UsageError("audio_mix length mismatch");
  AudioClip out = a;
  const auto wa = static_cast<float>(w), wb = static_cast<float>(1.0 - w);
  for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] = wa * a.samples[i] + wb * b.samples[i];
  out.device_id = "mix";
  return out;
}

AugmentPolicy AugmentPolicy::none() {
  AugmentPolicy p;
  p.mixup = false;
  p.pitch_shift = false;
  p.audio_mix = false;
  p.spectrum_correction = false;
  return p;
}

void AugmentPolicy::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must be in [0, 1]");
  };
  prob(mixup_prob, "mixup_prob");
  prob(pitch_prob, "pitch_prob");
  prob(mix_prob, "mix_prob");
  if (!(mixup_alpha > 0.0)) throw ConfigError("mixup_alpha must be positive");
  if (!(mix_lo <= mix_hi && mix_lo >= 0.0 && mix_hi <= 1.0)) throw ConfigError("bad audio-mix range");
  if (mixup_domain != "feature" && mixup_domain != "waveform") {
    throw ConfigError("mixup_domain must be 'feature' or 'waveform'");
  }
}

}  // namespace pacn

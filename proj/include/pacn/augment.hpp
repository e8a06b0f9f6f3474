#pragma once

#include <map>
#include <string>
#include <vector>

#include "pacn/audio.hpp"
#include "pacn/rng.hpp"
#include "pacn/tensor.hpp"

namespace pacn {

struct MixedBatch {
  Tensor x;
  Tensor y;
};

/// eta * a + (1 - eta) * b, elementwise.
Tensor mixup(const Tensor& a, const Tensor& b, double eta);
/// Mixes inputs and one-hot labels with the same eta.
MixedBatch mixup(const Tensor& xi, const Tensor& yi, const Tensor& xj, const Tensor& yj, double eta);
double sample_mixup_eta(Rng& rng, double alpha);

inline constexpr double kCorrectionEps = 1e-8;

/// Per-device multiplicative coefficients on the magnitude spectrum.
struct SpectrumCorrection {
  std::map<std::string, std::vector<float>> coefficients;

  const std::vector<float>* find(const std::string& device) const;
  std::string to_csv() const;
  static SpectrumCorrection from_csv(const std::string& text);
  void save(const std::string& path) const;
  static SpectrumCorrection load(const std::string& path);
};

/// `aligned` maps device -> mean magnitude spectra (2049 bins each) of content
/// shared with the other devices.
SpectrumCorrection estimate_correction(
    const std::map<std::string, std::vector<std::vector<double>>>& aligned);

/// Magnitude spectrum (frames, 2049) times the device's coefficients. Unknown
/// devices pass through unchanged with a warning.
Tensor apply_correction(const Tensor& magnitude, const std::string& device,
                        const SpectrumCorrection& correction);

/// Mean over frames of the magnitude spectrum of one clip.
std::vector<double> mean_magnitude_spectrum(const AudioClip& clip);

inline const std::vector<double> kPitchFactors{0.90, 0.95, 1.05, 1.10};

/// Plays the clip `factor` times faster (pitch scales by factor), then fits it
/// back to one second.
AudioClip pitch_shift(const AudioClip& clip, double factor);

/// w * a + (1 - w) * b for two clips of the same scene; device becomes "mix".
AudioClip audio_mix(const AudioClip& a, const AudioClip& b, double w);

struct AugmentPolicy {
  bool mixup = true;
  double mixup_prob = 0.5;
  double mixup_alpha = 0.4;
  /// "feature" (after extraction) or "waveform".
  std::string mixup_domain = "feature";
  bool pitch_shift = true;
  double pitch_prob = 0.3;
  bool audio_mix = true;
  double mix_prob = 0.3;
  double mix_lo = 0.4;
  double mix_hi = 0.6;
  bool spectrum_correction = true;

  static AugmentPolicy none();
  void validate() const;
};

}  // namespace pacn

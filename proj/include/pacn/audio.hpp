#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pacn/tensor.hpp"

namespace pacn {

inline constexpr int kSampleRate = 44100;
inline constexpr std::int64_t kClipSamples = 44100;
inline constexpr std::int64_t kWindowLength = 4096;
inline constexpr std::int64_t kHop = 683;  // round(4096 / 6)
inline constexpr std::int64_t kFrames = 65;
inline constexpr std::int64_t kSpectrumBins = kWindowLength / 2 + 1;
inline constexpr std::int64_t kMelBands = 256;
inline constexpr double kLogFloor = 1e-10;

struct AudioClip {
  std::vector<float> samples;
  int sample_rate = kSampleRate;
  int scene_label = -1;
  std::string device_id;
  std::string city;
};

/// Reads 16-bit PCM or 32-bit float WAV (mono or stereo), downmixes, resamples
/// to 44.1 kHz and fits to exactly one second. Errors carry the path.
AudioClip read_wav(const std::string& path);
AudioClip decode_wav(const std::string& bytes, const std::string& what);
/// Mono 16-bit PCM at clip.sample_rate.
void write_wav(const std::string& path, const AudioClip& clip);
std::string encode_wav(const AudioClip& clip);

/// Linear-interpolation resampling by `ratio` = new_rate / old_rate.
std::vector<float> resample_linear(const std::vector<float>& x, double ratio);
/// Zero-pads at the end or center-crops to `length` samples.
std::vector<float> fit_length(const std::vector<float>& x, std::int64_t length);

const std::vector<double>& hamming_window();

/// (65, 4096): hop 683, symmetric zero padding, Hamming windowed.
Tensor frame_and_window(const AudioClip& clip);
/// (frames, 2049) squared magnitude of the real DFT of each row.
Tensor stft_power(const Tensor& frames);

/// Sparse triangular HTK-mel filterbank, 256 bands over bins 0..2048, peak 1.
struct MelFilterbank {
  struct Band {
    std::int64_t first_bin = 0;
    std::vector<double> weights;
  };
  std::vector<Band> bands;
  /// Dense (256, 2049) copy, for inspection.
  Tensor dense() const;
};
const MelFilterbank& mel_filterbank();
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// (frames, 2049) power -> (256, frames) log(mel + 1e-10).
Tensor mel_log(const Tensor& spec);
/// Regression delta, N = 2, edge frames replicated; (bands, frames) in and out.
Tensor delta_coefficients(const Tensor& logmel);

struct FeatureClip {
  Tensor feature;  // (256, 65, 2): log-Mel, delta
  int scene_label = -1;
  std::string device_id;
};

/// `correction`, if given, holds 2049 magnitude-spectrum coefficients; the power
/// spectrum is scaled by their squares before mel filtering.
FeatureClip extract_feature(const AudioClip& clip, const std::vector<float>* correction = nullptr);

/// "PACNFEAT" | u32 version | per clip: u8 label, length-prefixed device id,
/// 256*65*2 f32. All little-endian.
std::string serialize_features(const std::vector<FeatureClip>& clips);
std::vector<FeatureClip> deserialize_features(const std::string& bytes);
void write_feature_cache(const std::string& path, const std::vector<FeatureClip>& clips);
std::vector<FeatureClip> read_feature_cache(const std::string& path);

}  // namespace pacn

#include "pacn/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <sstream>

#include "pacn/binio.hpp"
#include "pacn/error.hpp"

namespace pacn {

using i64 = std::int64_t;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint16_t u16_at(const std::string& b, std::size_t pos) {
  return static_cast<std::uint16_t>(static_cast<std::uint8_t>(b[pos]) |
                                    (static_cast<std::uint8_t>(b[pos + 1]) << 8));
}

std::uint32_t u32_at(const std::string& b, std::size_t pos) {
  return static_cast<std::uint32_t>(u16_at(b, pos)) | (static_cast<std::uint32_t>(u16_at(b, pos + 2)) << 16);
}

}  // namespace

// ---------------------------------------------------------------------------
// WAV

AudioClip decode_wav(const std::string& b, const std::string& what) {
  auto fail = [&](const std::string& msg) -> IngestionError {
    return IngestionError(what + ": " + msg);
  };
  if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0) {
    throw fail("not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t data_pos = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= b.size()) {
    const std::string id = b.substr(pos, 4);
    const std::size_t len = u32_at(b, pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (len < 16 || body + len > b.size()) throw fail("truncated fmt chunk");
      format = u16_at(b, body);
      channels = u16_at(b, body + 2);
      rate = u32_at(b, body + 4);
      bits = u16_at(b, body + 14);
      if (format == 0xFFFE && len >= 26) format = u16_at(b, body + 24);
      have_fmt = true;
    } else if (id == "data") {
      data_pos = body;
      data_len = std::min(len, b.size() - body);
      break;
    }
    pos = body + len + (len & 1);
  }
  if (!have_fmt) throw fail("missing fmt chunk");
  if (data_pos == 0) throw fail("missing data chunk");
  if (channels < 1) throw fail("zero channels");
  if (rate == 0) throw fail("zero sample rate");
  const bool pcm16 = format == 1 && bits == 16;
  const bool float32 = format == 3 && bits == 32;
  if (!pcm16 && !float32) {
    throw fail("unsupported encoding (format " + std::to_string(format) + ", " +
               std::to_string(bits) + " bits); expected 16-bit PCM or 32-bit float");
  }
  const std::size_t bytes_per = bits / 8;
  const std::size_t frames = data_len / (bytes_per * channels);
  std::vector<float> mono(frames, 0.0f);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t at = data_pos + (i * channels + c) * bytes_per;
      if (pcm16) {
        acc += static_cast<std::int16_t>(u16_at(b, at)) / 32768.0;
      } else {
        acc += std::bit_cast<float>(u32_at(b, at));
      }
    }
    mono[i] = static_cast<float>(acc / channels);
  }
  AudioClip clip;
  if (static_cast<int>(rate) != kSampleRate) {
    mono = resample_linear(mono, static_cast<double>(kSampleRate) / rate);
  }
  clip.samples = fit_length(mono, kClipSamples);
  clip.sample_rate = kSampleRate;
  return clip;
}

AudioClip read_wav(const std::string& path) { return decode_wav(read_file(path), path); }

std::string encode_wav(const AudioClip& clip) {
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  std::string out = "RIFF";
  binio::put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  binio::put_u32(out, 16);
  binio::put_u32(out, 1 | (1u << 16));  // PCM, mono
  binio::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  binio::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  binio::put_u32(out, 2 | (16u << 16));  // block align, bits
  out += "data";
  binio::put_u32(out, 2 * n);
  for (float s : clip.samples) {
    const double v = std::clamp(static_cast<double>(s), -1.0, 32767.0 / 32768.0);
    const auto q = static_cast<std::int16_t>(std::lround(v * 32768.0));
    const auto u = static_cast<std::uint16_t>(q);
    out.push_back(static_cast<char>(u & 0xff));
    out.push_back(static_cast<char>(u >> 8));
  }
  return out;
}

void write_wav(const std::string& path, const AudioClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::string bytes = encode_wav(clip);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<float> resample_linear(const std::vector<float>& x, double ratio) {
  if (!(ratio > 0.0)) throw UsageError("resample ratio must be positive");
  if (x.empty()) return {};
  const auto n = static_cast<i64>(std::llround(static_cast<double>(x.size()) * ratio));
  std::vector<float> y(static_cast<std::size_t>(std::max<i64>(n, 1)));
  const i64 last = static_cast<i64>(x.size()) - 1;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double src = static_cast<double>(i) / ratio;
    const auto j = static_cast<i64>(std::floor(src));
    if (j >= last) {
      y[i] = j == last && src == static_cast<double>(last) ? x[last] : 0.0f;
      continue;
    }
    const double frac = src - static_cast<double>(j);
    y[i] = static_cast<float>((1.0 - frac) * x[j] + frac * x[j + 1]);
  }
  return y;
}

std::vector<float> fit_length(const std::vector<float>& x, i64 length) {
  const auto n = static_cast<i64>(x.size());
  if (n <= length) {
    std::vector<float> y(x);
    y.resize(static_cast<std::size_t>(length), 0.0f);
    return y;
  }
  const i64 start = (n - length) / 2;
  return {x.begin() + start, x.begin() + start + length};
}

// ---------------------------------------------------------------------------
// Framing and STFT

const std::vector<double>& hamming_window() {
  static const std::vector<double> w = [] {
    std::vector<double> v(kWindowLength);
    for (i64 i = 0; i < kWindowLength; ++i) {
      v[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (kWindowLength - 1));
    }
    return v;
  }();
  return w;
}

Tensor frame_and_window(const AudioClip& clip) {
  if (static_cast<i64>(clip.samples.size()) != kClipSamples) {
    throw UsageError("frame_and_window expects " + std::to_string(kClipSamples) + " samples, got " +
                     std::to_string(clip.samples.size()));
  }
  const i64 span = (kFrames - 1) * kHop + kWindowLength;
  const i64 pad = (span - kClipSamples) / 2;
  const auto& w = hamming_window();
  Tensor out({kFrames, kWindowLength});
  for (i64 f = 0; f < kFrames; ++f) {
    for (i64 i = 0; i < kWindowLength; ++i) {
      const i64 s = f * kHop + i - pad;
      if (s >= 0 && s < kClipSamples) {
        out[f * kWindowLength + i] = static_cast<float>(clip.samples[s] * w[i]);
      }
    }
  }
  return out;
}

namespace {

struct FftPlan {
  fftw_plan plan = nullptr;
  FftPlan() {
    auto* in = fftw_alloc_real(kWindowLength);
    auto* out = fftw_alloc_complex(kSpectrumBins);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(kWindowLength), in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
  }
};

const FftPlan& fft_plan() {
  // Planner calls are not thread-safe; function-local static init is.
  static const FftPlan p;
  return p;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};

}  // namespace

Tensor stft_power(const Tensor& frames) {
  if (frames.rank() != 2 || frames.dim(1) != kWindowLength) {
    throw UsageError("stft_power expects (frames, 4096), got " + shape_str(frames.shape()));
  }
  const i64 n = frames.dim(0);
  std::unique_ptr<double, FftwFree> in(fftw_alloc_real(kWindowLength));
  std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(kSpectrumBins));
  Tensor power({n, kSpectrumBins});
  const auto plan = fft_plan().plan;
  for (i64 f = 0; f < n; ++f) {
    for (i64 i = 0; i < kWindowLength; ++i) in.get()[i] = frames[f * kWindowLength + i];
    fftw_execute_dft_r2c(plan, in.get(), out.get());
    for (i64 k = 0; k < kSpectrumBins; ++k) {
      const double re = out.get()[k][0], im = out.get()[k][1];
      power[f * kSpectrumBins + k] = static_cast<float>(re * re + im * im);
    }
  }
  return power;
}

// ---------------------------------------------------------------------------
// Mel

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

const MelFilterbank& mel_filterbank() {
  static const MelFilterbank fb = [] {
    MelFilterbank m;
    const double top = hz_to_mel(kSampleRate / 2.0);
    std::vector<double> edges(kMelBands + 2);
    for (i64 i = 0; i < kMelBands + 2; ++i) edges[i] = mel_to_hz(top * i / (kMelBands + 1));
    const double bin_hz = static_cast<double>(kSampleRate) / kWindowLength;
    for (i64 b = 0; b < kMelBands; ++b) {
      const double lo = edges[b], mid = edges[b + 1], hi = edges[b + 2];
      MelFilterbank::Band band;
      band.first_bin = -1;
      for (i64 k = 0; k < kSpectrumBins; ++k) {
        const double f = k * bin_hz;
        const double w = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
        if (w <= 0.0) {
          if (band.first_bin >= 0) break;
          continue;
        }
        if (band.first_bin < 0) band.first_bin = k;
        band.weights.push_back(w);
      }
      if (band.first_bin < 0) {
        // Narrower than one bin: fall back to the bin nearest the centre.
        band.first_bin = std::lround(mid / bin_hz);
        band.weights = {1.0};
      }
      m.bands.push_back(std::move(band));
    }
    return m;
  }();
  return fb;
}

Tensor MelFilterbank::dense() const {
  Tensor out({static_cast<i64>(bands.size()), kSpectrumBins});
  for (std::size_t b = 0; b < bands.size(); ++b) {
    for (std::size_t j = 0; j < bands[b].weights.size(); ++j) {
      out[static_cast<i64>(b) * kSpectrumBins + bands[b].first_bin + static_cast<i64>(j)] =
          static_cast<float>(bands[b].weights[j]);
    }
  }
  return out;
}

Tensor mel_log(const Tensor& spec) {
  if (spec.rank() != 2 || spec.dim(1) != kSpectrumBins) {
    throw UsageError("mel_log expects (frames, 2049), got " + shape_str(spec.shape()));
  }
  const i64 frames = spec.dim(0);
  const auto& fb = mel_filterbank();
  Tensor out({kMelBands, frames});
  for (i64 b = 0; b < kMelBands; ++b) {
    const auto& band = fb.bands[b];
    for (i64 t = 0; t < frames; ++t) {
      const float* row = spec.ptr() + t * kSpectrumBins + band.first_bin;
      double acc = 0.0;
      for (std::size_t j = 0; j < band.weights.size(); ++j) acc += band.weights[j] * row[j];
      out[b * frames + t] = static_cast<float>(std::log(acc + kLogFloor));
    }
  }
  return out;
}

Tensor delta_coefficients(const Tensor& c) {
  if (c.rank() != 2) throw UsageError("delta_coefficients expects (bands, frames)");
  const i64 B = c.dim(0), T = c.dim(1);
  Tensor d({B, T});
  for (i64 b = 0; b < B; ++b) {
    const float* row = c.ptr() + b * T;
    auto at = [&](i64 t) { return static_cast<double>(row[std::clamp<i64>(t, 0, T - 1)]); };
    for (i64 t = 0; t < T; ++t) {
      const double num = (at(t + 1) - at(t - 1)) + 2.0 * (at(t + 2) - at(t - 2));
      d[b * T + t] = static_cast<float>(num / 10.0);
    }
  }
  return d;
}

FeatureClip extract_feature(const AudioClip& clip, const std::vector<float>* correction) {
  Tensor power = stft_power(frame_and_window(clip));
  if (correction) {
    if (static_cast<i64>(correction->size()) != kSpectrumBins) {
      throw UsageError("correction vector must have 2049 bins");
    }
    for (i64 t = 0; t < power.dim(0); ++t) {
      for (i64 k = 0; k < kSpectrumBins; ++k) {
        const float c = (*correction)[k];
        power[t * kSpectrumBins + k] *= c * c;
      }
    }
  }
  const Tensor logmel = mel_log(power);
  const Tensor delta = delta_coefficients(logmel);
  FeatureClip out;
  out.feature = Tensor({kMelBands, kFrames, 2});
  for (i64 b = 0; b < kMelBands; ++b) {
    for (i64 t = 0; t < kFrames; ++t) {
      out.feature[(b * kFrames + t) * 2] = logmel[b * kFrames + t];
      out.feature[(b * kFrames + t) * 2 + 1] = delta[b * kFrames + t];
    }
  }
  out.scene_label = clip.scene_label;
  out.device_id = clip.device_id;
  return out;
}

// ---------------------------------------------------------------------------
// Feature cache

namespace {
constexpr char kFeatMagic[] = "PACNFEAT";
constexpr std::uint32_t kFeatVersion = 1;
constexpr i64 kFeatValues = kMelBands * kFrames * 2;
}  // namespace

std::string serialize_features(const std::vector<FeatureClip>& clips) {
  std::string out(kFeatMagic, 8);
  binio::put_u32(out, kFeatVersion);
  for (const auto& c : clips) {
    if (c.feature.size() != kFeatValues) throw UsageError("feature must be (256, 65, 2)");
    if (c.scene_label < 0 || c.scene_label > 255) throw UsageError("label out of u8 range");
    out.push_back(static_cast<char>(c.scene_label));
    binio::put_string(out, c.device_id);
    for (float v : c.feature.data()) binio::put_f32(out, v);
  }
  return out;
}

std::vector<FeatureClip> deserialize_features(const std::string& bytes) {
  binio::Reader r(bytes, "feature cache");
  if (r.bytes(8) != std::string(kFeatMagic, 8)) throw IngestionError("feature cache: bad magic");
  if (r.u32() != kFeatVersion) throw IngestionError("feature cache: unsupported version");
  std::vector<FeatureClip> out;
  while (!r.done()) {
    FeatureClip c;
    c.scene_label = r.u8();
    c.device_id = r.string();
    c.feature = Tensor({kMelBands, kFrames, 2});
    for (auto& v : c.feature.data()) v = r.f32();
    out.push_back(std::move(c));
  }
  return out;
}

void write_feature_cache(const std::string& path, const std::vector<FeatureClip>& clips) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  const std::string bytes = serialize_features(clips);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<FeatureClip> read_feature_cache(const std::string& path) {
  return deserialize_features(read_file(path));
}

}  // namespace pacn

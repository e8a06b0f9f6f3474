#include "doctest.h"

#include <cmath>
#include <numbers>

#include "pacn/audio.hpp"
#include "pacn/augment.hpp"
#include "pacn/binio.hpp"
#include "pacn/rng.hpp"

using namespace pacn;

namespace {

std::string wav_bytes(std::uint16_t format, std::uint16_t channels, std::uint32_t rate, std::uint16_t bits,
                      const std::string& data) {
  std::string out = "RIFF";
  binio::put_u32(out, static_cast<std::uint32_t>(36 + data.size()));
  out += "WAVEfmt ";
  binio::put_u32(out, 16);
  auto put_u16 = [&](std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
  };
  put_u16(format);
  put_u16(channels);
  binio::put_u32(out, rate);
  binio::put_u32(out, rate * channels * bits / 8);
  put_u16(static_cast<std::uint16_t>(channels * bits / 8));
  put_u16(bits);
  out += "data";
  binio::put_u32(out, static_cast<std::uint32_t>(data.size()));
  return out + data;
}

AudioClip tone(double hz, double amp = 0.5) {
  AudioClip c;
  c.samples.resize(kClipSamples);
  for (std::int64_t i = 0; i < kClipSamples; ++i)
    c.samples[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * hz * i / kSampleRate));
  return c;
}

double peak_hz(const AudioClip& c) {
  const auto m = mean_magnitude_spectrum(c);
  std::size_t best = 1;
  for (std::size_t k = 1; k < m.size(); ++k)
    if (m[k] > m[best]) best = k;
  return static_cast<double>(best) * kSampleRate / kWindowLength;
}

AudioClip noise(std::uint64_t seed) {
  Rng rng(seed);
  AudioClip c;
  c.samples.resize(kClipSamples);
  for (auto& v : c.samples) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  return c;
}

AudioClip fir(const AudioClip& c, double a) {
  AudioClip out = c;
  for (std::size_t i = 1; i < c.samples.size(); ++i)
    out.samples[i] = static_cast<float>((c.samples[i] + a * c.samples[i - 1]) / (1 + std::abs(a)));
  return out;
}

}  // namespace

TEST_CASE("wav ingestion examples") {
  SUBCASE("16-bit scaling") {
    std::string data;
    for (int i = 0; i < 4; ++i) {
      data.push_back(0x00);
      data.push_back(0x40);  // 16384
    }
    const AudioClip c = decode_wav(wav_bytes(1, 1, 44100, 16, data), "mem");
    CHECK(c.samples.size() == 44100);
    CHECK(c.samples[0] == 0.5f);
    CHECK(c.samples[4] == 0.0f);
  }
  SUBCASE("stereo float average") {
    std::string data;
    for (int i = 0; i < 3; ++i) {
      binio::put_f32(data, 0.2f);
      binio::put_f32(data, 0.4f);
    }
    const AudioClip c = decode_wav(wav_bytes(3, 2, 44100, 32, data), "mem");
    CHECK(std::abs(c.samples[1] - 0.3f) < 1e-7);
  }
  SUBCASE("half-second clip is padded") {
    std::string data(22050 * 2, '\x10');
    const AudioClip c = decode_wav(wav_bytes(1, 1, 44100, 16, data), "mem");
    CHECK(c.samples.size() == 44100);
    CHECK(c.samples[22049] != 0.0f);
    CHECK(c.samples[22050] == 0.0f);
    CHECK(c.samples[44099] == 0.0f);
  }
  SUBCASE("resampled to 44.1 kHz") {
    std::string data(22050 * 2, '\x00');
    CHECK(decode_wav(wav_bytes(1, 1, 22050, 16, data), "mem").samples.size() == 44100);
  }
  SUBCASE("compressed formats rejected with the path") {
    try {
      decode_wav(wav_bytes(2, 1, 44100, 4, std::string(64, '\0')), "clip/x.wav");
      FAIL("expected an ingestion error");
    } catch (const IngestionError& e) {
      CHECK(std::string(e.what()).find("clip/x.wav") != std::string::npos);
    }
    CHECK_THROWS_AS(decode_wav("not a wav", "y.wav"), IngestionError);
  }
  SUBCASE("encode round trip") {
    AudioClip c = tone(1000.0);
    const AudioClip back = decode_wav(encode_wav(c), "mem");
    for (std::size_t i = 0; i < c.samples.size(); i += 97) CHECK(std::abs(back.samples[i] - c.samples[i]) < 1.0 / 32768);
  }
}

TEST_CASE("framing") {
  AudioClip zero;
  zero.samples.assign(kClipSamples, 0.0f);
  const Tensor fz = frame_and_window(zero);
  CHECK(fz.shape() == Shape{65, 4096});
  for (float v : fz.vec()) CHECK(v == 0.0f);
  AudioClip one;
  one.samples.assign(kClipSamples, 1.0f);
  const Tensor f1 = frame_and_window(one);
  const auto& w = hamming_window();
  CHECK(w.size() == 4096);
  CHECK(std::abs(w[0] - 0.08) < 1e-12);
  CHECK(w[0] == w[4095]);
  for (int i = 0; i < 4096; ++i) CHECK(f1.at(32, i) == static_cast<float>(w[i]));
  // Symmetric padding: first and last frames see the same amount of signal.
  double first = 0, last = 0;
  for (int i = 0; i < 4096; ++i) {
    first += f1.at(0, i) != 0.0f;
    last += f1.at(64, i) != 0.0f;
  }
  CHECK(std::abs(first - last) <= 1);
}

TEST_CASE("stft power") {
  Tensor frames({2, 4096});
  for (int i = 0; i < 4096; ++i) frames.at(1, i) = static_cast<float>(std::cos(2 * std::numbers::pi * 16 * i / 4096.0));
  const Tensor p = stft_power(frames);
  CHECK(p.shape() == Shape{2, 2049});
  for (int k = 0; k < 2049; ++k) CHECK(p.at(0, k) == 0.0f);
  double total = 0;
  for (int k = 0; k < 2049; ++k) total += p.at(1, k);
  CHECK(p.at(1, 16) / total >= 0.99);

  Rng rng(3);
  Tensor r({1, 4096});
  double energy = 0;
  for (int i = 0; i < 4096; ++i) {
    r[i] = static_cast<float>(rng.uniform(-1, 1) * hamming_window()[i]);
    energy += static_cast<double>(r[i]) * r[i];
  }
  const Tensor pr = stft_power(r);
  double s = pr[0] + pr[2048];
  for (int k = 1; k < 2048; ++k) s += 2.0 * pr[k];
  CHECK(std::abs(s - 4096 * energy) / (4096 * energy) < 1e-3);
}

TEST_CASE("mel filterbank") {
  const auto& fb = mel_filterbank();
  REQUIRE(fb.bands.size() == 256);
  std::int64_t covered_to = fb.bands[0].first_bin;
  for (const auto& b : fb.bands) {
    double area = 0;
    int direction_changes = 0;
    for (std::size_t j = 0; j < b.weights.size(); ++j) {
      CHECK(b.weights[j] >= 0.0);
      area += b.weights[j];
      if (j >= 2 && (b.weights[j] - b.weights[j - 1]) * (b.weights[j - 1] - b.weights[j - 2]) < 0) ++direction_changes;
    }
    CHECK(area > 0.0);
    CHECK(direction_changes <= 1);
    CHECK(b.first_bin <= covered_to);
    covered_to = std::max<std::int64_t>(covered_to, b.first_bin + static_cast<std::int64_t>(b.weights.size()));
  }
  CHECK(std::abs(hz_to_mel(mel_to_hz(1234.5)) - 1234.5) < 1e-9);
  CHECK(std::abs(hz_to_mel(700.0) - 2595.0 * std::log10(2.0)) < 1e-9);

  const Tensor zero = mel_log(Tensor({3, 2049}));
  CHECK(zero.shape() == Shape{256, 3});
  for (float v : zero.vec()) CHECK(v == static_cast<float>(std::log(1e-10)));

  const Tensor dense = fb.dense();
  const Tensor white = mel_log(Tensor({1, 2049}, 1.0f));
  for (int b = 0; b < 256; ++b) {
    double area = 0;
    for (int k = 0; k < 2049; ++k) area += dense.at(b, k);
    CHECK(std::abs(white.at(b, 0) - std::log(area + 1e-10)) < 1e-5);
  }
}

TEST_CASE("delta coefficients") {
  Tensor c({256, 65}, 3.0f);
  const Tensor dc = delta_coefficients(c);
  for (float v : dc.vec()) CHECK(v == 0.0f);
  Tensor ramp({2, 65});
  for (int t = 0; t < 65; ++t) ramp.at(0, t) = ramp.at(1, t) = static_cast<float>(t);
  const Tensor d = delta_coefficients(ramp);
  for (int t = 2; t < 63; ++t) CHECK(d.at(0, t) == 1.0f);
  Rng rng(4);
  Tensor r({256, 65});
  for (auto& v : r.data()) v = static_cast<float>(rng.uniform(-20, 5));
  const Tensor dr = delta_coefficients(r);
  for (int b = 0; b < 256; ++b)
    for (int t = 0; t < 65; ++t) {
      double num = 0;
      for (int n = 1; n <= 2; ++n) {
        const double up = r.at(b, std::min(t + n, 64)), down = r.at(b, std::max(t - n, 0));
        num += n * (up - down);
      }
      CHECK(std::abs(dr.at(b, t) - num / 10.0) < 1e-6);
    }
}

TEST_CASE("feature extraction") {
  AudioClip silence;
  silence.samples.assign(kClipSamples, 0.0f);
  const FeatureClip fs = extract_feature(silence);
  CHECK(fs.feature.shape() == Shape{256, 65, 2});
  for (std::int64_t i = 1; i < fs.feature.size(); i += 2) CHECK(fs.feature[i] == 0.0f);
  const AudioClip n = noise(5);
  const FeatureClip a = extract_feature(n), b = extract_feature(n);
  CHECK(a.feature.shape() == Shape{256, 65, 2});
  CHECK(a.feature.vec() == b.feature.vec());
  for (float v : a.feature.vec()) CHECK(std::isfinite(v));

  std::vector<FeatureClip> clips{a, fs};
  clips[1].scene_label = 0;
  clips[0].scene_label = 3;
  clips[0].device_id = "s2";
  const auto back = deserialize_features(serialize_features(clips));
  REQUIRE(back.size() == 2);
  CHECK(back[0].scene_label == 3);
  CHECK(back[0].device_id == "s2");
  CHECK(back[0].feature.vec() == a.feature.vec());
}

TEST_CASE("mixup") {
  const Tensor a({2, 3}, 2.0f), b({2, 3}, 4.0f);
  CHECK(mixup(a, b, 1.0).vec() == a.vec());
  CHECK(mixup(a, b, 0.0).vec() == b.vec());
  CHECK(mixup(a, b, 0.5)[0] == 3.0f);
  const Tensor ya({1, 2}, std::vector<float>{1, 0}), yb({1, 2}, std::vector<float>{0, 1});
  const auto m = mixup(Tensor({1, 3}, 2.0f), ya, Tensor({1, 3}, 4.0f), yb, 0.25);
  CHECK(m.y.vec() == std::vector<float>{0.25f, 0.75f});
  CHECK_THROWS_AS(mixup(a, Tensor({3, 2}), 0.5), UsageError);
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    const double eta = sample_mixup_eta(rng, 0.4);
    CHECK(eta >= 0.0);
    CHECK(eta <= 1.0);
  }
}

TEST_CASE("spectrum correction") {
  SUBCASE("examples") {
    const std::vector<double> s(2049, 2.5);
    auto single = estimate_correction({{"a", {s}}});
    for (float c : single.coefficients["a"]) CHECK(std::abs(c - 1.0f) < 1e-6);
    auto two = estimate_correction({{"a", {std::vector<double>(2049, 1.0)}}, {"b", {std::vector<double>(2049, 3.0)}}});
    CHECK(std::abs(two.coefficients["a"][7] - 2.0f) < 1e-6);
    CHECK(std::abs(two.coefficients["b"][7] - 2.0f / 3.0f) < 1e-6);
    CHECK_THROWS_AS(estimate_correction({}), UsageError);
  }
  SUBCASE("apply") {
    Rng rng(1);
    Tensor mag({2, 2049});
    for (auto& v : mag.data()) v = static_cast<float>(rng.uniform(0, 1));
    SpectrumCorrection ones;
    ones.coefficients["a"] = std::vector<float>(2049, 1.0f);
    CHECK(apply_correction(mag, "a", ones).vec() == mag.vec());
    SpectrumCorrection spike = ones;
    spike.coefficients["a"][100] = 2.0f;
    const Tensor out = apply_correction(mag, "a", spike);
    CHECK(out.at(1, 100) == 2.0f * mag.at(1, 100));
    CHECK(out.at(1, 101) == mag.at(1, 101));
    CHECK(apply_correction(mag, "unseen", spike).vec() == mag.vec());
    const auto back = SpectrumCorrection::from_csv(spike.to_csv());
    CHECK(back.coefficients == spike.coefficients);
  }
  SUBCASE("fixed point") {
    Rng rng(2);
    std::map<std::string, std::vector<std::vector<double>>> spectra;
    for (const char* d : {"a", "b", "c"}) {
      for (int i = 0; i < 3; ++i) {
        std::vector<double> s(2049);
        for (auto& v : s) v = rng.uniform(0.1, 2.0);
        spectra[d].push_back(s);
      }
    }
    const auto corr = estimate_correction(spectra);
    auto corrected = spectra;
    for (auto& [d, list] : corrected)
      for (auto& s : list)
        for (std::size_t k = 0; k < s.size(); ++k) s[k] *= corr.coefficients.at(d)[k];
    for (const auto& [d, c] : estimate_correction(corrected).coefficients)
      for (float v : c) CHECK(std::abs(v - 1.0f) < 1e-3);
    for (const auto& [d, c] : corr.coefficients)
      for (float v : c) CHECK((v > 0.0f && std::isfinite(v)));
  }
  SUBCASE("simulated device filters") {
    const std::vector<double> taps{0.0, 0.6, -0.5};
    std::map<std::string, std::vector<std::vector<double>>> aligned;
    for (int clip = 0; clip < 3; ++clip) {
      const AudioClip x = noise(100 + clip);
      for (std::size_t d = 0; d < taps.size(); ++d)
        aligned["d" + std::to_string(d)].push_back(mean_magnitude_spectrum(fir(x, taps[d])));
    }
    const auto corr = estimate_correction(aligned);
    const AudioClip probe = noise(999);
    std::vector<std::vector<double>> fixed;
    for (std::size_t d = 0; d < taps.size(); ++d) {
      auto m = mean_magnitude_spectrum(fir(probe, taps[d]));
      for (std::size_t k = 0; k < m.size(); ++k) m[k] *= corr.coefficients.at("d" + std::to_string(d))[k];
      fixed.push_back(m);
    }
    double worst = 0, worst_raw = 0;
    auto raw0 = mean_magnitude_spectrum(fir(probe, taps[1]));
    auto raw1 = mean_magnitude_spectrum(fir(probe, taps[2]));
    for (std::size_t k = 1; k < 2048; ++k) {
      for (std::size_t d = 1; d < taps.size(); ++d) worst = std::max(worst, std::abs(fixed[d][k] / fixed[0][k] - 1.0));
      worst_raw = std::max(worst_raw, std::abs(raw0[k] / raw1[k] - 1.0));
    }
    CHECK(worst < 0.10);
    CHECK(worst_raw > 0.5);
  }
}

TEST_CASE("pitch shift") {
  const AudioClip a = tone(440.0);
  const AudioClip same = pitch_shift(a, 1.0);
  for (std::size_t i = 0; i < a.samples.size(); ++i) CHECK(std::abs(same.samples[i] - a.samples[i]) < 1e-6);
  const double bin = static_cast<double>(kSampleRate) / kWindowLength;
  CHECK(std::abs(peak_hz(pitch_shift(a, 1.10)) - 484.0) <= bin);
  for (double f : kPitchFactors) CHECK(pitch_shift(a, f).samples.size() == 44100);
  CHECK_THROWS_AS(pitch_shift(a, 0.0), UsageError);
  CHECK(std::abs(resample_linear({0, 1, 2, 3}, 2.0)[3] - 1.5f) < 1e-7);
}

TEST_CASE("audio mix") {
  AudioClip a = noise(1), b = noise(2);
  a.scene_label = b.scene_label = 2;
  const AudioClip same = audio_mix(a, a, 0.5);
  CHECK(same.samples == a.samples);
  CHECK(same.device_id == "mix");
  CHECK(same.scene_label == 2);
  b.scene_label = 3;
  CHECK_THROWS_AS(audio_mix(a, b, 0.5), UsageError);
  b.scene_label = 2;
  auto energy = [](const AudioClip& c) {
    double e = 0;
    for (float v : c.samples) e += static_cast<double>(v) * v;
    return e;
  };
  for (double w : {0.4, 0.5, 0.6}) CHECK(energy(audio_mix(a, b, w)) <= std::max(energy(a), energy(b)) + 1e-6);
}

TEST_CASE("augment policy") {
  AugmentPolicy p;
  p.validate();
  p.mixup_domain = "phase";
  CHECK_THROWS(p.validate());
  const auto none = AugmentPolicy::none();
  CHECK(!none.mixup);
  CHECK(!none.pitch_shift);
  CHECK(!none.audio_mix);
  CHECK(!none.spectrum_correction);
}

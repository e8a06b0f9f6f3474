#include "pacn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pacn/error.hpp"
#include "pacn/log.hpp"
#include "pacn/rng.hpp"

namespace pacn {

namespace fs = std::filesystem;
using json = nlohmann::json;

const std::vector<std::string>& scene_labels() {
  static const std::vector<std::string> labels{
      "airport", "shopping_mall", "metro_station", "street_pedestrian", "public_square",
      "street_traffic", "tram", "bus", "metro", "park"};
  return labels;
}

int scene_index(const std::string& label) {
  const auto& l = scene_labels();
  auto it = std::find(l.begin(), l.end(), label);
  if (it == l.end()) throw ConfigError("unknown scene label '" + label + "'");
  return static_cast<int>(it - l.begin());
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<ClipRecord> parse_manifest_text(const std::string& text, const std::string& what) {
  std::vector<ClipRecord> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (line_no == 1 && !f.empty() && f[0] == "filename") continue;
    if (f.size() != 4) {
      throw IngestionError(what + ":" + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                           std::to_string(f.size()));
    }
    ClipRecord r;
    r.path = f[0];
    try {
      r.label = scene_index(f[1]);
    } catch (const ConfigError&) {
      throw IngestionError(what + ":" + std::to_string(line_no) + ": unknown scene label '" + f[1] + "'");
    }
    r.device = f[2];
    r.city = f[3];
    if (r.path.empty() || r.device.empty()) {
      throw IngestionError(what + ":" + std::to_string(line_no) + ": empty filename or device");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ClipRecord> parse_manifest(const std::string& path) {
  return parse_manifest_text(slurp(path), path);
}

std::string format_manifest(const std::vector<ClipRecord>& records) {
  std::string out = "filename\tscene_label\tdevice_id\tcity\n";
  for (const auto& r : records) {
    out += r.path + "\t" + scene_labels().at(static_cast<std::size_t>(r.label)) + "\t" + r.device + "\t" +
           r.city + "\n";
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<ClipRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << format_manifest(records);
}

std::string content_key(const ClipRecord& record) {
  std::string stem = fs::path(record.path).stem().string();
  const auto dash = stem.rfind('-');
  if (dash != std::string::npos && stem.substr(dash + 1) == record.device) stem.resize(dash);
  return stem;
}

void split_by_content(const std::vector<ClipRecord>& records, double val_fraction, std::uint64_t seed,
                      std::vector<ClipRecord>& train, std::vector<ClipRecord>& val) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  std::map<int, std::set<std::string>> keys_by_label;
  for (const auto& r : records) keys_by_label[r.label].insert(content_key(r));
  std::set<std::string> held;
  for (const auto& [label, keys] : keys_by_label) {
    std::vector<std::string> k(keys.begin(), keys.end());
    Rng rng(derive_seed({seed, 0x5b117, static_cast<std::uint64_t>(label)}));
    rng.shuffle(k.begin(), k.end());
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(k.size())));
    held.insert(k.begin(), k.begin() + static_cast<std::ptrdiff_t>(n_val));
  }
  train.clear();
  val.clear();
  for (const auto& r : records) (held.count(content_key(r)) ? val : train).push_back(r);
}

// ---------------------------------------------------------------------------
// Synthetic data

void SynthSpec::validate() const {
  if (classes < 2 || classes > 10) throw ConfigError("synth classes must be in 2..10");
  if (clips_per_class < 1) throw ConfigError("synth clips_per_class must be >= 1");
  if (devices < 1 || devices > 9) throw ConfigError("synth devices must be in 1..9");
  if (!(noise_floor >= 0.0)) throw ConfigError("synth noise_floor must be >= 0");
}

std::string SynthSpec::to_json() const {
  json j{{"classes", classes},
         {"clips_per_class", clips_per_class},
         {"devices", devices},
         {"seed", seed},
         {"noise_floor", noise_floor}};
  return j.dump(2);
}

SynthSpec SynthSpec::from_json(const std::string& text) {
  SynthSpec s;
  try {
    const json j = json::parse(text);
    s.classes = j.value("classes", s.classes);
    s.clips_per_class = j.value("clips_per_class", s.clips_per_class);
    s.devices = j.value("devices", s.devices);
    s.seed = j.value("seed", s.seed);
    s.noise_floor = j.value("noise_floor", s.noise_floor);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

SynthSpec SynthSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open synth spec " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

const std::vector<std::string>& device_names() {
  static const std::vector<std::string> names{"a", "b", "c", "s1", "s2", "s3", "s4", "s5", "s6"};
  return names;
}

double class_center_hz(int label) { return 250.0 * std::pow(2.0, 0.55 * label); }

namespace {

const std::vector<std::string> kCities{"barcelona", "helsinki", "lisbon", "london", "lyon",
                                       "milan",     "paris",    "prague", "stockholm", "vienna"};

struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

  void run(std::vector<double>& x) const {
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (auto& v : x) {
      const double y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
      x2 = x1;
      x1 = v;
      y2 = y1;
      y1 = y;
      v = y;
    }
  }

  static Biquad normalized(double b0, double b1, double b2, double a0, double a1, double a2) {
    return {b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0};
  }

  static Biquad bandpass(double f0, double q) {
    const double w = 2.0 * std::numbers::pi * f0 / kSampleRate;
    const double alpha = std::sin(w) / (2.0 * q);
    return normalized(alpha, 0.0, -alpha, 1.0 + alpha, -2.0 * std::cos(w), 1.0 - alpha);
  }

  static Biquad shelf(double f0, double gain_db, bool high) {
    const double A = std::pow(10.0, gain_db / 40.0);
    const double w = 2.0 * std::numbers::pi * f0 / kSampleRate;
    const double cw = std::cos(w);
    const double beta = 2.0 * std::sqrt(A) * std::sin(w) / 2.0 * std::sqrt(2.0);
    if (high) {
      return normalized(A * ((A + 1) + (A - 1) * cw + beta), -2 * A * ((A - 1) + (A + 1) * cw),
                        A * ((A + 1) + (A - 1) * cw - beta), (A + 1) - (A - 1) * cw + beta,
                        2 * ((A - 1) - (A + 1) * cw), (A + 1) - (A - 1) * cw - beta);
    }
    return normalized(A * ((A + 1) - (A - 1) * cw + beta), 2 * A * ((A - 1) - (A + 1) * cw),
                      A * ((A + 1) - (A - 1) * cw - beta), (A + 1) + (A - 1) * cw + beta,
                      -2 * ((A - 1) + (A + 1) * cw), (A + 1) + (A - 1) * cw - beta);
  }
};

// (low-shelf dB at 400 Hz, high-shelf dB at 3 kHz) per device.
constexpr double kDeviceTilt[9][2] = {{0, 0},  {6, -8},  {-5, 6}, {4, 4}, {-6, -3},
                                      {3, -10}, {-8, 2}, {8, -4}, {-3, 9}};

std::vector<double> band_noise(Rng& rng, double fc, double q, std::size_t n) {
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal();
  Biquad::bandpass(fc, q).run(x);
  Biquad::bandpass(fc, q).run(x);
  return x;
}

double rms(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

}  // namespace

AudioClip synth_clip(const SynthSpec& spec, int label, int content, int device) {
  const std::size_t n = kClipSamples;
  const double two_pi = 2.0 * std::numbers::pi;
  Rng rng(derive_seed({spec.seed, 0xc11b, static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(content)}));

  // Class texture: band noise around the class centre plus two class tones.
  const double fc = class_center_hz(label) * rng.uniform(0.92, 1.08);
  std::vector<double> x = band_noise(rng, fc, rng.uniform(1.5, 3.0), n);
  const double r = rms(x);
  for (auto& v : x) v /= r > 0 ? r : 1.0;
  const double tones[2] = {class_center_hz(label) * (0.5 + 0.05 * label), class_center_hz(label) * (3.1 - 0.1 * label)};
  for (double f0 : tones) {
    const double f = f0 * rng.uniform(0.96, 1.04);
    const double amp = rng.uniform(0.3, 0.9);
    const double phase = rng.uniform(0.0, two_pi);
    const double am_rate = rng.uniform(0.5, 4.0), am_phase = rng.uniform(0.0, two_pi);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / kSampleRate;
      x[i] += amp * (1.0 - 0.3 * (0.5 + 0.5 * std::sin(two_pi * am_rate * t + am_phase))) *
              std::sin(two_pi * f * t + phase);
    }
  }
  // Distractors shared by all classes: a random tone and a random noise band.
  {
    const double f = rng.uniform(200.0, 8000.0), amp = rng.uniform(0.0, 0.6), phase = rng.uniform(0.0, two_pi);
    for (std::size_t i = 0; i < n; ++i) x[i] += amp * std::sin(two_pi * f * static_cast<double>(i) / kSampleRate + phase);
    std::vector<double> d = band_noise(rng, rng.uniform(200.0, 8000.0), 2.0, n);
    const double dr = rms(d), damp = rng.uniform(0.0, 0.5);
    for (std::size_t i = 0; i < n; ++i) x[i] += damp * d[i] / (dr > 0 ? dr : 1.0);
  }
  const double gain = 0.1 * rng.uniform(0.5, 1.5) / std::max(rms(x), 1e-12);
  for (auto& v : x) v *= gain;

  // Recording device: shelving tilt and its own noise floor.
  Rng dev_rng(derive_seed({spec.seed, 0xdef1, static_cast<std::uint64_t>(label),
                           static_cast<std::uint64_t>(content), static_cast<std::uint64_t>(device)}));
  Biquad::shelf(400.0, kDeviceTilt[device][0], false).run(x);
  Biquad::shelf(3000.0, kDeviceTilt[device][1], true).run(x);
  for (auto& v : x) v += spec.noise_floor * 0.1 * dev_rng.normal();

  AudioClip clip;
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) clip.samples[i] = static_cast<float>(std::clamp(x[i], -1.0, 1.0));
  clip.scene_label = label;
  clip.device_id = device_names()[static_cast<std::size_t>(device)];
  clip.city = kCities[static_cast<std::size_t>(content) % kCities.size()];
  return clip;
}

std::vector<ClipRecord> generate_synth_dataset(const SynthSpec& spec, const std::string& out_dir) {
  spec.validate();
  const fs::path root(out_dir);
  fs::create_directories(root / "audio");
  std::vector<ClipRecord> records;
  for (int label = 0; label < spec.classes; ++label) {
    for (int c = 0; c < spec.clips_per_class; ++c) {
      const int content = label * spec.clips_per_class + c;
      for (int d = 0; d < spec.devices; ++d) {
        AudioClip clip = synth_clip(spec, label, content, d);
        char id[16];
        std::snprintf(id, sizeof id, "%05d", content);
        const std::string name =
            "audio/" + scene_labels()[label] + "-" + clip.city + "-" + id + "-" + clip.device_id + ".wav";
        write_wav((root / name).string(), clip);
        records.push_back({name, label, clip.device_id, clip.city});
      }
    }
  }
  write_manifest((root / "manifest.tsv").string(), records);
  return records;
}

// ---------------------------------------------------------------------------
// Loading

std::vector<AudioClip> load_audio(const std::vector<ClipRecord>& records, const std::string& base_dir,
                                  int threads) {
  std::vector<AudioClip> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto& r = records[i];
    const fs::path p = fs::path(r.path).is_absolute() ? fs::path(r.path) : fs::path(base_dir) / r.path;
    AudioClip clip = read_wav(p.string());
    clip.scene_label = r.label;
    clip.device_id = r.device;
    clip.city = r.city;
    out[i] = std::move(clip);
  });
  return out;
}

SpectrumCorrection estimate_correction_from(const std::vector<ClipRecord>& records,
                                            const std::vector<AudioClip>& audio) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) groups[content_key(records[i])].push_back(i);
  std::vector<std::size_t> used;
  for (const auto& [_, idx] : groups) {
    std::set<std::string> devices;
    for (auto i : idx) devices.insert(records[i].device);
    if (devices.size() >= 2) used.insert(used.end(), idx.begin(), idx.end());
  }
  if (used.empty()) return {};
  std::sort(used.begin(), used.end());
  std::vector<std::vector<double>> spectra(used.size());
  parallel_for(used.size(), 1, [&](std::size_t j) { spectra[j] = mean_magnitude_spectrum(audio[used[j]]); });
  std::map<std::string, std::vector<std::vector<double>>> aligned;
  for (std::size_t j = 0; j < used.size(); ++j) aligned[records[used[j]].device].push_back(std::move(spectra[j]));
  return estimate_correction(aligned);
}

std::vector<FeatureClip> extract_all(const std::vector<AudioClip>& audio, const SpectrumCorrection* correction,
                                     int threads) {
  std::vector<FeatureClip> out(audio.size());
  std::set<std::string> unknown;
  std::vector<const std::vector<float>*> coef(audio.size(), nullptr);
  if (correction && !correction->coefficients.empty()) {
    for (std::size_t i = 0; i < audio.size(); ++i) {
      coef[i] = correction->find(audio[i].device_id);
      if (!coef[i]) unknown.insert(audio[i].device_id);
    }
  }
  for (const auto& d : unknown) log_warning("no spectrum correction for device '" + d + "'; passing through");
  parallel_for(audio.size(), threads, [&](std::size_t i) { out[i] = extract_feature(audio[i], coef[i]); });
  return out;
}

Dataset load_dataset(const std::vector<ClipRecord>& records, const std::string& base_dir,
                     const SpectrumCorrection* correction, int threads) {
  Dataset d;
  d.records = records;
  d.audio = load_audio(records, base_dir, threads);
  d.features = extract_all(d.audio, correction, threads);
  return d;
}

}  // namespace pacn

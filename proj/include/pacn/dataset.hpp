#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pacn/audio.hpp"
#include "pacn/augment.hpp"

namespace pacn {

/// The ten scene classes, in label-index order.
const std::vector<std::string>& scene_labels();
/// Throws ConfigError naming the label when it is not one of the ten.
int scene_index(const std::string& label);

struct ClipRecord {
  std::string path;  // relative to the manifest directory
  int label = -1;
  std::string device;
  std::string city;
  friend bool operator==(const ClipRecord&, const ClipRecord&) = default;
};

/// Tab-separated, header row "filename scene_label device_id city".
std::vector<ClipRecord> parse_manifest_text(const std::string& text, const std::string& what);
std::vector<ClipRecord> parse_manifest(const std::string& path);
std::string format_manifest(const std::vector<ClipRecord>& records);
void write_manifest(const std::string& path, const std::vector<ClipRecord>& records);

/// File stem without the trailing "-<device>" part: identical for recordings
/// of the same content on different devices.
std::string content_key(const ClipRecord& record);

/// Splits by content key so that a recording never lands on both sides.
void split_by_content(const std::vector<ClipRecord>& records, double val_fraction, std::uint64_t seed,
                      std::vector<ClipRecord>& train, std::vector<ClipRecord>& val);

struct SynthSpec {
  int classes = 4;
  int clips_per_class = 100;  // content items per class, each recorded on every device
  int devices = 3;
  std::uint64_t seed = 7;
  double noise_floor = 0.02;  // class-independent white noise level

  void validate() const;
  std::string to_json() const;
  static SynthSpec from_json(const std::string& text);
  static SynthSpec load(const std::string& path);
};

/// "a", "b", "c", "s1" ... "s6".
const std::vector<std::string>& device_names();
double class_center_hz(int label);

/// One synthetic clip; content depends on (seed, label, content), the
/// recording-device colouring on `device`.
AudioClip synth_clip(const SynthSpec& spec, int label, int content, int device);

/// Writes audio/*.wav and manifest.tsv under out_dir; returns the records.
std::vector<ClipRecord> generate_synth_dataset(const SynthSpec& spec, const std::string& out_dir);

/// Clips and their (optionally corrected) features, loaded in parallel.
struct Dataset {
  std::vector<ClipRecord> records;
  std::vector<AudioClip> audio;
  std::vector<FeatureClip> features;

  std::size_t size() const { return records.size(); }
};

std::vector<AudioClip> load_audio(const std::vector<ClipRecord>& records, const std::string& base_dir,
                                  int threads);
/// Mean magnitude spectra of content recorded on at least two devices.
SpectrumCorrection estimate_correction_from(const std::vector<ClipRecord>& records,
                                            const std::vector<AudioClip>& audio);
/// Extracts features; known devices get their correction, unknown ones pass
/// through with one warning per device.
std::vector<FeatureClip> extract_all(const std::vector<AudioClip>& audio,
                                     const SpectrumCorrection* correction, int threads);
Dataset load_dataset(const std::vector<ClipRecord>& records, const std::string& base_dir,
                     const SpectrumCorrection* correction, int threads);

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn);

}  // namespace pacn

#include <atomic>
#include <exception>
#include <thread>

namespace pacn {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace pacn

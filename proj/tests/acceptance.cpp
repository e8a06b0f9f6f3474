// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fails.
// Usage: pacn_acceptance [work_dir]
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "gradcheck.hpp"
#include "pacn/arn.hpp"
#include "pacn/checkpoint.hpp"
#include "pacn/cli.hpp"
#include "pacn/log.hpp"
#include "pacn/profiler.hpp"
#include "pacn/stats.hpp"
#include "pacn/train.hpp"

using namespace pacn;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool ok = true;
  std::ostringstream detail;

  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(const std::string& name, Outcome& o) {
  if (!o.ok) ++failures;
  std::cout << (o.ok ? "PASS " : "FAIL ") << name << ":" << o.detail.str() << std::endl;
}

template <class Fn>
void criterion(const std::string& name, Fn&& fn) {
  Outcome o;
  try {
    fn(o);
  } catch (const std::exception& e) {
    o.ok = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  report(name, o);
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void gradient_suite(Outcome& o) {
  const auto t0 = Clock::now();
  double worst_prim = 0;
  std::string worst_name;
  int checks = 0;
  for (const auto& c : testing::primitive_cases()) {
    for (std::uint64_t point = 0; point < 5; ++point) {
      Rng rng(derive_seed({0xacc, point}));
      const auto r = testing::grad_check(c.build, c.inputs(rng));
      ++checks;
      if (!(r.max_rel_error < 1e-3)) o.require(false, c.name + " error " + std::to_string(r.max_rel_error));
      if (r.max_rel_error > worst_prim) {
        worst_prim = r.max_rel_error;
        worst_name = c.name;
      }
    }
  }
  double worst_e2e = 0;
  for (auto mode : {WiringMode::parallel, WiringMode::serial, WiringMode::no_fusion}) {
    for (std::uint64_t seed : {1, 2}) {
      const auto r = testing::model_grad_check(seed, mode);
      if (!(r.max_rel_error < 1e-2)) {
        o.require(false, "end-to-end " + to_string(mode) + " error " + std::to_string(r.max_rel_error));
      }
      worst_e2e = std::max(worst_e2e, r.max_rel_error);
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime over 2 min");
  o.detail << " " << checks << " primitive checks, worst " << std::scientific << std::setprecision(2) << worst_prim
           << " (" << worst_name << "); end-to-end worst " << worst_e2e << std::defaultfloat << std::setprecision(3)
           << "; " << secs << " s";
}

void normalization_invariants(Outcome& o) {
  Rng rng(31);
  const Tensor x = testing::random_tensor({3, 8, 16, 12}, rng, -5, 9).cast<float>();
  Tape<float> tape;
  const Tensor y = tape.value(fin(tape, tape.constant(x)));
  double worst_mean = 0, worst_var = 0;
  for (std::int64_t n = 0; n < 3; ++n)
    for (std::int64_t f = 0; f < 16; ++f) {
      double m = 0, v = 0;
      for (std::int64_t c = 0; c < 8; ++c)
        for (std::int64_t t = 0; t < 12; ++t) m += y.at(n, c, f, t);
      m /= 96;
      for (std::int64_t c = 0; c < 8; ++c)
        for (std::int64_t t = 0; t < 12; ++t) v += std::pow(y.at(n, c, f, t) - m, 2);
      v /= 96;
      worst_mean = std::max(worst_mean, std::abs(m));
      worst_var = std::max(worst_var, std::abs(v - 1));
    }
  o.require(worst_mean < 1e-5, "fin mean");
  o.require(worst_var < 1e-3, "fin variance");

  const Tensor a = tape.value(arn(tape, tape.constant(x), tape.constant(Tensor({1}, 1.0f)),
                                  tape.constant(Tensor({8}, 1.0f)), tape.constant(Tensor({8}))));
  o.require(a.vec() == x.vec(), "arn identity");
  const Tensor g = tape.value(grn(tape, tape.constant(x), tape.constant(Tensor({8})), tape.constant(Tensor({8}))));
  o.require(g.vec() == x.vec(), "grn identity");
  o.detail << " fin max|mean| " << worst_mean << ", max|var-1| " << worst_var
           << "; arn(rho=1) identity " << (a.vec() == x.vec() ? "exact" : "inexact") << ", grn(0,0) identity "
           << (g.vec() == x.vec() ? "exact" : "inexact");
}

struct SynthData {
  fs::path manifest;
  std::vector<ClipRecord> all;
  Dataset train, val;
  SpectrumCorrection correction;
};

// Same loading path as the train subcommands.
void load_split(SynthData& d, const TrainConfig& tc) {
  std::vector<ClipRecord> train_rec, val_rec;
  split_by_content(d.all, tc.val_fraction, tc.seed, train_rec, val_rec);
  const std::string base = d.manifest.parent_path().string();
  d.train = Dataset{};
  d.train.records = train_rec;
  d.train.audio = load_audio(train_rec, base, 1);
  d.correction = estimate_correction_from(train_rec, d.train.audio);
  d.train.features = extract_all(d.train.audio, &d.correction, 1);
  d.val = load_dataset(val_rec, base, &d.correction, 1);
}

void kd_endpoints(Outcome& o, SynthData& d) {
  Rng rng(5);
  const Tensor z = testing::random_tensor({6, 4}, rng, -3, 3).cast<float>();
  std::vector<int> labels{0, 1, 2, 3, 0, 1};
  const auto same = kd_loss(z, z, labels, 0.226, 2.0);
  o.require(std::abs(same.distill) < 1e-7, "distillation term with z_s = z_t");

  TrainConfig tc;
  tc.epochs = 2;
  tc.warmup_epochs = 1;
  tc.seed = 4;
  const PacnConfig student;
  TrainData data{&d.train, &d.val, &d.correction, 1};
  TrainConfig short_teacher = tc;
  short_teacher.epochs = 1;
  short_teacher.augment = AugmentPolicy::none();
  const auto teacher = train_teacher(student.widened(2), short_teacher, data);
  tc.kd_lambda = 1.0;
  const auto with = train_student_kd(student, teacher.model, tc, data);
  const auto without = train_teacher(student, tc, data);
  const bool identical = serialize_checkpoint(with.model) == serialize_checkpoint(without.model) &&
                         metrics_csv(with.metrics) == metrics_csv(without.metrics);
  o.require(identical, "lambda = 1 differs from no-teacher training");
  o.detail << " distill(z, z) = " << same.distill << "; lambda=1 run (2 epochs, full augmentation) "
           << (identical ? "bit-identical" : "differs") << " to supervised run";
}

void complexity_budget(Outcome& o) {
  const PacnConfig c = PacnConfig::load(PACN_SOURCE_DIR "/configs/student.json");
  const auto r = profile(c);
  o.require(r.total_params >= 4700 && r.total_params <= 5700, "params outside [4700, 5700]");
  o.require(r.total_macs >= 1200000 && r.total_macs <= 1700000, "MACs outside [1.2e6, 1.7e6]");
  o.require(r.total_params == PacnModel(c, 0).params().total_elements(), "report disagrees with model");
  bool tallies_match = true;
  for (auto mode : {WiringMode::parallel, WiringMode::serial, WiringMode::no_fusion}) {
    PacnConfig m = c;
    m.wiring_mode = mode;
    const auto v = verify_against_runtime(m);
    const bool match = v.ok && v.counted_macs == v.tallied_macs;
    o.require(match, "runtime tally " + to_string(mode) + ": " + v.message);
    tallies_match = tallies_match && match;
  }
  const auto serial = profile(PacnConfig::load(PACN_SOURCE_DIR "/configs/student_serial.json"));
  o.require(serial.total_macs >= r.total_macs, "serial MACs below parallel");
  o.detail << " params " << r.total_params << ", MACs " << r.total_macs << "; serial MACs " << serial.total_macs
           << "; runtime tally " << (tallies_match ? "exact" : "mismatched") << " in the wiring modes";
}

void feature_geometry(Outcome& o, const SynthData& d) {
  std::size_t bad = 0, n = 0;
  for (const auto* ds : {&d.train, &d.val})
    for (const auto& f : ds->features) {
      ++n;
      if (f.feature.shape() != Shape{256, 65, 2}) ++bad;
    }
  o.require(bad == 0, std::to_string(bad) + " clips with wrong shape");
  AudioClip dc;
  dc.samples.assign(kClipSamples, 0.25f);
  const FeatureClip fdc = extract_feature(dc);
  bool zero = fdc.feature.shape() == Shape{256, 65, 2};
  const Tensor flat_delta = delta_coefficients(Tensor({256, 65}, -3.5f));
  for (float v : flat_delta.vec()) zero = zero && v == 0.0f;
  AudioClip silence;
  silence.samples.assign(kClipSamples, 0.0f);
  const FeatureClip fs0 = extract_feature(silence);
  for (std::int64_t i = 1; i < fs0.feature.size(); i += 2) zero = zero && fs0.feature[i] == 0.0f;
  o.require(zero, "delta of constant input not exactly zero");
  o.detail << " " << n << " synthetic clips, " << bad << " with a shape other than (256, 65, 2); delta of constant log-mel and silence "
           << (zero ? "exactly 0" : "nonzero");
}

void learning_signal(Outcome& o, SynthData& d) {
  TrainConfig tc;
  tc.epochs = 30;
  tc.warmup_epochs = 3;
  tc.seed = 1;
  const auto t0 = Clock::now();
  load_split(d, tc);
  TrainData data{&d.train, &d.val, &d.correction, 1};
  const auto student = train_teacher(PacnConfig::load(PACN_SOURCE_DIR "/configs/student.json"), tc, data);
  const double secs = seconds_since(t0);
  double best = 0;
  int first_epoch = -1;
  for (const auto& m : student.metrics) {
    best = std::max(best, m.val_acc);
    if (first_epoch < 0 && m.val_acc >= 0.90) first_epoch = m.epoch;
  }
  const double final_acc = student.metrics.back().val_acc;
  o.require(final_acc >= 0.90, "held-out accuracy below 0.90");
  o.require(secs < 600.0, "wall time over 10 min");
  o.detail << std::setprecision(4) << " student held-out acc " << final_acc << " after 30 epochs (first >= 0.90 at epoch "
           << first_epoch << ", " << d.val.size() << " clips), " << secs << " s;";

  TrainConfig kt;
  kt.epochs = 6;
  kt.warmup_epochs = 1;
  kt.seed = 2;
  kt.augment = AugmentPolicy::none();
  const auto t1 = Clock::now();
  const auto teacher = train_teacher(PacnConfig::load(PACN_SOURCE_DIR "/configs/teacher.json"), kt, data);
  o.detail << " teacher acc " << teacher.metrics.back().val_acc << " (" << seconds_since(t1) << " s);";

  TrainConfig kd;
  kd.epochs = 20;
  kd.warmup_epochs = 3;
  kd.seed = 3;
  kd.kd_lambda = 0.0;
  kd.augment = AugmentPolicy::none();
  const PacnConfig sc = PacnConfig::load(PACN_SOURCE_DIR "/configs/student.json");
  const Tensor zt = predict_logits(teacher.model, d.train.features);
  const double kl0 = mean_kl(zt, predict_logits(PacnModel(sc, kd.seed), d.train.features), kd.kd_temperature);
  const auto distilled = train_student_kd(sc, teacher.model, kd, data);
  const double kl20 = mean_kl(zt, predict_logits(distilled.model, d.train.features), kd.kd_temperature);
  o.require(kl20 <= 0.5 * kl0, "KL dropped less than 50%");
  o.detail << " lambda=0 KL(teacher||student) at T=2 " << kl0 << " -> " << kl20 << " after 20 epochs ("
           << 100.0 * (1 - kl20 / kl0) << "% drop)";
}

void schedule(Outcome& o) {
  const TrainConfig t;
  const std::int64_t spe = 60;
  const std::int64_t w = t.warmup_epochs * spe, last = t.epochs * spe - 1;
  o.require(lr_at(0, t, spe) == 0.0, "lr(0)");
  o.require(lr_at(w, t, spe) == 0.002, "lr at end of warmup");
  o.require(lr_at(last, t, spe) <= 1e-9, "final lr");
  const double step_up = 0.002 / static_cast<double>(w);
  const double jump_left = std::abs(lr_at(w, t, spe) - lr_at(w - 1, t, spe));
  const double jump_right = std::abs(lr_at(w + 1, t, spe) - lr_at(w, t, spe));
  o.require(jump_left <= step_up + 1e-15 && jump_right <= step_up, "discontinuity at the junction");
  o.detail << " lr(0) = 0, lr(" << w << ") = " << lr_at(w, t, spe) << ", lr(" << last << ") = " << lr_at(last, t, spe)
           << ", junction steps " << jump_left << " / " << jump_right;
}

void statistics(Outcome& o) {
  ScoreMatrix s(4, std::vector<double>(20));
  for (int i = 0; i < 20; ++i) {
    s[0][i] = 0.60;
    s[1][i] = i < 18 ? 0.55 : 0.50;
    s[2][i] = i < 18 ? 0.50 : 0.55;
    s[3][i] = 0.40;
  }
  const auto f = friedman_test(rank_scores(s));
  o.require(f.average_ranks[0] == 1.0, "winner average rank");
  // Hand ranks (1,2,3) (1,3,2) (2,1,3) (1,2,3): sums 5, 8, 11 give chi2 = 52.5 - 48.
  const ScoreMatrix h{{0.9, 0.9, 0.5, 0.9}, {0.8, 0.1, 0.9, 0.8}, {0.7, 0.5, 0.2, 0.7}};
  const double chi2 = friedman_test(rank_scores(h)).statistic;
  o.require(std::abs(chi2 - 4.5) < 1e-9, "friedman hand example");
  double worst = 0;
  for (int k = 2; k <= 10; ++k)
    for (int n : {5, 10, 20, 50}) worst = std::max(worst, std::abs(nemenyi_cd(k, 2 * n) - nemenyi_cd(k, n) / std::sqrt(2.0)));
  o.require(worst < 1e-12, "nemenyi N-doubling");
  o.detail << " winner rank " << f.average_ranks[0] << ", friedman chi2 " << std::setprecision(12) << chi2
           << ", max CD halving error " << worst;
}

std::map<std::string, std::string> pipeline_outputs(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  SynthSpec spec;
  spec.clips_per_class = 8;
  std::ofstream(dir / "spec.json") << spec.to_json();
  std::ofstream(dir / "train.json") << R"({"epochs": 2, "warmup_epochs": 1, "seed": 9})";
  const std::string d = dir.string();
  auto run_ok = [](std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    if (code != 0) throw std::runtime_error("pacn " + args.at(1) + " failed: " + err.str());
  };
  const std::string cfg = PACN_SOURCE_DIR "/configs/";
  run_ok({"--quiet", "synth-data", "--spec", d + "/spec.json", "--out", d + "/data"});
  run_ok({"--quiet", "train-teacher", "--config", cfg + "teacher.json", "--manifest", d + "/data/manifest.tsv", "--out",
          d + "/teacher.ckpt", "--train-config", d + "/train.json"});
  run_ok({"--quiet", "train-student", "--config", cfg + "student.json", "--manifest", d + "/data/manifest.tsv", "--out",
          d + "/student.ckpt", "--train-config", d + "/train.json", "--teacher", d + "/teacher.ckpt"});
  for (const std::string m : {"teacher", "student"}) {
    run_ok({"--quiet", "eval", "--ckpt", d + "/" + m + ".ckpt", "--manifest", d + "/" + m + ".ckpt.val.tsv", "--report",
            d + "/" + m + "_report.csv", "--subset-scores", d + "/scores.csv", "--method-name", m, "--subsets", "5",
            "--subset-fraction", "0.5"});
  }
  run_ok({"--quiet", "significance", "--scores", d + "/scores.csv", "--out-dir", d + "/sig", "--run-id", "det"});
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

void determinism(Outcome& o, const fs::path& work) {
  const fs::path dir = work / "pipeline";
  const auto first = pipeline_outputs(dir);
  const auto second = pipeline_outputs(dir);
  o.require(first.size() == second.size(), "different file sets");
  int differing = 0;
  for (const auto& [name, bytes] : first) {
    auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differing;
      o.require(false, name + " differs");
    }
  }
  for (const char* must : {"teacher.ckpt", "student.ckpt", "student.ckpt.metrics.csv", "student_report.csv",
                           "sig/det_cd.csv", "sig/det_rank_histogram.csv"}) {
    o.require(first.count(must) == 1, std::string("missing ") + must);
  }
  o.detail << " " << first.size() << " output files (audio, checkpoints, metrics, reports, significance) compared, "
           << differing << " differ";
}

}  // namespace

int main(int argc, char** argv) {
  set_quiet(true);
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "pacn_acceptance";
  fs::create_directories(work);

  SynthData data;
  const auto t0 = Clock::now();
  SynthSpec spec;
  data.all = generate_synth_dataset(spec, (work / "synth").string());
  data.manifest = work / "synth" / "manifest.tsv";
  std::cout << "synthetic dataset: " << data.all.size() << " clips in " << std::setprecision(3) << seconds_since(t0)
            << " s" << std::endl;

  criterion("gradient-suite", gradient_suite);
  criterion("normalization-invariants", normalization_invariants);
  criterion("learning-signal", [&](Outcome& o) { learning_signal(o, data); });
  criterion("feature-geometry", [&](Outcome& o) { feature_geometry(o, data); });
  criterion("kd-endpoints", [&](Outcome& o) { kd_endpoints(o, data); });
  criterion("complexity-budget", complexity_budget);
  criterion("schedule", schedule);
  criterion("statistics", statistics);
  criterion("determinism", [&](Outcome& o) { determinism(o, work); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}

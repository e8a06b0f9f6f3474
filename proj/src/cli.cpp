#include "pacn/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "pacn/augment.hpp"
#include "pacn/checkpoint.hpp"
#include "pacn/dataset.hpp"
#include "pacn/error.hpp"
#include "pacn/log.hpp"
#include "pacn/profiler.hpp"
#include "pacn/rng.hpp"
#include "pacn/stats.hpp"
#include "pacn/train.hpp"

namespace pacn {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool quiet = false;
};

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string manifest_dir(const std::string& manifest) {
  const auto p = fs::path(manifest).parent_path();
  return p.empty() ? std::string(".") : p.string();
}

/// Manifest at `path` listing `records` (relative to `base`), rebased onto the new directory.
void write_rebased_manifest(const std::string& path, const std::vector<ClipRecord>& records, const std::string& base) {
  const fs::path dir = fs::absolute(fs::path(path)).parent_path();
  std::vector<ClipRecord> out = records;
  for (auto& r : out) {
    const fs::path abs = fs::path(r.path).is_absolute() ? fs::path(r.path) : fs::absolute(fs::path(base) / r.path);
    r.path = abs.lexically_normal().lexically_relative(dir).generic_string();
  }
  write_text(path, format_manifest(out));
}

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string out;
  std::string train_config;
  std::string metrics;
  std::string teacher;
  std::vector<std::string> held_out;
  int epochs = 0;
};

void add_train_options(CLI::App* cmd, TrainArgs& a, bool student) {
  cmd->add_option("--config", a.config, "model config JSON")->required();
  cmd->add_option("--manifest", a.manifest, "dataset manifest TSV")->required();
  cmd->add_option("--out", a.out, "output checkpoint path")->required();
  cmd->add_option("--train-config", a.train_config, "training config JSON");
  cmd->add_option("--metrics", a.metrics, "metrics CSV path (default <out>.metrics.csv)");
  cmd->add_option("--epochs", a.epochs, "override the number of epochs");
  cmd->add_option("--held-out-device", a.held_out, "device id excluded from training");
  if (student) cmd->add_option("--teacher", a.teacher, "teacher checkpoint")->required();
}

int cmd_train(const TrainArgs& a, const Globals& g, bool student, std::ostream& out) {
  const PacnConfig model_config = PacnConfig::load(a.config);
  TrainConfig tc = a.train_config.empty() ? TrainConfig{} : TrainConfig::load(a.train_config);
  if (a.epochs > 0) {
    tc.epochs = a.epochs;
    tc.warmup_epochs = std::min(tc.warmup_epochs, tc.epochs);
  }
  if (g.seed_set) tc.seed = g.seed;
  tc.validate();

  std::optional<PacnModel> teacher;
  if (student) teacher.emplace(load_checkpoint(a.teacher));

  const auto all = parse_manifest(a.manifest);
  const std::set<std::string> held(a.held_out.begin(), a.held_out.end());
  std::vector<ClipRecord> usable;
  for (const auto& r : all) {
    if (!held.count(r.device)) usable.push_back(r);
  }
  std::vector<ClipRecord> train_rec, val_rec;
  split_by_content(usable, tc.val_fraction, tc.seed, train_rec, val_rec);
  if (train_rec.empty()) throw UsageError("no training clips in " + a.manifest);
  const std::string base = manifest_dir(a.manifest);

  log_info("loading " + std::to_string(train_rec.size()) + " training and " + std::to_string(val_rec.size()) +
           " validation clips");
  Dataset train;
  train.records = train_rec;
  train.audio = load_audio(train_rec, base, g.threads);
  SpectrumCorrection correction;
  if (tc.augment.spectrum_correction) correction = estimate_correction_from(train_rec, train.audio);
  train.features = extract_all(train.audio, &correction, g.threads);
  Dataset val = load_dataset(val_rec, base, &correction, g.threads);

  TrainData data{&train, &val, &correction, g.threads};
  TrainResult result = student ? train_student_kd(model_config, *teacher, tc, data)
                               : train_teacher(model_config, tc, data);

  save_checkpoint(a.out, result.model);
  write_text(a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics, metrics_csv(result.metrics));
  write_text(a.out + ".correction.csv", correction.to_csv());
  // Validation split plus every clip of held-out devices for the same content.
  std::set<std::string> val_keys;
  for (const auto& r : val_rec) val_keys.insert(content_key(r));
  std::vector<ClipRecord> eval_rec;
  for (const auto& r : all) {
    if (val_keys.count(content_key(r))) eval_rec.push_back(r);
  }
  write_rebased_manifest(a.out + ".val.tsv", eval_rec, base);
  const auto& last = result.metrics.back();
  out << "trained " << (student ? "student" : "teacher") << " for " << tc.epochs << " epochs: train_acc "
      << last.train_acc << ", val_acc " << last.val_acc << "\n";
  out << "checkpoint " << a.out << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PACN toolkit: low-complexity acoustic scene classification", "pacn"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "global seed (overrides config seeds)");
  app.add_option("--threads", g.threads, "worker threads for feature extraction and evaluation")
      ->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "suppress progress output");

  std::string spec_path, out_dir;
  auto* synth = app.add_subcommand("synth-data", "generate the synthetic scene dataset");
  synth->add_option("--spec", spec_path, "synthetic dataset spec JSON")->required();
  synth->add_option("--out", out_dir, "output directory")->required();

  std::string feat_manifest, feat_out, feat_correction;
  auto* features = app.add_subcommand("features", "extract a PACNFEAT feature cache");
  features->add_option("--manifest", feat_manifest)->required();
  features->add_option("--out", feat_out)->required();
  features->add_option("--correction", feat_correction, "spectrum correction CSV");

  TrainArgs teacher_args, student_args;
  auto* train_t = app.add_subcommand("train-teacher", "supervised training of the large model");
  add_train_options(train_t, teacher_args, false);
  auto* train_s = app.add_subcommand("train-student", "knowledge-distillation training of the student");
  add_train_options(train_s, student_args, true);

  std::string ckpt, eval_manifest, eval_correction, report, subset_scores, method_name = "model";
  std::vector<std::string> eval_held;
  int subset_count = 20;
  double subset_fraction = 0.05;
  auto* eval = app.add_subcommand("eval", "accuracy, per-device breakdown and confusion matrix");
  eval->add_option("--ckpt", ckpt)->required();
  eval->add_option("--manifest", eval_manifest)->required();
  eval->add_option("--held-out-device", eval_held, "device ids to mark as unseen");
  eval->add_option("--correction", eval_correction, "spectrum correction CSV (default <ckpt>.correction.csv)");
  eval->add_option("--report", report, "write the report as CSV");
  eval->add_option("--subset-scores", subset_scores, "append per-subset accuracies to this CSV");
  eval->add_option("--method-name", method_name, "row name for --subset-scores");
  eval->add_option("--subsets", subset_count, "number of evaluation subsets")->check(CLI::PositiveNumber);
  eval->add_option("--subset-fraction", subset_fraction, "fraction of clips per subset");

  std::string profile_config, profile_csv;
  bool verify = false;
  auto* profile_cmd = app.add_subcommand("profile", "parameter and MAC accounting");
  profile_cmd->add_option("--config", profile_config)->required();
  profile_cmd->add_option("--csv", profile_csv, "write the CSV report here instead of stdout");
  profile_cmd->add_flag("--verify", verify, "compare with an instrumented forward pass");

  std::string scores_path, sig_out = ".", run_id = "significance";
  double alpha = 0.05;
  auto* sig = app.add_subcommand("significance", "Friedman test, Nemenyi CD, rank histogram");
  sig->add_option("--scores", scores_path, "CSV rows: method,score1,score2,...")->required();
  sig->add_option("--out-dir", sig_out);
  sig->add_option("--run-id", run_id);
  sig->add_option("--alpha", alpha)->check(CLI::IsMember({0.05, 0.10}));

  std::string prev_manifest, prev_out, prev_train_config;
  int prev_count = 8, prev_epoch = 1;
  auto* preview = app.add_subcommand("augment-preview", "show augmentation decisions and write examples");
  preview->add_option("--manifest", prev_manifest)->required();
  preview->add_option("--out", prev_out, "directory for augmented WAV examples");
  preview->add_option("--train-config", prev_train_config);
  preview->add_option("--count", prev_count)->check(CLI::PositiveNumber);
  preview->add_option("--epoch", prev_epoch)->check(CLI::PositiveNumber);

  std::vector<const char*> argv{"pacn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  g.seed_set = app.count("--seed") > 0;
  const bool was_quiet = is_quiet();
  set_quiet(g.quiet);
  struct Restore {
    bool q;
    ~Restore() { set_quiet(q); }
  } restore{was_quiet};

  try {
    if (*synth) {
      SynthSpec spec = SynthSpec::load(spec_path);
      if (g.seed_set) spec.seed = g.seed;
      const auto records = generate_synth_dataset(spec, out_dir);
      out << "wrote " << records.size() << " clips and " << (fs::path(out_dir) / "manifest.tsv").string() << "\n";
    } else if (*features) {
      const auto records = parse_manifest(feat_manifest);
      SpectrumCorrection correction;
      if (!feat_correction.empty()) correction = SpectrumCorrection::load(feat_correction);
      const Dataset d = load_dataset(records, manifest_dir(feat_manifest), &correction, g.threads);
      write_feature_cache(feat_out, d.features);
      out << "wrote " << d.features.size() << " features to " << feat_out << "\n";
    } else if (*train_t) {
      return cmd_train(teacher_args, g, false, out);
    } else if (*train_s) {
      return cmd_train(student_args, g, true, out);
    } else if (*eval) {
      const PacnModel model = load_checkpoint(ckpt);
      const auto records = parse_manifest(eval_manifest);
      SpectrumCorrection correction;
      const std::string corr_path = eval_correction.empty() ? ckpt + ".correction.csv" : eval_correction;
      if (fs::exists(corr_path)) correction = SpectrumCorrection::load(corr_path);
      else if (!eval_correction.empty()) throw IngestionError("cannot open " + eval_correction);
      const Dataset d = load_dataset(records, manifest_dir(eval_manifest), &correction, g.threads);
      const EvalResult r = evaluate(model, d.features, g.threads);
      out << r.to_text(eval_held);
      if (!report.empty()) write_text(report, r.to_csv(eval_held));
      if (!subset_scores.empty()) {
        std::vector<int> labels;
        for (const auto& f : d.features) labels.push_back(f.scene_label);
        const auto subsets = sample_subsets(labels.size(), subset_count, subset_fraction, g.seed);
        std::ostringstream row;
        row << method_name;
        row.precision(9);
        for (double acc : subset_accuracies(labels, r.predictions, subsets)) row << "," << acc;
        std::ofstream f(subset_scores, std::ios::app);
        if (!f) throw std::runtime_error("cannot write " + subset_scores);
        f << row.str() << "\n";
      }
    } else if (*profile_cmd) {
      const PacnConfig config = PacnConfig::load(profile_config);
      const ComplexityReport r = profile(config);
      out << r.to_text();
      if (profile_csv.empty()) {
        out << "\n" << r.to_csv();
      } else {
        write_text(profile_csv, r.to_csv());
      }
      if (verify) {
        const RuntimeCheck check = verify_against_runtime(config);
        out << (check.ok ? "runtime check passed: " : "runtime check FAILED: ") << check.message << "\n";
        if (!check.ok) return 1;
      }
    } else if (*sig) {
      const auto [names, scores] = parse_score_csv(read_text(scores_path), scores_path);
      const RankReport r = rank_report(names, scores, alpha);
      fs::create_directories(sig_out);
      const fs::path dir(sig_out);
      write_text((dir / (run_id + "_rank_histogram.csv")).string(), r.histogram_csv());
      write_text((dir / (run_id + "_cd.csv")).string(), r.cd_csv());
      write_text((dir / (run_id + "_rank_histogram.svg")).string(), r.histogram_svg());
      write_text((dir / (run_id + "_cd.svg")).string(), r.cd_svg());
      out << r.to_text();
    } else if (*preview) {
      TrainConfig tc = prev_train_config.empty() ? TrainConfig{} : TrainConfig::load(prev_train_config);
      if (g.seed_set) tc.seed = g.seed;
      const auto records = parse_manifest(prev_manifest);
      std::vector<ClipRecord> head(records.begin(),
                                   records.begin() + std::min<std::size_t>(records.size(), static_cast<std::size_t>(prev_count)));
      const auto audio = load_audio(head, manifest_dir(prev_manifest), g.threads);
      std::vector<std::vector<std::size_t>> by_label(scene_labels().size());
      for (std::size_t i = 0; i < head.size(); ++i) by_label[static_cast<std::size_t>(head[i].label)].push_back(i);
      const AugmentPolicy& p = tc.augment;
      if (!prev_out.empty()) fs::create_directories(prev_out);
      out << "clip\tlabel\tdevice\taudio_mix\tpitch_factor\n";
      for (std::size_t i = 0; i < head.size(); ++i) {
        Rng r(derive_seed({tc.seed, static_cast<std::uint64_t>(prev_epoch), static_cast<std::uint64_t>(i)}));
        AudioClip clip = audio[i];
        std::string mix = "-", pitch = "-";
        const bool do_mix = p.audio_mix && r.uniform() < p.mix_prob;
        const auto& peers = by_label[static_cast<std::size_t>(head[i].label)];
        if (do_mix && peers.size() > 1) {
          std::size_t j = peers[r.below(peers.size())];
          while (j == i) j = peers[r.below(peers.size())];
          const double w = r.uniform(p.mix_lo, p.mix_hi);
          clip = audio_mix(clip, audio[j], w);
          std::ostringstream m;
          m.precision(3);
          m << head[j].path << "@" << w;
          mix = m.str();
        }
        if (p.pitch_shift && r.uniform() < p.pitch_prob) {
          const double f = kPitchFactors[r.below(kPitchFactors.size())];
          clip = pitch_shift(clip, f);
          std::ostringstream m;
          m << f;
          pitch = m.str();
        }
        out << head[i].path << "\t" << scene_labels()[head[i].label] << "\t" << head[i].device << "\t" << mix << "\t"
            << pitch << "\n";
        if (!prev_out.empty()) {
          write_wav((fs::path(prev_out) / ("preview_" + std::to_string(i) + ".wav")).string(), clip);
        }
      }
      if (p.mixup) {
        Rng r(derive_seed({tc.seed, 0x9e11}));
        out << "mixup: p=" << p.mixup_prob << ", alpha=" << p.mixup_alpha << ", example eta " << sample_mixup_eta(r, p.mixup_alpha)
            << " (" << p.mixup_domain << " domain)\n";
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace pacn

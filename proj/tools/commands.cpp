#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>

#include "ecgsl/data_io.hpp"
#include "ecgsl/evaluation.hpp"
#include "ecgsl/saliency.hpp"
#include "ecgsl/training.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;

namespace ecgsl::cli {

namespace {

// Flags every command accepts.
struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key=value config file");
  app->add_option("--set", c.sets, "config override key=value (repeatable)")->take_all();
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
}

// Defaults, then the config file, then --set, then the command's own flags.
RunConfig resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig rc;
  if (!c.config_file.empty()) rc.load_file(c.config_file);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    require(eq != std::string::npos, ErrorCode::InvalidConfig, "--set expects key=value, got '" + s + "'");
    rc.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) rc.set("seed", std::to_string(*c.seed));
  if (c.workers) rc.set("workers", std::to_string(*c.workers));
  for (const auto& [k, v] : flags) rc.set(k, v);
  return rc;
}

template <class T>
void maybe(std::vector<std::pair<std::string, std::string>>& flags, const char* key, const std::optional<T>& v) {
  if (!v) return;
  if constexpr (std::is_same_v<T, std::string>) flags.emplace_back(key, *v);
  else if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    flags.emplace_back(key, std::isinf(*v) ? std::string("inf") : std::string(buf));
  } else flags.emplace_back(key, std::to_string(*v));
}

// Written next to every output: command, paths, then the resolved config.
void write_snapshot(const fs::path& path, const std::string& command,
                    const std::vector<std::pair<std::string, std::string>>& paths, const RunConfig& rc) {
  std::string text = "# ecgsl " + command + "\n";
  for (const auto& [k, v] : paths) text += "path." + k + "=" + v + "\n";
  write_file_atomic(path, text + rc.to_text());
}

fs::path sibling(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

std::string pad_mode_text(PadMode m) { return std::string(to_string(m)); }

struct Split {
  std::vector<SegmentSequence> train, held_out;
};

std::vector<std::size_t> labels_of(const std::vector<SegmentSequence>& seqs) {
  std::vector<std::size_t> out;
  for (const auto& s : seqs) {
    require(s.label.has_value(), ErrorCode::InvalidDataset, "sequence '" + s.record_id + "' has no label");
    out.push_back(*s.label);
  }
  return out;
}

std::vector<std::vector<std::size_t>> folds_of(const std::vector<SegmentSequence>& seqs, std::size_t k,
                                               std::uint64_t seed) {
  const auto labels = labels_of(seqs);
  return stratified_kfold(labels, k, seed);
}

Split split_fold(const std::vector<SegmentSequence>& seqs, const std::vector<std::size_t>& fold) {
  Split s;
  std::vector<bool> held(seqs.size(), false);
  for (auto i : fold) held[i] = true;
  for (std::size_t i = 0; i < seqs.size(); ++i) (held[i] ? s.held_out : s.train).push_back(seqs[i]);
  return s;
}

// Whole corpus, or (train = other folds, held_out = fold) with --holdout-fold.
Split select(const SegmentCorpus& corpus, std::optional<std::size_t> holdout, const RunConfig& rc) {
  if (!holdout) return {corpus.sequences, {}};
  const std::size_t k = rc.integer("eval.folds");
  require(*holdout < k, ErrorCode::InvalidConfig,
          "--holdout-fold " + std::to_string(*holdout) + " out of range for " + std::to_string(k) + " folds");
  return split_fold(corpus.sequences, folds_of(corpus.sequences, k, rc.integer("seed"))[*holdout]);
}

ModelState load_stage(const std::string& path, Stage expected, const std::string& command) {
  require(!path.empty(), ErrorCode::StageOrder,
          command + " needs a '" + to_string(expected) + "' checkpoint: pass --checkpoint");
  auto state = read_checkpoint(path);
  require(state.stage == expected, ErrorCode::StageOrder,
          command + " needs a '" + to_string(expected) + "' checkpoint, got stage '" + to_string(state.stage) +
              "' in " + path);
  return state;
}

void require_compatible(const ModelState& state, const SegmentCorpus& corpus) {
  require(state.config.encoder.segment_length == corpus.segmentation.segment_length, ErrorCode::InvalidConfig,
          "checkpoint segment length " + std::to_string(state.config.encoder.segment_length) +
              " differs from corpus segment length " + std::to_string(corpus.segmentation.segment_length));
  require(state.config.num_classes == corpus.class_names.size(), ErrorCode::InvalidConfig,
          "checkpoint has " + std::to_string(state.config.num_classes) + " classes, corpus has " +
              std::to_string(corpus.class_names.size()));
}

LogFn logger(std::ostream& out) {
  return [&out](const std::string& line) { out << line << '\n' << std::flush; };
}

void save_training(const TrainResult& res, const fs::path& out, const std::string& command,
                   const std::vector<std::pair<std::string, std::string>>& paths, const RunConfig& rc) {
  write_checkpoint(res.state, out);
  write_file_atomic(sibling(out, ".history.tsv"), res.history.to_text());
  write_snapshot(sibling(out, ".config.txt"), command, paths, rc);
}

std::string masked_eval_text(const MaskedEvaluation& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "masked_segments\t%zu\nmodel_mse\t%.9g\nmean_segment_mse\t%.9g\n",
                e.masked_segments, e.model_mse, e.mean_segment_mse);
  return buf;
}

struct EvalOutput {
  MetricsReport report;
  std::vector<std::size_t> predicted;
};

EvalOutput evaluate_on(const ModelState& state, const std::vector<SegmentSequence>& data, std::size_t workers) {
  require(!data.empty(), ErrorCode::InvalidDataset, "nothing to evaluate");
  const auto truth = labels_of(data);
  auto pred = predict(state, data, workers);
  return {make_report(confusion_matrix(truth, pred, state.config.num_classes)), pred};
}

void write_eval(const fs::path& dir, const EvalOutput& ev, const std::vector<SegmentSequence>& data,
                const std::vector<std::string>& names) {
  write_file_atomic(dir / "metrics.txt", format_report(ev.report, names));
  write_file_atomic(dir / "confusion.csv", confusion_csv(ev.report.cm, names));
  std::string pred = "record_id\ttrue\tpredicted\n";
  for (std::size_t i = 0; i < data.size(); ++i)
    pred += data[i].record_id + "\t" + names.at(*data[i].label) + "\t" + names.at(ev.predicted[i]) + "\n";
  write_file_atomic(dir / "predictions.tsv", pred);
}

ModelState init_state(const std::string& init, const std::string& checkpoint, const SegmentCorpus& corpus,
                      const RunConfig& rc, const std::string& command) {
  ModelState state;
  if (init == "random") {
    state = ModelState::initial(rc.model(corpus.segmentation.segment_length, corpus.class_names.size()),
                                rc.integer("seed"));
  } else {
    state = load_stage(checkpoint, init == "ae" ? Stage::Autoencoder : Stage::Masked, command + " --init " + init);
  }
  require(state.config.arch == Architecture::SegmentTransformer, ErrorCode::InvalidConfig,
          command + " trains the segment transformer; use train-cnn for the baseline");
  require_compatible(state, corpus);
  state.run_config = rc.result_text();
  return state;
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& rc, const std::string& out_dir, std::ostream& out) {
  const auto cfg = rc.synth();
  const auto records = synth_ecg(cfg);
  write_synth_corpus(records, cfg.num_classes, out_dir);
  write_snapshot(fs::path(out_dir) / "run_config.txt", "synth", {{"out", out_dir}}, rc);
  out << "wrote " << records.size() << " records to " << out_dir << '\n';
  return 0;
}

int cmd_preprocess(const RunConfig& rc, const std::string& in, const std::string& out_path,
                   const std::string& csv, std::ostream& out, std::ostream& err) {
  const auto manifest = load_manifest(in);
  const auto seg = rc.segmentation();
  const std::size_t n = manifest.entries.size();
  std::vector<std::optional<SegmentSequence>> results(n);
  std::vector<std::string> failures(n);
  parallel_for(n, rc.integer("workers"), [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    try {
      auto r = preprocess(read_record(manifest, e.record_id), seg);
      if (r.peaks.indices.size() < 2) {
        failures[i] = std::to_string(r.peaks.indices.size()) + " peak(s) detected";
        return;
      }
      r.sequence.label = e.label;
      results[i] = std::move(r.sequence);
    } catch (const Error& ex) {
      if (ex.code() != ErrorCode::EmptyPeaks && ex.code() != ErrorCode::Segmentation) throw;
      failures[i] = ex.what();
    }
  });

  SegmentCorpus corpus{seg, manifest.class_names, {}};
  std::string skipped = "record_id\treason\n";
  std::size_t n_skipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& id = manifest.entries[i].record_id;
    if (!results[i]) {
      err << "warning: skipped '" << id << "': " << failures[i] << '\n';
      skipped += id + "\t" + failures[i] + "\n";
      ++n_skipped;
      continue;
    }
    out << id << "\t" << results[i]->size() << " segments\n";
    corpus.sequences.push_back(std::move(*results[i]));
  }
  require(!corpus.sequences.empty(), ErrorCode::InvalidDataset, "no record produced at least two peaks");
  corpus.sequences = pad_sequences(std::move(corpus.sequences));

  write_segment_corpus(corpus, out_path);
  write_file_atomic(sibling(out_path, ".skipped.tsv"), skipped);
  if (!csv.empty()) write_file_atomic(csv, segments_csv(corpus.sequences));
  write_snapshot(sibling(out_path, ".config.txt"), "preprocess", {{"in", in}, {"out", out_path}}, rc);
  out << "kept " << corpus.sequences.size() << " of " << n << " records (" << n_skipped << " skipped), "
      << corpus.sequences[0].size() << " segments per sequence, pad mode " << pad_mode_text(seg.pad_mode) << '\n';
  return 0;
}

int cmd_pretrain_ae(const RunConfig& rc, const std::string& data, const std::string& out_path, std::ostream& out) {
  const auto corpus = read_segment_corpus(data);
  auto init = ModelState::initial(rc.model(corpus.segmentation.segment_length, corpus.class_names.size()),
                                  rc.integer("seed"));
  init.run_config = rc.result_text();
  auto res = pretrain_autoencoder(corpus.sequences, init, rc.train(TrainStage::Autoencoder), logger(out));
  save_training(res, out_path, "pretrain-ae", {{"data", data}, {"out", out_path}}, rc);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", evaluate_autoencoder(res.state, corpus.sequences));
  out << "autoencoder mse " << buf << '\n';
  return 0;
}

int cmd_pretrain_mask(const RunConfig& rc, const std::string& data, const std::string& checkpoint, bool from_scratch,
                      const std::string& out_path, std::ostream& out) {
  const auto corpus = read_segment_corpus(data);
  ModelState init;
  if (from_scratch) {
    init = ModelState::initial(rc.model(corpus.segmentation.segment_length, corpus.class_names.size()),
                               rc.integer("seed"));
  } else {
    require(!checkpoint.empty(), ErrorCode::StageOrder,
            "pretrain-mask needs an 'ae' checkpoint: pass --checkpoint or --from-scratch");
    init = load_stage(checkpoint, Stage::Autoencoder, "pretrain-mask");
  }
  require_compatible(init, corpus);
  init.run_config = rc.result_text();
  const auto cfg = rc.train(TrainStage::Masked);
  auto res = pretrain_masked(corpus.sequences, init, cfg, from_scratch, logger(out));
  save_training(res, out_path, "pretrain-mask", {{"data", data}, {"checkpoint", checkpoint}, {"out", out_path}},
                rc);
  const auto ev = evaluate_masked(res.state, corpus.sequences, cfg.mask_fraction, derive_seed(cfg.seed, 0x6576));
  write_file_atomic(sibling(out_path, ".masked_eval.txt"), masked_eval_text(ev));
  out << masked_eval_text(ev);
  return 0;
}

int cmd_finetune(const RunConfig& rc, const std::string& data, const std::string& init, const std::string& checkpoint,
                 std::optional<std::size_t> holdout, const std::string& out_path, std::ostream& out) {
  const auto corpus = read_segment_corpus(data);
  auto state = init_state(init, checkpoint, corpus, rc, "finetune");
  const auto split = select(corpus, holdout, rc);
  auto res = finetune(split.train, split.held_out, state, rc.train(TrainStage::Finetune), logger(out));
  save_training(res, out_path, "finetune",
                {{"data", data}, {"init", init}, {"checkpoint", checkpoint}, {"out", out_path}}, rc);
  if (res.history.best_epoch) out << "best epoch " << *res.history.best_epoch << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig& rc, const std::string& data, const std::string& checkpoint,
                 std::optional<std::size_t> holdout, const std::string& out_dir, std::ostream& out) {
  const auto corpus = read_segment_corpus(data);
  const auto state = load_stage(checkpoint, Stage::Finetuned, "evaluate");
  require_compatible(state, corpus);
  const auto split = select(corpus, holdout, rc);
  const auto& eval_set = holdout ? split.held_out : split.train;
  const auto ev = evaluate_on(state, eval_set, rc.integer("workers"));
  write_eval(out_dir, ev, eval_set, corpus.class_names);
  write_snapshot(fs::path(out_dir) / "run_config.txt", "evaluate", {{"data", data}, {"checkpoint", checkpoint}}, rc);
  out << format_report(ev.report, corpus.class_names);
  return 0;
}

// Stratified K-fold: fine-tune on K-1 folds from the chosen init, score the held-out fold.
int cmd_kfold(const RunConfig& rc, const std::string& data, const std::string& init, const std::string& checkpoint,
              std::size_t k, const std::string& out_dir, std::ostream& out) {
  const auto corpus = read_segment_corpus(data);
  const auto state = init_state(init, checkpoint, corpus, rc, "evaluate --kfold");
  const auto folds = folds_of(corpus.sequences, k, rc.integer("seed"));
  const auto cfg = rc.train(TrainStage::Finetune);
  std::string summary = "fold\taccuracy\tmacro_f1\tmacro_precision\tmacro_recall\n";
  std::vector<double> acc, f1, prec, rec;
  char buf[160];
  for (std::size_t f = 0; f < k; ++f) {
    const auto split = split_fold(corpus.sequences, folds[f]);
    out << "fold " << f << ": " << split.train.size() << " train, " << split.held_out.size() << " test\n";
    auto res = finetune(split.train, {}, state, cfg, logger(out));
    const auto ev = evaluate_on(res.state, split.held_out, cfg.workers);
    const fs::path dir = fs::path(out_dir) / ("fold" + std::to_string(f));
    write_eval(dir, ev, split.held_out, corpus.class_names);
    write_file_atomic(dir / "history.tsv", res.history.to_text());
    acc.push_back(ev.report.accuracy);
    f1.push_back(ev.report.macro_f1);
    prec.push_back(ev.report.macro_precision);
    rec.push_back(ev.report.macro_recall);
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\n", f, acc.back(), f1.back(), prec.back(), rec.back());
    summary += buf;
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  auto sd = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / v.size());
  };
  std::snprintf(buf, sizeof buf, "mean\t%.6f\t%.6f\t%.6f\t%.6f\nstd\t%.6f\t%.6f\t%.6f\t%.6f\n", mean(acc), mean(f1),
                mean(prec), mean(rec), sd(acc), sd(f1), sd(prec), sd(rec));
  summary += buf;
  write_file_atomic(fs::path(out_dir) / "kfold_summary.tsv", summary);
  write_snapshot(fs::path(out_dir) / "run_config.txt", "evaluate --kfold",
                 {{"data", data}, {"init", init}, {"checkpoint", checkpoint}}, rc);
  out << summary;
  return 0;
}

int cmd_saliency(const RunConfig& rc, const std::string& data, const std::string& checkpoint,
                 std::optional<std::size_t> holdout, const std::string& out_path, std::ostream& out) {
  const auto corpus = read_segment_corpus(data);
  const auto state = load_stage(checkpoint, Stage::Finetuned, "saliency");
  require_compatible(state, corpus);
  const auto split = select(corpus, holdout, rc);
  const auto& seqs = holdout ? split.held_out : split.train;
  ModelClassifier model(state);
  const auto maps = saliency_maps(model, seqs, rc.integer("workers"));
  std::vector<ClassSaliencySummary> classes;
  for (std::size_t c = 0; c < corpus.class_names.size(); ++c) {
    ClassSaliencySummary s{corpus.class_names[c], std::nullopt, {}};
    try {
      s.average = class_average_saliency(seqs, maps, c);
      s.top_segment = highest_saliency_segment(seqs, maps, c);
      out << corpus.class_names[c] << ": " << s.average->count << " segments\n";
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyClass) throw;
      out << corpus.class_names[c] << ": no sequence predicted\n";
    }
    classes.push_back(std::move(s));
  }
  write_file_atomic(out_path, saliency_csv(classes, corpus.segmentation.segment_length));
  write_snapshot(sibling(out_path, ".config.txt"), "saliency", {{"data", data}, {"checkpoint", checkpoint}}, rc);
  return 0;
}

// Raw-signal CNN baseline trained on filtered, resampled records.
int cmd_train_cnn(const RunConfig& rc, const std::string& in, std::optional<std::size_t> holdout,
                  const std::string& out_path, std::ostream& out) {
  const auto manifest = load_manifest(in);
  const auto seg = rc.segmentation();
  std::vector<LabelledSignal> all;
  std::vector<std::size_t> labels;
  for (const auto& e : manifest.entries) {
    require(e.label.has_value(), ErrorCode::InvalidDataset, "record '" + e.record_id + "' has no label");
    auto r = resample(powerline_smooth(highpass_filter(read_record(manifest, e.record_id))), seg.target_fs);
    all.push_back({std::vector<float>(r.samples.begin(), r.samples.end()), *e.label});
    labels.push_back(*e.label);
  }
  std::vector<LabelledSignal> train, test;
  if (holdout) {
    const std::size_t k = rc.integer("eval.folds");
    require(*holdout < k, ErrorCode::InvalidConfig, "--holdout-fold out of range");
    const auto folds = stratified_kfold(labels, k, rc.integer("seed"));
    std::vector<bool> held(all.size(), false);
    for (auto i : folds[*holdout]) held[i] = true;
    for (std::size_t i = 0; i < all.size(); ++i) (held[i] ? test : train).push_back(all[i]);
  } else {
    train = all;
  }
  auto mc = rc.model(seg.segment_length, manifest.class_names.size());
  mc.arch = Architecture::BaselineCnn;
  auto init = ModelState::initial(mc, rc.integer("seed"));
  init.run_config = rc.result_text();
  auto res = train_baseline_cnn(train, test, init, rc.train(TrainStage::Finetune), logger(out));
  save_training(res, out_path, "train-cnn", {{"in", in}, {"out", out_path}}, rc);
  if (!test.empty()) {
    std::vector<std::size_t> truth;
    for (const auto& t : test) truth.push_back(t.label);
    const auto report =
        make_report(confusion_matrix(truth, predict_baseline_cnn(res.state, test), mc.num_classes));
    write_file_atomic(sibling(out_path, ".metrics.txt"), format_report(report, manifest.class_names));
    out << format_report(report, manifest.class_names);
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ecgsl: heartbeat-segment ECG representation learning"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  std::vector<std::pair<std::string, std::string>> flags;
  std::string in, out_path, data, checkpoint, csv, init = "masked";
  bool from_scratch = false, freeze = false;
  std::optional<std::size_t> records, classes, segment_len, epochs, batch_size, holdout, kfold;
  std::optional<double> snr, duration, lr;
  std::optional<std::string> pad_mode;
  std::vector<double> hr_range;

  auto* synth = app.add_subcommand("synth", "generate a synthetic labelled ECG corpus");
  synth->add_option("--out", out_path, "output directory")->required();
  synth->add_option("--records", records, "number of records");
  synth->add_option("--classes", classes, "number of classes");
  synth->add_option("--snr", snr, "signal-to-noise ratio in dB (inf = clean)");
  synth->add_option("--duration", duration, "record length in seconds");
  synth->add_option("--hr-range", hr_range, "heart-rate range in bpm: LO HI")->expected(2);

  auto* pre = app.add_subcommand("preprocess", "filter, detect R-peaks and segment every record");
  pre->add_option("--in", in, "manifest file")->required();
  pre->add_option("--out", out_path, "segment corpus file")->required();
  pre->add_option("--pad-mode", pad_mode, "edge|zero|stretch");
  pre->add_option("--segment-len", segment_len, "segment length S");
  pre->add_option("--csv", csv, "also dump every segment as CSV");

  auto add_training = [&](CLI::App* sub) {
    sub->add_option("--data", data, "segment corpus file")->required();
    sub->add_option("--out", out_path, "output checkpoint")->required();
    sub->add_option("--epochs", epochs, "training epochs");
    sub->add_option("--lr", lr, "learning rate");
    sub->add_option("--batch-size", batch_size, "mini-batch size");
  };
  auto* ae = app.add_subcommand("pretrain-ae", "train the segment autoencoder");
  add_training(ae);
  auto* mask = app.add_subcommand("pretrain-mask", "masked-segment pre-training of the transformer");
  add_training(mask);
  mask->add_option("--checkpoint", checkpoint, "autoencoder checkpoint");
  mask->add_flag("--from-scratch", from_scratch, "start from random weights instead of an ae checkpoint");
  mask->add_flag("--freeze-encoder", freeze, "keep the segment encoder fixed");
  auto* ft = app.add_subcommand("finetune", "supervised fine-tuning");
  add_training(ft);
  ft->add_option("--init", init, "ae|masked|random")->check(CLI::IsMember({"ae", "masked", "random"}));
  ft->add_option("--checkpoint", checkpoint, "checkpoint to start from (ae or masked)");
  ft->add_option("--holdout-fold", holdout, "validate on this stratified fold, train on the rest");

  auto* ev = app.add_subcommand("evaluate", "metrics of a fine-tuned checkpoint, or stratified k-fold CV");
  ev->add_option("--data", data, "segment corpus file")->required();
  ev->add_option("--out", out_path, "output directory")->required();
  ev->add_option("--checkpoint", checkpoint, "fine-tuned checkpoint, or the init checkpoint with --kfold");
  ev->add_option("--holdout-fold", holdout, "evaluate only this stratified fold");
  ev->add_option("--kfold", kfold, "run K-fold cross-validation")->check(CLI::Range(2, 1000));
  ev->add_option("--init", init, "init for --kfold: ae|masked|random")
      ->check(CLI::IsMember({"ae", "masked", "random"}));
  ev->add_option("--epochs", epochs, "fine-tuning epochs per fold (--kfold)");
  ev->add_option("--lr", lr, "fine-tuning learning rate (--kfold)");
  ev->add_option("--batch-size", batch_size, "fine-tuning batch size (--kfold)");

  auto* sal = app.add_subcommand("saliency", "class-averaged input saliency of a fine-tuned checkpoint");
  sal->add_option("--data", data, "segment corpus file")->required();
  sal->add_option("--checkpoint", checkpoint, "fine-tuned checkpoint")->required();
  sal->add_option("--out", out_path, "output CSV")->required();
  sal->add_option("--holdout-fold", holdout, "only this stratified fold");

  auto* cnn = app.add_subcommand("train-cnn", "raw-signal CNN baseline");
  cnn->add_option("--in", in, "manifest file")->required();
  cnn->add_option("--out", out_path, "output checkpoint")->required();
  cnn->add_option("--epochs", epochs, "training epochs");
  cnn->add_option("--lr", lr, "learning rate");
  cnn->add_option("--batch-size", batch_size, "mini-batch size");
  cnn->add_option("--holdout-fold", holdout, "test on this stratified fold");

  for (auto* sub : {synth, pre, ae, mask, ft, ev, sal, cnn}) add_common(sub, common);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[E_USAGE]: " << e.what() << '\n';
    return 2;
  }

  try {
    auto stage_prefix = [&]() -> std::string {
      if (ae->parsed()) return "ae.";
      if (mask->parsed()) return "mask.";
      return "finetune.";
    };
    const std::string sp = stage_prefix();
    maybe(flags, (sp + "epochs").c_str(), epochs);
    maybe(flags, (sp + "lr").c_str(), lr);
    maybe(flags, (sp + "batch_size").c_str(), batch_size);
    maybe(flags, "synth.records", records);
    maybe(flags, "synth.classes", classes);
    maybe(flags, "synth.snr", snr);
    maybe(flags, "synth.duration", duration);
    if (hr_range.size() == 2) {
      maybe(flags, "synth.hr_min", std::optional<double>(hr_range[0]));
      maybe(flags, "synth.hr_max", std::optional<double>(hr_range[1]));
    }
    maybe(flags, "segment.pad_mode", pad_mode);
    maybe(flags, "segment.length", segment_len);
    if (freeze) flags.emplace_back("train.freeze_encoder", "true");
    if (kfold) flags.emplace_back("eval.folds", std::to_string(*kfold));
    const RunConfig rc = resolve(common, flags);

    if (synth->parsed()) return cmd_synth(rc, out_path, out);
    if (pre->parsed()) return cmd_preprocess(rc, in, out_path, csv, out, err);
    if (ae->parsed()) return cmd_pretrain_ae(rc, data, out_path, out);
    if (mask->parsed()) return cmd_pretrain_mask(rc, data, checkpoint, from_scratch, out_path, out);
    if (ft->parsed()) return cmd_finetune(rc, data, init, checkpoint, holdout, out_path, out);
    if (ev->parsed()) {
      if (kfold) {
        require(ev->count("--init") > 0, ErrorCode::InvalidConfig,
                "evaluate --kfold re-trains each fold: pass --init ae|masked|random");
        return cmd_kfold(rc, data, init, checkpoint, *kfold, out_path, out);
      }
      return cmd_evaluate(rc, data, checkpoint, holdout, out_path, out);
    }
    if (sal->parsed()) return cmd_saliency(rc, data, checkpoint, holdout, out_path, out);
    if (cnn->parsed()) return cmd_train_cnn(rc, in, holdout, out_path, out);
  } catch (const Error& e) {
    err << "error[" << code_name(e.code()) << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error[E_INTERNAL]: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace ecgsl::cli

// paed: command-line front end for corpus generation, training, evaluation,
// prediction and attention-mask inspection.
//
// Exit codes: 0 success, 1 usage error (bad flags or configuration),
// 2 data or model error (unreadable inputs, incompatible checkpoints, ...).

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "paed/checkpoint.hpp"
#include "paed/config.hpp"
#include "paed/datasets.hpp"
#include "paed/error.hpp"
#include "paed/evaluation.hpp"
#include "paed/features.hpp"
#include "paed/rng.hpp"
#include "paed/training.hpp"
#include "paed/wav.hpp"

namespace fs = std::filesystem;
using namespace paed;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

/// Seed stream for parameter initialization; corpus synthesis and training
/// use their own streams of the same run seed.
constexpr std::uint64_t kInitStream = 101;

constexpr const char* kResolvedConfigName = "config.resolved";
constexpr const char* kCheckpointName = "model.paed";
constexpr const char* kTrainLogName = "train_log.csv";

/// Options shared by the commands that build a configuration.
struct ConfigFlags {
  std::optional<std::string> file;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", file, "key = value configuration file")->check(CLI::ExistingFile);
    cmd.add_option("--seed", seed, "run seed (overrides the config)");
    cmd.add_option("--set", sets, "override one key, as key=value (repeatable)");
  }

  RunConfig resolve() const {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) overrides.emplace_back("seed", std::to_string(*seed));
    std::optional<fs::path> path;
    if (file) path = *file;
    return resolve_config(path, process_env, overrides);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

void echo_config(const fs::path& dir, const RunConfig& config) {
  write_text(dir / kResolvedConfigName, config.to_text());
}

/// Precision recorded in a checkpoint's config block.
Precision checkpoint_precision(const CheckpointFile& file) {
  try {
    return RunConfig::parse(file.config_text, "checkpoint config").precision;
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: invalid config block: ") + e.what());
  }
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw UsageError("unknown split '" + name + "' (expected train, val or test)");
}

// ---------------------------------------------------------------- gen

int cmd_gen(const RunConfig& config, const fs::path& out) {
  const CorpusSpec spec = config.corpus_spec();
  const Corpus corpus = synth_generate(spec);
  write_corpus(corpus, spec, out);
  echo_config(out, config);
  std::cout << "wrote " << corpus.train.size() << " train, " << corpus.val.size() << " val, " << corpus.test.size()
            << " test recordings to " << out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- train

template <typename T>
int train_with(const RunConfig& config, const fs::path& corpus_dir, const fs::path& out) {
  const CategorySet cats = config.category_set();
  const FeatureConfig fcfg = config.feature_config();
  const Corpus corpus = load_corpus(corpus_dir, cats);
  if (corpus.train.empty()) throw DataError("corpus '" + corpus_dir.string() + "' has no training recordings");
  if (corpus.val.empty()) throw DataError("corpus '" + corpus_dir.string() + "' has no validation recordings");

  const auto train_specs = compute_spectrograms(corpus.train, fcfg);
  const auto val_specs = compute_spectrograms(corpus.val, fcfg);
  const FeatureStats stats = round_to_float(compute_stats(train_specs));
  std::vector<std::string> warnings;
  const SplitData train = prepare_split(corpus.train, train_specs, cats, stats, SegmentMode::train, fcfg, &warnings);
  const SplitData val = prepare_split(corpus.val, val_specs, cats, stats, SegmentMode::test, fcfg);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';

  Model<T> model(config.model_config(), cats, config.task_decomposition(), derive_seed(config.seed, kInitStream));
  fs::create_directories(out);
  std::ofstream log(out / kTrainLogName, std::ios::binary | std::ios::trunc);
  if (!log) throw DataError("cannot write '" + (out / kTrainLogName).string() + "'");
  const TrainResult result = train_run(model, train, val, config.train_config(), &log);
  save_checkpoint(out / kCheckpointName, config, stats, model);
  echo_config(out, config);
  for (const auto& e : result.epochs) {
    std::cout << "epoch " << e.epoch << "  steps " << e.step << "  loss " << e.train_loss << "  val micro F1 "
              << e.val_micro_f1 << '\n';
  }
  std::printf("best epoch %zu, validation micro F1 %.4f\n", result.best_epoch, result.best_val_micro_f1);
  return 0;
}

int cmd_train(const RunConfig& config, const fs::path& corpus_dir, const fs::path& out) {
  return config.precision == Precision::fast ? train_with<float>(config, corpus_dir, out)
                                             : train_with<double>(config, corpus_dir, out);
}

// ---------------------------------------------------------------- eval

template <typename T>
int eval_with(const CheckpointFile& checkpoint, const fs::path& corpus_dir, Split split, const fs::path& out) {
  LoadedModel<T> loaded = restore_checkpoint<T>(checkpoint);
  const RunConfig& config = loaded.config;
  const CategorySet cats = config.category_set();
  const FeatureConfig fcfg = config.feature_config();
  const Corpus corpus = load_corpus(corpus_dir, cats);
  const auto& recordings = corpus.split(split);
  if (recordings.empty()) {
    throw DataError("corpus '" + corpus_dir.string() + "' has no " + split_name(split) + " recordings");
  }
  const auto specs = compute_spectrograms(recordings, fcfg);
  const SplitData data = prepare_split(recordings, specs, cats, loaded.stats, SegmentMode::test, fcfg);
  const EvalReport report = evaluate_model(loaded.model, data, config.threshold);
  fs::create_directories(out);
  write_per_class_csv(report, out / "per_class.csv");
  write_by_degree_csv(report, out / "by_degree.csv");
  echo_config(out, config);
  std::printf("%s split: %zu frames, macro F1 (Average) %.4f, micro F1 (Overall) %.4f\n", split_name(split),
              report.frames, report.macro_f1(), report.micro_f1());
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& corpus_dir, Split split, const fs::path& out) {
  const CheckpointFile file = read_checkpoint_file(checkpoint);
  return checkpoint_precision(file) == Precision::fast ? eval_with<float>(file, corpus_dir, split, out)
                                                       : eval_with<double>(file, corpus_dir, split, out);
}

// ---------------------------------------------------------------- predict

/// Standardized log-mel features of one WAV file, shaped for the model.
NdBuffer<double> wav_features(const fs::path& wav, const RunConfig& config, const FeatureStats& stats) {
  const Waveform w = read_wav(wav);
  const FeatureConfig fcfg = config.feature_config();
  return standardize(log_mel(w.samples, w.sample_rate, fcfg).values, stats);
}

template <typename T>
int predict_with(const CheckpointFile& checkpoint, const fs::path& wav, const fs::path& out) {
  LoadedModel<T> loaded = restore_checkpoint<T>(checkpoint);
  const FeatureConfig fcfg = loaded.config.feature_config();
  const NdBuffer<double> features = wav_features(wav, loaded.config, loaded.stats);
  const std::vector<double> pad = standardized_floor(loaded.stats, fcfg);
  const FrameLabelMatrix frames = predict_frames(loaded.model, features, pad, loaded.config.threshold);
  const auto annotations = labels_to_annotations(frames, loaded.model.categories(), fcfg);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_annotations(out, annotations);
  std::cout << "wrote " << annotations.size() << " events to " << out.string() << '\n';
  return 0;
}

int cmd_predict(const fs::path& checkpoint, const fs::path& wav, const fs::path& out) {
  const CheckpointFile file = read_checkpoint_file(checkpoint);
  return checkpoint_precision(file) == Precision::fast ? predict_with<float>(file, wav, out)
                                                       : predict_with<double>(file, wav, out);
}

// ---------------------------------------------------------------- attn-dump

void write_grid_csv(const fs::path& path, const NdBuffer<double>& values, std::size_t rows, std::size_t cols) {
  std::string text;
  char buf[40];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", values[r * cols + c]);
      if (c) text += ',';
      text += buf;
    }
    text += '\n';
  }
  write_text(path, text);
}

/// Binary greyscale image; value v in [0, 1] maps to round(255 v).
void write_pgm(const fs::path& path, const NdBuffer<double>& values, std::size_t rows, std::size_t cols) {
  std::string data = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (std::size_t i = 0; i < rows * cols; ++i) {
    const double v = std::clamp(values[i], 0.0, 1.0);
    data += static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v)));
  }
  write_text(path, data);
}

int cmd_attn_dump(const fs::path& checkpoint, const fs::path& wav, std::size_t task, std::size_t level,
                  std::size_t segment, bool pgm, const fs::path& out) {
  // Masks are always computed in 64-bit arithmetic so that values near the
  // ends of (0, 1) are not rounded onto them.
  LoadedModel<double> loaded = load_checkpoint<double>(checkpoint);
  const RunConfig& config = loaded.config;
  if (config.model != ModelKind::multitask) throw UsageError("attn-dump: the checkpoint holds a baseline model");
  const std::size_t tasks = loaded.model.decomposition().num_tasks();
  const std::size_t levels = config.filters.size();
  if (task < 1 || task > tasks) {
    throw UsageError("attn-dump: --task must be in 1.." + std::to_string(tasks) + ", got " + std::to_string(task));
  }
  if (level < 1 || level > levels) {
    throw UsageError("attn-dump: --level must be in 1.." + std::to_string(levels) + ", got " + std::to_string(level));
  }
  const FeatureConfig fcfg = config.feature_config();
  const NdBuffer<double> features = wav_features(wav, config, loaded.stats);
  const auto layout = segment_layout(features.shape()[0], SegmentMode::test);
  if (segment >= layout.size()) {
    throw UsageError("attn-dump: --segment must be below " + std::to_string(layout.size()) + " for this file");
  }
  const std::vector<double> pad = standardized_floor(loaded.stats, fcfg);
  Tape<double> tape(Mode::infer);
  const auto r = loaded.model.forward(tape, extract_segment(features, layout[segment], pad));
  const LevelOutputs<double>& lv = r.levels[task - 1][level - 1];
  const NdBuffer<double>& tf = lv.tf_mask.value();
  const NdBuffer<double>& ch = lv.channel_mask.value();
  const std::size_t rows = tf.shape()[0], cols = tf.shape()[1], channels = ch.shape().back();

  const std::string stem = "task" + std::to_string(task) + "_level" + std::to_string(level);
  fs::create_directories(out);
  write_grid_csv(out / ("tf_mask_" + stem + ".csv"), tf, rows, cols);
  write_grid_csv(out / ("channel_mask_" + stem + ".csv"), ch, channels, 1);
  if (pgm) {
    write_pgm(out / ("tf_mask_" + stem + ".pgm"), tf, rows, cols);
    write_pgm(out / ("channel_mask_" + stem + ".pgm"), ch, 1, channels);
  }
  echo_config(out, config);
  std::cout << "time-frequency mask " << rows << "x" << cols << ", channel mask " << channels << " -> "
            << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Polyphonic audio event detection with multi-task attention networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "paed 0.1.0");

  ConfigFlags gen_flags, train_flags, show_flags;
  std::string out, corpus, checkpoint, wav, split = "test";
  std::size_t task = 1, level = 1, segment = 0;
  bool pgm = false, list_keys = false;

  auto* gen = app.add_subcommand("gen", "synthesize a corpus (WAV + annotations)");
  gen_flags.attach(*gen);
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model on a corpus");
  train_flags.attach(*train);
  train->add_option("--corpus", corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "output directory (model.paed, train_log.csv)")->required();

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a corpus split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--corpus", corpus, "corpus directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split, "train, val or test")->capture_default_str();
  eval->add_option("--out", out, "output directory (per_class.csv, by_degree.csv)")->required();

  auto* predict = app.add_subcommand("predict", "write detected events of one WAV file");
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("--wav", wav, "16-bit mono WAV file")->required();
  predict->add_option("--out", out, "annotation file to write")->required();

  auto* attn = app.add_subcommand("attn-dump", "export attention masks of one segment");
  attn->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  attn->add_option("--wav", wav, "16-bit mono WAV file")->required();
  attn->add_option("--task", task, "task subnet, 1-based")->capture_default_str();
  attn->add_option("--level", level, "Att-Conv-Block level, 1-based")->capture_default_str();
  attn->add_option("--segment", segment, "0-based index of the 128-frame segment")->capture_default_str();
  attn->add_flag("--pgm", pgm, "also write 8-bit PGM images");
  attn->add_option("--out", out, "output directory")->required();

  auto* show = app.add_subcommand("config", "print the resolved configuration");
  show_flags.attach(*show);
  show->add_flag("--keys", list_keys, "list every key with its description");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_flags.resolve(), out);
    if (*train) return cmd_train(train_flags.resolve(), corpus, out);
    if (*eval) return cmd_eval(checkpoint, corpus, parse_split(split), out);
    if (*predict) return cmd_predict(checkpoint, wav, out);
    if (*attn) return cmd_attn_dump(checkpoint, wav, task, level, segment, pgm, out);
    if (*show) {
      if (list_keys) {
        for (const auto& k : RunConfig::keys()) {
          std::cout << k.name << " (" << env_name(k.name) << ", default " << RunConfig{}.get(k.name)
                    << "): " << k.help << '\n';
        }
      } else {
        std::cout << show_flags.resolve().to_text();
      }
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "paed: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "paed: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

#include "paed/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "paed/error.hpp"

namespace paed {
namespace {

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw UsageError("config: invalid value '" + std::string(value) + "' for '" + std::string(key) + "' (expected " +
                   std::string(expected) + ")");
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    bad_value(key, v, "a finite number");
  }
  return out;
}

/// Shortest representation that parses back to the same double.
std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general);
  return std::string(buf, ptr);
}

struct KeyHandler {
  std::string_view help;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename M>
KeyHandler size_key(M RunConfig::*field, std::string_view help) {
  return {help,
          [field](RunConfig& c, std::string_view k, std::string_view v) {
            c.*field = static_cast<M>(parse_u64(k, v));
          },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

KeyHandler double_key(double RunConfig::*field, std::string_view help) {
  return {help, [field](RunConfig& c, std::string_view k, std::string_view v) { c.*field = parse_double(k, v); },
          [field](const RunConfig& c) { return format_double(c.*field); }};
}

const std::map<std::string_view, KeyHandler>& handlers() {
  static const std::map<std::string_view, KeyHandler> table = [] {
    std::map<std::string_view, KeyHandler> t;
    t.emplace("seed", size_key(&RunConfig::seed, "master seed for corpus synthesis, initialization and training"));
    t.emplace("categories",
              size_key(&RunConfig::categories, "number of event categories (a prefix of the 16-category list)"));
    t.emplace("train_recordings", size_key(&RunConfig::train_recordings, "synthetic training recordings"));
    t.emplace("val_recordings", size_key(&RunConfig::val_recordings, "synthetic validation recordings"));
    t.emplace("test_recordings", size_key(&RunConfig::test_recordings, "synthetic test recordings"));
    t.emplace("duration", double_key(&RunConfig::duration, "length of each synthetic recording in seconds"));
    t.emplace("events_per_recording", size_key(&RunConfig::events_per_recording, "events placed per recording"));
    t.emplace("max_polyphony", size_key(&RunConfig::max_polyphony, "largest number of simultaneous events"));
    t.emplace("min_event_duration", double_key(&RunConfig::min_event_duration, "shortest event in seconds"));
    t.emplace("max_event_duration", double_key(&RunConfig::max_event_duration, "longest event in seconds"));
    t.emplace("frame_length", size_key(&RunConfig::frame_length, "analysis frame length in samples"));
    t.emplace("hop_length", size_key(&RunConfig::hop_length, "frame hop in samples"));
    t.emplace("fft_size", size_key(&RunConfig::fft_size, "FFT length in samples (zero-padded frames)"));
    t.emplace("num_mels", size_key(&RunConfig::num_mels, "mel bands of the log-mel features"));
    t.emplace("fmin", double_key(&RunConfig::fmin, "lowest mel filter edge in Hz"));
    t.emplace("fmax", double_key(&RunConfig::fmax, "highest mel filter edge in Hz"));
    t.emplace("model", KeyHandler{"multitask or baseline",
                                  [](RunConfig& c, std::string_view k, std::string_view v) {
                                    if (v == "multitask") {
                                      c.model = ModelKind::multitask;
                                    } else if (v == "baseline") {
                                      c.model = ModelKind::baseline;
                                    } else {
                                      bad_value(k, v, "multitask or baseline");
                                    }
                                  },
                                  [](const RunConfig& c) {
                                    return std::string(c.model == ModelKind::multitask ? "multitask" : "baseline");
                                  }});
    t.emplace("tasks", size_key(&RunConfig::tasks, "number of task-specific subnets of the multi-task model"));
    t.emplace("decomposition",
              KeyHandler{"auto-equal (contiguous equal groups) or category-name groups 'a,b | c,d'",
                         [](RunConfig& c, std::string_view, std::string_view v) { c.decomposition = std::string(v); },
                         [](const RunConfig& c) { return c.decomposition; }});
    t.emplace("filters", KeyHandler{"comma-separated output channels of the convolutional blocks",
                                    [](RunConfig& c, std::string_view k, std::string_view v) {
                                      std::vector<std::size_t> f;
                                      for (std::string_view part : split(v, ',')) f.push_back(parse_u64(k, part));
                                      c.filters = std::move(f);
                                    },
                                    [](const RunConfig& c) {
                                      std::string s;
                                      for (std::size_t i = 0; i < c.filters.size(); ++i) {
                                        if (i) s += ',';
                                        s += std::to_string(c.filters[i]);
                                      }
                                      return s;
                                    }});
    t.emplace("gru_hidden", size_key(&RunConfig::gru_hidden, "hidden units per GRU direction"));
    t.emplace("fc_units", size_key(&RunConfig::fc_units, "units of the two fully connected layers"));
    t.emplace("dropout", double_key(&RunConfig::dropout, "dropout rate of conv, recurrent and FC layers"));
    t.emplace("learning_rate", double_key(&RunConfig::learning_rate, "Adam learning rate"));
    t.emplace("batch_size", size_key(&RunConfig::batch_size, "segments per minibatch"));
    t.emplace("epochs", size_key(&RunConfig::epochs, "training epochs"));
    t.emplace("steps_per_epoch", size_key(&RunConfig::steps_per_epoch, "optimizer steps per epoch; 0 = one full pass"));
    t.emplace("threshold", double_key(&RunConfig::threshold, "decision threshold of the baseline's sigmoids"));
    t.emplace("precision", KeyHandler{"fast (32-bit) or high (64-bit) arithmetic",
                                      [](RunConfig& c, std::string_view k, std::string_view v) {
                                        if (v == "fast") {
                                          c.precision = Precision::fast;
                                        } else if (v == "high") {
                                          c.precision = Precision::high;
                                        } else {
                                          bad_value(k, v, "fast or high");
                                        }
                                      },
                                      [](const RunConfig& c) {
                                        return std::string(c.precision == Precision::fast ? "fast" : "high");
                                      }});
    return t;
  }();
  return table;
}

const KeyHandler& handler(std::string_view key) {
  const auto& t = handlers();
  const auto it = t.find(key);
  if (it == t.end()) throw UsageError("config: unknown key '" + std::string(key) + "'");
  return it->second;
}

}  // namespace

const std::vector<RunConfig::KeyInfo>& RunConfig::keys() {
  static const std::vector<KeyInfo> list = [] {
    std::vector<KeyInfo> out;
    for (const auto& [name, h] : handlers()) out.push_back({name, h.help});
    return out;
  }();
  return list;
}

bool RunConfig::is_key(std::string_view key) { return handlers().contains(key); }

void RunConfig::set(std::string_view key, std::string_view value) { handler(key).set(*this, key, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return handler(key).get(*this); }

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [name, h] : handlers()) {
    out += name;
    out += " = ";
    out += h.get(*this);
    out += '\n';
  }
  return out;
}

RunConfig RunConfig::parse(std::string_view text, const std::string& source) {
  RunConfig c;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  for (std::string_view line : split(text, '\n')) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw UsageError(where + "expected 'key = value'");
    const std::string_view key = trim(line.substr(0, eq));
    if (!is_key(key)) throw UsageError(where + "unknown key '" + std::string(key) + "'");
    if (!seen.insert(std::string(key)).second) throw UsageError(where + "key '" + std::string(key) + "' repeated");
    try {
      c.set(key, line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(where + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("config: cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void RunConfig::validate() const {
  const std::size_t max_categories = CategorySet::tut_synthetic_2016().size();
  if (categories == 0 || categories > max_categories) {
    throw UsageError("config: categories must be in 1.." + std::to_string(max_categories));
  }
  corpus_spec().validate();
  const FeatureConfig f = feature_config();
  if (f.frame_length == 0 || f.hop_length == 0) throw UsageError("config: frame_length and hop_length must be positive");
  if (f.fft_size < f.frame_length) throw UsageError("config: fft_size must be at least frame_length");
  if (f.num_mels == 0) throw UsageError("config: num_mels must be positive");
  if (!(f.fmin >= 0.0 && f.fmin < f.fmax && f.fmax <= f.sample_rate / 2.0)) {
    throw UsageError("config: need 0 <= fmin < fmax <= " + format_double(f.sample_rate / 2.0));
  }
  model_config().validate();
  if (model == ModelKind::multitask && tasks == 0) throw UsageError("config: tasks must be positive");
  const TaskDecomposition d = task_decomposition();
  if (model == ModelKind::multitask && d.num_tasks() != tasks) {
    throw UsageError("config: decomposition has " + std::to_string(d.num_tasks()) + " groups but tasks = " +
                     std::to_string(tasks));
  }
  train_config().validate();
}

CategorySet RunConfig::category_set() const {
  const CategorySet all = CategorySet::tut_synthetic_2016();
  if (categories == 0 || categories > all.size()) {
    throw UsageError("config: categories must be in 1.." + std::to_string(all.size()));
  }
  return all.prefix(categories);
}

CorpusSpec RunConfig::corpus_spec() const {
  CorpusSpec s;
  s.seed = seed;
  s.categories = category_set();
  s.train_recordings = train_recordings;
  s.val_recordings = val_recordings;
  s.test_recordings = test_recordings;
  s.duration = duration;
  s.events_per_recording = events_per_recording;
  s.max_polyphony = static_cast<int>(std::min<std::size_t>(max_polyphony, 1000));
  s.min_event_duration = min_event_duration;
  s.max_event_duration = max_event_duration;
  return s;
}

FeatureConfig RunConfig::feature_config() const {
  FeatureConfig f;
  f.frame_length = frame_length;
  f.hop_length = hop_length;
  f.fft_size = fft_size;
  f.num_mels = num_mels;
  f.fmin = fmin;
  f.fmax = fmax;
  return f;
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.kind = model;
  m.filters = filters;
  m.gru_hidden = gru_hidden;
  m.fc_units = fc_units;
  m.dropout = dropout;
  m.num_mels = num_mels;
  return m;
}

TaskDecomposition RunConfig::task_decomposition() const {
  const CategorySet cats = category_set();
  if (model == ModelKind::baseline) return TaskDecomposition::equal_split(cats.size(), 1);
  if (trim(decomposition) == "auto-equal") return TaskDecomposition::equal_split(cats.size(), tasks);
  std::vector<TaskGroup> groups;
  for (std::string_view group : split(decomposition, '|')) {
    TaskGroup g;
    for (std::string_view name : split(group, ',')) {
      if (!cats.contains(name)) {
        throw UsageError("config: decomposition names unknown category '" + std::string(name) + "'");
      }
      g.push_back(cats.index_of(name));
    }
    groups.push_back(std::move(g));
  }
  return TaskDecomposition(std::move(groups), cats.size());
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = learning_rate;
  t.batch_size = batch_size;
  t.epochs = epochs;
  t.steps_per_epoch = steps_per_epoch;
  t.seed = seed;
  t.threshold = threshold;
  return t;
}

std::optional<std::string> process_env(const std::string& name) {
  if (const char* v = std::getenv(name.c_str())) return std::string(v);
  return std::nullopt;
}

std::string env_name(std::string_view key) {
  std::string out(kEnvPrefix);
  for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const EnvLookup& env,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig c = file ? RunConfig::load(*file) : RunConfig{};
  if (env) {
    for (const auto& k : RunConfig::keys()) {
      if (auto v = env(env_name(k.name))) {
        try {
          c.set(k.name, *v);
        } catch (const UsageError& e) {
          throw UsageError(env_name(k.name) + ": " + e.what());
        }
      }
    }
  }
  for (const auto& [key, value] : overrides) c.set(key, value);
  c.validate();
  return c;
}

}  // namespace paed

#include "paed/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "paed/error.hpp"
#include "paed/rng.hpp"

namespace paed {
namespace {

enum class Init { he_uniform, recurrent_uniform, zeros, ones, running_mean, running_var, running_count };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan = 0;
};

std::string task_prefix(std::size_t task) { return "task" + std::to_string(task + 1); }

void add_conv(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t k, std::size_t cin,
              std::size_t cout) {
  out.push_back({prefix + ".kernel", {k, k, cin, cout}, Init::he_uniform, k * k * cin});
  out.push_back({prefix + ".bias", {cout}, Init::zeros});
}

void add_bn(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t c) {
  out.push_back({prefix + ".gamma", {c}, Init::ones});
  out.push_back({prefix + ".beta", {c}, Init::zeros});
  out.push_back({prefix + ".running_mean", {c}, Init::running_mean});
  out.push_back({prefix + ".running_var", {c}, Init::running_var});
  out.push_back({prefix + ".running_count", {1}, Init::running_count});
}

void add_dense(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, std::size_t units) {
  out.push_back({prefix + ".weight", {in, units}, Init::he_uniform, in});
  out.push_back({prefix + ".bias", {units}, Init::zeros});
}

void add_head(std::vector<ParamSpec>& out, const std::string& prefix, const ModelConfig& c, std::size_t in,
              std::size_t classes) {
  const std::size_t h = c.gru_hidden;
  for (const char* dir : {".gru_fwd", ".gru_bwd"}) {
    out.push_back({prefix + dir + ".input", {in, 3 * h}, Init::recurrent_uniform, h});
    out.push_back({prefix + dir + ".recurrent", {h, 3 * h}, Init::recurrent_uniform, h});
    out.push_back({prefix + dir + ".bias", {3 * h}, Init::zeros});
  }
  add_dense(out, prefix + ".fc1", 2 * h, c.fc_units);
  add_dense(out, prefix + ".fc2", c.fc_units, c.fc_units);
  add_dense(out, prefix + ".out", c.fc_units, classes);
}

std::vector<ParamSpec> param_specs(const ModelConfig& c, std::size_t num_categories,
                                   const TaskDecomposition& decomposition) {
  c.validate();
  std::vector<ParamSpec> out;
  std::size_t cin = 1;
  for (std::size_t b = 0; b < c.filters.size(); ++b) {
    const std::string p = "backbone.block" + std::to_string(b + 1);
    add_conv(out, p + ".conv1", 3, cin, c.filters[b]);
    add_bn(out, p + ".bn1", c.filters[b]);
    add_conv(out, p + ".conv2", 3, c.filters[b], c.filters[b]);
    add_bn(out, p + ".bn2", c.filters[b]);
    cin = c.filters[b];
  }
  const std::size_t final_freq = c.num_mels >> c.filters.size();
  const std::size_t head_in = final_freq * c.filters.back();
  if (c.kind == ModelKind::baseline) {
    add_head(out, "baseline.head", c, head_in, num_categories);
    return out;
  }
  const auto counts = decomposition.class_counts();
  for (std::size_t n = 0; n < decomposition.num_tasks(); ++n) {
    std::size_t prev = 0;
    for (std::size_t l = 0; l < c.filters.size(); ++l) {
      const std::size_t ch = c.filters[l];
      const std::string p = task_prefix(n) + ".level" + std::to_string(l + 1);
      add_conv(out, p + ".tf_att", 1, 2, 1);
      add_conv(out, p + ".ch_att.squeeze", 1, ch, ch / 2);
      add_conv(out, p + ".ch_att.excite", 1, ch / 2, ch);
      add_conv(out, p + ".reduce", 1, 2 * ch, ch);
      add_conv(out, p + ".conv", 3, ch + prev, ch);
      add_bn(out, p + ".bn", ch);
      prev = ch;
    }
    add_head(out, task_prefix(n) + ".head", c, head_in, static_cast<std::size_t>(counts[n]));
  }
  return out;
}

template <typename T>
Var<T> param_var(Tape<T>& tape, ParamStore<T>& params, const std::string& name) {
  return tape.parameter(params.get(name));
}

template <typename T>
Var<T> conv(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x) {
  return ops::conv2d(x, param_var(tape, params, prefix + ".kernel"), param_var(tape, params, prefix + ".bias"));
}

template <typename T>
Var<T> norm(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x) {
  ops::RunningStats<T> stats{&params.get(prefix + ".running_mean").value, &params.get(prefix + ".running_var").value,
                             &params.get(prefix + ".running_count").value};
  return ops::batch_norm(x, param_var(tape, params, prefix + ".gamma"), param_var(tape, params, prefix + ".beta"), stats,
                         tape.mode());
}

template <typename T>
Var<T> conv_bn_relu_dropout(Tape<T>& tape, ParamStore<T>& params, const std::string& conv_prefix,
                            const std::string& bn_prefix, Var<T> x, double dropout) {
  Var<T> y = conv(tape, params, conv_prefix, x);
  y = norm(tape, params, bn_prefix, y);
  return ops::dropout(ops::relu(y), dropout);
}

template <typename T>
Var<T> dense(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x) {
  return ops::dense(x, param_var(tape, params, prefix + ".weight"), param_var(tape, params, prefix + ".bias"));
}

}  // namespace

void ModelConfig::validate() const {
  if (filters.empty()) throw UsageError("model: at least one convolutional block is required");
  for (std::size_t f : filters) {
    if (f < 2 || f % 2 != 0) throw UsageError("model: filter counts must be even and at least 2");
  }
  if (gru_hidden == 0 || fc_units == 0) throw UsageError("model: gru_hidden and fc_units must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("model: dropout must be in [0, 1)");
  if (filters.size() >= 20 || num_mels == 0 || num_mels % (std::size_t{1} << filters.size()) != 0) {
    throw UsageError("model: num_mels (" + std::to_string(num_mels) + ") must be divisible by 2^" +
                     std::to_string(filters.size()));
  }
}

template <typename T>
BlockOutputs<T> conv_block_forward(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x,
                                   double dropout) {
  BlockOutputs<T> out;
  out.m1 = conv_bn_relu_dropout(tape, params, prefix + ".conv1", prefix + ".bn1", x, dropout);
  out.m2 = conv_bn_relu_dropout(tape, params, prefix + ".conv2", prefix + ".bn2", out.m1, dropout);
  out.pooled = ops::pool_freq_max(out.m2);
  return out;
}

template <typename T>
Var<T> tf_attention(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> m1) {
  return ops::sigmoid(conv(tape, params, prefix, ops::channel_pool(m1)));
}

template <typename T>
Var<T> channel_attention(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> m1) {
  if (m1.shape().back() % 2 != 0) {
    throw ShapeError("channel_attention: channel count " + std::to_string(m1.shape().back()) + " must be even");
  }
  Var<T> s = ops::global_avg_pool(m1);
  s = ops::relu(conv(tape, params, prefix + ".squeeze", s));
  return ops::sigmoid(conv(tape, params, prefix + ".excite", s));
}

template <typename T>
Var<T> attention_fuse(Var<T> tf_mask, Var<T> channel_mask, Var<T> m2) {
  return ops::concat_last(ops::mul(m2, tf_mask), ops::mul(m2, channel_mask));
}

template <typename T>
Var<T> fuse_task_features(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> fused,
                          std::optional<Var<T>> prev, double dropout) {
  Var<T> x = conv(tape, params, prefix + ".reduce", fused);
  if (prev) {
    const Shape& a = x.shape();
    const Shape& b = prev->shape();
    if (a.size() != b.size() || !std::equal(a.begin(), a.end() - 1, b.begin())) {
      throw ShapeError("fuse_task_features: previous level output " + shape_to_string(b) +
                       " does not match the current maps " + shape_to_string(a) + " outside the channel axis");
    }
    x = ops::concat_last(x, *prev);
  }
  x = conv_bn_relu_dropout(tape, params, prefix + ".conv", prefix + ".bn", x, dropout);
  return ops::pool_freq_max(x);
}

template <typename T>
Var<T> task_head(Tape<T>& tape, ParamStore<T>& params, const std::string& prefix, Var<T> x, double dropout,
                 bool sigmoid_output) {
  const Shape& s = x.shape();
  if (s.size() < 3) throw ShapeError("task_head: expected [..., T, F, C], got " + shape_to_string(s));
  Shape flat(s.begin(), s.end() - 2);
  flat.push_back(s[s.size() - 2] * s.back());
  x = ops::reshape(x, flat);
  const ops::GruWeights<T> fwd{param_var(tape, params, prefix + ".gru_fwd.input"),
                               param_var(tape, params, prefix + ".gru_fwd.recurrent"),
                               param_var(tape, params, prefix + ".gru_fwd.bias")};
  const ops::GruWeights<T> bwd{param_var(tape, params, prefix + ".gru_bwd.input"),
                               param_var(tape, params, prefix + ".gru_bwd.recurrent"),
                               param_var(tape, params, prefix + ".gru_bwd.bias")};
  x = ops::dropout(ops::gru_bidirectional(x, fwd, bwd), dropout);
  x = ops::dropout(ops::relu(dense(tape, params, prefix + ".fc1", x)), dropout);
  x = ops::dropout(ops::relu(dense(tape, params, prefix + ".fc2", x)), dropout);
  Var<T> logits = dense(tape, params, prefix + ".out", x);
  if (sigmoid_output) return ops::sigmoid(logits);
  if (logits.shape().back() < 2) throw ShapeError("task_head: a softmax output needs at least two classes");
  return ops::softmax(logits);
}

template <typename T>
std::vector<std::pair<std::string, Shape>> Model<T>::layout(const ModelConfig& config, std::size_t num_categories,
                                                            const TaskDecomposition& decomposition) {
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& s : param_specs(config, num_categories, decomposition)) out.emplace_back(s.name, s.shape);
  return out;
}

namespace {

void check_model_metadata(const ModelConfig& config, const CategorySet& categories,
                          const TaskDecomposition& decomposition) {
  config.validate();
  if (decomposition.num_categories() != categories.size()) {
    throw UsageError("model: decomposition covers " + std::to_string(decomposition.num_categories()) +
                     " categories but " + std::to_string(categories.size()) + " are configured");
  }
  if (config.kind == ModelKind::multitask) {
    for (const auto& g : decomposition.groups()) {
      if (g.size() > 16) {
        throw UsageError("model: a task group of " + std::to_string(g.size()) +
                         " categories would need a softmax over 2^" + std::to_string(g.size()) + " classes");
      }
    }
  }
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config, CategorySet categories, TaskDecomposition decomposition, std::uint64_t init_seed)
    : config_(std::move(config)), categories_(std::move(categories)), decomposition_(std::move(decomposition)) {
  check_model_metadata(config_, categories_, decomposition_);
  Rng rng(init_seed);
  for (const auto& spec : param_specs(config_, categories_.size(), decomposition_)) {
    NdBuffer<T> v(spec.shape);
    bool trainable = true;
    switch (spec.init) {
      case Init::he_uniform: {
        const double limit = std::sqrt(6.0 / static_cast<double>(spec.fan));
        for (auto& x : v.data()) x = static_cast<T>(rng.uniform(-limit, limit));
        break;
      }
      case Init::recurrent_uniform: {
        const double limit = 1.0 / std::sqrt(static_cast<double>(spec.fan));
        for (auto& x : v.data()) x = static_cast<T>(rng.uniform(-limit, limit));
        break;
      }
      case Init::zeros:
        break;
      case Init::ones:
        v.fill(T{1});
        break;
      case Init::running_mean:
      case Init::running_count:
        trainable = false;
        break;
      case Init::running_var:
        v.fill(T{1});
        trainable = false;
        break;
    }
    params_.add(spec.name, std::move(v), trainable);
  }
}

template <typename T>
Model<T>::Model(ModelConfig config, CategorySet categories, TaskDecomposition decomposition, ParamStore<T> params)
    : config_(std::move(config)), categories_(std::move(categories)), decomposition_(std::move(decomposition)) {
  check_model_metadata(config_, categories_, decomposition_);
  const auto specs = param_specs(config_, categories_.size(), decomposition_);
  if (params.size() != specs.size()) {
    throw DataError("model: expected " + std::to_string(specs.size()) + " parameter records, got " +
                    std::to_string(params.size()));
  }
  for (const auto& spec : specs) {
    if (!params.contains(spec.name)) throw DataError("model: missing parameter '" + spec.name + "'");
    const auto& value = params.get(spec.name).value;
    if (value.shape() != spec.shape) {
      throw DataError("model: parameter '" + spec.name + "' has shape " + shape_to_string(value.shape()) +
                      ", expected " + shape_to_string(spec.shape));
    }
    params_.add(spec.name, value, !is_running_statistic(spec.name));
  }
}

template <typename T>
ForwardResult<T> Model<T>::forward(Tape<T>& tape, const NdBuffer<T>& input) {
  Shape s = input.shape();
  if (s.size() < 2 || s.back() != config_.num_mels) {
    throw ShapeError("model: input must be [..., frames, " + std::to_string(config_.num_mels) + "], got " +
                     shape_to_string(s));
  }
  s.push_back(1);
  ForwardResult<T> r;
  Var<T> x = tape.constant(input.reshaped(s));
  const double p = config_.dropout;
  for (std::size_t b = 0; b < config_.filters.size(); ++b) {
    r.backbone.push_back(conv_block_forward(tape, params_, "backbone.block" + std::to_string(b + 1), x, p));
    x = r.backbone.back().pooled;
  }
  if (config_.kind == ModelKind::baseline) {
    r.outputs.push_back(task_head(tape, params_, "baseline.head", x, p, /*sigmoid_output=*/true));
    return r;
  }
  for (std::size_t n = 0; n < decomposition_.num_tasks(); ++n) {
    std::vector<LevelOutputs<T>> levels;
    std::optional<Var<T>> prev;
    for (std::size_t l = 0; l < config_.filters.size(); ++l) {
      const std::string p_level = task_prefix(n) + ".level" + std::to_string(l + 1);
      const BlockOutputs<T>& bb = r.backbone[l];
      LevelOutputs<T> lv;
      lv.tf_mask = tf_attention(tape, params_, p_level + ".tf_att", bb.m1);
      lv.channel_mask = channel_attention(tape, params_, p_level + ".ch_att", bb.m1);
      lv.fused = attention_fuse(lv.tf_mask, lv.channel_mask, bb.m2);
      lv.output = fuse_task_features(tape, params_, p_level, lv.fused, prev, p);
      prev = lv.output;
      levels.push_back(lv);
    }
    r.outputs.push_back(task_head(tape, params_, task_prefix(n) + ".head", *prev, p));
    r.levels.push_back(std::move(levels));
  }
  return r;
}

template <typename T>
FrameLabelMatrix predict_events(const std::vector<NdBuffer<T>>& outputs, ModelKind kind,
                                const TaskDecomposition& decomposition, double threshold) {
  if (kind == ModelKind::baseline) {
    if (outputs.size() != 1 || outputs[0].rank() != 2 || outputs[0].shape()[1] != decomposition.num_categories()) {
      throw ShapeError("predict_events: baseline expects one [frames, categories] buffer");
    }
    FrameLabelMatrix out(outputs[0].shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(outputs[0][i]) > threshold;
    return out;
  }
  if (outputs.size() != decomposition.num_tasks()) {
    throw ShapeError("predict_events: expected " + std::to_string(decomposition.num_tasks()) + " task outputs, got " +
                     std::to_string(outputs.size()));
  }
  const std::size_t frames = outputs[0].shape().at(0);
  ClassIndexMatrix idx({frames, decomposition.num_tasks()});
  const auto counts = decomposition.class_counts();
  for (std::size_t n = 0; n < outputs.size(); ++n) {
    const auto& o = outputs[n];
    if (o.rank() != 2 || o.shape()[0] != frames || o.shape()[1] != counts[n]) {
      throw ShapeError("predict_events: task " + std::to_string(n + 1) + " output " + shape_to_string(o.shape()) +
                       " should be [" + std::to_string(frames) + "x" + std::to_string(counts[n]) + "]");
    }
    const std::size_t k = o.shape()[1];
    for (std::size_t t = 0; t < frames; ++t) {
      const T* row = o.ptr() + t * k;
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = j;
      }
      idx.at(t, n) = static_cast<std::int64_t>(best);
    }
  }
  return decode_predictions(idx, decomposition);
}

#define PAED_INSTANTIATE_MODEL(T)                                                                                  \
  template BlockOutputs<T> conv_block_forward(Tape<T>&, ParamStore<T>&, const std::string&, Var<T>, double);      \
  template Var<T> tf_attention(Tape<T>&, ParamStore<T>&, const std::string&, Var<T>);                              \
  template Var<T> channel_attention(Tape<T>&, ParamStore<T>&, const std::string&, Var<T>);                         \
  template Var<T> attention_fuse(Var<T>, Var<T>, Var<T>);                                                          \
  template Var<T> fuse_task_features(Tape<T>&, ParamStore<T>&, const std::string&, Var<T>, std::optional<Var<T>>, \
                                     double);                                                                      \
  template Var<T> task_head(Tape<T>&, ParamStore<T>&, const std::string&, Var<T>, double, bool);                  \
  template class Model<T>;                                                                                         \
  template FrameLabelMatrix predict_events(const std::vector<NdBuffer<T>>&, ModelKind, const TaskDecomposition&,   \
                                           double);

PAED_INSTANTIATE_MODEL(float)
PAED_INSTANTIATE_MODEL(double)

}  // namespace paed

#include "paed/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>

#include "paed/error.hpp"

namespace paed {
namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw DataError("checkpoint: truncated while reading " + std::string(what) + " at byte " + std::to_string(pos_));
    }
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename U>
  U uint(const char* what) {
    const auto b = bytes(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v = static_cast<U>(v | (static_cast<U>(b[i]) << (8 * i)));
    return v;
  }
  std::string string(std::size_t n, const char* what) {
    const auto b = bytes(n, what);
    return std::string(b.begin(), b.end());
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

template <typename T>
NdBuffer<float> to_float(const NdBuffer<T>& b) {
  return b.template cast<float>();
}

NdBuffer<float> vector_record(const std::vector<double>& v) {
  NdBuffer<float> out({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointFile& file) {
  Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.uint(kCheckpointVersion);
  if (file.config_text.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw Error("checkpoint: config block too large");
  }
  w.uint(static_cast<std::uint32_t>(file.config_text.size()));
  w.bytes(file.config_text.data(), file.config_text.size());
  w.uint(static_cast<std::uint32_t>(file.records.size()));
  for (const auto& r : file.records) {
    if (r.name.empty() || r.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw Error("checkpoint: record name length out of range for '" + r.name + "'");
    }
    if (r.value.rank() == 0 || r.value.rank() > std::numeric_limits<std::uint8_t>::max()) {
      throw Error("checkpoint: record '" + r.name + "' has unsupported rank");
    }
    w.uint(static_cast<std::uint16_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.uint(static_cast<std::uint8_t>(r.value.rank()));
    for (std::size_t e : r.value.shape()) {
      if (e > std::numeric_limits<std::uint32_t>::max()) throw Error("checkpoint: extent too large in '" + r.name + "'");
      w.uint(static_cast<std::uint32_t>(e));
    }
    for (float v : r.value.data()) w.f32(v);
  }
  return w.take();
}

CheckpointFile decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.bytes(sizeof kCheckpointMagic, "magic");
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw DataError("checkpoint: bad magic (not a PAED file)");
  const auto version = r.uint<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointFile file;
  file.config_text = r.string(r.uint<std::uint32_t>("config length"), "config block");
  const auto count = r.uint<std::uint32_t>("record count");
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointRecord rec;
    rec.name = r.string(r.uint<std::uint16_t>("name length"), "record name");
    const auto rank = r.uint<std::uint8_t>("rank");
    if (rank == 0) throw DataError("checkpoint: record '" + rec.name + "' has rank 0");
    Shape shape;
    std::size_t n = 1;
    for (std::uint8_t a = 0; a < rank; ++a) {
      const std::size_t e = r.uint<std::uint32_t>("extent");
      if (e == 0) throw DataError("checkpoint: record '" + rec.name + "' has a zero extent");
      if (n > (bytes.size() / 4) / e) throw DataError("checkpoint: record '" + rec.name + "' is larger than the file");
      n *= e;
      shape.push_back(e);
    }
    const auto raw = r.bytes(4 * n, "record values");
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t u = std::uint32_t{raw[4 * i]} | (std::uint32_t{raw[4 * i + 1]} << 8) |
                              (std::uint32_t{raw[4 * i + 2]} << 16) | (std::uint32_t{raw[4 * i + 3]} << 24);
      values[i] = std::bit_cast<float>(u);
    }
    rec.value = NdBuffer<float>(std::move(shape), std::move(values));
    file.records.push_back(std::move(rec));
  }
  if (!r.done()) throw DataError("checkpoint: unexpected trailing bytes at " + std::to_string(r.position()));
  return file;
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  const auto bytes = encode_checkpoint(file);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed for '" + path.string() + "'");
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

FeatureStats round_to_float(const FeatureStats& stats) {
  FeatureStats out = stats;
  for (auto& v : out.mean) v = static_cast<float>(v);
  for (auto& v : out.std) v = static_cast<float>(v);
  return out;
}

template <typename T>
CheckpointFile make_checkpoint(const RunConfig& config, const FeatureStats& stats, const Model<T>& model) {
  if (stats.mean.size() != config.num_mels || stats.std.size() != config.num_mels) {
    throw Error("checkpoint: feature statistics do not have " + std::to_string(config.num_mels) + " bins");
  }
  CheckpointFile file;
  file.config_text = config.to_text();
  file.records.push_back({kFeatureMeanRecord, vector_record(stats.mean)});
  file.records.push_back({kFeatureStdRecord, vector_record(stats.std)});
  for (const auto& e : model.params().entries()) file.records.push_back({e.name, to_float(e.param.value)});
  return file;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const FeatureStats& stats,
                     const Model<T>& model) {
  write_checkpoint_file(path, make_checkpoint(config, stats, model));
}

template <typename T>
LoadedModel<T> restore_checkpoint(const CheckpointFile& file) {
  RunConfig config;
  try {
    config = RunConfig::parse(file.config_text, "checkpoint config");
    config.validate();
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: invalid config block: ") + e.what());
  }
  FeatureStats stats;
  ParamStore<T> params;
  for (const auto& r : file.records) {
    if (r.name == kFeatureMeanRecord || r.name == kFeatureStdRecord) {
      if (r.value.rank() != 1 || r.value.size() != config.num_mels) {
        throw DataError("checkpoint: record '" + r.name + "' should hold " + std::to_string(config.num_mels) +
                        " values");
      }
      auto& dst = r.name == kFeatureMeanRecord ? stats.mean : stats.std;
      dst.assign(r.value.data().begin(), r.value.data().end());
      continue;
    }
    if (params.contains(r.name)) throw DataError("checkpoint: duplicate record '" + r.name + "'");
    params.add(r.name, r.value.template cast<T>(), !is_running_statistic(r.name));
  }
  if (stats.mean.empty() || stats.std.empty()) throw DataError("checkpoint: feature statistics are missing");
  Model<T> model(config.model_config(), config.category_set(), config.task_decomposition(), std::move(params));
  return LoadedModel<T>{std::move(config), std::move(stats), std::move(model)};
}

template <typename T>
LoadedModel<T> load_checkpoint(const std::filesystem::path& path) {
  return restore_checkpoint<T>(read_checkpoint_file(path));
}

#define PAED_INSTANTIATE_CHECKPOINT(T)                                                                   \
  template CheckpointFile make_checkpoint(const RunConfig&, const FeatureStats&, const Model<T>&);      \
  template void save_checkpoint(const std::filesystem::path&, const RunConfig&, const FeatureStats&,    \
                                const Model<T>&);                                                        \
  template LoadedModel<T> restore_checkpoint(const CheckpointFile&);                                    \
  template LoadedModel<T> load_checkpoint(const std::filesystem::path&);

PAED_INSTANTIATE_CHECKPOINT(float)
PAED_INSTANTIATE_CHECKPOINT(double)

}  // namespace paed

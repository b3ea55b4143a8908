#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "paed/labelspace.hpp"

namespace paed {

/// Confusion counts with 0/0 -> 0 conventions for the derived rates.
struct PrfCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;

  double precision() const;
  double recall() const;
  /// Harmonic mean of precision and recall.
  double f1() const;

  PrfCounts& operator+=(const PrfCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const PrfCounts&, const PrfCounts&) = default;
};

struct ClassScore {
  std::string name;
  PrfCounts counts;
};

struct DegreeScore {
  int degree = 0;
  std::int64_t frames = 0;
  PrfCounts counts;
};

/// Default number of overlap degrees reported (1..6).
inline constexpr int kReportedDegrees = 6;

/// Frame-based scores. "Average" is the macro mean of per-class F1 and
/// "Overall" is the micro F1 of pooled counts.
struct EvalReport {
  std::vector<ClassScore> per_class;
  PrfCounts pooled;
  std::vector<DegreeScore> by_degree;
  /// Counts on frames without any ground-truth event (false positives only).
  PrfCounts degree_zero;
  std::int64_t frames = 0;

  double macro_f1() const;
  double macro_precision() const;
  double macro_recall() const;
  double micro_f1() const { return pooled.f1(); }
};

/// Accumulates frame counts across segments and recordings.
class FrameScorer {
 public:
  explicit FrameScorer(std::vector<std::string> class_names, int reported_degrees = kReportedDegrees);

  /// Adds rows [0, valid_frames) of two [T, Y] matrices.
  void add(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth, std::size_t valid_frames);
  void add(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth) { add(pred, truth, truth.shape().at(0)); }

  EvalReport report() const;

 private:
  std::vector<std::string> names_;
  std::vector<PrfCounts> per_class_;
  std::vector<PrfCounts> by_degree_;
  std::vector<std::int64_t> degree_frames_;
  std::int64_t frames_ = 0;
  int reported_degrees_;
};

/// Per-class, macro and micro scores of one prediction/truth pair.
EvalReport frame_prf(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth,
                     const std::vector<std::string>& class_names = {});

/// Micro F1 within each ground-truth overlap degree; degree-0 frames are skipped.
std::vector<DegreeScore> f1_by_degree(const FrameLabelMatrix& pred, const FrameLabelMatrix& truth,
                                      int reported_degrees = kReportedDegrees);

/// `name,TP,FP,FN,P,R,F1` rows followed by `macro` and `micro` rows.
void write_per_class_csv(const EvalReport& report, const std::filesystem::path& path);
/// `degree,frames,F1` rows.
void write_by_degree_csv(const EvalReport& report, const std::filesystem::path& path);

}  // namespace paed
